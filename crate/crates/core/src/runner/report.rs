use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::records::{read_jsonl, GenerationRecord, MethodRecord, RandomRecord};
use super::{
    load_snapshot, ordered_groups, RunConfig, RunError, GENERATIONS_FILE, RANDOM_FILE, RECORDS_FILE,
};
use crate::downstream::{f1_scores, group_eval, RankingResult};
use crate::forge::PromptPlan;
use crate::labels::SentimentLabel;
use crate::metrics::ScoreKind;
use crate::stats::{
    bootstrap_ci, mean, mean_ci_t, wilcoxon_one_sided, CiMethod, ConfidenceInterval, LabelHistogram,
    StatError,
};

pub const REPORT_MD: &str = "report.md";
pub const REPORT_CSV: &str = "report.csv";
pub const PAIRWISE_CSV: &str = "pairwise.csv";
pub const COST_CSV: &str = "cost.csv";

/// One-sided p-value of "`method_a` scores higher than `method_b`".
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairwiseP {
    pub model: String,
    pub metric: String,
    pub method_a: String,
    pub method_b: String,
    /// `None` when every paired difference is zero.
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodRow {
    pub method: String,
    pub instances: usize,
    pub rouge_l: ConfidenceInterval,
    pub rouge_l_marker: String,
    pub semantic: ConfidenceInterval,
    pub semantic_marker: String,
    pub hit_at_5: ConfidenceInterval,
    pub mrr: ConfidenceInterval,
    pub generated_histogram: LabelHistogram,
    /// `None` when a generated label bin is empty and no smoothing is set.
    pub kl: Option<f64>,
    pub weighted_f1: f64,
    pub macro_f1: f64,
    pub cost_usd: f64,
    pub refine_cost_usd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelReport {
    pub model_name: String,
    /// Instances complete under every method, in run order.
    pub instances: Vec<String>,
    /// Instances with at least one failed cell.
    pub excluded: Vec<String>,
    pub semantic_kind: ScoreKind,
    pub true_histogram: LabelHistogram,
    pub rows: Vec<MethodRow>,
    pub random: Option<(ConfidenceInterval, ConfidenceInterval)>,
    pub pairwise: Vec<PairwiseP>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub alpha: f64,
    pub better_than: Option<String>,
    pub not_better_than: String,
    pub models: Vec<ModelReport>,
}

/// t interval, or a point estimate with NaN bounds below two samples.
fn t_interval(xs: &[f64], level: f64) -> Result<ConfidenceInterval, RunError> {
    match mean_ci_t(xs, level) {
        Ok(ci) => Ok(ci),
        Err(StatError::TooFewSamples { .. }) => Ok(ConfidenceInterval {
            point: mean(xs),
            lower: f64::NAN,
            upper: f64::NAN,
            level,
            method: CiMethod::TDist,
        }),
        Err(e) => Err(e.into()),
    }
}

fn ranking_cis(
    rankings: &[&RankingResult],
    cfg: &RunConfig,
) -> Result<(ConfidenceInterval, ConfidenceInterval), RunError> {
    let hits: Vec<f64> = rankings
        .iter()
        .map(|r| if r.rank <= 5 { 1.0 } else { 0.0 })
        .collect();
    let rr: Vec<f64> = rankings.iter().map(|r| 1.0 / r.rank as f64).collect();
    Ok((
        bootstrap_ci(&hits, mean, cfg.bootstrap_resamples, cfg.ci_level, cfg.seed)?,
        bootstrap_ci(&rr, mean, cfg.bootstrap_resamples, cfg.ci_level, cfg.seed)?,
    ))
}

fn p_better(a: &[f64], b: &[f64]) -> Result<Option<f64>, RunError> {
    match wilcoxon_one_sided(a, b) {
        Ok(p) => Ok(Some(p)),
        Err(StatError::DegenerateSample) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// `*` when significantly above the first reference, `⋄` when not
/// significantly above the second. A degenerate comparison is not significant.
fn marker(
    method: &str,
    better_than: Option<&str>,
    not_better_than: &str,
    p_of: &dyn Fn(&str) -> Option<Option<f64>>,
    alpha: f64,
) -> String {
    let mut out = String::new();
    if let Some(r) = better_than.filter(|r| *r != method) {
        if let Some(Some(p)) = p_of(r) {
            if p < alpha {
                out.push('*');
            }
        }
    }
    if not_better_than != method {
        if let Some(p) = p_of(not_better_than) {
            if p.is_none_or(|p| p >= alpha) {
                out.push('⋄');
            }
        }
    }
    out
}

fn method_order(cfg: &RunConfig, records: &[MethodRecord]) -> Vec<String> {
    let mut order: Vec<String> = cfg.methods.iter().map(PromptPlan::label).collect();
    for r in records {
        if !order.contains(&r.method) {
            order.push(r.method.clone());
        }
    }
    let present: BTreeSet<&str> = records.iter().map(|r| r.method.as_str()).collect();
    order.retain(|m| present.contains(m.as_str()));
    order
}

fn model_report(
    cfg: &RunConfig,
    model_name: String,
    records: Vec<MethodRecord>,
    random: &BTreeMap<&str, &RankingResult>,
) -> Result<Option<ModelReport>, RunError> {
    let methods = method_order(cfg, &records);
    let mut cells: BTreeMap<(&str, &str), &MethodRecord> = BTreeMap::new();
    let mut instance_order: Vec<&str> = Vec::new();
    for r in &records {
        if !instance_order.contains(&r.instance_id.as_str()) {
            instance_order.push(&r.instance_id);
        }
        cells.insert((r.method.as_str(), r.instance_id.as_str()), r);
    }
    let (complete, excluded): (Vec<&str>, Vec<&str>) = instance_order.iter().partition(|id| {
        methods
            .iter()
            .all(|m| cells.get(&(m.as_str(), **id)).is_some_and(|r| r.is_complete()))
    });
    if complete.is_empty() {
        log::warn!("{model_name}: no instance completed every method; left out of the report");
        return Ok(None);
    }

    let scores = |m: &str| -> Vec<&super::CellScores> {
        complete
            .iter()
            .map(|id| cells[&(m, *id)].scores.as_ref().expect("complete cell"))
            .collect()
    };
    let rouge: BTreeMap<&str, Vec<f64>> = methods
        .iter()
        .map(|m| (m.as_str(), scores(m).iter().map(|s| s.rouge_l.f).collect()))
        .collect();
    let semantic: BTreeMap<&str, Vec<f64>> = methods
        .iter()
        .map(|m| (m.as_str(), scores(m).iter().map(|s| s.semantic.f).collect()))
        .collect();
    let semantic_kind = scores(&methods[0])[0].semantic.kind;

    let mut pairwise = Vec::new();
    let mut pvals: BTreeMap<(&str, &str, &str), Option<f64>> = BTreeMap::new();
    for (metric, table) in [("rouge_l", &rouge), ("semantic", &semantic)] {
        for a in &methods {
            for b in &methods {
                if a == b {
                    continue;
                }
                let p = p_better(&table[a.as_str()], &table[b.as_str()])?;
                pvals.insert((metric, a, b), p);
                pairwise.push(PairwiseP {
                    model: model_name.clone(),
                    metric: metric.into(),
                    method_a: a.clone(),
                    method_b: b.clone(),
                    p_value: p,
                });
            }
        }
    }

    let true_labels: Vec<SentimentLabel> = scores(&methods[0])
        .iter()
        .map(|s| s.sentiment_true.label)
        .collect();
    let better_than = cfg.better_than_label();
    let mut rows = Vec::with_capacity(methods.len());
    for m in &methods {
        let s = scores(m);
        let gen_labels: Vec<SentimentLabel> = s.iter().map(|c| c.sentiment_generated.label).collect();
        let group = group_eval(&true_labels, &gen_labels, cfg.kl_smoothing);
        let generated_histogram = LabelHistogram::from_labels(&gen_labels);
        let kl = match group {
            Ok(g) => Some(g.kl),
            Err(crate::downstream::EvalError::Stat(StatError::ZeroGeneratedBin(_))) => None,
            Err(e) => return Err(e.into()),
        };
        let f1 = f1_scores(&true_labels, &gen_labels)?;
        let rankings: Vec<&RankingResult> = s.iter().map(|c| &c.ranking).collect();
        let (hit_at_5, mrr) = ranking_cis(&rankings, cfg)?;
        let mark = |metric: &'static str| {
            marker(
                m,
                better_than.as_deref(),
                &cfg.not_better_than,
                &|r: &str| pvals.get(&(metric, m.as_str(), r)).copied(),
                cfg.alpha,
            )
        };
        let (cost_usd, refine_cost_usd) = records
            .iter()
            .filter(|r| r.method == *m)
            .fold((0.0, 0.0), |(c, sr), r| (c + r.cost_usd, sr + r.refine_cost_usd));
        rows.push(MethodRow {
            method: m.clone(),
            instances: complete.len(),
            rouge_l: t_interval(&rouge[m.as_str()], cfg.ci_level)?,
            rouge_l_marker: mark("rouge_l"),
            semantic: t_interval(&semantic[m.as_str()], cfg.ci_level)?,
            semantic_marker: mark("semantic"),
            hit_at_5,
            mrr,
            generated_histogram,
            kl,
            weighted_f1: f1.weighted_f1,
            macro_f1: f1.macro_f1,
            cost_usd,
            refine_cost_usd,
        });
    }

    let random_rankings: Vec<&RankingResult> =
        complete.iter().filter_map(|id| random.get(id).copied()).collect();
    let random = if random_rankings.len() == complete.len() {
        Some(ranking_cis(&random_rankings, cfg)?)
    } else {
        None
    };

    Ok(Some(ModelReport {
        model_name,
        instances: complete.iter().map(|s| s.to_string()).collect(),
        excluded: excluded.iter().map(|s| s.to_string()).collect(),
        semantic_kind,
        true_histogram: LabelHistogram::from_labels(&true_labels),
        rows,
        random,
        pairwise,
    }))
}

/// Aggregates cell records into per-model tables. Only instances complete
/// under every method of a model enter its means and tests.
pub fn build_report(
    cfg: &RunConfig,
    records: Vec<MethodRecord>,
    random: &[RandomRecord],
) -> Result<Report, RunError> {
    if records.is_empty() {
        return Err(RunError::EmptyRun("no records".into()));
    }
    let random: BTreeMap<&str, &RankingResult> = random
        .iter()
        .map(|r| (r.instance_id.as_str(), &r.ranking))
        .collect();
    let models = ordered_groups(records, |r| r.model_name.clone())
        .into_iter()
        .map(|(name, recs)| model_report(cfg, name, recs, &random))
        .filter_map(Result::transpose)
        .collect::<Result<Vec<_>, _>>()?;
    if models.is_empty() {
        return Err(RunError::EmptyRun(
            "no model has an instance that completed every method".into(),
        ));
    }
    Ok(Report {
        alpha: cfg.alpha,
        better_than: cfg.better_than_label(),
        not_better_than: cfg.not_better_than.clone(),
        models,
    })
}

fn f3(x: f64) -> String {
    if x.is_nan() {
        "n/a".into()
    } else {
        format!("{x:.3}")
    }
}

fn ci_cell(ci: &ConfidenceInterval, marker: &str) -> String {
    let base = if ci.lower.is_nan() {
        f3(ci.point)
    } else {
        format!("{} [{}, {}]", f3(ci.point), f3(ci.lower), f3(ci.upper))
    };
    if marker.is_empty() {
        base
    } else {
        format!("{base} {marker}")
    }
}

fn p_cell(p: Option<f64>) -> String {
    match p {
        Some(p) if p < 1e-4 => format!("{p:.1e}"),
        Some(p) => format!("{p:.4}"),
        None => "tie".into(),
    }
}

pub fn render_markdown(report: &Report) -> String {
    let mut s = String::from("# Run report\n\n");
    let _ = writeln!(
        s,
        "One-sided Wilcoxon signed-rank tests at alpha = {}. Intervals are {}% t intervals for similarity and bootstrap intervals for ranking.",
        report.alpha,
        report
            .models
            .first()
            .and_then(|m| m.rows.first())
            .map_or(95.0, |r| r.rouge_l.level * 100.0)
    );
    if let Some(b) = &report.better_than {
        let _ = writeln!(s, "`*` marks significantly better than {b}.");
    }
    let _ = writeln!(
        s,
        "`⋄` marks not significantly better than {}.",
        report.not_better_than
    );
    for m in &report.models {
        let _ = writeln!(s, "\n## {}\n", m.model_name);
        let _ = writeln!(
            s,
            "Instances: {} complete, {} excluded.",
            m.instances.len(),
            m.excluded.len()
        );
        if !m.excluded.is_empty() {
            let _ = writeln!(s, "Excluded (incomplete): {}.", m.excluded.join(", "));
        }
        let t = &m.true_histogram;
        let _ = writeln!(
            s,
            "True sentiment counts (pos/neu/neg): {}/{}/{}.\n",
            t.positive, t.neutral, t.negative
        );
        let _ = writeln!(
            s,
            "| Method | ROUGE-L | Semantic ({}) | Hit@5 | MRR | Sentiment (pos/neu/neg) | KL | Weighted F1 | Macro F1 | Cost (USD) | Self-Refine cost (USD) |",
            m.semantic_kind.as_str()
        );
        s.push_str("|---|---|---|---|---|---|---|---|---|---|---|\n");
        for r in &m.rows {
            let g = &r.generated_histogram;
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {}/{}/{} | {} | {} | {} | {:.4} | {:.4} |",
                r.method,
                ci_cell(&r.rouge_l, &r.rouge_l_marker),
                ci_cell(&r.semantic, &r.semantic_marker),
                ci_cell(&r.hit_at_5, ""),
                ci_cell(&r.mrr, ""),
                g.positive,
                g.neutral,
                g.negative,
                r.kl.map_or("n/a".into(), f3),
                f3(r.weighted_f1),
                f3(r.macro_f1),
                r.cost_usd,
                r.refine_cost_usd
            );
        }
        if let Some((hit, mrr)) = &m.random {
            let _ = writeln!(
                s,
                "| Random | - | - | {} | {} | - | - | - | - | - | - |",
                ci_cell(hit, ""),
                ci_cell(mrr, "")
            );
        }
        if m.rows.len() > 1 {
            for metric in ["rouge_l", "semantic"] {
                let _ = writeln!(s, "\n{metric}: p-value of row > column\n");
                s.push_str("| |");
                for r in &m.rows {
                    let _ = write!(s, " {} |", r.method);
                }
                s.push('\n');
                s.push_str("|---|");
                s.push_str(&"---|".repeat(m.rows.len()));
                s.push('\n');
                for a in &m.rows {
                    let _ = write!(s, "| {} |", a.method);
                    for b in &m.rows {
                        let cell = if a.method == b.method {
                            "-".to_owned()
                        } else {
                            let p = m
                                .pairwise
                                .iter()
                                .find(|p| {
                                    p.metric == metric && p.method_a == a.method && p.method_b == b.method
                                })
                                .and_then(|p| p.p_value);
                            p_cell(p)
                        };
                        let _ = write!(s, " {cell} |");
                    }
                    s.push('\n');
                }
            }
        }
    }
    s
}

#[derive(Serialize)]
struct CsvRow<'a> {
    model: &'a str,
    method: &'a str,
    instances: usize,
    excluded: usize,
    rouge_l: f64,
    rouge_l_lower: f64,
    rouge_l_upper: f64,
    rouge_l_marker: &'a str,
    semantic: f64,
    semantic_lower: f64,
    semantic_upper: f64,
    semantic_kind: &'a str,
    semantic_marker: &'a str,
    hit_at_5: f64,
    hit_at_5_lower: f64,
    hit_at_5_upper: f64,
    mrr: f64,
    mrr_lower: f64,
    mrr_upper: f64,
    kl: Option<f64>,
    weighted_f1: f64,
    macro_f1: f64,
    cost_usd: f64,
    refine_cost_usd: f64,
}

fn render_report_csv(report: &Report) -> Result<String, RunError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for m in &report.models {
        for r in &m.rows {
            w.serialize(CsvRow {
                model: &m.model_name,
                method: &r.method,
                instances: r.instances,
                excluded: m.excluded.len(),
                rouge_l: r.rouge_l.point,
                rouge_l_lower: r.rouge_l.lower,
                rouge_l_upper: r.rouge_l.upper,
                rouge_l_marker: &r.rouge_l_marker,
                semantic: r.semantic.point,
                semantic_lower: r.semantic.lower,
                semantic_upper: r.semantic.upper,
                semantic_kind: m.semantic_kind.as_str(),
                semantic_marker: &r.semantic_marker,
                hit_at_5: r.hit_at_5.point,
                hit_at_5_lower: r.hit_at_5.lower,
                hit_at_5_upper: r.hit_at_5.upper,
                mrr: r.mrr.point,
                mrr_lower: r.mrr.lower,
                mrr_upper: r.mrr.upper,
                kl: r.kl,
                weighted_f1: r.weighted_f1,
                macro_f1: r.macro_f1,
                cost_usd: r.cost_usd,
                refine_cost_usd: r.refine_cost_usd,
            })?;
        }
        if let Some((hit, mrr)) = &m.random {
            w.serialize(CsvRow {
                model: &m.model_name,
                method: "Random",
                instances: m.instances.len(),
                excluded: m.excluded.len(),
                rouge_l: f64::NAN,
                rouge_l_lower: f64::NAN,
                rouge_l_upper: f64::NAN,
                rouge_l_marker: "",
                semantic: f64::NAN,
                semantic_lower: f64::NAN,
                semantic_upper: f64::NAN,
                semantic_kind: m.semantic_kind.as_str(),
                semantic_marker: "",
                hit_at_5: hit.point,
                hit_at_5_lower: hit.lower,
                hit_at_5_upper: hit.upper,
                mrr: mrr.point,
                mrr_lower: mrr.lower,
                mrr_upper: mrr.upper,
                kl: None,
                weighted_f1: f64::NAN,
                macro_f1: f64::NAN,
                cost_usd: 0.0,
                refine_cost_usd: 0.0,
            })?;
        }
    }
    into_string(w)
}

fn render_pairwise_csv(report: &Report) -> Result<String, RunError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for m in &report.models {
        for p in &m.pairwise {
            w.serialize(p)?;
        }
    }
    into_string(w)
}

fn into_string(w: csv::Writer<Vec<u8>>) -> Result<String, RunError> {
    let bytes = w.into_inner().map_err(|e| RunError::Record(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| RunError::Record(e.to_string()))
}

/// Recomputes the report of a run directory and rewrites `report.md`,
/// `report.csv` and `pairwise.csv`.
pub fn report(run_dir: &Path) -> Result<Report, RunError> {
    let cfg = load_snapshot(run_dir)?;
    let records: Vec<MethodRecord> = read_jsonl(&run_dir.join(RECORDS_FILE))?;
    let random_path = run_dir.join(RANDOM_FILE);
    let random: Vec<RandomRecord> = if random_path.exists() {
        read_jsonl(&random_path)?
    } else {
        Vec::new()
    };
    let rep = build_report(&cfg, records, &random)?;
    fs::write(run_dir.join(REPORT_MD), render_markdown(&rep))?;
    fs::write(run_dir.join(REPORT_CSV), render_report_csv(&rep)?)?;
    fs::write(run_dir.join(PAIRWISE_CSV), render_pairwise_csv(&rep)?)?;
    Ok(rep)
}

/// Spend per (model, method). Self-Refine calls are kept apart from the
/// calls of the method they refine.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRow {
    pub model: String,
    pub method: String,
    pub calls: usize,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub base_cost_usd: f64,
    pub self_refine_calls: usize,
    pub self_refine_cost_usd: f64,
}

pub fn cost_rows(generations: &[GenerationRecord]) -> Vec<CostRow> {
    ordered_groups(generations.iter(), |g| (g.model_name.clone(), g.method.clone()))
        .into_iter()
        .map(|((model, method), gens)| {
            let mut row = CostRow {
                model,
                method,
                calls: 0,
                input_tokens: 0,
                output_tokens: 0,
                base_cost_usd: 0.0,
                self_refine_calls: 0,
                self_refine_cost_usd: 0.0,
            };
            for g in gens {
                row.input_tokens += g.usage.input_tokens;
                row.output_tokens += g.usage.output_tokens;
                if g.stage.is_self_refine() {
                    row.self_refine_calls += 1;
                    row.self_refine_cost_usd += g.cost_usd;
                } else {
                    row.calls += 1;
                    row.base_cost_usd += g.cost_usd;
                }
            }
            row
        })
        .collect()
}

pub fn render_cost_csv(rows: &[CostRow]) -> Result<String, RunError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    into_string(w)
}

/// Reads `generations.jsonl` and writes `cost.csv`.
pub fn cost_report(run_dir: &Path) -> Result<Vec<CostRow>, RunError> {
    let generations: Vec<GenerationRecord> = read_jsonl(&run_dir.join(GENERATIONS_FILE))?;
    let rows = cost_rows(&generations);
    fs::write(run_dir.join(COST_CSV), render_cost_csv(&rows)?)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::downstream::SentimentPrediction;
    use crate::gateway::Usage;
    use crate::metrics::SimilarityScore;
    use crate::runner::records::{CellScores, Stage};

    fn cfg(methods: Vec<PromptPlan>) -> RunConfig {
        RunConfig {
            methods,
            ..RunConfig::parse("instances = \"x\"\noutput_dir = \".\"\n[[method]]\nmethod = \"baseline\"\n")
                .unwrap()
        }
    }

    fn cell(method: &str, inst: usize, score: f64) -> MethodRecord {
        let s = SimilarityScore::from_pr(score, score, ScoreKind::RougeL);
        let pos = SentimentPrediction::from_scores([1.0, 0.0, 0.0]).unwrap();
        MethodRecord {
            instance_id: format!("i{inst}"),
            domain: "d".into(),
            model_name: "m".into(),
            method: method.into(),
            error: None,
            conversation_hash: String::new(),
            messages: 1,
            output_text: String::new(),
            base_output: None,
            negatives: Vec::new(),
            scores: Some(CellScores {
                rouge_l: s,
                semantic: SimilarityScore {
                    kind: ScoreKind::LexicalFallback,
                    ..s
                },
                ranking: RankingResult::new(format!("i{inst}"), 1 + inst % 7, 10),
                sentiment_true: pos,
                sentiment_generated: pos,
            }),
            calls: 1,
            cost_usd: 0.5,
            refine_cost_usd: 0.0,
        }
    }

    #[test]
    fn single_method_has_no_markers() {
        let c = cfg(vec![PromptPlan::scp(4)]);
        let recs: Vec<_> = (0..5).map(|i| cell("SCP(4)", i, 0.1 * i as f64)).collect();
        let rep = build_report(&c, recs, &[]).unwrap();
        let row = &rep.models[0].rows[0];
        assert_eq!(
            (row.rouge_l_marker.as_str(), row.semantic_marker.as_str()),
            ("", "")
        );
        assert!(rep.models[0].pairwise.is_empty());
    }

    #[test]
    fn identical_scores_get_the_not_better_marker() {
        let c = cfg(vec![PromptPlan::baseline(), PromptPlan::scp(4)]);
        let mut recs = Vec::new();
        for i in 0..6 {
            recs.push(cell("Baseline", i, 0.2 + 0.01 * i as f64));
            recs.push(cell("SCP(4)", i, 0.2 + 0.01 * i as f64));
        }
        let rep = build_report(&c, recs, &[]).unwrap();
        let scp = &rep.models[0].rows[1];
        assert_eq!(scp.rouge_l_marker, "⋄");
        assert!(rep.models[0].pairwise.iter().all(|p| p.p_value.is_none()));
    }

    #[test]
    fn uniform_win_over_twenty_instances_is_significant() {
        let ccp = PromptPlan::ccp(crate::forge::NegativeKind::HighSemantic, 4, 4);
        let c = cfg(vec![PromptPlan::baseline(), PromptPlan::scp(4), ccp]);
        let mut recs = Vec::new();
        for i in 0..20 {
            let base = 0.1 + 0.001 * i as f64;
            recs.push(cell("Baseline", i, base));
            recs.push(cell("SCP(4)", i, base + 0.05));
            recs.push(cell("CCP(B)(4,4)", i, base + 0.05 + 0.002 * (i + 1) as f64));
        }
        let rep = build_report(&c, recs, &[]).unwrap();
        let rows = &rep.models[0].rows;
        assert_eq!(rows[0].rouge_l_marker, "");
        assert_eq!(rows[1].rouge_l_marker, "");
        assert_eq!(rows[2].rouge_l_marker, "*");
        let p = rep.models[0]
            .pairwise
            .iter()
            .find(|p| p.metric == "rouge_l" && p.method_a == "CCP(B)(4,4)" && p.method_b == "SCP(4)")
            .unwrap();
        assert!(p.p_value.unwrap() < 0.01);
    }

    #[test]
    fn failed_cells_exclude_the_instance_everywhere() {
        let c = cfg(vec![PromptPlan::baseline(), PromptPlan::scp(4)]);
        let mut recs = Vec::new();
        for i in 0..4 {
            recs.push(cell("Baseline", i, 0.3));
            let mut r = cell("SCP(4)", i, 0.4);
            if i == 2 {
                r.error = Some("backend failed".into());
                r.scores = None;
            }
            recs.push(r);
        }
        let rep = build_report(&c, recs, &[]).unwrap();
        let m = &rep.models[0];
        assert_eq!(m.instances, vec!["i0", "i1", "i3"]);
        assert_eq!(m.excluded, vec!["i2"]);
        assert!(m.rows.iter().all(|r| r.instances == 3));
        let md = render_markdown(&rep);
        assert!(md.contains("Excluded (incomplete): i2."));
    }

    #[test]
    fn model_without_complete_instances_is_left_out() {
        let c = cfg(vec![PromptPlan::scp(4)]);
        let mut recs: Vec<_> = (0..3).map(|i| cell("SCP(4)", i, 0.2)).collect();
        for i in 0..3 {
            let mut r = cell("SCP(4)", i, 0.0);
            r.model_name = "down".into();
            r.error = Some("auth".into());
            r.scores = None;
            recs.push(r);
        }
        let rep = build_report(&c, recs.clone(), &[]).unwrap();
        assert_eq!(rep.models.len(), 1);
        assert_eq!(rep.models[0].model_name, "m");
        let only_failed: Vec<_> = recs.into_iter().filter(|r| r.model_name == "down").collect();
        assert!(matches!(
            build_report(&c, only_failed, &[]),
            Err(RunError::EmptyRun(_))
        ));
    }

    #[test]
    fn cost_rows_split_self_refine() {
        let g = |method: &str, stage: Stage, cost: f64| GenerationRecord {
            instance_id: "i".into(),
            method: method.into(),
            model_name: "m".into(),
            stage,
            turn: None,
            conversation_hash: String::new(),
            output_text: String::new(),
            usage: Usage {
                input_tokens: 10,
                output_tokens: 2,
            },
            cost_usd: cost,
            cached: false,
            timestamp: 0,
        };
        let gens = vec![
            g("SCP(4)+SR", Stage::Final, 0.25),
            g("SCP(4)+SR", Stage::SelfRefineCritique, 0.5),
            g("SCP(4)+SR", Stage::SelfRefineRewrite, 0.125),
            g("Baseline", Stage::Final, 1.0),
        ];
        let rows = cost_rows(&gens);
        assert_eq!(rows.len(), 2);
        assert_eq!((rows[0].calls, rows[0].self_refine_calls), (1, 2));
        assert_eq!(rows[0].base_cost_usd, 0.25);
        assert_eq!(rows[0].self_refine_cost_usd, 0.625);
        assert_eq!(rows[0].input_tokens, 30);
        assert_eq!(rows[1].base_cost_usd, 1.0);
        let csv = render_cost_csv(&rows).unwrap();
        assert!(csv.starts_with("model,method,calls,"));
    }
}
