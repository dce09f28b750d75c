//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints exactly one PASS or FAIL line; exits non-zero on any FAIL.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ccp_core::corpus::synthetic::{instances, SynthConfig};
use ccp_core::corpus::{
    write_instances, EvalInstance, HistoryEntry, Item, ReferencePool, Review, UserHistory,
};
use ccp_core::downstream::{f1_scores, identity_linkage, mrr, RankingResult};
use ccp_core::forge::{build_baseline, build_ccp, build_scp, PromptTemplates, Role};
use ccp_core::gateway::{cost, ModelRegistry, Usage};
use ccp_core::labels::SentimentLabel;
use ccp_core::metrics::{rouge_l_tokens, MetricError, ScoreKind, SimilarityScore, SimilarityScorer};
use ccp_core::negatives::NegativeAssignment;
use ccp_core::runner::{run, RunConfig};
use ccp_core::stats::{kl_divergence, wilcoxon_exact, wilcoxon_normal, wilcoxon_one_sided, LabelHistogram};

type Check = Result<(), String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !($cond) {
            return Err(format!($($fmt)+));
        }
    };
}

fn kl_reproduction() -> Check {
    let truth = LabelHistogram::new(302, 29, 69);
    let cases = [
        ("Baseline", (393, 1, 6), 0.467),
        ("SCP", (386, 4, 10), 0.292),
        ("CCP(B)", (377, 7, 16), 0.188),
        ("CCP(G)", (359, 10, 31), 0.085),
    ];
    for (name, (p, u, n), want) in cases {
        let got = kl_divergence(&truth, &LabelHistogram::new(p, u, n), 0.0).map_err(|e| e.to_string())?;
        ensure!((got - want).abs() <= 0.001, "{name}: {got:.4} vs {want}");
    }
    Ok(())
}

fn oracle_lcs(a: &[u32], b: &[u32]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t[a.len()][b.len()]
}

fn rouge_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..1000 {
        let draw = |rng: &mut ChaCha8Rng| -> Vec<u32> {
            let len = rng.gen_range(0..=20);
            (0..len).map(|_| rng.gen_range(0..8)).collect()
        };
        let (c, r) = (draw(&mut rng), draw(&mut rng));
        let l = oracle_lcs(&c, &r) as f64;
        let p = if c.is_empty() { 0.0 } else { l / c.len() as f64 };
        let rc = if r.is_empty() { 0.0 } else { l / r.len() as f64 };
        let f = if p + rc == 0.0 {
            0.0
        } else {
            2.0 * p * rc / (p + rc)
        };
        let s = rouge_l_tokens(&c, &r);
        ensure!(
            (s.precision, s.recall, s.f) == (p, rc, f),
            "pair {i}: {c:?} / {r:?}"
        );
    }
    ensure!(
        start.elapsed() < Duration::from_secs(5),
        "took {:?}",
        start.elapsed()
    );
    Ok(())
}

fn fixture(n: usize) -> EvalInstance {
    let item = |k: usize| Item {
        item_id: format!("i{k}"),
        title: format!("Title {k}"),
        category: "Cat".into(),
        description: format!("Desc {k}"),
    };
    let review = |k: usize, text: String| Review {
        user_id: "me".into(),
        item_id: format!("i{k}"),
        text,
        rating: None,
        timestamp: k as i64,
    };
    let entries = (1..=n)
        .map(|k| HistoryEntry {
            item: item(k),
            review: review(k, format!("review {k}")),
        })
        .collect();
    EvalInstance {
        history: UserHistory::new("me", entries),
        target_item: item(n + 1),
        target_review: review(n + 1, "held out".into()),
    }
}

fn prompt_goldens() -> Check {
    const REJECTION: &str = "Absolutely different! That's not how I would answer. Please think it over carefully and generate a review for the target item that I might actually write.";
    const ACCEPT: &str = "Excellent! It really feels like something I would write. Now, I will provide the next product. Please generate a review that I might write in the same way.\n## Target item \n{'title': 'Title 6', 'category': 'Cat', 'description': 'Desc 6'}";
    let t = PromptTemplates::default();
    let inst = fixture(5);
    let neg = |ks: std::ops::RangeInclusive<usize>| -> BTreeMap<usize, NegativeAssignment> {
        ks.map(|k| (k, NegativeAssignment::fixed(k, format!("wrong {k}"))))
            .collect()
    };
    let conv = build_ccp(&t, &inst, 1, 1, &neg(5..=5)).map_err(|e| e.to_string())?;
    let m = conv.messages();
    let got: Vec<(Role, &str)> = m.iter().map(|x| (x.role, x.content.as_str())).collect();
    ensure!(m.len() == 5, "{} messages", m.len());
    ensure!(
        m[0].role == Role::User && m[0].content.contains("from 1 (oldest) to 4 (latest)"),
        "instruction block"
    );
    ensure!(
        got[1..]
            == [
                (Role::Assistant, "wrong 5"),
                (Role::User, REJECTION),
                (Role::Assistant, "review 5"),
                (Role::User, ACCEPT)
            ],
        "blocks 2..5: {:?}",
        &got[1..]
    );
    for l in 1..=4 {
        for k in 0..=l {
            let c = build_ccp(&t, &inst, l, k, &neg(5 - k + 1..=5)).map_err(|e| e.to_string())?;
            ensure!(c.len() == 1 + 2 * l + 2 * k, "l={l} m={k}: {}", c.len());
        }
    }
    let scp0 = build_scp(&t, &inst, 0).map_err(|e| e.to_string())?;
    ensure!(
        scp0.canonical_json() == build_baseline(&t, &inst).canonical_json(),
        "scp(0) differs from baseline"
    );
    Ok(())
}

fn write_fixture(dir: &Path, count: usize) -> Check {
    let recs = instances(&SynthConfig::default(), 5, count).map_err(|e| e.to_string())?;
    ensure!(recs.len() == count, "only {} synthetic instances", recs.len());
    let mut buf = Vec::new();
    write_instances(&mut buf, &recs).map_err(|e| e.to_string())?;
    fs::write(dir.join("instances.jsonl"), buf).map_err(|e| e.to_string())
}

const MOCK: &str = "[[model]]\nprovider = \"mock\"\nmodel_name = \"replay\"\nprice_in = 0.4\nprice_out = 1.6\nmock = { policy = \"style_replay\", seed = 3 }\n";
const GENERATED: &str =
    "[[method]]\nmethod = \"ccp\"\nturns = 4\nnegatives = 4\nnegative_kind = \"generated\"\n";

fn config(dir: &Path, out: &str, methods: &str) -> Result<RunConfig, String> {
    let text =
        format!("instances = \"instances.jsonl\"\noutput_dir = \"{out}\"\nseed = 5\n{MOCK}\n{methods}");
    let mut cfg = RunConfig::parse(&text).map_err(|e| e.to_string())?;
    cfg.resolve_paths(dir);
    Ok(cfg)
}

fn cost_ledger() -> Check {
    let reg = ModelRegistry::builtin();
    let million = Usage {
        input_tokens: 1_000_000,
        output_tokens: 1_000_000,
    };
    let published = [
        ("gpt-4.1-mini", 0.4, 1.6),
        ("gpt-4.1", 2.0, 8.0),
        ("o4-mini", 1.1, 4.0),
        ("llama3.3-70b", 0.72, 0.72),
        ("claude-sonnet-4", 3.0, 15.0),
    ];
    for (name, pin, pout) in published {
        let cfg = reg.get(name).ok_or(format!("{name} not registered"))?;
        let got = cost(&million, cfg);
        ensure!((got - (pin + pout)).abs() < 1e-9, "{name}: {got}");
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_fixture(dir.path(), 6)?;
    let summary = run(&config(dir.path(), "run", GENERATED)?).map_err(|e| e.to_string())?;
    ensure!(summary.failed_cells == 0, "{} failed cells", summary.failed_cells);
    ensure!(
        summary.backend_calls == 6 * 5,
        "{} calls for 6 instances",
        summary.backend_calls
    );
    Ok(())
}

fn wilcoxon_oracle() -> Check {
    let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let b = [0.0; 6];
    let exact = wilcoxon_exact(&a, &b).map_err(|e| e.to_string())?;
    ensure!(exact == 1.0 / 64.0, "exact p = {exact}");
    let chosen = wilcoxon_one_sided(&a, &b).map_err(|e| e.to_string())?;
    ensure!(chosen == 0.015625, "dispatched p = {chosen}");
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for i in 0..100 {
        let shift: f64 = rng.gen_range(-0.5..0.5);
        let a: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = a.iter().map(|x| x - shift - rng.gen_range(-0.5..0.5)).collect();
        let e = wilcoxon_exact(&a, &b).map_err(|e| e.to_string())?;
        let n = wilcoxon_normal(&a, &b).map_err(|e| e.to_string())?;
        ensure!((e - n).abs() < 0.02, "fixture {i}: exact {e} normal {n}");
    }
    Ok(())
}

struct TableScorer(HashMap<&'static str, f64>);

impl SimilarityScorer for TableScorer {
    fn kind(&self) -> ScoreKind {
        ScoreKind::LexicalFallback
    }

    fn score_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<SimilarityScore>, MetricError> {
        Ok(pairs
            .iter()
            .map(|(c, _)| {
                let f = self.0[*c];
                SimilarityScore {
                    precision: f,
                    recall: f,
                    f,
                    kind: ScoreKind::LexicalFallback,
                }
            })
            .collect())
    }
}

fn ranking_and_f1() -> Check {
    let scorer = TableScorer(HashMap::from([
        ("a", 0.9),
        ("b", 0.5),
        ("c", 0.5),
        ("d", 0.2),
        ("top", 0.95),
        ("tied", 0.5),
        ("low", 0.1),
    ]));
    let other = |u: &str, t: &str| Review {
        user_id: u.into(),
        item_id: "x".into(),
        text: t.into(),
        rating: None,
        timestamp: 0,
    };
    let pool = ReferencePool {
        item_id: "x".into(),
        reviews: vec![
            other("u1", "a"),
            other("u2", "b"),
            other("u3", "c"),
            other("u4", "d"),
        ],
    };
    let truth = other("me", "truth");
    // tied: a, b and c score >= 0.5, so three entries precede it.
    for (gen, want) in [("top", 1), ("tied", 4), ("low", 5)] {
        let r = identity_linkage("x", gen, &truth, &pool, &scorer).map_err(|e| e.to_string())?;
        ensure!(r.rank == want, "{gen}: rank {} want {want}", r.rank);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for v in 0..1000 {
        let len = rng.gen_range(1..50);
        let draw = |rng: &mut ChaCha8Rng| SentimentLabel::ALL[rng.gen_range(0..3)];
        let truth: Vec<_> = (0..len).map(|_| draw(&mut rng)).collect();
        let pred: Vec<_> = (0..len).map(|_| draw(&mut rng)).collect();
        let mut cm = [[0f64; 3]; 3];
        for (t, p) in truth.iter().zip(&pred) {
            cm[t.index()][p.index()] += 1.0;
        }
        let mut f1 = [0.0; 3];
        let mut weighted = 0.0;
        for c in 0..3 {
            let col: f64 = (0..3).map(|r| cm[r][c]).sum();
            let row: f64 = cm[c].iter().sum();
            let p = if col == 0.0 { 0.0 } else { cm[c][c] / col };
            let r = if row == 0.0 { 0.0 } else { cm[c][c] / row };
            f1[c] = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
            weighted += row / len as f64 * f1[c];
        }
        let got = f1_scores(&truth, &pred).map_err(|e| e.to_string())?;
        ensure!((got.weighted_f1 - weighted).abs() < 1e-12, "vector {v}: weighted");
        ensure!(
            (got.macro_f1 - f1.iter().sum::<f64>() / 3.0).abs() < 1e-12,
            "vector {v}: macro"
        );
    }

    let ranks: Vec<RankingResult> = [1, 2, 10]
        .iter()
        .map(|r| RankingResult::new("i", *r, 20))
        .collect();
    let got = mrr(&ranks);
    ensure!((got - 0.533_333_333_3).abs() < 1e-9, "mrr {got}");
    Ok(())
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn end_to_end() -> Check {
    let methods = format!(
        "[[method]]\nmethod = \"baseline\"\n\n[[method]]\nmethod = \"scp\"\nturns = 4\n\n[[method]]\nmethod = \"ccp\"\nturns = 4\nnegatives = 4\nnegative_kind = \"high_semantic\"\n\n{GENERATED}"
    );
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_fixture(dir.path(), 20)?;
    let start = Instant::now();
    for out in ["first", "second"] {
        let s = run(&config(dir.path(), out, &methods)?).map_err(|e| e.to_string())?;
        ensure!(
            s.cells == 80 && s.failed_cells == 0,
            "{out}: {} cells, {} failed",
            s.cells,
            s.failed_cells
        );
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "two runs took {elapsed:?}");

    let (a, b) = (dir.path().join("first"), dir.path().join("second"));
    let listing = files(&a);
    ensure!(listing == files(&b), "file sets differ");
    for f in &listing {
        ensure!(
            fs::read(a.join(f)).ok() == fs::read(b.join(f)).ok(),
            "{} differs",
            f.display()
        );
    }

    let pairwise = fs::read_to_string(a.join("pairwise.csv")).map_err(|e| e.to_string())?;
    let mut reader = csv::Reader::from_reader(pairwise.as_bytes());
    let rows: Vec<csv::StringRecord> = reader
        .records()
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let labels = ["Baseline", "SCP(4)", "CCP(B)(4,4)", "CCP(G)(4,4)"];
    for metric in ["rouge_l", "semantic"] {
        for x in labels {
            for y in labels.iter().filter(|y| **y != x) {
                let hits = rows
                    .iter()
                    .filter(|r| &r[1] == metric && &r[2] == x && &r[3] == *y)
                    .count();
                ensure!(hits == 1, "pairwise {metric} {x} vs {y}: {hits} rows");
            }
        }
    }
    ensure!(rows.len() == 24, "{} pairwise rows", rows.len());

    // Markers recomputed from the pairwise p-values: `*` against SCP(4),
    // `⋄` against Baseline, alpha 0.01, a tie (empty p) is not significant.
    let p = |metric: &str, x: &str, y: &str| -> Option<f64> {
        rows.iter()
            .find(|r| &r[1] == metric && &r[2] == x && &r[3] == y)
            .and_then(|r| r[4].parse().ok())
    };
    let report = fs::read_to_string(a.join("report.csv")).map_err(|e| e.to_string())?;
    let mut reader = csv::Reader::from_reader(report.as_bytes());
    let header = reader.headers().map_err(|e| e.to_string())?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or(format!("column {name} missing"))
    };
    let (method_col, rl_col, sem_col) = (col("method")?, col("rouge_l_marker")?, col("semantic_marker")?);
    let mut seen = 0;
    for r in reader.records() {
        let r = r.map_err(|e| e.to_string())?;
        let method = &r[method_col];
        if !labels.contains(&method) {
            continue;
        }
        seen += 1;
        for (metric, c) in [("rouge_l", rl_col), ("semantic", sem_col)] {
            let mut want = String::new();
            if method != "SCP(4)" && p(metric, method, "SCP(4)").is_some_and(|v| v < 0.01) {
                want.push('*');
            }
            if method != "Baseline" && p(metric, method, "Baseline").is_none_or(|v| v >= 0.01) {
                want.push('⋄');
            }
            ensure!(
                r[c] == want,
                "{method} {metric}: marker {:?} want {want:?}",
                &r[c]
            );
        }
    }
    ensure!(seen == 4, "{seen} method rows in report.csv");
    let md = fs::read_to_string(a.join("report.md")).map_err(|e| e.to_string())?;
    for label in labels {
        ensure!(
            md.lines().any(|l| l.starts_with(&format!("| {label} |"))),
            "report row {label} missing"
        );
    }
    for metric in ["rouge_l", "semantic"] {
        ensure!(
            md.contains(&format!("{metric}: p-value of row > column")),
            "{metric} matrix missing"
        );
    }
    Ok(())
}

fn main() {
    let criteria: [Criterion; 7] = [
        ("KL reproduction", kl_reproduction),
        ("ROUGE-L oracle equivalence", rouge_oracle),
        ("Prompt golden tests", prompt_goldens),
        ("Cost ledger", cost_ledger),
        ("Wilcoxon oracle", wilcoxon_oracle),
        ("Ranking/F1 oracles", ranking_and_f1),
        ("End-to-end reproducibility", end_to_end),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or(p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        match outcome {
            Ok(()) => println!("PASS {name} ({:.2?})", start.elapsed()),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
