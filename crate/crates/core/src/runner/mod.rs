//! End-to-end experiment runs.
//!
//! [`run`] executes every configured (model, instance, method) cell and
//! writes a run directory:
//!
//! | file | contents |
//! |------|----------|
//! | `config.toml` | the configuration that produced the run |
//! | `records.jsonl` | one [`MethodRecord`] per cell |
//! | `generations.jsonl` | one [`GenerationRecord`] per model call |
//! | `random.jsonl` | random-selection linkage reference per instance |
//! | `report.md`, `report.csv`, `pairwise.csv` | see [`report`] |
//! | `cost.csv` | see [`cost_report`] |
//!
//! Every file is ordered by (model, instance, method, call), so a mock run is
//! byte-reproducible regardless of thread scheduling. Interrupted runs resume
//! through the response cache.

mod config;
mod records;
mod report;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use config::{BackendChoice, RunConfig};
pub use records::{read_jsonl, write_jsonl, CellScores, GenerationRecord, MethodRecord, RandomRecord, Stage};
pub use report::{
    build_report, cost_report, cost_rows, render_cost_csv, render_markdown, report, CostRow, MethodRow,
    ModelReport, PairwiseP, Report, COST_CSV, PAIRWISE_CSV, REPORT_CSV, REPORT_MD,
};

use crate::corpus::{read_instances, CorpusError, EvalInstance, InstanceRecord, UserHistory};
use crate::downstream::{
    classify_sentiment, identity_linkage, random_linkage, EvalError, LexiconClassifier, SentimentClassifier,
    SentimentPrediction,
};
use crate::forge::{
    build_baseline, build_ccp, build_scp, build_self_refine, Conversation, ForgeError, Method, NegativeKind,
    PromptPlan, PromptTemplates,
};
use crate::gateway::{Gateway, GatewayError, Generation, ModelHandle, ResponseCache, RetryPolicy};
use crate::metrics::{rouge_l, LexicalFallbackScorer, MetricError, RougeLScorer, SimilarityScorer};
use crate::negatives::{generate_negatives, select_negatives, NegativeError, SelectMode};
use crate::sidecar::{SidecarClient, SidecarConfig, SidecarScorer, SidecarSentiment};
use crate::stats::StatError;

pub const CONFIG_FILE: &str = "config.toml";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const GENERATIONS_FILE: &str = "generations.jsonl";
pub const RANDOM_FILE: &str = "random.jsonl";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    IoPlain(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("malformed record: {0}")]
    Record(String),
    #[error("nothing to report: {0}")]
    EmptyRun(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Forge(#[from] ForgeError),
    #[error(transparent)]
    Negative(#[from] NegativeError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Stat(#[from] StatError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub cells: usize,
    pub failed_cells: usize,
    pub backend_calls: usize,
    pub cache_hits: usize,
}

/// Keeps the `n` most recent history entries.
fn truncate_history(instance: &EvalInstance, n: usize) -> Result<EvalInstance, RunError> {
    let have = instance.n();
    if have < n {
        return Err(CorpusError::InsufficientHistory {
            user_id: instance.user_id().to_owned(),
            have,
            need: n,
        }
        .into());
    }
    Ok(EvalInstance {
        history: UserHistory::new(
            instance.history.user_id.clone(),
            instance.history.entries[have - n..].to_vec(),
        ),
        target_item: instance.target_item.clone(),
        target_review: instance.target_review.clone(),
    })
}

/// Instances of the run: truncated to `n` and, when `sample > 0`, a seeded
/// subset kept in file order.
pub fn load_run_instances(cfg: &RunConfig) -> Result<Vec<InstanceRecord>, RunError> {
    let mut all = read_instances(&cfg.instances)?;
    if cfg.sample > 0 && cfg.sample < all.len() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut keep = index::sample(&mut rng, all.len(), cfg.sample).into_vec();
        keep.sort_unstable();
        all = keep.into_iter().map(|i| all[i].clone()).collect();
    }
    all.into_iter()
        .map(|mut rec| {
            rec.instance = truncate_history(&rec.instance, cfg.n)?;
            Ok(rec)
        })
        .collect()
}

fn sidecar_client(cfg: &RunConfig) -> Result<SidecarClient, RunError> {
    Ok(SidecarClient::new(SidecarConfig::new(cfg.sidecar_url.clone()))?)
}

fn semantic_scorer(cfg: &RunConfig) -> Result<Box<dyn SimilarityScorer>, RunError> {
    Ok(match cfg.scorer {
        BackendChoice::Fallback => Box::new(LexicalFallbackScorer),
        BackendChoice::Sidecar => Box::new(SidecarScorer::new(sidecar_client(cfg)?)),
    })
}

fn sentiment_classifier(cfg: &RunConfig) -> Result<Box<dyn SentimentClassifier>, RunError> {
    Ok(match cfg.sentiment {
        BackendChoice::Fallback => Box::new(LexiconClassifier),
        BackendChoice::Sidecar => Box::new(SidecarSentiment::new(sidecar_client(cfg)?)),
    })
}

struct Ctx<'a> {
    templates: &'a PromptTemplates,
    gateway: &'a Gateway,
    semantic: &'a dyn SimilarityScorer,
    sentiment: &'a dyn SentimentClassifier,
}

struct CellOutput {
    record: MethodRecord,
    generations: Vec<GenerationRecord>,
}

fn now_or_zero(model: &ModelHandle) -> i64 {
    if model.config.is_mock() {
        return 0;
    }
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs() as i64)
        .unwrap_or(0)
}

fn gen_record(
    rec: &InstanceRecord,
    label: &str,
    model: &ModelHandle,
    stage: Stage,
    turn: Option<usize>,
    conv: &Conversation,
    g: &Generation,
) -> GenerationRecord {
    GenerationRecord {
        instance_id: rec.instance_id.clone(),
        method: label.to_owned(),
        model_name: model.config.model_name.clone(),
        stage,
        turn,
        conversation_hash: conv.hash(),
        output_text: g.text.clone(),
        usage: g.usage,
        cost_usd: g.cost_usd,
        cached: g.cached,
        timestamp: now_or_zero(model),
    }
}

fn run_cell(
    ctx: &Ctx<'_>,
    model: &ModelHandle,
    rec: &InstanceRecord,
    plan: &PromptPlan,
    truth_sentiment: &SentimentPrediction,
) -> CellOutput {
    let label = plan.label();
    let mut record = MethodRecord {
        instance_id: rec.instance_id.clone(),
        domain: rec.domain.clone(),
        model_name: model.config.model_name.clone(),
        method: label.clone(),
        error: None,
        conversation_hash: String::new(),
        messages: 0,
        output_text: String::new(),
        base_output: None,
        negatives: Vec::new(),
        scores: None,
        calls: 0,
        cost_usd: 0.0,
        refine_cost_usd: 0.0,
    };
    let mut generations = Vec::new();
    let result = execute_cell(
        ctx,
        model,
        rec,
        plan,
        truth_sentiment,
        &mut record,
        &mut generations,
    );
    record.calls = generations.len();
    for g in &generations {
        if g.stage.is_self_refine() {
            record.refine_cost_usd += g.cost_usd;
        } else {
            record.cost_usd += g.cost_usd;
        }
    }
    if let Err(e) = result {
        log::warn!("{} {} {}: {e}", model.config.model_name, rec.instance_id, label);
        record.error = Some(e.to_string());
        record.scores = None;
    }
    CellOutput { record, generations }
}

fn execute_cell(
    ctx: &Ctx<'_>,
    model: &ModelHandle,
    rec: &InstanceRecord,
    plan: &PromptPlan,
    truth_sentiment: &SentimentPrediction,
    record: &mut MethodRecord,
    generations: &mut Vec<GenerationRecord>,
) -> Result<(), RunError> {
    let inst = &rec.instance;
    let label = record.method.clone();
    let t = ctx.templates;
    let conv = match plan.method {
        Method::Baseline => build_baseline(t, inst),
        Method::Scp => build_scp(t, inst, plan.turns)?,
        Method::Ccp => {
            let pools = |id: &str| rec.pool(id);
            let lexical = RougeLScorer;
            let assigned = match plan.negative_kind {
                NegativeKind::HighSemantic => {
                    select_negatives(inst, plan.negatives, pools, ctx.semantic, SelectMode::Highest)?
                }
                NegativeKind::LowSemantic => {
                    select_negatives(inst, plan.negatives, pools, ctx.semantic, SelectMode::Lowest)?
                }
                NegativeKind::HighLexical => {
                    select_negatives(inst, plan.negatives, pools, &lexical, SelectMode::Highest)?
                }
                NegativeKind::LowLexical => {
                    select_negatives(inst, plan.negatives, pools, &lexical, SelectMode::Lowest)?
                }
                NegativeKind::Generated => {
                    let out = generate_negatives(t, inst, plan.turns, ctx.gateway, model)?;
                    for call in &out.calls {
                        generations.push(gen_record(
                            rec,
                            &label,
                            model,
                            Stage::Negative,
                            Some(call.turn),
                            &call.conversation,
                            &call.generation,
                        ));
                    }
                    out.assignments
                }
                NegativeKind::None => {
                    return Err(RunError::Config(format!("{label}: CCP needs a negative kind")))
                }
            };
            record.negatives = assigned.values().cloned().collect();
            build_ccp(t, inst, plan.turns, plan.negatives, &assigned)?
        }
    };

    let g = ctx.gateway.complete(model, &conv)?;
    generations.push(gen_record(rec, &label, model, Stage::Final, None, &conv, &g));
    let (output, final_conv) = if plan.self_refine {
        let sr = build_self_refine(t, &conv, &g.text)?;
        let critique = ctx.gateway.complete(model, &sr.critique)?;
        generations.push(gen_record(
            rec,
            &label,
            model,
            Stage::SelfRefineCritique,
            None,
            &sr.critique,
            &critique,
        ));
        let rewrite_conv = sr.rewrite(critique.text.clone());
        let rewrite = ctx.gateway.complete(model, &rewrite_conv)?;
        generations.push(gen_record(
            rec,
            &label,
            model,
            Stage::SelfRefineRewrite,
            None,
            &rewrite_conv,
            &rewrite,
        ));
        record.base_output = Some(g.text);
        (rewrite.text, rewrite_conv)
    } else {
        (g.text, conv)
    };
    record.conversation_hash = final_conv.hash();
    record.messages = final_conv.len();
    record.output_text = output.clone();

    let truth = &inst.target_review;
    let pool = rec
        .pool(&inst.target_item.item_id)
        .ok_or_else(|| NegativeError::MissingPool(inst.target_item.item_id.clone()))?;
    record.scores = Some(CellScores {
        rouge_l: rouge_l(&output, &truth.text),
        semantic: ctx.semantic.score(&output, &truth.text)?,
        ranking: identity_linkage(&rec.instance_id, &output, truth, pool, ctx.semantic)?,
        sentiment_true: *truth_sentiment,
        sentiment_generated: classify_sentiment(&output, ctx.sentiment)?,
    });
    Ok(())
}

/// All cells of one model, instances processed by `parallelism` workers.
fn run_model(
    ctx: &Ctx<'_>,
    model: &ModelHandle,
    instances: &[InstanceRecord],
    methods: &[PromptPlan],
    truth_sentiment: &[SentimentPrediction],
    parallelism: usize,
) -> Vec<Vec<CellOutput>> {
    let slots: Vec<Mutex<Option<Vec<CellOutput>>>> = instances.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let done = AtomicUsize::new(0);
    let workers = parallelism.clamp(1, instances.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= instances.len() {
                    break;
                }
                let cells = methods
                    .iter()
                    .map(|plan| run_cell(ctx, model, &instances[i], plan, &truth_sentiment[i]))
                    .collect();
                *slots[i].lock().expect("slot lock") = Some(cells);
                let d = done.fetch_add(1, Ordering::SeqCst) + 1;
                log::info!("{}: {d}/{} instances", model.config.model_name, instances.len());
            });
        }
    });
    slots
        .into_iter()
        .map(|m| {
            m.into_inner()
                .expect("slot lock")
                .expect("every instance processed")
        })
        .collect()
}

/// Executes the configured experiment and writes the run directory.
pub fn run(cfg: &RunConfig) -> Result<RunSummary, RunError> {
    cfg.validate()?;
    let models = cfg
        .resolve_models()?
        .into_iter()
        .map(ModelHandle::from_config)
        .collect::<Result<Vec<_>, _>>()?;
    let templates = match &cfg.templates_dir {
        Some(dir) => PromptTemplates::load_dir(dir)?,
        None => PromptTemplates::default(),
    };
    let instances = load_run_instances(cfg)?;
    if instances.is_empty() {
        return Err(RunError::Config(format!(
            "{} holds no instances",
            cfg.instances.display()
        )));
    }
    let cache = match &cfg.cache_dir {
        Some(dir) => Some(ResponseCache::open(dir).map_err(|e| RunError::Io {
            path: dir.clone(),
            source: e,
        })?),
        None => None,
    };
    let gateway = Gateway::new(cache, RetryPolicy::default(), cfg.parallelism.max(1));
    let semantic = semantic_scorer(cfg)?;
    let sentiment = sentiment_classifier(cfg)?;

    let truth_texts: Vec<&str> = instances
        .iter()
        .map(|r| r.instance.target_review.text.as_str())
        .collect();
    let truth_sentiment = sentiment.classify_batch(&truth_texts)?;
    if truth_sentiment.len() != instances.len() {
        return Err(MetricError::Protocol("sentiment batch size mismatch".into()).into());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut random = Vec::with_capacity(instances.len());
    for rec in &instances {
        let inst = &rec.instance;
        let Some(pool) = rec.pool(&inst.target_item.item_id) else {
            continue;
        };
        random.push(RandomRecord {
            instance_id: rec.instance_id.clone(),
            ranking: random_linkage(
                &rec.instance_id,
                &inst.target_review,
                pool,
                semantic.as_ref(),
                &mut rng,
            )?,
        });
    }

    let ctx = Ctx {
        templates: &templates,
        gateway: &gateway,
        semantic: semantic.as_ref(),
        sentiment: sentiment.as_ref(),
    };
    let mut records = Vec::new();
    let mut generations = Vec::new();
    for model in &models {
        for cells in run_model(
            &ctx,
            model,
            &instances,
            &cfg.methods,
            &truth_sentiment,
            cfg.parallelism,
        ) {
            for cell in cells {
                records.push(cell.record);
                generations.extend(cell.generations);
            }
        }
    }

    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| RunError::Io {
        path: dir.clone(),
        source: e,
    })?;
    let mut snapshot = cfg.clone();
    snapshot.output_dir = PathBuf::from(".");
    fs::write(
        dir.join(CONFIG_FILE),
        toml::to_string(&snapshot).map_err(|e| RunError::Config(e.to_string()))?,
    )?;
    write_jsonl(&dir.join(RECORDS_FILE), &records)?;
    write_jsonl(&dir.join(GENERATIONS_FILE), &generations)?;
    write_jsonl(&dir.join(RANDOM_FILE), &random)?;

    let failed_cells = records.iter().filter(|r| !r.is_complete()).count();
    if failed_cells < records.len() {
        report(dir)?;
    } else {
        log::error!("every cell failed; no report written");
    }
    cost_report(dir)?;
    Ok(RunSummary {
        run_dir: dir.clone(),
        cells: records.len(),
        failed_cells,
        backend_calls: gateway.backend_calls(),
        cache_hits: gateway.cache_hits(),
    })
}

/// Loads the configuration snapshot of a run directory.
pub fn load_snapshot(run_dir: &Path) -> Result<RunConfig, RunError> {
    let path = run_dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| RunError::Io { path, source: e })?;
    RunConfig::parse(&text)
}

/// Groups items by key, keeping first-seen key order.
pub(crate) fn ordered_groups<T, K: Ord + Clone>(
    items: impl IntoIterator<Item = T>,
    key: impl Fn(&T) -> K,
) -> Vec<(K, Vec<T>)> {
    let mut order: Vec<K> = Vec::new();
    let mut groups: BTreeMap<K, Vec<T>> = BTreeMap::new();
    for item in items {
        let k = key(&item);
        if !groups.contains_key(&k) {
            order.push(k.clone());
        }
        groups.entry(k).or_default().push(item);
    }
    order
        .into_iter()
        .map(|k| {
            let v = groups.remove(&k).expect("grouped key");
            (k, v)
        })
        .collect()
}
