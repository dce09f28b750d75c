use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use ccp_core::corpus::synthetic::{generate, to_jsonl, SynthConfig};
use ccp_core::corpus::{
    dataset_stats, load_reviews, prepare_instances, read_instances, write_instances, FilterConfig,
    StatsEntry, TokenCounter,
};
use ccp_core::forge::{
    build_baseline, build_ccp, build_scp, Method, NegativeKind, PromptPlan, PromptTemplates,
};
use ccp_core::gateway::ModelRegistry;
use ccp_core::metrics::{LexicalFallbackScorer, RougeLScorer};
use ccp_core::negatives::{select_negatives, SelectMode};
use ccp_core::runner::{cost_report, render_cost_csv, report, run, RunConfig, REPORT_MD};

#[derive(Parser)]
#[command(
    name = "ccp",
    version,
    about = "Conversational prompting harness for personalized review generation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter a raw review file and write evaluation instances.
    Corpus(CorpusArgs),
    /// Write a synthetic raw review file.
    Synth(SynthArgs),
    /// Print the conversation a method sends for one instance, as JSON lines.
    Render(RenderArgs),
    /// Execute a run described by a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Rebuild report.md, report.csv and pairwise.csv of a run directory.
    Report { run_dir: PathBuf },
    /// Rebuild cost.csv of a run directory and print it.
    Cost { run_dir: PathBuf },
    /// List model configurations with their prices (USD per 1M tokens).
    Models {
        #[arg(long)]
        models_file: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct CorpusArgs {
    /// Line-delimited JSON review records.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// History length per instance.
    #[arg(long, default_value_t = 5)]
    n: usize,
    /// Users per domain; 0 keeps every surviving user.
    #[arg(long, default_value_t = 0)]
    sample: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 6)]
    min_user_reviews: usize,
    #[arg(long, default_value_t = 5)]
    min_other_reviews: usize,
    #[arg(long, default_value_t = 20)]
    token_min: usize,
    #[arg(long, default_value_t = 300)]
    token_max: usize,
    #[arg(long, value_enum, default_value_t = Counter::Whitespace)]
    token_counter: Counter,
    /// Also write reference-pool statistics as CSV here.
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Counter {
    Whitespace,
    Word,
}

#[derive(clap::Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 40)]
    users: usize,
    #[arg(long, default_value_t = 30)]
    items: usize,
    #[arg(long, default_value_t = 8)]
    reviews_per_user: usize,
    #[arg(long, default_value_t = 17)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Baseline,
    Scp,
    Ccp,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    HighSemantic,
    LowSemantic,
    HighLexical,
    LowLexical,
}

#[derive(clap::Args)]
struct RenderArgs {
    /// Instance file written by `ccp corpus`.
    #[arg(long)]
    instances: PathBuf,
    /// 0-based line of the instance file.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, value_enum, default_value_t = MethodArg::Scp)]
    method: MethodArg,
    #[arg(long, default_value_t = 0)]
    turns: usize,
    #[arg(long, default_value_t = 0)]
    negatives: usize,
    /// Negative selection for CCP. Generated negatives need a backend; use `ccp run`.
    #[arg(long, value_enum, default_value_t = KindArg::HighSemantic)]
    kind: KindArg,
    /// Directory of template overrides.
    #[arg(long)]
    templates: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Corpus(args) => corpus(args),
        Command::Synth(args) => synth(args),
        Command::Render(args) => render(args),
        Command::Run { config } => {
            let cfg = RunConfig::load(&config)?;
            let s = run(&cfg)?;
            eprintln!(
                "{}: {} cells, {} failed, {} backend calls, {} cache hits",
                s.run_dir.display(),
                s.cells,
                s.failed_cells,
                s.backend_calls,
                s.cache_hits
            );
            if s.failed_cells == s.cells {
                bail!("every cell failed; see records.jsonl");
            }
            Ok(())
        }
        Command::Report { run_dir } => {
            report(&run_dir)?;
            let md = fs::read_to_string(run_dir.join(REPORT_MD))?;
            io::stdout().write_all(md.as_bytes())?;
            Ok(())
        }
        Command::Cost { run_dir } => {
            let rows = cost_report(&run_dir)?;
            io::stdout().write_all(render_cost_csv(&rows)?.as_bytes())?;
            Ok(())
        }
        Command::Models { models_file } => {
            let reg = match models_file {
                Some(p) => ModelRegistry::load(&p)?,
                None => ModelRegistry::builtin(),
            };
            for m in &reg.models {
                println!(
                    "{}\t{}\t{}\t{}\t{}",
                    m.model_name, m.provider, m.version, m.price_in, m.price_out
                );
            }
            Ok(())
        }
    }
}

fn corpus(a: CorpusArgs) -> Result<()> {
    let loaded = load_reviews(&a.input)?;
    for d in &loaded.diagnostics {
        log::warn!("{}:{}: {}", a.input.display(), d.line, d.message);
    }
    let filter = FilterConfig {
        min_user_reviews: a.min_user_reviews,
        min_other_reviews: a.min_other_reviews,
        token_min: a.token_min,
        token_max: a.token_max,
        counter: match a.token_counter {
            Counter::Whitespace => TokenCounter::Whitespace,
            Counter::Word => TokenCounter::Word,
        },
    };
    let prepared = prepare_instances(&loaded, &filter, a.sample, a.seed, a.n)?;
    for (user, why) in &prepared.skipped {
        log::warn!("skipped {user}: {why}");
    }
    let mut buf = Vec::new();
    write_instances(&mut buf, &prepared.records)?;
    write_file(&a.out, &buf)?;
    eprintln!(
        "{} instances written, {} users skipped, {} malformed lines",
        prepared.records.len(),
        prepared.skipped.len(),
        loaded.diagnostics.len()
    );

    if let Some(path) = a.stats {
        let entries: Vec<StatsEntry<'_>> = prepared
            .records
            .iter()
            .filter_map(|r| {
                let pool = r.pool(&r.instance.target_item.item_id)?;
                Some(StatsEntry {
                    domain: &r.domain,
                    target_text: &r.instance.target_review.text,
                    pool,
                })
            })
            .collect();
        let rows = dataset_stats(&entries, &LexicalFallbackScorer, a.seed)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &rows {
            w.serialize(row)?;
        }
        write_file(&path, &w.into_inner()?)?;
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        users: a.users,
        items: a.items,
        reviews_per_user: a.reviews_per_user,
        seed: a.seed,
    };
    write_file(&a.out, to_jsonl(&generate(&cfg)).as_bytes())
}

fn render(a: RenderArgs) -> Result<()> {
    let records = read_instances(&a.instances)?;
    let Some(rec) = records.get(a.index) else {
        bail!(
            "{} has {} instances; index {} is out of range",
            a.instances.display(),
            records.len(),
            a.index
        );
    };
    let t = match &a.templates {
        Some(dir) => PromptTemplates::load_dir(dir)?,
        None => PromptTemplates::default(),
    };
    let inst = &rec.instance;
    let plan = match a.method {
        MethodArg::Baseline => PromptPlan::baseline(),
        MethodArg::Scp => PromptPlan::scp(a.turns),
        MethodArg::Ccp => {
            let kind = match a.kind {
                KindArg::HighSemantic => NegativeKind::HighSemantic,
                KindArg::LowSemantic => NegativeKind::LowSemantic,
                KindArg::HighLexical => NegativeKind::HighLexical,
                KindArg::LowLexical => NegativeKind::LowLexical,
            };
            PromptPlan::ccp(kind, a.turns, a.negatives)
        }
    };
    plan.validate(inst.n()).map_err(anyhow::Error::msg)?;
    let conv = match plan.method {
        Method::Baseline => build_baseline(&t, inst),
        Method::Scp => build_scp(&t, inst, plan.turns)?,
        Method::Ccp => {
            let pools = |id: &str| rec.pool(id);
            let (mode, lexical) = match plan.negative_kind {
                NegativeKind::HighSemantic => (SelectMode::Highest, false),
                NegativeKind::LowSemantic => (SelectMode::Lowest, false),
                NegativeKind::HighLexical => (SelectMode::Highest, true),
                _ => (SelectMode::Lowest, true),
            };
            let assigned = if lexical {
                select_negatives(inst, plan.negatives, pools, &RougeLScorer, mode)?
            } else {
                select_negatives(inst, plan.negatives, pools, &LexicalFallbackScorer, mode)?
            };
            build_ccp(&t, inst, plan.turns, plan.negatives, &assigned)?
        }
    };
    let mut out = io::stdout().lock();
    for m in conv.messages() {
        serde_json::to_writer(&mut out, m)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}
