use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ccp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccp"))
        .args(args)
        .current_dir(dir)
        .env_remove("RUST_LOG")
        .output()
        .expect("spawn ccp")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// synth then corpus, sampling eight instances.
fn prepare(dir: &Path) {
    ok(ccp(dir, &["synth", "--out", "raw.jsonl", "--seed", "3"]));
    let out = ccp(
        dir,
        &[
            "corpus",
            "--input",
            "raw.jsonl",
            "--out",
            "inst.jsonl",
            "--sample",
            "8",
            "--seed",
            "1",
            "--stats",
            "stats.csv",
        ],
    );
    let err = String::from_utf8_lossy(&out.stderr).to_string();
    ok(out);
    assert!(err.contains("8 instances written"), "{err}");
}

#[test]
fn corpus_writes_instances_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path());
    let lines = fs::read_to_string(dir.path().join("inst.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 8);
    let stats = fs::read_to_string(dir.path().join("stats.csv")).unwrap();
    let rows: Vec<&str> = stats.lines().collect();
    assert!(rows[0].starts_with("domain,instances,"));
    assert!(rows[1].starts_with("Synthetic,8,"));
    assert!(rows[2].starts_with("All,8,"));
}

#[test]
fn render_prints_one_json_message_per_line() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path());
    let out = ok(ccp(
        dir.path(),
        &[
            "render",
            "--instances",
            "inst.jsonl",
            "--index",
            "2",
            "--method",
            "ccp",
            "--turns",
            "3",
            "--negatives",
            "2",
            "--kind",
            "high-lexical",
        ],
    ));
    let msgs: Vec<serde_json::Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(msgs.len(), 1 + 2 * 3 + 2 * 2);
    assert_eq!(msgs[0]["role"], "user");
    assert_eq!(msgs[3]["role"], "assistant");
    assert!(msgs[4]["content"]
        .as_str()
        .unwrap()
        .starts_with("Absolutely different!"));
    assert_eq!(msgs.last().unwrap()["role"], "user");

    let base = ok(ccp(
        dir.path(),
        &["render", "--instances", "inst.jsonl", "--method", "baseline"],
    ));
    let scp0 = ok(ccp(
        dir.path(),
        &[
            "render",
            "--instances",
            "inst.jsonl",
            "--method",
            "scp",
            "--turns",
            "0",
        ],
    ));
    assert_eq!(base, scp0);
    assert_eq!(base.lines().count(), 1);
}

#[test]
fn render_rejects_bad_shapes() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path());
    let out = ccp(
        dir.path(),
        &[
            "render",
            "--instances",
            "inst.jsonl",
            "--method",
            "scp",
            "--turns",
            "5",
        ],
    );
    assert!(!out.status.success());
    let out = ccp(
        dir.path(),
        &["render", "--instances", "inst.jsonl", "--index", "8"],
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("out of range"));
}

const RUN: &str = r#"
instances = "inst.jsonl"
output_dir = "out"
bootstrap_resamples = 100

[[model]]
provider = "mock"
model_name = "replay"
price_in = 0.4
price_out = 1.6
mock = { policy = "style_replay", seed = 9 }

[[method]]
method = "baseline"

[[method]]
method = "ccp"
turns = 4
negatives = 2
negative_kind = "generated"
"#;

#[test]
fn run_report_and_cost_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path());
    fs::write(
        dir.path().join("run.toml"),
        RUN.replace("negatives = 2", "negatives = 4"),
    )
    .unwrap();
    let out = ccp(dir.path(), &["run", "--config", "run.toml"]);
    let err = String::from_utf8_lossy(&out.stderr).to_string();
    ok(out);
    assert!(err.contains("16 cells, 0 failed, 48 backend calls"), "{err}");

    let before = fs::read(dir.path().join("out/report.md")).unwrap();
    fs::remove_file(dir.path().join("out/report.md")).unwrap();
    let md = ok(ccp(dir.path(), &["report", "out"]));
    assert_eq!(md.as_bytes(), before.as_slice());
    assert!(md.contains("| CCP(G)(4,4) |"));

    let cost = ok(ccp(dir.path(), &["cost", "out"]));
    let rows: Vec<&str> = cost.lines().collect();
    assert_eq!(
        rows[0],
        "model,method,calls,input_tokens,output_tokens,base_cost_usd,self_refine_calls,self_refine_cost_usd"
    );
    assert!(rows[1].starts_with("replay,Baseline,8,"));
    assert!(rows[2].starts_with("replay,\"CCP(G)(4,4)\",40,"));
}

#[test]
fn generated_negatives_need_matching_counts() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path());
    fs::write(dir.path().join("run.toml"), RUN).unwrap();
    let out = ccp(dir.path(), &["run", "--config", "run.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}

#[test]
fn models_lists_builtin_prices() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(ccp(dir.path(), &["models"]));
    let rows: Vec<Vec<&str>> = out.lines().map(|l| l.split('\t').collect()).collect();
    let row = |name: &str| {
        rows.iter()
            .find(|r| r[0] == name)
            .unwrap_or_else(|| panic!("{name}"))
    };
    assert_eq!(&row("llama3.3-70b")[3..], ["0.72", "0.72"]);
    assert_eq!(&row("claude-sonnet-4")[3..], ["3", "15"]);
    assert_eq!(rows.len(), 5);
}
