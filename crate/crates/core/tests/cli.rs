use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
[problems]
kinds = ["TSP", "KNAPSACK"]
n = 5
train_count = 40
val_count = 4
test_count = 6
seed = 1

[dataset]
L = 128
seed = 2

[model]
preset = "tiny"

[training]
stage = "direct"
batches_per_epoch = 3
batch_size = 8
micro_batch = 4
max_epochs = 2
eval_every_epochs = 1
seed = 3

[eval.strategy]
mode = "sample"
samples = 3
seed = 4
"#;

fn colm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_colm"))
        .current_dir(dir)
        .env_remove("COLM_RUN_DIR")
        .args(["--config", "colm.toml", "--run-dir", "run"])
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = colm(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn pipeline(dir: &Path) -> String {
    fs::write(dir.join("colm.toml"), CONFIG).unwrap();
    for cmd in ["gen-data", "solve-expert", "build-traj", "train"] {
        ok(dir, &[cmd]);
    }
    ok(dir, &["eval"]);
    fs::read_to_string(dir.join("run/eval/report.csv")).unwrap()
}

fn without_time(csv: &str) -> Vec<String> {
    csv.lines().map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string()).collect()
}

#[test]
fn pipeline_runs_and_repeats() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = pipeline(a.path());
    let rows = without_time(&first);
    assert_eq!(rows[0], "Problem,N,Method,Obj,Gap,Score");
    for method in ["Random", "Expert", "Model greedy"] {
        assert!(rows.iter().any(|r| r.contains(method)), "{method} missing from\n{first}");
    }
    assert_eq!(rows.len(), 1 + 2 * 4);
    assert_eq!(rows, without_time(&pipeline(b.path())));
    for f in ["config.json", "metrics.csv", "best/meta.json", "last/state.json"] {
        assert!(a.path().join("run/train/direct").join(f).exists(), "{f}");
    }
}

#[test]
fn existing_outputs_need_force() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("colm.toml"), CONFIG).unwrap();
    ok(dir.path(), &["gen-data"]);
    let again = colm(dir.path(), &["gen-data"]);
    assert!(!again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).starts_with("error["));
    ok(dir.path(), &["--force", "gen-data"]);
}

#[test]
fn errors_report_code_and_name() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("colm.toml"), CONFIG.replace("n = 5", "n = 5\ncolour = 1")).unwrap();
    let out = colm(dir.path(), &["gen-data"]);
    let err = String::from_utf8_lossy(&out.stderr);
    let code = out.status.code().unwrap();
    assert_ne!(code, 0);
    assert!(err.starts_with(&format!("error[{code}] ")), "{err}");
}

#[test]
fn trajectory_capacity_is_checked() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = CONFIG.replace(r#"kinds = ["TSP", "KNAPSACK"]"#, r#"kinds = ["ATSP"]"#).replace("n = 5", "n = 20");
    fs::write(dir.path().join("colm.toml"), cfg.replace("L = 128", "L = 300")).unwrap();
    ok(dir.path(), &["gen-data"]);
    ok(dir.path(), &["solve-expert"]);
    let out = colm(dir.path(), &["build-traj"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("401") && err.contains("300"), "{err}");
}

#[test]
fn tokenize_inspect_prints_layout() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("colm.toml"), CONFIG).unwrap();
    let text = ok(dir.path(), &["tokenize-inspect", "--kind", "TSP", "--n", "4", "--seed", "1"]);
    assert!(text.contains("2001"), "{text}");
}

#[test]
fn shipped_config_is_valid() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    colm::config::RunConfig::load(&path).unwrap().validate().unwrap();
}

#[test]
fn policy_stage_continues_dynamics() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("colm.toml"), CONFIG.replace(r#"stage = "direct""#, r#"stage = "dynamics""#)).unwrap();
    for cmd in ["gen-data", "solve-expert", "build-traj", "train"] {
        ok(dir.path(), &[cmd]);
    }
    ok(dir.path(), &["--set", "training.stage=policy", "train"]);
    let meta = fs::read_to_string(dir.path().join("run/train/policy/best/meta.json")).unwrap();
    assert!(meta.contains(r#""stage": "policy""#) || meta.contains(r#""stage":"policy""#), "{meta}");
    ok(dir.path(), &["--set", "eval.checkpoint=\"run/train/policy/best\"", "eval"]);
}
