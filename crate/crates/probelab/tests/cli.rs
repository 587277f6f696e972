use std::path::Path;
use std::process::Command;

use probelab::cli;

struct Out {
    code: i32,
    stdout: String,
    stderr: String,
}

fn run(args: &[&str]) -> Out {
    let mut stdout = Vec::new();
    let mut stderr = Vec::new();
    let argv = std::iter::once("probelab").chain(args.iter().copied());
    let code = cli::run(argv, &mut stdout, &mut stderr);
    Out { code, stdout: String::from_utf8(stdout).unwrap(), stderr: String::from_utf8(stderr).unwrap() }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_SYNTH: &str = r#"
layers = 6
distances = [5, 30]

[plant]
n_per_class = { train = 80, val = 40, test = 400 }
margin = 5.0

[[categories]]
id = "Presence-1"
gate_layer = 3
"#;

const QUICK_SWEEP: &str = "[probe]\nruns = 2\n";

#[test]
fn usage_errors_exit_2() {
    let unknown = run(&["frobnicate"]);
    assert_eq!(unknown.code, 2);
    assert_eq!(unknown.stderr.lines().count(), 1, "{}", unknown.stderr);

    let missing = run(&["sweep", "run", "--store", "/nonexistent"]);
    assert_eq!(missing.code, 2);
    assert!(missing.stderr.contains("--manifest") || missing.stderr.contains("required"), "{}", missing.stderr);

    assert_eq!(run(&["store", "validate", "/tmp", "--format", "xml"]).code, 2);
    assert_eq!(run(&[]).code, 2);
}

#[test]
fn help_and_version_exit_0() {
    let help = run(&["--help"]);
    assert_eq!(help.code, 0);
    for sub in ["manifest", "store", "sweep", "report", "analyze", "steer", "logit", "toy"] {
        assert!(help.stdout.contains(sub), "{sub} missing from help");
    }
    assert_eq!(run(&["analyze", "--help"]).code, 0);
    assert_eq!(run(&["--version"]).code, 0);
}

#[test]
fn domain_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["store", "validate", p(dir.path())]);
    assert_eq!(out.code, 1);
    assert!(out.stderr.starts_with("error: "));
    let out = run(&["manifest", "validate", p(&dir.path().join("absent.tsv"))]);
    assert_eq!(out.code, 1);
}

#[test]
fn store_validate_flags_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("synth.toml");
    std::fs::write(&spec, SMALL_SYNTH).unwrap();
    let store = dir.path().join("store");
    assert_eq!(run(&["toy", "synth", "--spec", p(&spec), "--out", p(&store)]).code, 0);

    let ok = run(&["store", "validate", p(&store)]);
    assert_eq!(ok.code, 0, "{}", ok.stderr);
    assert_eq!(ok.stdout.lines().count(), 12);

    let victim = store.join("toy/vision_encoder/L2/avg/Presence-1_30m.aprb");
    let mut bytes = std::fs::read(&victim).unwrap();
    let n = bytes.len();
    bytes.truncate(n - 7);
    std::fs::write(&victim, bytes).unwrap();
    let bad = run(&["store", "validate", p(&store)]);
    assert_eq!(bad.code, 1);
    assert!(bad.stderr.contains("Presence-1_30m"), "{}", bad.stderr);
    let rows: Vec<serde_json::Value> = bad.stdout.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.iter().filter(|r| r.get("error").is_some_and(|e| !e.is_null())).count(), 1);
}

#[test]
fn manifest_validate_reports_deviating_cells() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("synth.toml");
    std::fs::write(&spec, SMALL_SYNTH).unwrap();
    assert_eq!(run(&["toy", "synth", "--spec", p(&spec), "--out", p(dir.path())]).code, 0);
    let manifest = dir.path().join("manifest.tsv");

    let ok = run(&["manifest", "validate", p(&manifest), "--train", "80", "--val", "40", "--test", "400"]);
    assert_eq!(ok.code, 0, "{}{}", ok.stdout, ok.stderr);
    assert!(ok.stdout.is_empty());

    let off = run(&["manifest", "validate", p(&manifest), "--format", "csv"]);
    assert_eq!(off.code, 1);
    let lines: Vec<&str> = off.stdout.lines().collect();
    assert!(lines[0].starts_with("category_id,class_label,distance_m,split,expected,observed,deviation"), "{}", lines[0]);
    // 2 distances × 2 classes × 3 splits, all short of the default counts.
    assert_eq!(lines.len(), 1 + 12);
}

#[test]
fn synth_sweep_heatmap_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("synth.toml");
    std::fs::write(&spec, SMALL_SYNTH).unwrap();
    let config = dir.path().join("sweep.toml");
    std::fs::write(&config, QUICK_SWEEP).unwrap();
    let store = dir.path().join("store");
    let ledger = dir.path().join("out/ledger.jsonl");
    assert_eq!(run(&["toy", "synth", "--spec", p(&spec), "--seed", "11", "--out", p(&store)]).code, 0);
    let manifest = store.join("manifest.tsv");

    let sweep = |extra: &[&str]| {
        let mut args = vec!["sweep", "run", "--store", p(&store), "--manifest", p(&manifest), "--out", p(&ledger), "--config", p(&config)];
        args.extend_from_slice(extra);
        run(&args)
    };
    let first = sweep(&["--max-tasks", "4", "--parallelism", "3"]);
    assert_eq!(first.code, 0, "{}", first.stderr);
    assert!(first.stderr.contains("stopped early"), "{}", first.stderr);
    let rest = sweep(&["--parallelism", "2"]);
    assert!(rest.stderr.contains("4 already done, 8 ran (0 failed)"), "{}", rest.stderr);

    let csv = run(&["report", "heatmap", "--ledger", p(&ledger), "--format", "csv"]);
    assert_eq!(csv.code, 0, "{}", csv.stderr);
    let lines: Vec<&str> = csv.stdout.lines().collect();
    assert_eq!(
        lines[0],
        "model_id,category_id,pooling,distance_m,vision_encoder/L0,vision_encoder/L1,vision_encoder/L2,vision_encoder/L3,vision_encoder/L4,vision_encoder/L5"
    );
    assert_eq!(lines.len(), 3);
    for line in &lines[1..] {
        let cells: Vec<f64> = line.split(',').skip(4).map(|c| c.parse().unwrap()).collect();
        assert!(cells[..3].iter().all(|&c| c <= 0.1), "{line}");
        assert!(cells[3..].iter().all(|&c| c >= 0.9), "{line}");
    }

    let json = run(&["report", "heatmap", "--ledger", p(&ledger), "--format", "json"]);
    let maps: serde_json::Value = serde_json::from_str(&json.stdout).unwrap();
    assert_eq!(maps[0]["distances_m"], serde_json::json!([5, 30]));

    let query = run(&["store", "query", "--store", p(&store), "--manifest", p(&manifest), "--layer", "4", "--distance", "5", "--split", "val", "--no-values"]);
    assert_eq!(query.code, 0, "{}", query.stderr);
    assert_eq!(query.stdout.lines().count(), 80);
    assert!(query.stdout.lines().all(|l| l.contains("\"split\":\"val\"")));
}

#[test]
fn gap_and_failures_from_fixture_rows() {
    let dir = tempfile::tempdir().unwrap();
    let ledger = dir.path().join("ledger.jsonl");
    let row = |model: &str, stage: &str, layer: u32, cc: f64| {
        serde_json::json!({
            "model_id": model, "stage": stage, "layer_index": layer, "pooling": "llm_concat",
            "category_id": "Presence-1", "distance_m": 10, "status": "done", "runs": 10,
            "mean_acc": (1.0 + cc) / 2.0, "std_acc": 0.0, "mean_cc": cc, "std_cc": 0.0,
            "best_lr_per_run": [], "n_train": 800, "n_val": 100, "n_test": 100
        })
        .to_string()
    };
    let text = [
        row("llava", "post_layernorm", 0, 1.0),
        row("llava", "llm", 12, 0.2),
        row("ovis", "post_layernorm", 0, 0.9),
    ]
    .join("\n");
    std::fs::write(&ledger, text + "\n").unwrap();
    let acc = dir.path().join("model_accuracy.jsonl");
    let a = |model: &str, accuracy: f64, n: u64| {
        serde_json::json!({
            "model_id": model, "category_id": "Presence-1", "distance_m": 10, "decoding": "greedy",
            "accuracy": accuracy, "n_correct": (accuracy * n as f64) as u64, "n_total": n
        })
        .to_string()
    };
    std::fs::write(&acc, format!("{}\n{}\n", a("llava", 0.5, 100), a("ovis", 0.95, 100))).unwrap();

    let gap = run(&["analyze", "gap", "--ledger", p(&ledger), "--model-accuracy", p(&acc)]);
    assert_eq!(gap.code, 0, "{}", gap.stderr);
    let rows: Vec<serde_json::Value> = gap.stdout.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["model_id"], "llava");
    assert_eq!(rows[0]["model_cc"].as_f64(), Some(0.0));
    assert_eq!(rows[0]["gap"].as_f64(), Some(1.0));
    assert!((rows[1]["gap"].as_f64().unwrap() - 0.0).abs() < 1e-12);

    let verdicts = run(&["analyze", "failures", "--ledger", p(&ledger), "--model-accuracy", p(&acc), "--format", "csv"]);
    assert_eq!(verdicts.code, 0, "{}", verdicts.stderr);
    assert!(verdicts.stdout.lines().nth(1).unwrap().contains("cognitive"), "{}", verdicts.stdout);

    let mut bad = std::fs::read_to_string(&acc).unwrap();
    bad.push_str(&a("llava", 1.5, 100));
    bad.push('\n');
    std::fs::write(&acc, bad).unwrap();
    assert_eq!(run(&["analyze", "gap", "--ledger", p(&ledger), "--model-accuracy", p(&acc)]).code, 1);
}

#[test]
fn real_binary_reports_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_probelab");
    let status = |args: &[&str]| Command::new(bin).args(args).output().unwrap();
    let help = status(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("sweep"));
    assert_eq!(status(&["no-such-command"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(bin).args(["store", "validate"]).env("PROBELAB_STORE", dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}
