use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[train]
seed = 3
lr = 0.001
batch_size = 4
budget = 8
eval_every = 0
eval_episodes = 2

[model]
d_model = 8
blocks = 1
heads = 2
ff_width = 16
feature_width = 4

[prior]
samples = { min = 20, max = 30 }
features = { min = 2, max = 3 }
"#;

fn tabmeta(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tabmeta"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pretrained(dir: &Path, config: &str) -> PathBuf {
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, config).unwrap();
    let out = dir.join("run");
    ok(tabmeta(&["pretrain", "--config", s(&cfg), "--out", s(&out)]));
    out
}

/// Two numeric features, a string label separable on the first feature.
fn write_fixture(path: &Path, rows: usize, offset: usize) {
    let mut text = String::from("a,b,label\n");
    for i in 0..rows {
        let k = i + offset;
        let a = (k * 37 % 101) as f64 / 10.0 - 5.0;
        let b = (k * 53 % 97) as f64 / 9.0;
        let label = if a > 0.0 { "yes" } else { "no" };
        text.push_str(&format!("{a},{b},{label}\n"));
    }
    std::fs::write(path, text).unwrap();
}

#[test]
fn pretrain_budget_arithmetic_single_step() {
    let dir = tempfile::tempdir().unwrap();
    let config = TINY.replace("batch_size = 4\nbudget = 8", "batch_size = 64\nbudget = 64");
    let out = pretrained(dir.path(), &config);
    let log = std::fs::read_to_string(out.join("train_log.ndjson")).unwrap();
    let steps = log.lines().filter(|l| l.contains("\"kind\":\"step\"")).count();
    assert_eq!(steps, 1);
    for f in ["model.ckpt", "state.bin", "manifest.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
}

#[test]
fn predict_emits_one_distribution_per_test_row() {
    let dir = tempfile::tempdir().unwrap();
    let run = pretrained(dir.path(), TINY);
    let (train, test) = (dir.path().join("train.csv"), dir.path().join("test.csv"));
    write_fixture(&train, 40, 0);
    write_fixture(&test, 9, 40);
    let ck = run.join("model.ckpt");
    let args = ["predict", "--checkpoint", s(&ck), "--train", s(&train), "--test", s(&test), "--target", "label"];
    let text = ok(tabmeta(&args));
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "row,p_no,p_yes");
    assert_eq!(lines.len(), 10);
    for (i, line) in lines[1..].iter().enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[0], i.to_string());
        let sum: f64 = cells[1..].iter().map(|c| c.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }
    assert_eq!(text, ok(tabmeta(&args)));

    let mut ens = args.to_vec();
    ens.extend(["--ensemble", "3", "--seed", "5"]);
    let a = ok(tabmeta(&ens));
    assert_eq!(a.lines().count(), 10);
    assert_eq!(a, ok(tabmeta(&ens)));
}

#[test]
fn pretrain_is_bit_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = pretrained(a.path(), TINY);
    let rb = pretrained(b.path(), TINY);
    for f in ["model.ckpt", "state.bin", "train_log.ndjson"] {
        assert_eq!(std::fs::read(ra.join(f)).unwrap(), std::fs::read(rb.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn evaluate_reports_both_std_styles() {
    let dir = tempfile::tempdir().unwrap();
    let run = pretrained(dir.path(), TINY);
    let suite = dir.path().join("suite");
    std::fs::create_dir(&suite).unwrap();
    write_fixture(&suite.join("one.csv"), 30, 0);
    write_fixture(&suite.join("two.csv"), 25, 7);
    let ck = run.join("model.ckpt");
    let json = dir.path().join("report.json");
    let text = ok(tabmeta(&[
        "evaluate", "--checkpoint", s(&ck), "--checkpoint", s(&ck), "--suite", s(&suite), "--splits", "5",
        "--json", s(&json),
    ]));
    assert!(text.contains("std_of_mean") && text.contains("mean_of_std"));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    let cls = &report["classification"];
    assert_eq!(cls["datasets"].as_array().unwrap().len(), 2);
    // identical checkpoints tie everywhere, so both win every dataset
    assert_eq!(cls["report"]["wins"], serde_json::json!([2, 2]));
    let summary = &cls["summaries"][0];
    for key in ["mean", "std_of_mean", "mean_of_std"] {
        assert!(summary[key].as_f64().unwrap().is_finite(), "{key}");
    }
}

#[test]
fn analyze_prior_writes_report_and_grids() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("analysis");
    let text = ok(tabmeta(&[
        "analyze-prior", "--config", s(&cfg), "--datasets", "6", "--agent-steps", "2", "--out", s(&out),
    ]));
    let line: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
    assert!(line["kl_ordinary_ordinary"]["mean"].as_f64().unwrap() >= 0.0);
    for f in ["report.json", "density_ordinary.csv", "density_ordinary_prime.csv", "density_adversarial.csv"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let grid = std::fs::read_to_string(out.join("density_ordinary.csv")).unwrap();
    assert_eq!(grid.lines().count(), 64 * 64 + 1);
}

#[test]
fn failures_emit_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = tabmeta(&["pretrain", "--config", s(&dir.path().join("absent.toml"))]);
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.trim().lines().count(), 1);
    let record: serde_json::Value = serde_json::from_str(stderr.trim()).unwrap();
    assert_eq!(record["error"]["kind"], "io");

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nbatch_size = 0\n").unwrap();
    let out = tabmeta(&["pretrain", "--config", s(&bad)]);
    let record: serde_json::Value = serde_json::from_str(String::from_utf8(out.stderr).unwrap().trim()).unwrap();
    assert_eq!(record["error"]["kind"], "config");
}
