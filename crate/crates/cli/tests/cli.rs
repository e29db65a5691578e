use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_triaffine"));
    c.env("TRIAFFINE_THREADS", "1");
    c
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn ok(cmd: &mut Command) -> String {
    let out = run(cmd);
    assert!(out.status.success(), "{cmd:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn gen(dir: &Path, extra: &[&str]) {
    ok(bin().arg("gen").arg("--out").arg(dir).args(extra));
}

#[test]
fn gen_defaults_split_200_50_50_and_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&a, &[]);
    gen(&b, &[]);
    for (name, n) in [("train", 200), ("dev", 50), ("test", 50)] {
        let file = format!("{name}.jsonl");
        let text = fs::read(a.join(&file)).unwrap();
        assert_eq!(text, fs::read(b.join(&file)).unwrap(), "{file} differs between runs");
        assert_eq!(text.iter().filter(|&&c| c == b'\n').count(), n);
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["generator"]["seed"], 13);
    let run = fs::read_to_string(a.join("run.txt")).unwrap();
    assert!(run.contains("version = ") && run.contains("threads = 1 (TRIAFFINE_THREADS=1)"));
}

#[test]
fn gen_split_sizes_sum_to_total() {
    let tmp = tempfile::tempdir().unwrap();
    for n in [7usize, 13, 61] {
        let dir = tmp.path().join(n.to_string());
        gen(&dir, &["--n-sentences", &n.to_string(), "--seed", "3"]);
        let lines: usize = ["train", "dev", "test"]
            .iter()
            .map(|s| fs::read_to_string(dir.join(format!("{s}.jsonl"))).unwrap().lines().count())
            .sum();
        assert_eq!(lines, n);
    }
}

#[test]
fn gold_as_prediction_scores_one() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), &["--n-sentences", "30"]);
    // A corpus line carries its entities; re-emit them as prediction records.
    let dev = fs::read_to_string(tmp.path().join("dev.jsonl")).unwrap();
    let mut preds = String::new();
    for (k, line) in dev.lines().enumerate() {
        let ex: serde_json::Value = serde_json::from_str(line).unwrap();
        let rec = serde_json::json!({ "sentence_id": k, "entities": ex["entities"] });
        preds.push_str(&rec.to_string());
        preds.push('\n');
    }
    let pred_path = tmp.path().join("gold_preds.jsonl");
    fs::write(&pred_path, preds).unwrap();
    let report = tmp.path().join("report.json");
    ok(bin()
        .args(["eval", "--data"])
        .arg(tmp.path().join("dev.jsonl"))
        .arg("--predictions")
        .arg(&pred_path)
        .arg("--out")
        .arg(&report));
    let r: serde_json::Value = serde_json::from_slice(&fs::read(report).unwrap()).unwrap();
    assert_eq!(r["report"]["f1"], 1.0);
    assert_eq!(r["report"]["precision"], 1.0);
}

#[test]
fn train_then_eval_reproduces_final_dev_f1() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run_dir = tmp.path().join("run");
    gen(&data, &["--n-sentences", "36", "--max-depth", "2"]);
    ok(bin()
        .args(["train", "--epochs", "3", "--d", "8", "--emb-dim", "8", "--hidden", "8", "--set", "m=6"])
        .arg("--train")
        .arg(data.join("train.jsonl"))
        .arg("--dev")
        .arg(data.join("dev.jsonl"))
        .arg("--out")
        .arg(&run_dir));
    for f in ["run.txt", "config.txt", "metrics.tsv", "best.ckpt.json", "last.ckpt.json", "train_report.json"] {
        assert!(run_dir.join(f).is_file(), "missing {f}");
    }
    let config = fs::read_to_string(run_dir.join("config.txt")).unwrap();
    assert!(config.contains("epochs = 3") && config.contains("m = 6") && config.contains("seed = 42"));
    let metrics = fs::read_to_string(run_dir.join("metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    let last_f1: f64 = metrics.lines().last().unwrap().split('\t').nth(6).unwrap().parse().unwrap();

    let report = tmp.path().join("eval.json");
    ok(bin()
        .arg("eval")
        .arg("--data")
        .arg(data.join("dev.jsonl"))
        .arg("--checkpoint")
        .arg(run_dir.join("last.ckpt.json"))
        .arg("--out")
        .arg(&report));
    let r: serde_json::Value = serde_json::from_slice(&fs::read(report).unwrap()).unwrap();
    let f1 = r["report"]["f1"].as_f64().unwrap();
    assert!((f1 - last_f1).abs() < 5e-7, "eval {f1} vs log {last_f1}");

    // The run directory's config file reproduces the run.
    let again = tmp.path().join("again");
    ok(bin()
        .arg("train")
        .arg("--config")
        .arg(run_dir.join("config.txt"))
        .arg("--train")
        .arg(data.join("train.jsonl"))
        .arg("--dev")
        .arg(data.join("dev.jsonl"))
        .arg("--out")
        .arg(&again));
    assert_eq!(metrics, fs::read_to_string(again.join("metrics.tsv")).unwrap());

    let preds = tmp.path().join("preds.jsonl");
    ok(bin()
        .arg("predict")
        .arg("--checkpoint")
        .arg(run_dir.join("last.ckpt.json"))
        .arg("--data")
        .arg(data.join("dev.jsonl"))
        .arg("--out")
        .arg(&preds));
    let records = fs::read_to_string(&preds).unwrap();
    assert_eq!(records.lines().count(), 6);
    let from_file = tmp.path().join("from_file.json");
    ok(bin()
        .arg("eval")
        .arg("--data")
        .arg(data.join("dev.jsonl"))
        .arg("--predictions")
        .arg(&preds)
        .arg("--out")
        .arg(&from_file));
    let r2: serde_json::Value = serde_json::from_slice(&fs::read(from_file).unwrap()).unwrap();
    assert_eq!(r2["report"], r["report"]);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = run(bin().args(["train", "--no-such-flag", "1"]));
    assert_eq!(out.status.code(), Some(1));
    let out = run(bin().args(["bench", "--sigma", "0.1"]));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), &["--n-sentences", "12"]);
    let out = run(bin()
        .args(["train", "--set", "colour=blue", "--train"])
        .arg(tmp.path().join("train.jsonl"))
        .arg("--out")
        .arg(tmp.path().join("run")));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_inputs_fail_with_usage_code() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nothing.jsonl");
    let out = run(bin().arg("train").arg("--train").arg(&missing).arg("--out").arg(tmp.path().join("r")));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
    let out = run(bin().arg("eval").arg("--data").arg(&missing).arg("--checkpoint").arg(&missing));
    assert_eq!(out.status.code(), Some(1));
    let out = run(bin().arg("eval").arg("--data").arg(&missing));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn malformed_corpus_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.jsonl");
    fs::write(&bad, "{\"tokens\": [\"a\"], \"entities\": [{\"start\": 3, \"end\": 1, \"label\": \"X\"}]}\n").unwrap();
    let out = run(bin().arg("train").arg("--train").arg(&bad).arg("--out").arg(tmp.path().join("r")));
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bench_writes_report_and_config() {
    let tmp = tempfile::tempdir().unwrap();
    let text = ok(bin()
        .args(["bench", "--n", "6", "--d", "4", "--m", "3", "--iterations", "3", "--precision", "64", "--out"])
        .arg(tmp.path()));
    assert!(text.contains("speedup"));
    let reports: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("bench.json")).unwrap()).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 2);
    let cfg = fs::read_to_string(tmp.path().join("config.txt")).unwrap();
    assert!(cfg.contains("n = 6") && cfg.contains("precision = 64"));
}

#[test]
fn invalid_thread_variable_is_rejected() {
    let out = run(bin().env("TRIAFFINE_THREADS", "zero").args(["gen", "--out", "unused"]));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_and_version_exit_zero() {
    assert!(run(bin().arg("--help")).status.success());
    let v = ok(bin().arg("--version"));
    assert!(v.contains(env!("CARGO_PKG_VERSION")));
}
