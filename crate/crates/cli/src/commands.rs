use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, ValueEnum};
use rayon::prelude::*;
use serde_json::json;
use triaffine_core::bench::{bench_cross_scoring, bench_scoring, BenchConfig, BenchReport};
use triaffine_core::data::{
    evaluate, generate_synthetic, load_corpus, save_corpus, span_recall_at_m, EvalConfig, EvalReport, Example,
    Prediction, SyntheticConfig,
};
use triaffine_core::pipeline::{
    predict_corpus, train as train_model, EpochMetrics, Model, ModelConfig, SentenceLogits, TrainOptions,
    BEST_CHECKPOINT, LAST_CHECKPOINT, METRICS_FILE,
};
use triaffine_core::triaffine::Setting;
use triaffine_core::Error;

use crate::flags::{BenchKeys, KvFlags, ModelKeys};
use crate::Usage;

pub const RUN_FILE: &str = "run.txt";
pub const CONFIG_FILE: &str = "config.txt";
pub const ABLATION_TSV: &str = "ablation.tsv";

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Directory receiving train.jsonl, dev.jsonl, test.jsonl and manifest.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = SyntheticConfig::default().seed)]
    seed: u64,
    /// Total sentences; dev and test get one sixth each.
    #[arg(long, default_value_t = SyntheticConfig::default().n_sentences)]
    n_sentences: usize,
    #[arg(long, default_value_t = SyntheticConfig::default().max_depth)]
    max_depth: usize,
    #[arg(long, default_value_t = SyntheticConfig::default().max_len)]
    max_len: usize,
    /// Comma-separated entity labels.
    #[arg(long, value_delimiter = ',', default_value = "PER,ORG,LOC,GPE")]
    labels: Vec<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    /// Scored after every epoch; selects best.ckpt.json.
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: KvFlags<ModelKeys>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Gold corpus (JSON lines).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
    checkpoint: Option<PathBuf>,
    /// Prediction records (JSON lines) as written by `predict`.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output file, one prediction record per line.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Scoring,
    Cross,
    Both,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value_t = Stage::Both)]
    stage: Stage,
    /// Run directory receiving bench.json.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    bench: KvFlags<BenchKeys>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Shared configuration; `setting` is overridden per row.
    #[command(flatten)]
    model: KvFlags<ModelKeys>,
}

fn require_file(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.is_file() {
        return Err(Usage(format!("{what} '{}' does not exist", path.display())).into());
    }
    Ok(())
}

fn read_config_file(path: Option<&Path>) -> anyhow::Result<Option<String>> {
    match path {
        None => Ok(None),
        Some(p) => {
            require_file(p, "config file")?;
            Ok(Some(fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?))
        }
    }
}

fn model_config(flags: &KvFlags<ModelKeys>) -> anyhow::Result<ModelConfig> {
    let text = read_config_file(flags.config.as_deref())?;
    let mut cfg = ModelConfig::default();
    flags.apply(|k, v| cfg.set(k, v), text.as_deref())?;
    Ok(cfg)
}

fn load(path: &Path, what: &str) -> anyhow::Result<Vec<Example>> {
    require_file(path, what)?;
    Ok(load_corpus(path)?)
}

fn load_model(path: &Path) -> anyhow::Result<Model> {
    require_file(path, "checkpoint")?;
    Ok(Model::load(path)?)
}

/// Writes `run.txt` (version, command, threads, inputs) and `config.txt`.
fn echo_run(dir: &Path, command: &str, threads: &str, inputs: &[(&str, String)], config: &str) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut s = String::new();
    writeln!(s, "version = {}", env!("CARGO_PKG_VERSION"))?;
    writeln!(s, "command = {command}")?;
    writeln!(s, "threads = {threads}")?;
    for (k, v) in inputs {
        writeln!(s, "{k} = {v}")?;
    }
    fs::write(dir.join(RUN_FILE), s)?;
    fs::write(dir.join(CONFIG_FILE), config)?;
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn gen(a: GenArgs, threads: &str) -> anyhow::Result<()> {
    let cfg = SyntheticConfig {
        seed: a.seed,
        n_sentences: a.n_sentences,
        labels: a.labels,
        max_depth: a.max_depth,
        max_len: a.max_len,
    };
    let corpus = generate_synthetic(&cfg)?;
    let held_out = cfg.n_sentences / 6;
    let n_train = cfg.n_sentences - 2 * held_out;
    let splits = [
        ("train", &corpus[..n_train]),
        ("dev", &corpus[n_train..n_train + held_out]),
        ("test", &corpus[n_train + held_out..]),
    ];
    let kv = format!(
        "seed = {}\nn_sentences = {}\nmax_depth = {}\nmax_len = {}\nlabels = {}\n",
        cfg.seed,
        cfg.n_sentences,
        cfg.max_depth,
        cfg.max_len,
        cfg.labels.join(",")
    );
    echo_run(&a.out, "gen", threads, &[], &kv)?;
    for (name, part) in splits {
        save_corpus(&a.out.join(format!("{name}.jsonl")), part)?;
    }
    let manifest = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "generator": cfg,
        "splits": splits.iter().map(|(n, p)| (n.to_string(), json!({"file": format!("{n}.jsonl"), "sentences": p.len()})))
            .collect::<serde_json::Map<_, _>>(),
    });
    write_json(&a.out.join("manifest.json"), &manifest)?;
    println!(
        "wrote {} sentences to {} ({} train, {} dev, {} test)",
        cfg.n_sentences,
        a.out.display(),
        n_train,
        held_out,
        held_out
    );
    Ok(())
}

fn print_epoch(row: &EpochMetrics) {
    let dev = row.dev.map(|d| format!("  dev F1 {:.4}", d.f1)).unwrap_or_default();
    eprintln!("epoch {:>3}  L {:.4}  L_aux {:.4}  L_main {:.4}{dev}", row.epoch, row.loss, row.l_aux, row.l_main);
}

pub fn train(a: TrainArgs, threads: &str) -> anyhow::Result<()> {
    let cfg = model_config(&a.model)?;
    let train = load(&a.train, "training corpus")?;
    let dev = a.dev.as_deref().map(|p| load(p, "dev corpus")).transpose()?;
    let mut model = Model::for_corpus(cfg, &train)?;
    let mut inputs = vec![("train", a.train.display().to_string())];
    if let Some(p) = &a.dev {
        inputs.push(("dev", p.display().to_string()));
    }
    echo_run(&a.out, "train", threads, &inputs, &model.config().to_kv())?;
    let mut cb = print_epoch;
    let report = train_model(
        &mut model,
        &train,
        TrainOptions { dev: dev.as_deref(), out_dir: Some(&a.out), restore_best: false, on_epoch: Some(&mut cb) },
    )?;
    write_json(
        &a.out.join("train_report.json"),
        &json!({"epochs": report.epochs, "best_epoch": report.best_epoch, "best_dev_f1": report.best_dev_f1}),
    )?;
    let last = report.epochs.last().expect("at least one epoch");
    println!("{}\n{}", EpochMetrics::HEADER, last.tsv_row());
    if let (Some(e), Some(f1)) = (report.best_epoch, report.best_dev_f1) {
        println!("best dev F1 {f1:.6} at epoch {e} ({BEST_CHECKPOINT})");
    }
    println!("final parameters in {}", a.out.join(LAST_CHECKPOINT).display());
    Ok(())
}

fn read_predictions(path: &Path) -> anyhow::Result<Vec<Prediction>> {
    require_file(path, "prediction file")?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: Prediction = serde_json::from_str(line).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            line: k + 1,
            field: "prediction".into(),
            msg: e.to_string(),
        })?;
        out.push(p);
    }
    Ok(out)
}

/// Predictions and intermediate logits of every sentence, in order.
fn decode(model: &Model, corpus: &[Example]) -> anyhow::Result<(Vec<Prediction>, Vec<SentenceLogits>)> {
    let outs = corpus.par_iter().map(|ex| model.predict_tokens(&ex.tokens)).collect::<Result<Vec<_>, _>>()?;
    Ok(outs
        .into_iter()
        .enumerate()
        .map(|(k, o)| (Prediction { sentence_id: k, entities: o.entities }, o.intermediate))
        .unzip())
}

pub fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let gold = load(&a.data, "gold corpus")?;
    let (predictions, recall) = match (&a.checkpoint, &a.predictions) {
        (Some(ckpt), _) => {
            let model = load_model(ckpt)?;
            let (preds, logits) = decode(&model, &gold)?;
            let m = model.config().m;
            (preds, Some((m, span_recall_at_m(&gold, &logits, m)?)))
        }
        (None, Some(p)) => (read_predictions(p)?, None),
        (None, None) => return Err(Usage("one of --checkpoint or --predictions is required".into()).into()),
    };
    let report: EvalReport = evaluate(&gold, &predictions, &EvalConfig::default())?;
    println!("{report}");
    if let Some((m, r)) = recall {
        println!("span recall@{m}: {r:.6}");
    }
    if let Some(out) = &a.out {
        let recall = recall.map(|(m, r)| json!({"m": m, "recall": r}));
        write_json(out, &json!({"report": report, "span_recall_at_m": recall}))?;
    }
    Ok(())
}

pub fn predict(a: PredictArgs) -> anyhow::Result<()> {
    let model = load_model(&a.checkpoint)?;
    let corpus = load(&a.data, "corpus")?;
    let preds = predict_corpus(&model, &corpus)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let file = fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut w = BufWriter::new(file);
    for p in &preds {
        serde_json::to_writer(&mut w, p)?;
        writeln!(w)?;
    }
    w.flush()?;
    let n: usize = preds.iter().map(|p| p.entities.len()).sum();
    println!("{n} entities in {} sentences written to {}", preds.len(), a.out.display());
    Ok(())
}

pub fn bench(a: BenchArgs, threads: &str) -> anyhow::Result<()> {
    let text = read_config_file(a.bench.config.as_deref())?;
    let mut cfg = BenchConfig::default();
    a.bench.apply(|k, v| cfg.set(k, v), text.as_deref())?;
    cfg.validate()?;
    if let Some(dir) = &a.out {
        echo_run(dir, "bench", threads, &[("stage", format!("{:?}", a.stage).to_lowercase())], &cfg.to_kv())?;
    }
    let mut reports: Vec<BenchReport> = Vec::new();
    if a.stage != Stage::Cross {
        reports.push(bench_scoring(&cfg)?);
    }
    if a.stage != Stage::Scoring {
        reports.push(bench_cross_scoring(&cfg)?);
    }
    for r in &reports {
        println!("{r}");
        println!(
            "analytic FLOPs decomposed < naive: {}\n",
            if r.decomposed.flops < r.naive.flops { "yes" } else { "no" }
        );
    }
    if let Some(dir) = &a.out {
        write_json(&dir.join("bench.json"), &json!(reports))?;
    }
    Ok(())
}

fn mark(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

pub fn ablate(a: AblateArgs, threads: &str) -> anyhow::Result<()> {
    let base = model_config(&a.model)?;
    let train = load(&a.train, "training corpus")?;
    let dev = load(&a.dev, "dev corpus")?;
    let inputs = [("train", a.train.display().to_string()), ("dev", a.dev.display().to_string())];
    echo_run(&a.out, "ablate", threads, &inputs, &base.to_kv())?;
    let header = "setting\trep_label\trep_boundary\trep_function\tcls_boundary\tcls_attention\tcls_cross\tcls_function\tdev_P\tdev_R\tdev_F1\tbest_epoch";
    let mut tsv = String::from(header);
    tsv.push('\n');
    let mut rows = Vec::new();
    for setting in Setting::ALL {
        let cfg = ModelConfig { setting, ..base.clone() };
        let dir = a.out.join(setting.to_string());
        let mut model = Model::for_corpus(cfg, &train)?;
        echo_run(&dir, "ablate", threads, &inputs, &model.config().to_kv())?;
        eprintln!("setting ({setting}): {}", setting.description());
        let mut cb = print_epoch;
        let report = train_model(
            &mut model,
            &train,
            TrainOptions { dev: Some(&dev), out_dir: Some(&dir), restore_best: true, on_epoch: Some(&mut cb) },
        )?;
        let best = report.best_epoch.expect("dev scores recorded every epoch");
        let scores = report.epochs[best - 1].dev.expect("dev scores recorded every epoch");
        let f = setting.factors();
        writeln!(
            tsv,
            "({setting})\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{best}",
            mark(f.rep_label),
            mark(f.rep_boundary),
            f.rep_function.unwrap_or("-"),
            mark(f.cls_boundary),
            mark(f.cls_attention),
            mark(f.cls_cross),
            f.cls_function,
            scores.precision,
            scores.recall,
            scores.f1
        )?;
        fs::write(a.out.join(ABLATION_TSV), &tsv)?;
        rows.push(json!({
            "setting": setting.to_string(),
            "description": setting.description(),
            "factors": f,
            "dev": scores,
            "best_epoch": best,
            "metrics": dir.join(METRICS_FILE),
        }));
    }
    write_json(&a.out.join("ablation.json"), &json!(rows))?;
    println!("{:<9}| {:<34}| {:<44}| dev", "", "span representation", "span classification");
    println!(
        "{:<9}| {:<6} {:<9} {:<16} | {:<9} {:<10} {:<6} {:<16} | {:>6} {:>6} {:>6}",
        "setting", "label", "boundary", "function", "boundary", "attention", "cross", "function", "P", "R", "F1"
    );
    for line in tsv.lines().skip(1) {
        let c: Vec<&str> = line.split('\t').collect();
        let pct = |s: &str| s.parse::<f64>().map(|v| format!("{:.2}", 100.0 * v)).unwrap_or_default();
        println!(
            "{:<9}| {:<6} {:<9} {:<16} | {:<9} {:<10} {:<6} {:<16} | {:>6} {:>6} {:>6}",
            c[0],
            c[1],
            c[2],
            c[3],
            c[4],
            c[5],
            c[6],
            c[7],
            pct(c[8]),
            pct(c[9]),
            pct(c[10])
        );
    }
    let f1 = |k: usize| rows[k]["dev"]["f1"].as_f64().unwrap_or(f64::NAN);
    let (a_, g, h) = (f1(0), f1(6), f1(7));
    println!("ordering (h) > (g) > (a): {} (reported, not required)", mark(h > g && g > a_));
    Ok(())
}
