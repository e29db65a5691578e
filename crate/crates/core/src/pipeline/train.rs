use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{EncodedSentence, Model, ScoringPath};
use crate::data::{evaluate, EvalConfig, EvalReport, Example, Prediction};
use crate::error::{Error, Result};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::tape::{Gradients, ParamStore, Tape};

pub const METRICS_FILE: &str = "metrics.tsv";
pub const BEST_CHECKPOINT: &str = "best.ckpt.json";
pub const LAST_CHECKPOINT: &str = "last.ckpt.json";

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, m: zeros.clone(), v: zeros, t: 0 }
    }

    /// One update with learning rate `lr`. Missing gradients count as zero.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let k = id.index();
            let g = grads.get(id).map(|t| t.data());
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let theta = store.get_mut(id).data_mut();
            for i in 0..theta.len() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps) + self.weight_decay * theta[i];
                theta[i] -= lr * update;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DevScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_aux: f64,
    pub l_main: f64,
    pub loss: f64,
    pub dev: Option<DevScores>,
}

impl EpochMetrics {
    pub const HEADER: &'static str = "epoch\tL_aux\tL_main\tL\tdev_P\tdev_R\tdev_F1";

    pub fn tsv_row(&self) -> String {
        let dev = match self.dev {
            Some(d) => format!("{:.6}\t{:.6}\t{:.6}", d.precision, d.recall, d.f1),
            None => "-\t-\t-".into(),
        };
        format!("{}\t{:.6}\t{:.6}\t{:.6}\t{dev}", self.epoch, self.l_aux, self.l_main, self.loss)
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: Option<usize>,
    pub best_dev_f1: Option<f64>,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    pub dev: Option<&'a [Example]>,
    /// Receives `metrics.tsv` and the best and last checkpoints.
    pub out_dir: Option<&'a Path>,
    /// Load the best-on-dev parameters into the model when training ends.
    pub restore_best: bool,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochMetrics)>,
}

/// Predicts every sentence of `corpus` in order.
pub fn predict_corpus(model: &Model, corpus: &[Example]) -> Result<Vec<Prediction>> {
    corpus
        .par_iter()
        .enumerate()
        .map(|(k, ex)| {
            let out = model.predict_tokens(&ex.tokens)?;
            Ok(Prediction { sentence_id: k, entities: out.entities })
        })
        .collect()
}

pub fn evaluate_model(model: &Model, corpus: &[Example]) -> Result<EvalReport> {
    evaluate(corpus, &predict_corpus(model, corpus)?, &EvalConfig::default())
}

/// RNG stream of one sentence in one epoch, independent of batch layout.
fn sentence_rng(seed: u64, epoch: usize, idx: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64 + 1) << 32) | idx as u64);
    rng
}

/// Averaged gradients and losses of one batch.
pub fn batch_gradients(
    model: &Model,
    batch: &[(usize, &EncodedSentence)],
    epoch: usize,
) -> Result<(Gradients, f64, f64, f64)> {
    let path = if model.config().decomposed { ScoringPath::Decomposed } else { ScoringPath::Naive };
    let mut grads = Gradients::zeros_like(model.store());
    let scale = 1.0 / batch.len() as f64;
    let (mut aux, mut main, mut total) = (0.0, 0.0, 0.0);
    for &(idx, sent) in batch {
        let mut rng = sentence_rng(model.config().seed, epoch, idx);
        let mut tape = Tape::new(model.store());
        let parts = model
            .loss(&mut tape, sent, Some(&mut rng), path)
            .map_err(|e| Error::Numeric(format!("sentence {idx}: {e}")))?;
        let value = tape.value(parts.total).item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {value} on training sentence {idx}")));
        }
        tape.backward_into(parts.total, scale, &mut grads)
            .map_err(|e| Error::Numeric(format!("sentence {idx}: {e}")))?;
        aux += parts.aux;
        main += parts.main;
        total += value;
    }
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok((grads, aux, main, total))
}

/// Trains `model` on `train` for `config.epochs` epochs. Identical inputs
/// give bit-identical parameters.
pub fn train(model: &mut Model, train: &[Example], mut opts: TrainOptions<'_>) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::Precondition("empty training corpus".into()));
    }
    let cfg = model.config().clone();
    let encoded = train.iter().map(|ex| model.encode_example(ex)).collect::<Result<Vec<_>>>()?;
    let mut opt = AdamW::new(model.store(), cfg.weight_decay);
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * batches_per_epoch).max(1);
    let mut metrics_file = match opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut f = File::create(dir.join(METRICS_FILE))?;
            writeln!(f, "{}", EpochMetrics::HEADER)?;
            Some(f)
        }
        None => None,
    };
    let mut report = TrainReport::default();
    let mut best: Option<Checkpoint> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(u64::MAX);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut aux, mut main, mut total) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(usize, &EncodedSentence)> = chunk.iter().map(|&k| (k, &encoded[k])).collect();
            let (mut grads, a, m, t) = batch_gradients(model, &batch, epoch)?;
            aux += a;
            main += m;
            total += t;
            if cfg.grad_clip > 0.0 {
                let norm = grads.norm();
                if norm > cfg.grad_clip {
                    grads.scale(cfg.grad_clip / norm);
                }
            }
            let lr = if cfg.lr_decay { cfg.lr * (1.0 - step as f64 / total_steps as f64) } else { cfg.lr };
            opt.step(model.store_mut(), &grads, lr);
            step += 1;
        }
        let n = train.len() as f64;
        let dev = match opts.dev {
            Some(dev) => {
                let r = evaluate_model(model, dev)?;
                Some(DevScores { precision: r.precision, recall: r.recall, f1: r.f1 })
            }
            None => None,
        };
        let row = EpochMetrics { epoch, l_aux: aux / n, l_main: main / n, loss: total / n, dev };
        if let Some(f) = metrics_file.as_mut() {
            writeln!(f, "{}", row.tsv_row())?;
            f.flush()?;
        }
        if let Some(d) = dev {
            if report.best_dev_f1.is_none_or(|b| d.f1 > b) {
                report.best_dev_f1 = Some(d.f1);
                report.best_epoch = Some(epoch);
                let ckpt = model.checkpoint()?;
                if let Some(dir) = opts.out_dir {
                    ckpt.save(&dir.join(BEST_CHECKPOINT))?;
                }
                best = Some(ckpt);
            }
        }
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&row);
        }
        report.epochs.push(row);
    }
    if let Some(dir) = opts.out_dir {
        model.save(&dir.join(LAST_CHECKPOINT))?;
    }
    if opts.restore_best {
        if let Some(ckpt) = best {
            ckpt.restore_into(model.store_mut())?;
        }
    }
    Ok(report)
}
