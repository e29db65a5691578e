use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Activation;
use crate::triaffine::Setting;

/// Model, training and decoding hyperparameters.
///
/// Every field can be set from a flat `key = value` file with the field's
/// name as key; see [`ModelConfig::set`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub setting: Setting,
    /// Width of every triaffine input.
    pub d: usize,
    /// Label count including None; 0 infers it from the training corpus.
    pub labels: usize,
    /// Spans kept for the cross-span stage.
    pub m: usize,
    pub mu_aux: f64,
    /// Standard deviation of the triaffine tensor initialization.
    pub sigma: f64,
    /// Longest enumerated span; 0 enumerates all spans.
    pub max_span_len: usize,
    /// Sentences are truncated to this many tokens.
    pub max_len: usize,
    pub emb_dim: usize,
    /// Recurrent hidden size per direction.
    pub hidden: usize,
    pub encoder_layers: usize,
    pub encoder_dropout: f64,
    /// Dropout on the token representations entering every MLP.
    pub dropout: f64,
    pub mlp_layers: usize,
    /// Hidden width of MLPs with more than one layer; 0 uses `d`.
    pub mlp_hidden: usize,
    pub activation: Activation,
    /// Cross-span attention reuses the token attention tensors.
    pub share_cross_tensors: bool,
    /// Score through the decomposed form instead of materializing span vectors.
    pub decomposed: bool,
    /// Add gold entity spans to the retained set during training.
    pub force_gold: bool,
    pub lr: f64,
    pub lr_decay: bool,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub min_count: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            setting: Setting::H,
            d: 64,
            labels: 0,
            m: 30,
            mu_aux: 1.0,
            sigma: 0.01,
            max_span_len: 0,
            max_len: 64,
            emb_dim: 64,
            hidden: 64,
            encoder_layers: 1,
            encoder_dropout: 0.1,
            dropout: 0.1,
            mlp_layers: 1,
            mlp_hidden: 0,
            activation: Activation::Relu,
            share_cross_tensors: false,
            decomposed: true,
            force_gold: false,
            lr: 2e-3,
            lr_decay: false,
            weight_decay: 0.01,
            grad_clip: 5.0,
            epochs: 30,
            batch_size: 8,
            seed: 42,
            min_count: 1,
        }
    }
}

/// Feeds every `key = value` line of `text` to `set`; blank lines and text
/// after `#` are skipped.
pub fn apply_kv_lines(text: &str, mut set: impl FnMut(&str, &str) -> Result<()>) -> Result<()> {
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) =
            line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value", k + 1)))?;
        set(key.trim(), value.trim()).map_err(|e| Error::Config(format!("line {}: {e}", k + 1)))?;
    }
    Ok(())
}

pub(crate) fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

impl ModelConfig {
    pub const KEYS: [&'static str; 27] = [
        "setting",
        "d",
        "labels",
        "m",
        "mu_aux",
        "sigma",
        "max_span_len",
        "max_len",
        "emb_dim",
        "hidden",
        "encoder_layers",
        "encoder_dropout",
        "dropout",
        "mlp_layers",
        "mlp_hidden",
        "activation",
        "share_cross_tensors",
        "decomposed",
        "force_gold",
        "lr",
        "lr_decay",
        "weight_decay",
        "grad_clip",
        "epochs",
        "batch_size",
        "seed",
        "min_count",
    ];

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "setting" => self.setting = value.parse()?,
            "d" => self.d = parse(key, value)?,
            "labels" | "num_labels" => self.labels = parse(key, value)?,
            "m" => self.m = parse(key, value)?,
            "mu_aux" | "mu" => self.mu_aux = parse(key, value)?,
            "sigma" => self.sigma = parse(key, value)?,
            "max_span_len" => self.max_span_len = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "emb_dim" => self.emb_dim = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "encoder_layers" => self.encoder_layers = parse(key, value)?,
            "encoder_dropout" => self.encoder_dropout = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "mlp_layers" => self.mlp_layers = parse(key, value)?,
            "mlp_hidden" => self.mlp_hidden = parse(key, value)?,
            "activation" => self.activation = value.trim().parse()?,
            "share_cross_tensors" => self.share_cross_tensors = parse(key, value)?,
            "decomposed" => self.decomposed = parse(key, value)?,
            "force_gold" => self.force_gold = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "lr_decay" => self.lr_decay = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "min_count" => self.min_count = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown configuration key '{other}'"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        apply_kv_lines(text, |k, v| self.set(k, v))
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let json = serde_json::to_value(self).expect("config serializes");
        for key in Self::KEYS {
            let v = &json[key];
            let text = match v {
                serde_json::Value::String(x) => x.clone(),
                other => other.to_string(),
            };
            let _ = writeln!(s, "{key} = {text}");
        }
        s
    }

    pub fn mlp_width(&self) -> usize {
        if self.mlp_hidden == 0 {
            self.d
        } else {
            self.mlp_hidden
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d == 0 || self.emb_dim == 0 || self.hidden == 0 || self.encoder_layers == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.m == 0 {
            return bad("m must be at least 1".into());
        }
        if self.mlp_layers == 0 {
            return bad("boundary MLPs need at least one layer".into());
        }
        if !self.mu_aux.is_finite() || self.mu_aux < 0.0 {
            return bad(format!("mu_aux {} must be a finite non-negative number", self.mu_aux));
        }
        if self.sigma.is_nan() || self.sigma <= 0.0 {
            return bad(format!("sigma {} must be positive", self.sigma));
        }
        for (name, p) in [("dropout", self.dropout), ("encoder_dropout", self.encoder_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1)"));
            }
        }
        if [self.lr, self.weight_decay, self.grad_clip].iter().any(|v| v.is_nan() || *v < 0.0) {
            return bad("learning rate, weight decay and clipping must be non-negative".into());
        }
        if self.batch_size == 0 || self.max_len == 0 {
            return bad("batch_size and max_len must be positive".into());
        }
        if self.labels == 1 {
            return bad("at least one entity label besides None is required".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = ModelConfig::default();
        assert_eq!((c.m, c.mu_aux, c.sigma, c.dropout), (30, 1.0, 0.01, 0.1));
        assert_eq!((c.d, c.hidden), (64, 64));
        c.validate().unwrap();
    }

    #[test]
    fn kv_round_trip() {
        let mut c = ModelConfig::default();
        c.apply_kv("d = 16 # small\nsetting=(c)\nactivation = tanh\n\nlr_decay = true\n").unwrap();
        assert_eq!((c.d, c.setting, c.activation, c.lr_decay), (16, Setting::C, Activation::Tanh, true));
        let mut back = ModelConfig::default();
        back.apply_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_key_and_bad_value() {
        let mut c = ModelConfig::default();
        assert!(c.apply_kv("bogus = 1").is_err());
        assert!(c.apply_kv("d = many").is_err());
        assert!(c.apply_kv("d").is_err());
    }

    #[test]
    fn invalid_values() {
        for (k, v) in [("m", "0"), ("mu_aux", "-1"), ("dropout", "1.0"), ("labels", "1"), ("sigma", "0")] {
            let mut c = ModelConfig::default();
            c.set(k, v).unwrap();
            assert!(c.validate().is_err(), "{k} = {v}");
        }
    }
}
