//! Span-level precision, recall and F1 with per-label, length and
//! flat/nested breakdowns.

use std::collections::{BTreeMap, HashSet};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use super::corpus::{Entity, Example, NONE_LABEL};
use crate::error::{Error, Result};
use crate::pipeline::{select_top_m, SentenceLogits};

/// A predicted entity, 1-based and end-inclusive like [`Entity`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedEntity {
    pub start: usize,
    pub end: usize,
    pub label: String,
    /// Winning logit minus the runner-up.
    #[serde(default)]
    pub margin: f64,
}

impl PredictedEntity {
    fn key(&self) -> (usize, usize, &str) {
        (self.start, self.end, self.label.as_str())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sentence_id: usize,
    pub entities: Vec<PredictedEntity>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }

    pub fn gold(&self) -> usize {
        self.tp + self.fn_
    }

    fn add(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Upper bounds of the length buckets; longer entities share an
    /// overflow bucket.
    pub length_buckets: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { length_buckets: vec![1, 2, 3, 4, 5] }
    }
}

impl EvalConfig {
    fn bucket_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        let mut lo = 1;
        for &hi in &self.length_buckets {
            names.push(if lo == hi { hi.to_string() } else { format!("{lo}-{hi}") });
            lo = hi + 1;
        }
        names.push(format!("{lo}+"));
        names
    }

    fn bucket(&self, len: usize) -> usize {
        self.length_buckets.iter().position(|&hi| len <= hi).unwrap_or(self.length_buckets.len())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub micro: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_label: BTreeMap<String, Counts>,
    pub by_length: Vec<(String, Counts)>,
    /// Gold entities overlapping no other gold entity of their sentence.
    pub flat: Counts,
    /// Gold entities containing, contained in, or crossing another one.
    pub nested: Counts,
    /// Gold entities in a strict containment relation only, excluding pure crossings.
    pub nested_containment_gold: usize,
    pub gold_total: usize,
    pub predicted_total: usize,
}

fn overlaps(a: (usize, usize), b: (usize, usize)) -> bool {
    a.0 <= b.1 && b.0 <= a.1
}

fn strictly_contains(a: (usize, usize), b: (usize, usize)) -> bool {
    a != b && a.0 <= b.0 && b.1 <= a.1
}

/// Nested status of every span in `spans` relative to the others.
fn nested_flags(spans: &[(usize, usize)]) -> Vec<bool> {
    (0..spans.len()).map(|i| (0..spans.len()).any(|j| j != i && overlaps(spans[i], spans[j]))).collect()
}

/// Scores predictions against gold. Sentences without a prediction record
/// count as predicting nothing.
pub fn evaluate(gold: &[Example], predicted: &[Prediction], cfg: &EvalConfig) -> Result<EvalReport> {
    let mut by_sentence: Vec<Option<&Prediction>> = vec![None; gold.len()];
    for p in predicted {
        let slot = by_sentence
            .get_mut(p.sentence_id)
            .ok_or_else(|| Error::Eval(format!("unknown sentence id {}", p.sentence_id)))?;
        if slot.is_some() {
            return Err(Error::Eval(format!("sentence {} predicted twice", p.sentence_id)));
        }
        *slot = Some(p);
    }
    let names = cfg.bucket_names();
    let mut micro = Counts::default();
    let mut per_label: BTreeMap<String, Counts> = BTreeMap::new();
    let mut by_length = vec![Counts::default(); names.len()];
    let (mut flat, mut nested) = (Counts::default(), Counts::default());
    let mut containment = 0;
    let mut predicted_total = 0;
    for (sid, ex) in gold.iter().enumerate() {
        let n = ex.tokens.len();
        let preds: &[PredictedEntity] = by_sentence[sid].map(|p| p.entities.as_slice()).unwrap_or(&[]);
        let mut seen = HashSet::new();
        for p in preds {
            if p.start < 1 || p.end < p.start || p.end > n {
                return Err(Error::Eval(format!("sentence {sid}: span ({}, {}) outside {n} tokens", p.start, p.end)));
            }
            if p.label == NONE_LABEL {
                return Err(Error::Eval(format!("sentence {sid}: None is not an entity label")));
            }
            if !seen.insert(p.key()) {
                return Err(Error::Eval(format!(
                    "sentence {sid}: duplicate prediction ({}, {}, {})",
                    p.start, p.end, p.label
                )));
            }
        }
        predicted_total += preds.len();
        let gold_keys: HashSet<(usize, usize, &str)> =
            ex.entities.iter().map(|e| (e.start, e.end, e.label.as_str())).collect();
        let gold_spans: Vec<(usize, usize)> = ex.entities.iter().map(|e| (e.start, e.end)).collect();
        let gold_nested = nested_flags(&gold_spans);
        for (k, e) in ex.entities.iter().enumerate() {
            if gold_spans.iter().any(|&o| strictly_contains(o, gold_spans[k]) || strictly_contains(gold_spans[k], o)) {
                containment += 1;
            }
            let hit = seen.contains(&(e.start, e.end, e.label.as_str()));
            let c = if hit { Counts { tp: 1, ..Default::default() } } else { Counts { fn_: 1, ..Default::default() } };
            record(&mut micro, &mut per_label, &mut by_length, cfg, e, c);
            if gold_nested[k] {
                nested.add(c)
            } else {
                flat.add(c)
            }
        }
        let pred_spans: Vec<(usize, usize)> = preds.iter().map(|p| (p.start, p.end)).collect();
        let pred_nested = nested_flags(&pred_spans);
        for (k, p) in preds.iter().enumerate() {
            if gold_keys.contains(&p.key()) {
                continue;
            }
            let c = Counts { fp: 1, ..Default::default() };
            record(&mut micro, &mut per_label, &mut by_length, cfg, &Entity::new(p.start, p.end, p.label.clone()), c);
            if pred_nested[k] {
                nested.add(c)
            } else {
                flat.add(c)
            }
        }
    }
    Ok(EvalReport {
        precision: micro.precision(),
        recall: micro.recall(),
        f1: micro.f1(),
        micro,
        per_label,
        by_length: names.into_iter().zip(by_length).collect(),
        flat,
        nested,
        nested_containment_gold: containment,
        gold_total: gold.iter().map(|e| e.entities.len()).sum(),
        predicted_total,
    })
}

fn record(
    micro: &mut Counts,
    per_label: &mut BTreeMap<String, Counts>,
    by_length: &mut [Counts],
    cfg: &EvalConfig,
    e: &Entity,
    c: Counts,
) {
    micro.add(c);
    per_label.entry(e.label.clone()).or_default().add(c);
    by_length[cfg.bucket(e.len())].add(c);
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let row = |name: &str, c: &Counts| {
            format!(
                "{name:<12} {:>6} {:>6} {:>6} {:>8.4} {:>8.4} {:>8.4}\n",
                c.tp,
                c.fp,
                c.fn_,
                c.precision(),
                c.recall(),
                c.f1()
            )
        };
        let mut s = format!("{:<12} {:>6} {:>6} {:>6} {:>8} {:>8} {:>8}\n", "group", "tp", "fp", "fn", "P", "R", "F1");
        s.push_str(&row("micro", &self.micro));
        for (label, c) in &self.per_label {
            s.push_str(&row(&format!("label:{label}"), c));
        }
        for (bucket, c) in &self.by_length {
            s.push_str(&row(&format!("len:{bucket}"), c));
        }
        s.push_str(&row("flat", &self.flat));
        s.push_str(&row("nested", &self.nested));
        let _ = writeln!(
            s,
            "gold {} = flat {} + nested {} (containment only: {})",
            self.gold_total,
            self.flat.gold(),
            self.nested.gold(),
            self.nested_containment_gold
        );
        f.write_str(&s)
    }
}

/// Fraction of distinct gold entity spans retained by top-`m` selection over
/// the intermediate logits, micro-averaged over gold spans.
pub fn span_recall_at_m(gold: &[Example], logits: &[SentenceLogits], m: usize) -> Result<f64> {
    if m == 0 {
        return Err(Error::Precondition("m must be at least 1".into()));
    }
    if gold.len() != logits.len() {
        return Err(Error::Eval(format!("{} sentences but {} logit tables", gold.len(), logits.len())));
    }
    let (mut found, mut total) = (0usize, 0usize);
    for (ex, table) in gold.iter().zip(logits) {
        let retained: HashSet<_> = select_top_m(&table.spans, &table.logits, m)?.into_iter().collect();
        let spans: HashSet<_> = ex.entities.iter().map(Entity::span).collect();
        total += spans.len();
        found += spans.iter().filter(|s| retained.contains(s)).count();
    }
    Ok(if total == 0 { 1.0 } else { found as f64 / total as f64 })
}
