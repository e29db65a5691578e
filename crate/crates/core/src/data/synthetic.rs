//! Seeded generator of nested entity corpora.
//!
//! Entities come from a small bracketing grammar. A multi-token entity of
//! label `L` starts with one of the opener words `l_open{k}` and ends with one
//! of the closer words `l_close{k}`; in between sit shared filler words and,
//! below the depth limit, further entities. Single-token entities are the
//! words `l_solo{k}`. Every boundary is therefore lexically marked and a
//! model can in principle reach perfect F1.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{Entity, Example};
use crate::error::{Error, Result};

const MARKER_VARIANTS: usize = 3;
const FILLER_WORDS: usize = 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_sentences: usize,
    pub labels: Vec<String>,
    pub max_depth: usize,
    pub max_len: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 13,
            n_sentences: 300,
            labels: ["PER", "ORG", "LOC", "GPE"].map(String::from).to_vec(),
            max_depth: 3,
            max_len: 24,
        }
    }
}

struct Generator<'a> {
    cfg: &'a SyntheticConfig,
    markers: Vec<String>,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn filler(&mut self) -> String {
        format!("w{}", self.rng.random_range(0..FILLER_WORDS))
    }

    fn marker(&mut self, label: usize, kind: &str) -> String {
        format!("{}_{kind}{}", self.markers[label], self.rng.random_range(0..MARKER_VARIANTS))
    }

    fn pick_label(&mut self, ancestors: &[usize]) -> usize {
        let free: Vec<usize> = (0..self.cfg.labels.len()).filter(|l| !ancestors.contains(l)).collect();
        let pool = if free.is_empty() {
            (0..self.cfg.labels.len()).filter(|l| ancestors.last() != Some(l)).collect()
        } else {
            free
        };
        *pool.choose(&mut self.rng).expect("at least two labels")
    }

    /// Appends one entity (and everything nested in it) at `depth`.
    fn entity(&mut self, depth: usize, ancestors: &mut Vec<usize>, tokens: &mut Vec<String>, ents: &mut Vec<Entity>) {
        let label = self.pick_label(ancestors);
        let start = tokens.len() + 1;
        if self.rng.random_bool(0.2) {
            tokens.push(self.marker(label, "solo"));
        } else {
            tokens.push(self.marker(label, "open"));
            ancestors.push(label);
            let items = self.rng.random_range(1..=3);
            for _ in 0..items {
                if depth < self.cfg.max_depth && self.rng.random_bool(0.45) {
                    self.entity(depth + 1, ancestors, tokens, ents);
                } else {
                    let w = self.filler();
                    tokens.push(w);
                }
            }
            ancestors.pop();
            tokens.push(self.marker(label, "close"));
        }
        ents.push(Entity::new(start, tokens.len(), self.cfg.labels[label].clone()));
    }

    fn sentence(&mut self) -> Example {
        for _ in 0..100 {
            let mut tokens = Vec::new();
            let mut ents = Vec::new();
            let items = self.rng.random_range(2..=6);
            for _ in 0..items {
                if self.rng.random_bool(0.5) {
                    self.entity(1, &mut Vec::new(), &mut tokens, &mut ents);
                } else {
                    let w = self.filler();
                    tokens.push(w);
                }
            }
            if tokens.len() <= self.cfg.max_len {
                ents.sort();
                return Example { tokens, entities: ents };
            }
        }
        let n = self.cfg.max_len.min(3);
        Example { tokens: (0..n).map(|_| self.filler()).collect(), entities: Vec::new() }
    }
}

/// Generates `n_sentences` annotated sentences. Identical configs give
/// identical corpora.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<Example>> {
    if cfg.max_depth < 1 {
        return Err(Error::Config("max_depth must be at least 1".into()));
    }
    if cfg.labels.len() < 2 {
        return Err(Error::Config("at least two labels are required".into()));
    }
    if cfg.max_len < 1 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let markers = cfg.labels.iter().map(|l| l.to_ascii_lowercase()).collect::<Vec<_>>();
    let mut sorted = markers.clone();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != markers.len() {
        return Err(Error::Config("labels must differ case-insensitively".into()));
    }
    let mut g = Generator { cfg, markers, rng: ChaCha8Rng::seed_from_u64(cfg.seed) };
    Ok((0..cfg.n_sentences).map(|_| g.sentence()).collect())
}

/// True when some entity of the sentence overlaps another one.
pub fn has_nested(ex: &Example) -> bool {
    ex.entities
        .iter()
        .enumerate()
        .any(|(i, a)| ex.entities.iter().skip(i + 1).any(|b| a.start <= b.end && b.start <= a.end))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(depth: usize) -> SyntheticConfig {
        SyntheticConfig { n_sentences: 200, max_depth: depth, ..Default::default() }
    }

    #[test]
    fn flat_when_depth_is_one() {
        let corpus = generate_synthetic(&cfg(1)).unwrap();
        assert!(corpus.iter().all(|e| !has_nested(e)));
        assert!(corpus.iter().any(|e| !e.entities.is_empty()));
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate_synthetic(&cfg(3)).unwrap(), generate_synthetic(&cfg(3)).unwrap());
        let mut other = cfg(3);
        other.seed += 1;
        assert_ne!(generate_synthetic(&cfg(3)).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn nesting_appears_with_depth() {
        for depth in [2, 3] {
            let corpus = generate_synthetic(&cfg(depth)).unwrap();
            let nested = corpus.iter().filter(|e| has_nested(e)).count();
            assert!(nested > 0, "depth {depth}: no nested sentence");
        }
    }

    #[test]
    fn records_are_valid_and_bounded() {
        let c = SyntheticConfig { max_len: 12, ..cfg(3) };
        for ex in generate_synthetic(&c).unwrap() {
            ex.check().unwrap();
            assert!(ex.tokens.len() <= 12);
        }
    }

    #[test]
    fn markers_delimit_entities() {
        for ex in generate_synthetic(&cfg(3)).unwrap() {
            for e in &ex.entities {
                let first = &ex.tokens[e.start - 1];
                let last = &ex.tokens[e.end - 1];
                let tag = e.label.to_ascii_lowercase();
                if e.len() == 1 {
                    assert!(first.starts_with(&format!("{tag}_solo")));
                } else {
                    assert!(first.starts_with(&format!("{tag}_open")));
                    assert!(last.starts_with(&format!("{tag}_close")));
                }
            }
        }
    }

    #[test]
    fn rejects_bad_config() {
        assert!(generate_synthetic(&SyntheticConfig { max_depth: 0, ..Default::default() }).is_err());
        assert!(generate_synthetic(&SyntheticConfig { labels: vec!["A".into()], ..Default::default() }).is_err());
    }
}
