use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::span::Span;

/// Intermediate logits of one sentence, `logits[s][r]` for span `spans[s]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SentenceLogits {
    pub spans: Vec<Span>,
    pub logits: Vec<Vec<f64>>,
}

/// All spans of a sentence of length `n`, ordered by start then end.
/// `max_len` of 0 means unbounded.
pub fn enumerate_spans(n: usize, max_len: usize) -> Vec<Span> {
    let cap = if max_len == 0 { n } else { max_len };
    let mut out = Vec::new();
    for i in 0..n {
        for j in i..n.min(i + cap) {
            out.push(Span::new(i, j));
        }
    }
    out
}

/// Ranking key of a span: its best non-None logit (None sits at index 0).
pub fn span_key(logits: &[f64]) -> f64 {
    logits[1..].iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn rank(spans: &[Span], keys: &[f64], a: usize, b: usize) -> Ordering {
    keys[b].total_cmp(&keys[a]).then_with(|| (spans[a].start, spans[a].end).cmp(&(spans[b].start, spans[b].end)))
}

/// Indices of the `min(m, S)` spans with the largest keys, ordered by key
/// descending and then by `(start, end)`.
pub fn top_m_indices(spans: &[Span], keys: &[f64], m: usize) -> Vec<usize> {
    debug_assert_eq!(spans.len(), keys.len());
    let mut idx: Vec<usize> = (0..spans.len()).collect();
    let m = m.min(idx.len());
    if m == 0 {
        return Vec::new();
    }
    if m < idx.len() {
        idx.select_nth_unstable_by(m - 1, |&a, &b| rank(spans, keys, a, b));
        idx.truncate(m);
    }
    idx.sort_unstable_by(|&a, &b| rank(spans, keys, a, b));
    idx
}

/// The retained spans of one sentence.
pub fn select_top_m(spans: &[Span], logits: &[Vec<f64>], m: usize) -> Result<Vec<Span>> {
    if spans.len() != logits.len() {
        return Err(Error::Shape(format!("{} spans but {} logit rows", spans.len(), logits.len())));
    }
    if logits.iter().any(|row| row.len() < 2) {
        return Err(Error::Shape("logit rows need None plus at least one label".into()));
    }
    if logits.iter().flatten().any(|x| x.is_nan()) {
        return Err(Error::Numeric("NaN logit in top-m selection".into()));
    }
    let keys: Vec<f64> = logits.iter().map(|r| span_key(r)).collect();
    Ok(top_m_indices(spans, &keys, m).into_iter().map(|k| spans[k]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert_eq, proptest};

    #[test]
    fn enumeration_order_and_count() {
        let s = enumerate_spans(4, 0);
        assert_eq!(s.len(), 10);
        assert_eq!(s[..4], [Span::new(0, 0), Span::new(0, 1), Span::new(0, 2), Span::new(0, 3)]);
        assert_eq!(enumerate_spans(4, 2).len(), 7);
        assert!(enumerate_spans(0, 0).is_empty());
    }

    #[test]
    fn ties_break_by_position() {
        let spans = enumerate_spans(3, 0);
        let logits = vec![vec![9.0, 1.0]; spans.len()];
        let top = select_top_m(&spans, &logits, 3).unwrap();
        assert_eq!(top, spans[..3]);
    }

    #[test]
    fn none_column_is_ignored() {
        let spans = vec![Span::new(0, 0), Span::new(1, 1)];
        let logits = vec![vec![100.0, 0.0], vec![-100.0, 1.0]];
        assert_eq!(select_top_m(&spans, &logits, 1).unwrap(), vec![Span::new(1, 1)]);
    }

    #[test]
    fn m_larger_than_s_keeps_everything() {
        let spans = enumerate_spans(2, 0);
        let logits = vec![vec![0.0, 1.0], vec![0.0, 3.0], vec![0.0, 2.0]];
        let top = select_top_m(&spans, &logits, 30).unwrap();
        assert_eq!(top, vec![spans[1], spans[2], spans[0]]);
    }

    #[test]
    fn rejects_nan_and_ragged() {
        let spans = enumerate_spans(1, 0);
        assert!(select_top_m(&spans, &[vec![0.0, f64::NAN]], 1).is_err());
        assert!(select_top_m(&spans, &[vec![0.0]], 1).is_err());
        assert!(select_top_m(&spans, &[], 1).is_err());
    }

    proptest! {
        #[test]
        fn matches_full_sort(n in 1usize..8, m in 1usize..40, vals in proptest::collection::vec(0u8..4, 36 * 3)) {
            let spans = enumerate_spans(n, 0);
            let logits: Vec<Vec<f64>> = (0..spans.len()).map(|s| (0..3).map(|r| vals[s * 3 + r] as f64).collect()).collect();
            let mut oracle: Vec<(f64, usize, usize)> =
                spans.iter().zip(&logits).map(|(sp, l)| (-l[1].max(l[2]), sp.start, sp.end)).collect();
            oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let want: Vec<Span> = oracle.iter().take(m).map(|&(_, i, j)| Span::new(i, j)).collect();
            prop_assert_eq!(select_top_m(&spans, &logits, m).unwrap(), want);
        }
    }
}
