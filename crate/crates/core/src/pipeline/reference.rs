//! Span-at-a-time evaluation of the whole span layer from value-level
//! weights. Slow, but written directly from the definitions; the batched tape
//! forward is tested against it.

use super::model::ReferenceWeights;
use super::spans::{span_key, top_m_indices};
use crate::error::{Error, Result};
use crate::span::Span;
use crate::tensor::{cross_entropy, Tensor};
use crate::triaffine::{cross_span_attention, score_naive, span_attention, variant_score};

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceOutput {
    /// `[S][R]` intermediate logits.
    pub aux: Vec<Vec<f64>>,
    /// Indices of the retained spans.
    pub retained: Vec<usize>,
    /// `[L][R]` cross-span logits; empty without a cross stage.
    pub main: Vec<Vec<f64>>,
}

pub fn reference_forward(w: &ReferenceWeights, h: &Tensor, spans: &[Span], m: usize) -> Result<ReferenceOutput> {
    let aux = spans.iter().map(|&s| variant_score(&w.variant, h, s)).collect::<Result<Vec<_>>>()?;
    let Some((cross_att, main_site)) = &w.cross else {
        return Ok(ReferenceOutput { aux, retained: Vec::new(), main: Vec::new() });
    };
    let att = w.variant.attention.as_ref().ok_or_else(|| Error::Config("cross stage without span attention".into()))?;
    let keys: Vec<f64> = aux.iter().map(|r| span_key(r)).collect();
    let retained = top_m_indices(spans, &keys, m);
    let candidates =
        retained.iter().map(|&k| Ok((spans[k], span_attention(h, spans[k], att)?.reps))).collect::<Result<Vec<_>>>()?;
    let mut main = Vec::with_capacity(retained.len());
    for (span, _) in &candidates {
        let ca = cross_span_attention(h, *span, &candidates, cross_att)?;
        let (hi, hj) = (h.row(span.start), h.row(span.end));
        main.push(
            (0..w.variant.labels)
                .map(|r| score_naive(hi, hj, &ca.reps[r], main_site.tensor(r), &main_site.mlps))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(ReferenceOutput { aux, retained, main })
}

/// Mean cross-entropy of `[S][R]` logits against gold label ids.
pub fn mean_cross_entropy(logits: &[Vec<f64>], gold: &[usize]) -> Result<f64> {
    if logits.len() != gold.len() || logits.is_empty() {
        return Err(Error::Precondition(format!("{} logit rows for {} gold labels", logits.len(), gold.len())));
    }
    let mut total = 0.0;
    for (row, &g) in logits.iter().zip(gold) {
        total += cross_entropy(row, g)?;
    }
    Ok(total / gold.len() as f64)
}
