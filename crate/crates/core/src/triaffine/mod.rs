//! Value-level triaffine transformation, span attention, cross-span attention
//! and span scoring.
//!
//! These functions evaluate one span at a time with plain loops. The batched
//! model in [`crate::pipeline`] records the same computations on a tape; the
//! functions here are its reference semantics.

mod variant;

pub use variant::{variant_score, Factors, Setting, SpanScorer, VariantWeights};

use crate::error::{shape_err, Error, Result};
use crate::span::Span;
use crate::tensor::{dot, mode_n_mul, softmax, MlpParams, Tensor};

/// The three input transformations of one triaffine site.
#[derive(Clone, Debug, PartialEq)]
pub struct TriaffineMlps {
    /// Left boundary.
    pub a: MlpParams,
    /// Middle (attended or aggregated) vector.
    pub b: MlpParams,
    /// Right boundary.
    pub c: MlpParams,
}

impl TriaffineMlps {
    pub fn identity() -> Self {
        Self { a: MlpParams::identity(), b: MlpParams::identity(), c: MlpParams::identity() }
    }

    fn left(&self, u: &[f64]) -> Result<Vec<f64>> {
        let mut x = self.a.apply(u)?;
        x.push(1.0);
        Ok(x)
    }

    fn right(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut x = self.c.apply(v)?;
        x.push(1.0);
        Ok(x)
    }
}

/// Label-wise tensors `[d+1, d, d+1]` sharing one set of input transformations.
/// A single tensor is shared by every label.
#[derive(Clone, Debug, PartialEq)]
pub struct TriaffineSite {
    pub mlps: TriaffineMlps,
    pub tensors: Vec<Tensor>,
}

impl TriaffineSite {
    pub fn labels(&self) -> usize {
        self.tensors.len()
    }

    pub fn tensor(&self, r: usize) -> &Tensor {
        &self.tensors[if self.tensors.len() == 1 { 0 } else { r }]
    }

    /// `W_r` contracted with both augmented boundaries, leaving the middle axis.
    pub fn boundary(&self, r: usize, hi: &[f64], hj: &[f64]) -> Result<Vec<f64>> {
        boundary_vector(self.tensor(r), &self.mlps.left(hi)?, &self.mlps.right(hj)?)
    }
}

fn boundary_vector(t: &Tensor, u1: &[f64], v1: &[f64]) -> Result<Vec<f64>> {
    let (a, b, c) = match t.shape() {
        &[a, b, c] => (a, b, c),
        s => return Err(shape_err!("triaffine tensor must be rank 3, got {s:?}")),
    };
    if u1.len() != a || v1.len() != c {
        return Err(shape_err!("boundaries of widths {} and {} against tensor {:?}", u1.len(), v1.len(), t.shape()));
    }
    let data = t.data();
    let mut out = vec![0.0; b];
    for (ai, &ua) in u1.iter().enumerate() {
        for (bi, o) in out.iter_mut().enumerate() {
            let row = &data[(ai * b + bi) * c..(ai * b + bi + 1) * c];
            *o += ua * dot(row, v1);
        }
    }
    Ok(out)
}

/// `W ×1 [MLP_a(u); 1] ×2 MLP_b(w) ×3 [MLP_c(v); 1]`.
pub fn triaff(u: &[f64], v: &[f64], w: &[f64], t: &Tensor, mlps: &TriaffineMlps) -> Result<f64> {
    let u1 = mlps.left(u)?;
    let v1 = mlps.right(v)?;
    let w1 = mlps.b.apply(w)?;
    if t.shape() != [u1.len(), w1.len(), v1.len()] {
        return Err(shape_err!(
            "tensor {:?} does not match transformed inputs ({}, {}, {})",
            t.shape(),
            u1.len(),
            w1.len(),
            v1.len()
        ));
    }
    let m = mode_n_mul(t, &u1, 1)?;
    let m = mode_n_mul(&m.reshape(&[w1.len(), v1.len(), 1])?, &v1, 2)?;
    Ok(dot(m.data(), &w1))
}

/// How attention scores over the items of a span are produced.
#[derive(Clone, Debug, PartialEq)]
pub enum AttentionScorer {
    /// `s_k = TriAff(h_i, h_j, h_k, W_r)`.
    Triaffine(TriaffineSite),
    /// `s_k = q_r . MLP(h_k)`; boundaries are ignored.
    Query { keys: MlpParams, queries: Vec<Vec<f64>> },
    /// `s_k = a_r . MLP_a(h_i) + b_r . MLP_c(h_j) + c_r . MLP_b(h_k) + bias_r`.
    Linear { mlps: TriaffineMlps, a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, c: Vec<Vec<f64>>, bias: Vec<f64> },
}

impl AttentionScorer {
    pub fn labels(&self) -> usize {
        match self {
            AttentionScorer::Triaffine(site) => site.labels(),
            AttentionScorer::Query { queries, .. } => queries.len(),
            AttentionScorer::Linear { bias, .. } => bias.len(),
        }
    }

    /// Scores of every item for every label, `[labels][items]`.
    fn scores(&self, hi: &[f64], hj: &[f64], items: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        match self {
            AttentionScorer::Triaffine(site) => {
                let keys = items.iter().map(|x| site.mlps.b.apply(x)).collect::<Result<Vec<_>>>()?;
                (0..site.labels())
                    .map(|r| {
                        let c = site.boundary(r, hi, hj)?;
                        keys.iter().map(|k| checked_dot(&c, k)).collect()
                    })
                    .collect()
            }
            AttentionScorer::Query { keys, queries } => {
                let keys = items.iter().map(|x| keys.apply(x)).collect::<Result<Vec<_>>>()?;
                queries.iter().map(|q| keys.iter().map(|k| checked_dot(q, k)).collect()).collect()
            }
            AttentionScorer::Linear { mlps, a, b, c, bias } => {
                let u = mlps.a.apply(hi)?;
                let v = mlps.c.apply(hj)?;
                let keys = items.iter().map(|x| mlps.b.apply(x)).collect::<Result<Vec<_>>>()?;
                (0..bias.len())
                    .map(|r| {
                        let base = checked_dot(&a[r], &u)? + checked_dot(&b[r], &v)? + bias[r];
                        keys.iter().map(|k| Ok(base + checked_dot(&c[r], k)?)).collect()
                    })
                    .collect()
            }
        }
    }
}

fn checked_dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_err!("dot of lengths {} and {}", a.len(), b.len()));
    }
    Ok(dot(a, b))
}

/// Attention scorer plus the value transformation of attended items.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub scorer: AttentionScorer,
    pub value: MlpParams,
}

/// Attention over the tokens of one span.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanAttention {
    /// `[labels][len]`; one row when the scorer shares its weights.
    pub alpha: Vec<Vec<f64>>,
    /// `[labels][d]`, the attention-weighted value vectors.
    pub reps: Vec<Vec<f64>>,
    /// `[len][d]`, the transformed value of every token of the span.
    pub values: Vec<Vec<f64>>,
}

/// Label-wise span representation by attention over the span's own tokens.
pub fn span_attention(h: &Tensor, span: Span, weights: &AttentionWeights) -> Result<SpanAttention> {
    let n = token_count(h)?;
    if span.start > span.end || span.end >= n {
        return Err(Error::Precondition(format!("span {span} is not within {n} tokens")));
    }
    let items: Vec<&[f64]> = (span.start..=span.end).map(|k| h.row(k)).collect();
    let scores = weights.scorer.scores(h.row(span.start), h.row(span.end), &items)?;
    let values = items.iter().map(|x| weights.value.apply(x)).collect::<Result<Vec<_>>>()?;
    let alpha = scores.iter().map(|s| softmax(s)).collect::<Result<Vec<_>>>()?;
    let reps = alpha.iter().map(|a| weighted_sum(a, &values)).collect();
    Ok(SpanAttention { alpha, reps, values })
}

fn token_count(h: &Tensor) -> Result<usize> {
    match h.shape() {
        &[n, _] => Ok(n),
        s => Err(shape_err!("token representations must be a matrix, got {s:?}")),
    }
}

fn weighted_sum(weights: &[f64], values: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; values[0].len()];
    for (w, v) in weights.iter().zip(values) {
        out.iter_mut().zip(v).for_each(|(o, x)| *o += w * x);
    }
    out
}

/// Attention over related spans.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttention {
    /// `[labels][candidates]`.
    pub beta: Vec<Vec<f64>>,
    /// `[labels][d]`.
    pub reps: Vec<Vec<f64>>,
    /// `[labels][candidates][d]`, transformed candidate representations.
    pub values: Vec<Vec<Vec<f64>>>,
}

/// Cross-span representation of `span` from label-wise candidate
/// representations `candidates[g].1[r]`. The candidates must include `span`.
pub fn cross_span_attention(
    h: &Tensor,
    span: Span,
    candidates: &[(Span, Vec<Vec<f64>>)],
    weights: &AttentionWeights,
) -> Result<CrossAttention> {
    let AttentionScorer::Triaffine(site) = &weights.scorer else {
        return Err(Error::Config("cross-span attention needs a triaffine scorer".into()));
    };
    if candidates.is_empty() {
        return Err(Error::Precondition("empty candidate set".into()));
    }
    if !candidates.iter().any(|(s, _)| *s == span) {
        return Err(Error::Precondition(format!("candidate set does not contain {span}")));
    }
    let n = token_count(h)?;
    if span.end >= n {
        return Err(Error::Precondition(format!("span {span} is not within {n} tokens")));
    }
    let labels = candidates[0].1.len().max(site.labels());
    if candidates.iter().any(|(_, reps)| reps.len() != labels && reps.len() != 1) {
        return Err(shape_err!("candidates carry differing label counts"));
    }
    let pick = |reps: &Vec<Vec<f64>>, r: usize| -> Vec<f64> { reps[if reps.len() == 1 { 0 } else { r }].clone() };
    let (hi, hj) = (h.row(span.start), h.row(span.end));
    let mut out = CrossAttention { beta: Vec::new(), reps: Vec::new(), values: Vec::new() };
    for r in 0..labels {
        let c = site.boundary(r, hi, hj)?;
        let mut scores = Vec::with_capacity(candidates.len());
        let mut values = Vec::with_capacity(candidates.len());
        for (_, reps) in candidates {
            let rep = pick(reps, r);
            scores.push(checked_dot(&c, &site.mlps.b.apply(&rep)?)?);
            values.push(weights.value.apply(&rep)?);
        }
        let beta = softmax(&scores)?;
        out.reps.push(weighted_sum(&beta, &values));
        out.beta.push(beta);
        out.values.push(values);
    }
    Ok(out)
}

/// Logit of one label: `TriAff(h_i, h_j, rep, V_r)`.
pub fn score_naive(hi: &[f64], hj: &[f64], rep: &[f64], v: &Tensor, mlps: &TriaffineMlps) -> Result<f64> {
    triaff(hi, hj, rep, v, mlps)
}

/// `sum_g weights[g] * TriAff(h_i, h_j, values[g], V_r)`, evaluated by
/// contracting the boundaries once and reusing the result for every value.
///
/// Equal to [`score_naive`] on the weighted mean of `values` only when the
/// middle transformation is the identity, so any other transformation is
/// rejected.
pub fn score_decomposed(
    hi: &[f64],
    hj: &[f64],
    values: &[Vec<f64>],
    weights: &[f64],
    v: &Tensor,
    mlps: &TriaffineMlps,
) -> Result<f64> {
    if mlps.b.depth() > 0 {
        return Err(Error::Config(format!(
            "decomposition invalid: the scoring transformation of the aggregated vector has {} layers",
            mlps.b.depth()
        )));
    }
    if values.is_empty() || values.len() != weights.len() {
        return Err(Error::Precondition(format!("{} values for {} weights", values.len(), weights.len())));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Precondition(format!("weights sum to {total}, not 1")));
    }
    let c = boundary_vector(v, &mlps.left(hi)?, &mlps.right(hj)?)?;
    let mut acc = 0.0;
    for (w, x) in weights.iter().zip(values) {
        acc += w * checked_dot(&c, x)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests;
