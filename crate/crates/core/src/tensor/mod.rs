//! Dense row-major tensors and the numeric primitives the model is built from.
//!
//! Everything here is plain value-level code. The reverse-mode machinery lives in
//! [`tape`], gradient validation in [`gradcheck`], and parameter persistence in
//! [`checkpoint`].

pub mod checkpoint;
pub mod gradcheck;
pub(crate) mod linalg;
pub mod mlp;
pub mod tape;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};

pub use mlp::{Activation, Affine, Mlp, MlpParams};

/// Dense n-dimensional array of `f64` in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that every extent is positive and that the
    /// data length matches the shape.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if let Some(axis) = shape.iter().position(|&e| e == 0) {
            return Err(shape_err!("extent of axis {axis} is zero in {shape:?}"));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err!("shape {shape:?} needs {expected} values, got {}", data.len()));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self::from_parts(vec![values.len()], values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    /// I.i.d. `Normal(0, sigma^2)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], sigma: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = if sigma == 0.0 {
            vec![0.0; n]
        } else {
            let normal = Normal::new(0.0, sigma).expect("sigma must be finite and non-negative");
            (0..n).map(|_| normal.sample(rng)).collect()
        };
        Self::from_parts(shape.to_vec(), data)
    }

    /// I.i.d. `Uniform(-bound, bound)` entries.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len());
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &e)| {
            assert!(i < e, "index {index:?} out of bounds for {:?}", self.shape);
            acc * e + i
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite value in {what}")))
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Mode-`mode` product of a rank-3 tensor with a vector (`mode` is 1, 2 or 3).
/// The contracted axis is removed from the result.
pub fn mode_n_mul(t: &Tensor, v: &[f64], mode: usize) -> Result<Tensor> {
    if t.rank() != 3 {
        return Err(shape_err!("mode_n_mul needs a rank-3 tensor, got {:?}", t.shape()));
    }
    if !(1..=3).contains(&mode) {
        return Err(Error::Precondition(format!("mode must be 1, 2 or 3, got {mode}")));
    }
    let [a, b, c] = [t.shape[0], t.shape[1], t.shape[2]];
    let extent = t.shape[mode - 1];
    if extent != v.len() {
        return Err(shape_err!("axis {mode} has extent {extent} but the vector has length {}", v.len()));
    }
    let d = t.data();
    let out = match mode {
        1 => {
            let mut out = vec![0.0; b * c];
            for (ia, &va) in v.iter().enumerate() {
                for (o, x) in out.iter_mut().zip(&d[ia * b * c..(ia + 1) * b * c]) {
                    *o += va * x;
                }
            }
            Tensor::from_parts(vec![b, c], out)
        }
        2 => {
            let mut out = vec![0.0; a * c];
            for ia in 0..a {
                let row = &mut out[ia * c..(ia + 1) * c];
                for (ib, &vb) in v.iter().enumerate() {
                    let base = (ia * b + ib) * c;
                    for (o, x) in row.iter_mut().zip(&d[base..base + c]) {
                        *o += vb * x;
                    }
                }
            }
            Tensor::from_parts(vec![a, c], out)
        }
        _ => {
            let out = d.chunks_exact(c).map(|fibre| dot(fibre, v)).collect();
            Tensor::from_parts(vec![a, b], out)
        }
    };
    Ok(out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable `log(sum(exp(x)))`.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Softmax with max-subtraction.
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Precondition("softmax of an empty vector".into()));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("softmax input is not finite".into()));
    }
    Ok(softmax_unchecked(scores))
}

pub(crate) fn softmax_unchecked(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    out
}

/// `-log softmax(logits)[gold]`, computed through a stable log-sum-exp.
pub fn cross_entropy(logits: &[f64], gold: usize) -> Result<f64> {
    if gold >= logits.len() {
        return Err(Error::Index(format!("gold label {gold} out of range for {} labels", logits.len())));
    }
    let loss = log_sum_exp(logits) - logits[gold];
    if !loss.is_finite() {
        return Err(Error::Numeric("cross-entropy is not finite".into()));
    }
    Ok(loss.max(0.0))
}
