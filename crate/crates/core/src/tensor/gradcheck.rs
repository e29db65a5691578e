//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Gradients, NodeId, ParamStore, Tape};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    /// Coordinates probed per parameter tensor; 0 probes all of them.
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { epsilon: 1e-5, coords_per_param: 0, seed: 0 }
    }
}

/// `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Checks `grad` against central differences of `f` at `theta`.
///
/// Returns the largest relative error over the probed coordinates.
pub fn grad_check<F>(mut f: F, theta: &[f64], grad: &[f64], cfg: &GradCheckConfig) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if grad.len() != theta.len() {
        return Err(Error::Shape(format!("{} gradients for {} parameters", grad.len(), theta.len())));
    }
    let mut x = theta.to_vec();
    let mut worst = 0.0f64;
    for k in probe(theta.len(), cfg, 0) {
        let numeric = central(&mut |x: &[f64]| f(x), &mut x, k, cfg.epsilon)?;
        worst = worst.max(relative_error(grad[k], numeric));
    }
    Ok(worst)
}

fn central(f: &mut dyn FnMut(&[f64]) -> Result<f64>, x: &mut [f64], k: usize, eps: f64) -> Result<f64> {
    let orig = x[k];
    x[k] = orig + eps;
    let plus = f(x)?;
    x[k] = orig - eps;
    let minus = f(x)?;
    x[k] = orig;
    if !plus.is_finite() || !minus.is_finite() {
        return Err(Error::Numeric(format!("objective not finite near coordinate {k}")));
    }
    Ok((plus - minus) / (2.0 * eps))
}

fn probe(len: usize, cfg: &GradCheckConfig, salt: u64) -> Vec<usize> {
    if cfg.coords_per_param == 0 || cfg.coords_per_param >= len {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut idx = sample(&mut rng, len, cfg.coords_per_param).into_vec();
    idx.sort_unstable();
    idx
}

/// Runs `build` on a fresh tape, differentiates the returned scalar, and
/// compares every parameter gradient against central differences.
pub fn check_tape_gradients<F>(store: &ParamStore, build: F, cfg: &GradCheckConfig) -> Result<f64>
where
    F: Fn(&mut Tape<'_>) -> Result<NodeId>,
{
    let analytic: Gradients = {
        let mut tape = Tape::new(store);
        let loss = build(&mut tape)?;
        tape.backward(loss)?
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(s);
        let loss = build(&mut tape)?;
        let v = tape.value(loss).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numeric("objective is not finite".into()))
        }
    };
    let mut work = store.clone();
    let mut worst = 0.0f64;
    for id in store.ids() {
        let g = analytic.dense(id);
        for k in probe(store.get(id).len(), cfg, id.index() as u64) {
            let orig = work.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + cfg.epsilon;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig - cfg.epsilon;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.epsilon);
            worst = worst.max(relative_error(g.data()[k], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{cross_entropy, Activation, Affine, MlpParams, Tensor};

    #[test]
    fn quadratic() {
        let theta = [1.0, 2.0];
        let grad = [2.0, 4.0];
        let err =
            grad_check(|x| Ok(x.iter().map(|v| v * v).sum()), &theta, &grad, &GradCheckConfig::default()).unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let err = grad_check(|x| Ok(x[0] * x[0]), &[3.0], &[5.0], &GradCheckConfig::default()).unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let r = grad_check(|x| Ok(x[0].ln()), &[0.0], &[0.0], &GradCheckConfig::default());
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn cross_entropy_of_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let w1 = store.add("w1", Tensor::randn(&[3, 5], 1.0, &mut rng));
        let b1 = store.add("b1", Tensor::randn(&[5], 1.0, &mut rng));
        let w2 = store.add("w2", Tensor::randn(&[5, 4], 1.0, &mut rng));
        let b2 = store.add("b2", Tensor::randn(&[4], 1.0, &mut rng));
        let x = Tensor::randn(&[1, 3], 1.0, &mut rng);
        let build = |tape: &mut Tape<'_>| {
            let xin = tape.constant(x.clone());
            let (p1, q1, p2, q2) = (tape.param(w1), tape.param(b1), tape.param(w2), tape.param(b2));
            let h = tape.matmul(xin, p1)?;
            let h = tape.add_bias(h, q1)?;
            let h = tape.tanh(h);
            let o = tape.matmul(h, p2)?;
            let o = tape.add_bias(o, q2)?;
            let logits = tape.reshape(o, &[4, 1])?;
            tape.span_cross_entropy(logits, &[2])
        };
        // The tape loss agrees with the value-level MLP and cross-entropy.
        let mlp = MlpParams::new(
            vec![
                Affine::new(store.get(w1).clone(), store.get(b1).clone()).unwrap(),
                Affine::new(store.get(w2).clone(), store.get(b2).clone()).unwrap(),
            ],
            Activation::Tanh,
        )
        .unwrap();
        let direct = cross_entropy(&mlp.apply(x.data()).unwrap(), 2).unwrap();
        let mut tape = Tape::new(&store);
        let loss = build(&mut tape).unwrap();
        assert!((tape.value(loss).item() - direct).abs() < 1e-12);
        let err = check_tape_gradients(&store, build, &GradCheckConfig::default()).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn sampling_probes_requested_count() {
        let cfg = GradCheckConfig { coords_per_param: 3, ..Default::default() };
        let idx = probe(10, &cfg, 1);
        assert_eq!(idx.len(), 3);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
    }
}
