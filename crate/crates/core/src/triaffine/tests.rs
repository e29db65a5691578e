#![allow(clippy::needless_range_loop)]

use super::*;
use crate::tensor::{softmax, Activation, Affine};
use proptest::{prop_assert, proptest};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn layer(rng: &mut ChaCha8Rng, i: usize, o: usize) -> MlpParams {
    let w = Tensor::randn(&[i, o], 0.5, rng);
    let b = Tensor::randn(&[o], 0.5, rng);
    MlpParams::new(vec![Affine::new(w, b).unwrap()], Activation::Relu).unwrap()
}

fn site(rng: &mut ChaCha8Rng, dh: usize, d: usize, labels: usize, key_in: usize) -> TriaffineSite {
    TriaffineSite {
        mlps: TriaffineMlps { a: layer(rng, dh, d), b: layer(rng, key_in, d), c: layer(rng, dh, d) },
        tensors: (0..labels).map(|_| Tensor::randn(&[d + 1, d, d + 1], 1.0, rng)).collect(),
    }
}

fn attention(rng: &mut ChaCha8Rng, dh: usize, d: usize, labels: usize) -> AttentionWeights {
    AttentionWeights { scorer: AttentionScorer::Triaffine(site(rng, dh, d, labels, dh)), value: layer(rng, dh, d) }
}

fn scoring_site(rng: &mut ChaCha8Rng, dh: usize, d: usize, labels: usize) -> TriaffineSite {
    let mut s = site(rng, dh, d, labels, d);
    s.mlps.b = MlpParams::identity();
    s
}

#[test]
fn triaff_zero_tensor() {
    let t = Tensor::zeros(&[3, 2, 3]);
    assert_eq!(triaff(&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0], &t, &TriaffineMlps::identity()).unwrap(), 0.0);
}

#[test]
fn triaff_unit_case() {
    let t = Tensor::ones(&[2, 1, 2]);
    assert_eq!(triaff(&[1.0], &[1.0], &[1.0], &t, &TriaffineMlps::identity()).unwrap(), 4.0);
}

#[test]
fn triaff_matches_triple_loop() {
    let mut g = rng(1);
    let (u, v, w) = (vector(&mut g, 3), vector(&mut g, 3), vector(&mut g, 3));
    let t = Tensor::randn(&[4, 3, 4], 1.0, &mut g);
    let (u1, v1): (Vec<f64>, Vec<f64>) = ([u.clone(), vec![1.0]].concat(), [v.clone(), vec![1.0]].concat());
    let mut expected = 0.0;
    for a in 0..4 {
        for b in 0..3 {
            for c in 0..4 {
                expected += t.at(&[a, b, c]) * u1[a] * w[b] * v1[c];
            }
        }
    }
    let got = triaff(&u, &v, &w, &t, &TriaffineMlps::identity()).unwrap();
    assert!((got - expected).abs() < 1e-12);
}

#[test]
fn triaff_reduces_to_biaffine() {
    // Only one slice of the middle axis is populated; a unit vector on that
    // axis selects it and leaves a bilinear form in the augmented boundaries.
    let mut g = rng(2);
    let d = 3;
    let bil = Tensor::randn(&[d + 1, d + 1], 1.0, &mut g);
    let slot = 1;
    let mut t = Tensor::zeros(&[d + 1, d, d + 1]);
    for a in 0..=d {
        for c in 0..=d {
            t.data_mut()[(a * d + slot) * (d + 1) + c] = bil.at(&[a, c]);
        }
    }
    let mut w = vec![0.0; d];
    w[slot] = 1.0;
    for _ in 0..10 {
        let (u, v) = (vector(&mut g, d), vector(&mut g, d));
        let (u1, v1) = ([u.clone(), vec![1.0]].concat(), [v.clone(), vec![1.0]].concat());
        let mut expected = 0.0;
        for a in 0..=d {
            for c in 0..=d {
                expected += u1[a] * bil.at(&[a, c]) * v1[c];
            }
        }
        let got = triaff(&u, &v, &w, &t, &TriaffineMlps::identity()).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }
}

#[test]
fn triaff_rejects_mismatched_tensor() {
    let t = Tensor::zeros(&[3, 2, 2]);
    let r = triaff(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0], &t, &TriaffineMlps::identity());
    assert!(matches!(r, Err(Error::Shape(_))));
}

proptest! {
    #[test]
    fn triaff_is_linear_in_middle(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut g = rng(seed);
        let d = 1 + (seed % 5) as usize;
        let s = scoring_site(&mut g, d, d, 1);
        let (u, v, w1, w2) = (vector(&mut g, d), vector(&mut g, d), vector(&mut g, d), vector(&mut g, d));
        let mix: Vec<f64> = w1.iter().zip(&w2).map(|(x, y)| a * x + b * y).collect();
        let t = s.tensor(0);
        let lhs = triaff(&u, &v, &mix, t, &s.mlps).unwrap();
        let rhs = a * triaff(&u, &v, &w1, t, &s.mlps).unwrap() + b * triaff(&u, &v, &w2, t, &s.mlps).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn span_rep_lies_in_hull_of_values(seed in 0u64..500) {
        let mut g = rng(seed);
        let n = 1 + (seed % 6) as usize;
        let h = Tensor::randn(&[n, 4], 1.0, &mut g);
        let att = attention(&mut g, 4, 3, 2);
        let sa = span_attention(&h, Span::new(0, n - 1), &att).unwrap();
        for (alpha, rep) in sa.alpha.iter().zip(&sa.reps) {
            prop_assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(alpha.iter().all(|&x| x >= 0.0));
            for (k, x) in rep.iter().enumerate() {
                let lo = sa.values.iter().map(|v| v[k]).fold(f64::INFINITY, f64::min);
                let hi = sa.values.iter().map(|v| v[k]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(*x >= lo - 1e-12 && *x <= hi + 1e-12);
            }
        }
    }
}

#[test]
fn singleton_span_attends_to_itself() {
    let mut g = rng(3);
    let h = Tensor::randn(&[4, 5], 1.0, &mut g);
    let att = attention(&mut g, 5, 3, 3);
    let sa = span_attention(&h, Span::new(2, 2), &att).unwrap();
    let own = att.value.apply(h.row(2)).unwrap();
    for r in 0..3 {
        assert_eq!(sa.alpha[r], vec![1.0]);
        assert_eq!(sa.reps[r], own);
    }
}

#[test]
fn zero_tensors_give_uniform_attention() {
    let mut g = rng(4);
    let h = Tensor::randn(&[5, 4], 1.0, &mut g);
    let mut att = attention(&mut g, 4, 3, 2);
    if let AttentionScorer::Triaffine(s) = &mut att.scorer {
        s.tensors.iter_mut().for_each(|t| *t = Tensor::zeros(t.shape()));
    }
    let sa = span_attention(&h, Span::new(1, 4), &att).unwrap();
    for a in &sa.alpha {
        assert!(a.iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }
}

#[test]
fn span_attention_matches_direct_loop() {
    let mut g = rng(5);
    let h = Tensor::randn(&[6, 5], 1.0, &mut g);
    let att = attention(&mut g, 5, 4, 3);
    let AttentionScorer::Triaffine(s) = &att.scorer else { unreachable!() };
    let span = Span::new(1, 4);
    let sa = span_attention(&h, span, &att).unwrap();
    for r in 0..3 {
        let scores: Vec<f64> =
            (1..=4).map(|k| triaff(h.row(1), h.row(4), h.row(k), &s.tensors[r], &s.mlps).unwrap()).collect();
        let alpha = softmax(&scores).unwrap();
        let mut rep = vec![0.0; 4];
        for (a, k) in alpha.iter().zip(1..=4) {
            for (o, x) in rep.iter_mut().zip(att.value.apply(h.row(k)).unwrap()) {
                *o += a * x;
            }
        }
        for (x, y) in sa.reps[r].iter().zip(&rep) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn reversed_span_is_rejected() {
    let mut g = rng(6);
    let h = Tensor::randn(&[4, 3], 1.0, &mut g);
    let att = attention(&mut g, 3, 2, 1);
    let bad = Span { start: 3, end: 1 };
    assert!(matches!(span_attention(&h, bad, &att), Err(Error::Precondition(_))));
    assert!(matches!(span_attention(&h, Span::new(2, 4), &att), Err(Error::Precondition(_))));
}

#[test]
fn permuting_label_tensors_permutes_outputs() {
    let mut g = rng(7);
    let h = Tensor::randn(&[5, 4], 1.0, &mut g);
    let att = attention(&mut g, 4, 3, 3);
    let mut permuted = att.clone();
    if let AttentionScorer::Triaffine(s) = &mut permuted.scorer {
        s.tensors.rotate_left(1);
    }
    let span = Span::new(0, 3);
    let a = span_attention(&h, span, &att).unwrap();
    let b = span_attention(&h, span, &permuted).unwrap();
    for r in 0..3 {
        assert_eq!(b.reps[r], a.reps[(r + 1) % 3]);
    }
}

fn candidates(g: &mut ChaCha8Rng, spans: &[Span], labels: usize, d: usize) -> Vec<(Span, Vec<Vec<f64>>)> {
    spans.iter().map(|&s| (s, (0..labels).map(|_| vector(g, d)).collect())).collect()
}

fn cross_weights(g: &mut ChaCha8Rng, dh: usize, d: usize, labels: usize) -> AttentionWeights {
    AttentionWeights { scorer: AttentionScorer::Triaffine(site(g, dh, d, labels, d)), value: layer(g, d, d) }
}

#[test]
fn cross_attention_self_only() {
    let mut g = rng(8);
    let h = Tensor::randn(&[4, 5], 1.0, &mut g);
    let w = cross_weights(&mut g, 5, 3, 2);
    let cands = candidates(&mut g, &[Span::new(1, 2)], 2, 3);
    let ca = cross_span_attention(&h, Span::new(1, 2), &cands, &w).unwrap();
    for r in 0..2 {
        assert_eq!(ca.beta[r], vec![1.0]);
        assert_eq!(ca.reps[r], w.value.apply(&cands[0].1[r]).unwrap());
    }
}

#[test]
fn cross_attention_zero_tensors_uniform() {
    let mut g = rng(9);
    let h = Tensor::randn(&[4, 5], 1.0, &mut g);
    let mut w = cross_weights(&mut g, 5, 3, 2);
    if let AttentionScorer::Triaffine(s) = &mut w.scorer {
        s.tensors.iter_mut().for_each(|t| *t = Tensor::zeros(t.shape()));
    }
    let spans = [Span::new(0, 0), Span::new(0, 2), Span::new(1, 3)];
    let cands = candidates(&mut g, &spans, 2, 3);
    let ca = cross_span_attention(&h, spans[1], &cands, &w).unwrap();
    for b in &ca.beta {
        assert!(b.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }
}

#[test]
fn cross_attention_matches_direct_loop() {
    let mut g = rng(10);
    let h = Tensor::randn(&[6, 5], 1.0, &mut g);
    let w = cross_weights(&mut g, 5, 3, 2);
    let AttentionScorer::Triaffine(s) = &w.scorer else { unreachable!() };
    let spans = [Span::new(0, 1), Span::new(2, 5), Span::new(3, 3), Span::new(1, 4)];
    let cands = candidates(&mut g, &spans, 2, 3);
    let target = spans[1];
    let ca = cross_span_attention(&h, target, &cands, &w).unwrap();
    for r in 0..2 {
        let q: Vec<f64> = cands
            .iter()
            .map(|(_, reps)| triaff(h.row(2), h.row(5), &reps[r], &s.tensors[r], &s.mlps).unwrap())
            .collect();
        let beta = softmax(&q).unwrap();
        let mut rep = vec![0.0; 3];
        for (b, (_, reps)) in beta.iter().zip(&cands) {
            for (o, x) in rep.iter_mut().zip(w.value.apply(&reps[r]).unwrap()) {
                *o += b * x;
            }
        }
        for (x, y) in ca.reps[r].iter().zip(&rep) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((ca.beta[r].iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn cross_attention_preconditions() {
    let mut g = rng(11);
    let h = Tensor::randn(&[4, 5], 1.0, &mut g);
    let w = cross_weights(&mut g, 5, 3, 2);
    assert!(matches!(cross_span_attention(&h, Span::new(0, 1), &[], &w), Err(Error::Precondition(_))));
    let cands = candidates(&mut g, &[Span::new(0, 0)], 2, 3);
    assert!(matches!(cross_span_attention(&h, Span::new(0, 1), &cands, &w), Err(Error::Precondition(_))));
}

#[test]
fn score_naive_cases() {
    let mlps = TriaffineMlps::identity();
    assert_eq!(score_naive(&[1.0], &[2.0], &[3.0], &Tensor::zeros(&[2, 1, 2]), &mlps).unwrap(), 0.0);
    assert_eq!(score_naive(&[1.0], &[1.0], &[1.0], &Tensor::ones(&[2, 1, 2]), &mlps).unwrap(), 4.0);
    let mut g = rng(12);
    let s = scoring_site(&mut g, 4, 3, 1);
    let (hi, hj, rep) = (vector(&mut g, 4), vector(&mut g, 4), vector(&mut g, 3));
    assert_eq!(
        score_naive(&hi, &hj, &rep, &s.tensors[0], &s.mlps).unwrap(),
        triaff(&hi, &hj, &rep, &s.tensors[0], &s.mlps).unwrap()
    );
}

#[test]
fn decomposed_single_candidate_equals_naive() {
    let mut g = rng(13);
    let s = scoring_site(&mut g, 4, 3, 1);
    let (hi, hj, w) = (vector(&mut g, 4), vector(&mut g, 4), vector(&mut g, 3));
    let naive = score_naive(&hi, &hj, &w, &s.tensors[0], &s.mlps).unwrap();
    let dec = score_decomposed(&hi, &hj, &[w], &[1.0], &s.tensors[0], &s.mlps).unwrap();
    assert!((naive - dec).abs() < 1e-12);
}

#[test]
fn decomposed_mean_of_two() {
    let mut g = rng(14);
    let s = scoring_site(&mut g, 4, 3, 1);
    let (hi, hj, w1, w2) = (vector(&mut g, 4), vector(&mut g, 4), vector(&mut g, 3), vector(&mut g, 3));
    let mean: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| 0.5 * (a + b)).collect();
    let naive = score_naive(&hi, &hj, &mean, &s.tensors[0], &s.mlps).unwrap();
    let dec = score_decomposed(&hi, &hj, &[w1, w2], &[0.5, 0.5], &s.tensors[0], &s.mlps).unwrap();
    assert!((naive - dec).abs() < 1e-12);
}

#[test]
fn decomposed_random_sweep() {
    let mut g = rng(15);
    for _ in 0..200 {
        let dh = g.random_range(1..8);
        let d = g.random_range(1..8);
        let s = scoring_site(&mut g, dh, d, 1);
        let (hi, hj) = (vector(&mut g, dh), vector(&mut g, dh));
        let k = g.random_range(1..10);
        let values: Vec<Vec<f64>> = (0..k).map(|_| vector(&mut g, d)).collect();
        let weights = softmax(&vector(&mut g, k)).unwrap();
        let mut mean = vec![0.0; d];
        for (w, v) in weights.iter().zip(&values) {
            mean.iter_mut().zip(v).for_each(|(m, x)| *m += w * x);
        }
        let naive = score_naive(&hi, &hj, &mean, &s.tensors[0], &s.mlps).unwrap();
        let dec = score_decomposed(&hi, &hj, &values, &weights, &s.tensors[0], &s.mlps).unwrap();
        assert!((naive - dec).abs() / (1.0 + naive.abs()) < 1e-9);
    }
}

#[test]
fn decomposition_rejects_middle_transformation() {
    let mut g = rng(16);
    let s = site(&mut g, 3, 2, 1, 2);
    let r = score_decomposed(&[0.0; 3], &[0.0; 3], &[vec![0.0; 2]], &[1.0], &s.tensors[0], &s.mlps);
    assert!(matches!(r, Err(Error::Config(_))));
    let s = scoring_site(&mut g, 3, 2, 1);
    let r = score_decomposed(&[0.0; 3], &[0.0; 3], &vec![vec![0.0; 2]; 2], &[0.5, 0.6], &s.tensors[0], &s.mlps);
    assert!(matches!(r, Err(Error::Precondition(_))));
}

#[test]
fn setting_parsing() {
    for s in Setting::ALL {
        assert_eq!(s.to_string().parse::<Setting>().unwrap(), s);
    }
    assert_eq!("(H)".parse::<Setting>().unwrap(), Setting::H);
    assert!(matches!("z".parse::<Setting>(), Err(Error::Config(_))));
    assert_eq!(Setting::default(), Setting::H);
}

#[test]
fn biaffine_with_bias_block_only_is_constant() {
    let mut g = rng(17);
    let d = 3;
    let mut t = Tensor::zeros(&[d + 1, 1, d + 1]);
    t.data_mut()[d * (d + 1) + d] = 2.5;
    let w = VariantWeights {
        setting: Setting::A,
        labels: 1,
        attention: None,
        scorer: SpanScorer::Biaffine(TriaffineSite {
            mlps: TriaffineMlps { a: layer(&mut g, 4, d), b: MlpParams::identity(), c: layer(&mut g, 4, d) },
            tensors: vec![t],
        }),
    };
    for _ in 0..5 {
        let h = Tensor::randn(&[3, 4], 1.0, &mut g);
        assert_eq!(variant_score(&w, &h, Span::new(0, 2)).unwrap(), vec![2.5]);
    }
}

#[test]
fn zero_queries_average_the_span() {
    let mut g = rng(18);
    let h = Tensor::randn(&[5, 4], 1.0, &mut g);
    let att = AttentionWeights {
        scorer: AttentionScorer::Query { keys: layer(&mut g, 4, 3), queries: vec![vec![0.0; 3]; 2] },
        value: layer(&mut g, 4, 3),
    };
    let sa = span_attention(&h, Span::new(1, 3), &att).unwrap();
    let mut mean = vec![0.0; 3];
    for k in 1..=3 {
        mean.iter_mut().zip(att.value.apply(h.row(k)).unwrap()).for_each(|(m, x)| *m += x / 3.0);
    }
    for rep in &sa.reps {
        for (x, y) in rep.iter().zip(&mean) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn linear_attention_matches_concat_affine() {
    let mut g = rng(19);
    let (dh, d, labels) = (4, 3, 2);
    let h = Tensor::randn(&[5, dh], 1.0, &mut g);
    let mlps = TriaffineMlps { a: layer(&mut g, dh, d), b: layer(&mut g, dh, d), c: layer(&mut g, dh, d) };
    let rows = |g: &mut ChaCha8Rng| (0..labels).map(|_| vector(g, d)).collect::<Vec<_>>();
    let (a, b, c) = (rows(&mut g), rows(&mut g), rows(&mut g));
    let bias = vector(&mut g, labels);
    let att = AttentionWeights {
        scorer: AttentionScorer::Linear {
            mlps: mlps.clone(),
            a: a.clone(),
            b: b.clone(),
            c: c.clone(),
            bias: bias.clone(),
        },
        value: layer(&mut g, dh, d),
    };
    let span = Span::new(1, 4);
    let sa = span_attention(&h, span, &att).unwrap();
    for r in 0..labels {
        let w: Vec<f64> = [a[r].clone(), b[r].clone(), c[r].clone()].concat();
        let scores: Vec<f64> = (1..=4)
            .map(|k| {
                let x =
                    [mlps.a.apply(h.row(1)).unwrap(), mlps.c.apply(h.row(4)).unwrap(), mlps.b.apply(h.row(k)).unwrap()]
                        .concat();
                w.iter().zip(&x).map(|(p, q)| p * q).sum::<f64>() + bias[r]
            })
            .collect();
        let alpha = softmax(&scores).unwrap();
        for (x, y) in sa.alpha[r].iter().zip(&alpha) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
