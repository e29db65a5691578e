//! Naive versus decomposed triaffine scoring: exactness, analytic FLOP
//! counts and wall-clock timing.
//!
//! Both methods run the same span attention (boundary-conditioned scores and
//! a softmax over the tokens of each span) and differ only in how the
//! attended values are scored. The naive method materializes every span
//! representation and contracts the full scoring tensor with it; the
//! decomposed method contracts the boundaries once per start token and scores
//! each attended token before weighting.

use std::fmt;
use std::time::Instant;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::config::parse;
use crate::pipeline::{apply_kv_lines, enumerate_spans};
use crate::span::Span;

/// Relative tolerance of the 64-bit equivalence check.
pub const EXACTNESS_TOLERANCE: f64 = 1e-9;

/// Published timings (milliseconds for 10 iterations on a GPU) of the two
/// methods at a much larger configuration. Context only.
pub const PUBLISHED_SCORING_MS: (f64, f64) = (638.1, 432.7);
pub const PUBLISHED_CROSS_MS: (f64, f64) = (140.8, 132.3);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "32" | "f32" => Ok(Precision::F32),
            "64" | "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision '{other}' (expected 32 or 64)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub batch: usize,
    pub n: usize,
    pub d: usize,
    pub labels: usize,
    /// Candidate-set size of the cross-span benchmark.
    pub m: usize,
    /// Timed iterations plus the discarded warm-up.
    pub iterations: usize,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { batch: 2, n: 64, d: 64, labels: 6, m: 30, iterations: 6, precision: Precision::F32, seed: 1 }
    }
}

impl BenchConfig {
    pub const KEYS: [&'static str; 8] = ["batch", "n", "d", "labels", "m", "iterations", "precision", "seed"];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "batch" => self.batch = parse(key, value)?,
            "n" => self.n = parse(key, value)?,
            "d" => self.d = parse(key, value)?,
            "labels" => self.labels = parse(key, value)?,
            "m" => self.m = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "precision" => self.precision = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown benchmark key '{other}'"))),
        }
        Ok(())
    }

    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        apply_kv_lines(text, |k, v| self.set(k, v))
    }

    pub fn to_kv(&self) -> String {
        let precision = match self.precision {
            Precision::F32 => 32,
            Precision::F64 => 64,
        };
        format!(
            "batch = {}\nn = {}\nd = {}\nlabels = {}\nm = {}\niterations = {}\nprecision = {precision}\nseed = {}\n",
            self.batch, self.n, self.d, self.labels, self.m, self.iterations, self.seed
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.n == 0 || self.d == 0 || self.labels == 0 || self.m == 0 {
            return Err(Error::Config("benchmark sizes must be at least 1".into()));
        }
        if self.iterations < 3 {
            return Err(Error::Config("at least 3 iterations are required (one is a warm-up)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub min_ms: f64,
    pub median_ms: f64,
    pub max_ms: f64,
    /// Sum over the timed iterations.
    pub total_ms: f64,
    pub flops: u64,
    /// Median time relative to the naive method.
    pub percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub stage: String,
    pub config: BenchConfig,
    pub logical_cpus: usize,
    /// Largest `|naive - decomposed| / (1 + |naive|)` over all logits, 64-bit.
    pub max_rel_diff: f64,
    pub naive: MethodReport,
    pub decomposed: MethodReport,
    /// Naive median time over decomposed median time.
    pub speedup: f64,
    pub published_ms: (f64, f64),
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.config;
        writeln!(
            f,
            "{}: B={} N={} d={} R={} m={} {:?}, {} timed iterations, {} logical CPUs",
            self.stage,
            c.batch,
            c.n,
            c.d,
            c.labels,
            c.m,
            c.precision,
            c.iterations - 1,
            self.logical_cpus
        )?;
        writeln!(
            f,
            "{:<12} {:>11} {:>11} {:>11} {:>8} {:>16}",
            "method", "median ms", "min ms", "max ms", "%", "FLOPs"
        )?;
        for m in [&self.naive, &self.decomposed] {
            writeln!(
                f,
                "{:<12} {:>11.3} {:>11.3} {:>11.3} {:>7.1}% {:>16}",
                m.method, m.median_ms, m.min_ms, m.max_ms, m.percent, m.flops
            )?;
        }
        writeln!(f, "speedup {:.3}x, max relative difference {:.3e}", self.speedup, self.max_rel_diff)?;
        write!(
            f,
            "published GPU timings at a larger scale, 10 iterations: naive {} ms, decomposed {} ms (context only)",
            self.published_ms.0, self.published_ms.1
        )
    }
}

fn triangle(n: u64) -> (u64, u64) {
    (n * (n + 1) / 2, n * (n + 1) * (n + 2) / 6)
}

/// Multiply-adds of the shared attention stage (boundary contraction, item
/// scores, softmax) over all spans of a sentence.
fn attention_flops(n: u64, d: u64) -> u64 {
    let (s, t) = triangle(n);
    n * (d + 1) * d * (d + 1) + s * d * (d + 1) + t * d + t
}

/// Analytic multiply-adds of span scoring, `(naive, decomposed)`.
///
/// Naive: aggregate `T * d`, then per span contract the middle, left and
/// right modes (`d(d+1)^2 + (d+1)^2 + (d+1)`). Decomposed: contract the left
/// mode once per start (`N (d+1) d (d+1)`), the right mode per span
/// (`S d (d+1)`), then score and weight every item (`T d + T`).
pub fn scoring_flops(batch: usize, n: usize, d: usize, labels: usize) -> (u64, u64) {
    let (b, n, d, r) = (batch as u64, n as u64, d as u64, labels as u64);
    let (s, t) = triangle(n);
    let att = attention_flops(n, d);
    let naive = t * d + s * (d * (d + 1) * (d + 1) + (d + 1) * (d + 1) + (d + 1));
    let dec = n * (d + 1) * d * (d + 1) + s * d * (d + 1) + t * d + t;
    (b * r * (att + naive), b * r * (att + dec))
}

/// Analytic multiply-adds of cross-span scoring over `m` candidates.
pub fn cross_scoring_flops(batch: usize, m: usize, d: usize, labels: usize) -> (u64, u64) {
    let (b, m, d, r) = (batch as u64, m as u64, d as u64, labels as u64);
    let att = m * (d + 1) * d * (d + 1) + m * d * (d + 1) + m * m * d + m * m;
    let naive = m * m * d + m * (d * (d + 1) * (d + 1) + (d + 1) * (d + 1) + (d + 1));
    let dec = m * (d + 1) * (d + 1) * d + m * d * (d + 1) + m * m * d + m * m;
    (b * r * (att + naive), b * r * (att + dec))
}

/// Seeded inputs of one batch: augmented boundaries `[B][N][d+1]`, keys and
/// values `[B][N][d]` (per label for the cross stage) and label tensors.
struct Inputs<F> {
    d: usize,
    n: usize,
    u: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    keys: Vec<Vec<F>>,
    vals: Vec<Vec<F>>,
    w_att: Vec<Vec<F>>,
    w_score: Vec<Vec<F>>,
}

fn draw(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-scale..scale)).collect()
}

fn augmented(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * (d + 1));
    for _ in 0..n {
        out.extend(draw(rng, d, 1.0));
        out.push(1.0);
    }
    out
}

impl Inputs<f64> {
    /// `items` tokens per sentence (`N`, or `m` candidates per label).
    fn random(cfg: &BenchConfig, items: usize, per_label_items: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (d, r) = (cfg.d, cfg.labels);
        let tensor_scale = 1.0 / (d as f64);
        let item_sets = if per_label_items { r } else { 1 };
        Self {
            d,
            n: items,
            u: (0..cfg.batch).map(|_| augmented(&mut rng, cfg.n, d)).collect(),
            v: (0..cfg.batch).map(|_| augmented(&mut rng, cfg.n, d)).collect(),
            keys: (0..cfg.batch).map(|_| draw(&mut rng, item_sets * items * d, 1.0)).collect(),
            vals: (0..cfg.batch).map(|_| draw(&mut rng, item_sets * items * d, 1.0)).collect(),
            w_att: (0..r).map(|_| draw(&mut rng, (d + 1) * d * (d + 1), tensor_scale)).collect(),
            w_score: (0..r).map(|_| draw(&mut rng, (d + 1) * d * (d + 1), tensor_scale)).collect(),
        }
    }

    fn cast<F: Float>(&self) -> Inputs<F> {
        let c = |x: &Vec<Vec<f64>>| -> Vec<Vec<F>> {
            x.iter().map(|v| v.iter().map(|&y| F::from(y).expect("representable")).collect()).collect()
        };
        Inputs {
            d: self.d,
            n: self.n,
            u: c(&self.u),
            v: c(&self.v),
            keys: c(&self.keys),
            vals: c(&self.vals),
            w_att: c(&self.w_att),
            w_score: c(&self.w_score),
        }
    }
}

fn dot<F: Float>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

fn axpy<F: Float>(alpha: F, x: &[F], y: &mut [F]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o = *o + alpha * v;
    }
}

/// `out[b][c] = sum_a u[a] w[a][b][c]`, a `d x (d+1)` matrix.
fn contract_left<F: Float>(w: &[F], u: &[F], out: &mut [F]) {
    let slab = out.len();
    out.iter_mut().for_each(|x| *x = F::zero());
    for (a, &ua) in u.iter().enumerate() {
        axpy(ua, &w[a * slab..(a + 1) * slab], out);
    }
}

/// `out[b] = sum_c q[b][c] v[c]`.
fn contract_right<F: Float>(q: &[F], v: &[F], out: &mut [F]) {
    let c = v.len();
    for (b, o) in out.iter_mut().enumerate() {
        *o = dot(&q[b * c..(b + 1) * c], v);
    }
}

fn softmax_in_place<F: Float>(x: &mut [F]) {
    let clamp = std::mem::size_of::<F>() == 4;
    let lim = F::from(50.0).expect("representable");
    if clamp {
        x.iter_mut().for_each(|v| *v = v.max(-lim).min(lim));
    }
    let max = x.iter().copied().fold(F::neg_infinity(), F::max);
    let mut z = F::zero();
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        z = z + *v;
    }
    x.iter_mut().for_each(|v| *v = *v / z);
}

/// Attention weights of every span, grouped by start, `alpha[s]` over the
/// items of span `s`. Items are tokens (`None`) or an explicit candidate list.
#[allow(clippy::too_many_arguments)]
fn attention<F: Float>(
    w: &[F],
    u: &[F],
    v: &[F],
    keys: &[F],
    d: usize,
    spans: &[Span],
    items: Option<usize>,
    scratch: &mut Vec<F>,
) -> Vec<Vec<F>> {
    let a = d + 1;
    scratch.resize(d * a, F::zero());
    let mut c = vec![F::zero(); d];
    let mut out = Vec::with_capacity(spans.len());
    let mut last = usize::MAX;
    for sp in spans {
        if sp.start != last || items.is_some() {
            contract_left(w, &u[sp.start * a..(sp.start + 1) * a], scratch);
            last = sp.start;
        }
        contract_right(scratch, &v[sp.end * a..(sp.end + 1) * a], &mut c);
        let range = match items {
            None => sp.start..sp.end + 1,
            Some(m) => 0..m,
        };
        let mut s: Vec<F> = range.map(|k| dot(&c, &keys[k * d..(k + 1) * d])).collect();
        softmax_in_place(&mut s);
        out.push(s);
    }
    out
}

/// Logits `[label][span]` of every sentence of the batch.
fn score<F: Float>(inp: &Inputs<F>, spans: &[Span], cross: bool, naive: bool) -> Vec<Vec<Vec<F>>> {
    let (d, a) = (inp.d, inp.d + 1);
    let mut scratch = Vec::new();
    let mut q = vec![F::zero(); d * a];
    let mut c = vec![F::zero(); d];
    let mut mid = vec![F::zero(); a * a];
    let mut out = Vec::with_capacity(inp.u.len());
    for b in 0..inp.u.len() {
        let (u, v) = (&inp.u[b], &inp.v[b]);
        let mut per_label = Vec::with_capacity(inp.w_att.len());
        for r in 0..inp.w_att.len() {
            let off = if cross { r * inp.n * d } else { 0 };
            let keys = &inp.keys[b][off..];
            let vals = &inp.vals[b][off..];
            let items = cross.then_some(inp.n);
            let alpha = attention(&inp.w_att[r], u, v, keys, d, spans, items, &mut scratch);
            let w = &inp.w_score[r];
            let mut logits = Vec::with_capacity(spans.len());
            if naive {
                // Materialize every span representation first.
                let reps: Vec<Vec<F>> = spans
                    .iter()
                    .zip(&alpha)
                    .map(|(sp, al)| {
                        let first = if cross { 0 } else { sp.start };
                        let mut h = vec![F::zero(); d];
                        for (k, &wk) in al.iter().enumerate() {
                            axpy(wk, &vals[(first + k) * d..(first + k + 1) * d], &mut h);
                        }
                        h
                    })
                    .collect();
                for (sp, h) in spans.iter().zip(&reps) {
                    // Middle mode first: mid[a][c] = sum_b w[a][b][c] h[b].
                    mid.iter_mut().for_each(|x| *x = F::zero());
                    for ai in 0..a {
                        let row = &mut mid[ai * a..(ai + 1) * a];
                        for (bi, &hb) in h.iter().enumerate() {
                            axpy(hb, &w[(ai * d + bi) * a..(ai * d + bi + 1) * a], row);
                        }
                    }
                    let ui = &u[sp.start * a..(sp.start + 1) * a];
                    let vj = &v[sp.end * a..(sp.end + 1) * a];
                    let mut x = vec![F::zero(); a];
                    for (ai, &ua) in ui.iter().enumerate() {
                        axpy(ua, &mid[ai * a..(ai + 1) * a], &mut x);
                    }
                    logits.push(dot(&x, vj));
                }
            } else {
                let mut last = usize::MAX;
                for (sp, al) in spans.iter().zip(&alpha) {
                    if sp.start != last || cross {
                        contract_left(w, &u[sp.start * a..(sp.start + 1) * a], &mut q);
                        last = sp.start;
                    }
                    contract_right(&q, &v[sp.end * a..(sp.end + 1) * a], &mut c);
                    let first = if cross { 0 } else { sp.start };
                    let mut p = F::zero();
                    for (k, &wk) in al.iter().enumerate() {
                        p = p + wk * dot(&c, &vals[(first + k) * d..(first + k + 1) * d]);
                    }
                    logits.push(p);
                }
            }
            per_label.push(logits);
        }
        out.push(per_label);
    }
    out
}

fn max_rel_diff(a: &[Vec<Vec<f64>>], b: &[Vec<Vec<f64>>]) -> f64 {
    a.iter()
        .flatten()
        .flatten()
        .zip(b.iter().flatten().flatten())
        .map(|(x, y)| (x - y).abs() / (1.0 + x.abs()))
        .fold(0.0, f64::max)
}

fn time<F: Float>(inp: &Inputs<F>, spans: &[Span], cross: bool, naive: bool, iterations: usize) -> Vec<f64> {
    let mut times = Vec::with_capacity(iterations - 1);
    for it in 0..iterations {
        let t0 = Instant::now();
        let out = score(inp, spans, cross, naive);
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        std::hint::black_box(out);
        if it > 0 {
            times.push(ms);
        }
    }
    times
}

fn method(name: &str, mut times: Vec<f64>, flops: u64) -> MethodReport {
    times.sort_by(f64::total_cmp);
    let k = times.len();
    let median = if k % 2 == 1 { times[k / 2] } else { 0.5 * (times[k / 2 - 1] + times[k / 2]) };
    MethodReport {
        method: name.into(),
        min_ms: times[0],
        median_ms: median,
        max_ms: times[k - 1],
        total_ms: times.iter().sum(),
        flops,
        percent: 100.0,
    }
}

fn run(cfg: &BenchConfig, cross: bool) -> Result<BenchReport> {
    cfg.validate()?;
    let (spans, items, flops, stage, published) = if cross {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        let all = enumerate_spans(cfg.n, 0);
        let m = cfg.m.min(all.len());
        let picked: Vec<Span> = rand::seq::index::sample(&mut rng, all.len(), m).into_iter().map(|k| all[k]).collect();
        (picked, m, cross_scoring_flops(cfg.batch, m, cfg.d, cfg.labels), "cross-span scoring", PUBLISHED_CROSS_MS)
    } else {
        let spans = enumerate_spans(cfg.n, 0);
        (spans, cfg.n, scoring_flops(cfg.batch, cfg.n, cfg.d, cfg.labels), "span scoring", PUBLISHED_SCORING_MS)
    };
    let inputs = Inputs::random(cfg, items, cross);
    let naive64 = score(&inputs, &spans, cross, true);
    let dec64 = score(&inputs, &spans, cross, false);
    let diff = max_rel_diff(&naive64, &dec64);
    if diff.is_nan() || diff >= EXACTNESS_TOLERANCE {
        return Err(Error::Numeric(format!(
            "{stage}: naive and decomposed outputs differ by {diff:e} (tolerance {EXACTNESS_TOLERANCE:e})"
        )));
    }
    let (tn, td) = match cfg.precision {
        Precision::F64 => {
            (time(&inputs, &spans, cross, true, cfg.iterations), time(&inputs, &spans, cross, false, cfg.iterations))
        }
        Precision::F32 => {
            let inp = inputs.cast::<f32>();
            (time(&inp, &spans, cross, true, cfg.iterations), time(&inp, &spans, cross, false, cfg.iterations))
        }
    };
    let naive = method("naive", tn, flops.0);
    let mut decomposed = method("decomposed", td, flops.1);
    decomposed.percent = 100.0 * decomposed.median_ms / naive.median_ms;
    Ok(BenchReport {
        stage: stage.into(),
        config: cfg.clone(),
        logical_cpus: std::thread::available_parallelism().map_or(1, usize::from),
        max_rel_diff: diff,
        speedup: naive.median_ms / decomposed.median_ms,
        naive,
        decomposed,
        published_ms: published,
    })
}

/// Times span scoring over all spans of `batch` sentences of length `n`.
pub fn bench_scoring(cfg: &BenchConfig) -> Result<BenchReport> {
    run(cfg, false)
}

/// Times cross-span scoring of `m` retained spans against each other.
pub fn bench_cross_scoring(cfg: &BenchConfig) -> Result<BenchReport> {
    run(cfg, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, m: usize) -> BenchConfig {
        BenchConfig { batch: 2, n, d: 5, labels: 3, m, iterations: 3, precision: Precision::F64, seed: 4 }
    }

    #[test]
    fn flop_counts_by_enumeration() {
        // Count the same terms by walking spans and items explicitly.
        for (n, d) in [(1usize, 1usize), (3, 2), (7, 5)] {
            let (mut naive, mut dec) = (0u64, 0u64);
            let d64 = d as u64;
            let mut att = n as u64 * (d64 + 1) * d64 * (d64 + 1);
            dec += n as u64 * (d64 + 1) * d64 * (d64 + 1);
            for i in 0..n {
                for j in i..n {
                    let len = (j - i + 1) as u64;
                    att += d64 * (d64 + 1) + len * d64 + len;
                    naive += len * d64 + d64 * (d64 + 1) * (d64 + 1) + (d64 + 1) * (d64 + 1) + d64 + 1;
                    dec += d64 * (d64 + 1) + len * d64 + len;
                }
            }
            assert_eq!(scoring_flops(1, n, d, 1), (att + naive, att + dec));
            assert_eq!(scoring_flops(2, n, d, 3), (6 * (att + naive), 6 * (att + dec)));
        }
    }

    #[test]
    fn decomposed_counts_fewer_flops_beyond_one_token() {
        assert!(scoring_flops(1, 1, 8, 1).1 <= scoring_flops(1, 1, 8, 1).0 + 8 * 9 * 9);
        for n in 2..40 {
            let (a, b) = scoring_flops(2, n, 16, 4);
            assert!(b < a, "n = {n}");
        }
        let (a, b) = cross_scoring_flops(2, 30, 64, 6);
        assert!(b < a);
    }

    #[test]
    fn methods_agree_and_report_is_complete() {
        let r = bench_scoring(&small(6, 4)).unwrap();
        assert!(r.max_rel_diff < 1e-12);
        assert_eq!(r.naive.flops, scoring_flops(2, 6, 5, 3).0);
        assert!(r.naive.min_ms <= r.naive.median_ms && r.naive.median_ms <= r.naive.max_ms);
        assert!((r.speedup - r.naive.median_ms / r.decomposed.median_ms).abs() < 1e-12);
        assert!(r.to_string().contains("decomposed"));
    }

    #[test]
    fn cross_methods_agree() {
        for m in [1, 2, 8, 30] {
            let r = bench_cross_scoring(&small(9, m)).unwrap();
            assert!(r.max_rel_diff < EXACTNESS_TOLERANCE, "m = {m}");
        }
    }

    #[test]
    fn degenerate_size_runs() {
        let r = bench_scoring(&BenchConfig { batch: 1, n: 1, ..small(1, 1) }).unwrap();
        assert!(r.speedup.is_finite());
    }

    #[test]
    fn f32_timing_runs_after_the_gate() {
        let r = bench_scoring(&BenchConfig { precision: Precision::F32, ..small(5, 3) }).unwrap();
        assert!(r.naive.median_ms > 0.0);
    }

    #[test]
    fn kv_round_trip() {
        let mut c = BenchConfig::default();
        c.apply_kv("n = 7\nprecision = 64\n").unwrap();
        assert_eq!((c.n, c.precision), (7, Precision::F64));
        let mut back = BenchConfig::default();
        back.apply_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
        assert!(c.apply_kv("sigma = 1").is_err());
    }

    #[test]
    fn invalid_config() {
        assert!(bench_scoring(&BenchConfig { iterations: 2, ..small(3, 2) }).is_err());
        assert!(bench_scoring(&BenchConfig { d: 0, ..small(3, 2) }).is_err());
    }
}
