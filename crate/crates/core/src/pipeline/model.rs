use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::spans::{enumerate_spans, span_key, top_m_indices, SentenceLogits};
use crate::data::{Example, LabelSet, PredictedEntity};
use crate::encoder::{Encoder, EncoderConfig, Vocab};
use crate::error::{Error, Result};
use crate::span::{Segments, Span};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::tape::{NodeId, ParamId, ParamStore, Tape};
use crate::tensor::{Mlp, MlpParams, Tensor};
use crate::triaffine::{
    AttentionScorer, AttentionWeights, Setting, SpanScorer, TriaffineMlps, TriaffineSite, VariantWeights,
};

/// How a triaffine scorer consumes the attention weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScoringPath {
    /// Materialize every span representation, then score it.
    Naive,
    /// Contract the boundaries once and score each attended item.
    #[default]
    Decomposed,
}

#[derive(Clone, Debug)]
enum AttentionKind {
    Triaffine { a: Mlp, key: Mlp, c: Mlp, w: ParamId },
    Query { key: Mlp, queries: ParamId },
    Linear { a: Mlp, key: Mlp, c: Mlp, wa: ParamId, wb: ParamId, wc: ParamId, bias: ParamId },
}

#[derive(Clone, Debug)]
struct AttentionHead {
    kind: AttentionKind,
    value: Mlp,
}

#[derive(Clone, Debug)]
enum ScorerHead {
    Biaffine { a: Mlp, c: Mlp, w: ParamId },
    Triaffine { a: Mlp, c: Mlp, w: ParamId },
    Linear { weights: ParamId, bias: ParamId },
    LinearConcat { a: Mlp, c: Mlp, wa: ParamId, wb: ParamId, wc: ParamId, bias: ParamId },
}

#[derive(Clone, Debug)]
struct CrossHead {
    a: Mlp,
    c: Mlp,
    w: ParamId,
    key: Mlp,
    value: Mlp,
    main_a: Mlp,
    main_c: Mlp,
    main_w: ParamId,
}

/// A sentence prepared for the model: token ids, candidate spans and the gold
/// label id of every span.
#[derive(Clone, Debug)]
pub struct EncodedSentence {
    pub ids: Vec<usize>,
    pub spans: Arc<[Span]>,
    pub gold: Vec<usize>,
}

/// Nodes of the cross-span stage.
#[derive(Clone, Debug)]
pub struct CrossForward {
    /// Indices into the sentence's spans, in retained order.
    pub retained: Vec<usize>,
    /// `[R, L * L]`, one segment of `L` weights per retained span.
    pub beta: NodeId,
    /// `[R, L]` cross-span logits.
    pub main: NodeId,
}

/// Nodes of one sentence's forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub spans: Arc<[Span]>,
    pub seg: Arc<Segments>,
    /// `[R, S]` intermediate logits.
    pub aux: NodeId,
    /// `[R or 1, T]` attention weights over the tokens of every span.
    pub alpha: Option<NodeId>,
    pub cross: Option<CrossForward>,
}

/// Scalar loss nodes and their values.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: NodeId,
    pub aux: f64,
    pub main: f64,
}

/// Outputs of decoding one sentence.
#[derive(Clone, Debug)]
pub struct SentenceOutput {
    pub entities: Vec<PredictedEntity>,
    pub intermediate: SentenceLogits,
    /// Cross-span logits of the retained spans, present for the full model.
    pub main: Option<SentenceLogits>,
}

/// Value-level copies of every span-layer weight, for reference evaluation.
#[derive(Clone, Debug)]
pub struct ReferenceWeights {
    pub variant: VariantWeights,
    pub cross: Option<(AttentionWeights, TriaffineSite)>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    vocab: Vec<String>,
    labels: Vec<String>,
}

/// Encoder plus the span layer of one setting, with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    vocab: Vocab,
    labels: LabelSet,
    store: ParamStore,
    encoder: Encoder,
    attention: Option<AttentionHead>,
    scorer: ScorerHead,
    cross: Option<CrossHead>,
}

fn tensor_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let cols = t.shape()[1];
    t.data().chunks_exact(cols).map(<[f64]>::to_vec).collect()
}

fn split_labels(t: &Tensor) -> Vec<Tensor> {
    let shape = &t.shape()[1..];
    let size: usize = shape.iter().product();
    t.data().chunks_exact(size).map(|c| Tensor::new(shape.to_vec(), c.to_vec()).expect("slice shape")).collect()
}

/// `[R, S]` tensor to `[S][R]` rows.
fn columns(t: &Tensor) -> Vec<Vec<f64>> {
    let (r, s) = (t.shape()[0], t.shape()[1]);
    (0..s).map(|si| (0..r).map(|ri| t.data()[ri * s + si]).collect()).collect()
}

fn argmax_margin(row: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (k, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = k;
        }
    }
    let second = row.iter().enumerate().filter(|&(k, _)| k != best).map(|(_, &x)| x).fold(f64::NEG_INFINITY, f64::max);
    (best, row[best] - second)
}

impl Model {
    /// Fresh model whose parameters are drawn from `config.seed`.
    pub fn new(config: ModelConfig, vocab: Vocab, labels: LabelSet) -> Result<Self> {
        config.validate()?;
        if config.labels != 0 && config.labels != labels.len() {
            return Err(Error::Config(format!(
                "configured for {} labels but the label set has {}",
                config.labels,
                labels.len()
            )));
        }
        if labels.len() < 2 {
            return Err(Error::Config("no entity labels".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let enc_cfg = EncoderConfig {
            vocab_size: vocab.len(),
            emb_dim: config.emb_dim,
            hidden: config.hidden,
            layers: config.encoder_layers,
            dropout: config.encoder_dropout,
        };
        let encoder = Encoder::init(&mut store, enc_cfg, &mut rng)?;
        let dh = encoder.output_dim();
        let (d, r) = (config.d, labels.len());
        let act = config.activation;
        let dims = |input: usize| {
            let mut v = vec![input];
            v.extend(std::iter::repeat_n(config.mlp_width(), config.mlp_layers - 1));
            v.push(d);
            v
        };
        let sigma = config.sigma;
        let vec_bound = (1.0 / d as f64).sqrt();
        let st = &mut store;
        let mlp = |st: &mut ParamStore, name: &str, input: usize, rng: &mut ChaCha8Rng| {
            Mlp::init(st, name, &dims(input), act, rng)
        };
        let setting = config.setting;

        let attention = if setting.uses_attention() {
            let kind = match setting {
                Setting::D => AttentionKind::Query {
                    key: mlp(st, "att.key", dh, &mut rng),
                    queries: st.add("att.queries", Tensor::uniform(&[r, d], vec_bound, &mut rng)),
                },
                Setting::E => AttentionKind::Linear {
                    a: mlp(st, "att.a", dh, &mut rng),
                    key: mlp(st, "att.key", dh, &mut rng),
                    c: mlp(st, "att.c", dh, &mut rng),
                    wa: st.add("att.la", Tensor::uniform(&[r, d], vec_bound, &mut rng)),
                    wb: st.add("att.lb", Tensor::uniform(&[r, d], vec_bound, &mut rng)),
                    wc: st.add("att.lc", Tensor::uniform(&[r, d], vec_bound, &mut rng)),
                    bias: st.add("att.bias", Tensor::zeros(&[r])),
                },
                _ => {
                    let ra = if setting == Setting::C { 1 } else { r };
                    AttentionKind::Triaffine {
                        a: mlp(st, "att.a", dh, &mut rng),
                        key: mlp(st, "att.key", dh, &mut rng),
                        c: mlp(st, "att.c", dh, &mut rng),
                        w: st.add("att.w", Tensor::randn(&[ra, d + 1, d, d + 1], sigma, &mut rng)),
                    }
                }
            };
            Some(AttentionHead { kind, value: mlp(st, "att.value", dh, &mut rng) })
        } else {
            None
        };

        let scorer = match setting {
            Setting::A => ScorerHead::Biaffine {
                a: mlp(st, "aux.a", dh, &mut rng),
                c: mlp(st, "aux.c", dh, &mut rng),
                w: st.add("aux.w", Tensor::randn(&[r, d + 1, 1, d + 1], sigma, &mut rng)),
            },
            Setting::B => ScorerHead::Linear {
                weights: st.add("aux.lin", Tensor::uniform(&[r, d], vec_bound, &mut rng)),
                bias: st.add("aux.bias", Tensor::zeros(&[r])),
            },
            Setting::F => ScorerHead::LinearConcat {
                a: mlp(st, "aux.a", dh, &mut rng),
                c: mlp(st, "aux.c", dh, &mut rng),
                wa: st.add("aux.la", Tensor::uniform(&[r, d], vec_bound, &mut rng)),
                wb: st.add("aux.lb", Tensor::uniform(&[r, d], vec_bound, &mut rng)),
                wc: st.add("aux.lc", Tensor::uniform(&[r, d], vec_bound, &mut rng)),
                bias: st.add("aux.bias", Tensor::zeros(&[r])),
            },
            _ => ScorerHead::Triaffine {
                a: mlp(st, "aux.a", dh, &mut rng),
                c: mlp(st, "aux.c", dh, &mut rng),
                w: st.add("aux.w", Tensor::randn(&[r, d + 1, d, d + 1], sigma, &mut rng)),
            },
        };

        let cross = if setting.uses_cross() {
            let (a, c, w) = match (&attention, config.share_cross_tensors) {
                (Some(AttentionHead { kind: AttentionKind::Triaffine { a, c, w, .. }, .. }), true) => {
                    (a.clone(), c.clone(), *w)
                }
                _ => (
                    mlp(st, "cross.a", dh, &mut rng),
                    mlp(st, "cross.c", dh, &mut rng),
                    st.add("cross.w", Tensor::randn(&[r, d + 1, d, d + 1], sigma, &mut rng)),
                ),
            };
            Some(CrossHead {
                a,
                c,
                w,
                key: mlp(st, "cross.key", d, &mut rng),
                value: mlp(st, "cross.value", d, &mut rng),
                main_a: mlp(st, "main.a", dh, &mut rng),
                main_c: mlp(st, "main.c", dh, &mut rng),
                main_w: st.add("main.w", Tensor::randn(&[r, d + 1, d, d + 1], sigma, &mut rng)),
            })
        } else {
            None
        };
        let mut config = config;
        config.labels = labels.len();
        Ok(Self { config, vocab, labels, store, encoder, attention, scorer, cross })
    }

    /// Builds vocabulary and label set from `train` and initializes a model.
    pub fn for_corpus(config: ModelConfig, train: &[Example]) -> Result<Self> {
        let vocab = Vocab::build(train.iter().map(|e| e.tokens.as_slice()), config.min_count);
        let labels = LabelSet::from_corpus(train);
        Self::new(config, vocab, labels)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn labels(&self) -> &LabelSet {
        &self.labels
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Parameters that only the intermediate scoring head reads.
    pub fn aux_scoring_params(&self) -> Vec<ParamId> {
        match &self.scorer {
            ScorerHead::Biaffine { a, c, w } | ScorerHead::Triaffine { a, c, w } => {
                a.param_ids().chain(c.param_ids()).chain([*w]).collect()
            }
            ScorerHead::Linear { weights, bias } => vec![*weights, *bias],
            ScorerHead::LinearConcat { a, c, wa, wb, wc, bias } => {
                a.param_ids().chain(c.param_ids()).chain([*wa, *wb, *wc, *bias]).collect()
            }
        }
    }

    /// Token ids, candidate spans and gold labels of `ex`, truncated to
    /// `max_len` tokens. Entities crossing the truncation point or longer than
    /// `max_span_len` are dropped; a span with several gold labels keeps the
    /// one with the smallest label id. Unknown labels are an error.
    pub fn encode_example(&self, ex: &Example) -> Result<EncodedSentence> {
        let n = ex.tokens.len().min(self.config.max_len);
        if n == 0 {
            return Err(Error::Precondition("empty sentence".into()));
        }
        let ids = self.vocab.ids(&ex.tokens[..n]);
        let spans: Arc<[Span]> = enumerate_spans(n, self.config.max_span_len).into();
        let mut gold = vec![0; spans.len()];
        for e in &ex.entities {
            let label = self
                .labels
                .id(&e.label)
                .ok_or_else(|| Error::Config(format!("label '{}' unknown to the model", e.label)))?;
            if e.end > n {
                continue;
            }
            let sp = e.span();
            if let Ok(k) = spans.binary_search_by(|s| (s.start, s.end).cmp(&(sp.start, sp.end))) {
                if gold[k] == 0 || label < gold[k] {
                    gold[k] = label;
                }
            }
        }
        Ok(EncodedSentence { ids, spans, gold })
    }

    /// Records the forward pass of one sentence. Dropout is active when `rng`
    /// is given. `force` lists span indices added to the retained set.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        ids: &[usize],
        mut rng: Option<&mut R>,
        path: ScoringPath,
        force: &[usize],
    ) -> Result<Forward> {
        let h = self.encoder.encode(tape, ids, rng.as_deref_mut())?;
        let h = match rng {
            Some(r) if self.config.dropout > 0.0 => tape.dropout(h, self.config.dropout, r)?,
            _ => h,
        };
        let n = ids.len();
        let d = self.config.d;
        let spans: Arc<[Span]> = enumerate_spans(n, self.config.max_span_len).into();
        let seg = Arc::new(Segments::for_spans(&spans, n));
        let all: Arc<[usize]> = (0..spans.len()).collect();

        let mut alpha = None;
        let mut values = None;
        if let Some(att) = &self.attention {
            let scores = match &att.kind {
                AttentionKind::Triaffine { a, key, c, w } => {
                    let u = a.apply(tape, h)?;
                    let u = tape.append_one(u)?;
                    let v = c.apply(tape, h)?;
                    let v = tape.append_one(v)?;
                    let k = key.apply(tape, h)?;
                    let k = tape.reshape(k, &[1, n, d])?;
                    let wn = tape.param(*w);
                    let cb = tape.boundary_contract(wn, u, v, spans.clone())?;
                    tape.seg_item_dot(cb, k, seg.clone())?
                }
                AttentionKind::Query { key, queries } => {
                    let k = key.apply(tape, h)?;
                    let q = tape.param(*queries);
                    let z = tape.matmul_nt(q, k)?;
                    tape.item_gather(z, seg.clone())?
                }
                AttentionKind::Linear { a, key, c, wa, wb, wc, bias } => {
                    let u = a.apply(tape, h)?;
                    let v = c.apply(tape, h)?;
                    let k = key.apply(tape, h)?;
                    let (wa, wb, wc, bias) = (tape.param(*wa), tape.param(*wb), tape.param(*wc), tape.param(*bias));
                    let zi = tape.matmul_nt(wa, u)?;
                    let zj = tape.matmul_nt(wb, v)?;
                    let zk = tape.matmul_nt(wc, k)?;
                    let pair = tape.boundary_pair(zi, zj, spans.clone())?;
                    let pair = tape.seg_broadcast(pair, seg.clone())?;
                    let items = tape.item_gather(zk, seg.clone())?;
                    let s = tape.add(pair, items)?;
                    tape.add_label_bias(s, bias)?
                }
            };
            alpha = Some(tape.seg_softmax(scores, seg.clone())?);
            let val = att.value.apply(tape, h)?;
            values = Some(tape.reshape(val, &[1, n, d])?);
        }

        let span_reps = |tape: &mut Tape<'_>| -> Result<NodeId> {
            tape.seg_weighted_sum(alpha.expect("attention"), values.expect("attention"), seg.clone(), all.clone())
        };
        let aux = match &self.scorer {
            ScorerHead::Biaffine { a, c, w } => {
                let u = a.apply(tape, h)?;
                let u = tape.append_one(u)?;
                let v = c.apply(tape, h)?;
                let v = tape.append_one(v)?;
                let wn = tape.param(*w);
                let out = tape.boundary_contract(wn, u, v, spans.clone())?;
                tape.reshape(out, &[self.labels.len(), spans.len()])?
            }
            ScorerHead::Triaffine { a, c, w } => {
                let u = a.apply(tape, h)?;
                let u = tape.append_one(u)?;
                let v = c.apply(tape, h)?;
                let v = tape.append_one(v)?;
                let wn = tape.param(*w);
                let cb = tape.boundary_contract(wn, u, v, spans.clone())?;
                match path {
                    ScoringPath::Decomposed => {
                        let o = tape.seg_item_dot(cb, values.expect("attention"), seg.clone())?;
                        tape.seg_dot(alpha.expect("attention"), o, seg.clone())?
                    }
                    ScoringPath::Naive => {
                        let reps = span_reps(tape)?;
                        tape.label_dot(cb, reps)?
                    }
                }
            }
            ScorerHead::Linear { weights, bias } => {
                let reps = span_reps(tape)?;
                let wn = tape.param(*weights);
                let wn = tape.reshape(wn, &[self.labels.len(), 1, d])?;
                let s = tape.label_dot(reps, wn)?;
                let b = tape.param(*bias);
                tape.add_label_bias(s, b)?
            }
            ScorerHead::LinearConcat { a, c, wa, wb, wc, bias } => {
                let u = a.apply(tape, h)?;
                let v = c.apply(tape, h)?;
                let (wa, wb, wc, bias) = (tape.param(*wa), tape.param(*wb), tape.param(*wc), tape.param(*bias));
                let zi = tape.matmul_nt(wa, u)?;
                let zj = tape.matmul_nt(wb, v)?;
                let pair = tape.boundary_pair(zi, zj, spans.clone())?;
                let reps = span_reps(tape)?;
                let wc = tape.reshape(wc, &[self.labels.len(), 1, d])?;
                let mid = tape.label_dot(reps, wc)?;
                let s = tape.add(pair, mid)?;
                tape.add_label_bias(s, bias)?
            }
        };

        let cross = match &self.cross {
            Some(cross) => {
                let retained = self.retain(tape.value(aux), &spans, force);
                Some(self.cross_forward(tape, cross, h, &spans, &seg, alpha, values, retained, path)?)
            }
            None => None,
        };
        Ok(Forward { spans, seg, aux, alpha, cross })
    }

    fn retain(&self, aux: &Tensor, spans: &[Span], force: &[usize]) -> Vec<usize> {
        let rows = columns(aux);
        let keys: Vec<f64> = rows.iter().map(|r| span_key(r)).collect();
        let mut kept = top_m_indices(spans, &keys, self.config.m);
        for &f in force {
            if !kept.contains(&f) {
                kept.push(f);
            }
        }
        kept
    }

    #[allow(clippy::too_many_arguments)]
    fn cross_forward(
        &self,
        tape: &mut Tape<'_>,
        cross: &CrossHead,
        h: NodeId,
        spans: &Arc<[Span]>,
        seg: &Arc<Segments>,
        alpha: Option<NodeId>,
        values: Option<NodeId>,
        retained: Vec<usize>,
        path: ScoringPath,
    ) -> Result<CrossForward> {
        let (r, d, l) = (self.labels.len(), self.config.d, retained.len());
        let select: Arc<[usize]> = retained.clone().into();
        let rspans: Arc<[Span]> = retained.iter().map(|&k| spans[k]).collect();
        let cseg = Arc::new(Segments::complete(l));
        let reps = tape.seg_weighted_sum(
            alpha.expect("cross stage follows attention"),
            values.expect("cross stage follows attention"),
            seg.clone(),
            select,
        )?;
        let flat = tape.reshape(reps, &[r * l, d])?;
        let k = cross.key.apply(tape, flat)?;
        let k = tape.reshape(k, &[r, l, d])?;
        let vals = cross.value.apply(tape, flat)?;
        let vals = tape.reshape(vals, &[r, l, d])?;

        let u = cross.a.apply(tape, h)?;
        let u = tape.append_one(u)?;
        let v = cross.c.apply(tape, h)?;
        let v = tape.append_one(v)?;
        let wn = tape.param(cross.w);
        let cb = tape.boundary_contract(wn, u, v, rspans.clone())?;
        let q = tape.seg_item_dot(cb, k, cseg.clone())?;
        let beta = tape.seg_softmax(q, cseg.clone())?;

        let u = cross.main_a.apply(tape, h)?;
        let u = tape.append_one(u)?;
        let v = cross.main_c.apply(tape, h)?;
        let v = tape.append_one(v)?;
        let wn = tape.param(cross.main_w);
        let cm = tape.boundary_contract(wn, u, v, rspans)?;
        let main = match path {
            ScoringPath::Decomposed => {
                let o = tape.seg_item_dot(cm, vals, cseg.clone())?;
                tape.seg_dot(beta, o, cseg)?
            }
            ScoringPath::Naive => {
                let all: Arc<[usize]> = (0..l).collect();
                let hc = tape.seg_weighted_sum(beta, vals, cseg, all)?;
                tape.label_dot(cm, hc)?
            }
        };
        Ok(CrossForward { retained, beta, main })
    }

    /// Training loss of one sentence: the intermediate cross-entropy for
    /// settings without a cross stage, otherwise `mu_aux * L_aux + L_main`.
    pub fn loss<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        sent: &EncodedSentence,
        rng: Option<&mut R>,
        path: ScoringPath,
    ) -> Result<LossParts> {
        let force: Vec<usize> = if self.config.force_gold && rng.is_some() {
            sent.gold.iter().enumerate().filter(|&(_, &g)| g != 0).map(|(k, _)| k).collect()
        } else {
            Vec::new()
        };
        let fwd = self.forward(tape, &sent.ids, rng, path, &force)?;
        let aux = tape.span_cross_entropy(fwd.aux, &sent.gold)?;
        let aux_value = tape.value(aux).item();
        match &fwd.cross {
            None => Ok(LossParts { total: aux, aux: aux_value, main: 0.0 }),
            Some(c) => {
                let gold: Vec<usize> = c.retained.iter().map(|&k| sent.gold[k]).collect();
                let main = tape.span_cross_entropy(c.main, &gold)?;
                let main_value = tape.value(main).item();
                let total = if self.config.mu_aux == 0.0 {
                    main
                } else {
                    let scaled = tape.scale(aux, self.config.mu_aux);
                    tape.add(scaled, main)?
                };
                Ok(LossParts { total, aux: aux_value, main: main_value })
            }
        }
    }

    /// Decodes one tokenized sentence without dropout.
    pub fn predict_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Result<SentenceOutput> {
        let n = tokens.len().min(self.config.max_len);
        if n == 0 {
            return Err(Error::Precondition("empty sentence".into()));
        }
        let ids = self.vocab.ids(&tokens[..n]);
        let mut tape = Tape::new(&self.store);
        let path = if self.config.decomposed { ScoringPath::Decomposed } else { ScoringPath::Naive };
        let fwd = self.forward::<ChaCha8Rng>(&mut tape, &ids, None, path, &[])?;
        let aux = tape.value(fwd.aux);
        aux.ensure_finite("intermediate logits")?;
        let intermediate = SentenceLogits { spans: fwd.spans.to_vec(), logits: columns(aux) };
        let (decoded, main) = match &fwd.cross {
            None => (intermediate.clone(), None),
            Some(c) => {
                let m = tape.value(c.main);
                m.ensure_finite("cross-span logits")?;
                let main =
                    SentenceLogits { spans: c.retained.iter().map(|&k| fwd.spans[k]).collect(), logits: columns(m) };
                (main.clone(), Some(main))
            }
        };
        let mut entities = Vec::new();
        for (sp, row) in decoded.spans.iter().zip(&decoded.logits) {
            let (best, margin) = argmax_margin(row);
            if best != 0 {
                entities.push(PredictedEntity {
                    start: sp.start + 1,
                    end: sp.end + 1,
                    label: self.labels.name(best).to_string(),
                    margin,
                });
            }
        }
        entities.sort_by_key(|e| (e.start, e.end));
        Ok(SentenceOutput { entities, intermediate, main })
    }

    /// Token representations `[N, dh]` without dropout.
    pub fn encode_values(&self, ids: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new(&self.store);
        let h = self.encoder.encode::<ChaCha8Rng>(&mut tape, ids, None)?;
        Ok(tape.value(h).clone())
    }

    /// Value-level snapshot of the span layer.
    pub fn reference_weights(&self) -> ReferenceWeights {
        let st = &self.store;
        let rows = |id: ParamId| tensor_rows(st.get(id));
        let vec = |id: ParamId| st.get(id).data().to_vec();
        let id = MlpParams::identity;
        let attention = self.attention.as_ref().map(|att| {
            let scorer = match &att.kind {
                AttentionKind::Triaffine { a, key, c, w } => AttentionScorer::Triaffine(TriaffineSite {
                    mlps: TriaffineMlps { a: a.params(st), b: key.params(st), c: c.params(st) },
                    tensors: split_labels(st.get(*w)),
                }),
                AttentionKind::Query { key, queries } => {
                    AttentionScorer::Query { keys: key.params(st), queries: rows(*queries) }
                }
                AttentionKind::Linear { a, key, c, wa, wb, wc, bias } => AttentionScorer::Linear {
                    mlps: TriaffineMlps { a: a.params(st), b: key.params(st), c: c.params(st) },
                    a: rows(*wa),
                    b: rows(*wb),
                    c: rows(*wc),
                    bias: vec(*bias),
                },
            };
            AttentionWeights { scorer, value: att.value.params(st) }
        });
        let scorer = match &self.scorer {
            ScorerHead::Biaffine { a, c, w } => SpanScorer::Biaffine(TriaffineSite {
                mlps: TriaffineMlps { a: a.params(st), b: id(), c: c.params(st) },
                tensors: split_labels(st.get(*w)),
            }),
            ScorerHead::Triaffine { a, c, w } => SpanScorer::Triaffine(TriaffineSite {
                mlps: TriaffineMlps { a: a.params(st), b: id(), c: c.params(st) },
                tensors: split_labels(st.get(*w)),
            }),
            ScorerHead::Linear { weights, bias } => SpanScorer::Linear { weights: rows(*weights), bias: vec(*bias) },
            ScorerHead::LinearConcat { a, c, wa, wb, wc, bias } => SpanScorer::LinearConcat {
                left: a.params(st),
                right: c.params(st),
                a: rows(*wa),
                b: rows(*wb),
                c: rows(*wc),
                bias: vec(*bias),
            },
        };
        let cross = self.cross.as_ref().map(|c| {
            let att = AttentionWeights {
                scorer: AttentionScorer::Triaffine(TriaffineSite {
                    mlps: TriaffineMlps { a: c.a.params(st), b: c.key.params(st), c: c.c.params(st) },
                    tensors: split_labels(st.get(c.w)),
                }),
                value: c.value.params(st),
            };
            let main = TriaffineSite {
                mlps: TriaffineMlps { a: c.main_a.params(st), b: id(), c: c.main_c.params(st) },
                tensors: split_labels(st.get(c.main_w)),
            };
            (att, main)
        });
        ReferenceWeights {
            variant: VariantWeights { setting: self.config.setting, labels: self.labels.len(), attention, scorer },
            cross,
        }
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let meta = Meta {
            config: self.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            labels: self.labels.labels()[1..].to_vec(),
        };
        Ok(Checkpoint::from_store(&self.store, serde_json::to_value(meta)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint()?.save(path)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: Meta = serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("checkpoint metadata: {e}")))?;
        let vocab = Vocab::from_tokens(meta.vocab)?;
        let labels = LabelSet::new(&meta.labels)?;
        let mut model = Self::new(meta.config, vocab, labels)?;
        ckpt.restore_into(&mut model.store)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
