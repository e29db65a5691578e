//! Token encoder: an embedding table followed by stacked bidirectional GRUs.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::tape::{NodeId, ParamId, ParamStore, Tape};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Token to id map. Ids 0 and 1 are reserved for padding and unknown words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_tokens(vec![PAD_TOKEN.into(), UNK_TOKEN.into()]).expect("reserved tokens")
    }
}

impl Vocab {
    /// Builds a vocabulary from token sequences, keeping tokens seen at least
    /// `min_count` times. Ids follow first occurrence.
    pub fn build<'a, I, S>(sentences: I, min_count: usize) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut order = Vec::new();
        for sent in sentences {
            for tok in sent {
                let c = counts.entry(tok.as_ref()).or_insert_with(|| {
                    order.push(tok.as_ref());
                    0
                });
                *c += 1;
            }
        }
        let mut vocab = Self::default();
        for tok in order {
            if counts[tok] >= min_count.max(1) && !vocab.index.contains_key(tok) {
                vocab.index.insert(tok.to_string(), vocab.tokens.len());
                vocab.tokens.push(tok.to_string());
            }
        }
        vocab
    }

    /// Vocabulary with ids given by position. The first two entries must be
    /// the padding and unknown markers.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(Error::Vocab(format!("first two entries must be {PAD_TOKEN} and {UNK_TOKEN}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Vocab(format!("duplicate token '{t}' at line {}", i + 1)));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Id of `token`, or [`UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// One token per line; line number is the id.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub emb_dim: usize,
    /// Hidden size per direction.
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.emb_dim == 0 || self.hidden == 0 || self.layers == 0 {
            return Err(Error::Config(format!("invalid encoder dimensions {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("encoder dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }
}

#[derive(Clone, Debug)]
struct GruDirection {
    wx: ParamId,
    bx: ParamId,
    wh: ParamId,
    bh: ParamId,
}

impl GruDirection {
    fn init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            wx: store.add(format!("{name}.wx"), Tensor::uniform(&[input, 3 * hidden], bound, rng)),
            bx: store.add(format!("{name}.bx"), Tensor::uniform(&[3 * hidden], bound, rng)),
            wh: store.add(format!("{name}.wh"), Tensor::uniform(&[hidden, 3 * hidden], bound, rng)),
            bh: store.add(format!("{name}.bh"), Tensor::uniform(&[3 * hidden], bound, rng)),
        }
    }

    /// Runs the cell over `x` (`[N, in]`) in the given direction and returns
    /// the hidden states in token order, `[N, hidden]`.
    fn run(&self, tape: &mut Tape<'_>, x: NodeId, n: usize, hidden: usize, reverse: bool) -> Result<NodeId> {
        let (wx, bx, wh, bh) = (tape.param(self.wx), tape.param(self.bx), tape.param(self.wh), tape.param(self.bh));
        // Input projections for every timestep at once.
        let xp = tape.matmul(x, wx)?;
        let xp = tape.add_bias(xp, bx)?;
        let mut h = tape.constant(Tensor::zeros(&[1, hidden]));
        let mut states = vec![h; n];
        let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        for t in order {
            let xt = tape.slice_rows(xp, t, 1)?;
            let hp = tape.matmul(h, wh)?;
            let hp = tape.add_bias(hp, bh)?;
            let xrz = tape.slice_cols(xt, 0, 2 * hidden)?;
            let hrz = tape.slice_cols(hp, 0, 2 * hidden)?;
            let rz = tape.add(xrz, hrz)?;
            let rz = tape.sigmoid(rz);
            let r = tape.slice_cols(rz, 0, hidden)?;
            let z = tape.slice_cols(rz, hidden, hidden)?;
            let xn = tape.slice_cols(xt, 2 * hidden, hidden)?;
            let hn = tape.slice_cols(hp, 2 * hidden, hidden)?;
            let gated = tape.mul(r, hn)?;
            let cand = tape.add(xn, gated)?;
            let cand = tape.tanh(cand);
            // h' = (1 - z) * n + z * h = n + z * (h - n)
            let diff = tape.sub(h, cand)?;
            let keep = tape.mul(z, diff)?;
            h = tape.add(cand, keep)?;
            states[t] = h;
        }
        tape.stack_rows(&states)
    }
}

/// Embedding table plus `layers` bidirectional GRU layers.
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    embedding: ParamId,
    layers: Vec<[GruDirection; 2]>,
}

impl Encoder {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let embedding = store.add("enc.embedding", Tensor::randn(&[config.vocab_size, config.emb_dim], 0.1, rng));
        let mut layers = Vec::with_capacity(config.layers);
        let mut input = config.emb_dim;
        for l in 0..config.layers {
            layers.push([
                GruDirection::init(store, &format!("enc.l{l}.fwd"), input, config.hidden, rng),
                GruDirection::init(store, &format!("enc.l{l}.bwd"), input, config.hidden, rng),
            ]);
            input = config.output_dim();
        }
        Ok(Self { config, embedding, layers })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    /// Token representations `[N, 2 * hidden]`. Dropout is applied to the
    /// embeddings and to every layer output when `rng` is given.
    pub fn encode<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        ids: &[usize],
        mut rng: Option<&mut R>,
    ) -> Result<NodeId> {
        if ids.is_empty() {
            return Err(Error::Precondition("cannot encode an empty sentence".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::Vocab(format!("token id {bad} outside vocabulary of {}", self.config.vocab_size)));
        }
        let n = ids.len();
        let table = tape.param(self.embedding);
        let mut x = tape.gather_rows(table, ids)?;
        if let Some(r) = rng.as_deref_mut() {
            x = tape.dropout(x, self.config.dropout, r)?;
        }
        for [fwd, bwd] in &self.layers {
            let f = fwd.run(tape, x, n, self.config.hidden, false)?;
            let b = bwd.run(tape, x, n, self.config.hidden, true)?;
            x = tape.concat_cols(&[f, b])?;
            if let Some(r) = rng.as_deref_mut() {
                x = tape.dropout(x, self.config.dropout, r)?;
            }
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_tape_gradients, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(layers: usize) -> (ParamStore, Encoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let cfg = EncoderConfig { vocab_size: 7, emb_dim: 3, hidden: 4, layers, dropout: 0.2 };
        let enc = Encoder::init(&mut store, cfg, &mut rng).unwrap();
        (store, enc)
    }

    fn run(store: &ParamStore, enc: &Encoder, ids: &[usize], seed: Option<u64>) -> Tensor {
        let mut tape = Tape::new(store);
        let mut rng = seed.map(ChaCha8Rng::seed_from_u64);
        let h = enc.encode(&mut tape, ids, rng.as_mut()).unwrap();
        tape.value(h).clone()
    }

    #[test]
    fn single_token_shape() {
        let (store, enc) = setup(1);
        assert_eq!(run(&store, &enc, &[3], None).shape(), &[1, 8]);
    }

    #[test]
    fn deterministic_given_seed() {
        let (store, enc) = setup(2);
        let ids = [2, 3, 4, 5];
        assert_eq!(run(&store, &enc, &ids, None), run(&store, &enc, &ids, None));
        assert_eq!(run(&store, &enc, &ids, Some(4)), run(&store, &enc, &ids, Some(4)));
        assert_ne!(run(&store, &enc, &ids, Some(4)), run(&store, &enc, &ids, None));
    }

    #[test]
    fn last_token_reaches_first_position() {
        let (store, enc) = setup(1);
        let a = run(&store, &enc, &[2, 3, 4, 5], None);
        let b = run(&store, &enc, &[2, 3, 4, 6], None);
        let diff: f64 = a.row(0).iter().zip(b.row(0)).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-6, "first position unchanged: {diff}");
    }

    #[test]
    fn out_of_range_id_is_a_vocab_error() {
        let (store, enc) = setup(1);
        let mut tape = Tape::new(&store);
        let r = enc.encode(&mut tape, &[1, 7], None::<&mut ChaCha8Rng>);
        assert!(matches!(r, Err(Error::Vocab(_))));
    }

    #[test]
    fn encoder_passes_gradcheck() {
        let (store, enc) = setup(2);
        let readout = Tensor::randn(&[3, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let err = check_tape_gradients(
            &store,
            |tape| {
                let h = enc.encode(tape, &[2, 5, 3], None::<&mut ChaCha8Rng>)?;
                let w = tape.constant(readout.clone());
                let p = tape.mul(h, w)?;
                Ok(tape.sum(p))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn vocab_round_trip_and_unknown() {
        let sents: Vec<Vec<String>> = vec![vec!["a".into(), "b".into()], vec!["b".into(), "c".into()]];
        let vocab = Vocab::build(sents.iter().map(Vec::as_slice), 1);
        assert_eq!(vocab.len(), 5);
        assert_eq!(vocab.id("zzz"), UNK);
        assert_eq!(vocab.ids(&["a", "c"]), vec![2, 4]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        vocab.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), vocab);
        assert_eq!(Vocab::build(sents.iter().map(Vec::as_slice), 2).len(), 3);
    }

    #[test]
    fn vocab_requires_reserved_lines() {
        assert!(Vocab::from_tokens(vec!["a".into(), "b".into()]).is_err());
    }
}
