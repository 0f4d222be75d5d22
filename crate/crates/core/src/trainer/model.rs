//! Task-agnostic model (TAM) architectures, parameter sets and the
//! query/momentum encoder pair.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Segment, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;
use crate::text::tokenize;

const LN_EPS: f64 = 1e-5;
/// Parameters under this prefix belong to the query encoder only.
pub const CLASSIFIER_PREFIX: &str = "classifier.";

/// Named parameter arrays.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamSet(BTreeMap<String, Matrix>);

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.0.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.0.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Matrix)> {
        self.0.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.0.values().map(|m| m.data().len()).sum()
    }

    /// Copy without the classifier head: the part mirrored by the momentum encoder.
    pub fn shared(&self) -> ParamSet {
        ParamSet(
            self.0
                .iter()
                .filter(|(k, _)| !k.starts_with(CLASSIFIER_PREFIX))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.0.values().all(Matrix::is_finite)
    }
}

/// Word vocabulary; id 0 is reserved for unknown words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

pub const UNK: &str = "<unk>";

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl Vocab {
    /// Most frequent words first (ties alphabetical), capped at `max_size`
    /// entries including the unknown token.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for token in tokenize(text) {
                *counts.entry(token).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut words = vec![UNK.to_string()];
        words.extend(ranked.into_iter().take(max_size.saturating_sub(1)).map(|(w, _)| w));
        Self::from(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Token ids, truncated to `max_len`; never empty.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = tokenize(text)
            .iter()
            .take(max_len)
            .map(|t| self.index.get(t).copied().unwrap_or(0))
            .collect();
        if ids.is_empty() {
            ids.push(0);
        }
        ids
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Mean of word embeddings followed by a tanh layer.
    BagOfEmbeddings,
    /// Post-norm transformer encoder with learned positions, mean-pooled.
    Transformer,
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bag-of-embeddings" | "boe" => Ok(Self::BagOfEmbeddings),
            "transformer" => Ok(Self::Transformer),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub proj_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("proj_dim", self.proj_dim),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::Config("model needs at least 2 classes".into()));
        }
        if self.architecture == Architecture::Transformer {
            if self.heads == 0 || self.embed_dim % self.heads != 0 {
                return Err(Error::Config(format!(
                    "embed_dim {} must be divisible by heads {}",
                    self.embed_dim, self.heads
                )));
            }
            if self.ffn_dim == 0 {
                return Err(Error::Config("ffn_dim must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let mut p = ParamSet::new();
        let d = self.embed_dim;
        p.insert("encoder.embed", Matrix::uniform(self.vocab_size, d, 0.1, rng));
        if self.architecture == Architecture::Transformer {
            p.insert("encoder.pos", Matrix::uniform(self.max_len, d, 0.1, rng));
            for l in 0..self.layers {
                for name in ["wq", "wk", "wv", "wo"] {
                    p.insert(format!("encoder.layer{l}.{name}"), Matrix::glorot(d, d, rng));
                }
                for name in ["bq", "bk", "bv", "bo"] {
                    p.insert(format!("encoder.layer{l}.{name}"), Matrix::zeros(1, d));
                }
                p.insert(format!("encoder.layer{l}.ffn1"), Matrix::glorot(d, self.ffn_dim, rng));
                p.insert(format!("encoder.layer{l}.ffn1_b"), Matrix::zeros(1, self.ffn_dim));
                p.insert(format!("encoder.layer{l}.ffn2"), Matrix::glorot(self.ffn_dim, d, rng));
                p.insert(format!("encoder.layer{l}.ffn2_b"), Matrix::zeros(1, d));
                for ln in ["ln1", "ln2"] {
                    p.insert(format!("encoder.layer{l}.{ln}_g"), Matrix::from_vec(1, d, vec![1.0; d]));
                    p.insert(format!("encoder.layer{l}.{ln}_b"), Matrix::zeros(1, d));
                }
            }
        }
        p.insert("encoder.pool", Matrix::glorot(d, self.hidden_dim, rng));
        p.insert("encoder.pool_b", Matrix::zeros(1, self.hidden_dim));
        p.insert("projection.w1", Matrix::glorot(self.hidden_dim, self.hidden_dim, rng));
        p.insert("projection.b1", Matrix::zeros(1, self.hidden_dim));
        p.insert("projection.w2", Matrix::glorot(self.hidden_dim, self.proj_dim, rng));
        p.insert("projection.b2", Matrix::zeros(1, self.proj_dim));
        p.insert("classifier.w", Matrix::glorot(self.hidden_dim, self.num_classes, rng));
        p.insert("classifier.b", Matrix::zeros(1, self.num_classes));
        p
    }
}

/// Output of one forward pass.
pub struct Forward {
    /// `batch x K`; absent when the parameter set has no classifier head.
    pub logits: Option<Var>,
    /// `batch x proj_dim`, unit rows.
    pub projections: Var,
    /// Tape variable of every parameter, for reading gradients.
    pub params: Vec<(String, Var)>,
}

struct Binder<'a> {
    tape: &'a mut Tape,
    params: &'a ParamSet,
    bound: Vec<(String, Var)>,
}

impl Binder<'_> {
    fn get(&mut self, name: &str) -> Var {
        if let Some((_, v)) = self.bound.iter().find(|(n, _)| n == name) {
            return *v;
        }
        let value = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing"))
            .clone();
        let v = self.tape.leaf(value);
        self.bound.push((name.to_string(), v));
        v
    }

    fn linear(&mut self, x: Var, w: &str, b: &str) -> Var {
        let wv = self.get(w);
        let bv = self.get(b);
        let y = self.tape.matmul(x, wv);
        self.tape.add_row(y, bv)
    }

    fn norm_affine(&mut self, x: Var, g: &str, b: &str) -> Var {
        let n = self.tape.layer_norm(x, LN_EPS);
        let gv = self.get(g);
        let bv = self.get(b);
        let y = self.tape.mul_row(n, gv);
        self.tape.add_row(y, bv)
    }
}

/// Runs the encoder over a batch of token-id sequences.
pub fn forward(spec: &ModelSpec, tape: &mut Tape, params: &ParamSet, batch: &[Vec<usize>]) -> Forward {
    assert!(!batch.is_empty(), "empty batch");
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    let mut segments: Vec<Segment> = Vec::with_capacity(batch.len());
    for seq in batch {
        let seq = &seq[..seq.len().min(spec.max_len)];
        segments.push((ids.len(), seq.len()));
        ids.extend_from_slice(seq);
        positions.extend(0..seq.len());
    }

    let mut b = Binder {
        tape,
        params,
        bound: Vec::new(),
    };
    let embed = b.get("encoder.embed");
    let mut x = b.tape.gather(embed, &ids);

    if spec.architecture == Architecture::Transformer {
        let pos = b.get("encoder.pos");
        let p = b.tape.gather(pos, &positions);
        x = b.tape.add(x, p);
        for l in 0..spec.layers {
            let name = |s: &str| format!("encoder.layer{l}.{s}");
            let q = b.linear(x, &name("wq"), &name("bq"));
            let k = b.linear(x, &name("wk"), &name("bk"));
            let v = b.linear(x, &name("wv"), &name("bv"));
            let a = b.tape.attention(q, k, v, &segments, spec.heads);
            let o = b.linear(a, &name("wo"), &name("bo"));
            let r = b.tape.add(x, o);
            x = b.norm_affine(r, &name("ln1_g"), &name("ln1_b"));
            let h = b.linear(x, &name("ffn1"), &name("ffn1_b"));
            let h = b.tape.relu(h);
            let f = b.linear(h, &name("ffn2"), &name("ffn2_b"));
            let r = b.tape.add(x, f);
            x = b.norm_affine(r, &name("ln2_g"), &name("ln2_b"));
        }
    }

    let pooled = b.tape.segment_mean(x, &segments);
    let h = b.linear(pooled, "encoder.pool", "encoder.pool_b");
    let h = b.tape.tanh(h);

    let z = b.linear(h, "projection.w1", "projection.b1");
    let z = b.tape.tanh(z);
    let z = b.linear(z, "projection.w2", "projection.b2");
    let projections = b.tape.row_normalize(z);

    let logits = params
        .get("classifier.w")
        .is_some()
        .then(|| b.linear(h, "classifier.w", "classifier.b"));

    Forward {
        logits,
        projections,
        params: b.bound,
    }
}

/// Query encoder, momentum encoder and the momentum coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderPair {
    pub query: ParamSet,
    pub key: ParamSet,
    pub momentum: f64,
}

impl EncoderPair {
    /// The momentum encoder starts as a copy of the query encoder.
    pub fn new(query: ParamSet, momentum: f64) -> Self {
        let key = query.shared();
        Self { query, key, momentum }
    }

    /// `key <- m * key + (1 - m) * query` on every shared parameter.
    pub fn momentum_update(&mut self) -> Result<()> {
        let m = self.momentum;
        for (name, k) in self.key.iter_mut() {
            let q = self
                .query
                .get(name)
                .ok_or_else(|| Error::Shape(format!("query encoder has no parameter {name}")))?;
            if q.shape() != k.shape() {
                return Err(Error::Shape(format!("{name}: key {:?} vs query {:?}", k.shape(), q.shape())));
            }
            for (kv, qv) in k.data_mut().iter_mut().zip(q.data()) {
                *kv = m * *kv + (1.0 - m) * qv;
            }
        }
        Ok(())
    }
}
