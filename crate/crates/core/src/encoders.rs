//! Image and text encoders.
//!
//! The image encoder is a four-layer per-position map shared across spatial
//! positions with taps after layers 1, 2 and 4. The text encoder is a token
//! embedding plus sinusoidal positions followed by one masked self-attention
//! mixing layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::corpus::PAD;
use crate::error::{CssError, Result};
use crate::layers::Linear;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Additive mask value for excluded attention keys.
pub(crate) const MASKED: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Low,
    Mid,
    High,
}

/// Image features at one depth: `[positions, d_level]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub level: Level,
    pub values: Tensor,
}

/// Word-level caption features: `[L, d_text]` with pad rows exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct WordFeatures {
    pub values: Tensor,
    pub mask: Vec<bool>,
}

/// Per-position encoder outputs for a batch, rows ordered item-major.
#[derive(Debug, Clone, Copy)]
pub struct Taps {
    pub low: Var,
    pub mid: Var,
    pub high: Var,
}

impl Taps {
    pub fn at(&self, level: Level) -> Var {
        match level {
            Level::Low => self.low,
            Level::Mid => self.mid,
            Level::High => self.high,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEncoder {
    layers: [Linear; 4],
}

impl ImageEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, patch_dim: usize, dims: [usize; 3], rng: &mut R) -> Self {
        let [d_low, d_mid, d_high] = dims;
        let shapes = [(patch_dim, d_low), (d_low, d_mid), (d_mid, d_high), (d_high, d_high)];
        let layers = std::array::from_fn(|i| {
            let (a, b) = shapes[i];
            Linear::new(store, &format!("img.l{}", i + 1), ParamGroup::Main, a, b, true, rng)
        });
        Self { layers }
    }

    pub fn layer(&self, i: usize) -> &Linear {
        &self.layers[i]
    }

    /// `patches` is `[n * positions, patch_dim]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, patches: Var) -> Result<Taps> {
        let mut x = patches;
        let mut outs = [patches; 4];
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer.forward(g, store, x)?;
            x = g.relu(y);
            outs[i] = x;
        }
        Ok(Taps {
            low: outs[0],
            mid: outs[1],
            high: outs[3],
        })
    }
}

/// Padded caption batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TextBatch {
    pub tokens: Vec<usize>,
    pub mask: Vec<bool>,
    pub n: usize,
    pub len: usize,
}

impl TextBatch {
    /// Pads every caption to `len` (the longest caption when `None`).
    pub fn new(captions: &[&[usize]], len: Option<usize>) -> Result<Self> {
        let longest = captions.iter().map(|c| c.len()).max().unwrap_or(0);
        let len = len.unwrap_or(longest).max(1);
        if longest > len {
            return Err(CssError::contract(format!("caption of {longest} tokens exceeds length {len}")));
        }
        let mut tokens = Vec::with_capacity(captions.len() * len);
        let mut mask = Vec::with_capacity(captions.len() * len);
        for c in captions {
            tokens.extend_from_slice(c);
            tokens.resize(tokens.len() + len - c.len(), PAD);
            mask.extend(c.iter().map(|&t| t != PAD));
            mask.resize(mask.len() + len - c.len(), false);
        }
        Ok(Self {
            tokens,
            mask,
            n: captions.len(),
            len,
        })
    }

    pub fn word_counts(&self) -> Vec<usize> {
        self.mask.chunks(self.len).map(|m| m.iter().filter(|&&b| b).count()).collect()
    }

    /// `[n, 1, len]` additive key mask.
    pub(crate) fn key_mask(&self) -> Tensor {
        let data = self.mask.iter().map(|&m| if m { 0.0 } else { MASKED }).collect();
        Tensor::new(vec![self.n, 1, self.len], data).expect("mask shape")
    }

    /// Per-row weights for the masked mean over words.
    pub(crate) fn mean_weights(&self) -> Result<Vec<f64>> {
        let counts = self.word_counts();
        if let Some(i) = counts.iter().position(|&c| c == 0) {
            return Err(CssError::contract(format!("caption {i} has no unmasked words")));
        }
        Ok(self
            .mask
            .iter()
            .enumerate()
            .map(|(i, &m)| if m { 1.0 / counts[i / self.len] as f64 } else { 0.0 })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoder {
    pub embed: ParamId,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub dim: usize,
    pub att_dim: usize,
    pub max_len: usize,
}

impl TextEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        vocab: usize,
        dim: usize,
        att_dim: usize,
        max_len: usize,
        rng: &mut R,
    ) -> Self {
        let embed = store.normal("txt.embed", ParamGroup::Text, &[vocab, dim], 1.0, rng);
        let query = Linear::new(store, "txt.q", ParamGroup::Text, dim, att_dim, false, rng);
        let key = Linear::new(store, "txt.k", ParamGroup::Text, dim, att_dim, false, rng);
        let value = Linear::new(store, "txt.v", ParamGroup::Text, dim, dim, false, rng);
        Self {
            embed,
            query,
            key,
            value,
            dim,
            att_dim,
            max_len,
        }
    }

    pub fn vocab_size(&self, store: &ParamStore) -> usize {
        store.value(self.embed).rows()
    }

    /// Word features `[n * len, dim]`, pad rows zeroed.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, batch: &TextBatch) -> Result<Var> {
        let vocab = self.vocab_size(store);
        if let Some(&t) = batch.tokens.iter().find(|&&t| t >= vocab) {
            return Err(CssError::Vocabulary(t));
        }
        if batch.len > self.max_len {
            return Err(CssError::contract(format!(
                "caption length {} exceeds the encoder maximum {}",
                batch.len, self.max_len
            )));
        }
        let (n, len, d) = (batch.n, batch.len, self.dim);
        let table = g.param(store, self.embed);
        let emb = g.gather_rows(table, batch.tokens.clone())?;
        let pos = g.constant(positional_encoding(n, len, d));
        let x = g.add(emb, pos)?;

        let q = self.query.forward(g, store, x)?;
        let q = g.reshape(q, vec![n, len, self.att_dim])?;
        let k = self.key.forward(g, store, x)?;
        let k = g.reshape(k, vec![n, len, self.att_dim])?;
        let v = self.value.forward(g, store, x)?;
        let v = g.reshape(v, vec![n, len, d])?;
        let scores = g.batch_matmul(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (self.att_dim as f64).sqrt());
        let mut mask = Vec::with_capacity(n * len * len);
        for item in batch.mask.chunks(len) {
            for _ in 0..len {
                mask.extend(item.iter().map(|&m| if m { 0.0 } else { MASKED }));
            }
        }
        let mask = g.constant(Tensor::new(vec![n, len, len], mask)?);
        let scores = g.add(scores, mask)?;
        let att = g.softmax(scores);
        let mixed = g.batch_matmul(att, v, false)?;
        let mixed = g.reshape(mixed, vec![n * len, d])?;
        let h = g.add(x, mixed)?;

        let keep: Vec<f64> = batch
            .mask
            .iter()
            .flat_map(|&m| std::iter::repeat_n(if m { 1.0 } else { 0.0 }, d))
            .collect();
        let keep = g.constant(Tensor::new(vec![n * len, d], keep)?);
        g.mul(h, keep)
    }
}

/// Sinusoidal positions tiled over `n` captions: `[n * len, dim]`.
pub fn positional_encoding(n: usize, len: usize, dim: usize) -> Tensor {
    let mut one = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * freq;
            one[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    let data = one.iter().copied().cycle().take(n * len * dim).collect();
    Tensor::new(vec![n * len, dim], data).expect("positional shape")
}

/// Mean over positions of a feature map.
pub fn pool_features(map: &FeatureMap) -> Vec<f64> {
    let t = &map.values;
    let mut out = vec![0.0; t.cols()];
    for r in 0..t.rows() {
        out.iter_mut().zip(t.row(r)).for_each(|(a, b)| *a += b);
    }
    out.iter_mut().for_each(|v| *v /= t.rows() as f64);
    out
}

/// Mean over the unmasked words.
pub fn pool_words(words: &WordFeatures) -> Result<Vec<f64>> {
    let t = &words.values;
    let count = words.mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(CssError::contract("cannot pool a fully masked caption"));
    }
    let mut out = vec![0.0; t.cols()];
    for (r, &m) in words.mask.iter().enumerate() {
        if m {
            out.iter_mut().zip(t.row(r)).for_each(|(a, b)| *a += b);
        }
    }
    out.iter_mut().for_each(|v| *v /= count as f64);
    Ok(out)
}
