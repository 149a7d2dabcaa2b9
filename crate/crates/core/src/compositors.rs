//! The four compositors of the consensus module and their target projectors.
//!
//! Image-text blocks keep the reference feature map and add a gated,
//! text-conditioned modulation at every position (`f_r + comp(f_r, f_s)`).
//! Text-image blocks keep the pooled caption and add an attention summary of
//! the words queried by the pooled image (`f_s + comp(f_s, f_r)`).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoders::{Level, TextBatch};
use crate::error::{CssError, Result};
use crate::layers::{Linear, Mlp2};
use crate::params::{ParamGroup, ParamStore};

/// Identity of one compositor head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Head {
    #[serde(rename = "IT_l")]
    ItLow,
    #[serde(rename = "IT_m")]
    ItMid,
    #[serde(rename = "IT_h")]
    ItHigh,
    #[serde(rename = "TI_m")]
    TiMid,
    #[serde(rename = "TI_h")]
    TiHigh,
}

impl Head {
    /// The four heads of the default model, in joint-inference weight order.
    pub const CONSENSUS: [Head; 4] = [Head::ItMid, Head::ItHigh, Head::TiMid, Head::TiHigh];
    pub const ALL: [Head; 5] = [Head::ItLow, Head::ItMid, Head::ItHigh, Head::TiMid, Head::TiHigh];

    pub fn level(self) -> Level {
        match self {
            Head::ItLow => Level::Low,
            Head::ItMid | Head::TiMid => Level::Mid,
            Head::ItHigh | Head::TiHigh => Level::High,
        }
    }

    pub fn is_image_text(self) -> bool {
        matches!(self, Head::ItLow | Head::ItMid | Head::ItHigh)
    }

    pub fn name(self) -> &'static str {
        match self {
            Head::ItLow => "IT_l",
            Head::ItMid => "IT_m",
            Head::ItHigh => "IT_h",
            Head::TiMid => "TI_m",
            Head::TiHigh => "TI_h",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Head {
    type Err = CssError;

    fn from_str(s: &str) -> Result<Self> {
        Head::ALL
            .into_iter()
            .find(|h| h.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| CssError::Config(format!("unknown head {s:?}")))
    }
}

/// Gate-and-modulate residual block over a reference feature map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTextBlock {
    pub level: Level,
    pub text_proj: Linear,
    pub gate: Mlp2,
    pub modulation: Mlp2,
    pub projector: Mlp2,
}

impl ImageTextBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        level: Level,
        d_level: usize,
        d_text: usize,
        hidden: usize,
        embed: usize,
        rng: &mut R,
    ) -> Self {
        let g = ParamGroup::Main;
        Self {
            level,
            text_proj: Linear::new(store, &format!("{name}.text_proj"), g, d_text, d_level, true, rng),
            gate: Mlp2::new(store, &format!("{name}.gate"), g, 2 * d_level, hidden, d_level, rng),
            modulation: Mlp2::new(store, &format!("{name}.mod"), g, 2 * d_level, hidden, d_level, rng),
            projector: Mlp2::new(store, &format!("{name}.proj"), g, d_level, hidden, embed, rng),
        }
    }

    /// `feature_map`: `[n * positions, d_level]`; `text`: pooled `[n, d_text]`.
    /// Returns unit-norm `[n, embed]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        feature_map: Var,
        text: Var,
        positions: usize,
    ) -> Result<Var> {
        let (rows, d) = (g.value(feature_map).rows(), g.value(feature_map).cols());
        if rows != g.value(text).rows() * positions {
            return Err(CssError::contract(format!(
                "feature map has {rows} rows for {} captions x {positions} positions",
                g.value(text).rows()
            )));
        }
        let t = self.text_proj.forward(g, store, text)?;
        if g.value(t).cols() != d {
            return Err(CssError::contract("feature map width does not match the block level"));
        }
        let t = g.repeat_rows(t, positions)?;
        let u = g.concat_cols(feature_map, t)?;
        let gate = self.gate.forward(g, store, u)?;
        let gate = g.sigmoid(gate);
        let m = self.modulation.forward(g, store, u)?;
        let delta = g.mul(gate, m)?;
        let composed = g.add(feature_map, delta)?;
        let pooled = g.group_mean(composed, positions)?;
        let out = self.projector.forward(g, store, pooled)?;
        Ok(g.l2_normalize(out))
    }
}

/// Single-head cross attention from the pooled image onto caption words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextImageBlock {
    pub level: Level,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub projector: Mlp2,
    pub att_dim: usize,
}

impl TextImageBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        level: Level,
        d_level: usize,
        d_text: usize,
        att_dim: usize,
        hidden: usize,
        embed: usize,
        rng: &mut R,
    ) -> Self {
        let g = ParamGroup::Main;
        Self {
            level,
            query: Linear::new(store, &format!("{name}.q"), g, d_level, att_dim, false, rng),
            key: Linear::new(store, &format!("{name}.k"), g, d_text, att_dim, false, rng),
            value: Linear::new(store, &format!("{name}.v"), g, d_text, d_text, false, rng),
            projector: Mlp2::new(store, &format!("{name}.proj"), g, d_text, hidden, embed, rng),
            att_dim,
        }
    }

    /// Attention weights `[n, 1, len]` and the unit-norm output `[n, embed]`.
    pub fn forward_with_attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        words: Var,
        text: &TextBatch,
        pooled_image: Var,
    ) -> Result<(Var, Var)> {
        let (n, len) = (text.n, text.len);
        if g.value(pooled_image).rows() != n || g.value(words).rows() != n * len {
            return Err(CssError::contract("text-image block: batch sizes disagree"));
        }
        let weights = text.mean_weights()?;
        let pooled_text = g.group_weighted_sum(words, len, weights)?;

        let q = self.query.forward(g, store, pooled_image)?;
        let q = g.reshape(q, vec![n, 1, self.att_dim])?;
        let k = self.key.forward(g, store, words)?;
        let k = g.reshape(k, vec![n, len, self.att_dim])?;
        let scores = g.batch_matmul(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (self.att_dim as f64).sqrt());
        let mask = g.constant(text.key_mask());
        let scores = g.add(scores, mask)?;
        let att = g.softmax(scores);
        let v = self.value.forward(g, store, words)?;
        let d = g.value(v).cols();
        let v = g.reshape(v, vec![n, len, d])?;
        let summary = g.batch_matmul(att, v, false)?;
        let summary = g.reshape(summary, vec![n, d])?;
        let s = g.add(pooled_text, summary)?;
        let out = self.projector.forward(g, store, s)?;
        Ok((att, g.l2_normalize(out)))
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        words: Var,
        text: &TextBatch,
        pooled_image: Var,
    ) -> Result<Var> {
        Ok(self.forward_with_attention(g, store, words, text, pooled_image)?.1)
    }
}

/// Average pooling followed by a two-layer map and L2 normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetProjector {
    pub head: Head,
    pub mlp: Mlp2,
}

impl TargetProjector {
    pub fn new<R: Rng>(store: &mut ParamStore, head: Head, d_level: usize, hidden: usize, embed: usize, rng: &mut R) -> Self {
        let name = format!("target.{}", head.name());
        Self {
            head,
            mlp: Mlp2::new(store, &name, ParamGroup::Main, d_level, hidden, embed, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, feature_map: Var, positions: usize) -> Result<Var> {
        let pooled = g.group_mean(feature_map, positions)?;
        let out = self.mlp.forward(g, store, pooled)?;
        Ok(g.l2_normalize(out))
    }
}
