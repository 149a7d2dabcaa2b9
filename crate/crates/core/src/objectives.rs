//! Classification losses, batch posteriors and the consensus divergence.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::compositors::Head;
use crate::error::{CssError, Result};
use crate::model::{Batch, Model};
use crate::tensor::Tensor;

/// Multiplier on cosine similarities before the softmax.
pub const SIMILARITY_SCALE: f64 = 10.0;

/// Weights of the consensus objective and of joint inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsensusWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Joint-inference weights in the order IT_m, IT_h, TI_m, TI_h.
    pub alphas: [f64; 4],
}

impl Default for ConsensusWeights {
    fn default() -> Self {
        Self {
            lambda1: 10.0,
            lambda2: 1.0,
            alphas: [1.0, 0.5, 0.5, 0.5],
        }
    }
}

impl ConsensusWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0 && self.lambda1 + self.lambda2 > 0.0) {
            return Err(CssError::contract("consensus weights must be non-negative with a positive sum"));
        }
        if self.alphas.iter().any(|a| !(*a >= 0.0)) || self.alphas.iter().sum::<f64>() <= 0.0 {
            return Err(CssError::contract("joint weights must be non-negative with a positive sum"));
        }
        Ok(())
    }
}

/// Row-stochastic `[B, B]` matrix of in-batch target probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPosterior(Tensor);

impl BatchPosterior {
    pub fn new(probs: Tensor) -> Result<Self> {
        let shape = probs.shape();
        if shape.len() != 2 || shape[0] != shape[1] || shape[0] == 0 {
            return Err(CssError::contract(format!("posterior must be square, got {shape:?}")));
        }
        for r in 0..probs.rows() {
            let row = probs.row(r);
            if row.iter().any(|p| !(*p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(CssError::contract(format!("posterior row {r} is not a distribution")));
            }
        }
        Ok(Self(probs))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn batch_size(&self) -> usize {
        self.0.rows()
    }
}

/// `scale * Q K^T` for unit-norm rows.
pub fn similarity_logits(g: &mut Graph, queries: Var, keys: Var, scale: f64) -> Result<Var> {
    if g.value(queries).cols() != g.value(keys).cols() {
        return Err(CssError::contract("query and key widths differ"));
    }
    let s = g.matmul_ext(queries, keys, true)?;
    Ok(g.scale(s, scale))
}

/// Label distribution with `1 - eps` on `positive` and `eps / (n - 1)` elsewhere.
pub fn smoothed_labels(n: usize, positive: usize, eps: f64) -> Result<Vec<f64>> {
    if positive >= n {
        return Err(CssError::contract(format!("positive index {positive} out of {n} classes")));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(CssError::contract(format!("smoothing must lie in [0, 1), got {eps}")));
    }
    if n < 2 {
        if eps > 0.0 {
            return Err(CssError::contract("smoothing needs at least two classes"));
        }
        return Ok(vec![1.0]);
    }
    let off = eps / (n - 1) as f64;
    Ok((0..n).map(|j| if j == positive { 1.0 - eps } else { off }).collect())
}

/// Mean over rows of `-sum_j y_ij log softmax(logits)_ij`.
pub fn soft_cross_entropy(g: &mut Graph, logits: Var, labels: Tensor) -> Result<Var> {
    if g.shape(logits) != labels.shape() {
        return Err(CssError::contract("labels and logits differ in shape"));
    }
    let rows = g.value(logits).rows();
    let lp = g.log_softmax(logits);
    let y = g.constant(labels);
    let prod = g.mul(lp, y)?;
    let total = g.sum(prod);
    Ok(g.scale(total, -1.0 / rows as f64))
}

fn label_matrix(rows: usize, cols: usize, positives: &[usize], eps: f64) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows * cols);
    for &p in positives {
        data.extend(smoothed_labels(cols, p, eps)?);
    }
    Tensor::new(vec![rows, cols], data)
}

/// Batch-based classification: row `i` of `queries` should pick target `i`.
pub fn bbc_loss(g: &mut Graph, queries: Var, targets: Var, scale: f64, eps: f64) -> Result<Var> {
    let b = g.value(queries).rows();
    if b < 2 {
        return Err(CssError::contract(format!("batch classification needs at least 2 rows, got {b}")));
    }
    if g.value(targets).rows() != b {
        return Err(CssError::contract("query and target batches differ in size"));
    }
    let logits = similarity_logits(g, queries, targets, scale)?;
    let labels = label_matrix(b, b, &(0..b).collect::<Vec<_>>(), eps)?;
    soft_cross_entropy(g, logits, labels)
}

/// Global classification against a prototype table; `rows[i]` is the
/// prototype row of query `i`'s target.
pub fn gwc_loss(g: &mut Graph, queries: Var, prototypes: Var, rows: &[usize], scale: f64, eps: f64) -> Result<Var> {
    let b = g.value(queries).rows();
    let n = g.value(prototypes).rows();
    if rows.len() != b {
        return Err(CssError::contract("one prototype row per query is required"));
    }
    let logits = similarity_logits(g, queries, prototypes, scale)?;
    let labels = label_matrix(b, n, rows, eps)?;
    soft_cross_entropy(g, logits, labels)
}

/// Row softmax of the scaled similarity between queries and in-batch targets.
pub fn batch_posterior(g: &mut Graph, queries: Var, targets: Var, scale: f64) -> Result<Var> {
    let logits = similarity_logits(g, queries, targets, scale)?;
    Ok(g.softmax(logits))
}

/// Value-only posterior for embeddings that already live outside a graph.
pub fn posterior_of(queries: &Tensor, targets: &Tensor, scale: f64) -> Result<BatchPosterior> {
    let mut g = Graph::new();
    let q = g.constant(queries.clone());
    let t = g.constant(targets.clone());
    let p = batch_posterior(&mut g, q, t, scale)?;
    BatchPosterior::new(g.value(p).clone())
}

/// Mutual-learning term `(KL(p_m || p_w) + KL(p_h || p_w)) / B` with
/// `p_w = (l1 p_m + l2 p_h) / (l1 + l2)` held fixed.
pub fn kl_consensus(g: &mut Graph, p_m: Var, p_h: Var, weights: &ConsensusWeights) -> Result<Var> {
    let log_pw = consensus_log_target(g.value(p_m), g.value(p_h), weights)?;
    kl_against(g, p_m, p_h, &log_pw)
}

/// `ln p_w` for the given posteriors; the fixed target of [`kl_consensus`].
pub fn consensus_log_target(p_m: &Tensor, p_h: &Tensor, weights: &ConsensusWeights) -> Result<Tensor> {
    weights.validate()?;
    if p_m.shape() != p_h.shape() || p_m.shape().len() != 2 {
        return Err(CssError::contract("posteriors must share a [B, B] shape"));
    }
    let norm = weights.lambda1 + weights.lambda2;
    let (w1, w2) = (weights.lambda1 / norm, weights.lambda2 / norm);
    let data = p_m
        .data()
        .iter()
        .zip(p_h.data())
        .map(|(m, h)| (w1 * m + w2 * h).max(crate::autograd::LN_FLOOR).ln())
        .collect();
    Tensor::new(p_m.shape().to_vec(), data)
}

/// KL consensus against an explicit `ln p_w`.
pub fn kl_against(g: &mut Graph, p_m: Var, p_h: Var, log_pw: &Tensor) -> Result<Var> {
    if g.shape(p_m) != g.shape(p_h) || g.shape(p_m) != log_pw.shape() || log_pw.shape().len() != 2 {
        return Err(CssError::contract("posteriors and target must share a [B, B] shape"));
    }
    let b = log_pw.rows();
    let log_pw = g.constant(log_pw.clone());
    let mut total = None;
    for p in [p_m, p_h] {
        let lp = g.ln(p);
        let diff = g.sub(lp, log_pw)?;
        let term = g.mul(p, diff)?;
        let s = g.sum(term);
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    Ok(g.scale(total.expect("two terms"), 1.0 / b as f64))
}

/// Value-only consensus divergence of two posteriors.
pub fn kl_consensus_value(p_m: &BatchPosterior, p_h: &BatchPosterior, weights: &ConsensusWeights) -> Result<f64> {
    let mut g = Graph::new();
    let m = g.constant(p_m.tensor().clone());
    let h = g.constant(p_h.tensor().clone());
    let kl = kl_consensus(&mut g, m, h, weights)?;
    Ok(g.value(kl).item())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    /// In-batch targets as classes.
    Batch,
    /// Learnable prototypes over all training targets.
    Global,
}

/// Which terms contribute to the training objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub heads: Vec<Head>,
    pub kl: bool,
    pub classification: Classification,
    pub smoothing: f64,
    pub scale: f64,
    pub weights: ConsensusWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            heads: Head::CONSENSUS.to_vec(),
            kl: true,
            classification: Classification::Batch,
            smoothing: 0.0,
            scale: SIMILARITY_SCALE,
            weights: ConsensusWeights::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.heads.is_empty() && !self.kl {
            return Err(CssError::contract("loss configuration enables no terms"));
        }
        if !(0.0..1.0).contains(&self.smoothing) || !(self.scale > 0.0) {
            return Err(CssError::contract("smoothing must lie in [0, 1) and the scale must be positive"));
        }
        Ok(())
    }

    /// Heads whose queries the objective needs.
    pub fn query_heads(&self) -> Vec<Head> {
        let mut heads = self.heads.clone();
        if self.kl {
            for h in [Head::ItMid, Head::ItHigh] {
                if !heads.contains(&h) {
                    heads.push(h);
                }
            }
        }
        heads.sort();
        heads
    }

    /// Heads whose projected in-batch targets the objective needs.
    pub fn target_heads(&self) -> Vec<Head> {
        let mut heads = match self.classification {
            Classification::Batch => self.heads.clone(),
            Classification::Global => Vec::new(),
        };
        if self.kl {
            for h in [Head::ItMid, Head::ItHigh] {
                if !heads.contains(&h) {
                    heads.push(h);
                }
            }
        }
        heads.sort();
        heads
    }
}

/// Per-term values of one objective evaluation. Disabled terms are absent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub terms: Vec<(String, f64)>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

pub const KL_TERM: &str = "L_KL";

pub fn term_name(head: Head) -> String {
    format!("L_{}", head.name())
}

/// Builds the full objective for one batch. Returns the scalar loss node and
/// the value of every enabled term.
pub fn total_loss(g: &mut Graph, model: &Model, batch: &Batch, cfg: &LossConfig) -> Result<(Var, LossBreakdown)> {
    total_loss_with_target(g, model, batch, cfg, None)
}

/// [`total_loss`] with the consensus target pinned to `log_pw` when given,
/// so finite differences see the same fixed target as the backward pass.
pub fn total_loss_with_target(
    g: &mut Graph,
    model: &Model,
    batch: &Batch,
    cfg: &LossConfig,
    log_pw: Option<&Tensor>,
) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    let out = model.forward(g, batch, &cfg.query_heads(), &cfg.target_heads())?;
    let mut parts: Vec<(String, Var)> = Vec::new();
    for &head in &cfg.heads {
        let q = out.queries[&head];
        let loss = match cfg.classification {
            Classification::Batch => bbc_loss(g, q, out.targets[&head], cfg.scale, cfg.smoothing)?,
            Classification::Global => {
                let table = model
                    .prototypes
                    .get(&head)
                    .ok_or_else(|| CssError::contract(format!("{head} has no prototypes")))?;
                let rows = batch
                    .target_ids
                    .iter()
                    .map(|id| {
                        table
                            .row(*id)
                            .ok_or_else(|| CssError::contract(format!("target {id} has no prototype")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let protos = g.param(&model.store, table.param);
                gwc_loss(g, q, protos, &rows, cfg.scale, cfg.smoothing)?
            }
        };
        parts.push((term_name(head), loss));
    }
    if cfg.kl {
        let p_m = batch_posterior(g, out.queries[&Head::ItMid], out.targets[&Head::ItMid], cfg.scale)?;
        let p_h = batch_posterior(g, out.queries[&Head::ItHigh], out.targets[&Head::ItHigh], cfg.scale)?;
        let kl = match log_pw {
            Some(t) => kl_against(g, p_m, p_h, t)?,
            None => kl_consensus(g, p_m, p_h, &cfg.weights)?,
        };
        parts.push((KL_TERM.to_string(), kl));
    }
    let mut total = parts[0].1;
    for &(_, v) in &parts[1..] {
        total = g.add(total, v)?;
    }
    let breakdown = LossBreakdown {
        terms: parts.iter().map(|(n, v)| (n.clone(), g.value(*v).item())).collect(),
        total: g.value(total).item(),
    };
    Ok((total, breakdown))
}
