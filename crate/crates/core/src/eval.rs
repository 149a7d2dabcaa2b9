//! Gallery embedding, similarity matrices, joint ranking and recall metrics.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compositors::Head;
use crate::corpus::{Catalog, Triplet};
use crate::dataset::{write_json, write_lines};
use crate::error::{CssError, Result};
use crate::model::{Batch, Model};
use crate::tensor::Tensor;
use crate::trainer::stack_patches;

/// Items or queries embedded per forward pass.
const CHUNK: usize = 256;

pub const DEFAULT_KS: [usize; 3] = [1, 10, 50];

/// Gallery embeddings `[n_gallery, C]` per head. Items that own a prototype
/// row are represented by that prototype.
pub fn embed_gallery(model: &Model, catalog: &Catalog, heads: &[Head]) -> Result<BTreeMap<Head, Tensor>> {
    model.config.check_corpus(catalog)?;
    let c = model.config.embed_dim;
    let mut out: BTreeMap<Head, Vec<f64>> = heads.iter().map(|&h| (h, Vec::with_capacity(catalog.len() * c))).collect();
    let ids: Vec<usize> = (0..catalog.len()).collect();
    for chunk in ids.chunks(CHUNK) {
        let patches = stack_patches(catalog, chunk)?;
        for (head, e) in model.embed_targets(&patches, heads)? {
            out.get_mut(&head).expect("requested head").extend_from_slice(e.data());
        }
    }
    let mut gallery = BTreeMap::new();
    for (head, data) in out {
        let mut t = Tensor::new(vec![catalog.len(), c], data)?;
        if let Some(table) = model.prototypes.get(&head) {
            let protos = model.store.value(table.param);
            for (row, &id) in table.ids.iter().enumerate() {
                t.data_mut()[id * c..(id + 1) * c].copy_from_slice(protos.row(row));
            }
        }
        gallery.insert(head, t);
    }
    Ok(gallery)
}

/// Composed query embeddings `[n_queries, C]` per head.
pub fn embed_queries(model: &Model, catalog: &Catalog, queries: &[Triplet], heads: &[Head]) -> Result<BTreeMap<Head, Tensor>> {
    let c = model.config.embed_dim;
    let mut out: BTreeMap<Head, Vec<f64>> = heads.iter().map(|&h| (h, Vec::new())).collect();
    for chunk in queries.chunks(CHUNK) {
        let refs: Vec<&Triplet> = chunk.iter().collect();
        let batch = Batch::from_triplets(catalog, &refs, false)?;
        for (head, q) in model.compose_queries(&batch, heads)? {
            out.get_mut(&head).expect("requested head").extend_from_slice(q.data());
        }
    }
    out.into_iter()
        .map(|(h, data)| Ok((h, Tensor::new(vec![queries.len(), c], data)?)))
        .collect()
}

/// Cosine similarities `[n_queries, n_gallery]` per head.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityBundle {
    pub heads: BTreeMap<Head, Tensor>,
}

impl SimilarityBundle {
    pub fn from_embeddings(queries: &BTreeMap<Head, Tensor>, gallery: &BTreeMap<Head, Tensor>) -> Result<Self> {
        let mut heads = BTreeMap::new();
        for (&head, q) in queries {
            let g = gallery
                .get(&head)
                .ok_or_else(|| CssError::contract(format!("no gallery embeddings for {head}")))?;
            heads.insert(head, dot_rows(q, g)?);
        }
        Ok(Self { heads })
    }

    pub fn shape(&self) -> Option<(usize, usize)> {
        self.heads.values().next().map(|t| (t.shape()[0], t.shape()[1]))
    }

    pub fn get(&self, head: Head) -> Result<&Tensor> {
        self.heads
            .get(&head)
            .ok_or_else(|| CssError::contract(format!("bundle has no {head} similarities")))
    }
}

/// `a b^T` for `[n1, C]` and `[n2, C]`, each entry summed in column order.
pub fn dot_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.cols() {
        return Err(CssError::contract(format!("cannot dot {:?} with {:?}", a.shape(), b.shape())));
    }
    let mut data = Vec::with_capacity(a.rows() * b.rows());
    for i in 0..a.rows() {
        let q = a.row(i);
        for j in 0..b.rows() {
            data.push(q.iter().zip(b.row(j)).map(|(x, y)| x * y).sum());
        }
    }
    Tensor::new(vec![a.rows(), b.rows()], data)
}

pub fn similarity_matrices(model: &Model, catalog: &Catalog, queries: &[Triplet], heads: &[Head]) -> Result<SimilarityBundle> {
    let gallery = embed_gallery(model, catalog, heads)?;
    let q = embed_queries(model, catalog, queries, heads)?;
    SimilarityBundle::from_embeddings(&q, &gallery)
}

/// Non-negative per-head weights of joint inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointWeights(pub BTreeMap<Head, f64>);

impl JointWeights {
    /// `alphas` in the order IT_m, IT_h, TI_m, TI_h.
    pub fn from_alphas(alphas: &[f64; 4]) -> Self {
        Self(Head::CONSENSUS.iter().copied().zip(alphas.iter().copied()).collect())
    }

    pub fn equal(heads: &[Head]) -> Self {
        Self(heads.iter().map(|&h| (h, 1.0)).collect())
    }

    /// Drops the weight of every head outside `heads`.
    pub fn restricted_to(&self, heads: &[Head]) -> Self {
        Self(self.0.iter().map(|(&h, &w)| (h, if heads.contains(&h) { w } else { 0.0 })).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.values().any(|w| !(*w >= 0.0)) || self.0.values().all(|&w| w == 0.0) {
            return Err(CssError::contract(format!(
                "joint weights {:?} need a positive entry and no negatives",
                self.0
            )));
        }
        Ok(())
    }
}

/// `sum_h w_h P_h`, accumulated in head order.
pub fn joint_scores(bundle: &SimilarityBundle, weights: &JointWeights) -> Result<Tensor> {
    weights.validate()?;
    let mut acc: Option<Tensor> = None;
    for (&head, &w) in &weights.0 {
        if w == 0.0 {
            continue;
        }
        let p = bundle.get(head)?;
        match acc.as_mut() {
            None => acc = Some(Tensor::new(p.shape().to_vec(), p.data().iter().map(|v| w * v).collect())?),
            Some(a) => {
                if a.shape() != p.shape() {
                    return Err(CssError::contract("similarity matrices differ in shape"));
                }
                a.data_mut().iter_mut().zip(p.data()).for_each(|(x, v)| *x += w * v);
            }
        }
    }
    Ok(acc.expect("at least one positive weight"))
}

/// Per-row gallery ids by descending score, ties by ascending id.
pub fn rank_rows(scores: &Tensor) -> Vec<Vec<usize>> {
    (0..scores.rows())
        .map(|r| {
            let row = scores.row(r);
            let mut ids: Vec<usize> = (0..row.len()).collect();
            ids.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
            ids
        })
        .collect()
}

/// Orderings under `alpha1 P_IT_m + alpha2 P_IT_h + alpha3 P_TI_m + alpha4 P_TI_h`.
pub fn joint_rank(bundle: &SimilarityBundle, alphas: &[f64; 4]) -> Result<Vec<Vec<usize>>> {
    Ok(rank_rows(&joint_scores(bundle, &JointWeights::from_alphas(alphas))?))
}

fn check_k(orderings: &[Vec<usize>], k: usize) -> Result<()> {
    if let Some(o) = orderings.first() {
        if k == 0 || k > o.len() {
            return Err(CssError::contract(format!("K = {k} outside 1..={}", o.len())));
        }
    }
    Ok(())
}

/// Fraction of queries whose annotated target is in the top `k`.
pub fn recall_at_k(orderings: &[Vec<usize>], targets: &[usize], k: usize) -> Result<f64> {
    if orderings.len() != targets.len() || orderings.is_empty() {
        return Err(CssError::contract("one non-empty ordering per target is required"));
    }
    check_k(orderings, k)?;
    let hits = orderings.iter().zip(targets).filter(|(o, t)| o[..k].contains(t)).count();
    Ok(hits as f64 / targets.len() as f64)
}

/// Fraction of queries with any valid-set member in the top `k`.
pub fn ambiguity_recall_at_k(orderings: &[Vec<usize>], valid_sets: &[Vec<usize>], k: usize) -> Result<f64> {
    if orderings.len() != valid_sets.len() || orderings.is_empty() {
        return Err(CssError::contract("one non-empty ordering per valid set is required"));
    }
    if valid_sets.iter().any(|v| v.is_empty()) {
        return Err(CssError::contract("valid sets must be non-empty"));
    }
    check_k(orderings, k)?;
    let hits = orderings
        .iter()
        .zip(valid_sets)
        .filter(|(o, v)| o[..k].iter().any(|id| v.contains(id)))
        .count();
    Ok(hits as f64 / valid_sets.len() as f64)
}

pub type RecallTable = BTreeMap<String, f64>;

pub fn recall_key(k: usize) -> String {
    format!("R@{k}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_head: BTreeMap<Head, RecallTable>,
    pub joint: RecallTable,
    pub ambiguity_per_head: BTreeMap<Head, RecallTable>,
    pub ambiguity_joint: RecallTable,
    pub alphas: JointWeights,
    pub n_queries: usize,
    pub n_gallery: usize,
}

impl Metrics {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn head_recall(&self, head: Head, k: usize) -> Option<f64> {
        self.per_head.get(&head)?.get(&recall_key(k)).copied()
    }

    pub fn joint_recall(&self, k: usize) -> Option<f64> {
        self.joint.get(&recall_key(k)).copied()
    }
}

/// Rankings from one evaluation, kept for the optional CSV dump.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub joint_orderings: Vec<Vec<usize>>,
}

fn recall_tables(orderings: &[Vec<usize>], queries: &[Triplet], ks: &[usize]) -> Result<(RecallTable, RecallTable)> {
    let targets: Vec<usize> = queries.iter().map(|t| t.target_id).collect();
    let valid: Vec<Vec<usize>> = queries.iter().map(|t| t.valid_ids.clone()).collect();
    let mut plain = RecallTable::new();
    let mut amb = RecallTable::new();
    for &k in ks {
        plain.insert(recall_key(k), recall_at_k(orderings, &targets, k)?);
        amb.insert(recall_key(k), ambiguity_recall_at_k(orderings, &valid, k)?);
    }
    Ok((plain, amb))
}

/// Per-head and joint recall over the full catalog as gallery. Heads with a
/// zero weight still get per-head numbers.
pub fn evaluate(model: &Model, catalog: &Catalog, queries: &[Triplet], weights: &JointWeights, ks: &[usize]) -> Result<Evaluation> {
    if queries.is_empty() {
        return Err(CssError::contract("no evaluation queries"));
    }
    let heads: Vec<Head> = model.target_projectors.keys().copied().collect();
    let bundle = similarity_matrices(model, catalog, queries, &heads)?;
    let mut per_head = BTreeMap::new();
    let mut ambiguity_per_head = BTreeMap::new();
    for (&head, p) in &bundle.heads {
        let (plain, amb) = recall_tables(&rank_rows(p), queries, ks)?;
        per_head.insert(head, plain);
        ambiguity_per_head.insert(head, amb);
    }
    let joint_orderings = rank_rows(&joint_scores(&bundle, weights)?);
    let (joint, ambiguity_joint) = recall_tables(&joint_orderings, queries, ks)?;
    Ok(Evaluation {
        metrics: Metrics {
            per_head,
            joint,
            ambiguity_per_head,
            ambiguity_joint,
            alphas: weights.clone(),
            n_queries: queries.len(),
            n_gallery: catalog.len(),
        },
        joint_orderings,
    })
}

/// `query,ref,target,top` with the top 50 gallery ids space-separated.
pub fn write_rankings(path: &Path, queries: &[Triplet], orderings: &[Vec<usize>]) -> Result<()> {
    let mut lines = vec!["query,ref,target,top".to_string()];
    for (i, (q, o)) in queries.iter().zip(orderings).enumerate() {
        let top: Vec<String> = o.iter().take(50).map(|id| id.to_string()).collect();
        lines.push(format!("{i},{},{},{}", q.ref_id, q.target_id, top.join(" ")));
    }
    write_lines(path, &lines)
}
