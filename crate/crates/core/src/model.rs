//! Shared encoders plus the compositor heads, assembled into one parameter store.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::compositors::{Head, ImageTextBlock, TargetProjector, TextImageBlock};
use crate::corpus::{AttributeSchema, Catalog, RenderConfig, Triplet};
use crate::encoders::{FeatureMap, ImageEncoder, Level, TextBatch, TextEncoder, WordFeatures};
use crate::error::{CssError, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::seeds::rng_for;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub patch_dim: usize,
    pub n_patches: usize,
    pub d_low: usize,
    pub d_mid: usize,
    pub d_high: usize,
    pub d_text: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub att_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Adds the low-depth image-text head (pyramid ablation only).
    pub low_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::for_schema(&AttributeSchema::default_schema(), &RenderConfig::default())
    }
}

/// Width choices of a model; everything else follows from the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub d_low: usize,
    pub d_mid: usize,
    pub d_high: usize,
    pub d_text: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub att_dim: usize,
    pub low_head: bool,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            d_low: 48,
            d_mid: 64,
            d_high: 64,
            d_text: 64,
            embed_dim: 64,
            hidden: 64,
            att_dim: 32,
            low_head: false,
        }
    }
}

impl ModelSettings {
    /// Every width set to `width`.
    pub fn uniform(width: usize) -> Self {
        Self {
            d_low: width,
            d_mid: width,
            d_high: width,
            d_text: width,
            embed_dim: width,
            hidden: width,
            att_dim: width,
            low_head: false,
        }
    }
}

impl ModelConfig {
    pub fn for_schema(schema: &AttributeSchema, render: &RenderConfig) -> Self {
        Self::from_settings(schema, render, &ModelSettings::default())
    }

    pub fn from_settings(schema: &AttributeSchema, render: &RenderConfig, s: &ModelSettings) -> Self {
        Self {
            patch_dim: render.patch_dim,
            n_patches: render.n_patches,
            d_low: s.d_low,
            d_mid: s.d_mid,
            d_high: s.d_high,
            d_text: s.d_text,
            embed_dim: s.embed_dim,
            hidden: s.hidden,
            att_dim: s.att_dim,
            vocab_size: schema.vocab_size(),
            max_len: schema.max_caption_len(),
            low_head: s.low_head,
        }
    }

    pub fn level_dim(&self, level: Level) -> usize {
        match level {
            Level::Low => self.d_low,
            Level::Mid => self.d_mid,
            Level::High => self.d_high,
        }
    }

    pub fn heads(&self) -> Vec<Head> {
        Head::ALL.into_iter().filter(|h| *h != Head::ItLow || self.low_head).collect()
    }

    pub fn check_corpus(&self, catalog: &Catalog) -> Result<()> {
        let r = &catalog.render;
        if r.patch_dim != self.patch_dim
            || r.n_patches != self.n_patches
            || catalog.schema.vocab_size() != self.vocab_size
            || catalog.schema.max_caption_len() > self.max_len
        {
            return Err(CssError::contract("model configuration does not match the corpus schema"));
        }
        Ok(())
    }
}

/// Learnable class prototypes for global-wise classification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeTable {
    pub param: ParamId,
    /// Catalog id of each row.
    pub ids: Vec<usize>,
    #[serde(skip)]
    row_of: HashMap<usize, usize>,
}

impl PrototypeTable {
    fn new(param: ParamId, ids: Vec<usize>) -> Self {
        let row_of = ids.iter().enumerate().map(|(r, &id)| (id, r)).collect();
        Self { param, ids, row_of }
    }

    pub fn row(&self, id: usize) -> Option<usize> {
        self.row_of.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Re-normalizes every prototype to unit length.
    pub fn renormalize(&self, store: &mut ParamStore) {
        let t = store.value_mut(self.param);
        let c = t.cols();
        for row in t.data_mut().chunks_mut(c) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
    }
}

/// Patches and captions for a set of triplets, laid out for batched ops.
#[derive(Debug, Clone)]
pub struct Batch {
    pub n: usize,
    pub refs: Tensor,
    pub targets: Option<Tensor>,
    pub target_ids: Vec<usize>,
    pub text: TextBatch,
}

impl Batch {
    pub fn from_triplets(catalog: &Catalog, triplets: &[&Triplet], with_targets: bool) -> Result<Self> {
        let stack = |ids: &mut dyn Iterator<Item = usize>| -> Result<Tensor> {
            let mut data = Vec::new();
            let mut rows = 0;
            let mut cols = 0;
            for id in ids {
                let p = &catalog.item(id).patches;
                data.extend_from_slice(p.data());
                rows += p.rows();
                cols = p.cols();
            }
            Tensor::new(vec![rows, cols], data)
        };
        let refs = stack(&mut triplets.iter().map(|t| t.ref_id))?;
        let targets = if with_targets {
            Some(stack(&mut triplets.iter().map(|t| t.target_id))?)
        } else {
            None
        };
        let captions: Vec<&[usize]> = triplets.iter().map(|t| t.caption_tokens.as_slice()).collect();
        Ok(Self {
            n: triplets.len(),
            refs,
            targets,
            target_ids: triplets.iter().map(|t| t.target_id).collect(),
            text: TextBatch::new(&captions, None)?,
        })
    }
}

/// Graph nodes produced by one batched forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardOut {
    pub queries: BTreeMap<Head, Var>,
    pub targets: BTreeMap<Head, Var>,
    pub words: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub image_text: BTreeMap<Head, ImageTextBlock>,
    pub text_image: BTreeMap<Head, TextImageBlock>,
    pub target_projectors: BTreeMap<Head, TargetProjector>,
    pub prototypes: BTreeMap<Head, PrototypeTable>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = rng_for(seed, "model-init", 0);
        let mut store = ParamStore::new();
        let c = &config;
        let image = ImageEncoder::new(&mut store, c.patch_dim, [c.d_low, c.d_mid, c.d_high], &mut rng);
        let text = TextEncoder::new(&mut store, c.vocab_size, c.d_text, c.att_dim, c.max_len, &mut rng);
        let mut image_text = BTreeMap::new();
        let mut text_image = BTreeMap::new();
        let mut target_projectors = BTreeMap::new();
        for head in c.heads() {
            let d = c.level_dim(head.level());
            let name = format!("comp.{}", head.name());
            if head.is_image_text() {
                let block = ImageTextBlock::new(&mut store, &name, head.level(), d, c.d_text, c.hidden, c.embed_dim, &mut rng);
                image_text.insert(head, block);
            } else {
                let block = TextImageBlock::new(
                    &mut store,
                    &name,
                    head.level(),
                    d,
                    c.d_text,
                    c.att_dim,
                    c.hidden,
                    c.embed_dim,
                    &mut rng,
                );
                text_image.insert(head, block);
            }
            target_projectors.insert(head, TargetProjector::new(&mut store, head, d, c.hidden, c.embed_dim, &mut rng));
        }
        Self {
            config,
            store,
            image,
            text,
            image_text,
            text_image,
            target_projectors,
            prototypes: BTreeMap::new(),
        }
    }

    pub fn has_head(&self, head: Head) -> bool {
        self.target_projectors.contains_key(&head)
    }

    fn require(&self, head: Head) -> Result<()> {
        if self.has_head(head) {
            Ok(())
        } else {
            Err(CssError::contract(format!("model has no {head} head")))
        }
    }

    /// Adds a prototype table for `head` with rows for `ids`, initialized
    /// from `init` (`[ids.len(), embed_dim]`, normalized here).
    pub fn attach_prototypes(&mut self, head: Head, ids: Vec<usize>, init: Tensor) -> Result<()> {
        self.require(head)?;
        if init.shape() != [ids.len(), self.config.embed_dim] {
            return Err(CssError::contract(format!("prototype init shape {:?}", init.shape())));
        }
        if self.prototypes.contains_key(&head) {
            return Err(CssError::contract(format!("{head} already has prototypes")));
        }
        let param = self.store.insert(format!("proto.{}", head.name()), ParamGroup::Main, init);
        let table = PrototypeTable::new(param, ids);
        table.renormalize(&mut self.store);
        self.prototypes.insert(head, table);
        Ok(())
    }

    /// Overwrites parameter values by name; every parameter must be present
    /// with a matching shape.
    pub fn load_values(&mut self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        if values.len() != self.store.len() {
            return Err(CssError::contract(format!(
                "checkpoint has {} parameters, model has {}",
                values.len(),
                self.store.len()
            )));
        }
        let ids: Vec<(ParamId, String)> = self.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let v = values
                .get(&name)
                .ok_or_else(|| CssError::contract(format!("checkpoint lacks parameter {name}")))?;
            if v.shape() != self.store.value(id).shape() {
                return Err(CssError::contract(format!("parameter {name} has shape {:?}", v.shape())));
            }
            *self.store.value_mut(id) = v.clone();
        }
        Ok(())
    }

    /// Batched forward for the requested query and target heads.
    pub fn forward(&self, g: &mut Graph, batch: &Batch, query_heads: &[Head], target_heads: &[Head]) -> Result<ForwardOut> {
        let s = self.config.n_patches;
        let st = &self.store;
        let mut out = ForwardOut::default();
        if !query_heads.is_empty() {
            let refs = g.constant(batch.refs.clone());
            let taps = self.image.forward(g, st, refs)?;
            let words = self.text.forward(g, st, &batch.text)?;
            out.words = Some(words);
            let weights = batch.text.mean_weights()?;
            let pooled_text = g.group_weighted_sum(words, batch.text.len, weights)?;
            let mut pooled_image: BTreeMap<Level, Var> = BTreeMap::new();
            for &head in query_heads {
                self.require(head)?;
                let fmap = taps.at(head.level());
                let q = if let Some(block) = self.image_text.get(&head) {
                    block.forward(g, st, fmap, pooled_text, s)?
                } else {
                    let v = match pooled_image.get(&head.level()) {
                        Some(&v) => v,
                        None => {
                            let v = g.group_mean(fmap, s)?;
                            pooled_image.insert(head.level(), v);
                            v
                        }
                    };
                    self.text_image[&head].forward(g, st, words, &batch.text, v)?
                };
                out.queries.insert(head, q);
            }
        }
        if !target_heads.is_empty() {
            let tp = batch
                .targets
                .as_ref()
                .ok_or_else(|| CssError::contract("batch carries no target images"))?;
            let tgt = g.constant(tp.clone());
            let taps = self.image.forward(g, st, tgt)?;
            for &head in target_heads {
                self.require(head)?;
                let e = self.target_projectors[&head].forward(g, st, taps.at(head.level()), s)?;
                out.targets.insert(head, e);
            }
        }
        Ok(out)
    }

    /// Composed query embeddings `[n, embed]` per head, values only.
    pub fn compose_queries(&self, batch: &Batch, heads: &[Head]) -> Result<BTreeMap<Head, Tensor>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, batch, heads, &[])?;
        Ok(out.queries.into_iter().map(|(h, v)| (h, g.value(v).clone())).collect())
    }

    /// Projected target embeddings `[n, embed]` for stacked patches `[n * positions, patch_dim]`.
    pub fn embed_targets(&self, patches: &Tensor, heads: &[Head]) -> Result<BTreeMap<Head, Tensor>> {
        let mut g = Graph::new();
        let x = g.constant(patches.clone());
        let taps = self.image.forward(&mut g, &self.store, x)?;
        let mut out = BTreeMap::new();
        for &head in heads {
            self.require(head)?;
            let e = self.target_projectors[&head].forward(&mut g, &self.store, taps.at(head.level()), self.config.n_patches)?;
            out.insert(head, g.value(e).clone());
        }
        Ok(out)
    }

    // Single-example entry points.

    fn check_patches(&self, patches: &Tensor) -> Result<()> {
        if patches.shape() != [self.config.n_patches, self.config.patch_dim] {
            return Err(CssError::contract(format!(
                "patches must be [{}, {}], got {:?}",
                self.config.n_patches,
                self.config.patch_dim,
                patches.shape()
            )));
        }
        Ok(())
    }

    /// Low, mid and high feature maps of one image.
    pub fn encode_image(&self, patches: &Tensor) -> Result<[FeatureMap; 3]> {
        self.check_patches(patches)?;
        let mut g = Graph::new();
        let x = g.constant(patches.clone());
        let taps = self.image.forward(&mut g, &self.store, x)?;
        Ok([Level::Low, Level::Mid, Level::High].map(|level| FeatureMap {
            level,
            values: g.value(taps.at(level)).clone(),
        }))
    }

    /// Word features padded to the maximum caption length.
    pub fn encode_text(&self, tokens: &[usize]) -> Result<WordFeatures> {
        let batch = TextBatch::new(&[tokens], Some(self.config.max_len))?;
        let mut g = Graph::new();
        let words = self.text.forward(&mut g, &self.store, &batch)?;
        Ok(WordFeatures {
            values: g.value(words).clone(),
            mask: batch.mask,
        })
    }

    fn image_text_block(&self, level: Level) -> Result<&ImageTextBlock> {
        self.image_text
            .values()
            .find(|b| b.level == level)
            .ok_or_else(|| CssError::contract(format!("no image-text compositor at level {level:?}")))
    }

    fn text_image_block(&self, level: Level) -> Result<&TextImageBlock> {
        self.text_image
            .values()
            .find(|b| b.level == level)
            .ok_or_else(|| CssError::contract(format!("no text-image compositor at level {level:?}")))
    }

    /// Image-text composition of a reference feature map with a pooled caption vector.
    pub fn compose_image_text(&self, reference: &FeatureMap, text: &[f64]) -> Result<Vec<f64>> {
        let block = self.image_text_block(reference.level)?;
        let d = self.config.level_dim(reference.level);
        if reference.values.cols() != d || text.len() != self.config.d_text {
            return Err(CssError::contract("compose_image_text: dimension mismatch"));
        }
        let mut g = Graph::new();
        let f = g.constant(reference.values.clone());
        let t = g.constant(Tensor::new(vec![1, text.len()], text.to_vec())?);
        let out = block.forward(&mut g, &self.store, f, t, reference.values.rows())?;
        Ok(g.value(out).data().to_vec())
    }

    /// Text-image composition of word features with a pooled image vector.
    pub fn compose_text_image(&self, words: &WordFeatures, image: &[f64], level: Level) -> Result<Vec<f64>> {
        Ok(self.text_image_attention(words, image, level)?.1)
    }

    /// Attention weights over the words along with the composed embedding.
    pub fn text_image_attention(&self, words: &WordFeatures, image: &[f64], level: Level) -> Result<(Vec<f64>, Vec<f64>)> {
        let block = self.text_image_block(level)?;
        if image.len() != self.config.level_dim(level) || words.values.cols() != self.config.d_text {
            return Err(CssError::contract("compose_text_image: dimension mismatch"));
        }
        let len = words.mask.len();
        let batch = TextBatch {
            tokens: vec![0; len],
            mask: words.mask.clone(),
            n: 1,
            len,
        };
        let mut g = Graph::new();
        let w = g.constant(words.values.clone());
        let v = g.constant(Tensor::new(vec![1, image.len()], image.to_vec())?);
        let (att, out) = block.forward_with_attention(&mut g, &self.store, w, &batch, v)?;
        Ok((g.value(att).data().to_vec(), g.value(out).data().to_vec()))
    }

    /// Target embedding of one feature map through `head`'s projector.
    pub fn project_target(&self, target: &FeatureMap, head: Head) -> Result<Vec<f64>> {
        self.require(head)?;
        if target.level != head.level() {
            return Err(CssError::contract(format!(
                "{head} projects {:?} features, got {:?}",
                head.level(),
                target.level
            )));
        }
        let mut g = Graph::new();
        let f = g.constant(target.values.clone());
        let out = self.target_projectors[&head].forward(&mut g, &self.store, f, target.values.rows())?;
        Ok(g.value(out).data().to_vec())
    }
}
