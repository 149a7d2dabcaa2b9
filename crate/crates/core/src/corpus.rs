//! Synthetic attribute-world corpus with an exact valid-match oracle.
//!
//! Items are attribute tuples rendered as a few patch vectors. A triplet
//! changes `j` slots of a reference item and its caption mentions only `k`
//! of them; every catalog item consistent with the caption (mentioned slots
//! match, unmentioned slots deviate from the reference in at most `j - k`
//! places) is a valid match.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CssError, Result};
use crate::seeds::rng_for;
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const CHANGE: usize = 1;
pub const TO: usize = 2;
pub const AND: usize = 3;
pub const END: usize = 4;
const TEMPLATE_TOKENS: [&str; 5] = ["<pad>", "change", "to", "and", "<end>"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    pub cardinality: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeSchema {
    slots: Vec<Slot>,
    vocab: Vec<String>,
    slot_token_base: usize,
    value_token_base: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct SchemaFile {
    slots: Vec<Slot>,
    #[serde(default)]
    vocabulary: Vec<String>,
}

impl AttributeSchema {
    pub fn new(slots: Vec<Slot>) -> Result<Self> {
        if slots.is_empty() {
            return Err(CssError::Config("schema needs at least one slot".into()));
        }
        let mut seen = HashSet::new();
        for s in &slots {
            if s.cardinality < 2 {
                return Err(CssError::Config(format!("slot {} needs at least 2 values", s.name)));
            }
            if !seen.insert(s.name.as_str()) || TEMPLATE_TOKENS.contains(&s.name.as_str()) {
                return Err(CssError::Config(format!("slot name {} is not unique", s.name)));
            }
        }
        let mut vocab: Vec<String> = TEMPLATE_TOKENS.iter().map(|s| s.to_string()).collect();
        let slot_token_base = vocab.len();
        vocab.extend(slots.iter().map(|s| s.name.clone()));
        let mut value_token_base = Vec::with_capacity(slots.len());
        for s in &slots {
            value_token_base.push(vocab.len());
            vocab.extend((0..s.cardinality).map(|v| format!("{}_{v}", s.name)));
        }
        Ok(Self {
            slots,
            vocab,
            slot_token_base,
            value_token_base,
        })
    }

    /// Five slots with cardinalities 8, 6, 5, 4, 4.
    pub fn default_schema() -> Self {
        let names = ["color", "pattern", "material", "location", "style"];
        let cards = [8, 6, 5, 4, 4];
        Self::new(
            names
                .iter()
                .zip(cards)
                .map(|(n, c)| Slot {
                    name: n.to_string(),
                    cardinality: c,
                })
                .collect(),
        )
        .expect("default schema is valid")
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn n_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Number of distinct attribute tuples.
    pub fn tuple_space(&self) -> usize {
        self.slots.iter().map(|s| s.cardinality).product()
    }

    /// Longest caption: every slot mentioned, `change s to v` joined by
    /// `and`, plus `<end>`.
    pub fn max_caption_len(&self) -> usize {
        5 * self.n_slots()
    }

    pub fn slot_token(&self, slot: usize) -> usize {
        self.slot_token_base + slot
    }

    pub fn value_token(&self, slot: usize, value: usize) -> usize {
        self.value_token_base[slot] + value
    }

    pub fn token_text(&self, token: usize) -> Result<&str> {
        self.vocab.get(token).map(String::as_str).ok_or(CssError::Vocabulary(token))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(SchemaFile {
            slots: self.slots.clone(),
            vocabulary: self.vocab.clone(),
        })
        .expect("schema serializes")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: SchemaFile = serde_json::from_str(text).map_err(|e| CssError::json("schema", e))?;
        let schema = Self::new(file.slots)?;
        if !file.vocabulary.is_empty() && file.vocabulary != schema.vocab {
            return Err(CssError::Config("schema vocabulary does not match its slots".into()));
        }
        Ok(schema)
    }

    /// Caption tokens for `(slot, value)` pairs in the given order.
    pub fn encode_caption(&self, mentions: &[(usize, usize)]) -> Vec<usize> {
        let mut toks = Vec::with_capacity(5 * mentions.len());
        for (i, &(slot, value)) in mentions.iter().enumerate() {
            if i > 0 {
                toks.push(AND);
            }
            toks.extend([CHANGE, self.slot_token(slot), TO, self.value_token(slot, value)]);
        }
        toks.push(END);
        toks
    }

    /// Inverse of [`encode_caption`](Self::encode_caption).
    pub fn decode_caption(&self, tokens: &[usize]) -> Result<Vec<(usize, usize)>> {
        let bad = || CssError::contract(format!("malformed caption {tokens:?}"));
        let mut out = Vec::new();
        let mut i = 0;
        loop {
            if tokens.len() < i + 5 || tokens[i] != CHANGE || tokens[i + 2] != TO {
                return Err(bad());
            }
            let slot = tokens[i + 1].checked_sub(self.slot_token_base).filter(|s| *s < self.n_slots()).ok_or_else(bad)?;
            let value = tokens[i + 3]
                .checked_sub(self.value_token_base[slot])
                .filter(|v| *v < self.slots[slot].cardinality)
                .ok_or_else(bad)?;
            out.push((slot, value));
            match tokens[i + 4] {
                END if i + 5 == tokens.len() => return Ok(out),
                AND => i += 5,
                _ => return Err(bad()),
            }
        }
    }

    pub fn caption_text(&self, tokens: &[usize]) -> Result<String> {
        let words = tokens.iter().map(|&t| self.token_text(t)).collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub n_patches: usize,
    pub patch_dim: usize,
    pub noise: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            n_patches: 4,
            patch_dim: 32,
            noise: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: usize,
    pub attrs: Vec<usize>,
    /// `[n_patches, patch_dim]`, one row per spatial position.
    pub patches: Tensor,
}

/// Fixed per-(slot, value) patch embeddings and the slot-to-patch routing.
#[derive(Debug, Clone, PartialEq)]
pub struct Renderer {
    config: RenderConfig,
    seed: u64,
    /// `[slot][value] -> patch_dim` vector.
    embeddings: Vec<Vec<Vec<f64>>>,
}

impl Renderer {
    pub fn new(schema: &AttributeSchema, config: RenderConfig, seed: u64) -> Self {
        let mut rng = rng_for(seed, "value-embeddings", 0);
        let embeddings = schema
            .slots()
            .iter()
            .map(|s| {
                (0..s.cardinality)
                    .map(|_| (0..config.patch_dim).map(|_| StandardNormal.sample(&mut rng)).collect())
                    .collect()
            })
            .collect();
        Self { config, seed, embeddings }
    }

    pub fn config(&self) -> RenderConfig {
        self.config
    }

    /// Patch a slot's embedding is routed to.
    pub fn patch_of_slot(&self, slot: usize) -> usize {
        slot % self.config.n_patches
    }

    /// Pure function of `(attrs, item id)` for a fixed renderer.
    pub fn render(&self, id: usize, attrs: &[usize]) -> Tensor {
        let (s, d) = (self.config.n_patches, self.config.patch_dim);
        let mut data = vec![0.0; s * d];
        for (slot, &v) in attrs.iter().enumerate() {
            let p = self.patch_of_slot(slot);
            data[p * d..(p + 1) * d]
                .iter_mut()
                .zip(&self.embeddings[slot][v])
                .for_each(|(a, b)| *a += b);
        }
        if self.config.noise > 0.0 {
            let mut rng = rng_for(self.seed, "item-noise", id as u64);
            let normal = Normal::new(0.0, self.config.noise).expect("positive noise");
            data.iter_mut().for_each(|x| *x += normal.sample(&mut rng));
        }
        Tensor::new(vec![s, d], data).expect("patch shape")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    pub schema: AttributeSchema,
    pub render: RenderConfig,
    pub seed: u64,
    pub items: Vec<Item>,
}

impl Catalog {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn item(&self, id: usize) -> &Item {
        &self.items[id]
    }

    /// Builds a catalog from explicit attribute tuples (ids are positions).
    pub fn from_tuples(schema: AttributeSchema, render: RenderConfig, seed: u64, tuples: Vec<Vec<usize>>) -> Result<Self> {
        let renderer = Renderer::new(&schema, render, seed);
        let items = tuples
            .into_iter()
            .enumerate()
            .map(|(id, attrs)| {
                if attrs.len() != schema.n_slots()
                    || attrs.iter().zip(schema.slots()).any(|(v, s)| *v >= s.cardinality)
                {
                    return Err(CssError::contract(format!("tuple {attrs:?} does not fit the schema")));
                }
                let patches = renderer.render(id, &attrs);
                Ok(Item { id, attrs, patches })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            schema,
            render,
            seed,
            items,
        })
    }
}

fn decode_tuple(schema: &AttributeSchema, mut code: usize) -> Vec<usize> {
    schema
        .slots()
        .iter()
        .map(|s| {
            let v = code % s.cardinality;
            code /= s.cardinality;
            v
        })
        .collect()
}

pub fn generate_catalog(
    schema: &AttributeSchema,
    render: RenderConfig,
    n_items: usize,
    unique_tuples: bool,
    seed: u64,
) -> Result<Catalog> {
    let space = schema.tuple_space();
    let mut rng = rng_for(seed, "catalog", 0);
    let tuples: Vec<Vec<usize>> = if unique_tuples {
        if n_items > space {
            return Err(CssError::Capacity {
                requested: n_items,
                available: space,
            });
        }
        sample(&mut rng, space, n_items)
            .into_iter()
            .map(|code| decode_tuple(schema, code))
            .collect()
    } else {
        (0..n_items)
            .map(|_| schema.slots().iter().map(|s| rng.random_range(0..s.cardinality)).collect())
            .collect()
    };
    Catalog::from_tuples(schema.clone(), render, seed, tuples)
}

/// How many of the changed slots a caption mentions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Specificity {
    /// k = 1
    Low,
    /// k = ceil(j / 2)
    Med,
    /// k = j
    High,
    /// k = min(K, j)
    Fixed(usize),
}

impl Specificity {
    pub fn mentions(self, j: usize) -> usize {
        match self {
            Specificity::Low => 1,
            Specificity::Med => j.div_ceil(2),
            Specificity::High => j,
            Specificity::Fixed(k) => k.clamp(1, j),
        }
    }
}

impl fmt::Display for Specificity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Specificity::Low => write!(f, "low"),
            Specificity::Med => write!(f, "med"),
            Specificity::High => write!(f, "high"),
            Specificity::Fixed(k) => write!(f, "k={k}"),
        }
    }
}

impl TryFrom<String> for Specificity {
    type Error = CssError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Specificity> for String {
    fn from(s: Specificity) -> String {
        s.to_string()
    }
}

impl FromStr for Specificity {
    type Err = CssError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(Self::Low),
            "med" => Ok(Self::Med),
            "high" => Ok(Self::High),
            other => other
                .strip_prefix("k=")
                .and_then(|k| k.parse().ok())
                .filter(|k: &usize| *k >= 1)
                .map(Self::Fixed)
                .ok_or_else(|| CssError::Config(format!("unknown specificity {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub ref_id: usize,
    pub target_id: usize,
    pub changed_slots: Vec<usize>,
    pub mentioned_slots: Vec<usize>,
    pub caption_tokens: Vec<usize>,
    pub valid_ids: Vec<usize>,
}

/// Exhaustive valid-match scan: items matching `target` on every mentioned
/// slot whose Hamming distance to `reference` over the unmentioned slots is
/// at most `changed - mentioned.len()`.
pub fn valid_set(catalog: &Catalog, reference: &[usize], target: &[usize], changed: usize, mentioned: &[usize]) -> Vec<usize> {
    let slack = changed.saturating_sub(mentioned.len());
    let is_mentioned: Vec<bool> = (0..catalog.schema.n_slots()).map(|s| mentioned.contains(&s)).collect();
    catalog
        .items
        .iter()
        .filter(|item| {
            let mut dev = 0;
            for (s, &v) in item.attrs.iter().enumerate() {
                if is_mentioned[s] {
                    if v != target[s] {
                        return false;
                    }
                } else if v != reference[s] {
                    dev += 1;
                }
            }
            dev <= slack
        })
        .map(|item| item.id)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletSpec {
    pub count: usize,
    /// Relative weight of changing `j = i + 1` slots.
    pub j_weights: Vec<f64>,
    pub specificity: Specificity,
    pub seed: u64,
}

impl TripletSpec {
    /// Uniform over `1..=j_max`.
    pub fn uniform(count: usize, j_max: usize, specificity: Specificity, seed: u64) -> Self {
        Self {
            count,
            j_weights: vec![1.0; j_max.max(1)],
            specificity,
            seed,
        }
    }
}

const MAX_ATTEMPTS_PER_TRIPLET: usize = 1000;

pub fn generate_triplets(catalog: &Catalog, spec: &TripletSpec) -> Result<Vec<Triplet>> {
    if catalog.is_empty() {
        return Err(CssError::NoTriplet("empty catalog".into()));
    }
    let n_slots = catalog.schema.n_slots();
    let weights: Vec<f64> = spec.j_weights.iter().take(n_slots).copied().collect();
    let j_dist = WeightedIndex::new(&weights).map_err(|e| CssError::Config(format!("change-count weights: {e}")))?;

    let mut out = Vec::with_capacity(spec.count);
    for t in 0..spec.count {
        let mut rng = rng_for(spec.seed, "triplet", t as u64);
        let mut formed = None;
        for _ in 0..MAX_ATTEMPTS_PER_TRIPLET {
            let reference = &catalog.items[rng.random_range(0..catalog.len())];
            let j = j_dist.sample(&mut rng) + 1;
            let mut changed: Vec<usize> = sample(&mut rng, n_slots, j).into_vec();
            changed.sort_unstable();
            let candidates: Vec<usize> = catalog
                .items
                .iter()
                .filter(|item| {
                    item.attrs.iter().zip(&reference.attrs).enumerate().all(|(s, (a, r))| {
                        if changed.contains(&s) {
                            a != r
                        } else {
                            a == r
                        }
                    })
                })
                .map(|item| item.id)
                .collect();
            if candidates.is_empty() {
                continue;
            }
            let target_id = candidates[rng.random_range(0..candidates.len())];
            let k = spec.specificity.mentions(j);
            let mut mentioned: Vec<usize> = sample(&mut rng, j, k).into_iter().map(|i| changed[i]).collect();
            mentioned.sort_unstable();
            let target = &catalog.items[target_id];
            let mentions: Vec<(usize, usize)> = mentioned.iter().map(|&s| (s, target.attrs[s])).collect();
            let caption_tokens = catalog.schema.encode_caption(&mentions);
            let valid_ids = valid_set(catalog, &reference.attrs, &target.attrs, j, &mentioned);
            formed = Some(Triplet {
                ref_id: reference.id,
                target_id,
                changed_slots: changed,
                mentioned_slots: mentioned,
                caption_tokens,
                valid_ids,
            });
            break;
        }
        match formed {
            Some(tr) => out.push(tr),
            None => {
                return Err(CssError::NoTriplet(format!(
                    "no catalog item realizes a sampled target after {MAX_ATTEMPTS_PER_TRIPLET} attempts"
                )))
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityStats {
    pub n_triplets: usize,
    pub mean_valid_set_size: f64,
    pub fraction_with_multiple_matches: f64,
    /// valid-set size -> number of triplets
    pub histogram: BTreeMap<usize, usize>,
}

pub fn ambiguity_stats(triplets: &[Triplet]) -> Result<AmbiguityStats> {
    if triplets.is_empty() {
        return Err(CssError::contract("ambiguity statistics need at least one triplet"));
    }
    let mut histogram = BTreeMap::new();
    for t in triplets {
        *histogram.entry(t.valid_ids.len()).or_insert(0) += 1;
    }
    let n = triplets.len() as f64;
    let total: usize = triplets.iter().map(|t| t.valid_ids.len()).sum();
    let multi = triplets.iter().filter(|t| t.valid_ids.len() > 1).count();
    Ok(AmbiguityStats {
        n_triplets: triplets.len(),
        mean_valid_set_size: total as f64 / n,
        fraction_with_multiple_matches: multi as f64 / n,
        histogram,
    })
}

/// Distinct target ids in first-seen order.
pub fn distinct_targets(triplets: &[Triplet]) -> Vec<usize> {
    let mut seen = BTreeSet::new();
    triplets.iter().filter(|t| seen.insert(t.target_id)).map(|t| t.target_id).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_schema() -> AttributeSchema {
        AttributeSchema::new(vec![
            Slot { name: "a".into(), cardinality: 2 },
            Slot { name: "b".into(), cardinality: 2 },
            Slot { name: "c".into(), cardinality: 2 },
        ])
        .unwrap()
    }

    #[test]
    fn vocabulary_layout() {
        let s = AttributeSchema::default_schema();
        assert_eq!(s.vocab()[PAD], "<pad>");
        assert_eq!(s.vocab_size(), 5 + 5 + 8 + 6 + 5 + 4 + 4);
        assert_eq!(s.tuple_space(), 3840);
        assert_eq!(s.token_text(s.value_token(1, 3)).unwrap(), "pattern_3");
        assert!(matches!(s.token_text(999), Err(CssError::Vocabulary(999))));
    }

    #[test]
    fn caption_round_trip() {
        let s = AttributeSchema::default_schema();
        let mentions = vec![(0, 7), (3, 1), (4, 0)];
        let toks = s.encode_caption(&mentions);
        assert_eq!(toks.len(), 15);
        assert_eq!(s.decode_caption(&toks).unwrap(), mentions);
        assert_eq!(
            s.caption_text(&s.encode_caption(&[(0, 2)])).unwrap(),
            "change color to color_2 <end>"
        );
        assert!(s.decode_caption(&toks[..14]).is_err());
    }

    #[test]
    fn empty_catalog() {
        let c = generate_catalog(&AttributeSchema::default_schema(), RenderConfig::default(), 0, true, 1).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn capacity_error() {
        let err = generate_catalog(&small_schema(), RenderConfig::default(), 9, true, 1).unwrap_err();
        assert!(matches!(err, CssError::Capacity { requested: 9, available: 8 }));
        assert!(generate_catalog(&small_schema(), RenderConfig::default(), 9, false, 1).is_ok());
    }

    #[test]
    fn rendering_is_pure() {
        let c = generate_catalog(&AttributeSchema::default_schema(), RenderConfig::default(), 20, true, 5).unwrap();
        let r = Renderer::new(&c.schema, c.render, c.seed);
        for item in &c.items {
            assert_eq!(r.render(item.id, &item.attrs), item.patches);
        }
    }

    #[test]
    fn noiseless_rendering_depends_only_on_attrs() {
        let render = RenderConfig { noise: 0.0, ..RenderConfig::default() };
        let schema = AttributeSchema::default_schema();
        let c = Catalog::from_tuples(schema, render, 3, vec![vec![1, 2, 3, 0, 1], vec![1, 2, 3, 0, 1]]).unwrap();
        assert_eq!(c.items[0].patches, c.items[1].patches);
    }

    #[test]
    fn specificity_parsing() {
        assert_eq!("low".parse::<Specificity>().unwrap(), Specificity::Low);
        assert_eq!("k=2".parse::<Specificity>().unwrap(), Specificity::Fixed(2));
        assert!("k=0".parse::<Specificity>().is_err());
        assert!("bogus".parse::<Specificity>().is_err());
        assert_eq!(Specificity::Med.mentions(3), 2);
        assert_eq!(Specificity::Fixed(5).mentions(2), 2);
    }

    #[test]
    fn stats_arithmetic() {
        let t = |n: usize| Triplet {
            ref_id: 0,
            target_id: 0,
            changed_slots: vec![0],
            mentioned_slots: vec![0],
            caption_tokens: vec![],
            valid_ids: (0..n).collect(),
        };
        let s = ambiguity_stats(&[t(1), t(1)]).unwrap();
        assert_eq!((s.mean_valid_set_size, s.fraction_with_multiple_matches), (1.0, 0.0));
        let s = ambiguity_stats(&[t(1), t(3)]).unwrap();
        assert_eq!((s.mean_valid_set_size, s.fraction_with_multiple_matches), (2.0, 0.5));
        assert_eq!(s.histogram.get(&3), Some(&1));
        assert!(ambiguity_stats(&[]).is_err());
    }
}
