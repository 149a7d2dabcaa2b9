//! A generated corpus (catalog plus train/test triplets) and its on-disk form.
//!
//! Files in a data directory:
//! - `schema.json`: slots, cardinalities, vocabulary table
//! - `catalog.jsonl`: `{id, attrs, patches}` per item
//! - `triplets.jsonl`: `{ref, target, caption_tokens, caption_text, mentioned, valid, changed, split}`
//! - `ambiguity_stats.json`: valid-set statistics of the training split
//! - `corpus.json`: the generation settings

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{
    ambiguity_stats, generate_catalog, generate_triplets, AmbiguityStats, AttributeSchema, Catalog, RenderConfig,
    Specificity, Triplet, TripletSpec,
};
use crate::error::{CssError, Result};
use crate::seeds::{derive_seed, f17_vec, F17};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub items: usize,
    pub triplets: usize,
    /// Held-out evaluation queries.
    pub queries: usize,
    pub j_max: usize,
    pub specificity: Specificity,
    pub unique_tuples: bool,
    pub seed: u64,
    pub render: RenderConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            items: 500,
            triplets: 4000,
            queries: 1000,
            j_max: 3,
            specificity: Specificity::Low,
            unique_tuples: true,
            seed: 7,
            render: RenderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub catalog: Catalog,
    pub train: Vec<Triplet>,
    pub test: Vec<Triplet>,
}

impl Corpus {
    pub fn generate(schema: &AttributeSchema, config: &CorpusConfig) -> Result<Self> {
        let catalog = generate_catalog(schema, config.render, config.items, config.unique_tuples, config.seed)?;
        let spec = |count, stream| {
            TripletSpec::uniform(count, config.j_max, config.specificity, derive_seed(config.seed, stream, 0))
        };
        let train = generate_triplets(&catalog, &spec(config.triplets, "train"))?;
        let test = generate_triplets(&catalog, &spec(config.queries, "test"))?;
        Ok(Self {
            config: config.clone(),
            catalog,
            train,
            test,
        })
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.catalog.schema
    }

    pub fn train_stats(&self) -> Result<AmbiguityStats> {
        ambiguity_stats(&self.train)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CssError::io(format!("creating {}", dir.display()), e))?;
        write_json(&dir.join("schema.json"), &self.schema().to_json())?;
        write_json(&dir.join("corpus.json"), &self.config)?;

        let mut lines = Vec::with_capacity(self.catalog.len());
        for item in &self.catalog.items {
            let patches: Vec<Vec<F17>> = (0..item.patches.rows()).map(|r| f17_vec(item.patches.row(r))).collect();
            let rec = ItemOut {
                id: item.id,
                attrs: &item.attrs,
                patches,
            };
            lines.push(serde_json::to_string(&rec).map_err(|e| CssError::json("catalog record", e))?);
        }
        write_lines(&dir.join("catalog.jsonl"), &lines)?;

        let mut lines = Vec::with_capacity(self.train.len() + self.test.len());
        for (split, set) in [("train", &self.train), ("test", &self.test)] {
            for t in set {
                let rec = TripletRecord {
                    ref_id: t.ref_id,
                    target: t.target_id,
                    caption_tokens: t.caption_tokens.clone(),
                    caption_text: self.schema().caption_text(&t.caption_tokens)?,
                    mentioned: t.mentioned_slots.clone(),
                    changed: t.changed_slots.clone(),
                    valid: t.valid_ids.clone(),
                    split: split.to_string(),
                };
                lines.push(serde_json::to_string(&rec).map_err(|e| CssError::json("triplet record", e))?);
            }
        }
        write_lines(&dir.join("triplets.jsonl"), &lines)?;
        write_json(&dir.join("ambiguity_stats.json"), &self.train_stats()?)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let schema = AttributeSchema::from_json_str(&read_text(&dir.join("schema.json"))?)?;
        let config: CorpusConfig = serde_json::from_str(&read_text(&dir.join("corpus.json"))?)
            .map_err(|e| CssError::json("corpus.json", e))?;

        let mut items = Vec::new();
        for (i, line) in read_lines(&dir.join("catalog.jsonl"))?.into_iter().enumerate() {
            let rec: ItemIn = serde_json::from_str(&line).map_err(|e| CssError::json(format!("catalog.jsonl line {}", i + 1), e))?;
            if rec.id != i {
                return Err(CssError::Config(format!("catalog ids must be dense; line {} has id {}", i + 1, rec.id)));
            }
            let patches = Tensor::from_rows(&rec.patches)?;
            items.push(crate::corpus::Item {
                id: rec.id,
                attrs: rec.attrs,
                patches,
            });
        }
        let catalog = Catalog {
            schema,
            render: config.render,
            seed: config.seed,
            items,
        };

        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, line) in read_lines(&dir.join("triplets.jsonl"))?.into_iter().enumerate() {
            let rec: TripletRecord =
                serde_json::from_str(&line).map_err(|e| CssError::json(format!("triplets.jsonl line {}", i + 1), e))?;
            let t = Triplet {
                ref_id: rec.ref_id,
                target_id: rec.target,
                changed_slots: rec.changed,
                mentioned_slots: rec.mentioned,
                caption_tokens: rec.caption_tokens,
                valid_ids: rec.valid,
            };
            if t.ref_id >= catalog.len() || t.target_id >= catalog.len() {
                return Err(CssError::Config(format!("triplets.jsonl line {} references a missing item", i + 1)));
            }
            match rec.split.as_str() {
                "train" => train.push(t),
                "test" => test.push(t),
                other => return Err(CssError::Config(format!("unknown split {other:?}"))),
            }
        }
        Ok(Self {
            config,
            catalog,
            train,
            test,
        })
    }
}

#[derive(Serialize)]
struct ItemOut<'a> {
    id: usize,
    attrs: &'a [usize],
    patches: Vec<Vec<F17>>,
}

#[derive(Deserialize)]
struct ItemIn {
    id: usize,
    attrs: Vec<usize>,
    patches: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct TripletRecord {
    #[serde(rename = "ref")]
    ref_id: usize,
    target: usize,
    caption_tokens: Vec<usize>,
    caption_text: String,
    mentioned: Vec<usize>,
    #[serde(default)]
    changed: Vec<usize>,
    valid: Vec<usize>,
    #[serde(default = "default_split")]
    split: String,
}

fn default_split() -> String {
    "train".into()
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(CssError::MissingInput(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| CssError::io(format!("reading {}", path.display()), e))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    if !path.exists() {
        return Err(CssError::MissingInput(path.to_path_buf()));
    }
    let f = fs::File::open(path).map_err(|e| CssError::io(format!("opening {}", path.display()), e))?;
    BufReader::new(f)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| CssError::io(format!("reading {}", path.display()), e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CssError::json(path.display().to_string(), e))?;
    fs::write(path, text + "\n").map_err(|e| CssError::io(format!("writing {}", path.display()), e))
}

pub(crate) fn write_json_compact<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string(value).map_err(|e| CssError::json(path.display().to_string(), e))?;
    fs::write(path, text + "\n").map_err(|e| CssError::io(format!("writing {}", path.display()), e))
}

pub(crate) fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| CssError::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(f);
    for l in lines {
        writeln!(w, "{l}").map_err(|e| CssError::io(format!("writing {}", path.display()), e))?;
    }
    w.flush().map_err(|e| CssError::io(format!("writing {}", path.display()), e))
}
