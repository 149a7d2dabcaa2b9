//! Experiment configuration, the ablation suites and the full-model gradient check.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::compositors::Head;
use crate::corpus::{AttributeSchema, RenderConfig, Specificity};
use crate::dataset::{read_text, write_json, write_lines, Corpus, CorpusConfig};
use crate::error::{CssError, Result};
use crate::eval::{evaluate, recall_key, JointWeights, Metrics, DEFAULT_KS};
use crate::gradcheck::{check_gradients, GradCheckReport};
use crate::model::{Batch, Model, ModelConfig, ModelSettings};
use crate::objectives::{batch_posterior, consensus_log_target, total_loss_with_target, Classification, LossConfig};
use crate::seeds::{derive_seed, rng_for};
use crate::trainer::{Trainer, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Joint weights of IT_m, IT_h, TI_m, TI_h.
    pub alphas: [f64; 4],
    pub ks: Vec<usize>,
    /// Also write `rankings.csv` next to the metrics.
    pub rankings: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            alphas: [1.0, 0.5, 0.5, 0.5],
            ks: DEFAULT_KS.to_vec(),
            rankings: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub seeds: usize,
    pub first_seed: u64,
    /// Training schedule of every suite run; seeds and loss terms are set per run.
    pub train: TrainConfig,
    /// Specificity levels of the ambiguity and smoothing suites.
    pub specificities: Vec<Specificity>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seeds: 5,
            first_seed: 1,
            train: suite_profile(),
            specificities: vec![Specificity::Low, Specificity::Med, Specificity::High],
        }
    }
}

/// Short schedule for the many-run suites: one warm-up epoch and no decay.
pub fn suite_profile() -> TrainConfig {
    TrainConfig {
        epochs: 12,
        warmup_epochs: 1,
        decay_epochs: Some(Vec::new()),
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub width: usize,
    pub items: usize,
    pub batch: usize,
    pub n_patches: usize,
    pub patch_dim: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            width: 8,
            items: 24,
            batch: 2,
            n_patches: 2,
            patch_dim: 6,
            step: 1e-5,
            tolerance: 1e-4,
            seed: 3,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Attribute schema file; the built-in schema when absent.
    pub schema: Option<PathBuf>,
    pub data: CorpusConfig,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub suite: SuiteConfig,
    pub gradcheck: GradcheckConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&read_text(path)?).map_err(|e| CssError::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load_schema(&self) -> Result<AttributeSchema> {
        match &self.schema {
            Some(p) => AttributeSchema::from_json_str(&read_text(p)?),
            None => Ok(AttributeSchema::default_schema()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteName {
    Ambiguity,
    Smoothing,
    Losses,
    Pyramid,
    Joint,
}

impl SuiteName {
    pub const ALL: [SuiteName; 5] = [
        SuiteName::Ambiguity,
        SuiteName::Smoothing,
        SuiteName::Losses,
        SuiteName::Pyramid,
        SuiteName::Joint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SuiteName::Ambiguity => "ambiguity",
            SuiteName::Smoothing => "smoothing",
            SuiteName::Losses => "losses",
            SuiteName::Pyramid => "pyramid",
            SuiteName::Joint => "joint",
        }
    }
}

impl fmt::Display for SuiteName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SuiteName {
    type Err = CssError;

    fn from_str(s: &str) -> Result<Self> {
        SuiteName::ALL
            .into_iter()
            .find(|n| n.name() == s)
            .ok_or_else(|| CssError::Config(format!("unknown suite {s:?}")))
    }
}

/// One trained configuration of a suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    pub loss: LossConfig,
    pub low_head: bool,
    /// Joint weights used for this variant's headline numbers.
    pub weights: JointWeights,
}

impl Variant {
    fn consensus(label: &str, heads: &[Head], kl: bool) -> Self {
        Self {
            label: label.to_string(),
            loss: LossConfig {
                heads: heads.to_vec(),
                kl,
                ..LossConfig::default()
            },
            low_head: false,
            weights: JointWeights::from_alphas(&EvalConfig::default().alphas).restricted_to(heads),
        }
    }

    /// A single IT_h head trained with batch or global classification.
    pub fn single(classification: Classification, smoothing: f64) -> Self {
        let name = match classification {
            Classification::Batch => "bbc",
            Classification::Global => "gwc",
        };
        let label = if smoothing > 0.0 {
            format!("{name}+ls{smoothing}")
        } else {
            name.to_string()
        };
        Self {
            label,
            loss: LossConfig {
                heads: vec![Head::ItHigh],
                kl: false,
                classification,
                smoothing,
                ..LossConfig::default()
            },
            low_head: false,
            weights: JointWeights::equal(&[Head::ItHigh]),
        }
    }

    /// Image-text heads only, scored as an equal-weight group.
    pub fn pyramid(label: &str, heads: &[Head]) -> Self {
        Self {
            label: label.to_string(),
            loss: LossConfig {
                heads: heads.to_vec(),
                kl: false,
                ..LossConfig::default()
            },
            low_head: heads.contains(&Head::ItLow),
            weights: JointWeights::equal(heads),
        }
    }

    pub fn full() -> Self {
        Self::consensus("full", &Head::CONSENSUS, true)
    }

    /// The cumulative loss ablation: IT_h, +IT_m, +TI, +KL.
    pub fn loss_ladder() -> Vec<Self> {
        use Head::*;
        vec![
            Self::consensus("L_IT_h", &[ItHigh], false),
            Self::consensus("+L_IT_m", &[ItMid, ItHigh], false),
            Self::consensus("+L_TI", &[ItMid, ItHigh, TiMid, TiHigh], false),
            Self::consensus("+L_KL", &Head::CONSENSUS, true),
        ]
    }

    pub fn pyramid_rows() -> Vec<Self> {
        use Head::*;
        vec![
            Self::pyramid("IT_h", &[ItHigh]),
            Self::pyramid("IT_l+IT_h", &[ItLow, ItHigh]),
            Self::pyramid("IT_l+IT_m+IT_h", &[ItLow, ItMid, ItHigh]),
            Self::pyramid("IT_m+IT_h", &[ItMid, ItHigh]),
        ]
    }
}

/// Outcome of training and evaluating one variant with one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub setting: String,
    pub variant: String,
    pub seed: u64,
    pub first_loss: f64,
    pub final_loss: f64,
    pub metrics: Metrics,
}

/// Trains `variant` on `corpus.train` and evaluates on `corpus.test`.
pub fn run_variant(
    corpus: &Corpus,
    settings: &ModelSettings,
    profile: &TrainConfig,
    variant: &Variant,
    seed: u64,
    ks: &[usize],
) -> Result<RunOutcome> {
    let settings = ModelSettings {
        low_head: variant.low_head,
        ..settings.clone()
    };
    let model_cfg = ModelConfig::from_settings(corpus.schema(), &corpus.config.render, &settings);
    let train_cfg = TrainConfig {
        seed,
        loss: variant.loss.clone(),
        ..profile.clone()
    };
    let mut trainer = Trainer::new(model_cfg, train_cfg, &corpus.catalog, &corpus.train)?;
    trainer.run(|_| {})?;
    let log = trainer.log();
    let (first_loss, final_loss) = (log[0].total, log[log.len() - 1].total);
    let mut metrics = evaluate(&trainer.model, &corpus.catalog, &corpus.test, &variant.weights, ks)?.metrics;
    let trained = &variant.loss.heads;
    metrics.per_head.retain(|h, _| trained.contains(h));
    metrics.ambiguity_per_head.retain(|h, _| trained.contains(h));
    Ok(RunOutcome {
        setting: corpus.config.specificity.to_string(),
        variant: variant.label.clone(),
        seed,
        first_loss,
        final_loss,
        metrics,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> Stat {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Stat { mean, std }
}

/// Aggregated numbers for one (setting, variant) row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub setting: String,
    pub variant: String,
    pub seeds: Vec<u64>,
    /// Headline recall per K, one value per seed.
    pub joint: BTreeMap<String, Vec<f64>>,
    pub ambiguity_joint: BTreeMap<String, Vec<f64>>,
    /// Per-head recall per K, one value per seed.
    pub per_head: BTreeMap<Head, BTreeMap<String, Vec<f64>>>,
    pub summary: BTreeMap<String, Stat>,
}

impl SuiteRow {
    pub fn joint_values(&self, k: usize) -> &[f64] {
        &self.joint[&recall_key(k)]
    }

    pub fn joint_mean(&self, k: usize) -> f64 {
        mean_std(self.joint_values(k)).mean
    }

    pub fn head_mean(&self, head: Head, k: usize) -> Option<f64> {
        self.per_head.get(&head).map(|t| mean_std(&t[&recall_key(k)]).mean)
    }
}

fn collect_rows(runs: &[RunOutcome], ks: &[usize]) -> Vec<SuiteRow> {
    let mut rows: Vec<SuiteRow> = Vec::new();
    for run in runs {
        let idx = match rows.iter().position(|r| r.setting == run.setting && r.variant == run.variant) {
            Some(i) => i,
            None => {
                rows.push(SuiteRow {
                    setting: run.setting.clone(),
                    variant: run.variant.clone(),
                    seeds: Vec::new(),
                    joint: BTreeMap::new(),
                    ambiguity_joint: BTreeMap::new(),
                    per_head: BTreeMap::new(),
                    summary: BTreeMap::new(),
                });
                rows.len() - 1
            }
        };
        let row = &mut rows[idx];
        row.seeds.push(run.seed);
        let m = &run.metrics;
        for &k in ks {
            let key = recall_key(k);
            row.joint.entry(key.clone()).or_default().push(m.joint[&key]);
            row.ambiguity_joint.entry(key.clone()).or_default().push(m.ambiguity_joint[&key]);
            for (&head, table) in &m.per_head {
                row.per_head
                    .entry(head)
                    .or_default()
                    .entry(key.clone())
                    .or_default()
                    .push(table[&key]);
            }
        }
    }
    for row in &mut rows {
        for (key, values) in &row.joint {
            row.summary.insert(key.clone(), mean_std(values));
        }
        for (key, values) in &row.ambiguity_joint {
            row.summary.insert(format!("ambiguity {key}"), mean_std(values));
        }
        for (head, table) in &row.per_head {
            for (key, values) in table {
                row.summary.insert(format!("{head} {key}"), mean_std(values));
            }
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: SuiteName,
    pub train: TrainConfig,
    pub ks: Vec<usize>,
    pub rows: Vec<SuiteRow>,
    pub runs: Vec<RunOutcome>,
}

impl SuiteReport {
    pub fn row(&self, setting: &str, variant: &str) -> Option<&SuiteRow> {
        self.rows.iter().find(|r| r.setting == setting && r.variant == variant)
    }

    /// `setting,variant,metric,mean,std,values...` for every summary entry.
    pub fn table(&self) -> Vec<String> {
        let mut lines = vec!["setting,variant,metric,mean,std".to_string()];
        for row in &self.rows {
            for (metric, stat) in &row.summary {
                lines.push(format!("{},{},{metric},{:.4},{:.4}", row.setting, row.variant, stat.mean, stat.std));
            }
        }
        lines
    }

    /// Writes `report.json`, `table.csv` and one `metrics.json` per run.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| CssError::io(format!("creating {}", dir.display()), e))?;
        write_json(&dir.join("report.json"), self)?;
        write_lines(&dir.join("table.csv"), &self.table())?;
        for run in &self.runs {
            let name = format!("{}-{}-seed{}", run.setting, run.variant, run.seed).replace(['+', ' '], "_");
            let run_dir = dir.join("runs").join(name);
            std::fs::create_dir_all(&run_dir).map_err(|e| CssError::io(format!("creating {}", run_dir.display()), e))?;
            run.metrics.save(&run_dir.join("metrics.json"))?;
        }
        Ok(())
    }
}

/// Worker count: `CSSNET_THREADS` when set, else the available cores.
pub fn worker_count() -> usize {
    std::env::var("CSSNET_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// The corpus used for one specificity level of a suite: the base corpus
/// itself, or a regeneration with only the specificity changed.
pub fn corpus_at(base: &Corpus, specificity: Specificity) -> Result<Corpus> {
    if base.config.specificity == specificity {
        return Ok(base.clone());
    }
    let config = CorpusConfig {
        specificity,
        ..base.config.clone()
    };
    Corpus::generate(base.schema(), &config)
}

/// Jobs of a suite as (corpus index, variant) pairs plus the corpora.
fn suite_plan(name: SuiteName, base: &Corpus, cfg: &SuiteConfig) -> Result<(Vec<Corpus>, Vec<(usize, Variant)>)> {
    let mut corpora = Vec::new();
    let mut jobs = Vec::new();
    match name {
        SuiteName::Ambiguity | SuiteName::Smoothing => {
            let eps: &[f64] = if name == SuiteName::Smoothing { &[0.0, 0.1] } else { &[0.0] };
            for &spec in &cfg.specificities {
                corpora.push(corpus_at(base, spec)?);
                for &e in eps {
                    for cls in [Classification::Batch, Classification::Global] {
                        jobs.push((corpora.len() - 1, Variant::single(cls, e)));
                    }
                }
            }
        }
        SuiteName::Losses => {
            corpora.push(base.clone());
            jobs.extend(Variant::loss_ladder().into_iter().map(|v| (0, v)));
        }
        SuiteName::Pyramid => {
            corpora.push(base.clone());
            jobs.extend(Variant::pyramid_rows().into_iter().map(|v| (0, v)));
        }
        SuiteName::Joint => {
            corpora.push(base.clone());
            jobs.push((0, Variant::full()));
        }
    }
    Ok((corpora, jobs))
}

/// Runs every (variant, seed) of a suite; replicas may run in parallel, and
/// the report is assembled in job order.
pub fn run_suite(name: SuiteName, base: &Corpus, settings: &ModelSettings, cfg: &SuiteConfig, ks: &[usize]) -> Result<SuiteReport> {
    if cfg.seeds == 0 {
        return Err(CssError::Config("a suite needs at least one seed".into()));
    }
    let (corpora, jobs) = suite_plan(name, base, cfg)?;
    let seeds: Vec<u64> = (0..cfg.seeds as u64).map(|i| cfg.first_seed + i).collect();
    let work: Vec<(usize, &Variant, u64)> = jobs
        .iter()
        .flat_map(|(c, v)| seeds.iter().map(move |&s| (*c, v, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| CssError::Config(format!("thread pool: {e}")))?;
    let runs: Vec<RunOutcome> = pool.install(|| {
        work.par_iter()
            .map(|&(c, v, s)| run_variant(&corpora[c], settings, &cfg.train, v, s, ks))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(SuiteReport {
        suite: name,
        train: cfg.train.clone(),
        ks: ks.to_vec(),
        rows: collect_rows(&runs, ks),
        runs,
    })
}

/// Gradient check of a tiny model with every default loss term active.
pub fn full_model_gradcheck(cfg: &GradcheckConfig) -> Result<GradCheckReport> {
    let schema = AttributeSchema::default_schema();
    let corpus_cfg = CorpusConfig {
        items: cfg.items,
        triplets: cfg.batch,
        queries: 1,
        j_max: 2,
        specificity: Specificity::Low,
        unique_tuples: true,
        seed: cfg.seed,
        render: RenderConfig {
            n_patches: cfg.n_patches,
            patch_dim: cfg.patch_dim,
            noise: 0.05,
        },
    };
    let corpus = Corpus::generate(&schema, &corpus_cfg)?;
    let model_cfg = ModelConfig::from_settings(&schema, &corpus_cfg.render, &ModelSettings::uniform(cfg.width));
    let mut model = Model::new(model_cfg, derive_seed(cfg.seed, "gradcheck", 0));
    // zero biases put dead ReLU rows exactly on the kink
    let mut rng = rng_for(cfg.seed, "gradcheck-bias", 0);
    let biases: Vec<_> = model.store.iter().filter(|(_, p)| p.name.ends_with(".b")).map(|(id, _)| id).collect();
    for id in biases {
        for v in model.store.value_mut(id).data_mut() {
            *v = rng.random_range(-0.1..0.1);
        }
    }
    let picked: Vec<_> = corpus.train.iter().collect();
    let batch = Batch::from_triplets(&corpus.catalog, &picked, true)?;
    let loss = LossConfig::default();
    let mut g = Graph::new();
    let out = model.forward(&mut g, &batch, &[Head::ItMid, Head::ItHigh], &[Head::ItMid, Head::ItHigh])?;
    let p_m = batch_posterior(&mut g, out.queries[&Head::ItMid], out.targets[&Head::ItMid], loss.scale)?;
    let p_h = batch_posterior(&mut g, out.queries[&Head::ItHigh], out.targets[&Head::ItHigh], loss.scale)?;
    let log_pw = consensus_log_target(g.value(p_m), g.value(p_h), &loss.weights)?;
    check_gradients(&model.store, cfg.step, |g: &mut Graph, store| {
        let m = Model {
            store: store.clone(),
            ..model.clone()
        };
        Ok(total_loss_with_target(g, &m, &batch, &loss, Some(&log_pw))?.0)
    })
}
