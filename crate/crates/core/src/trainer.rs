//! Seeded mini-batch training with Adam, linear warm-up and step decay.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::compositors::Head;
use crate::corpus::{distinct_targets, Catalog, Triplet};
use crate::dataset::{read_text, write_json_compact};
use crate::error::{CssError, Result};
use crate::model::{Batch, Model, ModelConfig};
use crate::objectives::{term_name, total_loss, Classification, LossConfig, KL_TERM};
use crate::optim::{Adam, AdamState};
use crate::params::{ParamGroup, ParamId};
use crate::seeds::rng_for;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "cssnet-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Base rate of every non-text parameter.
    pub lr: f64,
    pub text_lr: f64,
    pub warmup_epochs: usize,
    /// Epochs at which the rate drops by `decay_factor`. `None` places them
    /// at 35/50 and 45/50 of the run.
    pub decay_epochs: Option<Vec<usize>>,
    pub decay_factor: f64,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 30,
            lr: 1e-3,
            text_lr: 1e-4,
            warmup_epochs: 5,
            decay_epochs: None,
            decay_factor: 0.1,
            seed: 1,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    /// The published schedule, kept for reference; it assumes pretrained
    /// backbones and does not train well from scratch.
    pub fn full_scale() -> Self {
        Self {
            batch_size: 30,
            epochs: 50,
            lr: 2e-5,
            text_lr: 2e-6,
            ..Self::default()
        }
    }

    pub fn decay_schedule(&self) -> Vec<usize> {
        match &self.decay_epochs {
            Some(d) => d.clone(),
            None => [35, 45]
                .iter()
                .map(|&d| ((d * self.epochs) as f64 / 50.0).round() as usize)
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || self.epochs == 0 {
            return Err(CssError::Config("batch size must be at least 2 and epochs positive".into()));
        }
        if !(self.lr > 0.0 && self.text_lr > 0.0 && self.decay_factor > 0.0) {
            return Err(CssError::Config("learning rates and decay factor must be positive".into()));
        }
        let decay = self.decay_schedule();
        match (decay.iter().min(), decay.iter().max()) {
            (Some(&lo), Some(&hi)) if self.warmup_epochs >= lo || hi >= self.epochs => {
                return Err(CssError::Config(format!(
                    "schedule needs warmup ({}) < first decay ({lo}) and last decay ({hi}) < epochs ({})",
                    self.warmup_epochs, self.epochs
                )))
            }
            (None, _) if self.warmup_epochs > self.epochs => {
                return Err(CssError::Config("warm-up longer than the run".into()));
            }
            _ => {}
        }
        self.loss.validate()
    }

    /// Learning-rate multiplier for `epoch`.
    pub fn lr_multiplier(&self, epoch: usize) -> f64 {
        lr_schedule(epoch, self.warmup_epochs, &self.decay_schedule(), self.decay_factor)
    }
}

/// `min(1, (epoch + 1) / warmup)` times `factor` per decay epoch already reached.
pub fn lr_schedule(epoch: usize, warmup: usize, decay_epochs: &[usize], factor: f64) -> f64 {
    let warm = if warmup == 0 {
        1.0
    } else {
        ((epoch + 1) as f64 / warmup as f64).min(1.0)
    };
    let drops = decay_epochs.iter().filter(|&&d| epoch >= d).count();
    warm * factor.powi(drops as i32)
}

/// Mean loss terms over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    #[serde(rename = "L_IT_l", default, skip_serializing_if = "Option::is_none")]
    pub l_it_l: Option<f64>,
    #[serde(rename = "L_IT_m")]
    pub l_it_m: Option<f64>,
    #[serde(rename = "L_IT_h")]
    pub l_it_h: Option<f64>,
    #[serde(rename = "L_TI_m")]
    pub l_ti_m: Option<f64>,
    #[serde(rename = "L_TI_h")]
    pub l_ti_h: Option<f64>,
    #[serde(rename = "L_KL")]
    pub l_kl: Option<f64>,
    pub total: f64,
    pub steps: usize,
}

impl EpochLog {
    fn from_sums(epoch: usize, lr: f64, sums: &BTreeMap<String, f64>, total: f64, steps: usize) -> Self {
        let mean = |name: String| sums.get(&name).map(|s| s / steps as f64);
        Self {
            epoch,
            lr,
            l_it_l: mean(term_name(Head::ItLow)),
            l_it_m: mean(term_name(Head::ItMid)),
            l_it_h: mean(term_name(Head::ItHigh)),
            l_ti_m: mean(term_name(Head::TiMid)),
            l_ti_h: mean(term_name(Head::TiHigh)),
            l_kl: mean(KL_TERM.to_string()),
            total: total / steps as f64,
            steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedAdam {
    pub name: String,
    pub state: AdamState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeRows {
    pub head: Head,
    pub ids: Vec<usize>,
}

/// Shuffling is re-derived from the seed at each epoch, so the seed and the
/// next epoch index are the whole generator state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShuffleState {
    pub seed: u64,
    pub next_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epochs_completed: usize,
    pub rng: ShuffleState,
    pub params: Vec<NamedArray>,
    pub optimizer: Vec<NamedAdam>,
    pub prototypes: Vec<PrototypeRows>,
    pub log: Vec<EpochLog>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json_compact(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| CssError::json(format!("checkpoint {}", path.display()), e))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(CssError::Config(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        Ok(ckpt)
    }

    /// Rebuilds the trained model.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(self.model.clone(), self.train.seed);
        for p in &self.prototypes {
            let zeros = Tensor::zeros(&[p.ids.len(), self.model.embed_dim]);
            model.attach_prototypes(p.head, p.ids.clone(), zeros)?;
        }
        let values = self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        model.load_values(&values)?;
        Ok(model)
    }
}

pub struct Trainer<'a> {
    pub model: Model,
    pub config: TrainConfig,
    optimizer: Adam,
    catalog: &'a Catalog,
    triplets: &'a [Triplet],
    log: Vec<EpochLog>,
    next_epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(model_config: ModelConfig, config: TrainConfig, catalog: &'a Catalog, triplets: &'a [Triplet]) -> Result<Self> {
        config.validate()?;
        model_config.check_corpus(catalog)?;
        if triplets.len() < config.batch_size {
            return Err(CssError::contract(format!(
                "{} training triplets for a batch size of {}",
                triplets.len(),
                config.batch_size
            )));
        }
        let mut model = Model::new(model_config, config.seed);
        if config.loss.classification == Classification::Global {
            let ids = distinct_targets(triplets);
            let patches = stack_patches(catalog, &ids)?;
            let init = model.embed_targets(&patches, &config.loss.heads)?;
            for (head, table) in init {
                model.attach_prototypes(head, ids.clone(), table)?;
            }
        }
        let optimizer = Adam::for_store(&model.store);
        Ok(Self {
            model,
            config,
            optimizer,
            catalog,
            triplets,
            log: Vec::new(),
            next_epoch: 0,
        })
    }

    /// Continues from a checkpoint over the same data.
    pub fn resume(ckpt: &Checkpoint, catalog: &'a Catalog, triplets: &'a [Triplet]) -> Result<Self> {
        ckpt.train.validate()?;
        ckpt.model.check_corpus(catalog)?;
        let model = ckpt.model()?;
        let mut states = Vec::with_capacity(model.store.len());
        for ((_, p), saved) in model.store.iter().zip(&ckpt.optimizer) {
            if p.name != saved.name || p.value.numel() != saved.state.first_moment.len() {
                return Err(CssError::contract(format!("optimizer state for {} does not match", p.name)));
            }
            states.push(saved.state.clone());
        }
        if states.len() != model.store.len() || ckpt.optimizer.len() != model.store.len() {
            return Err(CssError::contract("optimizer state count does not match the model"));
        }
        if ckpt.rng.seed != ckpt.train.seed || ckpt.rng.next_epoch != ckpt.epochs_completed {
            return Err(CssError::contract("checkpoint shuffle state is inconsistent"));
        }
        Ok(Self {
            model,
            config: ckpt.train.clone(),
            optimizer: Adam { states },
            catalog,
            triplets,
            log: ckpt.log.clone(),
            next_epoch: ckpt.epochs_completed,
        })
    }

    pub fn epochs_completed(&self) -> usize {
        self.next_epoch
    }

    pub fn log(&self) -> &[EpochLog] {
        &self.log
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.triplets.len().div_ceil(self.config.batch_size)
    }

    /// Visiting order of triplets for `epoch`.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.triplets.len()).collect();
        order.shuffle(&mut rng_for(self.config.seed, "shuffle", epoch as u64));
        order
    }

    /// One pass over the data. The final batch wraps to the start of the
    /// order so every step sees `batch_size` triplets.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let epoch = self.next_epoch;
        if epoch >= self.config.epochs {
            return Err(CssError::contract(format!("all {} epochs already ran", self.config.epochs)));
        }
        let mult = self.config.lr_multiplier(epoch);
        let (lr, text_lr) = (self.config.lr * mult, self.config.text_lr * mult);
        let order = self.epoch_order(epoch);
        let (n, b) = (order.len(), self.config.batch_size);
        let steps = self.steps_per_epoch();
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut total = 0.0;
        for step in 0..steps {
            let picked: Vec<&Triplet> = (0..b).map(|i| &self.triplets[order[(step * b + i) % n]]).collect();
            let batch = Batch::from_triplets(self.catalog, &picked, true)?;
            let mut g = Graph::new();
            let (loss, breakdown) = total_loss(&mut g, &self.model, &batch, &self.config.loss)?;
            for (name, v) in &breakdown.terms {
                if !v.is_finite() {
                    return Err(CssError::Diverged { term: name.clone() });
                }
                *sums.entry(name.clone()).or_insert(0.0) += v;
            }
            total += breakdown.total;
            let grads = g.backward(loss)?;
            let store = &self.model.store;
            let groups: Vec<ParamGroup> = store.iter().map(|(_, p)| p.group).collect();
            let lr_of = |id: ParamId| match groups[id.0] {
                ParamGroup::Main => lr,
                ParamGroup::Text => text_lr,
            };
            self.optimizer.step(&mut self.model.store, &grads, lr_of)?;
            for table in self.model.prototypes.values() {
                table.renormalize(&mut self.model.store);
            }
        }
        let entry = EpochLog::from_sums(epoch, lr, &sums, total, steps);
        self.log.push(entry.clone());
        self.next_epoch += 1;
        Ok(entry)
    }

    /// Runs the remaining epochs, calling `on_epoch` after each.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochLog)) -> Result<()> {
        while self.next_epoch < self.config.epochs {
            let entry = self.run_epoch()?;
            on_epoch(&entry);
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let store = &self.model.store;
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            model: self.model.config.clone(),
            train: self.config.clone(),
            epochs_completed: self.next_epoch,
            rng: ShuffleState {
                seed: self.config.seed,
                next_epoch: self.next_epoch,
            },
            params: store
                .iter()
                .map(|(_, p)| NamedArray {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.clone(),
                })
                .collect(),
            optimizer: store
                .iter()
                .zip(&self.optimizer.states)
                .map(|((_, p), s)| NamedAdam {
                    name: p.name.clone(),
                    state: s.clone(),
                })
                .collect(),
            prototypes: self
                .model
                .prototypes
                .iter()
                .map(|(&head, t)| PrototypeRows {
                    head,
                    ids: t.ids.clone(),
                })
                .collect(),
            log: self.log.clone(),
        }
    }
}

/// Trains from scratch to completion.
pub fn train(model_config: ModelConfig, config: TrainConfig, catalog: &Catalog, triplets: &[Triplet]) -> Result<Checkpoint> {
    let mut trainer = Trainer::new(model_config, config, catalog, triplets)?;
    trainer.run(|_| {})?;
    Ok(trainer.checkpoint())
}

/// Patches of `ids` stacked as `[ids.len() * positions, patch_dim]`.
pub fn stack_patches(catalog: &Catalog, ids: &[usize]) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut cols = 0;
    let mut rows = 0;
    for &id in ids {
        let p = &catalog.item(id).patches;
        data.extend_from_slice(p.data());
        rows += p.rows();
        cols = p.cols();
    }
    Tensor::new(vec![rows, cols], data)
}
