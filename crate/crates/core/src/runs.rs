//! Run directories: what `train`, `eval` and `suite` leave on disk.
//!
//! A training run directory holds
//! - `config.json`: the full experiment configuration used
//! - `run.json`: command, data location and content digests of the data files
//! - `train_log.jsonl`: one [`EpochLog`] per epoch
//! - `checkpoint.json`: the final [`Checkpoint`]
//! - `metrics.json`: evaluation of the checkpoint on the held-out queries

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compositors::Head;
use crate::dataset::{write_json, write_lines, Corpus};
use crate::error::{CssError, Result};
use crate::eval::{evaluate, write_rankings, JointWeights, Metrics};
use crate::experiments::{run_suite, ExperimentConfig, SuiteName, SuiteReport};
use crate::model::ModelConfig;
use crate::trainer::{Checkpoint, EpochLog, Trainer};

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "run.json";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const RANKINGS_FILE: &str = "rankings.csv";

const DATA_FILES: [&str; 4] = ["schema.json", "corpus.json", "catalog.jsonl", "triplets.jsonl"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub data: PathBuf,
    /// SHA-256 of each corpus file, hex encoded.
    pub data_digest: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resumed_from: Option<PathBuf>,
}

pub fn data_digest(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for name in DATA_FILES {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CssError::MissingInput(path.clone()),
            _ => CssError::io(format!("reading {}", path.display()), e),
        })?;
        let hex: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
        out.insert(name.to_string(), hex);
    }
    Ok(out)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CssError::io(format!("creating {}", dir.display()), e))
}

fn write_manifest(out: &Path, command: &str, data: &Path, resumed_from: Option<&Path>) -> Result<()> {
    let manifest = RunManifest {
        command: command.to_string(),
        data: data.to_path_buf(),
        data_digest: data_digest(data)?,
        resumed_from: resumed_from.map(Path::to_path_buf),
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)
}

/// Joint weights from the four alphas, limited to the heads the model has.
pub fn weights_for(model_heads: &[Head], alphas: &[f64; 4]) -> Result<JointWeights> {
    let w = JointWeights::from_alphas(alphas).restricted_to(model_heads);
    w.validate()?;
    Ok(w)
}

/// Trains on `data` (or continues `resume`) and fills the run directory `out`.
pub fn train_run(
    cfg: &ExperimentConfig,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Metrics> {
    let corpus = Corpus::read(data)?;
    let checkpoint = resume.map(Checkpoint::load).transpose()?;
    create_dir(out)?;
    cfg.save(&out.join(CONFIG_FILE))?;
    write_manifest(out, "train", data, resume)?;

    let mut trainer = match &checkpoint {
        Some(ckpt) => Trainer::resume(ckpt, &corpus.catalog, &corpus.train)?,
        None => {
            let model_cfg = ModelConfig::from_settings(corpus.schema(), &corpus.config.render, &cfg.model);
            Trainer::new(model_cfg, cfg.train.clone(), &corpus.catalog, &corpus.train)?
        }
    };
    trainer.run(&mut on_epoch)?;
    let lines = trainer
        .log()
        .iter()
        .map(|e| serde_json::to_string(e).map_err(|err| CssError::json("epoch log", err)))
        .collect::<Result<Vec<_>>>()?;
    write_lines(&out.join(LOG_FILE), &lines)?;
    trainer.checkpoint().save(&out.join(CHECKPOINT_FILE))?;

    let heads = trainer.model.config.heads();
    let weights = weights_for(&heads, &cfg.eval.alphas)?;
    let ev = evaluate(&trainer.model, &corpus.catalog, &corpus.test, &weights, &cfg.eval.ks)?;
    ev.metrics.save(&out.join(METRICS_FILE))?;
    if cfg.eval.rankings {
        write_rankings(&out.join(RANKINGS_FILE), &corpus.test, &ev.joint_orderings)?;
    }
    Ok(ev.metrics)
}

/// Evaluates a checkpoint on the held-out queries of `data`.
pub fn eval_run(
    ckpt: &Path,
    data: &Path,
    alphas: &[f64; 4],
    ks: &[usize],
    out: &Path,
    rankings: Option<&Path>,
) -> Result<Metrics> {
    let checkpoint = Checkpoint::load(ckpt)?;
    let corpus = Corpus::read(data)?;
    checkpoint.model.check_corpus(&corpus.catalog)?;
    let model = checkpoint.model()?;
    let weights = weights_for(&model.config.heads(), alphas)?;
    let ev = evaluate(&model, &corpus.catalog, &corpus.test, &weights, ks)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    ev.metrics.save(out)?;
    if let Some(path) = rankings {
        write_rankings(path, &corpus.test, &ev.joint_orderings)?;
    }
    Ok(ev.metrics)
}

/// Runs a named suite on `data` and writes its report under `out`.
pub fn suite_run(name: SuiteName, cfg: &ExperimentConfig, data: &Path, out: &Path) -> Result<SuiteReport> {
    let corpus = Corpus::read(data)?;
    create_dir(out)?;
    cfg.save(&out.join(CONFIG_FILE))?;
    write_manifest(out, &format!("suite {name}"), data, None)?;
    let report = run_suite(name, &corpus, &cfg.model, &cfg.suite, &cfg.eval.ks)?;
    report.write(out)?;
    Ok(report)
}
