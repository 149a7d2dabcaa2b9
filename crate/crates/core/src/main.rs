use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cssnet::corpus::Specificity;
use cssnet::dataset::Corpus;
use cssnet::error::CssError;
use cssnet::eval::recall_key;
use cssnet::experiments::{full_model_gradcheck, ExperimentConfig, SuiteName};
use cssnet::runs::{eval_run, suite_run, train_run};

#[derive(Parser)]
#[command(name = "cssnet", version, about = "Consensus network for composed image-text retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus directory.
    Generate {
        /// Experiment config; its `data` section supplies defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Attribute schema JSON (default schema when omitted).
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long)]
        items: Option<usize>,
        #[arg(long)]
        triplets: Option<usize>,
        /// Held-out evaluation queries.
        #[arg(long)]
        queries: Option<usize>,
        #[arg(long)]
        j_max: Option<usize>,
        /// low, med, high or k=K
        #[arg(long)]
        specificity: Option<Specificity>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and evaluate it on the held-out queries.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a checkpoint with its own training settings.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Joint weights for IT_m, IT_h, TI_m, TI_h.
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the joint top-50 per query as CSV.
        #[arg(long)]
        rankings: Option<PathBuf>,
    },
    /// Finite-difference check of a tiny full model.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run an ablation suite over several seeds.
    Suite {
        /// ambiguity, smoothing, losses, pyramid or joint
        name: SuiteName,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, CssError> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn print_recalls(label: &str, table: &std::collections::BTreeMap<String, f64>, ks: &[usize]) {
    let parts: Vec<String> = ks
        .iter()
        .filter_map(|&k| table.get(&recall_key(k)).map(|v| format!("{}={v:.4}", recall_key(k))))
        .collect();
    println!("{label:<8} {}", parts.join(" "));
}

fn run(cli: Cli) -> Result<ExitCode, CssError> {
    match cli.command {
        Command::Generate {
            config,
            schema,
            items,
            triplets,
            queries,
            j_max,
            specificity,
            seed,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if schema.is_some() {
                cfg.schema = schema;
            }
            let d = &mut cfg.data;
            d.items = items.unwrap_or(d.items);
            d.triplets = triplets.unwrap_or(d.triplets);
            d.queries = queries.unwrap_or(d.queries);
            d.j_max = j_max.unwrap_or(d.j_max);
            d.specificity = specificity.unwrap_or(d.specificity);
            d.seed = seed.unwrap_or(d.seed);
            let corpus = Corpus::generate(&cfg.load_schema()?, &cfg.data)?;
            corpus.write(&out)?;
            let stats = corpus.train_stats()?;
            println!(
                "{} items, {} train triplets, {} queries; mean valid-set size {:.3}",
                corpus.catalog.len(),
                corpus.train.len(),
                corpus.test.len(),
                stats.mean_valid_set_size
            );
        }
        Command::Train {
            data,
            config,
            out,
            seed,
            epochs,
            resume,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.train.seed = seed.unwrap_or(cfg.train.seed);
            cfg.train.epochs = epochs.unwrap_or(cfg.train.epochs);
            let metrics = train_run(&cfg, &data, &out, resume.as_deref(), |e| {
                eprintln!("epoch {:>3}  lr {:.2e}  loss {:.5}", e.epoch, e.lr, e.total);
            })?;
            print_recalls("joint", &metrics.joint, &cfg.eval.ks);
        }
        Command::Eval {
            ckpt,
            data,
            config,
            alphas,
            k,
            out,
            rankings,
        } => {
            let cfg = load_config(config.as_deref())?;
            let alphas = match alphas {
                Some(a) => <[f64; 4]>::try_from(a.as_slice())
                    .map_err(|_| CssError::Config(format!("--alphas takes four values, got {}", a.len())))?,
                None => cfg.eval.alphas,
            };
            let ks = k.unwrap_or(cfg.eval.ks);
            let metrics = eval_run(&ckpt, &data, &alphas, &ks, &out, rankings.as_deref())?;
            for (head, table) in &metrics.per_head {
                print_recalls(&head.to_string(), table, &ks);
            }
            print_recalls("joint", &metrics.joint, &ks);
        }
        Command::Gradcheck { config } => {
            let cfg = load_config(config.as_deref())?.gradcheck;
            let report = full_model_gradcheck(&cfg)?;
            println!(
                "max relative error {:.3e} at {} (gradient norm {:.3e}; {} entries)",
                report.max_rel_error, report.worst_param, report.worst_param_norm, report.checked
            );
            println!(
                "worst entry {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e})",
                report.entry_rel_error, report.worst_entry_param, report.worst_index, report.analytic, report.numeric
            );
            if !(report.max_rel_error < cfg.tolerance) {
                eprintln!("gradient check failed: tolerance {:.1e}", cfg.tolerance);
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Suite {
            name,
            data,
            config,
            seeds,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.suite.seeds = seeds.unwrap_or(cfg.suite.seeds);
            let report = suite_run(name, &cfg, &data, &out)?;
            for line in report.table() {
                println!("{line}");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CssError::Config(_) => 2,
                CssError::MissingInput(_) => 3,
                _ => 1,
            })
        }
    }
}
