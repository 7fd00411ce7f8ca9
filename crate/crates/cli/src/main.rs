use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ctune_core::domain::{AnnotationTag, ClassId, Scan};
use ctune_core::experiment::{
    attach_base_annotations, derive_seed, evaluate, prepare_data, run_experiment, score_pool,
    train_base_from, ExperimentConfig,
};
use ctune_core::hybrid::{binarize_predictions, build_training_view, merge_hybrid};
use ctune_core::model::{init_model, predict};
use ctune_core::persist::{
    load_checkpoint, load_config, load_dataset, load_embeddings, load_run, read_scores_csv,
    save_checkpoint, save_dataset, write_jsonl, write_report, write_run, write_scores_csv,
    Checkpoint, RunLock, TrainingProvenance,
};
use ctune_core::phantom::oracle_revise;
use ctune_core::selection::select_for_revision;
use ctune_core::train::{regime_partition, train, DataStrategy};
use ctune_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "ctune",
    version,
    about = "Continual tuning for interactive segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML); the packaged two-round config when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => load_config(path)?,
            None => ExperimentConfig::reference(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the base, test and fresh pool splits as datasets.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the base model on a dataset's prior annotations.
    TrainBase {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Epoch log (JSON lines).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Class embeddings as a JSON object of name to vector.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Predict every class and attach thresholded masks.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Importance scores for every scan of a dataset.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated class names or ids; the config's new classes by default.
        #[arg(long, value_delimiter = ',')]
        classes: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// The k most important scans of a score table, one id per line.
    Select {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulated expert revision of the selected scans.
    Revise {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// File with one scan id per line.
        #[arg(long)]
        ids: PathBuf,
        #[arg(long, value_delimiter = ',')]
        classes: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge revised channels into the predicted sets.
    Merge {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tune a checkpoint on a revised dataset.
    Tune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        classes: Vec<String>,
        /// revised_only, hybrid or full.
        #[arg(long, default_value = "hybrid")]
        strategy: String,
        /// Freeze the shared backbone.
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        freeze: bool,
        /// Previously annotated scans to reuse under the hybrid strategy.
        #[arg(long)]
        reuse: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Per-class mean DSC on a dataset, printed as JSON.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Base training plus every round under every regime.
    Loop {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Curves and tables from one or more run directories.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

fn classes_or_new(config: &ExperimentConfig, classes: &[String]) -> Result<BTreeSet<ClassId>> {
    let catalog = config.catalog()?;
    if classes.is_empty() {
        Ok(catalog.new_classes().iter().copied().collect())
    } else {
        catalog.parse_classes(classes)
    }
}

fn dataset(path: &Path) -> Result<Vec<Scan>> {
    Ok(load_dataset(path, true)?.1)
}

fn save(path: &Path, config: &ExperimentConfig, scans: &[Scan]) -> Result<()> {
    save_dataset(path, &config.catalog()?, scans).map(|_| ())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { common, out } => {
            let config = common.load()?;
            let data = prepare_data(&config)?;
            save(&out.join("base"), &config, &data.base)?;
            save(&out.join("test"), &config, &data.test)?;
            for (i, pool) in data.fresh_pools.iter().enumerate() {
                if let Some(pool) = pool {
                    save(&out.join(format!("pool{}", i + 1)), &config, pool)?;
                }
            }
            println!("wrote datasets under {}", out.display());
        }
        Command::TrainBase {
            common,
            data,
            out,
            log,
            embeddings,
        } => {
            let config = common.load()?;
            let catalog = config.catalog()?;
            let mut base = dataset(&data)?;
            if base
                .iter()
                .all(|s| s.annotation(AnnotationTag::Prior).is_none())
            {
                attach_base_annotations(&mut base, &catalog);
            }
            let mut init = init_model(derive_seed(config.seed, "init"), &config.arch, &catalog)?;
            if let Some(path) = embeddings {
                load_embeddings(&path, &mut init)?;
            }
            let (params, history) = train_base_from(&config, init, &base, None)?;
            let ckpt = Checkpoint {
                params,
                optimizer: None,
                provenance: TrainingProvenance {
                    config_digest: config.digest(),
                    epoch: history.epochs.len(),
                    note: "base".into(),
                },
            };
            save_checkpoint(&out, &ckpt)?;
            if let Some(log) = log {
                write_jsonl(&log, &history.epochs)?;
            }
            println!("{}", ckpt.params.digest());
        }
        Command::Infer {
            common,
            checkpoint,
            data,
            out,
            threshold,
        } => {
            let config = common.load()?;
            let params = load_checkpoint(&checkpoint)?.params;
            let threshold = threshold.unwrap_or(config.scoring.threshold);
            let all = params.catalog.id_set();
            let mut scans = dataset(&data)?;
            for scan in &mut scans {
                let probs = predict(&params, &scan.image, &all)?;
                scan.annotations.insert(
                    AnnotationTag::Predicted,
                    binarize_predictions(&probs, threshold)?,
                );
            }
            save_dataset(&out, &params.catalog, &scans)?;
        }
        Command::Score {
            common,
            checkpoint,
            data,
            classes,
            out,
        } => {
            let config = common.load()?;
            let params = load_checkpoint(&checkpoint)?.params;
            let classes = classes_or_new(&config, &classes)?;
            let scored = score_pool(&params, &dataset(&data)?, &classes, &config.scoring)?;
            let scores: Vec<_> = scored.into_iter().map(|(s, _)| s).collect();
            write_scores_csv(&out, &scores)?;
        }
        Command::Select {
            common,
            scores,
            k,
            out,
        } => {
            common.load()?;
            let ids = select_for_revision(&read_scores_csv(&scores)?, k)?;
            let text: String = ids.iter().map(|id| format!("{id}\n")).collect();
            match out {
                Some(path) => fs::write(&path, text).map_err(|e| Error::io(&path, e))?,
                None => print!("{text}"),
            }
        }
        Command::Revise {
            common,
            data,
            ids,
            classes,
            out,
        } => {
            let config = common.load()?;
            let classes = classes_or_new(&config, &classes)?;
            let text = fs::read_to_string(&ids).map_err(|e| Error::io(&ids, e))?;
            let wanted: BTreeSet<&str> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .collect();
            let mut scans = dataset(&data)?;
            for id in &wanted {
                if !scans.iter().any(|s| s.scan_id == *id) {
                    return Err(Error::Contract(format!("scan {id} is not in the dataset")));
                }
            }
            for scan in scans
                .iter_mut()
                .filter(|s| wanted.contains(s.scan_id.as_str()))
            {
                let predicted = scan
                    .annotation(AnnotationTag::Predicted)
                    .cloned()
                    .ok_or_else(|| {
                        Error::Contract(format!(
                            "scan {} has no predictions; run infer first",
                            scan.scan_id
                        ))
                    })?;
                let revised = oracle_revise(scan, &predicted, &classes)?.expert_channels();
                scan.annotations.insert(AnnotationTag::Revised, revised);
            }
            save(&out, &config, &scans)?;
        }
        Command::Merge { common, data, out } => {
            let config = common.load()?;
            let mut scans = dataset(&data)?;
            for scan in &mut scans {
                if let (Some(p), Some(r)) = (
                    scan.annotation(AnnotationTag::Predicted),
                    scan.annotation(AnnotationTag::Revised),
                ) {
                    let hybrid = merge_hybrid(p, r)?;
                    scan.annotations.insert(AnnotationTag::Hybrid, hybrid);
                }
            }
            save(&out, &config, &scans)?;
        }
        Command::Tune {
            common,
            checkpoint,
            data,
            classes,
            strategy,
            freeze,
            reuse,
            epochs,
            out,
            log,
        } => {
            let config = common.load()?;
            let mut tuning = config.tuning.clone();
            tuning.data_strategy = strategy.parse::<DataStrategy>()?;
            tuning.freeze_shared = freeze;
            if let Some(e) = epochs {
                tuning.epochs = e;
                tuning.warmup_epochs = tuning.warmup_epochs.min(e);
            }
            let ckpt = load_checkpoint(&checkpoint)?;
            let classes = classes_or_new(&config, &classes)?;
            let scans = dataset(&data)?;
            let revised: Vec<&Scan> = scans
                .iter()
                .filter(|s| s.annotation(AnnotationTag::Revised).is_some())
                .collect();
            let reused = match reuse {
                Some(path) => dataset(&path)?,
                None => Vec::new(),
            };
            let reused: Vec<&Scan> = reused.iter().collect();
            let view = build_training_view(&revised, &reused, &scans, tuning.data_strategy)?;
            let start = if tuning.data_strategy == DataStrategy::Full {
                ctune_core::model::init_model(tuning.seed, &ckpt.params.arch, &ckpt.params.catalog)?
            } else {
                ckpt.params
            };
            let partition = regime_partition(&start, &tuning, &classes)?;
            let (params, history) = train(&start, &view, &tuning, &partition, None)?;
            save_checkpoint(
                &out,
                &Checkpoint {
                    params,
                    optimizer: None,
                    provenance: TrainingProvenance {
                        config_digest: config.digest(),
                        epoch: history.epochs.len(),
                        note: format!(
                            "{} freeze={}",
                            tuning.data_strategy.as_str(),
                            tuning.freeze_shared
                        ),
                    },
                },
            )?;
            if let Some(log) = log {
                write_jsonl(&log, &history.epochs)?;
            }
            println!("scans per epoch: {}", view.len());
        }
        Command::Evaluate {
            common,
            checkpoint,
            data,
        } => {
            common.load()?;
            let params = load_checkpoint(&checkpoint)?.params;
            let dsc = evaluate(&params, &dataset(&data)?, &params.catalog.id_set())?;
            let named: serde_json::Map<String, serde_json::Value> = dsc
                .iter()
                .map(|(k, v)| {
                    (
                        params.catalog.name_of(*k).unwrap_or("?").to_string(),
                        (*v).into(),
                    )
                })
                .collect();
            println!("{}", serde_json::Value::Object(named));
        }
        Command::Loop { common, out } => {
            let config = common.load()?;
            let _lock = RunLock::acquire(&out)?;
            let report = run_experiment(&config)?;
            write_run(&out, &config, &report)?;
            print!("{}", report.csv());
        }
        Command::Report { common, runs, out } => {
            common.load()?;
            let logs = runs
                .iter()
                .map(|r| load_run(r))
                .collect::<Result<Vec<_>>>()?;
            for path in write_report(&out, &logs)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
