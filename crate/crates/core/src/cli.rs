//! Command-line front end.
//!
//! Every command takes its settings from built-in defaults, then an optional
//! JSON config file (`--config`, an [`ExperimentConfig`]), then flags, in
//! increasing precedence. The effective values are written into every
//! checkpoint and report.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::dataio::{
    kshot_sample, make_synthetic_dataset, read_features, write_atomic, write_features,
    DatasetSpec, LabeledFeatureSet,
};
use crate::error::{Error, ErrorCategory, Result};
use crate::nnet::Checkpoint;
use crate::numerics::RngState;
use crate::pipeline::{
    ablation_table, base_train, csv_row, evaluate, finetune, run_ablation_genloss,
    run_experiment, train_generator, ExperimentConfig, GenLoss, RunControl, Variant, CSV_HEADER,
    STREAM_BASE, STREAM_FINETUNE, STREAM_GEN, STREAM_KSHOT,
};

pub const BASE_TRAIN_FILE: &str = "base_train.otfs";
pub const KSHOT_POOL_FILE: &str = "kshot_pool.otfs";
pub const TEST_FILE: &str = "test.otfs";
pub const DATASET_SPEC_FILE: &str = "dataset.json";

#[derive(Debug, Parser)]
#[command(name = "otfeat", version, about = "Few-shot classification with generated features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Stage hyper-parameters accepted by every command.
#[derive(Debug, Clone, Default, Args)]
pub struct StageFlags {
    /// JSON experiment config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Weight of the synthetic-feature loss while fine-tuning.
    #[arg(long, allow_negative_numbers = true)]
    pub alpha: Option<f64>,
    /// Weight of the classifier loss while training the generator.
    #[arg(long, allow_negative_numbers = true)]
    pub beta: Option<f64>,
    /// Synthetic features per real feature while training the generator.
    #[arg(long = "t-gen")]
    pub t_gen: Option<usize>,
    /// Synthetic features per real feature while fine-tuning.
    #[arg(long = "t-finetune")]
    pub t_finetune: Option<usize>,
    /// Number of clusters of synthetic features.
    #[arg(long = "k-centroids")]
    pub k_centroids: Option<usize>,
    /// Entropic regularisation strength.
    #[arg(long, allow_negative_numbers = true)]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset files.
    SynthData {
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        stage: StageFlags,
    },
    /// Train the base classifier and write a checkpoint.
    BaseTrain {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Output checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        stage: StageFlags,
    },
    /// Train the feature generator against a base checkpoint.
    GenTrain {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Input checkpoint holding the base classifier.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output checkpoint; the training log goes to `<out>.log.jsonl`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Generator loss: ot, l2 or kl.
        #[arg(long)]
        variant: Option<String>,
        #[command(flatten)]
        stage: StageFlags,
    },
    /// Fine-tune on a K-shot draw of every class.
    Finetune {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Input checkpoint holding the classifier and generator.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        shots: Option<String>,
        /// baseline (no synthetic features) or augmented.
        #[arg(long)]
        variant: Option<String>,
        #[command(flatten)]
        stage: StageFlags,
    },
    /// Evaluate a checkpoint on the test split and write a JSON report.
    Eval {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        stage: StageFlags,
    },
    /// Baseline vs augmented fine-tuning over seeds and shot counts.
    RunExperiment {
        /// Run a single seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated shot counts.
        #[arg(long)]
        shots: Option<String>,
        #[arg(long)]
        workers: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        stage: StageFlags,
    },
    /// Compare generator losses (comma-separated list of ot, l2, kl).
    Ablate {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        shots: Option<String>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        stage: StageFlags,
    },
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

fn required<T: Clone>(v: &Option<T>, flag: &str) -> Result<T> {
    v.clone().ok_or_else(|| usage(format!("missing required flag --{flag}")))
}

fn parse_list<T: std::str::FromStr>(s: &str, flag: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| usage(format!("--{flag}: cannot parse {p:?}")))
        })
        .collect()
}

/// Defaults, overlaid by the config file, overlaid by flags.
fn effective_config(flags: &StageFlags) -> Result<ExperimentConfig> {
    let mut cfg = match &flags.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text)
                .map_err(|e| usage(format!("config {}: {e}", p.display())))?
        }
        None => ExperimentConfig::default(),
    };
    let s = &mut cfg.stage;
    if let Some(v) = flags.alpha {
        s.alpha = v;
    }
    if let Some(v) = flags.beta {
        s.beta = v;
    }
    if let Some(v) = flags.t_gen {
        s.t_gen = v;
    }
    if let Some(v) = flags.t_finetune {
        s.t_finetune = v;
    }
    if let Some(v) = flags.k_centroids {
        s.k_centroids = v;
    }
    if let Some(v) = flags.epsilon {
        s.sinkhorn.epsilon = v;
    }
    s.validate()?;
    Ok(cfg)
}

struct Dataset {
    spec: DatasetSpec,
    base_train: LabeledFeatureSet,
    kshot_pool: LabeledFeatureSet,
    test: LabeledFeatureSet,
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    let spec_path = dir.join(DATASET_SPEC_FILE);
    let text = std::fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
    let spec: DatasetSpec = serde_json::from_str(&text)?;
    let load = |name: &str| -> Result<LabeledFeatureSet> {
        let (set, manifest) = read_features(&dir.join(name))?;
        if set.dim() != spec.dim {
            return Err(Error::DimensionMismatch {
                expected: spec.dim,
                found: set.dim(),
            });
        }
        if manifest.spec_hash.as_deref().is_some_and(|h| h != spec.hash()) {
            return Err(Error::Format {
                offset: 0,
                message: format!("{name} was generated from a different dataset spec"),
            });
        }
        Ok(set)
    };
    Ok(Dataset {
        base_train: load(BASE_TRAIN_FILE)?,
        kshot_pool: load(KSHOT_POOL_FILE)?,
        test: load(TEST_FILE)?,
        spec,
    })
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn single_shots(s: &Option<String>) -> Result<usize> {
    let list: Vec<usize> = parse_list(&required(s, "shots")?, "shots")?;
    match list.as_slice() {
        [k] if *k >= 1 => Ok(*k),
        _ => Err(usage("--shots takes a single count >= 1 for this command")),
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData { seed, out, stage } => {
            let seed = required(&seed, "seed")?;
            let out = required(&out, "out")?;
            let mut cfg = effective_config(&stage)?;
            cfg.dataset.seed = seed;
            cfg.dataset.validate()?;
            let ds = make_synthetic_dataset(&cfg.dataset)?;
            create_dir(&out)?;
            let hash = cfg.dataset.hash();
            for (name, set) in [
                (BASE_TRAIN_FILE, &ds.base_train),
                (KSHOT_POOL_FILE, &ds.kshot_pool),
                (TEST_FILE, &ds.test),
            ] {
                write_features(&out.join(name), set, Some(seed), Some(hash.clone()))?;
            }
            write_json(&out.join(DATASET_SPEC_FILE), &serde_json::to_value(&cfg.dataset)?)?;
            println!(
                "{}",
                json!({"dataset": out, "spec_hash": hash, "base_train": ds.base_train.len(),
                       "kshot_pool": ds.kshot_pool.len(), "test": ds.test.len()})
            );
            Ok(())
        }
        Command::BaseTrain {
            seed,
            dataset,
            out,
            stage,
        } => {
            let seed = required(&seed, "seed")?;
            let dir = required(&dataset, "dataset")?;
            let out = required(&out, "out")?;
            let mut cfg = effective_config(&stage)?;
            cfg.stage.seed = seed;
            cfg.stage.validate()?;
            let ds = load_dataset(&dir)?;
            let rng = RngState::new(seed).split(STREAM_BASE);
            let res = base_train(&ds.base_train, &cfg.stage, &rng)?;
            let mut ck = Checkpoint::new(ds.spec.dim, rng.snapshot());
            ck.classifier = Some(res.classifier);
            ck.meta.insert("stage".into(), json!("base-train"));
            ck.meta.insert("train_accuracy".into(), json!(res.train_accuracy));
            ck.meta.insert("separable".into(), json!(res.separable));
            ck.meta.insert("config".into(), serde_json::to_value(&cfg.stage)?);
            ck.save(&out)?;
            println!(
                "{}",
                json!({"checkpoint": out, "train_accuracy": res.train_accuracy, "separable": res.separable})
            );
            Ok(())
        }
        Command::GenTrain {
            seed,
            dataset,
            checkpoint,
            out,
            variant,
            stage,
        } => {
            let seed = required(&seed, "seed")?;
            let dir = required(&dataset, "dataset")?;
            let ck_in = required(&checkpoint, "checkpoint")?;
            let out = required(&out, "out")?;
            let mut cfg = effective_config(&stage)?;
            cfg.stage.seed = seed;
            if let Some(v) = &variant {
                cfg.stage.gen_loss = GenLoss::parse(v)?;
            }
            cfg.stage.validate()?;
            let ds = load_dataset(&dir)?;
            let mut ck = Checkpoint::load(&ck_in)?;
            let cls = ck
                .classifier
                .clone()
                .ok_or_else(|| usage("input checkpoint has no classifier"))?;
            let rng = RngState::new(seed).split(STREAM_GEN);
            let res = train_generator(&cls, &ds.base_train, &cfg.stage, &rng)?;
            let mut log = String::new();
            for r in &res.log {
                log.push_str(&serde_json::to_string(r)?);
                log.push('\n');
            }
            write_atomic(&sibling(&out, ".log.jsonl"), log.as_bytes())?;
            ck.generator = Some(res.generator);
            ck.rng = rng.snapshot();
            ck.meta.insert("stage".into(), json!("gen-train"));
            ck.meta.insert("gen_config".into(), serde_json::to_value(&cfg.stage)?);
            ck.save(&out)?;
            let last = res.log.last();
            println!(
                "{}",
                json!({"checkpoint": out, "steps": res.log.len(), "final_l_gen": last.map(|r| r.l_gen)})
            );
            Ok(())
        }
        Command::Finetune {
            seed,
            dataset,
            checkpoint,
            out,
            shots,
            variant,
            stage,
        } => {
            let seed = required(&seed, "seed")?;
            let dir = required(&dataset, "dataset")?;
            let ck_in = required(&checkpoint, "checkpoint")?;
            let out = required(&out, "out")?;
            let shots = single_shots(&shots)?;
            let mut cfg = effective_config(&stage)?;
            cfg.stage.seed = seed;
            let variant = match variant.as_deref().unwrap_or("augmented") {
                "baseline" => Variant::Baseline,
                "augmented" => Variant::Augmented,
                other => {
                    return Err(usage(format!(
                        "--variant must be baseline or augmented, got {other:?}"
                    )))
                }
            };
            if variant == Variant::Baseline {
                cfg.stage.alpha = 0.0;
            }
            cfg.stage.validate()?;
            let ds = load_dataset(&dir)?;
            let mut ck = Checkpoint::load(&ck_in)?;
            let cls = ck
                .classifier
                .clone()
                .ok_or_else(|| usage("input checkpoint has no classifier"))?;
            if cfg.stage.alpha > 0.0 && ck.generator.is_none() {
                return Err(usage("input checkpoint has no generator; use --variant baseline"));
            }
            let root = RngState::new(seed);
            let kshot = kshot_sample(
                &ds.kshot_pool,
                shots,
                &mut root.split(STREAM_KSHOT).split(shots as u64),
            )?;
            let rng = root.split(STREAM_FINETUNE).split(shots as u64);
            let res = finetune(ck.generator.as_ref(), &cls, &kshot, &cfg.stage, &rng)?;
            ck.classifier = Some(res.classifier);
            ck.rng = rng.snapshot();
            ck.meta.insert("stage".into(), json!("finetune"));
            ck.meta.insert("shots".into(), json!(shots));
            ck.meta.insert("variant".into(), json!(variant.name()));
            ck.meta.insert("finetune_config".into(), serde_json::to_value(&cfg.stage)?);
            ck.save(&out)?;
            println!("{}", json!({"checkpoint": out, "shots": shots, "variant": variant.name()}));
            Ok(())
        }
        Command::Eval {
            seed,
            dataset,
            checkpoint,
            out,
            stage,
        } => {
            let dir = required(&dataset, "dataset")?;
            let ck_in = required(&checkpoint, "checkpoint")?;
            let out = required(&out, "out")?;
            let cfg = effective_config(&stage)?;
            let ds = load_dataset(&dir)?;
            let ck = Checkpoint::load(&ck_in)?;
            let cls = ck
                .classifier
                .as_ref()
                .ok_or_else(|| usage("checkpoint has no classifier"))?;
            let shots = ck.meta.get("shots").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
            let seed = seed.unwrap_or(ck.rng.seed);
            let report = evaluate(cls, &ds.test, shots, seed)?;
            let doc = json!({
                "report": report,
                "dataset_spec_hash": ds.spec.hash(),
                "checkpoint_meta": ck.meta,
                "config": cfg.stage,
            });
            write_json(&out, &doc)?;
            println!(
                "{}",
                json!({"report": out, "base_mean": report.base_mean,
                       "novel_mean": report.novel_mean, "overall_mean": report.overall_mean})
            );
            Ok(())
        }
        Command::RunExperiment {
            seed,
            shots,
            workers,
            out,
            stage,
        } => {
            let out = required(&out, "out")?;
            let mut cfg = effective_config(&stage)?;
            apply_run_flags(&mut cfg, seed, &shots, workers)?;
            cfg.validate()?;
            create_dir(&out)?;
            let csv_path = out.join("results.csv");
            let mut csv = CsvSink::create(&csv_path)?;
            let outcome =
                run_experiment(&cfg, &RunControl::default(), &mut |c| csv.push(&csv_row(c)))?;
            let table = outcome.summary_table();
            write_atomic(&out.join("summary.txt"), table.as_bytes())?;
            write_json(&out.join("report.json"), &serde_json::to_value(&outcome)?)?;
            print!("{table}");
            Ok(())
        }
        Command::Ablate {
            seed,
            shots,
            workers,
            variant,
            out,
            stage,
        } => {
            let out = required(&out, "out")?;
            let mut cfg = effective_config(&stage)?;
            apply_run_flags(&mut cfg, seed, &shots, workers)?;
            if let Some(v) = &variant {
                cfg.ablation_variants = v
                    .split(',')
                    .map(|s| GenLoss::parse(s.trim()))
                    .collect::<Result<_>>()?;
            }
            cfg.validate()?;
            create_dir(&out)?;
            let mut csv = CsvSink::create(&out.join("ablation.csv"))?;
            let (rows, interrupted) = run_ablation_genloss(
                &cfg,
                &cfg.ablation_variants,
                &RunControl::default(),
                &mut |r| csv.push(&csv_row(&r.as_cell())),
            )?;
            let table = ablation_table(&rows);
            write_atomic(&out.join("ablation.txt"), table.as_bytes())?;
            write_json(
                &out.join("ablation.json"),
                &json!({"config": cfg, "rows": rows, "interrupted": interrupted}),
            )?;
            print!("{table}");
            Ok(())
        }
    }
}

fn apply_run_flags(
    cfg: &mut ExperimentConfig,
    seed: Option<u64>,
    shots: &Option<String>,
    workers: Option<usize>,
) -> Result<()> {
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    if let Some(s) = shots {
        cfg.shots = parse_list(s, "shots")?;
    }
    if let Some(w) = workers {
        cfg.workers = w;
    }
    Ok(())
}

/// CSV file written row by row and flushed after each row, so an
/// interrupted run leaves every completed row on disk.
struct CsvSink {
    path: PathBuf,
    file: std::fs::File,
}

impl CsvSink {
    fn create(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "{CSV_HEADER}").map_err(|e| Error::io(path, e))?;
        file.flush().map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    fn push(&mut self, row: &str) -> Result<()> {
        writeln!(self.file, "{row}")
            .and_then(|()| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

pub fn exit_code(category: ErrorCategory) -> i32 {
    match category {
        ErrorCategory::Usage => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Numeric => 4,
    }
}

fn category_name(category: ErrorCategory) -> &'static str {
    match category {
        ErrorCategory::Usage => "usage",
        ErrorCategory::Data => "data",
        ErrorCategory::Numeric => "numeric",
    }
}

/// Parses `args`, runs the command and returns the process exit code.
/// Failures print a single `error[<category>]: <message>` line to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let text = e.render().to_string();
            let line = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with("Usage:") && !l.starts_with("For more"))
                .collect::<Vec<_>>()
                .join(" ");
            eprintln!("error[usage]: {}", line.trim_start_matches("error: "));
            return exit_code(ErrorCategory::Usage);
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            let cat = e.category();
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", category_name(cat));
            exit_code(cat)
        }
    }
}
