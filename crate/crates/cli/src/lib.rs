//! Command-line front end: `robgan <gen-data|train|finetune|attack|eval|report>`.
//!
//! Failures print one JSON object on stderr, e.g.
//! `{"error":"config","exit":2,"message":"..."}`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use robgan::attack::pgd_attack;
use robgan::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use robgan::config::{DatasetSource, RunConfig};
use robgan::data::{save_rgd, load_rgd, Dataset, Provenance, SplitTag};
use robgan::eval::{self, gap_csv, llv_curve_csv};
use robgan::io::write_atomic;
use robgan::losses::{attack_loss, AttackTarget};
use robgan::metrics::{parse_metrics_csv, write_metrics_csv, MetricsRecord};
use robgan::models::{Discriminator, Generator, ModelConfig};
use robgan::rng;
use robgan::train::{self, Session, TrainConfig, TrainMode};
use robgan::{Error, Precision, Real, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.rgc";
pub const ORACLE_FILE: &str = "oracle.rgc";
pub const FINETUNED_FILE: &str = "finetuned.rgc";
pub const FINETUNE_METRICS_FILE: &str = "finetune_metrics.csv";

#[derive(Parser, Debug)]
#[command(name = "robgan", version, about = "Robust GAN training lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// JSON run configuration.
    #[arg(long, short)]
    config: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic dataset as RGD1 files.
    GenData {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Output directory (defaults to the configured out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train in the configured mode.
    Train {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Continue from the run's last checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs in this invocation.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Fine-tune the class head of a GAN checkpoint.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Perturb a dataset file against a checkpoint's classifier.
    Attack {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        /// Attack radius (defaults to the configured training radius).
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Robust-accuracy sweep, LLV and oracle score of a checkpoint.
    Eval {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Oracle classifier checkpoint; trained from scratch when absent.
        #[arg(long)]
        oracle: Option<PathBuf>,
        /// Output directory (defaults to the configured out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train-minus-test gap table from one or more metrics files.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Maps an error to its process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Divergence { .. } | Error::NonFinite { .. } => 3,
        Error::Io { .. } | Error::Format { .. } => 4,
        _ => 1,
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Shape { .. } => "shape",
        Error::NonFinite { .. } => "non_finite",
        Error::Contract(_) => "contract",
        Error::State(_) => "state",
        Error::Validation(_) => "validation",
        Error::Attack { .. } => "attack",
        Error::Divergence { .. } => "divergence",
        Error::Format { .. } => "format",
        Error::Mismatch(_) => "mismatch",
        Error::Config(_) => "config",
        Error::Io { .. } => "io",
    }
}

/// The single-line error report printed on failure.
pub fn error_line(e: &Error) -> String {
    serde_json::json!({
        "error": error_kind(e),
        "exit": exit_code(e),
        "message": e.to_string(),
    })
    .to_string()
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, A>(argv: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let err = Error::Config(e.kind().to_string());
            eprintln!("{}", error_line(&err));
            return 2;
        }
    };
    let result = Precision::from_env().and_then(|p| match p {
        Precision::Single => dispatch::<f32>(cli.command),
        Precision::Double => dispatch::<f64>(cli.command),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            exit_code(&e)
        }
    }
}

fn dispatch<T: Real>(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { cfg, out } => gen_data(&RunConfig::load(&cfg.config)?, out),
        Command::Train { cfg, resume, stop_after } => {
            cmd_train::<T>(&RunConfig::load(&cfg.config)?, resume, stop_after)
        }
        Command::Finetune { cfg, checkpoint } => cmd_finetune::<T>(&RunConfig::load(&cfg.config)?, &checkpoint),
        Command::Attack { cfg, checkpoint, data, split, out, delta } => {
            let split = match split.as_str() {
                "train" => SplitTag::Train,
                "test" => SplitTag::Test,
                other => return Err(Error::Config(format!("split must be train or test, got {other:?}"))),
            };
            cmd_attack::<T>(&RunConfig::load(&cfg.config)?, &checkpoint, &data, split, &out, delta)
        }
        Command::Eval { cfg, checkpoint, oracle, out } => {
            cmd_eval::<T>(&RunConfig::load(&cfg.config)?, &checkpoint, oracle.as_deref(), out)
        }
        Command::Report { metrics, out } => cmd_report(&metrics, &out),
    }
}

fn gen_data(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    let DatasetSource::Synth(_) = &cfg.dataset else {
        return Err(Error::Config("gen-data needs a synth dataset source".into()));
    };
    let dir = out.unwrap_or_else(|| cfg.out_dir.clone());
    let (train, test) = cfg.dataset.load()?;
    save_rgd(&train, &dir.join("train.rgd"))?;
    save_rgd(&test, &dir.join("test.rgd"))
}

fn has_generator(c: &Checkpoint) -> bool {
    c.records.iter().any(|r| r.name.starts_with("g."))
}

/// Loads model parameters from any checkpoint written by this tool.
pub fn load_models<T: Real>(
    c: &Checkpoint,
    model: &ModelConfig,
) -> Result<(Option<Generator<T>>, Discriminator<T>)> {
    let mut init = rng::derive(0, "cli.load");
    let mut disc = Discriminator::init(model, &mut init)?;
    c.load_params("", &mut disc.params)?;
    let gen = if has_generator(c) {
        let mut g = Generator::init(model, &mut init)?;
        c.load_params("", &mut g.params)?;
        Some(g)
    } else {
        None
    };
    Ok((gen, disc))
}

fn models_checkpoint<T: Real>(cfg: &TrainConfig, gen: Option<&Generator<T>>, disc: &Discriminator<T>) -> Checkpoint {
    let mut c = Checkpoint::new(cfg.hash());
    if let Some(g) = gen {
        c.push_params("", &g.params);
    }
    c.push_params("", &disc.params);
    c
}

fn oracle_for<T: Real>(cfg: &RunConfig, train: &Dataset, test: &Dataset, dir: &Path) -> Result<Discriminator<T>> {
    let path = dir.join(ORACLE_FILE);
    let tc = cfg.train_config();
    if path.exists() {
        let c = load_checkpoint(&path)?;
        return Ok(load_models(&c, &cfg.model)?.1);
    }
    let oracle = train::train_oracle::<T>(train, test, &tc)?;
    save_checkpoint(&models_checkpoint(&tc, None, &oracle), &path)?;
    Ok(oracle)
}

fn cmd_train<T: Real>(cfg: &RunConfig, resume: bool, stop_after: Option<usize>) -> Result<()> {
    let dir = &cfg.out_dir;
    let (train, test) = cfg.dataset.load()?;
    cfg.write_effective(dir)?;
    let tc = cfg.train_config();
    let oracle;
    let mut session = match cfg.mode {
        TrainMode::Robgan => {
            let s = Session::<T>::robgan(&tc, &train, &test)?;
            if cfg.train.oracle {
                oracle = oracle_for::<T>(cfg, &train, &test, dir)?;
                s.with_oracle(&oracle)
            } else {
                s
            }
        }
        TrainMode::AdvTrainAugmented => {
            let path = cfg.train.generator_checkpoint.as_ref().ok_or_else(|| {
                Error::Config("adv_train_augmented needs train.generator_checkpoint".into())
            })?;
            let (gen, _) = load_models::<T>(&load_checkpoint(path)?, &cfg.model)?;
            let gen = gen.ok_or_else(|| {
                Error::Config(format!("{} holds no generator", path.display()))
            })?;
            Session::classifier(&tc, &train, &test, Some(gen))?
        }
        _ => Session::classifier(&tc, &train, &test, None)?,
    };
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let metrics_path = dir.join(METRICS_FILE);
    let mut records: Vec<MetricsRecord> = Vec::new();
    if resume {
        session.restore(&load_checkpoint(&ckpt_path)?)?;
        let text = std::fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        records = parse_metrics_csv(&text)?;
        records.truncate(session.epoch());
        if records.len() != session.epoch() {
            return Err(Error::Mismatch(format!(
                "{} has {} rows but the checkpoint is at epoch {}",
                metrics_path.display(),
                records.len(),
                session.epoch()
            )));
        }
    }
    let mut budget = stop_after.unwrap_or(usize::MAX);
    while !session.is_done() {
        if budget == 0 {
            return Ok(());
        }
        budget -= 1;
        records.push(session.run_epoch()?);
        save_checkpoint(&session.checkpoint(), &ckpt_path)?;
        write_metrics_csv(&records, &metrics_path)?;
    }
    write_text(&dir.join("llv.csv"), &llv_curve_csv(&records))?;
    write_text(&dir.join("gap.csv"), &gap_csv(&eval::accuracy_gap_report(&records)))
}

fn cmd_finetune<T: Real>(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    let (train, test) = cfg.dataset.load()?;
    let (gen, disc) = load_models::<T>(&load_checkpoint(checkpoint)?, &cfg.model)?;
    let gen = gen.ok_or_else(|| Error::Config(format!("{} holds no generator", checkpoint.display())))?;
    let tc = cfg.train_config();
    let dir = &cfg.out_dir;
    cfg.write_effective(dir)?;
    let run = train::finetune(&disc, &gen, &train, &test, &tc)?;
    write_metrics_csv(&run.metrics, &dir.join(FINETUNE_METRICS_FILE))?;
    save_checkpoint(&models_checkpoint(&tc, Some(&gen), &run.disc), &dir.join(FINETUNED_FILE))
}

fn cmd_attack<T: Real>(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    split: SplitTag,
    out: &Path,
    delta: Option<f64>,
) -> Result<()> {
    let (_, disc) = load_models::<T>(&load_checkpoint(checkpoint)?, &cfg.model)?;
    let ds = load_rgd(data, split)?;
    let delta = delta.unwrap_or(cfg.attack.delta_max);
    let atk = cfg.eval.attack_template(&cfg.attack).at_radius(delta);
    atk.validate().map_err(|e| Error::Config(e.to_string()))?;
    let mut r = rng::derive(cfg.seed, "cli.attack");
    let mut images = Vec::with_capacity(ds.images.len());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for part in idx.chunks(128) {
        let b = ds.batch::<T>(part);
        let adv = pgd_attack(attack_loss(&disc, &b.labels, AttackTarget::Classification), &b, &atk, &mut r)?;
        images.extend(adv.images.data().iter().map(|v| v.as_f32()));
    }
    let bytes = std::fs::read(data).map_err(|e| Error::io(data, e))?;
    let hash = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
    let adv = Dataset {
        images,
        provenance: Provenance::File { sha256: hash },
        ..ds
    };
    save_rgd(&adv, out)
}

fn cmd_eval<T: Real>(cfg: &RunConfig, checkpoint: &Path, oracle: Option<&Path>, out: Option<PathBuf>) -> Result<()> {
    let dir = out.unwrap_or_else(|| cfg.out_dir.clone());
    let (train, test) = cfg.dataset.load()?;
    let (gen, disc) = load_models::<T>(&load_checkpoint(checkpoint)?, &cfg.model)?;
    let template = cfg.eval.attack_template(&cfg.attack);
    let sweep = eval::robust_accuracy_sweep(&disc, &train, &test, &cfg.eval.deltas, &template, cfg.seed)?;
    write_text(&dir.join("sweep.csv"), &sweep.to_csv())?;
    let (lt, ls) = (eval::measure_llv(&disc, &train)?, eval::measure_llv(&disc, &test)?);
    write_text(
        &dir.join("llv_eval.csv"),
        &format!("split,mean,std\ntrain,{},{}\ntest,{},{}\n", lt.mean, lt.std, ls.mean, ls.std),
    )?;
    if let Some(gen) = gen {
        let oracle = match oracle {
            Some(p) => load_models::<T>(&load_checkpoint(p)?, &cfg.model)?.1,
            None => oracle_for::<T>(cfg, &train, &test, &dir)?,
        };
        let s = eval::oracle_score(&gen, &oracle, cfg.eval.oracle_samples, &mut rng::derive(cfg.seed, "cli.oracle"))?;
        write_text(
            &dir.join("oracle.csv"),
            &format!(
                "conditional_accuracy,diversity,oracle_hash\n{},{},{}\n",
                s.conditional_accuracy, s.diversity, s.oracle_hash
            ),
        )?;
    }
    Ok(())
}

fn cmd_report(metrics: &[PathBuf], out: &Path) -> Result<()> {
    let mut table = String::from("run,epoch,robust_acc_gap,llv_gap\n");
    for path in metrics {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let rows = eval::accuracy_gap_report(&parse_metrics_csv(&text)?);
        for line in gap_csv(&rows).lines().skip(1) {
            table.push_str(&format!("{},{line}\n", path.display()));
        }
    }
    write_text(out, &table)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}
