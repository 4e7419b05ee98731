//! `mambasam` command line: phantom generation, training, evaluation,
//! benchmarks and self-checks over the core library.

pub mod checks;
pub mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use mambasam_core::data::{
    extract_patches, generate_phantom, normalize_volume, read_volume, write_volume, LabeledVolume,
};
use mambasam_core::models::{load_into, read_checkpoint, save_checkpoint, Model};
use mambasam_core::traineval::{evaluate, fit, FitOptions, MetricReport};
use mambasam_core::{Error, Result};

pub use config::{RunConfig, DEFAULT_CONFIG};

#[derive(Debug, Parser)]
#[command(
    name = "mambasam",
    version,
    about = "Train and evaluate desk-scale Mamba-SAM segmentation models on synthetic phantoms"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write labelled phantom volumes (.msv) to a directory
    Phantom {
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `data.train_count`
        #[arg(long)]
        count: Option<usize>,
        /// Defaults to `data.train_seed`
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Train a model and write its checkpoint
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Overrides `paths.checkpoint`
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a checkpoint on held-out volumes and print a metrics CSV
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides `paths.report`
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time the selective scan against dense attention as L doubles
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "1024,2048,4096")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        d_model: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Also write the CSV here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in correctness checks
    Selftest,
    /// Print every config key with its default
    Config,
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// key = value config file; absent keys take their defaults
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code: 0 on success, 2 for usage errors, 1 otherwise.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// `Ok(false)` means the command ran but reported a failure.
fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Phantom { out, count, seed, config } => {
            let cfg = config.load()?;
            phantom(&cfg, &out, count.unwrap_or(cfg.data.train_count), seed.unwrap_or(cfg.data.train_seed))?;
            Ok(true)
        }
        Command::Train { config, checkpoint } => {
            let mut cfg = config.load()?;
            if let Some(c) = checkpoint {
                cfg.checkpoint = c;
            }
            train(&cfg, &mut |line| println!("{line}"))?;
            Ok(true)
        }
        Command::Eval { config, checkpoint, out } => {
            let mut cfg = config.load()?;
            if let Some(c) = checkpoint {
                cfg.checkpoint = c;
            }
            if out.is_some() {
                cfg.report = out;
            }
            let report = eval(&cfg)?;
            print!("{}", report.to_csv());
            eprintln!("{report}");
            if let Some(p) = &cfg.report {
                fs::write(p, report.to_csv())?;
            }
            Ok(true)
        }
        Command::Bench { lengths, d_model, repeats, out } => {
            let (check, report) = checks::complexity(&lengths, d_model, repeats);
            if let Some(r) = &report {
                println!("{r}");
                if let Some(p) = out {
                    fs::write(p, r.to_csv())?;
                }
            }
            println!("{check}");
            Ok(check.passed)
        }
        Command::Selftest => {
            let t = Instant::now();
            let results = checks::selftest();
            for c in &results {
                println!("{c}");
            }
            let failed = results.iter().filter(|c| !c.passed).count();
            println!("{} checks, {failed} failed, {:.1}s", results.len(), t.elapsed().as_secs_f64());
            Ok(failed == 0)
        }
        Command::Config => {
            print!("{DEFAULT_CONFIG}");
            Ok(true)
        }
    }
}

/// Writes `count` phantoms as `phantom_0000.msv`, … with seeds
/// `seed, seed + 1, …`.
pub fn phantom(cfg: &RunConfig, out: &Path, count: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(out)?;
    for i in 0..count {
        let v = generate_phantom(&cfg.data.phantom, seed.wrapping_add(i as u64))?;
        write_volume(&out.join(format!("phantom_{i:04}.msv")), &v)?;
    }
    Ok(())
}

/// All `.msv` files in `dir`, in file-name order.
pub fn read_dir_volumes(dir: &Path) -> Result<Vec<LabeledVolume>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "msv"));
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no .msv volumes in {}", dir.display())));
    }
    paths.iter().map(|p| read_volume(p)).collect()
}

/// Normalised volumes from `dir`, or freshly generated phantoms.
fn volumes(cfg: &RunConfig, dir: Option<&Path>, count: usize, seed: u64) -> Result<Vec<LabeledVolume>> {
    match dir {
        Some(d) => read_dir_volumes(d)?.iter().map(normalize_volume).collect(),
        None => (0..count as u64)
            .map(|i| normalize_volume(&generate_phantom(&cfg.data.phantom, seed.wrapping_add(i))?))
            .collect(),
    }
}

/// Training samples at the model input size: volumes that already match
/// are used whole, larger ones give label-aware random patches.
pub fn training_set(cfg: &RunConfig) -> Result<Vec<LabeledVolume>> {
    let d = &cfg.data;
    let vols = volumes(cfg, d.train_dir.as_deref(), d.train_count, d.train_seed)?;
    let mut out = Vec::new();
    for (i, v) in vols.into_iter().enumerate() {
        if v.dims() == d.patch {
            out.push(v);
        } else {
            out.extend(extract_patches(&v, d.patch, d.patches_per_volume, true, d.train_seed.wrapping_add(i as u64))?);
        }
    }
    Ok(out)
}

/// Builds, trains and saves a model per `cfg`, reporting progress through
/// `log`. With `data.val_count > 0` the epoch with the best mean foreground
/// Dice on the validation phantoms is saved instead of the last one.
pub fn train(cfg: &RunConfig, log: &mut dyn FnMut(String)) -> Result<Model> {
    let data = training_set(cfg)?;
    let val =
        if cfg.data.val_count > 0 { volumes(cfg, None, cfg.data.val_count, cfg.data.val_seed)? } else { Vec::new() };
    let mut model = Model::build(&cfg.model, cfg.seed)?;
    let r = model.freeze_report();
    log(format!(
        "model {}: {} trainable of {} parameters ({:.2}%), {} training samples",
        cfg.model.kind,
        r.trainable,
        r.total,
        100.0 * r.ratio(),
        data.len()
    ));
    let t = Instant::now();
    let mut best: Option<(f64, usize, Model)> = None;
    fit(&mut model, &data, &cfg.train, &FitOptions { epochs: cfg.epochs, augment: cfg.augment }, |s, m| {
        let mut line = format!("epoch {} loss {:.4} ({:.0}s)", s.epoch + 1, s.mean_loss, t.elapsed().as_secs_f64());
        if !val.is_empty() {
            let dice = evaluate(m, &val)?.mean_dice();
            line.push_str(&format!(" val dice {dice:.4}"));
            if best.as_ref().is_none_or(|b| dice > b.0) {
                best = Some((dice, s.epoch, m.clone()));
            }
        }
        log(line);
        Ok(())
    })?;
    if let Some((dice, epoch, m)) = best {
        log(format!("keeping epoch {} (val dice {dice:.4})", epoch + 1));
        model = m;
    }
    let r = model.freeze_report();
    if !r.all_pass() {
        return Err(Error::Numeric(format!("frozen parameters changed: {:?}", r.failures())));
    }
    if let Some(parent) = cfg.checkpoint.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    save_checkpoint(&model.store, &cfg.checkpoint)?;
    log(format!("wrote {}", cfg.checkpoint.display()));
    Ok(model)
}

/// Loads the checkpoint named by `cfg` into a model built from `cfg`.
pub fn load_model(cfg: &RunConfig) -> Result<Model> {
    let mut model = Model::build(&cfg.model, cfg.seed)?;
    load_into(&mut model.store, &read_checkpoint(&cfg.checkpoint)?)?;
    Ok(model)
}

/// Metrics of the checkpointed model on the evaluation volumes.
pub fn eval(cfg: &RunConfig) -> Result<MetricReport> {
    let model = load_model(cfg)?;
    let d = &cfg.data;
    let vols = volumes(cfg, d.eval_dir.as_deref(), d.eval_count, d.eval_seed)?;
    evaluate(&model, &vols)
}
