//! `oodseg`: data generation, frozen-model fitting, training, scoring,
//! evaluation, ablation and sweeps for the anomaly-segmentation head.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use oodseg::ablation::{ablation_csv, run_ablation, run_sweep, sweep_csv, SweepParam};
use oodseg::estimators::score_map;
use oodseg::io::{read_ppm, write_pgm};
use oodseg::trainer::{eval_csv, evaluate, train_with};
use oodseg::world::{Dataset, FrozenModel};
use oodseg::{Error, HeadParams, LabelMap, Scorer};

use config::{Overrides, RunConfig};

/// Process exit codes, one per failure class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
enum Exit {
    Ok = 0,
    Other = 1,
    Usage = 2,
    Config = 3,
    Artifact = 4,
    Data = 5,
    Training = 6,
    Invariant = 7,
}

/// An invariant the pipeline itself broke.
#[derive(Debug)]
struct Invariant(String);

impl std::fmt::Display for Invariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invariant violated: {}", self.0)
    }
}

impl std::error::Error for Invariant {}

fn classify(err: &anyhow::Error) -> Exit {
    if err.downcast_ref::<Invariant>().is_some() {
        return Exit::Invariant;
    }
    if err.downcast_ref::<serde_json::Error>().is_some() {
        return Exit::Config;
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return Exit::Artifact;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => Exit::Config,
        Some(Error::Io { .. }) | Some(Error::Checkpoint(_)) => Exit::Artifact,
        Some(Error::TooManyAborts { .. }) | Some(Error::DegeneratePartition(_)) => Exit::Training,
        Some(_) => Exit::Data,
        None => Exit::Other,
    }
}

#[derive(Debug, Parser)]
#[command(name = "oodseg", version, about = "Self-supervised anomaly segmentation on a frozen segmenter")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the train and eval splits.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Fit and store the frozen encoder/decoder.
    FitFrozen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train the head; writes head/, trainlog.csv and optional checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        frozen: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score one PPM image into a TNSR score map.
    Score {
        #[arg(long)]
        head: PathBuf,
        #[arg(long)]
        frozen: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "combined")]
        scorer: Scorer,
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
        #[arg(long)]
        out: PathBuf,
        /// Also write a min-max normalized PGM heatmap.
        #[arg(long)]
        heatmap: Option<PathBuf>,
    },
    /// Evaluate every scorer on the eval split; writes eval.csv.
    Eval {
        #[arg(long)]
        head: PathBuf,
        #[arg(long)]
        frozen: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
    },
    /// Estimator and margin ablation; writes ablation.csv.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        frozen: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Train arms on separate threads.
        #[arg(long)]
        threads: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// One-parameter sensitivity sweep; writes sweep.csv.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        frozen: Option<PathBuf>,
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_digest(dir: &Path, frozen: &FrozenModel) -> Result<()> {
    write(&dir.join("frozen_digest.txt"), format!("{}\n", frozen.digest()))
}

/// Dataset and frozen model from explicit paths, the config's paths, or
/// generated in-process from the config.
fn inputs(cfg: &RunConfig, data: Option<&Path>, frozen: Option<&Path>) -> Result<(Dataset, FrozenModel)> {
    let dataset = match data.or(cfg.data.as_deref()) {
        Some(p) => Dataset::load(p)?,
        None => Dataset::generate(&cfg.scene, cfg.n_train, cfg.n_eval)?,
    };
    let model = match frozen.or(cfg.frozen_dir.as_deref()) {
        Some(p) => FrozenModel::load(p)?,
        None => FrozenModel::fit(&cfg.scene, &cfg.frozen)?,
    };
    if model.feature_dim() != cfg.train.head.feature_dim {
        return Err(Error::Config(format!(
            "frozen model yields {} features, head expects {}",
            model.feature_dim(),
            cfg.train.head.feature_dim
        ))
        .into());
    }
    Ok((dataset, model))
}

/// Loads a head and checks it was trained against `frozen`.
fn load_head(dir: &Path, frozen: &FrozenModel) -> Result<HeadParams> {
    let (head, manifest) = HeadParams::load(dir)?;
    if let Some(d) = manifest.get("frozen_digest") {
        if *d != frozen.digest() {
            return Err(Error::Checkpoint(format!(
                "head {} was trained against frozen model {d}",
                dir.display()
            ))
            .into());
        }
    }
    Ok(head)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, overrides } => {
            let cfg = RunConfig::load(config.as_deref(), &overrides)?;
            let ds = Dataset::generate(&cfg.scene, cfg.n_train, cfg.n_eval)?;
            ds.save(&out, &[("seed", cfg.scene.seed.to_string())])?;
            cfg.echo(&out)?;
        }
        Command::FitFrozen { config, out, overrides } => {
            let cfg = RunConfig::load(config.as_deref(), &overrides)?;
            let model = FrozenModel::fit(&cfg.scene, &cfg.frozen)?;
            model.save(&out)?;
            cfg.echo(&out)?;
            log::info!("frozen model {}", model.digest());
        }
        Command::Train {
            config,
            data,
            frozen,
            out,
            overrides,
        } => {
            let cfg = RunConfig::load(config.as_deref(), &overrides)?;
            let (ds, model) = inputs(&cfg, data.as_deref(), frozen.as_deref())?;
            cfg.echo(&out)?;
            write_digest(&out, &model)?;
            let digest = model.digest();
            let extra = |iteration: usize| {
                vec![
                    ("frozen_digest", digest.clone()),
                    ("lambda", cfg.train.lambda.to_string()),
                    ("seed", cfg.train.seed.to_string()),
                    ("iteration", iteration.to_string()),
                ]
            };
            let every = cfg.checkpoint_every;
            let mut observer = |iteration: usize, head: &HeadParams, _: Option<&oodseg::trainer::TrainRecord>| {
                if every > 0 && (iteration + 1) % every == 0 {
                    let dir = out.join("checkpoints").join(format!("iter_{:06}", iteration + 1));
                    head.save(&dir, &extra(iteration + 1))?;
                }
                Ok(())
            };
            let (head, log) = train_with(&ds.train, &model, &cfg.train, &mut observer)?;
            if model.digest() != digest {
                bail!(Invariant("frozen model changed during training".into()));
            }
            head.save(&out.join("head"), &extra(cfg.train.iterations))?;
            write(&out.join("trainlog.csv"), log.to_csv())?;
            if log.aborted > 0 {
                log::warn!("{} iterations aborted", log.aborted);
            }
        }
        Command::Score {
            head,
            frozen,
            image,
            scorer,
            lambda,
            out,
            heatmap,
        } => {
            let model = FrozenModel::load(&frozen)?;
            let params = load_head(&head, &model)?;
            let img = read_ppm(&image)?;
            let features = model.encode(&img);
            let seg = model.decode(&features)?;
            let map = score_map(&params, &features, &seg, lambda, scorer)?;
            if let Some(parent) = out.parent() {
                fs::create_dir_all(parent)?;
            }
            map.save(&out)?;
            if let Some(path) = heatmap {
                let (lo, hi) = map
                    .scores
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
                let span = if hi > lo { hi - lo } else { 1.0 };
                // 255 is reserved for ignored pixels
                let levels = map.scores.iter().map(|&v| ((v - lo) / span * 254.0).round() as u8).collect();
                write_pgm(&path, &LabelMap::new(map.height, map.width, levels)?)?;
            }
        }
        Command::Eval {
            head,
            frozen,
            data,
            out,
            lambda,
        } => {
            let model = FrozenModel::load(&frozen)?;
            let params = load_head(&head, &model)?;
            let ds = Dataset::load(&data)?;
            let rows = evaluate(&params, &model, &ds.eval, lambda, &Scorer::ALL)?;
            write(&out.join("eval.csv"), eval_csv(&rows))?;
            write_digest(&out, &model)?;
        }
        Command::Ablate {
            config,
            data,
            frozen,
            out,
            threads,
            overrides,
        } => {
            let cfg = RunConfig::load(config.as_deref(), &overrides)?;
            let (ds, model) = inputs(&cfg, data.as_deref(), frozen.as_deref())?;
            cfg.echo(&out)?;
            write_digest(&out, &model)?;
            let rows = run_ablation(&ds.train, &model, &ds.eval, &cfg.train, threads)?;
            write(&out.join("ablation.csv"), ablation_csv(&rows))?;
        }
        Command::Sweep {
            config,
            data,
            frozen,
            param,
            values,
            out,
            overrides,
        } => {
            let cfg = RunConfig::load(config.as_deref(), &overrides)?;
            if values.is_empty() {
                return Err(Error::Config("--values needs at least one value".into()).into());
            }
            let (ds, model) = inputs(&cfg, data.as_deref(), frozen.as_deref())?;
            cfg.echo(&out)?;
            write_digest(&out, &model)?;
            let rows = run_sweep(&ds.train, &model, &ds.eval, &cfg.train, param, &values)?;
            write(&out.join("sweep.csv"), sweep_csv(&rows))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { Exit::Usage } else { Exit::Ok };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(Exit::Ok as u8),
        Err(e) => {
            let code = classify(&e);
            eprintln!("error: {e:#}");
            ExitCode::from(code as u8)
        }
    }
}
