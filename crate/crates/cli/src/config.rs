use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use oodseg::world::{FrozenConfig, SceneSpec};
use oodseg::TrainConfig;
use serde::{Deserialize, Serialize};

/// Everything a run needs; parsed from JSON, unknown keys rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: SceneSpec,
    pub frozen: FrozenConfig,
    pub train: TrainConfig,
    pub n_train: usize,
    pub n_eval: usize,
    /// Write a head checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: usize,
    pub data: Option<PathBuf>,
    pub frozen_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            frozen: FrozenConfig::default(),
            train: TrainConfig::default(),
            n_train: 32,
            n_eval: 16,
            checkpoint_every: 0,
            data: None,
            frozen_dir: None,
        }
    }
}

/// Command-line overrides applied on top of the JSON file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Master seed for scenes, frozen model and training.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub patches: Option<usize>,
    /// Parallelize per-image preparation within each batch.
    #[arg(long)]
    pub parallel: bool,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).map_err(|e| oodseg::Error::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.scene.seed = s;
            self.train.seed = s;
        }
        if let Some(v) = o.iterations {
            self.train.iterations = v;
            self.train.warmup_iters = self.train.warmup_iters.min(v);
        }
        if let Some(v) = o.warmup {
            self.train.warmup_iters = v;
        }
        if let Some(v) = o.batch_size {
            self.train.batch_size = v;
        }
        if let Some(v) = o.lambda {
            self.train.lambda = v;
        }
        if let Some(v) = o.gamma {
            self.train.loss.gamma = v;
        }
        if let Some(v) = o.patches {
            self.train.patches.num_patches = v;
        }
        if o.parallel {
            self.train.parallel = true;
        }
    }

    pub fn validate(&self) -> oodseg::Result<()> {
        self.scene.validate()?;
        self.train.validate()?;
        if self.train.head.feature_dim != self.frozen.feature_dim {
            return Err(oodseg::Error::Config(format!(
                "train.head.feature_dim {} differs from frozen.feature_dim {}",
                self.train.head.feature_dim, self.frozen.feature_dim
            )));
        }
        if self.n_train < 2 || self.n_eval < 1 {
            return Err(oodseg::Error::Config("need n_train >= 2 and n_eval >= 1".into()));
        }
        Ok(())
    }

    /// Writes the effective config as `config.json` into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let path = dir.join("config.json");
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }
}
