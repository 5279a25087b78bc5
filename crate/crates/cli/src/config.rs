//! Run configuration: one JSON document, defaults for every field.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use qosnet_core::corpus::{DEFAULT_MISSING_MARKER, DEFAULT_SEED, DEFAULT_VALIDATION_FRACTION};
use qosnet_core::{EncoderConfig, FusionConfig, HeadKind, McConfig, Metric, TrainConfig, UnfreezeSchedule};
use serde::{Deserialize, Serialize};

pub const ENV_SEED: &str = "QOSNET_SEED";
pub const ENV_WORKDIR: &str = "QOSNET_WORKDIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub users: PathBuf,
    pub services: PathBuf,
    pub matrix: PathBuf,
    pub workdir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            users: "data/userlist.txt".into(),
            services: "data/wslist.txt".into(),
            matrix: "data/rtMatrix.txt".into(),
            workdir: "run".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub paths: Paths,
    pub metric: Metric,
    pub density: f64,
    pub validation_fraction: f64,
    pub missing_marker: f64,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub mc: McConfig,
    pub train: TrainConfig,
    pub schedule: UnfreezeSchedule,
    pub seed: u64,
    /// Use the first-position + MLP head instead of fusion and pooling.
    pub sft: bool,
    /// Cap on the tokenizer vocabulary (specials included).
    pub max_vocab: Option<usize>,
    /// Write an extra checkpoint every this many epochs.
    pub checkpoint_every: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            paths: Paths::default(),
            metric: Metric::Rt,
            density: 0.05,
            validation_fraction: DEFAULT_VALIDATION_FRACTION,
            missing_marker: DEFAULT_MISSING_MARKER,
            encoder: EncoderConfig::default(),
            fusion: FusionConfig::default(),
            mc: McConfig::default(),
            train: TrainConfig::default(),
            schedule: UnfreezeSchedule::default(),
            seed: DEFAULT_SEED,
            sft: false,
            max_vocab: None,
            checkpoint_every: None,
        }
    }
}

/// Command-line overrides, applied after the file and the environment.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub metric: Option<Metric>,
    pub density: Option<f64>,
    pub sft: bool,
    pub seed: Option<u64>,
    pub missing_marker: Option<f64>,
    pub workdir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("config: reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("config: parsing {}", path.display()))
    }

    /// File (or defaults), then `QOSNET_SEED` / `QOSNET_WORKDIR`, then flags.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        if let Ok(v) = std::env::var(ENV_SEED) {
            cfg.seed = v
                .parse()
                .with_context(|| format!("config: {ENV_SEED}={v} is not an integer"))?;
        }
        if let Ok(v) = std::env::var(ENV_WORKDIR) {
            cfg.paths.workdir = v.into();
        }
        if let Some(m) = overrides.metric {
            cfg.metric = m;
        }
        if let Some(d) = overrides.density {
            cfg.density = d;
        }
        if overrides.sft {
            cfg.sft = true;
        }
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        if let Some(m) = overrides.missing_marker {
            cfg.missing_marker = m;
        }
        if let Some(w) = &overrides.workdir {
            cfg.paths.workdir = w.clone();
        }
        cfg.propagate_seed();
        Ok(cfg)
    }

    /// Copies the run seed into every seeded component.
    pub fn propagate_seed(&mut self) {
        self.encoder.seed = self.seed;
        self.train.seed = self.seed;
        self.mc.seed = self.seed;
    }

    pub fn head_kind(&self) -> HeadKind {
        if self.sft {
            HeadKind::Cls
        } else {
            HeadKind::MultiPool
        }
    }

    pub fn head_label(&self) -> &'static str {
        match self.head_kind() {
            HeadKind::MultiPool => "multi_pool",
            HeadKind::Cls => "cls",
        }
    }
}

/// Artifact locations inside a workdir.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn split(&self, name: &str) -> PathBuf {
        self.root.join("data").join(format!("{name}.jsonl"))
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("model.bin")
    }

    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("epoch_{epoch:04}.bin"))
    }

    pub fn train_log(&self) -> PathBuf {
        self.root.join("train_log.csv")
    }

    pub fn step_log(&self) -> PathBuf {
        self.root.join("train_steps.csv")
    }

    pub fn calibration(&self) -> PathBuf {
        self.root.join("calibration.json")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn predictions(&self) -> PathBuf {
        self.eval_dir().join("predictions.jsonl")
    }
}
