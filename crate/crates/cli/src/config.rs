//! Run configuration: one TOML file, every key optional.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use semiopf::trainer::{LossWeights, TrainConfig};
use semiopf::{Mode, Network};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Total demand samples, split into train/validation/test.
    pub samples: usize,
    pub split: [f64; 3],
    /// Per-bus uniform scaling range of the nominal demand.
    pub scale_range: [f64; 2],
    /// Training samples solved with the reference OPF.
    pub labeled: usize,
    /// Share of the labeled samples used to fit the ridge model.
    pub ridge_train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            samples: 10_000,
            split: [0.7, 0.1, 0.2],
            scale_range: [0.8, 1.2],
            labeled: 100,
            ridge_train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RidgeConfig {
    pub alpha_p: f64,
    pub alpha_v: f64,
}

impl Default for RidgeConfig {
    fn default() -> Self {
        Self {
            alpha_p: 0.01,
            alpha_v: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub mode: Mode,
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub lr: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub beta: f64,
    pub validate_full: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            mode: t.mode,
            hidden: t.hidden,
            batch_size: t.batch_size,
            warmup_epochs: t.warmup_epochs,
            epochs: t.epochs,
            lr: t.lr,
            milestones: t.milestones,
            gamma: t.gamma,
            beta: t.beta,
            validate_full: t.validate_full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Built-in case name (`ieee118`, `ieee118-plain`, `two-bus`) or a path
    /// to a MATPOWER `.m` / JSON case file.
    pub case: String,
    pub out: PathBuf,
    pub seed: u64,
    /// Worker threads; 0 leaves the pool at its default size.
    pub threads: usize,
    pub deterministic: bool,
    pub data: DataConfig,
    pub ridge: RidgeConfig,
    pub weights: LossWeights,
    pub train: TrainSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            case: "ieee118".into(),
            out: PathBuf::from("run"),
            seed: 1,
            threads: 0,
            deterministic: false,
            data: DataConfig::default(),
            ridge: RidgeConfig::default(),
            weights: LossWeights::default(),
            train: TrainSection::default(),
        }
    }
}

pub const BUILTIN_CASES: [&str; 3] = ["ieee118", "ieee118-plain", "two-bus"];

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let d = &self.data;
        let sum: f64 = d.split.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || d.split.iter().any(|s| *s < 0.0) {
            bail!("data.split must be nonnegative and sum to 1, got {:?}", d.split);
        }
        if !(d.scale_range[0] >= 0.0 && d.scale_range[0] <= d.scale_range[1]) {
            bail!("data.scale_range must satisfy 0 <= lo <= hi, got {:?}", d.scale_range);
        }
        if !(d.ridge_train_fraction > 0.0 && d.ridge_train_fraction <= 1.0) {
            bail!("data.ridge_train_fraction must lie in (0, 1]");
        }
        if !(self.ridge.alpha_p > 0.0 && self.ridge.alpha_v > 0.0) {
            bail!("ridge alphas must be positive");
        }
        if !BUILTIN_CASES.contains(&self.case.as_str()) && !Path::new(&self.case).exists() {
            bail!(
                "case `{}` is neither a built-in case ({}) nor an existing file",
                self.case,
                BUILTIN_CASES.join(", ")
            );
        }
        self.train_config().validate()?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            mode: t.mode,
            hidden: t.hidden.clone(),
            batch_size: t.batch_size,
            warmup_epochs: t.warmup_epochs,
            epochs: t.epochs,
            lr: t.lr,
            milestones: t.milestones.clone(),
            gamma: t.gamma,
            seed: self.seed,
            beta: t.beta,
            weights: self.weights,
            deterministic: self.deterministic,
            validate_full: t.validate_full,
        }
    }

    pub fn network(&self) -> anyhow::Result<Network> {
        let net = match self.case.as_str() {
            "ieee118" => semiopf::cases::ieee118()?,
            "ieee118-plain" => semiopf::cases::ieee118_plain()?,
            "two-bus" => semiopf::cases::two_bus()?,
            path => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading case {path}"))?;
                semiopf::parse_case(&text)?
            }
        };
        Ok(net)
    }

    /// Sample counts of the train, validation and test splits.
    pub fn split_counts(&self) -> [usize; 3] {
        let n = self.data.samples;
        let tr = (self.data.split[0] * n as f64).round() as usize;
        let va = ((self.data.split[1] * n as f64).round() as usize).min(n - tr.min(n));
        let tr = tr.min(n);
        [tr, va, n - tr - va]
    }

    /// SHA-256 over the settings that shape shared artifacts. Mode, thread
    /// count and the deterministic flag are left out so a mode sweep reuses
    /// the same data stages.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.train.mode = Mode::M0;
        c.threads = 0;
        c.deterministic = false;
        c.out = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
