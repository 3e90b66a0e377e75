//! Stage artifacts on disk. JSON artifacts carry the config hash inline;
//! CSV and binary files get a `<name>.meta.json` sidecar.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use semiopf::Network;

pub const DEMANDS: &str = "demands.csv";
pub const LABELS: &str = "labels.json";
pub const RIDGE: &str = "ridge.json";
pub const TRAIN_SET: &str = "dataset_train.json";
pub const VAL_SET: &str = "dataset_val.json";
pub const BRANCH_SET: &str = "branch_set.json";
pub const TEST_REFERENCE: &str = "test_reference.json";

pub fn model_file(mode: &str) -> String {
    format!("model_{mode}.bin")
}

pub fn train_log_file(mode: &str) -> String {
    format!("train_log_{mode}.csv")
}

pub fn eval_file(mode: &str) -> String {
    format!("eval_{mode}.json")
}

/// A prerequisite that is absent or was produced under another config.
#[derive(Debug)]
pub struct MissingArtifact(pub String);

impl fmt::Display for MissingArtifact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for MissingArtifact {}

#[derive(Debug, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub config_hash: String,
    pub stage: String,
    pub payload: T,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Meta {
    pub config_hash: String,
    pub stage: String,
}

pub struct Store {
    pub dir: PathBuf,
    pub hash: String,
}

/// Stage that produces each artifact, for error messages.
fn producer(name: &str) -> &'static str {
    match name {
        DEMANDS => "gen-demands",
        LABELS => "solve-ref",
        RIDGE | TRAIN_SET | VAL_SET => "pseudo-label",
        BRANCH_SET => "branch-set",
        TEST_REFERENCE => "eval",
        n if n.starts_with("model_") => "train",
        n if n.starts_with("eval_") => "eval",
        _ => "the producing stage",
    }
}

impl Store {
    pub fn new(dir: &Path, hash: String) -> anyhow::Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            hash,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn exists(&self, name: &str) -> bool {
        self.path(name).exists()
    }

    fn require(&self, name: &str) -> anyhow::Result<PathBuf> {
        let p = self.path(name);
        if !p.exists() {
            return Err(MissingArtifact(format!(
                "missing artifact {}: run `semiopf {}` first",
                p.display(),
                producer(name)
            ))
            .into());
        }
        Ok(p)
    }

    fn check_hash(&self, name: &str, found: &str) -> anyhow::Result<()> {
        if found != self.hash {
            return Err(MissingArtifact(format!(
                "artifact {} was produced with config hash {}, current config hash is {}; rerun `semiopf {}`",
                self.path(name).display(),
                &found[..found.len().min(12)],
                &self.hash[..12],
                producer(name)
            ))
            .into());
        }
        Ok(())
    }

    pub fn write_json<T: Serialize>(&self, name: &str, stage: &str, payload: &T) -> anyhow::Result<()> {
        let p = self.path(name);
        let f = File::create(&p).with_context(|| format!("creating {}", p.display()))?;
        let env = Envelope {
            config_hash: self.hash.clone(),
            stage: stage.to_string(),
            payload,
        };
        serde_json::to_writer(BufWriter::new(f), &env).with_context(|| format!("writing {}", p.display()))?;
        Ok(())
    }

    pub fn read_json<T: DeserializeOwned>(&self, name: &str) -> anyhow::Result<T> {
        let p = self.require(name)?;
        let f = File::open(&p)?;
        let env: Envelope<T> =
            serde_json::from_reader(BufReader::new(f)).with_context(|| format!("reading {}", p.display()))?;
        self.check_hash(name, &env.config_hash)?;
        Ok(env.payload)
    }

    pub fn write_meta(&self, name: &str, stage: &str) -> anyhow::Result<()> {
        let meta = Meta {
            config_hash: self.hash.clone(),
            stage: stage.to_string(),
        };
        let p = self.path(&format!("{name}.meta.json"));
        std::fs::write(&p, serde_json::to_string_pretty(&meta)?).with_context(|| format!("writing {}", p.display()))?;
        Ok(())
    }

    /// Path of a sidecar-tracked artifact after checking its hash.
    pub fn require_with_meta(&self, name: &str) -> anyhow::Result<PathBuf> {
        let p = self.require(name)?;
        let mp = self.path(&format!("{name}.meta.json"));
        let text = std::fs::read_to_string(&mp).with_context(|| format!("reading {}", mp.display()))?;
        let meta: Meta = serde_json::from_str(&text)?;
        self.check_hash(name, &meta.config_hash)?;
        Ok(p)
    }
}

pub fn write_demands(path: &Path, net: &Network, demands: &[Vec<f64>]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    let header: Vec<String> = net
        .buses
        .iter()
        .map(|b| format!("pd_{}", b.id))
        .chain(net.buses.iter().map(|b| format!("qd_{}", b.id)))
        .collect();
    w.write_record(&header)?;
    for x in demands {
        w.write_record(x.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_demands(path: &Path, net: &Network) -> anyhow::Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let width = r.headers()?.len();
    if width != 2 * net.n_bus() {
        bail!(
            "{} has {width} columns but the case has {} buses",
            path.display(),
            net.n_bus()
        );
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row: Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        out.push(row.with_context(|| format!("{}: bad number on line {}", path.display(), out.len() + 2))?);
    }
    Ok(out)
}
