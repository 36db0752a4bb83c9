//! Output-directory bookkeeping: file names, loaders with "run X first"
//! hints, resolved-config copies and the hash manifest.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use voc_core::env::{read_dataset, Trajectory};
use voc_core::occupancy::{load_model, OccupancyModel};
use voc_core::tokenizer::{
    build_feature_map, Codebook, FeatureMapSpec, InverseDynamicsEncoder, Tokenizer,
};
use voc_core::valuation::RewardModel;

use crate::config::ExperimentConfig;

pub const DATASET: &str = "dataset.vocd";
pub const ENCODER: &str = "encoder.ckpt";
pub const CODEBOOK: &str = "codebook.bin";
pub const MODEL: &str = "voc.ckpt";
pub const REWARD: &str = "reward.ckpt";
pub const MANIFEST: &str = "manifest.json";

pub struct Run {
    pub dir: PathBuf,
    pub cfg: ExperimentConfig,
    pub command: &'static str,
    written: Vec<String>,
}

#[derive(Default, Serialize, Deserialize)]
struct Manifest {
    tool: String,
    version: String,
    artifacts: BTreeMap<String, ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    sha256: String,
    bytes: u64,
    command: String,
    seed: u64,
}

fn producer(name: &str) -> &'static str {
    match name {
        DATASET => "gen-data",
        ENCODER => "train-musik",
        CODEBOOK => "fit-codebook",
        MODEL => "train-voc",
        REWARD => "train-reward",
        _ => "the producing subcommand",
    }
}

impl Run {
    pub fn new(cfg: ExperimentConfig, command: &'static str) -> Result<Self> {
        let dir = cfg.output_dir.clone();
        std::fs::create_dir_all(&dir)
            .with_context(|| format!("creating output dir {}", dir.display()))?;
        Ok(Self {
            dir,
            cfg,
            command,
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn input(&self, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if !p.exists() {
            anyhow::bail!(
                "{} not found; run `voc {}` first",
                p.display(),
                producer(name)
            );
        }
        Ok(p)
    }

    /// Creates an output file and records it for the manifest.
    pub fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        self.written.push(name.to_string());
        let p = self.path(name);
        Ok(BufWriter::new(
            File::create(&p).with_context(|| format!("creating {}", p.display()))?,
        ))
    }

    /// Records a file written by a library `save` call.
    pub fn record(&mut self, name: &str) -> PathBuf {
        self.written.push(name.to_string());
        self.path(name)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    pub fn dataset(&self) -> Result<Vec<Trajectory>> {
        let p = self.input(DATASET)?;
        let f = File::open(&p)?;
        read_dataset(BufReader::new(f)).with_context(|| format!("reading {}", p.display()))
    }

    pub fn encoder(&self) -> Result<InverseDynamicsEncoder> {
        let p = self.input(ENCODER)?;
        InverseDynamicsEncoder::load(&p).with_context(|| format!("loading {}", p.display()))
    }

    pub fn tokenizer(&self) -> Result<Tokenizer> {
        let p = self.input(CODEBOOK)?;
        let cb = Codebook::load(&p).with_context(|| format!("loading {}", p.display()))?;
        let encoder = match cb.feature_map() {
            FeatureMapSpec::InverseDynamics { encoder, .. } => {
                let e = self.path(encoder);
                if !e.exists() {
                    anyhow::bail!("{} not found; run `voc train-musik` first", e.display());
                }
                Some(Arc::new(InverseDynamicsEncoder::load(&e)?))
            }
            _ => None,
        };
        let fmap = build_feature_map(cb.feature_map().clone(), encoder)?;
        Ok(Tokenizer::new(cb, fmap, self.cfg.tokenizer.stack_size)?)
    }

    pub fn model(&self) -> Result<Box<dyn OccupancyModel>> {
        let p = self.input(MODEL)?;
        load_model(&p).with_context(|| format!("loading {}", p.display()))
    }

    pub fn reward(&self) -> Result<RewardModel> {
        let p = self.input(REWARD)?;
        RewardModel::load(&p).with_context(|| format!("loading {}", p.display()))
    }

    /// Writes the resolved config and folds this run's outputs into the manifest.
    pub fn finish(mut self) -> Result<()> {
        let cfg_name = format!("{}.config.json", self.command);
        let cfg = self.cfg.clone();
        self.write_json(&cfg_name, &cfg)?;
        let mpath = self.path(MANIFEST);
        let mut manifest: Manifest = match std::fs::read(&mpath) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .with_context(|| format!("parsing {}", mpath.display()))?,
            Err(_) => Manifest::default(),
        };
        manifest.tool = env!("CARGO_PKG_NAME").into();
        manifest.version = env!("CARGO_PKG_VERSION").into();
        for name in &self.written {
            let bytes = std::fs::read(self.path(name))?;
            manifest.artifacts.insert(
                name.clone(),
                ManifestEntry {
                    sha256: hex::encode(Sha256::digest(&bytes)),
                    bytes: bytes.len() as u64,
                    command: self.command.into(),
                    seed: self.cfg.seed,
                },
            );
        }
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(&mpath, text)?;
        Ok(())
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}
