//! Experiment runner: resolves a config, runs one recipe on a local thread
//! pool and writes `<out>/<recipe>/<hash>/{data.csv, manifest.json}`.

pub mod config;
pub mod recipes;
pub mod validate;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use config::{ExperimentConfig, Overrides};

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub recipe: String,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub seed: u64,
    pub threads: usize,
    pub version: String,
    pub runtime_s: f64,
    /// sha256 of every file written, by file name.
    pub artifact_checksums: BTreeMap<String, String>,
    pub result: Value,
}

/// A config that parsed and resolved; running it can still fail.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub recipe: String,
    pub config: ExperimentConfig,
    pub hash: String,
}

pub fn prepare(recipe: &str, config_path: &Path, ov: &Overrides) -> Result<Prepared> {
    let raw = config::load(config_path)?;
    prepare_from(recipe, raw, ov)
}

pub fn prepare_from(recipe: &str, raw: ExperimentConfig, ov: &Overrides) -> Result<Prepared> {
    let config = config::resolve(recipe, raw, ov)?;
    let hash = config::config_hash(&config)?;
    Ok(Prepared {
        recipe: recipe.to_string(),
        config,
        hash,
    })
}

pub struct RunReport {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Prepared {
    pub fn out_dir(&self) -> PathBuf {
        let base = self
            .config
            .output
            .clone()
            .unwrap_or_else(|| PathBuf::from("out"));
        base.join(&self.recipe).join(&self.hash)
    }

    pub fn run(self) -> Result<RunReport> {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(t) = self.config.threads {
            builder = builder.num_threads(t);
        }
        let pool = builder.build().context("cannot start worker threads")?;
        let threads = pool.current_num_threads();
        let start = Instant::now();
        let art = pool.install(|| recipes::run(&self.recipe, &self.config))?;
        let runtime_s = start.elapsed().as_secs_f64();

        let dir = self.out_dir();
        std::fs::create_dir_all(&dir)
            .with_context(|| format!("cannot create {}", dir.display()))?;
        let mut checksums = BTreeMap::new();
        let files = std::iter::once(("data.csv".to_string(), art.data)).chain(art.extra);
        for (name, bytes) in files {
            let path = dir.join(&name);
            std::fs::write(&path, &bytes)
                .with_context(|| format!("cannot write {}", path.display()))?;
            checksums.insert(name, hex::encode(Sha256::digest(&bytes)));
        }
        let manifest = Manifest {
            recipe: self.recipe.clone(),
            seed: self.config.seed.unwrap_or_default(),
            config: self.config,
            config_hash: self.hash,
            threads,
            version: env!("CARGO_PKG_VERSION").to_string(),
            runtime_s,
            artifact_checksums: checksums,
            result: art.result,
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?)
            .with_context(|| format!("cannot write {}", path.display()))?;
        Ok(RunReport { dir, manifest })
    }
}
