use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nilm_core::synth::{ingest_csv, RawRecording, Scenario};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const CONFIG: &str = "config.json";
pub const MANIFEST: &str = "manifest.json";
pub const INDEX: &str = "dataset/index.json";
pub const SCENARIOS: &str = "dataset/scenarios.json";
pub const THETA0: &str = "checkpoints/theta0.bin";
pub const LATEST: &str = "checkpoints/latest.txt";

/// Which recordings play which role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub fs: f64,
    pub appliances: Vec<String>,
    pub train: Vec<String>,
    pub test: Vec<String>,
    #[serde(default)]
    pub solo: Vec<String>,
    #[serde(default)]
    pub mix_train: Vec<String>,
    #[serde(default)]
    pub mix_test: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: RunConfig,
    /// subcommands applied to this directory, in order
    pub history: Vec<String>,
    /// sha256 of every file under the run directory except this manifest
    pub artifacts: BTreeMap<String, String>,
}

pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn create(&self) -> Result<()> {
        for d in ["dataset", "checkpoints", "reports", "signatures"] {
            let p = self.path(d);
            std::fs::create_dir_all(&p).with_context(|| format!("creating {}", p.display()))?;
        }
        Ok(())
    }

    fn require(&self, rel: &str, hint: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if !p.is_file() {
            bail!("missing {} ({hint})", p.display());
        }
        Ok(p)
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::load(&self.require(CONFIG, "run `simulate` or `ingest` first")?)
    }

    pub fn index(&self) -> Result<DatasetIndex> {
        let p = self.require(INDEX, "missing dataset file; run `simulate` or `ingest` first")?;
        read_json(&p)
    }

    pub fn scenarios(&self) -> Result<Option<BTreeMap<String, Scenario>>> {
        let p = self.path(SCENARIOS);
        if p.is_file() {
            Ok(Some(read_json(&p)?))
        } else {
            Ok(None)
        }
    }

    pub fn recording(&self, index: &DatasetIndex, name: &str) -> Result<RawRecording> {
        let p = self.require(&format!("dataset/{name}.csv"), "dataset file listed in the index")?;
        Ok(ingest_csv(&p, index.fs)?)
    }

    pub fn latest_task(&self) -> Result<String> {
        let p = self.require(LATEST, "run `train` first")?;
        Ok(std::fs::read_to_string(&p)?.trim().to_string())
    }

    pub fn task_file(&self, task: &str, file: &str) -> String {
        format!("checkpoints/{task}/{file}")
    }

    /// Rewrites the manifest with fresh hashes and `command` appended to the history.
    pub fn update_manifest(&self, cfg: &RunConfig, command: &str) -> Result<()> {
        let mp = self.path(MANIFEST);
        let mut history = if mp.is_file() {
            read_json::<Manifest>(&mp)?.history
        } else {
            Vec::new()
        };
        history.push(command.to_string());
        let mut artifacts = BTreeMap::new();
        hash_tree(&self.root, &self.root, &mut artifacts)?;
        artifacts.remove(MANIFEST);
        let m = Manifest {
            seed: cfg.seed,
            config: cfg.clone(),
            history,
            artifacts,
        };
        write_json(&mp, &m)
    }
}

fn hash_tree(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            hash_tree(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).expect("inside root");
            let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            out.insert(rel, sha256_file(&p)?);
        }
    }
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
