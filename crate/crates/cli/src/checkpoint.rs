//! Versioned JSON checkpoints for trained detectors.
//!
//! A checkpoint carries everything needed to replay the policy on new
//! data: network weights, the feature pipeline (config, view columns,
//! standardizer) and the training provenance (seed, episodes, reward
//! constants). Weights serialize as JSON numbers, which round-trip f64
//! bit-exactly, so reloaded policies act identically.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mds_core::adversary::AttackManifest;
use mds_core::agent::RewardConfig;
use mds_core::net::NetworkParams;
use mds_core::trace::{FeatureConfig, Standardizer};
use serde::{Deserialize, Serialize};

use crate::trace_io::atomic_write;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub role: String,
    pub seed: u64,
    pub episodes: usize,
    pub feature: FeatureConfig,
    pub view: Vec<usize>,
    pub reward: RewardConfig,
    pub standardizer: Standardizer,
    pub params: NetworkParams,
}

impl Checkpoint {
    pub fn validate(&self) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            bail!(
                "checkpoint version {} unsupported (expected {})",
                self.version,
                CHECKPOINT_VERSION
            );
        }
        if self.view.is_empty() {
            bail!("checkpoint has an empty feature view");
        }
        if self.standardizer.dim() != self.view.len() {
            bail!(
                "standardizer width {} does not match view width {}",
                self.standardizer.dim(),
                self.view.len()
            );
        }
        if self.params.spec.feature_dim != self.view.len() {
            bail!(
                "network feature width {} does not match view width {}",
                self.params.spec.feature_dim,
                self.view.len()
            );
        }
        self.params.spec.validate()?;
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    ckpt.validate()?;
    let json = serde_json::to_vec_pretty(ckpt).context("serializing checkpoint")?;
    atomic_write(path, &json)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let ckpt: Checkpoint =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    ckpt.validate()
        .with_context(|| format!("validating {}", path.display()))?;
    Ok(ckpt)
}

/// Poisoning manifests live next to the checkpoint they describe.
pub fn attack_manifest_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".to_string());
    name.push_str(".attack.json");
    checkpoint.with_file_name(name)
}

pub fn save_attack_manifest(checkpoint: &Path, manifest: &AttackManifest) -> Result<()> {
    let json = serde_json::to_vec_pretty(manifest).context("serializing attack manifest")?;
    atomic_write(&attack_manifest_path(checkpoint), &json)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mds_core::net::NetworkSpec;
    use mds_core::seeding;

    fn sample() -> Checkpoint {
        let spec = NetworkSpec {
            window: 2,
            feature_dim: 4,
            lstm_hidden: 3,
            dense: vec![3],
        };
        let mut rng = seeding::stream(9, "ckpt", 0);
        Checkpoint {
            version: CHECKPOINT_VERSION,
            role: "source".to_string(),
            seed: 9,
            episodes: 12,
            feature: FeatureConfig::default(),
            view: vec![0, 1, 2, 3],
            reward: RewardConfig::default(),
            standardizer: Standardizer {
                mean: vec![0.1, -0.2, 3.0, 0.0],
                std: vec![1.0, 2.0, 0.5, 1.5],
            },
            params: NetworkParams::init(spec, &mut rng).unwrap(),
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        let ckpt = sample();
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.params.weights, ckpt.params.weights);
    }

    #[test]
    fn version_and_shape_are_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        let mut ckpt = sample();
        ckpt.version = 99;
        assert!(save_checkpoint(&path, &ckpt).is_err());
        let mut ckpt = sample();
        ckpt.view = vec![0];
        assert!(ckpt.validate().is_err());
    }

    #[test]
    fn manifest_sits_next_to_checkpoint() {
        let p = attack_manifest_path(Path::new("/tmp/run/source-3.json"));
        assert_eq!(p, Path::new("/tmp/run/source-3.attack.json"));
    }
}
