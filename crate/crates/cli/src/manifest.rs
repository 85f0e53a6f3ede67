use std::time::{SystemTime, UNIX_EPOCH};

use dlsc::data::Dataset;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{describe_source, RunConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub source: String,
    pub rows: usize,
    pub dim: usize,
    pub labelled: bool,
    /// SHA-256 over the scaled features (little-endian f64) then the labels (u64).
    pub sha256: String,
}

impl DatasetDescriptor {
    pub fn new(config: &RunConfig, ds: &Dataset) -> Self {
        DatasetDescriptor {
            source: describe_source(&config.data),
            rows: ds.len(),
            dim: ds.dim(),
            labelled: ds.labels.is_some(),
            sha256: content_hash(ds),
        }
    }
}

pub fn content_hash(ds: &Dataset) -> String {
    let mut h = Sha256::new();
    for v in ds.x.data() {
        h.update(v.to_le_bytes());
    }
    for l in ds.labels.iter().flatten() {
        h.update((*l as u64).to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything needed to repeat a run with the same build.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub build_version: String,
    pub started_unix: u64,
    pub seed: u64,
    pub dataset: DatasetDescriptor,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn new(config: &RunConfig, ds: &Dataset) -> Self {
        RunManifest {
            build_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            seed: config.trainer.seed,
            dataset: DatasetDescriptor::new(config, ds),
            config: config.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dlsc::data::synth_gmm;

    #[test]
    fn hash_tracks_content() {
        let a = synth_gmm(2, 2, 5, 4.0, 1.0, 1).unwrap();
        let b = synth_gmm(2, 2, 5, 4.0, 1.0, 2).unwrap();
        assert_eq!(content_hash(&a), content_hash(&a.clone()));
        assert_ne!(content_hash(&a), content_hash(&b));
        assert_eq!(content_hash(&a).len(), 64);
    }

    #[test]
    fn manifest_round_trips() {
        let cfg = RunConfig::default();
        let ds = synth_gmm(2, 2, 5, 4.0, 1.0, 1).unwrap();
        let m = RunManifest::new(&cfg, &ds);
        let back: RunManifest = toml::from_str(&m.to_toml()).unwrap();
        assert_eq!(back, m);
    }
}
