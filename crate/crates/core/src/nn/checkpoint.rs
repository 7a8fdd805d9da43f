//! Single-document JSON checkpoints for one network.
//!
//! Field order is fixed by the struct layout and floats are written in
//! shortest round-trip form, so `load` followed by `save` reproduces the
//! file byte for byte.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::params::{BlockDesc, ParamStore};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u64,
    /// Which network this is, e.g. `prediction`, `update`, `one_to_one`.
    pub kind: String,
    pub config: serde_json::Value,
    pub blocks: Vec<BlockDesc>,
    pub params: Vec<f64>,
    pub optimizer: AdamState,
    pub epoch: u64,
    pub seed: u64,
}

impl Checkpoint {
    pub fn new(
        kind: &str,
        config: serde_json::Value,
        store: &ParamStore,
        optimizer: AdamState,
        epoch: u64,
        seed: u64,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: kind.to_string(),
            config,
            blocks: store.blocks().to_vec(),
            params: store.values().to_vec(),
            optimizer,
            epoch,
            seed,
        }
    }

    pub fn store(&self) -> Result<ParamStore> {
        ParamStore::from_parts(self.blocks.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        let doc: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| corrupt(e.to_string()))?;
        let found = doc
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| corrupt("missing format_version".into()))?;
        if found != FORMAT_VERSION {
            return Err(Error::Version {
                found,
                expected: FORMAT_VERSION,
            });
        }
        let ck: Checkpoint = serde_json::from_value(doc).map_err(|e| corrupt(e.to_string()))?;
        let expected: usize = ck.blocks.iter().map(BlockDesc::size).sum();
        if expected != ck.params.len() {
            return Err(corrupt(format!(
                "{} parameters for blocks totalling {expected}",
                ck.params.len()
            )));
        }
        if ck.optimizer.m.len() != expected || ck.optimizer.v.len() != expected {
            return Err(corrupt("optimizer moments do not match parameter count".into()));
        }
        Ok(ck)
    }

    /// Writes to a sibling temp file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing {
                what: "checkpoint",
                path: path.to_path_buf(),
            });
        }
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::{NetSpec, RecurrentNet};
    use rand::SeedableRng;

    fn sample() -> Checkpoint {
        let spec = NetSpec {
            input_dim: 3,
            embed_dim: 4,
            hidden: 5,
            mlp_hidden: 4,
            output_dim: 5,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let (_, store) = RecurrentNet::init(spec, &mut rng).unwrap();
        let mut opt = AdamState::new(store.len(), 0.001);
        let mut p = store.values().to_vec();
        let g: Vec<f64> = (0..p.len()).map(|i| (i as f64 * 0.77).sin() * 1e-3).collect();
        opt.step(&mut p, &g).unwrap();
        let store = ParamStore::from_parts(store.blocks().to_vec(), p).unwrap();
        Checkpoint::new("prediction", serde_json::json!({"hidden": 5}), &store, opt, 3, 42)
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let ck = sample();
        ck.save(&path).unwrap();
        let first = fs::read(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ck);
        for (a, b) in loaded.params.iter().zip(&ck.params) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        loaded.save(&path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let bytes = sample().to_bytes().unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn wrong_version_names_both() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let mut ck = sample();
        ck.format_version = 7;
        fs::write(&path, ck.to_bytes().unwrap()).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(matches!(err, Error::Version { found: 7, expected: 1 }));
        let msg = err.to_string();
        assert!(msg.contains('7') && msg.contains('1'));
    }

    #[test]
    fn missing_file() {
        assert!(matches!(
            Checkpoint::load(Path::new("/nonexistent/ck.json")),
            Err(Error::Missing { .. })
        ));
    }
}
