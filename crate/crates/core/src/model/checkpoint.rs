//! `<base>.manifest.json` + `<base>.params` (little-endian binary32, manifest order).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{FeatureRoster, GesmeNet, ModelConfig};
use crate::error::{Error, Result};
use crate::params::ParamGroup;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FORMAT: &str = "stmoe-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    /// Element offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: ModelConfig,
    pub roster: FeatureRoster,
    pub tensors: Vec<TensorRecord>,
    pub total: usize,
}

pub(crate) fn paths(base: &Path) -> (PathBuf, PathBuf) {
    let s = base.as_os_str().to_string_lossy();
    (PathBuf::from(format!("{s}.manifest.json")), PathBuf::from(format!("{s}.params")))
}

pub(crate) fn encode_f32(values: impl Iterator<Item = f32>) -> Vec<u8> {
    values.flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

impl<T: Scalar> GesmeNet<T> {
    pub fn manifest(&self) -> CheckpointManifest {
        let mut offset = 0;
        let tensors = self
            .params
            .entries()
            .iter()
            .map(|e| {
                let rec = TensorRecord {
                    name: e.name.clone(),
                    group: e.group,
                    shape: e.value.shape().to_vec(),
                    offset,
                };
                offset += e.value.len();
                rec
            })
            .collect();
        CheckpointManifest {
            format: FORMAT.to_string(),
            config: self.config.clone(),
            roster: self.roster.clone(),
            tensors,
            total: offset,
        }
    }

    /// Write the manifest and parameter blob next to `base`.
    pub fn save(&self, base: &Path) -> Result<()> {
        let (mpath, ppath) = paths(base);
        if let Some(dir) = mpath.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let blob = encode_f32(
            self.params
                .entries()
                .iter()
                .flat_map(|e| e.value.data().iter().map(|v| v.to_f64_lossy() as f32)),
        );
        fs::write(&ppath, blob)?;
        fs::write(&mpath, serde_json::to_string_pretty(&self.manifest())? + "\n")?;
        Ok(())
    }

    /// Rebuild the network from a checkpoint's config echo and fill in its parameters.
    pub fn load(base: &Path) -> Result<Self> {
        let manifest = read_manifest(base)?;
        let mut net = Self::build(&manifest.config, &manifest.roster)?;
        net.fill(base, &manifest)?;
        Ok(net)
    }

    /// Load parameters into an existing network; the checkpoint's config must match.
    pub fn load_params(&mut self, base: &Path) -> Result<()> {
        let manifest = read_manifest(base)?;
        if manifest.config != self.config || manifest.roster != self.roster {
            return Err(Error::CorruptCheckpoint(format!(
                "{} was written for a different configuration",
                paths(base).0.display()
            )));
        }
        self.fill(base, &manifest)
    }

    fn fill(&mut self, base: &Path, manifest: &CheckpointManifest) -> Result<()> {
        let expected = self.manifest();
        if manifest.tensors != expected.tensors || manifest.total != expected.total {
            return Err(Error::CorruptCheckpoint(
                "tensor list does not match the network built from its config".into(),
            ));
        }
        let bytes = fs::read(paths(base).1)?;
        if bytes.len() != manifest.total * 4 {
            return Err(Error::CorruptCheckpoint(format!(
                "blob has {} bytes, manifest needs {}",
                bytes.len(),
                manifest.total * 4
            )));
        }
        let values = decode_f32(&bytes);
        for (rec, id) in manifest.tensors.iter().zip(self.params.ids().collect::<Vec<_>>()) {
            let n: usize = rec.shape.iter().product();
            let data: Vec<T> = values[rec.offset..rec.offset + n]
                .iter()
                .map(|&v| T::from_f64_lossy(v as f64))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::CorruptCheckpoint(format!("non-finite values in `{}`", rec.name)));
            }
            *self.params.get_mut(id) = Tensor::new(&rec.shape, data)?;
        }
        Ok(())
    }
}

fn read_manifest(base: &Path) -> Result<CheckpointManifest> {
    let (mpath, _) = paths(base);
    let text = fs::read_to_string(&mpath)?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| Error::CorruptCheckpoint(format!("{}: {e}", mpath.display())))?;
    if manifest.format != FORMAT {
        return Err(Error::CorruptCheckpoint(format!(
            "unsupported format `{}`",
            manifest.format
        )));
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net(seed: u64) -> GesmeNet<f32> {
        let roster = FeatureRoster {
            zones: 3,
            lookback: 2,
            st_features: vec!["a".into()],
            weather_features: vec!["w".into()],
            poi_channels: vec!["p".into()],
        };
        let mut c = ModelConfig::table1(vec!["t".into()]);
        c.conv_filters = vec![2, 2];
        c.convrnn_filters = vec![2, 2];
        c.conv_filter_len = 3;
        c.convrnn_filter_len = 3;
        c.seed = seed;
        GesmeNet::build(&c, &roster).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("ck");
        let a = net(1);
        a.save(&base).unwrap();
        let b = GesmeNet::<f32>::load(&base).unwrap();
        assert_eq!(a.params, b.params);
        let mut c = net(2);
        assert_ne!(a.params, c.params);
        assert!(matches!(c.load_params(&base), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn truncated_blob_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("ck");
        net(1).save(&base).unwrap();
        let p = paths(&base).1;
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(GesmeNet::<f32>::load(&base), Err(Error::CorruptCheckpoint(_))));
    }
}
