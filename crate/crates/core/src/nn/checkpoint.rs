//! Checkpoint files: a JSON manifest next to a little-endian binary blob.
//!
//! `<stem>.json` describes every network (spec, layout, offset into the
//! blob) and `<stem>.bin` holds all parameters back to back. The blob length
//! must equal `element_count * element size` of the declared dtype.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::mlp::{LayerLayout, MlpParams, MlpSpec};
use super::real::Real;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkEntry {
    pub name: String,
    pub spec: MlpSpec,
    pub layout: Vec<LayerLayout>,
    pub offset: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub dtype: String,
    pub seed: u64,
    pub element_count: usize,
    pub networks: Vec<NetworkEntry>,
    /// Model-specific fields (latent dimension, input ordering, ...).
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedNetwork<F> {
    pub name: String,
    pub params: MlpParams<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    pub manifest: Manifest,
    pub networks: Vec<NamedNetwork<F>>,
}

impl<F: Real> Checkpoint<F> {
    pub fn new(
        kind: &str,
        seed: u64,
        meta: serde_json::Value,
        networks: Vec<NamedNetwork<F>>,
    ) -> Self {
        let mut offset = 0;
        let entries = networks
            .iter()
            .map(|n| {
                let e = NetworkEntry {
                    name: n.name.clone(),
                    spec: n.params.spec().clone(),
                    layout: n.params.layout().to_vec(),
                    offset,
                    count: n.params.len(),
                };
                offset += e.count;
                e
            })
            .collect();
        Checkpoint {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                kind: kind.to_string(),
                dtype: F::DTYPE.to_string(),
                seed,
                element_count: offset,
                networks: entries,
                meta,
            },
            networks,
        }
    }

    pub fn network(&self, name: &str) -> Result<&MlpParams<F>> {
        self.networks
            .iter()
            .find(|n| n.name == name)
            .map(|n| &n.params)
            .ok_or_else(|| Error::InvalidInput(format!("checkpoint has no network {name:?}")))
    }

    pub fn paths(stem: &Path) -> (PathBuf, PathBuf) {
        (stem.with_extension("json"), stem.with_extension("bin"))
    }

    pub fn blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.manifest.element_count * F::BYTES);
        for n in &self.networks {
            for &v in n.params.as_slice() {
                v.write_le(&mut out);
            }
        }
        out
    }

    /// Writes `<stem>.json` and `<stem>.bin`.
    pub fn write(&self, stem: &Path) -> Result<(PathBuf, PathBuf)> {
        let (json_path, bin_path) = Self::paths(stem);
        if let Some(dir) = stem.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let json = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
        fs::write(&bin_path, self.blob()).map_err(|e| Error::io(&bin_path, e))?;
        Ok((json_path, bin_path))
    }

    pub fn read(stem: &Path) -> Result<Self> {
        let (json_path, bin_path) = Self::paths(stem);
        let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        Self::from_parts(manifest, &bytes, &bin_path)
    }

    pub fn from_parts(manifest: Manifest, bytes: &[u8], origin: &Path) -> Result<Self> {
        let format_err = |offset: usize, detail: String| Error::Format {
            path: origin.to_path_buf(),
            offset,
            detail,
        };
        if manifest.format_version != FORMAT_VERSION {
            return Err(format_err(
                0,
                format!("unsupported format version {}", manifest.format_version),
            ));
        }
        if manifest.dtype != F::DTYPE {
            return Err(format_err(
                0,
                format!(
                    "checkpoint dtype {} but {} requested",
                    manifest.dtype,
                    F::DTYPE
                ),
            ));
        }
        let expected = manifest.element_count * F::BYTES;
        if bytes.len() != expected {
            return Err(format_err(
                bytes.len().min(expected),
                format!(
                    "blob has {} bytes, manifest declares {} x {} = {expected}",
                    bytes.len(),
                    manifest.element_count,
                    F::BYTES
                ),
            ));
        }
        let mut networks = Vec::with_capacity(manifest.networks.len());
        for e in &manifest.networks {
            if e.layout != e.spec.layout() || e.count != e.spec.num_params() {
                return Err(format_err(
                    e.offset * F::BYTES,
                    format!("layout of network {:?} does not match its spec", e.name),
                ));
            }
            if e.offset + e.count > manifest.element_count {
                return Err(format_err(
                    e.offset * F::BYTES,
                    format!("network {:?} overruns the blob", e.name),
                ));
            }
            let data = bytes[e.offset * F::BYTES..(e.offset + e.count) * F::BYTES]
                .chunks_exact(F::BYTES)
                .map(F::read_le)
                .collect();
            networks.push(NamedNetwork {
                name: e.name.clone(),
                params: MlpParams::from_flat(e.spec.clone(), data)?,
            });
        }
        Ok(Checkpoint { manifest, networks })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::mlp::Activation;
    use crate::nn::rng::RngStream;

    fn sample() -> Checkpoint<f32> {
        let mut rng = RngStream::new(1, 2);
        let a = MlpParams::init(
            MlpSpec::new(vec![3, 4, 2], Activation::Relu).unwrap(),
            &mut rng,
        )
        .unwrap();
        let b = MlpParams::init(
            MlpSpec::new(vec![2, 6], Activation::Tanh).unwrap(),
            &mut rng,
        )
        .unwrap();
        Checkpoint::new(
            "test",
            11,
            serde_json::json!({"latent_dim": 3}),
            vec![
                NamedNetwork {
                    name: "a".into(),
                    params: a,
                },
                NamedNetwork {
                    name: "b".into(),
                    params: b,
                },
            ],
        )
    }

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let ck = sample();
        let stem = dir.path().join("model");
        let (_, bin) = ck.write(&stem).unwrap();
        assert_eq!(
            fs::metadata(&bin).unwrap().len() as usize,
            ck.manifest.element_count * 4
        );
        let back = Checkpoint::<f32>::read(&stem).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn truncated_blob_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("model");
        let (_, bin) = sample().write(&stem).unwrap();
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            Checkpoint::<f32>::read(&stem),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn dtype_mismatch_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("model");
        sample().write(&stem).unwrap();
        assert!(matches!(
            Checkpoint::<f64>::read(&stem),
            Err(Error::Format { .. })
        ));
    }
}
