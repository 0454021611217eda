//! Binary checkpoints and experiment configuration files.
//!
//! Checkpoint layout: the 8-byte magic `SSMPEFT1`, the manifest length as a
//! little-endian `u64`, the JSON manifest, zero padding to a 64-byte
//! boundary, then one little-endian `f64` array per entry. Every array
//! starts on a 64-byte boundary; manifest offsets are absolute.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adapters::AdapterSpec;
use crate::analysis::{find_config, ArchConfig};
use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::model::{MambaModel, Param, ParamStore, Trainable};
use crate::tasks::TaskSpec;
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"SSMPEFT1";
pub const ALIGN: usize = 64;
pub const SEED_ENV: &str = "SSMPEFT_SEED";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainFlag {
    Frozen,
    Full,
    Masked,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub trainable: TrainFlag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<bool>>,
    pub decay: bool,
    pub backbone: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<ArchConfig>,
    pub entries: Vec<ManifestEntry>,
}

/// Named parameters plus the architecture they belong to, if any.
#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub arch: Option<ArchConfig>,
    pub params: ParamStore,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

impl Checkpoint {
    pub fn from_model(model: &MambaModel) -> Self {
        Checkpoint {
            arch: Some(model.arch.clone()),
            params: model.params.clone(),
        }
    }

    pub fn into_model(self) -> Result<MambaModel> {
        let arch = self
            .arch
            .ok_or_else(|| Error::Format("checkpoint carries no architecture".into()))?;
        Ok(MambaModel {
            arch,
            params: self.params,
        })
    }

    /// Offsets that [`Checkpoint::to_bytes`] assigns, given the manifest size.
    fn layout(&self, manifest_len: usize) -> (usize, Vec<usize>) {
        let mut at = align_up(MAGIC.len() + 8 + manifest_len);
        let offsets = self
            .params
            .iter()
            .map(|(_, p)| {
                let o = at;
                at = align_up(at + 8 * p.tensor.len());
                o
            })
            .collect();
        (at, offsets)
    }

    fn manifest(&self, offsets: &[usize]) -> Manifest {
        let entries = self
            .params
            .iter()
            .zip(offsets)
            .map(|((name, p), &off)| {
                let (trainable, mask) = match &p.trainable {
                    Trainable::Frozen => (TrainFlag::Frozen, None),
                    Trainable::Full => (TrainFlag::Full, None),
                    Trainable::Masked(m) => (TrainFlag::Masked, Some(m.clone())),
                };
                ManifestEntry {
                    name: name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    dtype: "f64".into(),
                    offset: off as u64,
                    trainable,
                    mask,
                    decay: p.decay,
                    backbone: p.backbone,
                }
            })
            .collect();
        Manifest {
            arch: self.arch.clone(),
            entries,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        // offsets change the manifest length, which moves the offsets: iterate
        // until the width of the numbers settles
        let mut manifest_len = 0;
        let (end, offsets, json) = loop {
            let (end, offsets) = self.layout(manifest_len);
            let json = serde_json::to_vec(&self.manifest(&offsets)).expect("manifest serializes");
            if json.len() == manifest_len {
                break (end, offsets, json);
            }
            manifest_len = json.len();
        };
        let mut out = vec![0u8; end];
        out[..8].copy_from_slice(MAGIC);
        out[8..16].copy_from_slice(&(json.len() as u64).to_le_bytes());
        out[16..16 + json.len()].copy_from_slice(&json);
        for ((_, p), &off) in self.params.iter().zip(&offsets) {
            for (i, v) in p.tensor.data().iter().enumerate() {
                out[off + 8 * i..off + 8 * i + 8].copy_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(Error::Format("missing SSMPEFT1 magic".into()));
        }
        if bytes.len() < 16 {
            return Err(Error::Corrupt("file ends inside the header".into()));
        }
        let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json_end = 16usize
            .checked_add(manifest_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Corrupt(format!("manifest of {manifest_len} bytes runs past end of file")))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..json_end])
            .map_err(|e| Error::Corrupt(format!("unreadable manifest: {e}")))?;
        let mut cursor = align_up(json_end);
        let mut params = ParamStore::new();
        for e in &manifest.entries {
            if e.dtype != "f64" {
                return Err(Error::Corrupt(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            let off = e.offset as usize;
            if off % ALIGN != 0 || off < cursor {
                return Err(Error::Corrupt(format!("{}: offset {off} misaligned or overlapping", e.name)));
            }
            let n: usize = e.shape.iter().product();
            let end = off + 8 * n;
            if end > bytes.len() {
                return Err(Error::Corrupt(format!("{}: payload truncated", e.name)));
            }
            let data = bytes[off..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let trainable = match (&e.trainable, &e.mask) {
                (TrainFlag::Frozen, None) => Trainable::Frozen,
                (TrainFlag::Full, None) => Trainable::Full,
                (TrainFlag::Masked, Some(m)) if m.len() == n => Trainable::Masked(m.clone()),
                _ => return Err(Error::Corrupt(format!("{}: inconsistent trainable mask", e.name))),
            };
            if params.contains(&e.name) {
                return Err(Error::Corrupt(format!("duplicate entry {}", e.name)));
            }
            params.insert(
                e.name.clone(),
                Param {
                    tensor: Tensor::new(&e.shape, data).map_err(|err| Error::Corrupt(err.to_string()))?,
                    trainable,
                    decay: e.decay,
                    backbone: e.backbone,
                },
            );
            cursor = align_up(end);
        }
        if cursor != bytes.len() {
            return Err(Error::Corrupt(format!(
                "payload ends at byte {cursor} but the file has {}",
                bytes.len()
            )));
        }
        Ok(Checkpoint {
            arch: manifest.arch,
            params,
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArchRef {
    Builtin(String),
    Inline(ArchConfig),
}

impl ArchRef {
    pub fn resolve(&self, registry: &[ArchConfig]) -> Result<ArchConfig> {
        match self {
            ArchRef::Builtin(name) => find_config(registry, name),
            ArchRef::Inline(a) => {
                a.validate()?;
                Ok(a.clone())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub spec: TaskSpec,
    pub train_size: usize,
    pub val_size: usize,
    /// First seed of the generated data; validation seeds follow the training ones.
    #[serde(default)]
    pub data_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub arch: ArchRef,
    pub adapter: AdapterSpec,
    pub task: TaskConfig,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    /// Backbone to adapt; a fresh random one when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,
}

pub const EXPERIMENT_SCHEMA: &str = include_str!("../../../schemas/experiment.schema.json");

/// Checks `value` against a JSON schema; the error path names the first
/// offending field.
pub fn validate_against(schema: &str, value: &Value) -> Result<()> {
    let schema: Value = serde_json::from_str(schema)?;
    let validator = jsonschema::validator_for(&schema).map_err(|e| Error::Config {
        path: "<schema>".into(),
        message: e.to_string(),
    })?;
    if let Some(err) = validator.iter_errors(value).next() {
        let path = err.instance_path.to_string();
        return Err(Error::Config {
            path: if path.is_empty() { "/".into() } else { path },
            message: err.to_string(),
        });
    }
    Ok(())
}

impl ExperimentConfig {
    /// Schema check, typed parse, then semantic checks of each section.
    pub fn from_value(value: &Value) -> Result<Self> {
        validate_against(EXPERIMENT_SCHEMA, value)?;
        let cfg: ExperimentConfig = serde_json::from_value(value.clone()).map_err(|e| Error::Config {
            path: "/".into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let value: Value = serde_json::from_str(&text).map_err(|e| Error::Config {
            path: "/".into(),
            message: e.to_string(),
        })?;
        Self::from_value(&value)
    }

    pub fn validate(&self) -> Result<()> {
        self.adapter.validate()?;
        self.task.spec.validate()?;
        self.train.validate()?;
        if self.task.train_size == 0 || self.task.val_size == 0 {
            return Err(Error::Config {
                path: "/task".into(),
                message: "train_size and val_size must be positive".into(),
            });
        }
        Ok(())
    }

    /// Applies `SSMPEFT_SEED` from `env` if it is set.
    pub fn apply_seed_env(&mut self, env: Option<&str>) -> Result<()> {
        if let Some(s) = env {
            self.train.seed = s.trim().parse().map_err(|_| Error::Config {
                path: format!("${SEED_ENV}"),
                message: format!("'{s}' is not an unsigned integer"),
            })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::ArchConfig;

    #[test]
    fn empty_checkpoint_round_trips() {
        let c = Checkpoint::default();
        let bytes = c.to_bytes();
        assert_eq!(bytes.len() % ALIGN, 0);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert!(back.params.is_empty());
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn model_round_trips_bitwise() {
        let m = MambaModel::init(&ArchConfig::toy(8, 2, 4, 16), 1).unwrap();
        let bytes = Checkpoint::from_model(&m).to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        for ((na, a), (nb, b)) in m.params.iter().zip(back.params.iter()) {
            assert_eq!(na, nb);
            assert!(a.tensor.bit_eq(&b.tensor));
        }
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let m = MambaModel::init(&ArchConfig::toy(8, 1, 4, 16), 1).unwrap();
        let bytes = Checkpoint::from_model(&m).to_bytes();
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&wrong), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 64]), Err(Error::Corrupt(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..12]), Err(Error::Corrupt(_))));
    }
}
