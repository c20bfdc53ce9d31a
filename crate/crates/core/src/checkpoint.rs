//! Versioned JSON checkpoints. Parameter values are stored as the hex of
//! their IEEE-754 bit patterns, so a reload is bitwise exact.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::actor::ActorModel;
use crate::error::{io_err, Error, Result};
use crate::evaluator::EvaluatorModel;
use crate::net::ModelDims;
use crate::tensor::{ParamSet, Tensor};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Actor,
    Evaluator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointDims {
    pub user_dim: usize,
    pub item_dim: usize,
    pub hidden: usize,
    pub list_len: usize,
}

impl CheckpointDims {
    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            user_dim: self.user_dim,
            item_dim: self.item_dim,
            hidden: self.hidden,
        }
    }

    fn new(d: &ModelDims, list_len: usize) -> Self {
        Self {
            user_dim: d.user_dim,
            item_dim: d.item_dim,
            hidden: d.hidden,
            list_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub dims: CheckpointDims,
    pub params: ParamSet,
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    values: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Stored {
    schema_version: u32,
    kind: ModelKind,
    dims: CheckpointDims,
    params: IndexMap<String, StoredTensor>,
}

#[derive(Deserialize)]
struct VersionProbe {
    schema_version: u32,
}

pub fn encode_f64(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

pub fn decode_f64(s: &str) -> Option<f64> {
    if s.len() != 16 {
        return None;
    }
    u64::from_str_radix(s, 16).ok().map(f64::from_bits)
}

impl Checkpoint {
    pub fn from_actor(actor: &ActorModel, list_len: usize) -> Self {
        Self {
            kind: ModelKind::Actor,
            dims: CheckpointDims::new(actor.dims(), list_len),
            params: actor.params().clone(),
        }
    }

    pub fn from_evaluator(eval: &EvaluatorModel) -> Self {
        Self {
            kind: ModelKind::Evaluator,
            dims: CheckpointDims::new(eval.dims(), eval.list_len()),
            params: eval.params().clone(),
        }
    }

    pub fn into_actor(self) -> Result<ActorModel> {
        if self.kind != ModelKind::Actor {
            return Err(Error::Config("checkpoint holds an evaluator, not an actor".into()));
        }
        ActorModel::from_params(self.dims.model_dims(), self.params)
    }

    pub fn into_evaluator(self) -> Result<EvaluatorModel> {
        if self.kind != ModelKind::Evaluator {
            return Err(Error::Config("checkpoint holds an actor, not an evaluator".into()));
        }
        EvaluatorModel::from_params(self.dims.model_dims(), self.dims.list_len, self.params)
    }

    pub fn to_json(&self) -> Result<String> {
        let params = self
            .params
            .iter()
            .map(|(k, t)| {
                (
                    k.to_string(),
                    StoredTensor {
                        shape: t.shape().to_vec(),
                        values: t.data().iter().map(|&v| encode_f64(v)).collect(),
                    },
                )
            })
            .collect();
        let stored = Stored {
            schema_version: SCHEMA_VERSION,
            kind: self.kind,
            dims: self.dims,
            params,
        };
        Ok(serde_json::to_string_pretty(&stored)?)
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let parse_err = |e: serde_json::Error| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        };
        // check the version before the body so a future layout reports as such
        let probe: VersionProbe = serde_json::from_str(text).map_err(parse_err)?;
        if probe.schema_version != SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: probe.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        let stored: Stored = serde_json::from_str(text).map_err(parse_err)?;
        let mut params = ParamSet::new();
        for (name, t) in stored.params {
            let mut data = Vec::with_capacity(t.values.len());
            for v in &t.values {
                data.push(decode_f64(v).ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line: 0,
                    msg: format!("bad encoded value `{v}` in `{name}`"),
                })?);
            }
            params.insert(name, Tensor::new(t.shape, data)?);
        }
        Ok(Self {
            kind: stored.kind,
            dims: stored.dims,
            params,
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let mut text = ckpt.to_json()?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Checkpoint::from_json(&text, path)
}

/// FNV-1a over the bit patterns of every parameter, in layout order.
pub fn param_fingerprint(params: &ParamSet) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (name, t) in params.iter() {
        for b in name.bytes() {
            h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3);
        }
        for v in t.data() {
            for b in v.to_bits().to_le_bytes() {
                h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn actor() -> ActorModel {
        ActorModel::init(
            ModelDims {
                user_dim: 3,
                item_dim: 2,
                hidden: 4,
            },
            5,
        )
    }

    #[test]
    fn hex_encoding_is_lossless() {
        for v in [0.0, -0.0, 1.0 / 3.0, f64::MIN_POSITIVE, -1e300, 5e-324] {
            assert_eq!(decode_f64(&encode_f64(v)).unwrap().to_bits(), v.to_bits());
        }
        assert!(decode_f64("zz").is_none());
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        let a = actor();
        save_checkpoint(&path, &Checkpoint::from_actor(&a, 3)).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.dims.list_len, 3);
        let back = loaded.into_actor().unwrap();
        assert_eq!(param_fingerprint(back.params()), param_fingerprint(a.params()));
        assert_eq!(back, a);

        let e = EvaluatorModel::init(*a.dims(), 3, 1);
        save_checkpoint(&path, &Checkpoint::from_evaluator(&e)).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert!(ck.clone().into_actor().is_err());
        assert_eq!(ck.into_evaluator().unwrap(), e);
    }

    #[test]
    fn version_mismatch_and_truncation_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        let text = Checkpoint::from_actor(&actor(), 2).to_json().unwrap();

        let bumped = text.replacen("\"schema_version\": 1", "\"schema_version\": 99", 1);
        std::fs::write(&path, bumped).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::SchemaVersion { found: 99, expected: 1 })
        ));

        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Parse { .. })));
    }
}
