//! Versioned JSON checkpoints. Parameter values are stored as base64 of
//! little-endian f64 so a save/load round trip is bit exact.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{BackboneSpec, MpmConfig, MpmModel};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::part_data::store::{read_json, write_json};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodedTensor {
    pub shape: Vec<usize>,
    pub data: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub backbone: BackboneSpec,
    pub mpm: Option<MpmConfig>,
    pub params: BTreeMap<String, EncodedTensor>,
}

fn encode(t: &Tensor) -> EncodedTensor {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    EncodedTensor { shape: t.shape().to_vec(), data: STANDARD.encode(bytes) }
}

fn decode(name: &str, e: &EncodedTensor) -> Result<Tensor> {
    let bytes = STANDARD.decode(&e.data).map_err(|err| Error::Data(format!("parameter {name}: {err}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Data(format!("parameter {name}: {} bytes is not a whole number of f64", bytes.len())));
    }
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::from_vec(&e.shape, data).map_err(|err| Error::Data(format!("parameter {name}: {err}")))
}

impl Checkpoint {
    pub fn from_model(model: &MpmModel) -> Self {
        Self {
            schema_version: CHECKPOINT_VERSION,
            backbone: model.spec.clone(),
            mpm: model.mpm.clone(),
            params: model.params.iter().map(|(n, t)| (n.clone(), encode(t))).collect(),
        }
    }

    /// Rebuilds the model, checking the stored names and shapes against a
    /// freshly built model of the same architecture.
    pub fn into_model(self) -> Result<MpmModel> {
        if self.schema_version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!("checkpoint schema {} (expected {CHECKPOINT_VERSION})", self.schema_version)));
        }
        let reference = match &self.mpm {
            Some(cfg) => super::build_mpm(&self.backbone, cfg, 0)?,
            None => MpmModel::vanilla(&self.backbone, 0)?,
        };
        let mut params = ParamStore::new();
        for (name, e) in &self.params {
            params.insert(name.clone(), decode(name, e)?);
        }
        if params.shapes() != reference.params.shapes() {
            return Err(Error::Schema("checkpoint parameters do not match the declared architecture".into()));
        }
        Ok(MpmModel { spec: self.backbone, mpm: self.mpm, params })
    }
}

pub fn save_model(model: &MpmModel, path: &Path) -> Result<()> {
    write_json(path, &Checkpoint::from_model(model))
}

pub fn load_model(path: &Path) -> Result<MpmModel> {
    read_json::<Checkpoint>(path)?.into_model()
}
