//! Bit-exact checkpoint persistence using the base64 array convention of the
//! dataset files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::b64;
use crate::encoders::EncoderConfig;
use crate::params::{ModelConfig, ModelParams};
use crate::training::Adam;

use super::HarnessError;

pub const CHECKPOINT_VERSION: &str = "samdwich-ckpt/1";

#[derive(Serialize, Deserialize)]
struct TensorPayload {
    shape: Vec<usize>,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct OptimizerPayload {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: BTreeMap<String, String>,
    v: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointPayload {
    format_version: String,
    config_hash: String,
    step: u64,
    params: BTreeMap<String, TensorPayload>,
    optimizer: OptimizerPayload,
}

/// A loaded checkpoint: trained parameters plus optimizer state.
#[derive(Debug)]
pub struct Checkpoint {
    pub config_hash: String,
    pub step: u64,
    pub params: ModelParams,
    pub optimizer: Adam,
}

pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    optimizer: &Adam,
    step: u64,
    config_hash: &str,
) -> Result<(), HarnessError> {
    let payload = CheckpointPayload {
        format_version: CHECKPOINT_VERSION.to_string(),
        config_hash: config_hash.to_string(),
        step,
        params: params
            .named()
            .into_iter()
            .map(|(name, t)| {
                (
                    name,
                    TensorPayload {
                        shape: t.shape().to_vec(),
                        data: b64::encode_f64s(t.data()),
                    },
                )
            })
            .collect(),
        optimizer: OptimizerPayload {
            lr: optimizer.lr,
            beta1: optimizer.beta1,
            beta2: optimizer.beta2,
            eps: optimizer.eps,
            t: optimizer.t,
            m: optimizer
                .m
                .iter()
                .map(|(k, v)| (k.clone(), b64::encode_f64s(v)))
                .collect(),
            v: optimizer
                .v
                .iter()
                .map(|(k, v)| (k.clone(), b64::encode_f64s(v)))
                .collect(),
        },
    };
    let bytes = serde_json::to_vec_pretty(&payload)
        .map_err(|e| HarnessError::Runtime(format!("serialize checkpoint: {e}")))?;
    super::atomic_write(path, &bytes)
}

/// Load a checkpoint against the model geometry implied by the configs.
/// A config-hash mismatch is an error unless explicitly allowed.
pub fn load_checkpoint(
    path: &Path,
    model_cfg: &ModelConfig,
    encoder_cfg: &EncoderConfig,
    expected_hash: &str,
    allow_hash_mismatch: bool,
) -> Result<Checkpoint, HarnessError> {
    let bytes = std::fs::read(path)
        .map_err(|e| HarnessError::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let payload: CheckpointPayload = serde_json::from_slice(&bytes)
        .map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
    if payload.format_version != CHECKPOINT_VERSION {
        return Err(HarnessError::Data(format!(
            "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
            payload.format_version
        )));
    }
    if payload.config_hash != expected_hash && !allow_hash_mismatch {
        return Err(HarnessError::Config(format!(
            "checkpoint config hash {} does not match the current config {expected_hash} \
             (pass --allow-config-mismatch to override)",
            payload.config_hash
        )));
    }

    let mut params = ModelParams::init(model_cfg, encoder_cfg, 0);
    let names: Vec<String> = params.named().iter().map(|(n, _)| n.clone()).collect();
    for name in &names {
        if !payload.params.contains_key(name) {
            return Err(HarnessError::Data(format!("checkpoint is missing parameter {name}")));
        }
    }
    for name in payload.params.keys() {
        if !names.contains(name) {
            return Err(HarnessError::Data(format!("checkpoint has unknown parameter {name}")));
        }
    }
    for (name, tensor) in params.named_mut() {
        let stored = &payload.params[&name];
        if stored.shape != tensor.shape() {
            return Err(HarnessError::Data(format!(
                "parameter {name}: stored shape {:?} differs from configured {:?}",
                stored.shape,
                tensor.shape()
            )));
        }
        let values = b64::decode_f64s(&stored.data)
            .map_err(|e| HarnessError::Data(format!("parameter {name}: {e}")))?;
        if values.len() != tensor.numel() {
            return Err(HarnessError::Data(format!(
                "parameter {name}: payload has {} values, expected {}",
                values.len(),
                tensor.numel()
            )));
        }
        tensor.data_mut().copy_from_slice(&values);
    }

    let decode_state = |map: &BTreeMap<String, String>| -> Result<BTreeMap<String, Vec<f64>>, HarnessError> {
        map.iter()
            .map(|(k, v)| {
                b64::decode_f64s(v)
                    .map(|d| (k.clone(), d))
                    .map_err(|e| HarnessError::Data(format!("optimizer state {k}: {e}")))
            })
            .collect()
    };
    let optimizer = Adam {
        lr: payload.optimizer.lr,
        beta1: payload.optimizer.beta1,
        beta2: payload.optimizer.beta2,
        eps: payload.optimizer.eps,
        t: payload.optimizer.t,
        m: decode_state(&payload.optimizer.m)?,
        v: decode_state(&payload.optimizer.v)?,
    };

    Ok(Checkpoint {
        config_hash: payload.config_hash,
        step: payload.step,
        params,
        optimizer,
    })
}
