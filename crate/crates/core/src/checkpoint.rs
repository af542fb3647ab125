//! HYPT checkpoints: every parameter, the Adam moments, the step counter and a
//! config snapshot, stored as f64 so a reload is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::container::{self, Dtype};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};
use crate::train::{Adam, TrainState};

pub const HYPT_MAGIC: &[u8; 4] = b"HYPT";
pub const HYPT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Completed optimizer steps. Batches are keyed by `(seed, step)`, so this
    /// and the seed are the whole data-order state.
    pub step: usize,
    pub seed: u64,
    pub adam_t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub config: Value,
}

pub fn encode_checkpoint(store: &ParamStore, state: &TrainState, seed: u64, config: Value) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        step: state.step,
        seed,
        adam_t: state.adam.t,
        beta1: state.adam.beta1,
        beta2: state.adam.beta2,
        eps: state.adam.eps,
        config,
    };
    let names: Vec<(String, &Tensor)> = store
        .iter()
        .map(|(_, p)| (format!("param/{}", p.name), &p.value))
        .chain(state.adam.m.iter().map(|(n, t)| (format!("adam.m/{n}"), t)))
        .chain(state.adam.v.iter().map(|(n, t)| (format!("adam.v/{n}"), t)))
        .collect();
    let refs: Vec<(&str, &Tensor)> = names.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    container::encode(HYPT_MAGIC, HYPT_VERSION, Dtype::F64, serde_json::to_value(&meta)?, &refs)
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, state: &TrainState, seed: u64, config: Value) -> Result<()> {
    container::write(path, &encode_checkpoint(store, state, seed, config)?)
}

/// Restores parameter values into `store` and returns the training state.
/// Every tensor is checked against the store before anything is written, so a
/// failed load leaves `store` untouched.
pub fn decode_checkpoint(bytes: &[u8], store: &mut ParamStore) -> Result<(TrainState, CheckpointMeta)> {
    let decoded = container::decode(bytes, HYPT_MAGIC, HYPT_VERSION)?;
    if decoded.dtype != Dtype::F64 {
        return Err(Error::Format("checkpoint payload must be f64".into()));
    }
    let meta: CheckpointMeta =
        serde_json::from_value(decoded.meta).map_err(|e| Error::Format(format!("bad checkpoint meta: {e}")))?;
    let mut params = Vec::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for (name, t) in decoded.tensors {
        if let Some(n) = name.strip_prefix("param/") {
            let id = store
                .id(n)
                .ok_or_else(|| Error::Format(format!("checkpoint parameter {n} is not in the model")))?;
            if store.value(id).shape() != t.shape() {
                return Err(Error::shape("load_checkpoint", store.value(id).shape(), t.shape()));
            }
            params.push((id, t));
        } else if let Some(n) = name.strip_prefix("adam.m/") {
            m.insert(n.to_string(), t);
        } else if let Some(n) = name.strip_prefix("adam.v/") {
            v.insert(n.to_string(), t);
        } else {
            return Err(Error::Format(format!("unexpected checkpoint tensor {name}")));
        }
    }
    if params.len() != store.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} parameters, model has {}",
            params.len(),
            store.len()
        )));
    }
    if m.keys().ne(v.keys()) {
        return Err(Error::Format("first and second Adam moments cover different parameters".into()));
    }
    for (n, t) in &m {
        let shape_ok = store.by_name(n).is_some_and(|p| p.shape() == t.shape() && v[n].shape() == t.shape());
        if !shape_ok {
            return Err(Error::Format(format!("Adam moment {n} does not match a model parameter")));
        }
    }
    for (id, t) in params {
        store.set(id, t)?;
    }
    let state = TrainState {
        step: meta.step,
        adam: Adam {
            beta1: meta.beta1,
            beta2: meta.beta2,
            eps: meta.eps,
            t: meta.adam_t,
            m,
            v,
        },
    };
    Ok((state, meta))
}

pub fn load_checkpoint(path: &Path, store: &mut ParamStore) -> Result<(TrainState, CheckpointMeta)> {
    decode_checkpoint(&std::fs::read(path)?, store)
}

/// Copies the checkpoint parameters named `prefix*` into `store` and returns
/// how many were copied. When any are present they must cover every store
/// parameter under `prefix` with matching shapes; otherwise nothing is written.
pub fn load_params(path: &Path, store: &mut ParamStore, prefix: &str) -> Result<usize> {
    let decoded = container::decode(&std::fs::read(path)?, HYPT_MAGIC, HYPT_VERSION)?;
    let mut params = Vec::new();
    for (name, t) in decoded.tensors {
        let Some(n) = name.strip_prefix("param/").filter(|n| n.starts_with(prefix)) else {
            continue;
        };
        let id = store
            .id(n)
            .ok_or_else(|| Error::Format(format!("checkpoint parameter {n} is not in the model")))?;
        if store.value(id).shape() != t.shape() {
            return Err(Error::shape("load_params", store.value(id).shape(), t.shape()));
        }
        params.push((id, t));
    }
    let expected = store.ids_with_prefix(prefix).count();
    if !params.is_empty() && params.len() != expected {
        return Err(Error::Format(format!(
            "checkpoint holds {} of the {expected} parameters under {prefix}",
            params.len()
        )));
    }
    let n = params.len();
    for (id, t) in params {
        store.set(id, t)?;
    }
    Ok(n)
}
