//! Training checkpoints.
//!
//! ```text
//! "EBMC" | u32 version | u64 header length | JSON header
//!        | u32 tensor count | (u32 name length | name | u32 rank | u64 dims | f64 data)*
//!        | u32 CRC32
//! ```
//!
//! The header echoes the run configuration and data layout and carries the
//! counters, the PCD stream positions and the metrics history. Tensors are the
//! parameters, the Adam moments and the PCD chains, in parameter-store order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{append_crc, put_tensor_body, verify_crc, Reader};
use crate::model::DataSpec;
use crate::rbm::PcdState;
use crate::rng::StreamState;
use crate::train::{EpochMetrics, Trainer};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EBMC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: RunConfig,
    spec: DataSpec,
    epoch: usize,
    step: u64,
    pd_failures: usize,
    adam_t: u64,
    log_z_s: Option<f64>,
    pcd_streams: Vec<StreamState>,
    history: Vec<EpochMetrics>,
}

pub fn encode_checkpoint(t: &Trainer) -> Vec<u8> {
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        config: t.config.clone(),
        spec: t.model.spec,
        epoch: t.epoch,
        step: t.step,
        pd_failures: t.pd_failures,
        adam_t: t.adam.t,
        log_z_s: t.log_z_s,
        pcd_streams: t.pcd.as_ref().map(PcdState::stream_states).unwrap_or_default(),
        history: t.history.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");

    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for (id, name, value) in t.model.params.iter() {
        tensors.push((format!("param/{name}"), value.clone()));
        tensors.push((format!("adam.m/{name}"), t.adam.m[id.0].clone()));
        tensors.push((format!("adam.v/{name}"), t.adam.v[id.0].clone()));
    }
    if let Some(p) = &t.pcd {
        let chains = Tensor::matrix(p.count(), p.n(), p.chains().to_vec()).expect("sized");
        tensors.push(("pcd.chains".into(), chains));
    }

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, value) in &tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        put_tensor_body(&mut out, value);
    }
    append_crc(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Trainer> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { expected: "EBMC" });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::BadVersion(version));
    }
    verify_crc(bytes)?;
    let len = usize::try_from(r.u64("header length")?).map_err(|_| Error::Malformed("header length".into()))?;
    let header: Header = serde_json::from_slice(r.take(len, "header")?)
        .map_err(|e| Error::Malformed(format!("checkpoint header: {e}")))?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = std::collections::BTreeMap::new();
    for _ in 0..count {
        let n = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(n, "name")?)
            .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let t = r.tensor_body()?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Malformed(format!("duplicate tensor {name}")));
        }
    }
    if r.pos + 4 != bytes.len() {
        return Err(Error::Malformed(format!("{} trailing bytes", bytes.len() - r.pos - 4)));
    }

    let mut t = Trainer::new(header.config, header.spec)?;
    let mut take = |name: String, like: &Tensor| -> Result<Tensor> {
        let v = tensors.remove(&name).ok_or_else(|| Error::Malformed(format!("missing tensor {name}")))?;
        if v.shape() != like.shape() {
            return Err(Error::Malformed(format!("{name}: shape {:?}, architecture expects {:?}", v.shape(), like.shape())));
        }
        Ok(v)
    };
    let names: Vec<String> = t.model.params.iter().map(|(_, n, _)| n.to_string()).collect();
    for (i, name) in names.iter().enumerate() {
        let like = t.model.params.values()[i].clone();
        t.model.params.values_mut()[i] = take(format!("param/{name}"), &like)?;
        t.adam.m[i] = take(format!("adam.m/{name}"), &like)?;
        t.adam.v[i] = take(format!("adam.v/{name}"), &like)?;
    }
    if let Some(p) = &t.pcd {
        let like = Tensor::zeros(&[p.count(), p.n()]);
        let chains = take("pcd.chains".into(), &like)?;
        t.pcd = Some(PcdState::restore(p.n(), chains.into_data(), &header.pcd_streams)?);
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Malformed(format!("unexpected tensor {extra}")));
    }
    t.adam.t = header.adam_t;
    t.epoch = header.epoch;
    t.step = header.step;
    t.pd_failures = header.pd_failures;
    t.log_z_s = header.log_z_s;
    t.history = header.history;
    Ok(t)
}

pub fn save_checkpoint(path: &Path, t: &Trainer) -> Result<()> {
    std::fs::write(path, encode_checkpoint(t))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Checks that a checkpoint was produced by a compatible configuration:
/// same architecture, data and seed (training length and cadence may differ).
pub fn check_compatible(saved: &RunConfig, requested: &RunConfig) -> Result<()> {
    if saved.architecture != requested.architecture {
        return Err(Error::Config("checkpoint architecture differs from the configuration".into()));
    }
    if saved.data != requested.data {
        return Err(Error::Config("checkpoint data section differs from the configuration".into()));
    }
    if saved.training.seed != requested.training.seed {
        return Err(Error::Config("checkpoint seed differs from the configuration".into()));
    }
    Ok(())
}
