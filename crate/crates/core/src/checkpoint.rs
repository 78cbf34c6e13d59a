//! Checkpoint files.
//!
//! ```text
//! chanprune-checkpoint\n
//! header-bytes <N>\n
//! <N bytes: JSON header>\n
//! <blob region: little-endian f32/f64 arrays, back to back>
//! ```
//!
//! The header carries the format version, pipeline stage, graph structure,
//! batch-norm constants, seed, training configuration and history, and a
//! manifest giving each parameter blob's shape, dtype, offset (relative to
//! the blob region), length and SHA-256 digest.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{GraphDescription, NetworkGraph, Params};
use crate::ops::BatchNormParams;
use crate::sparsify::{IstaConfig, TrainMonitor};
use crate::tensor::{DType, Tensor};

pub const CHECKPOINT_MAGIC: &str = "chanprune-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position in the train → sparsify → prune → fine-tune pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Baseline,
    Sparsified,
    Pruned,
    Finetuned,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Baseline => "baseline",
            Stage::Sparsified => "sparsified",
            Stage::Pruned => "pruned",
            Stage::Finetuned => "finetuned",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub graph: NetworkGraph,
    pub seed: u64,
    /// Rescaling factor currently applied to γ/β and consumer kernels (1 = none).
    pub rescale_alpha: f64,
    pub ista: Option<IstaConfig>,
    pub history: Option<TrainMonitor>,
    /// Free-form run metadata (configuration, metrics, dataset description).
    pub extra: BTreeMap<String, serde_json::Value>,
    /// Storage precision of the parameter blobs.
    pub dtype: DType,
}

impl Checkpoint {
    pub fn new(stage: Stage, graph: NetworkGraph, seed: u64) -> Self {
        Checkpoint {
            stage,
            graph,
            seed,
            rescale_alpha: 1.0,
            ista: None,
            history: None,
            extra: BTreeMap::new(),
            dtype: DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    layer: usize,
    slot: String,
    shape: Vec<usize>,
    dtype: DType,
    offset: usize,
    length: usize,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BnConstants {
    layer: usize,
    epsilon: f64,
    momentum: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    stage: Stage,
    seed: u64,
    rescale_alpha: f64,
    graph: GraphDescription,
    batchnorm: Vec<BnConstants>,
    ista: Option<IstaConfig>,
    history: Option<TrainMonitor>,
    extra: BTreeMap<String, serde_json::Value>,
    manifest: Vec<BlobEntry>,
}

/// Only the version field, parsed first so newer headers give a version error.
#[derive(Deserialize)]
struct VersionProbe {
    version: u32,
}

const SLOTS: [&str; 6] = ["weight", "bias", "gamma", "beta", "moving_mean", "moving_var"];

fn slot_tensors(p: &Params) -> Vec<(&'static str, &Tensor)> {
    let mut v = vec![("weight", &p.weight)];
    if let Some(b) = &p.bias {
        v.push(("bias", b));
    }
    if let Some(bn) = &p.bn {
        v.extend([
            ("gamma", &bn.gamma),
            ("beta", &bn.beta),
            ("moving_mean", &bn.moving_mean),
            ("moving_var", &bn.moving_var),
        ]);
    }
    v
}

fn encode(t: &Tensor, dtype: DType, out: &mut Vec<u8>) {
    match dtype {
        DType::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        DType::F32 => t.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
    }
}

fn decode(bytes: &[u8], dtype: DType) -> Vec<f64> {
    match dtype {
        DType::F64 => bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        DType::F32 => bytes.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap()))).collect(),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn save_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let g = &ckpt.graph;
    let mut blobs = Vec::new();
    let mut manifest = Vec::new();
    let mut batchnorm = Vec::new();
    for (id, layer) in g.layers().iter().enumerate() {
        let Some(p) = g.params(id) else { continue };
        if let Some(bn) = &p.bn {
            batchnorm.push(BnConstants { layer: id, epsilon: bn.epsilon, momentum: bn.momentum });
        }
        for (slot, t) in slot_tensors(p) {
            let start = blobs.len();
            encode(t, ckpt.dtype, &mut blobs);
            manifest.push(BlobEntry {
                name: format!("{}/{slot}", layer.name()),
                layer: id,
                slot: slot.to_string(),
                shape: t.shape().to_vec(),
                dtype: ckpt.dtype,
                offset: start,
                length: blobs.len() - start,
                sha256: sha256_hex(&blobs[start..]),
            });
        }
    }
    let header = Header {
        version: CHECKPOINT_VERSION,
        stage: ckpt.stage,
        seed: ckpt.seed,
        rescale_alpha: ckpt.rescale_alpha,
        graph: g.description(),
        batchnorm,
        ista: ckpt.ista.clone(),
        history: ckpt.history.clone(),
        extra: ckpt.extra.clone(),
        manifest,
    };
    let json = serde_json::to_string_pretty(&header).map_err(|e| Error::format(format!("serializing header: {e}")))?;
    let mut out = format!("{CHECKPOINT_MAGIC}\nheader-bytes {}\n", json.len()).into_bytes();
    out.extend_from_slice(json.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&blobs);
    Ok(out)
}

fn read_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Truncated {
        offset: bytes.len(),
        detail: "checkpoint preamble line is not terminated".into(),
    })?;
    let line = std::str::from_utf8(&rest[..end]).map_err(|_| Error::format("checkpoint preamble is not UTF-8"))?;
    *pos += end + 1;
    Ok(line)
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut pos = 0;
    let magic = read_line(bytes, &mut pos)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(format!("not a checkpoint (first line `{magic}`)")));
    }
    let len_line = read_line(bytes, &mut pos)?;
    let header_len: usize = len_line
        .strip_prefix("header-bytes ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::format(format!("malformed header length line `{len_line}`")))?;
    let header_end = pos + header_len;
    if bytes.len() < header_end + 1 {
        return Err(Error::Truncated { offset: bytes.len(), detail: format!("header needs {header_len} bytes") });
    }
    let json = &bytes[pos..header_end];
    let probe: VersionProbe =
        serde_json::from_slice(json).map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
    if probe.version != CHECKPOINT_VERSION {
        return Err(Error::Version { found: probe.version, supported: CHECKPOINT_VERSION });
    }
    let header: Header = serde_json::from_slice(json).map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
    if bytes[header_end] != b'\n' {
        return Err(Error::format("header is not followed by a newline"));
    }
    let blobs = &bytes[header_end + 1..];

    let n = header.graph.layers.len();
    let mut tensors: Vec<BTreeMap<String, Tensor>> = vec![BTreeMap::new(); n];
    for e in &header.manifest {
        if e.layer >= n || !SLOTS.contains(&e.slot.as_str()) {
            return Err(Error::format(format!("manifest entry `{}` names an unknown layer or slot", e.name)));
        }
        let end = e.offset.checked_add(e.length).filter(|&end| end <= blobs.len()).ok_or_else(|| Error::Truncated {
            offset: bytes.len(),
            detail: format!("blob `{}` needs bytes {}..{} of the blob region", e.name, e.offset, e.offset + e.length),
        })?;
        let raw = &blobs[e.offset..end];
        let digest = sha256_hex(raw);
        if digest != e.sha256 {
            return Err(Error::Checksum { name: e.name.clone(), expected: e.sha256.clone(), found: digest });
        }
        let numel: usize = e.shape.iter().product();
        if e.length != numel * e.dtype.size_of() {
            return Err(Error::format(format!(
                "blob `{}` length {} does not match shape {:?}",
                e.name, e.length, e.shape
            )));
        }
        tensors[e.layer].insert(e.slot.clone(), Tensor::new(e.shape.clone(), decode(raw, e.dtype))?);
    }
    let bn_consts: BTreeMap<usize, &BnConstants> = header.batchnorm.iter().map(|b| (b.layer, b)).collect();
    let mut params = Vec::with_capacity(n);
    for (id, mut t) in tensors.into_iter().enumerate() {
        if t.is_empty() {
            params.push(None);
            continue;
        }
        let name = &header.graph.layers[id].name;
        let mut take = |slot: &str| t.remove(slot);
        let weight = take("weight").ok_or_else(|| Error::format(format!("layer `{name}` has no weight blob")))?;
        let bias = take("bias");
        let bn = match (take("gamma"), take("beta"), take("moving_mean"), take("moving_var")) {
            (Some(gamma), Some(beta), Some(moving_mean), Some(moving_var)) => {
                let c = bn_consts
                    .get(&id)
                    .ok_or_else(|| Error::format(format!("layer `{name}` lacks batch-norm constants")))?;
                Some(BatchNormParams { gamma, beta, moving_mean, moving_var, epsilon: c.epsilon, momentum: c.momentum })
            }
            (None, None, None, None) => None,
            _ => return Err(Error::format(format!("layer `{name}` has an incomplete batch-norm blob set"))),
        };
        params.push(Some(Params { weight, bias, bn }));
    }
    let graph = NetworkGraph::from_description(&header.graph, params)?;
    let dtype = header.manifest.first().map_or(DType::F64, |e| e.dtype);
    Ok(Checkpoint {
        stage: header.stage,
        graph,
        seed: header.seed,
        rescale_alpha: header.rescale_alpha,
        ista: header.ista,
        history: header.history,
        extra: header.extra,
        dtype,
    })
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, save_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(&std::fs::read(path)?)
}
