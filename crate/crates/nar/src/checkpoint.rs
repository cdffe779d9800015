//! Model checkpoints.
//!
//! Layout (little endian): magic `NARCK`, `u16` version, `u8` precision
//! (0 = f32, 1 = f16), `u64` step, 32-byte config hash, `u32` metadata
//! length + metadata JSON, `u32` tensor count, then per tensor `u8` name
//! length + name, `u8` ndim, dims as `u32`, payload. A SHA-256 of all
//! preceding bytes closes the file.
//!
//! Half-precision files hold network weights only; optimizer moments are
//! dropped.

use std::fs;
use std::path::Path;

use half::f16;
use nar_core::neural::{AdamState, LossConfig, ParamSet, UNet, UNetConfig};
use nar_core::{StreamSelection, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::narpc::Cursor;

pub const MAGIC: &[u8; 5] = b"NARCK";
pub const VERSION: u16 = 1;
const MOMENT_M: &str = "adam.m/";
const MOMENT_V: &str = "adam.v/";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F16,
}

impl Precision {
    fn code(self) -> u8 {
        match self {
            Precision::F32 => 0,
            Precision::F16 => 1,
        }
    }

    fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F16 => 2,
        }
    }
}

/// Everything needed to rebuild and feed the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub unet: UNetConfig,
    pub selection: StreamSelection,
    pub channel_names: Vec<String>,
    pub loss: LossConfig,
    /// View ids held out during training, if any.
    #[serde(default)]
    pub validation_views: Vec<usize>,
}

impl ModelMeta {
    /// SHA-256 over the fields that decide whether weights fit an input.
    pub fn config_hash(&self) -> [u8; 32] {
        let key = serde_json::to_vec(&(&self.unet, &self.selection, &self.channel_names)).expect("serializable");
        Sha256::digest(&key).into()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub meta: ModelMeta,
    pub params: ParamSet<f32>,
    pub adam: Option<AdamState<f32>>,
    /// Optimiser steps taken so far.
    pub step: u64,
}

impl ModelState {
    /// Fresh seeded weights for `meta`.
    pub fn init(meta: ModelMeta) -> Result<Self> {
        let net = UNet::new(meta.unet.clone())?;
        let params: ParamSet<f32> = net.init_params();
        let adam = Some(AdamState::new(&params));
        Ok(Self { meta, params, adam, step: 0 })
    }

    pub fn network(&self) -> Result<UNet> {
        Ok(UNet::new(self.meta.unet.clone())?)
    }

    pub fn config(&self) -> &UNetConfig {
        &self.meta.unet
    }
}

/// Header fields and payload sizes of an encoded checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointInfo {
    pub precision: Precision,
    pub step: u64,
    pub config_hash: [u8; 32],
    pub tensors: Vec<(String, Vec<usize>)>,
    /// Payload bytes of network weights, excluding names and headers.
    pub weight_payload_bytes: usize,
    pub total_bytes: usize,
}

fn put_tensor(
    buf: &mut Vec<u8>,
    name: &str,
    t: &Tensor<f32>,
    precision: Precision,
    saturated: &mut usize,
) -> Result<()> {
    if name.len() > u8::MAX as usize || t.shape().len() > u8::MAX as usize {
        return Err(Error::Format(format!("tensor `{name}` cannot be encoded")));
    }
    buf.push(name.len() as u8);
    buf.extend_from_slice(name.as_bytes());
    buf.push(t.shape().len() as u8);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match precision {
        Precision::F32 => t.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
        Precision::F16 => {
            for &v in t.data() {
                let (h, sat) = to_half(v);
                *saturated += sat as usize;
                buf.extend_from_slice(&h.to_le_bytes());
            }
        }
    }
    Ok(())
}

/// Round-to-nearest-even conversion that saturates at the largest finite
/// half instead of overflowing to infinity.
pub fn to_half(v: f32) -> (f16, bool) {
    let h = f16::from_f32(v);
    if h.is_infinite() && v.is_finite() {
        (if v > 0.0 { f16::MAX } else { f16::MIN }, true)
    } else {
        (h, false)
    }
}

/// Serialises `state`. Returns the bytes and the number of weights that
/// saturated at the half-precision range (always 0 for f32).
pub fn encode_checkpoint(state: &ModelState, precision: Precision) -> Result<(Vec<u8>, usize)> {
    if !state.params.all_finite() {
        return Err(Error::Format("refusing to save non-finite weights".into()));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(precision.code());
    buf.extend_from_slice(&state.step.to_le_bytes());
    buf.extend_from_slice(&state.meta.config_hash());
    let meta = serde_json::to_vec(&state.meta)?;
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta);
    let mut entries: Vec<(String, &Tensor<f32>)> =
        state.params.names.iter().cloned().zip(state.params.tensors.iter()).collect();
    if let (Precision::F32, Some(adam)) = (precision, &state.adam) {
        for (n, t) in adam.m.names.iter().zip(&adam.m.tensors) {
            entries.push((format!("{MOMENT_M}{n}"), t));
        }
        for (n, t) in adam.v.names.iter().zip(&adam.v.tensors) {
            entries.push((format!("{MOMENT_V}{n}"), t));
        }
    }
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut saturated = 0;
    for (name, t) in entries {
        put_tensor(&mut buf, &name, t, precision, &mut saturated)?;
    }
    let digest: [u8; 32] = Sha256::digest(&buf).into();
    buf.extend_from_slice(&digest);
    Ok((buf, saturated))
}

struct Decoded {
    info: CheckpointInfo,
    meta: ModelMeta,
    tensors: Vec<(String, Tensor<f32>)>,
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("bad magic, not a NARCK checkpoint".into()));
    }
    if bytes.len() < 32 + MAGIC.len() {
        return Err(Error::Corrupt("checkpoint truncated".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Corrupt("checkpoint checksum mismatch".into()));
    }
    let mut c = Cursor::new(body);
    c.take(MAGIC.len())?;
    let version = c.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let precision = match c.u8()? {
        0 => Precision::F32,
        1 => Precision::F16,
        p => return Err(Error::Format(format!("unknown precision code {p}"))),
    };
    let step = c.u64()?;
    let config_hash: [u8; 32] = c.take(32)?.try_into().expect("32 bytes");
    let meta_len = c.u32()? as usize;
    let meta: ModelMeta = serde_json::from_slice(c.take(meta_len)?)?;
    if meta.config_hash() != config_hash {
        return Err(Error::IncompatibleCheckpoint("config hash does not match the stored configuration".into()));
    }
    let count = c.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    let mut shapes = Vec::with_capacity(count.min(4096));
    let mut weight_payload_bytes = 0;
    for _ in 0..count {
        let name = c.name()?;
        let ndim = c.u8()? as usize;
        let dims = (0..ndim).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Corrupt("tensor size overflows".into()))?;
        let start = c.position();
        let data: Vec<f32> = match precision {
            Precision::F32 => c.f32s(n)?,
            Precision::F16 => c
                .take(n.checked_mul(2).ok_or_else(|| Error::Corrupt("tensor size overflows".into()))?)?
                .chunks_exact(2)
                .map(|b| f16::from_le_bytes([b[0], b[1]]).to_f32())
                .collect(),
        };
        if !name.starts_with(MOMENT_M) && !name.starts_with(MOMENT_V) {
            weight_payload_bytes += c.position() - start;
        }
        debug_assert_eq!(c.position() - start, n * precision.bytes());
        shapes.push((name.clone(), dims.clone()));
        tensors.push((name, Tensor::from_vec(&dims, data)?));
    }
    if c.remaining() != 0 {
        return Err(Error::Corrupt(format!("{} trailing bytes", c.remaining())));
    }
    Ok(Decoded {
        info: CheckpointInfo {
            precision,
            step,
            config_hash,
            tensors: shapes,
            weight_payload_bytes,
            total_bytes: bytes.len(),
        },
        meta,
        tensors,
    })
}

pub fn inspect_checkpoint(bytes: &[u8]) -> Result<CheckpointInfo> {
    Ok(decode(bytes)?.info)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelState> {
    let Decoded { info, meta, tensors } = decode(bytes)?;
    let net = UNet::new(meta.unet.clone())?;
    let mut by_name: std::collections::HashMap<String, Tensor<f32>> = tensors.into_iter().collect();
    let has_moments = by_name.keys().any(|k| k.starts_with(MOMENT_M));
    let mut take = |name: &str, shape: &[usize]| -> Result<Tensor<f32>> {
        let t =
            by_name.remove(name).ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing tensor `{name}`")))?;
        if t.shape() != shape {
            return Err(Error::IncompatibleCheckpoint(format!(
                "tensor `{name}` has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    };
    let names: Vec<String> = net.param_shapes().iter().map(|(n, _)| n.clone()).collect();
    let mut params = Vec::with_capacity(names.len());
    for (n, shape) in net.param_shapes() {
        params.push(take(n, shape)?);
    }
    let params = ParamSet { names: names.clone(), tensors: params };
    let adam = if has_moments {
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (n, shape) in net.param_shapes() {
            m.push(take(&format!("{MOMENT_M}{n}"), shape)?);
            v.push(take(&format!("{MOMENT_V}{n}"), shape)?);
        }
        Some(AdamState {
            m: ParamSet { names: names.clone(), tensors: m },
            v: ParamSet { names, tensors: v },
            step: info.step,
        })
    } else {
        None
    };
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::IncompatibleCheckpoint(format!("unexpected tensor `{extra}`")));
    }
    Ok(ModelState { meta, params, adam, step: info.step })
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let (bytes, _) = encode_checkpoint(state, Precision::F32)?;
    write_atomic(path, &bytes)
}

/// Writes a half-precision copy; returns the saturated-weight count.
pub fn save_quantized(state: &ModelState, path: &Path) -> Result<usize> {
    let (bytes, saturated) = encode_checkpoint(state, Precision::F16)?;
    write_atomic(path, &bytes)?;
    Ok(saturated)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    decode_checkpoint(&fs::read(path).at(path)?)
}

/// In-memory equivalent of a save/load through half precision.
pub fn quantize_state(state: &ModelState) -> (ModelState, usize) {
    let mut saturated = 0;
    let tensors = state
        .params
        .tensors
        .iter()
        .map(|t| {
            t.map(|&v| {
                let (h, s) = to_half(v);
                saturated += s as usize;
                h.to_f32()
            })
        })
        .collect();
    let params = ParamSet { names: state.params.names.clone(), tensors };
    (ModelState { meta: state.meta.clone(), params, adam: None, step: state.step }, saturated)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).at(&tmp)?;
    fs::rename(&tmp, path).at(path)
}
