//! Versioned binary container for named tensors plus a JSON metadata blob.
//!
//! Values are stored as raw IEEE bit patterns (little endian), so the round
//! trip is exact: a parameter set written and read back compares bit-equal,
//! including optimizer moments and spectral-norm state.

use super::adam::ParameterSet;
use super::tensor::{Scalar, Tensor};
use super::NnError;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"ESLC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorBits {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    F64 { shape: Vec<usize>, data: Vec<f64> },
}

impl TensorBits {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorBits::F32 { shape, .. } | TensorBits::F64 { shape, .. } => shape,
        }
    }
}

/// Scalar-type bridge between in-memory tensors and stored bits.
pub trait BitsCodec: Scalar {
    fn to_bits_tensor(t: &Tensor<Self>) -> TensorBits;
    fn from_bits_tensor(b: &TensorBits) -> Result<Tensor<Self>, NnError>;
}

impl BitsCodec for f32 {
    fn to_bits_tensor(t: &Tensor<Self>) -> TensorBits {
        TensorBits::F32 { shape: t.shape().to_vec(), data: t.data().to_vec() }
    }
    fn from_bits_tensor(b: &TensorBits) -> Result<Tensor<Self>, NnError> {
        match b {
            TensorBits::F32 { shape, data } => Ok(Tensor::from_vec(shape, data.clone())),
            TensorBits::F64 { .. } => Err(NnError::Usage("checkpoint holds f64, expected f32".into())),
        }
    }
}

impl BitsCodec for f64 {
    fn to_bits_tensor(t: &Tensor<Self>) -> TensorBits {
        TensorBits::F64 { shape: t.shape().to_vec(), data: t.data().to_vec() }
    }
    fn from_bits_tensor(b: &TensorBits) -> Result<Tensor<Self>, NnError> {
        match b {
            TensorBits::F64 { shape, data } => Ok(Tensor::from_vec(shape, data.clone())),
            TensorBits::F32 { .. } => Err(NnError::Usage("checkpoint holds f32, expected f64".into())),
        }
    }
}

pub fn write_container(
    path: &Path,
    meta: &serde_json::Value,
    tensors: &[(String, TensorBits)],
) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let meta_bytes = serde_json::to_vec(meta).expect("meta serialization");
    buf.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta_bytes);
    buf.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        match t {
            TensorBits::F32 { shape, data } => {
                buf.push(1);
                buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
                for &d in shape {
                    buf.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for v in data {
                    buf.extend_from_slice(&v.to_bits().to_le_bytes());
                }
            }
            TensorBits::F64 { shape, data } => {
                buf.push(2);
                buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
                for &d in shape {
                    buf.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for v in data {
                    buf.extend_from_slice(&v.to_bits().to_le_bytes());
                }
            }
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)?.write_all(&buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_container(
    path: &Path,
) -> Result<(serde_json::Value, BTreeMap<String, TensorBits>), NnError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| NnError::Usage(format!("checkpoint read {}: {e}", path.display())))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], NnError> {
        if *pos + n > bytes.len() {
            return Err(NnError::Usage("checkpoint truncated".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(NnError::Usage("not a checkpoint container".into()));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(NnError::Usage(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let meta: serde_json::Value = serde_json::from_slice(take(&mut pos, meta_len)?)
        .map_err(|e| NnError::Usage(format!("checkpoint meta: {e}")))?;
    let count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| NnError::Usage("bad tensor name".into()))?;
        let dtype = take(&mut pos, 1)?[0];
        let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let t = match dtype {
            1 => {
                let raw = take(&mut pos, n * 4)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().unwrap())))
                    .collect();
                TensorBits::F32 { shape, data }
            }
            2 => {
                let raw = take(&mut pos, n * 8)?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
                    .collect();
                TensorBits::F64 { shape, data }
            }
            other => return Err(NnError::Usage(format!("unknown dtype {other}"))),
        };
        tensors.insert(name, t);
    }
    Ok((meta, tensors))
}

/// Flattens a parameter set into named tensors plus a JSON side blob
/// (step counter and spectral warning flags).
pub fn pack_parameter_set<S: BitsCodec>(
    prefix: &str,
    ps: &ParameterSet<S>,
) -> (Vec<(String, TensorBits)>, serde_json::Value) {
    let mut tensors = Vec::new();
    let mut warned = serde_json::Map::new();
    for (name, e) in ps.iter() {
        tensors.push((format!("{prefix}{name}"), S::to_bits_tensor(&e.value)));
        tensors.push((format!("{prefix}{name}.adam_m"), S::to_bits_tensor(&e.adam_m)));
        tensors.push((format!("{prefix}{name}.adam_v"), S::to_bits_tensor(&e.adam_v)));
        if let Some(sn) = &e.spectral {
            let u = Tensor::from_vec(&[sn.u.len()], sn.u.clone());
            tensors.push((format!("{prefix}{name}.sn_u"), S::to_bits_tensor(&u)));
            warned.insert(name.to_string(), serde_json::Value::Bool(sn.warned_zero));
        }
    }
    let meta = serde_json::json!({ "step": ps.step_count(), "spectral_warned": warned });
    (tensors, meta)
}

pub fn unpack_parameter_set<S: BitsCodec>(
    prefix: &str,
    tensors: &BTreeMap<String, TensorBits>,
    meta: &serde_json::Value,
) -> Result<ParameterSet<S>, NnError> {
    let mut ps = ParameterSet::new();
    // Base parameters are entries without a reserved suffix.
    for (full, bits) in tensors {
        let Some(name) = full.strip_prefix(prefix) else { continue };
        if name.ends_with(".adam_m") || name.ends_with(".adam_v") || name.ends_with(".sn_u") {
            continue;
        }
        ps.insert(name, S::from_bits_tensor(bits)?);
        let m = tensors
            .get(&format!("{prefix}{name}.adam_m"))
            .ok_or_else(|| NnError::Usage(format!("missing adam_m for {name}")))?;
        let v = tensors
            .get(&format!("{prefix}{name}.adam_v"))
            .ok_or_else(|| NnError::Usage(format!("missing adam_v for {name}")))?;
        ps.entry_mut(name).adam_m = S::from_bits_tensor(m)?;
        ps.entry_mut(name).adam_v = S::from_bits_tensor(v)?;
        if let Some(u) = tensors.get(&format!("{prefix}{name}.sn_u")) {
            let u: Tensor<S> = S::from_bits_tensor(u)?;
            ps.enable_spectral(name, u.data().to_vec());
            let warned = meta
                .get("spectral_warned")
                .and_then(|w| w.get(name))
                .and_then(|b| b.as_bool())
                .unwrap_or(false);
            let state = ps.entry_mut(name).spectral.as_mut().unwrap();
            // Restore the exact stored bits: enable_spectral re-normalizes,
            // which would perturb the round trip by an ulp.
            state.u = u.data().to_vec();
            state.warned_zero = warned;
        }
    }
    let step = meta.get("step").and_then(|s| s.as_u64()).unwrap_or(0);
    ps.set_step_count(step);
    Ok(ps)
}
