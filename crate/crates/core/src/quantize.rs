//! Post-training symmetric per-tensor FP32 -> INT8 quantization and payload
//! size accounting.

use std::io::{Read, Write};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::io::{check_magic, get_shape, get_str, get_u32, put_shape, put_str, put_u32};
use crate::numerics::{ParamSet, Tensor};

pub const QMAGIC: &[u8; 6] = b"FENSQ1";
pub const QMAX: i8 = 127;

/// Bytes per FP32 scalar on the wire.
pub const FP32_BYTES: u64 = 4;
/// Per-tensor overhead of an INT8 tensor: one f32 scale.
pub const INT8_SCALE_BYTES: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub scale: f32,
    pub values: Vec<i8>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QuantizedParamSet {
    pub entries: IndexMap<String, QuantizedTensor>,
}

/// `scale = max|x| / 127` (1 for an all-zero tensor), `q = round(x / scale)`
/// clamped to `[-127, 127]`.
pub fn quantize_tensor(t: &Tensor) -> Result<QuantizedTensor> {
    t.ensure_finite("quantize_params")?;
    let max = t.data().iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
    let scale = if max == 0.0 { 1.0 } else { (max / QMAX as f64) as f32 };
    let s = scale as f64;
    let values = t
        .data()
        .iter()
        .map(|&v| ((v as f64) / s).round().clamp(-(QMAX as f64), QMAX as f64) as i8)
        .collect();
    Ok(QuantizedTensor {
        shape: t.shape().to_vec(),
        scale,
        values,
    })
}

pub fn dequantize_tensor(q: &QuantizedTensor) -> Tensor {
    let data = q.values.iter().map(|&v| q.scale * v as f32).collect();
    Tensor::new(q.shape.clone(), data).expect("quantized tensor shape is consistent")
}

pub fn quantize_params(p: &ParamSet) -> Result<QuantizedParamSet> {
    let entries = p
        .iter()
        .map(|(k, t)| Ok((k.clone(), quantize_tensor(t)?)))
        .collect::<Result<_>>()?;
    Ok(QuantizedParamSet { entries })
}

pub fn dequantize(q: &QuantizedParamSet) -> ParamSet {
    let mut out = ParamSet::new();
    for (k, t) in &q.entries {
        out.insert(k.clone(), dequantize_tensor(t))
            .expect("names are unique");
    }
    out
}

/// Anything with a protocol payload size. Names and headers are excluded.
pub trait Payload {
    fn payload_bytes(&self) -> u64;
}

impl Payload for ParamSet {
    fn payload_bytes(&self) -> u64 {
        FP32_BYTES * self.num_scalars() as u64
    }
}

impl Payload for QuantizedParamSet {
    fn payload_bytes(&self) -> u64 {
        self.entries
            .values()
            .map(|t| t.values.len() as u64 + INT8_SCALE_BYTES)
            .sum()
    }
}

pub fn payload_bytes<P: Payload + ?Sized>(p: &P) -> u64 {
    p.payload_bytes()
}

/// Quantized file: magic `FENSQ1`, descriptor, tensor count, then per tensor
/// name, shape, f32 scale and the INT8 payload.
pub fn write_quantized<W: Write>(w: &mut W, descriptor: &str, q: &QuantizedParamSet) -> Result<()> {
    w.write_all(QMAGIC)?;
    put_str(w, descriptor)?;
    put_u32(w, q.entries.len())?;
    for (name, t) in &q.entries {
        put_str(w, name)?;
        put_shape(w, &t.shape)?;
        w.write_all(&t.scale.to_le_bytes())?;
        let bytes: Vec<u8> = t.values.iter().map(|&v| v as u8).collect();
        w.write_all(&bytes)?;
    }
    Ok(())
}

pub fn read_quantized<R: Read>(r: &mut R) -> Result<(String, QuantizedParamSet)> {
    check_magic(r, QMAGIC)?;
    let desc = get_str(r)?;
    let count = get_u32(r)?;
    let mut out = QuantizedParamSet::default();
    for _ in 0..count {
        let name = get_str(r)?;
        let shape = get_shape(r)?;
        let mut sb = [0u8; 4];
        r.read_exact(&mut sb)?;
        let scale = f32::from_le_bytes(sb);
        if !(scale > 0.0) {
            return Err(Error::Format(format!("non-positive scale for {name}")));
        }
        let mut vals = vec![0u8; shape.iter().product()];
        r.read_exact(&mut vals)?;
        out.entries.insert(
            name,
            QuantizedTensor {
                shape,
                scale,
                values: vals.into_iter().map(|b| b as i8).collect(),
            },
        );
    }
    Ok((desc, out))
}
