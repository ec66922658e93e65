//! Top-k sparsified, low-precision client deltas.

use serde::{Deserialize, Serialize};

use super::StcConfig;
use crate::error::{invalid, Result};
use crate::numerics::ParamSet;
use crate::quantize::Payload;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressedDelta {
    /// Flattened length of the delta.
    pub len: usize,
    /// Size of the wire frame: `ceil((1 - sparsity) * len)` slots. Zero
    /// coordinates among the top-k are not stored but still occupy a slot.
    pub frame: usize,
    pub indices: Vec<usize>,
    pub values: Vec<i32>,
    pub scale: f32,
    pub bits: u32,
    pub strict_indices: bool,
}

pub fn kept_count(n: usize, sparsity: f64) -> usize {
    (((1.0 - sparsity) * n as f64).ceil() as usize).min(n)
}

fn index_bits(n: usize) -> u64 {
    if n <= 1 {
        0
    } else {
        (usize::BITS - (n - 1).leading_zeros()) as u64
    }
}

impl Payload for CompressedDelta {
    fn payload_bytes(&self) -> u64 {
        let k = self.frame as u64;
        let mut bits = k * self.bits as u64;
        if self.strict_indices {
            bits += k * index_bits(self.len);
        }
        bits.div_ceil(8)
    }
}

/// Keep the `ceil((1 - sparsity) n)` largest-magnitude coordinates (ties to the
/// lower flat index) and round them to a symmetric `bits`-bit grid.
pub fn stc_compress(delta: &ParamSet, cfg: &StcConfig) -> Result<CompressedDelta> {
    if !(cfg.sparsity > 0.0 && cfg.sparsity < 1.0) {
        return Err(invalid("stc sparsity must be in (0, 1)"));
    }
    if !(2..=31).contains(&cfg.bits) {
        return Err(invalid("stc bits must be in [2, 31]"));
    }
    let flat = delta.flatten();
    let n = flat.len();
    let frame = kept_count(n, cfg.sparsity);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| flat[b].abs().total_cmp(&flat[a].abs()).then(a.cmp(&b)));
    let mut indices: Vec<usize> = order[..frame]
        .iter()
        .copied()
        .filter(|&i| flat[i] != 0.0)
        .collect();
    indices.sort_unstable();

    let qmax = ((1i64 << (cfg.bits - 1)) - 1) as f64;
    let max = indices.iter().fold(0.0f64, |m, &i| m.max((flat[i] as f64).abs()));
    let scale = if max == 0.0 { 1.0 } else { (max / qmax) as f32 };
    let values = indices
        .iter()
        .map(|&i| ((flat[i] as f64) / scale as f64).round().clamp(-qmax, qmax) as i32)
        .collect();
    Ok(CompressedDelta {
        len: n,
        frame,
        indices,
        values,
        scale,
        bits: cfg.bits,
        strict_indices: cfg.strict_indices,
    })
}

impl CompressedDelta {
    /// Dense delta laid out like `layout`.
    pub fn decompress(&self, layout: &ParamSet) -> Result<ParamSet> {
        if layout.num_scalars() != self.len {
            return Err(invalid(format!(
                "compressed delta has {} scalars, layout has {}",
                self.len,
                layout.num_scalars()
            )));
        }
        let mut flat = vec![0.0f32; self.len];
        for (&i, &q) in self.indices.iter().zip(&self.values) {
            flat[i] = self.scale * q as f32;
        }
        layout.unflatten(&flat)
    }
}
