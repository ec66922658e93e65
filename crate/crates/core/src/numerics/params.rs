use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Named tensors holding the parameters of one model, in insertion order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet<T = f32> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        self.entries.insert(name, t);
        Ok(())
    }

    pub fn with(mut self, name: impl Into<String>, t: Tensor<T>) -> Self {
        self.insert(name, t).expect("duplicate parameter name");
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn expect(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn ensure_same_layout<U: Real>(&self, other: &ParamSet<U>, op: &'static str) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::ShapeMismatch {
                op,
                expected: vec![self.entries.len()],
                got: vec![other.entries.len()],
            });
        }
        for ((ka, ta), (kb, tb)) in self.entries.iter().zip(other.entries.iter()) {
            if ka != kb {
                return Err(Error::InvalidArgument(format!(
                    "{op}: parameter order differs ({ka} vs {kb})"
                )));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::ShapeMismatch {
                    op,
                    expected: ta.shape().to_vec(),
                    got: tb.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Concatenate all scalars in iteration order.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for t in self.entries.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Rebuild a set with this layout from a flat vector.
    pub fn unflatten(&self, flat: &[T]) -> Result<Self> {
        if flat.len() != self.num_scalars() {
            return Err(Error::ShapeMismatch {
                op: "unflatten",
                expected: vec![self.num_scalars()],
                got: vec![flat.len()],
            });
        }
        let mut off = 0;
        let mut out = Self::new();
        for (k, t) in &self.entries {
            let n = t.len();
            out.entries.insert(
                k.clone(),
                Tensor::new(t.shape().to_vec(), flat[off..off + n].to_vec())?,
            );
            off += n;
        }
        Ok(out)
    }

    /// Elementwise `self + k * other`.
    pub fn axpy(&self, k: T, other: &Self) -> Result<Self> {
        self.zip_map(other, "axpy", |a, b| a + k * b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.ensure_same_layout(other, op)?;
        let mut out = Self::new();
        for ((k, a), (_, b)) in self.entries.iter().zip(other.entries.iter()) {
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            out.entries.insert(k.clone(), Tensor::new(a.shape().to_vec(), data)?);
        }
        Ok(out)
    }

    /// Apply `f` to every scalar, in iteration order.
    pub fn map_values(&self, mut f: impl FnMut(T) -> T) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, t)| {
                    let data = t.data().iter().map(|&v| f(v)).collect();
                    (k.clone(), Tensor::new(t.shape().to_vec(), data).expect("same shape"))
                })
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self.entries.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::all_finite)
    }

    /// Squared L2 norm, accumulated in f64.
    pub fn sq_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| {
                let x = v.to_acc();
                x * x
            })
            .sum()
    }
}

impl ParamSet<f32> {
    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (k, t) in &self.entries {
            h.update((k.len() as u32).to_le_bytes());
            h.update(k.as_bytes());
            for &d in t.shape() {
                h.update((d as u32).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
