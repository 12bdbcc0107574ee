//! Named, shape-tagged parameter storage.
//!
//! Values are held as `f64` for arithmetic but every stored value is kept
//! exactly representable as `f32`, so checkpoints in `f32` are lossless.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    /// Trained by gradient descent (online) or tracked by EMA (target).
    Weight,
    /// Batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[inline]
pub fn to_storage(v: f64) -> f64 {
    v as f32 as f64
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamTree {
    pub tensors: Vec<Tensor>,
}

impl ParamTree {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, kind: ParamKind, data: Vec<f64>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(Tensor {
            name: name.into(),
            shape,
            kind,
            data: data.into_iter().map(to_storage).collect(),
        });
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    #[inline]
    pub fn get(&self, idx: usize) -> &[f64] {
        &self.tensors[idx].data
    }

    #[inline]
    pub fn get_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.tensors[idx].data
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    /// Same names and shapes, all values zero.
    pub fn zeros_like(&self) -> ParamTree {
        ParamTree {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    data: vec![0.0; t.numel()],
                    ..t.clone()
                })
                .collect(),
        }
    }

    /// First `n` tensors.
    pub fn prefix(&self, n: usize) -> ParamTree {
        ParamTree {
            tensors: self.tensors[..n].to_vec(),
        }
    }

    pub fn num_weights(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.kind == ParamKind::Weight)
            .map(Tensor::numel)
            .sum()
    }

    /// Check that `other` has the same tensor names, kinds and shapes.
    pub fn check_compatible(&self, other: &ParamTree) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::State(format!(
                "parameter trees differ in size: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.name != b.name || a.shape != b.shape || a.kind != b.kind {
                return Err(Error::State(format!(
                    "tensor mismatch: {} {:?} vs {} {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// L2 norm of every weight tensor, for divergence diagnostics.
    pub fn norms(&self) -> Vec<(String, f64)> {
        self.tensors
            .iter()
            .map(|t| (t.name.clone(), t.data.iter().map(|v| v * v).sum::<f64>().sqrt()))
            .collect()
    }
}
