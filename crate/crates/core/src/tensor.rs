//! Dense row-major `f64` tensors of rank 1 through 4.
//!
//! This is deliberately a thin container: shape metadata plus a flat `Vec`.
//! Layers index into the flat data directly because the hot loops (im2col,
//! pooling) want explicit offset arithmetic, not a generic indexing API.
//! Equality is exact bitwise equality of shape and data, which the
//! reproducibility tests rely on.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Dense row-major tensor with 1 to 4 dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn validate_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::ShapeMismatch {
            context: "tensor construction",
            detail: format!("rank must be 1..=4, got {}", shape.len()),
        });
    }
    let mut len = 1usize;
    for &extent in shape {
        if extent == 0 {
            return Err(Error::ShapeMismatch {
                context: "tensor construction",
                detail: format!("zero extent in shape {shape:?}"),
            });
        }
        len = len.checked_mul(extent).ok_or_else(|| Error::ShapeMismatch {
            context: "tensor construction",
            detail: format!("element count overflows usize for shape {shape:?}"),
        })?;
    }
    Ok(len)
}

impl Tensor {
    /// All-zeros tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        let len = validate_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        })
    }

    /// Tensor that takes ownership of `values`; the length must match the
    /// shape's element count exactly.
    pub fn from_values(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        let len = validate_shape(shape)?;
        if values.len() != len {
            return Err(Error::ShapeMismatch {
                context: "tensor construction",
                detail: format!(
                    "shape {shape:?} needs {len} values, got {}",
                    values.len()
                ),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: values,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Total number of elements.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Reinterprets the elements under a new shape with the same length.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Tensor> {
        let len = validate_shape(shape)?;
        if len != self.data.len() {
            return Err(Error::ShapeMismatch {
                context: "reshape",
                detail: format!(
                    "cannot view {} elements as shape {shape:?}",
                    self.data.len()
                ),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same_shape(other, "add")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self -= other`, elementwise.
    pub fn sub_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same_shape(other, "sub")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a -= b;
        }
        Ok(())
    }

    /// `self += a * x`; the fused form every optimizer loop wants.
    pub fn axpy(&mut self, a: f64, x: &Tensor) -> Result<()> {
        self.check_same_shape(x, "axpy")?;
        for (dst, src) in self.data.iter_mut().zip(&x.data) {
            *dst += a * src;
        }
        Ok(())
    }

    /// Multiplies every element by `c` in place.
    pub fn scale(&mut self, c: f64) {
        for v in &mut self.data {
            *v *= c;
        }
    }

    /// Out-of-place [`scale`](Self::scale).
    pub fn scaled(&self, c: f64) -> Tensor {
        let mut out = self.clone();
        out.scale(c);
        out
    }

    /// Inner product over all elements; shapes must match exactly.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum())
    }

    /// Sum of squared elements, `||self||^2`.
    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// True when every element is a finite number.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same_shape(&self, other: &Tensor, context: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                context: "binary tensor op",
                detail: format!(
                    "{context}: left shape {:?} vs right shape {:?}",
                    self.shape, other.shape
                ),
            });
        }
        Ok(())
    }
}
