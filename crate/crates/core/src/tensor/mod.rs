//! Dense N-dimensional tensors in row-major layout and the handful of
//! multilinear operations the adapter pipeline is built from.

mod fwht;
pub mod sltf;
mod svd;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use fwht::{fwht, fwht_in_place};
pub use svd::{svd_topk, Svd};

/// Ordered list of tensor extents. Every extent is at least one.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(Error::InvalidShape(
                "shape must have at least one extent".into(),
            ));
        }
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(Error::InvalidShape(format!(
                "extent {pos} is zero in {dims:?}"
            )));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::InvalidShape(format!("element count of {dims:?} overflows")))?;
        Ok(Self(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn order(&self) -> usize {
        self.0.len()
    }

    pub fn element_count(&self) -> usize {
        self.0.iter().product()
    }

    /// Product of the extents before `mode` and after it.
    fn split_at_mode(&self, mode: usize) -> (usize, usize, usize) {
        let outer = self.0[..mode].iter().product();
        let inner = self.0[mode + 1..].iter().product();
        (outer, self.0[mode], inner)
    }

    fn with_extent(&self, mode: usize, extent: usize) -> Self {
        let mut dims = self.0.clone();
        dims[mode] = extent;
        Self(dims)
    }
}

impl TryFrom<Vec<usize>> for Shape {
    type Error = Error;

    fn try_from(dims: Vec<usize>) -> Result<Self> {
        Self::new(dims)
    }
}

impl From<Shape> for Vec<usize> {
    fn from(shape: Shape) -> Self {
        shape.0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims: Vec<String> = self.0.iter().map(usize::to_string).collect();
        write!(f, "({})", dims.join("x"))
    }
}

/// Real N-D array, row-major (last index fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Shape,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.element_count() {
            return Err(Error::ElementCountMismatch {
                expected: shape.element_count(),
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_dims(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::new(Shape::new(dims.to_vec())?, data)
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.element_count();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    /// 1-D tensor over `data`.
    ///
    /// Panics if `data` is empty, since every extent must be at least one.
    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "a 1-D tensor needs at least one element");
        Self {
            shape: Shape(vec![data.len()]),
            data,
        }
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidShape("ragged matrix rows".into()));
        }
        Self::from_dims(&[rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Self::zeros(Shape::new(vec![n, n])?);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Element at a multi-index.
    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.order());
        index.iter().zip(self.dims()).fold(0, |acc, (&i, &d)| {
            debug_assert!(i < d);
            acc * d + i
        })
    }

    pub fn rows(&self) -> usize {
        self.dims()[0]
    }

    pub fn cols(&self) -> usize {
        self.dims()[1]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn require_matrix(&self, what: &str) -> Result<()> {
        if self.shape.order() != 2 {
            return Err(Error::DimensionMismatch(format!(
                "{what} must be 2-D, got shape {}",
                self.shape
            )));
        }
        Ok(())
    }

    pub fn transpose(&self) -> Result<Self> {
        self.require_matrix("transpose operand")?;
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::from_dims(&[c, r], out)
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        self.require_matrix("matmul lhs")?;
        rhs.require_matrix("matmul rhs")?;
        let (n, k, m) = (self.rows(), self.cols(), rhs.cols());
        if rhs.rows() != k {
            return Err(Error::DimensionMismatch(format!(
                "matmul {} by {}",
                self.shape, rhs.shape
            )));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in row.iter_mut().zip(&rhs.data[p * m..(p + 1) * m]) {
                    *o += a * b;
                }
            }
        }
        Self::from_dims(&[n, m], out)
    }
}

/// Reinterprets the flat data under a new shape with the same element count.
pub fn reshape(t: &DenseTensor, new_shape: Shape) -> Result<DenseTensor> {
    if new_shape.element_count() != t.len() {
        return Err(Error::ElementCountMismatch {
            expected: new_shape.element_count(),
            actual: t.len(),
        });
    }
    Ok(DenseTensor {
        shape: new_shape,
        data: t.data.clone(),
    })
}

/// Flattens to 1-D in row-major order.
pub fn vectorize(t: &DenseTensor) -> DenseTensor {
    DenseTensor {
        shape: Shape(vec![t.len()]),
        data: t.data.clone(),
    }
}

/// Mode-`mode` product: contracts `factor` (d x r) against the core's
/// extent-r axis, replacing it with extent d.
pub fn mode_product(core: &DenseTensor, factor: &DenseTensor, mode: usize) -> Result<DenseTensor> {
    factor.require_matrix("mode-product factor")?;
    let order = core.shape.order();
    if mode >= order {
        return Err(Error::ModeOutOfRange { mode, order });
    }
    let (outer, r, inner) = core.shape.split_at_mode(mode);
    let (d, fr) = (factor.rows(), factor.cols());
    if fr != r {
        return Err(Error::DimensionMismatch(format!(
            "factor {} cannot act on mode {mode} of extent {r}",
            factor.shape
        )));
    }
    let mut out = vec![0.0; outer * d * inner];
    for o in 0..outer {
        let src = &core.data[o * r * inner..(o + 1) * r * inner];
        let dst = &mut out[o * d * inner..(o + 1) * d * inner];
        for a in 0..d {
            let dst_row = &mut dst[a * inner..(a + 1) * inner];
            for b in 0..r {
                let w = factor.data[a * r + b];
                if w == 0.0 {
                    continue;
                }
                for (x, &y) in dst_row.iter_mut().zip(&src[b * inner..(b + 1) * inner]) {
                    *x += w * y;
                }
            }
        }
    }
    Ok(DenseTensor {
        shape: core.shape.with_extent(mode, d),
        data: out,
    })
}

/// Contracts two tensors over every axis except `mode`:
/// `out[a, b] = sum over other indices of lhs[.., a, ..] * rhs[.., b, ..]`.
///
/// This is the matricized product `lhs_(mode) * rhs_(mode)^T`.
pub fn mode_inner(lhs: &DenseTensor, rhs: &DenseTensor, mode: usize) -> Result<DenseTensor> {
    let order = lhs.shape.order();
    if mode >= order {
        return Err(Error::ModeOutOfRange { mode, order });
    }
    let compatible = rhs.shape.order() == order
        && lhs
            .dims()
            .iter()
            .zip(rhs.dims())
            .enumerate()
            .all(|(m, (a, b))| m == mode || a == b);
    if !compatible {
        return Err(Error::DimensionMismatch(format!(
            "mode-{mode} contraction of {} with {}",
            lhs.shape, rhs.shape
        )));
    }
    let (outer, da, inner) = lhs.shape.split_at_mode(mode);
    let db = rhs.dims()[mode];
    let mut out = vec![0.0; da * db];
    for o in 0..outer {
        let l = &lhs.data[o * da * inner..(o + 1) * da * inner];
        let r = &rhs.data[o * db * inner..(o + 1) * db * inner];
        for a in 0..da {
            let la = &l[a * inner..(a + 1) * inner];
            for b in 0..db {
                let rb = &r[b * inner..(b + 1) * inner];
                out[a * db + b] += la.iter().zip(rb).map(|(x, y)| x * y).sum::<f64>();
            }
        }
    }
    DenseTensor::from_dims(&[da, db], out)
}

/// Kronecker product of two matrices.
pub fn kronecker(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    a.require_matrix("kronecker lhs")?;
    b.require_matrix("kronecker rhs")?;
    let (ar, ac, br, bc) = (a.rows(), a.cols(), b.rows(), b.cols());
    let cols = ac * bc;
    let mut out = vec![0.0; ar * br * cols];
    for i in 0..ar {
        for j in 0..ac {
            let w = a.data[i * ac + j];
            for p in 0..br {
                let row = (i * br + p) * cols + j * bc;
                for (o, &v) in out[row..row + bc]
                    .iter_mut()
                    .zip(&b.data[p * bc..(p + 1) * bc])
                {
                    *o = w * v;
                }
            }
        }
    }
    DenseTensor::from_dims(&[ar * br, cols], out)
}
