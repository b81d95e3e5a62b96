//! Subspace similarity and relative distance between two weight updates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{svd_topk, DenseTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceNorm {
    #[default]
    Frobenius,
    Spectral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub d_left: f64,
    pub d_right: f64,
    pub d_euclid: f64,
    pub k: usize,
}

fn same_shape(a: &DenseTensor, b: &DenseTensor) -> Result<()> {
    if a.shape() != b.shape() || a.shape().order() != 2 {
        return Err(Error::DimensionMismatch(format!(
            "geometry needs two matrices of equal shape, got {} and {}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `||X1[:, :k]^T X2[:, :k]||_F / sqrt(k)` where X are the left (U) or
/// right (V) singular vectors. 1 for equal subspaces, 0 for orthogonal ones.
pub fn singular_similarity(
    w1: &DenseTensor,
    w2: &DenseTensor,
    k: usize,
    side: Side,
) -> Result<f64> {
    same_shape(w1, w2)?;
    let a = svd_topk(w1, k)?;
    let b = svd_topk(w2, k)?;
    let (x1, x2) = match side {
        Side::Left => (a.u, b.u),
        Side::Right => (a.v, b.v),
    };
    let cross = x1.transpose()?.matmul(&x2)?;
    Ok(cross.frobenius_norm() / (k as f64).sqrt())
}

/// `||W1 - W2|| / ||W1||`, with W1 as the reference.
pub fn euclidean_distance(w1: &DenseTensor, w2: &DenseTensor) -> Result<f64> {
    euclidean_distance_with(w1, w2, DistanceNorm::Frobenius)
}

pub fn euclidean_distance_with(
    w1: &DenseTensor,
    w2: &DenseTensor,
    norm: DistanceNorm,
) -> Result<f64> {
    same_shape(w1, w2)?;
    let diff_data = w1
        .data()
        .iter()
        .zip(w2.data())
        .map(|(a, b)| a - b)
        .collect();
    let diff = DenseTensor::new(w1.shape().clone(), diff_data)?;
    let measure = |m: &DenseTensor| -> Result<f64> {
        Ok(match norm {
            DistanceNorm::Frobenius => m.frobenius_norm(),
            DistanceNorm::Spectral => {
                if m.data().iter().all(|v| *v == 0.0) {
                    0.0
                } else {
                    svd_topk(m, 1)?.s[0]
                }
            }
        })
    };
    let reference = measure(w1)?;
    if reference == 0.0 {
        return Err(Error::Numerical(
            "relative distance to a zero reference is undefined".into(),
        ));
    }
    Ok(measure(&diff)? / reference)
}

pub fn analyze(
    w1: &DenseTensor,
    w2: &DenseTensor,
    k: usize,
    norm: DistanceNorm,
) -> Result<GeometryReport> {
    Ok(GeometryReport {
        d_left: singular_similarity(w1, w2, k, Side::Left)?,
        d_right: singular_similarity(w1, w2, k, Side::Right)?,
        d_euclid: euclidean_distance_with(w1, w2, norm)?,
        k,
    })
}
