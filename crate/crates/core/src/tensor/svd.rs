//! Truncated SVD by one-sided (Hestenes) Jacobi rotations.

use super::DenseTensor;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;

/// Leading singular triplets: `u` is rows x k, `v` is cols x k, `s` descending.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DenseTensor,
    pub s: Vec<f64>,
    pub v: DenseTensor,
}

pub fn svd_topk(m: &DenseTensor, k: usize) -> Result<Svd> {
    if m.shape().order() != 2 {
        return Err(Error::DimensionMismatch(format!(
            "svd needs a matrix, got {}",
            m.shape()
        )));
    }
    let (rows, cols) = (m.rows(), m.cols());
    if k == 0 || k > rows.min(cols) {
        return Err(Error::RankTooLarge { k, rows, cols });
    }
    if !m.is_finite() {
        return Err(Error::Numerical(
            "svd input contains non-finite values".into(),
        ));
    }
    if rows >= cols {
        let (u, s, v) = jacobi_tall(m.data(), rows, cols)?;
        finish(u, s, v, rows, cols, k)
    } else {
        let t = m.transpose()?;
        let (v, s, u) = jacobi_tall(t.data(), cols, rows)?;
        finish(u, s, v, rows, cols, k)
    }
}

type Columns = Vec<Vec<f64>>;

/// Full thin SVD of a tall row-major matrix (rows >= cols).
/// Returns left vectors, singular values and right vectors as column lists,
/// sorted by descending singular value.
fn jacobi_tall(data: &[f64], rows: usize, cols: usize) -> Result<(Columns, Vec<f64>, Columns)> {
    let mut a: Columns = (0..cols)
        .map(|j| (0..rows).map(|i| data[i * cols + j]).collect())
        .collect();
    let mut v: Columns = (0..cols)
        .map(|j| (0..cols).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let eps = f64::EPSILON;
    // columns below this squared norm are numerically zero and left alone
    let negligible = a.iter().map(|c| dot(c, c)).sum::<f64>() * eps * eps;
    let mut converged = false;
    let mut residual = 0.0;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        residual = 0.0f64;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if gamma == 0.0 || alpha <= negligible || beta <= negligible {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(off);
                if off <= eps {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SvdNoConvergence {
            sweeps: MAX_SWEEPS,
            residual,
        });
    }

    let mut order: Vec<(f64, usize)> = a.iter().map(|c| dot(c, c).sqrt()).zip(0..).collect();
    order.sort_by(|x, y| y.0.total_cmp(&x.0));
    let s_max = order[0].0;
    let tiny = s_max * eps * (rows.max(cols) as f64) * 4.0;

    let mut u: Columns = Vec::with_capacity(cols);
    let mut s = Vec::with_capacity(cols);
    let mut right: Columns = Vec::with_capacity(cols);
    for &(sigma, j) in &order {
        if sigma > tiny {
            u.push(a[j].iter().map(|x| x / sigma).collect());
            s.push(sigma);
        } else {
            u.push(complete_basis(&u, rows));
            s.push(0.0);
        }
        right.push(v[j].clone());
    }
    Ok((u, s, right))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate(cols: &mut Columns, p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    for (x, y) in head[p].iter_mut().zip(tail[0].iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Unit vector orthogonal to every column in `basis`, chosen by
/// Gram-Schmidt over the standard basis.
fn complete_basis(basis: &Columns, n: usize) -> Vec<f64> {
    let mut best = vec![0.0; n];
    let mut best_norm = -1.0;
    for e in 0..n {
        let mut cand = vec![0.0; n];
        cand[e] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let proj = dot(&cand, b);
                for (c, bv) in cand.iter_mut().zip(b) {
                    *c -= proj * bv;
                }
            }
        }
        let norm = dot(&cand, &cand).sqrt();
        if norm > best_norm {
            best_norm = norm;
            best = cand;
        }
        if norm > 0.5 {
            break;
        }
    }
    best.iter().map(|x| x / best_norm).collect()
}

fn finish(u: Columns, s: Vec<f64>, v: Columns, rows: usize, cols: usize, k: usize) -> Result<Svd> {
    let to_matrix = |c: &Columns, n: usize| {
        let mut data = vec![0.0; n * k];
        for (j, col) in c.iter().take(k).enumerate() {
            for (i, x) in col.iter().enumerate() {
                data[i * k + j] = *x;
            }
        }
        DenseTensor::from_dims(&[n, k], data)
    };
    Ok(Svd {
        u: to_matrix(&u, rows)?,
        s: s.into_iter().take(k).collect(),
        v: to_matrix(&v, cols)?,
    })
}
