#![allow(dead_code)]

use superlora::adapter::{init_adapter_with, Rank, SuperLoraConfig, Variant};
use superlora::factorization::{CoreKind, InitScheme};
use superlora::grouping::{GroupMode, ManifestEntry, WeightManifest};
use superlora::projection::ProjectionMode;
use superlora::rng::SeededStream;
use superlora::trainer::{
    finite_difference, loss_and_grads, relative_error, Batch, SyntheticTask, TaskSpec, ToyModel,
    ToyModelSpec,
};
use superlora::{DenseTensor, Result};

pub fn random_tensor(dims: &[usize], seed: u64) -> DenseTensor {
    let mut s = SeededStream::new(seed, 77);
    let n = dims.iter().product();
    DenseTensor::from_dims(dims, (0..n).map(|_| s.normal()).collect()).unwrap()
}

pub fn max_abs_diff(a: &DenseTensor, b: &DenseTensor) -> f64 {
    assert_eq!(a.dims(), b.dims());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Every row-major multi-index of `dims`.
pub fn indices(dims: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for &d in dims {
        out = out
            .into_iter()
            .flat_map(|p| (0..d).map(move |i| [p.clone(), vec![i]].concat()))
            .collect();
    }
    out
}

fn offset(dims: &[usize], idx: &[usize]) -> usize {
    idx.iter().zip(dims).fold(0, |acc, (i, d)| acc * d + i)
}

/// `(T x_m A)[.., i, ..] = sum_j T[.., j, ..] A[i, j]`, one element at a time.
pub fn brute_mode_product(t: &DenseTensor, a: &DenseTensor, mode: usize) -> DenseTensor {
    let mut dims = t.dims().to_vec();
    dims[mode] = a.rows();
    let mut out = vec![0.0; dims.iter().product()];
    for idx in indices(&dims) {
        let mut sum = 0.0;
        for j in 0..t.dims()[mode] {
            let mut src = idx.clone();
            src[mode] = j;
            sum += t.get(&src) * a.get(&[idx[mode], j]);
        }
        out[offset(&dims, &idx)] = sum;
    }
    DenseTensor::from_dims(&dims, out).unwrap()
}

/// Order-3 Tucker product with explicit loops over all six indices.
pub fn brute_tucker3(
    core: &DenseTensor,
    a: &DenseTensor,
    b: &DenseTensor,
    c: &DenseTensor,
) -> DenseTensor {
    let (p, q, s) = (a.rows(), b.rows(), c.rows());
    let (r1, r2, r3) = (core.dims()[0], core.dims()[1], core.dims()[2]);
    let mut out = vec![0.0; p * q * s];
    for i in 0..p {
        for j in 0..q {
            for k in 0..s {
                let mut sum = 0.0;
                for x in 0..r1 {
                    for y in 0..r2 {
                        for z in 0..r3 {
                            sum += core.get(&[x, y, z])
                                * a.get(&[i, x])
                                * b.get(&[j, y])
                                * c.get(&[k, z]);
                        }
                    }
                }
                out[(i * q + j) * s + k] = sum;
            }
        }
    }
    DenseTensor::from_dims(&[p, q, s], out).unwrap()
}

pub fn brute_kron(a: &DenseTensor, b: &DenseTensor) -> DenseTensor {
    let (m, n, p, q) = (a.rows(), a.cols(), b.rows(), b.cols());
    let mut out = vec![0.0; m * n * p * q];
    for i in 0..m {
        for j in 0..n {
            for k in 0..p {
                for l in 0..q {
                    out[(i * p + k) * (n * q) + j * q + l] = a.get(&[i, j]) * b.get(&[k, l]);
                }
            }
        }
    }
    DenseTensor::from_dims(&[m * p, n * q], out).unwrap()
}

pub fn brute_matmul(a: &DenseTensor, b: &DenseTensor) -> DenseTensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|t| a.get(&[i, t]) * b.get(&[t, j])).sum();
        }
    }
    DenseTensor::from_dims(&[m, n], out).unwrap()
}

/// Singular values as square roots of the eigenvalues of `A^T A`, found by
/// cyclic two-sided Jacobi rotations. Descending.
pub fn gram_singular_values(a: &DenseTensor) -> Vec<f64> {
    let (m, n) = (a.rows(), a.cols());
    let mut g = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            g[i][j] = (0..m).map(|t| a.get(&[t, i]) * a.get(&[t, j])).sum();
        }
    }
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| g[i][j] * g[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if g[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (g[q][q] - g[p][p]) / (2.0 * g[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (gkp, gkq) = (g[k][p], g[k][q]);
                    g[k][p] = c * gkp - s * gkq;
                    g[k][q] = s * gkp + c * gkq;
                }
                for k in 0..n {
                    let (gpk, gqk) = (g[p][k], g[q][k]);
                    g[p][k] = c * gpk - s * gqk;
                    g[q][k] = s * gpk + c * gqk;
                }
            }
        }
    }
    let mut s: Vec<f64> = (0..n).map(|i| g[i][i].max(0.0).sqrt()).collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s
}

/// Two-layer, width-8 model with a three-sample batch.
pub fn gradient_setup() -> (ToyModel, Batch) {
    let spec = ToyModelSpec {
        layers: 2,
        width: 8,
        hidden: 6,
        classes: 4,
        vocab: 11,
        seq_len: 3,
        init_scale: 1.0,
    };
    let model = ToyModel::new(spec, 21).unwrap();
    let task = SyntheticTask::new(
        &model,
        &TaskSpec {
            train_samples: 3,
            eval_samples: 1,
            ..TaskSpec::default()
        },
        22,
    )
    .unwrap();
    (model, task.target.train)
}

pub fn gradient_config(
    core: CoreKind,
    splits: usize,
    projection: ProjectionMode,
    order: usize,
) -> SuperLoraConfig {
    SuperLoraConfig {
        groups: 1,
        group_mode: GroupMode::GroupWise,
        order,
        splits,
        rank: Rank::Uniform(2),
        core,
        reshape: true,
        projection,
        seed: 7,
        rho: if projection.allows_compression() {
            0.5
        } else {
            1.0
        },
        alpha: 2.0,
        ..SuperLoraConfig::lora(1, 2, 2.0)
    }
}

pub const FD_EPS: f64 = 1e-5;
/// Gradients below this magnitude are compared in absolute terms: central
/// differences of an O(1) loss carry ~1e-11 rounding noise at eps = 1e-5.
pub const FD_FLOOR: f64 = 1e-4;

/// Largest relative error between analytic and central-difference
/// gradients over every trainable scalar.
pub fn max_gradient_error(
    cfg: &SuperLoraConfig,
    model: &ToyModel,
    batch: &Batch,
) -> Result<(f64, usize)> {
    let state = init_adapter_with(cfg, &model.manifest(), 5, InitScheme::Gaussian)?;
    let (_, grads) = loss_and_grads(&state, model, batch)?;
    let mut worst: f64 = 0.0;
    for (i, g) in grads.iter().enumerate() {
        let fd = finite_difference(&state, model, batch, i, FD_EPS)?;
        worst = worst.max(relative_error(*g, fd, FD_FLOOR));
    }
    Ok((worst, grads.len()))
}

pub enum MatrixOutcome {
    Checked { max_error: f64, params: usize },
    Rejected(String),
}

/// Every core kind x K in {1,2,3} x projection mode x M in {2,3}.
pub fn gradient_matrix() -> Vec<(String, MatrixOutcome)> {
    let (model, batch) = gradient_setup();
    let mut out = Vec::new();
    for core in [CoreKind::Identity, CoreKind::Diagonal, CoreKind::Full] {
        for splits in 1..=3 {
            for projection in ProjectionMode::ALL {
                for order in [2, 3] {
                    let cfg = gradient_config(core, splits, projection, order);
                    let label = format!("core={core} K={splits} proj={projection} M={order}");
                    let outcome = match cfg.validate() {
                        Err(e) => MatrixOutcome::Rejected(e.to_string()),
                        Ok(()) => {
                            let (max_error, params) =
                                max_gradient_error(&cfg, &model, &batch).unwrap();
                            MatrixOutcome::Checked { max_error, params }
                        }
                    };
                    out.push((label, outcome));
                }
            }
        }
    }
    out
}

pub fn toy_manifest() -> WeightManifest {
    WeightManifest::new(
        (0..4)
            .map(|i| ManifestEntry::new(format!("w{i}"), 16, 16))
            .collect(),
    )
    .unwrap()
}

pub fn grouped(groups: usize, order: usize, splits: usize) -> SuperLoraConfig {
    SuperLoraConfig {
        groups,
        group_mode: GroupMode::GroupWise,
        order,
        splits,
        reshape: true,
        ..SuperLoraConfig::lora(4, 2, 2.0)
    }
}

/// One instantiation per variant row, in table order.
pub fn variant_rows() -> Vec<(Variant, SuperLoraConfig)> {
    let mut lokr = SuperLoraConfig::lora(4, 2, 2.0);
    lokr.splits = 2;
    let mut general = grouped(2, 3, 1);
    general.projection = ProjectionMode::Linear;
    general.rho = 0.5;
    vec![
        (Variant::DenseFt, SuperLoraConfig::dense(4)),
        (Variant::Lora, SuperLoraConfig::lora(4, 2, 2.0)),
        (Variant::Lokr, lokr),
        (Variant::Lotr, grouped(1, 3, 1)),
        (Variant::Lonkr, grouped(1, 2, 3)),
        (Variant::Lorta, grouped(2, 4, 1)),
        (Variant::General, general),
    ]
}
