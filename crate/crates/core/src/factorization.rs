//! One group's factorized update: Tucker / CP splits composed by Kronecker
//! products, their parameter counts, initialization and adjoints.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, SeededStream};
use crate::tensor::{kronecker, mode_inner, mode_product, reshape, DenseTensor, Shape};

/// Structure of the core tensor of one split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoreKind {
    /// Superdiagonal all-ones core (CP without weights). M=2 is plain LoRA.
    Identity,
    /// Superdiagonal core with trainable weights (CP decomposition).
    Diagonal,
    /// Dense trainable `r_1 x ... x r_M` core (Tucker decomposition).
    Full,
}

impl fmt::Display for CoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CoreKind::Identity => "identity",
            CoreKind::Diagonal => "diagonal",
            CoreKind::Full => "full",
        })
    }
}

impl FromStr for CoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(CoreKind::Identity),
            "diagonal" => Ok(CoreKind::Diagonal),
            "full" => Ok(CoreKind::Full),
            other => Err(Error::InvalidConfig(format!("unknown core kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoreSpec {
    kind: CoreKind,
    ranks: Vec<usize>,
}

impl CoreSpec {
    pub fn new(kind: CoreKind, ranks: Vec<usize>) -> Result<Self> {
        if ranks.is_empty() || ranks.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "core ranks must be positive, got {ranks:?}"
            )));
        }
        if kind != CoreKind::Full && ranks.iter().any(|&r| r != ranks[0]) {
            return Err(Error::InvalidConfig(format!(
                "{kind} core needs equal ranks on every mode, got {ranks:?}"
            )));
        }
        Ok(Self { kind, ranks })
    }

    pub fn kind(&self) -> CoreKind {
        self.kind
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn order(&self) -> usize {
        self.ranks.len()
    }

    /// Number of trainable core scalars.
    pub fn value_count(&self) -> usize {
        match self.kind {
            CoreKind::Identity => 0,
            CoreKind::Diagonal => self.ranks[0],
            CoreKind::Full => self.ranks.iter().product(),
        }
    }
}

/// Shape descriptor of one split, without values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    core: CoreSpec,
    out_shape: Shape,
    /// Present for a dense split: an order-1 rank-1 factor whose output is
    /// folded into this 2-D block so it can take part in a Kronecker chain.
    fold: Option<Shape>,
}

impl SplitSpec {
    pub fn new(core: CoreSpec, out_shape: Shape) -> Result<Self> {
        if core.order() != out_shape.order() {
            return Err(Error::DimensionMismatch(format!(
                "core of order {} for output shape {}",
                core.order(),
                out_shape
            )));
        }
        Ok(Self {
            core,
            out_shape,
            fold: None,
        })
    }

    /// A fully trainable `rows x cols` block.
    pub fn dense(block: Shape) -> Result<Self> {
        if block.order() != 2 {
            return Err(Error::DimensionMismatch(format!(
                "dense split must be 2-D, got {block}"
            )));
        }
        let flat = Shape::new(vec![block.element_count()])?;
        Ok(Self {
            core: CoreSpec::new(CoreKind::Identity, vec![1])?,
            out_shape: flat,
            fold: Some(block),
        })
    }

    pub fn core(&self) -> &CoreSpec {
        &self.core
    }

    pub fn is_dense(&self) -> bool {
        self.fold.is_some()
    }

    /// Shape of the materialized split (the folded block for dense splits).
    pub fn output_shape(&self) -> &Shape {
        self.fold.as_ref().unwrap_or(&self.out_shape)
    }

    /// Shape of the Tucker product before any folding.
    pub fn tucker_shape(&self) -> &Shape {
        &self.out_shape
    }

    pub fn plane_shape(&self, mode: usize) -> [usize; 2] {
        [self.out_shape.dims()[mode], self.core.ranks[mode]]
    }

    pub fn trainable_count(&self) -> usize {
        count_split(self)
    }
}

/// Trainable parameter count of one split: core values plus every plane.
pub fn count_split(spec: &SplitSpec) -> usize {
    let planes: usize = spec
        .out_shape
        .dims()
        .iter()
        .zip(&spec.core.ranks)
        .map(|(d, r)| d * r)
        .sum();
    spec.core.value_count() + planes
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// Last plane zero, everything else Gaussian: the product starts at zero.
    ZeroProduct,
    /// Every factor Gaussian.
    Gaussian,
}

impl FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero-product" => Ok(InitScheme::ZeroProduct),
            "gaussian" => Ok(InitScheme::Gaussian),
            other => Err(Error::UnknownInitScheme(other.to_string())),
        }
    }
}

/// Core values and plane factors of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitFactors {
    spec: SplitSpec,
    core_values: Vec<f64>,
    planes: Vec<DenseTensor>,
}

impl SplitFactors {
    pub fn new(spec: SplitSpec, core_values: Vec<f64>, planes: Vec<DenseTensor>) -> Result<Self> {
        if core_values.len() != spec.core.value_count() {
            return Err(Error::DimensionMismatch(format!(
                "{} core needs {} values, got {}",
                spec.core.kind,
                spec.core.value_count(),
                core_values.len()
            )));
        }
        if planes.len() != spec.core.order() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} plane factors, got {}",
                spec.core.order(),
                planes.len()
            )));
        }
        for (m, p) in planes.iter().enumerate() {
            if p.dims() != spec.plane_shape(m) {
                return Err(Error::DimensionMismatch(format!(
                    "plane {m} has shape {}, expected {:?}",
                    p.shape(),
                    spec.plane_shape(m)
                )));
            }
        }
        Ok(Self {
            spec,
            core_values,
            planes,
        })
    }

    pub fn spec(&self) -> &SplitSpec {
        &self.spec
    }

    pub fn core_values(&self) -> &[f64] {
        &self.core_values
    }

    pub fn planes(&self) -> &[DenseTensor] {
        &self.planes
    }

    /// Number of stored trainable scalars.
    pub fn stored_count(&self) -> usize {
        self.core_values.len() + self.planes.iter().map(DenseTensor::len).sum::<usize>()
    }

    /// Visits every trainable scalar: core values first, then planes in mode order.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.core_values
            .iter()
            .chain(self.planes.iter().flat_map(|p| p.data()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.core_values
            .iter_mut()
            .chain(self.planes.iter_mut().flat_map(|p| p.data_mut()))
    }

    /// Stored core values as a tensor: length-r vector for diagonal cores,
    /// the full core otherwise. Panics for identity cores, which store nothing.
    pub fn dense_core_values(&self) -> DenseTensor {
        match self.spec.core.kind {
            CoreKind::Identity => panic!("identity core has no stored values"),
            CoreKind::Diagonal => DenseTensor::vector(self.core_values.clone()),
            CoreKind::Full => self.dense_core(),
        }
    }

    /// Dense core tensor (superdiagonal for identity/diagonal cores).
    pub fn dense_core(&self) -> DenseTensor {
        let ranks = &self.spec.core.ranks;
        let shape = Shape::new(ranks.clone()).expect("validated ranks");
        match self.spec.core.kind {
            CoreKind::Full => {
                DenseTensor::new(shape, self.core_values.clone()).expect("validated core")
            }
            kind => {
                let mut core = DenseTensor::zeros(shape);
                let r = ranks[0];
                let stride: usize = (0..ranks.len()).map(|m| r.pow(m as u32)).sum();
                for j in 0..r {
                    core.data_mut()[j * stride] = if kind == CoreKind::Diagonal {
                        self.core_values[j]
                    } else {
                        1.0
                    };
                }
                core
            }
        }
    }

    fn cp_weight(&self, j: usize) -> f64 {
        match self.spec.core.kind {
            CoreKind::Diagonal => self.core_values[j],
            _ => 1.0,
        }
    }
}

/// Deterministic factor initialization. Planes get N(0, 1/d_m); core values
/// get N(0, 1/#core values). Under `ZeroProduct` the last plane is zero.
pub fn init_factors(spec: &SplitSpec, seed: u64, scheme: InitScheme) -> SplitFactors {
    let mut rng = SeededStream::new(seed, stream::FACTORS);
    let n_core = spec.core.value_count();
    let core_std = if n_core > 0 {
        1.0 / (n_core as f64).sqrt()
    } else {
        0.0
    };
    let core_values: Vec<f64> = (0..n_core).map(|_| rng.normal() * core_std).collect();
    let order = spec.core.order();
    let planes = (0..order)
        .map(|m| {
            let [d, r] = spec.plane_shape(m);
            let data = if scheme == InitScheme::ZeroProduct && m + 1 == order {
                vec![0.0; d * r]
            } else {
                let std = 1.0 / (d as f64).sqrt();
                (0..d * r).map(|_| rng.normal() * std).collect()
            };
            DenseTensor::from_dims(&[d, r], data).expect("positive plane dims")
        })
        .collect();
    SplitFactors::new(spec.clone(), core_values, planes).expect("shapes follow the split layout")
}

/// Evaluates `C x_1 A_1 x_2 ... x_M A_M`, folded for dense splits.
pub fn materialize_split(s: &SplitFactors) -> Result<DenseTensor> {
    let out = match s.spec.core.kind {
        CoreKind::Full => {
            let mut t = s.dense_core();
            for (m, plane) in s.planes.iter().enumerate() {
                t = mode_product(&t, plane, m)?;
            }
            t
        }
        _ => cp_sum(s),
    };
    match &s.spec.fold {
        Some(block) => reshape(&out, block.clone()),
        None => Ok(out),
    }
}

/// Superdiagonal core evaluated as a weighted sum of rank-one outer products.
fn cp_sum(s: &SplitFactors) -> DenseTensor {
    let shape = s.spec.out_shape.clone();
    let r = s.spec.core.ranks[0];
    let mut out = vec![0.0; shape.element_count()];
    let mut term = Vec::with_capacity(out.len());
    let mut next = Vec::with_capacity(out.len());
    for j in 0..r {
        term.clear();
        term.push(s.cp_weight(j));
        for plane in &s.planes {
            let (d, rank) = (plane.rows(), plane.cols());
            next.clear();
            for &t in &term {
                next.extend((0..d).map(|i| t * plane.data()[i * rank + j]));
            }
            std::mem::swap(&mut term, &mut next);
        }
        for (o, t) in out.iter_mut().zip(&term) {
            *o += t;
        }
    }
    DenseTensor::new(shape, out).expect("cp term matches output shape")
}

/// Gradients of a scalar loss with respect to one split's trainable values,
/// laid out like the factors themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitGrads {
    pub core: Vec<f64>,
    pub planes: Vec<DenseTensor>,
}

impl SplitGrads {
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.core
            .iter()
            .chain(self.planes.iter().flat_map(|p| p.data()))
    }
}

/// Pulls `grad_out` (the loss gradient at the split output) back to the
/// split's core values and plane factors.
pub fn split_adjoint(s: &SplitFactors, grad_out: &DenseTensor) -> Result<SplitGrads> {
    let g = reshape(grad_out, s.spec.out_shape.clone())?;
    match s.spec.core.kind {
        CoreKind::Full => tucker_adjoint(s, &g),
        _ => cp_adjoint(s, &g),
    }
}

fn tucker_adjoint(s: &SplitFactors, g: &DenseTensor) -> Result<SplitGrads> {
    let core = s.dense_core();
    let order = s.planes.len();
    let mut planes = Vec::with_capacity(order);
    for m in 0..order {
        let mut y = core.clone();
        for (n, plane) in s.planes.iter().enumerate() {
            if n != m {
                y = mode_product(&y, plane, n)?;
            }
        }
        planes.push(mode_inner(g, &y, m)?);
    }
    let mut dcore = g.clone();
    for (n, plane) in s.planes.iter().enumerate() {
        dcore = mode_product(&dcore, &plane.transpose()?, n)?;
    }
    Ok(SplitGrads {
        core: dcore.into_data(),
        planes,
    })
}

fn cp_adjoint(s: &SplitFactors, g: &DenseTensor) -> Result<SplitGrads> {
    let r = s.spec.core.ranks[0];
    let order = s.planes.len();
    let columns: Vec<Vec<DenseTensor>> = (0..r)
        .map(|j| {
            s.planes
                .iter()
                .map(|p| {
                    let col = (0..p.rows()).map(|i| p.data()[i * r + j]).collect();
                    DenseTensor::from_dims(&[1, p.rows()], col)
                })
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;

    let mut planes: Vec<DenseTensor> = s
        .planes
        .iter()
        .map(|p| DenseTensor::zeros(p.shape().clone()))
        .collect();
    let mut core = vec![0.0; s.core_values.len()];
    for (j, cols) in columns.iter().enumerate() {
        let w = s.cp_weight(j);
        for m in 0..order {
            // contract every mode except m with the j-th columns
            let mut t = g.clone();
            for (n, col) in cols.iter().enumerate() {
                if n != m {
                    t = mode_product(&t, col, n)?;
                }
            }
            let rank = s.planes[m].cols();
            for (i, v) in t.data().iter().enumerate() {
                planes[m].data_mut()[i * rank + j] = w * v;
            }
            if m == 0 && s.spec.core.kind == CoreKind::Diagonal {
                core[j] = t
                    .data()
                    .iter()
                    .zip(cols[0].data())
                    .map(|(a, b)| a * b)
                    .sum();
            }
        }
    }
    Ok(SplitGrads { core, planes })
}

/// K splits whose materializations are chained by Kronecker products.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedGroup {
    splits: Vec<SplitFactors>,
}

impl FactorizedGroup {
    pub fn new(splits: Vec<SplitFactors>) -> Result<Self> {
        if splits.is_empty() {
            return Err(Error::InvalidConfig(
                "a group needs at least one split".into(),
            ));
        }
        if splits.len() > 1 {
            if let Some((k, s)) = splits
                .iter()
                .enumerate()
                .find(|(_, s)| s.spec.output_shape().order() != 2)
            {
                return Err(Error::DimensionMismatch(format!(
                    "split {k} has output {} but Kronecker composition needs matrices",
                    s.spec.output_shape()
                )));
            }
        }
        Ok(Self { splits })
    }

    pub fn splits(&self) -> &[SplitFactors] {
        &self.splits
    }

    pub fn splits_mut(&mut self) -> &mut [SplitFactors] {
        &mut self.splits
    }

    pub fn trainable_count(&self) -> usize {
        self.splits.iter().map(|s| count_split(&s.spec)).sum()
    }

    /// Shape of the materialized group.
    pub fn output_shape(&self) -> Shape {
        if self.splits.len() == 1 {
            return self.splits[0].spec.output_shape().clone();
        }
        let (rows, cols) = self.splits.iter().fold((1, 1), |(r, c), s| {
            let d = s.spec.output_shape().dims();
            (r * d[0], c * d[1])
        });
        Shape::new(vec![rows, cols]).expect("positive extents")
    }
}

/// Initializes a group; under `ZeroProduct` only the last split is zeroed.
pub fn init_group(
    specs: &[SplitSpec],
    seeds: &[u64],
    scheme: InitScheme,
) -> Result<FactorizedGroup> {
    let k = specs.len();
    let splits = specs
        .iter()
        .zip(seeds)
        .enumerate()
        .map(|(i, (spec, &seed))| {
            let s = if i + 1 == k {
                scheme
            } else {
                InitScheme::Gaussian
            };
            init_factors(spec, seed, s)
        })
        .collect();
    FactorizedGroup::new(splits)
}

/// Left-folded Kronecker product of the split materializations.
pub fn materialize_group(g: &FactorizedGroup) -> Result<DenseTensor> {
    let parts = g
        .splits
        .iter()
        .map(materialize_split)
        .collect::<Result<Vec<_>>>()?;
    kron_chain(&parts)
}

pub(crate) fn kron_chain(parts: &[DenseTensor]) -> Result<DenseTensor> {
    let mut iter = parts.iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::InvalidConfig("empty Kronecker chain".into()))?
        .clone();
    iter.try_fold(first, |acc, p| kronecker(&acc, p))
}

/// Pulls the gradient at the group output back to every split's factors.
pub fn group_adjoint(g: &FactorizedGroup, grad_out: &DenseTensor) -> Result<Vec<SplitGrads>> {
    if g.splits.len() == 1 {
        return Ok(vec![split_adjoint(&g.splits[0], grad_out)?]);
    }
    let parts = g
        .splits
        .iter()
        .map(materialize_split)
        .collect::<Result<Vec<_>>>()?;
    let grad = reshape(grad_out, g.output_shape())?;
    let unit = DenseTensor::from_dims(&[1, 1], vec![1.0])?;
    let mut out = Vec::with_capacity(parts.len());
    for k in 0..parts.len() {
        let left = if k == 0 {
            unit.clone()
        } else {
            kron_chain(&parts[..k])?
        };
        let right = if k + 1 == parts.len() {
            unit.clone()
        } else {
            kron_chain(&parts[k + 1..])?
        };
        let dpart = kron_middle_adjoint(&grad, &left, &parts[k], &right);
        out.push(split_adjoint(&g.splits[k], &dpart)?);
    }
    Ok(out)
}

/// For `Y = L (x) P (x) R`, returns dY/dP contracted with `grad`:
/// `dP[a, b] = sum grad[(i*pr + a)*rr + s, (j*pc + b)*rc + t] * L[i, j] * R[s, t]`.
fn kron_middle_adjoint(
    grad: &DenseTensor,
    left: &DenseTensor,
    mid: &DenseTensor,
    right: &DenseTensor,
) -> DenseTensor {
    let (lr, lc) = (left.rows(), left.cols());
    let (pr, pc) = (mid.rows(), mid.cols());
    let (rr, rc) = (right.rows(), right.cols());
    let cols = lc * pc * rc;
    let gd = grad.data();
    let mut out = vec![0.0; pr * pc];
    for i in 0..lr {
        for j in 0..lc {
            let l = left.data()[i * lc + j];
            if l == 0.0 {
                continue;
            }
            for a in 0..pr {
                for b in 0..pc {
                    let mut acc = 0.0;
                    for s in 0..rr {
                        let row = ((i * pr + a) * rr + s) * cols + (j * pc + b) * rc;
                        acc += gd[row..row + rc]
                            .iter()
                            .zip(&right.data()[s * rc..(s + 1) * rc])
                            .map(|(x, y)| x * y)
                            .sum::<f64>();
                    }
                    out[a * pc + b] += l * acc;
                }
            }
        }
    }
    DenseTensor::from_dims(&[pr, pc], out).expect("positive extents")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_spec(dims: &[usize], r: usize) -> SplitSpec {
        SplitSpec::new(
            CoreSpec::new(CoreKind::Identity, vec![r; dims.len()]).unwrap(),
            Shape::new(dims.to_vec()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn rank_one_outer_product() {
        let spec = identity_spec(&[3, 2], 1);
        let a1 = DenseTensor::from_dims(&[3, 1], vec![1., 2., 3.]).unwrap();
        let a2 = DenseTensor::from_dims(&[2, 1], vec![4., 5.]).unwrap();
        let s = SplitFactors::new(spec, vec![], vec![a1, a2]).unwrap();
        let out = materialize_split(&s).unwrap();
        assert_eq!(out.data(), &[4., 5., 8., 10., 12., 15.]);
    }

    #[test]
    fn counts_follow_formula() {
        assert_eq!(count_split(&identity_spec(&[768, 768], 8)), 12_288);
        let diag = SplitSpec::new(
            CoreSpec::new(CoreKind::Diagonal, vec![2; 3]).unwrap(),
            Shape::new(vec![8, 8, 8]).unwrap(),
        )
        .unwrap();
        assert_eq!(count_split(&diag), 50);
        let full = SplitSpec::new(
            CoreSpec::new(CoreKind::Full, vec![3; 4]).unwrap(),
            Shape::new(vec![10; 4]).unwrap(),
        )
        .unwrap();
        assert_eq!(count_split(&full), 201);
        let dense = SplitSpec::dense(Shape::new(vec![6, 6]).unwrap()).unwrap();
        assert_eq!(count_split(&dense), 36);
    }

    #[test]
    fn core_spec_validation() {
        assert!(CoreSpec::new(CoreKind::Diagonal, vec![2, 3]).is_err());
        assert!(CoreSpec::new(CoreKind::Identity, vec![2, 3]).is_err());
        assert!(CoreSpec::new(CoreKind::Full, vec![2, 3]).is_ok());
        assert!(CoreSpec::new(CoreKind::Full, vec![0, 3]).is_err());
    }

    #[test]
    fn zero_product_init_is_zero_and_deterministic() {
        let spec = SplitSpec::new(
            CoreSpec::new(CoreKind::Full, vec![2, 3, 2]).unwrap(),
            Shape::new(vec![4, 5, 3]).unwrap(),
        )
        .unwrap();
        let a = init_factors(&spec, 11, InitScheme::ZeroProduct);
        let b = init_factors(&spec, 11, InitScheme::ZeroProduct);
        assert_eq!(a, b);
        assert!(materialize_split(&a)
            .unwrap()
            .data()
            .iter()
            .all(|v| *v == 0.0));
        assert_eq!(a.stored_count(), count_split(&spec));
    }

    #[test]
    fn different_seeds_differ() {
        let spec = identity_spec(&[4, 4], 2);
        for seed in 0..10u64 {
            let a = init_factors(&spec, seed, InitScheme::ZeroProduct);
            let b = init_factors(&spec, seed + 100, InitScheme::ZeroProduct);
            assert_ne!(a.planes()[0], b.planes()[0]);
        }
    }

    #[test]
    fn unknown_scheme_rejected() {
        assert!(matches!(
            "xavier".parse::<InitScheme>(),
            Err(Error::UnknownInitScheme(_))
        ));
    }

    #[test]
    fn dense_split_folds_to_block() {
        let spec = SplitSpec::dense(Shape::new(vec![2, 3]).unwrap()).unwrap();
        let s = init_factors(&spec, 1, InitScheme::Gaussian);
        let out = materialize_split(&s).unwrap();
        assert_eq!(out.dims(), &[2, 3]);
        assert_eq!(out.data(), s.planes()[0].data());
    }

    #[test]
    fn group_requires_matrices_for_kronecker() {
        let a = init_factors(&identity_spec(&[2, 2, 2], 1), 1, InitScheme::Gaussian);
        let b = init_factors(&identity_spec(&[2, 2], 1), 2, InitScheme::Gaussian);
        assert!(FactorizedGroup::new(vec![a, b]).is_err());
        assert!(FactorizedGroup::new(vec![]).is_err());
    }
}
