//! Adapter lifecycle: classify, initialize, materialize deltas, apply them
//! to base weights, backpropagate through the pipeline, and serialize.

mod config;
mod io;

use std::fmt;

use crate::error::{Error, Result};
use crate::factorization::{
    group_adjoint, init_group, materialize_group, CoreKind, CoreSpec, FactorizedGroup, InitScheme,
    SplitSpec,
};
use crate::grouping::{
    build_group_plan, gather, scatter, GroupMode, GroupPlan, GroupSpan, WeightManifest,
};
use crate::projection::{make_projection, ProjectionMode, ProjectionSpec, ProjectionState};
use crate::rng::derive_seed;
use crate::tensor::{DenseTensor, Shape};

pub use config::{Rank, ScaleMode, SuperLoraConfig};
pub use io::{
    load_adapter, read_adapter, save_adapter, write_adapter, ADAPTER_MAGIC, ADAPTER_VERSION,
};

/// Named per-weight matrices in manifest order.
pub type NamedTensors = Vec<(String, DenseTensor)>;

/// Named method that a configuration reduces to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    DenseFt,
    Lora,
    Lokr,
    Lotr,
    Lonkr,
    Lorta,
    General,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::DenseFt => "dense FT",
            Variant::Lora => "LoRA",
            Variant::Lokr => "LoKr",
            Variant::Lotr => "LoTR",
            Variant::Lonkr => "LoNKr",
            Variant::Lorta => "LoRTA",
            Variant::General => "SuperLoRA (general)",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// First matching row of the variant table, in table order.
pub fn classify_variant(config: &SuperLoraConfig) -> Variant {
    let plain = config.projection == ProjectionMode::Identity;
    let weight_wise = config.group_mode == GroupMode::WeightWise;
    let identity = config.core == CoreKind::Identity;
    let (k, m) = (config.splits, config.order);
    if !plain {
        return Variant::General;
    }
    if weight_wise && k == 1 && identity && m == 1 {
        Variant::DenseFt
    } else if weight_wise && k == 1 && identity && m == 2 {
        Variant::Lora
    } else if weight_wise && k == 2 && identity && m == 2 {
        Variant::Lokr
    } else if !weight_wise && config.groups == 1 && m > 2 {
        Variant::Lotr
    } else if !weight_wise && k > 2 && identity && m == 2 {
        Variant::Lonkr
    } else if !weight_wise && k == 1 && m > 2 {
        Variant::Lorta
    } else {
        Variant::General
    }
}

/// Splits `n` into `k` factors as evenly as the divisors allow, ascending.
/// `None` when some factor would be 1.
fn balanced_factors(n: usize, k: usize) -> Option<Vec<usize>> {
    let mut out = vec![1; k];
    let mut remaining = n;
    for slot in (1..=k).rev() {
        let d = (1..=remaining)
            .filter(|d| remaining.is_multiple_of(*d))
            .find(|&d| {
                (d as u128)
                    .checked_pow(slot as u32)
                    .is_none_or(|p| p >= remaining as u128)
            })
            .unwrap_or(remaining);
        out[slot - 1] = d;
        remaining /= d;
    }
    (out.iter().all(|&d| d >= 2)).then_some(out)
}

/// Split descriptors of one group.
pub fn group_split_specs(
    config: &SuperLoraConfig,
    group: usize,
    span: &GroupSpan,
) -> Result<Vec<SplitSpec>> {
    let ranks = config.rank.per_mode(config.order);
    let core = CoreSpec::new(config.core, ranks)?;
    let target = &span.target_shape;
    if config.splits == 1 {
        return Ok(vec![SplitSpec::new(core, target.clone())?]);
    }
    let (p, q) = (target.dims()[0], target.dims()[1]);
    let infeasible =
        |why: String| Error::Infeasible(format!("group {group} target {target}: {why}"));
    let (mut specs, p_rest, q_rest, k_rest) = match config.dense_split_dim {
        Some(d) => {
            if p % d != 0 || q % d != 0 {
                return Err(infeasible(format!(
                    "dense split of side {d} does not divide the target"
                )));
            }
            let dense = SplitSpec::dense(Shape::new(vec![d, d])?)?;
            (vec![dense], p / d, q / d, config.splits - 1)
        }
        None => (Vec::new(), p, q, config.splits),
    };
    let rows = balanced_factors(p_rest, k_rest).ok_or_else(|| {
        infeasible(format!(
            "{p_rest} rows cannot be split into {k_rest} factors >= 2"
        ))
    })?;
    let cols = balanced_factors(q_rest, k_rest).ok_or_else(|| {
        infeasible(format!(
            "{q_rest} columns cannot be split into {k_rest} factors >= 2"
        ))
    })?;
    for (r, c) in rows.into_iter().zip(cols) {
        specs.push(SplitSpec::new(core.clone(), Shape::new(vec![r, c])?)?);
    }
    Ok(specs)
}

fn plan_for(config: &SuperLoraConfig, manifest: &WeightManifest) -> Result<GroupPlan> {
    config.validate()?;
    build_group_plan(
        manifest,
        config.groups,
        config.group_mode,
        config.order,
        config.reshape,
        config.rho,
    )
}

/// Trainable parameter total; projections contribute nothing.
pub fn count_params(config: &SuperLoraConfig, manifest: &WeightManifest) -> Result<usize> {
    let plan = plan_for(config, manifest)?;
    let mut total = 0;
    for (g, span) in plan.groups.iter().enumerate() {
        total += group_split_specs(config, g, span)?
            .iter()
            .map(SplitSpec::trainable_count)
            .sum::<usize>();
    }
    Ok(total)
}

/// Everything needed to materialize the weight updates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterState {
    config: SuperLoraConfig,
    manifest: WeightManifest,
    plan: GroupPlan,
    groups: Vec<FactorizedGroup>,
    projections: Vec<ProjectionState>,
    /// Index into `projections` for each group.
    projection_of: Vec<usize>,
    base_seed: u64,
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    preactivations: Vec<Vec<f64>>,
}

impl AdapterState {
    pub fn config(&self) -> &SuperLoraConfig {
        &self.config
    }

    pub fn manifest(&self) -> &WeightManifest {
        &self.manifest
    }

    pub fn plan(&self) -> &GroupPlan {
        &self.plan
    }

    pub fn groups(&self) -> &[FactorizedGroup] {
        &self.groups
    }

    pub fn projections(&self) -> &[ProjectionState] {
        &self.projections
    }

    pub fn projection_for(&self, group: usize) -> &ProjectionState {
        &self.projections[self.projection_of[group]]
    }

    pub fn base_seed(&self) -> u64 {
        self.base_seed
    }

    pub fn variant(&self) -> Variant {
        classify_variant(&self.config)
    }

    pub fn param_count(&self) -> usize {
        self.groups
            .iter()
            .map(FactorizedGroup::trainable_count)
            .sum()
    }

    /// Trainable scalars in (group, split, core-then-planes) order.
    pub fn params(&self) -> Vec<f64> {
        self.groups
            .iter()
            .flat_map(|g| g.splits().iter().flat_map(|s| s.values().copied()))
            .collect()
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {} trainable parameters",
                values.len(),
                self.param_count()
            )));
        }
        let mut it = values.iter();
        for g in &mut self.groups {
            for s in g.splits_mut() {
                for v in s.values_mut() {
                    *v = *it.next().expect("length checked");
                }
            }
        }
        Ok(())
    }

    /// In-place `params += step * direction`.
    pub fn axpy(&mut self, step: f64, direction: &[f64]) -> Result<()> {
        if direction.len() != self.param_count() {
            return Err(Error::DimensionMismatch(format!(
                "{} direction entries for {} parameters",
                direction.len(),
                self.param_count()
            )));
        }
        let mut it = direction.iter();
        for g in &mut self.groups {
            for s in g.splits_mut() {
                for v in s.values_mut() {
                    *v += step * it.next().expect("length checked");
                }
            }
        }
        Ok(())
    }

    /// Scaled, projected output of every group (one vector per group range).
    pub fn group_outputs(&self) -> Result<(Vec<DenseTensor>, ForwardCache)> {
        let scale = self.config.delta_scale();
        let mut outs = Vec::with_capacity(self.groups.len());
        let mut pre = Vec::with_capacity(self.groups.len());
        for (g, (group, span)) in self.groups.iter().zip(&self.plan.groups).enumerate() {
            let full = materialize_group(group)?;
            let lora = &full.data()[..span.lora_elements];
            let (projected, z) = self.projection_for(g).apply_with_preactivation(lora)?;
            outs.push(DenseTensor::vector(
                projected.into_iter().map(|v| v * scale).collect(),
            ));
            pre.push(if self.projection_for(g).mode().is_nonlinear() {
                z
            } else {
                Vec::new()
            });
        }
        Ok((
            outs,
            ForwardCache {
                preactivations: pre,
            },
        ))
    }

    /// Gradient of a loss with respect to every trainable scalar, given the
    /// loss gradient with respect to each materialized delta.
    pub fn backward(
        &self,
        delta_grads: &[(String, DenseTensor)],
        cache: &ForwardCache,
    ) -> Result<Vec<f64>> {
        let flat = gather(&self.manifest, delta_grads)?;
        let scale = self.config.delta_scale();
        let mut out = Vec::with_capacity(self.param_count());
        for (g, (group, span)) in self.groups.iter().zip(&self.plan.groups).enumerate() {
            let upstream: Vec<f64> = flat.data()[span.range.clone()]
                .iter()
                .map(|v| v * scale)
                .collect();
            let proj = self.projection_for(g);
            let pre = &cache.preactivations[g];
            if proj.mode().is_nonlinear() && pre.len() != span.len() {
                return Err(Error::Numerical(format!(
                    "group {g}: nonlinear projection without cached pre-activation"
                )));
            }
            let mut grad_lora = proj.backward(&upstream, pre)?;
            grad_lora.resize(span.target_shape.element_count(), 0.0);
            let grad_group = DenseTensor::new(group.output_shape(), grad_lora)?;
            for split in group_adjoint(group, &grad_group)? {
                out.extend(split.values());
            }
        }
        Ok(out)
    }
}

/// Builds the plan, zero-product factors and frozen projections.
pub fn init_adapter(
    config: &SuperLoraConfig,
    manifest: &WeightManifest,
    seed: u64,
) -> Result<AdapterState> {
    init_adapter_with(config, manifest, seed, InitScheme::ZeroProduct)
}

pub fn init_adapter_with(
    config: &SuperLoraConfig,
    manifest: &WeightManifest,
    seed: u64,
    scheme: InitScheme,
) -> Result<AdapterState> {
    let plan = plan_for(config, manifest)?;
    let mut groups = Vec::with_capacity(plan.groups.len());
    for (g, span) in plan.groups.iter().enumerate() {
        let specs = group_split_specs(config, g, span)?;
        let group_seed = derive_seed(seed, g as u64);
        let seeds: Vec<u64> = (0..specs.len())
            .map(|k| derive_seed(group_seed, k as u64))
            .collect();
        groups.push(init_group(&specs, &seeds, scheme)?);
    }
    let (projections, projection_of) = build_projections(config, &plan)?;
    Ok(AdapterState {
        config: config.clone(),
        manifest: manifest.clone(),
        plan,
        groups,
        projections,
        projection_of,
        base_seed: seed,
    })
}

/// One state shared by all groups when sharing is on and sizes agree,
/// otherwise one per group seeded from (seed, group index).
fn build_projections(
    config: &SuperLoraConfig,
    plan: &GroupPlan,
) -> Result<(Vec<ProjectionState>, Vec<usize>)> {
    let sizes: Vec<(usize, usize)> = plan
        .groups
        .iter()
        .map(|s| (s.lora_elements, s.len()))
        .collect();
    let uniform = sizes.windows(2).all(|w| w[0] == w[1]);
    let spec = |seed: u64, (n_in, n_out): (usize, usize)| ProjectionSpec {
        mode: config.projection,
        seed,
        n_in,
        n_out,
    };
    if config.shared_projection && uniform {
        let state = make_projection(spec(config.seed, sizes[0]))?;
        Ok((vec![state], vec![0; sizes.len()]))
    } else {
        let states = sizes
            .iter()
            .enumerate()
            .map(|(g, &sz)| make_projection(spec(derive_seed(config.seed, g as u64), sz)))
            .collect::<Result<Vec<_>>>()?;
        Ok((states, (0..sizes.len()).collect()))
    }
}

/// Per-weight update matrices, scaled by the configured delta scale.
pub fn materialize_deltas(state: &AdapterState) -> Result<NamedTensors> {
    let (outs, _) = state.group_outputs()?;
    scatter(&outs, &state.plan, &state.manifest)
}

/// `W' = W + dW` for each named weight; the base is not modified.
pub fn apply_to_base(
    base: &[(String, DenseTensor)],
    deltas: &[(String, DenseTensor)],
) -> Result<NamedTensors> {
    if base.len() != deltas.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} base weights but {} deltas",
            base.len(),
            deltas.len()
        )));
    }
    base.iter()
        .map(|(name, w)| {
            let (_, d) = deltas
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::InvalidManifest(format!("no delta for weight `{name}`")))?;
            if d.shape() != w.shape() {
                return Err(Error::DimensionMismatch(format!(
                    "weight `{name}` is {} but its delta is {}",
                    w.shape(),
                    d.shape()
                )));
            }
            let sum = w.data().iter().zip(d.data()).map(|(a, b)| a + b).collect();
            Ok((name.clone(), DenseTensor::new(w.shape().clone(), sum)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grouping::ManifestEntry;

    fn manifest(count: usize, d: usize) -> WeightManifest {
        WeightManifest::new(
            (0..count)
                .map(|i| ManifestEntry::new(format!("w{i}"), d, d))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn balanced_factor_cases() {
        assert_eq!(balanced_factors(16, 3), Some(vec![2, 2, 4]));
        assert_eq!(balanced_factors(768, 2), Some(vec![24, 32]));
        assert_eq!(balanced_factors(7, 2), None);
        assert_eq!(balanced_factors(4, 3), None);
    }

    #[test]
    fn zero_init_gives_zero_deltas() {
        let m = manifest(4, 8);
        let mut cfg = SuperLoraConfig::lora(1, 2, 2.0);
        cfg.group_mode = GroupMode::GroupWise;
        cfg.reshape = true;
        cfg.splits = 2;
        cfg.projection = ProjectionMode::Linear;
        cfg.rho = 0.5;
        let st = init_adapter(&cfg, &m, 3).unwrap();
        for (_, d) in materialize_deltas(&st).unwrap() {
            assert!(d.data().iter().all(|v| *v == 0.0));
        }
        assert_eq!(st.params().len(), count_params(&cfg, &m).unwrap());
    }

    #[test]
    fn infeasible_kronecker_split_reported() {
        let m = WeightManifest::new(vec![ManifestEntry::new("w", 7, 7)]).unwrap();
        let mut cfg = SuperLoraConfig::lora(1, 1, 1.0);
        cfg.splits = 2;
        match init_adapter(&cfg, &m, 0) {
            Err(Error::Infeasible(msg)) => assert!(msg.contains("group 0"), "{msg}"),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn dense_split_must_divide() {
        let m = manifest(1, 16);
        let mut cfg = SuperLoraConfig::lora(1, 1, 1.0);
        cfg.splits = 2;
        cfg.dense_split_dim = Some(4);
        let st = init_adapter(&cfg, &m, 0).unwrap();
        assert!(st.groups()[0].splits()[0].spec().is_dense());
        // 16 = 4 (dense) x 4 (rank-1 split): 16 + 4 + 4
        assert_eq!(st.param_count(), 24);
        cfg.dense_split_dim = Some(6);
        assert!(matches!(
            init_adapter(&cfg, &m, 0),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn apply_to_base_checks_names_and_shapes() {
        let w = vec![("a".to_string(), DenseTensor::identity(2).unwrap())];
        let d = vec![("b".to_string(), DenseTensor::identity(2).unwrap())];
        assert!(apply_to_base(&w, &d).is_err());
        let d = vec![("a".to_string(), DenseTensor::identity(3).unwrap())];
        assert!(apply_to_base(&w, &d).is_err());
    }

    #[test]
    fn set_params_length_checked() {
        let m = manifest(2, 4);
        let mut st = init_adapter(&SuperLoraConfig::lora(2, 1, 1.0), &m, 0).unwrap();
        assert!(st.set_params(&[0.0; 3]).is_err());
        let p = vec![0.5; st.param_count()];
        st.set_params(&p).unwrap();
        assert_eq!(st.params(), p);
    }
}
