//! Mapping between named 2-D weight updates and contiguous groups of the
//! concatenated (row-major, manifest-order) update vector.

use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, Shape};

/// Default bound on `max(dims) / min(dims)` for a reshaped group.
pub const DEFAULT_MAX_RATIO: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: [usize; 2],
}

impl ManifestEntry {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            shape: [rows, cols],
        }
    }

    pub fn element_count(&self) -> usize {
        self.shape[0] * self.shape[1]
    }
}

/// Ordered list of adapted weights; order fixes the concatenation layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ManifestEntry>", into = "Vec<ManifestEntry>")]
pub struct WeightManifest {
    entries: Vec<ManifestEntry>,
}

impl WeightManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidManifest("manifest has no entries".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::InvalidManifest(format!(
                    "duplicate weight name `{}`",
                    e.name
                )));
            }
            if e.shape.contains(&0) {
                return Err(Error::InvalidManifest(format!(
                    "weight `{}` has a zero extent",
                    e.name
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.entries).expect("manifest serializes")
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(ManifestEntry::element_count).sum()
    }

    /// Start offset of every entry in the concatenated vector, plus the total.
    pub fn boundaries(&self) -> Vec<usize> {
        let mut acc = 0;
        let mut out = Vec::with_capacity(self.entries.len() + 1);
        out.push(0);
        for e in &self.entries {
            acc += e.element_count();
            out.push(acc);
        }
        out
    }
}

/// Query and value projections of a 12-block, width-768 vision transformer.
pub fn vit_base_qv() -> WeightManifest {
    let entries = (0..12)
        .flat_map(|b| {
            [
                ManifestEntry::new(format!("blocks.{b}.attn.q"), 768, 768),
                ManifestEntry::new(format!("blocks.{b}.attn.v"), 768, 768),
            ]
        })
        .collect();
    WeightManifest::new(entries).expect("preset is valid")
}

/// Query and value projections of a small diffusion U-Net: five attention
/// modules at width 64, then sixteen at width 128. The per-module widths are
/// reconstructed from the dense parameter total.
pub fn unet_qv() -> WeightManifest {
    let entries = (0..21)
        .flat_map(|i| {
            let d = if i < 5 { 64 } else { 128 };
            [
                ManifestEntry::new(format!("attn.{i}.q"), d, d),
                ManifestEntry::new(format!("attn.{i}.v"), d, d),
            ]
        })
        .collect();
    WeightManifest::new(entries).expect("preset is valid")
}

impl TryFrom<Vec<ManifestEntry>> for WeightManifest {
    type Error = Error;

    fn try_from(entries: Vec<ManifestEntry>) -> Result<Self> {
        Self::new(entries)
    }
}

impl From<WeightManifest> for Vec<ManifestEntry> {
    fn from(m: WeightManifest) -> Self {
        m.entries
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GroupMode {
    #[serde(rename = "weight-wise")]
    WeightWise,
    #[serde(rename = "group-wise")]
    GroupWise,
}

impl fmt::Display for GroupMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GroupMode::WeightWise => "weight-wise",
            GroupMode::GroupWise => "group-wise",
        })
    }
}

impl FromStr for GroupMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weight-wise" => Ok(GroupMode::WeightWise),
            "group-wise" => Ok(GroupMode::GroupWise),
            other => Err(Error::InvalidConfig(format!(
                "unknown group mode `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSpan {
    /// Half-open range over the concatenated update vector.
    pub range: Range<usize>,
    /// Shape the factorization of this group must produce.
    pub target_shape: Shape,
    /// Elements the factorization contributes before projection.
    pub lora_elements: usize,
}

impl GroupSpan {
    pub fn len(&self) -> usize {
        self.range.len()
    }

    pub fn is_empty(&self) -> bool {
        self.range.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPlan {
    pub groups: Vec<GroupSpan>,
    pub mode: GroupMode,
}

/// Splits the manifest's concatenated update into groups with target shapes.
pub fn build_group_plan(
    manifest: &WeightManifest,
    groups: usize,
    mode: GroupMode,
    order: usize,
    reshape: bool,
    rho: f64,
) -> Result<GroupPlan> {
    build_group_plan_with_ratio(
        manifest,
        groups,
        mode,
        order,
        reshape,
        rho,
        DEFAULT_MAX_RATIO,
    )
}

pub fn build_group_plan_with_ratio(
    manifest: &WeightManifest,
    groups: usize,
    mode: GroupMode,
    order: usize,
    reshape: bool,
    rho: f64,
    max_ratio: usize,
) -> Result<GroupPlan> {
    if groups == 0 {
        return Err(Error::InvalidConfig(
            "number of groups must be at least 1".into(),
        ));
    }
    if order == 0 {
        return Err(Error::InvalidConfig(
            "tensor order must be at least 1".into(),
        ));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "projection ratio must lie in (0, 1], got {rho}"
        )));
    }
    let total = manifest.total_elements();
    let bounds = manifest.boundaries();
    let ranges: Vec<Range<usize>> = match mode {
        GroupMode::WeightWise => {
            if groups != manifest.len() {
                return Err(Error::InvalidConfig(format!(
                    "weight-wise grouping needs G = {} (one per weight), got {groups}",
                    manifest.len()
                )));
            }
            bounds.windows(2).map(|w| w[0]..w[1]).collect()
        }
        GroupMode::GroupWise => {
            if groups > total {
                return Err(Error::InvalidConfig(format!(
                    "{groups} groups over only {total} elements"
                )));
            }
            let (base, extra) = (total / groups, total % groups);
            let mut start = 0;
            (0..groups)
                .map(|g| {
                    let len = base + usize::from(g < extra);
                    let r = start..start + len;
                    start += len;
                    r
                })
                .collect()
        }
    };

    let mut spans = Vec::with_capacity(ranges.len());
    for (g, range) in ranges.into_iter().enumerate() {
        let len = range.len();
        let lora_elements = ((rho * len as f64).round() as usize).max(1);
        let target_shape = if reshape || order == 1 {
            regular_dims_with_ratio(lora_elements, order, max_ratio)
        } else {
            stacked_shape(manifest, &bounds, &range, order, rho)
                .map_err(|e| Error::Infeasible(format!("group {g}: {e}")))?
        };
        spans.push(GroupSpan {
            range,
            target_shape,
            lora_elements,
        });
    }
    Ok(GroupPlan {
        groups: spans,
        mode,
    })
}

/// Natural shape of weights stacked along rows, for non-reshaped groups.
fn stacked_shape(
    manifest: &WeightManifest,
    bounds: &[usize],
    range: &Range<usize>,
    order: usize,
    rho: f64,
) -> Result<Shape> {
    if rho != 1.0 {
        return Err(Error::InvalidConfig(
            "without reshaping the projection ratio must be 1".into(),
        ));
    }
    if order != 2 {
        return Err(Error::InvalidConfig(format!(
            "without reshaping a group is a matrix, order {order} needs reshape"
        )));
    }
    let first = bounds.iter().position(|&b| b == range.start);
    let last = bounds.iter().position(|&b| b == range.end);
    let (Some(first), Some(last)) = (first, last) else {
        return Err(Error::InvalidConfig(format!(
            "range {range:?} crosses weight boundaries; enable reshape"
        )));
    };
    let entries = &manifest.entries()[first..last];
    let cols = entries[0].shape[1];
    if entries.iter().any(|e| e.shape[1] != cols) {
        return Err(Error::InvalidConfig(
            "stacked weights must share a column count; enable reshape".into(),
        ));
    }
    Shape::new(vec![
        entries.iter().map(|e| e.shape[0]).sum::<usize>(),
        cols,
    ])
}

/// Most balanced `order`-tuple with product in `[n, 2n)`; see
/// [`regular_dims_with_ratio`].
pub fn regular_dims(n: usize, order: usize) -> Shape {
    regular_dims_with_ratio(n, order, DEFAULT_MAX_RATIO)
}

/// Square-like factorization of `n` into `order` extents.
///
/// Starting from `t = n`, factors `t` greedily from the last mode to the
/// first, each time taking the smallest divisor `d` of what remains with
/// `d^m >= remaining`. The first `t` whose factorization has
/// `max/min <= max_ratio` wins; the extra `t - n` elements are padding.
pub fn regular_dims_with_ratio(n: usize, order: usize, max_ratio: usize) -> Shape {
    assert!(
        n >= 1 && order >= 1,
        "regular_dims needs n >= 1 and order >= 1"
    );
    let max_ratio = max_ratio.max(2);
    let mut t = n;
    loop {
        let dims = greedy_factor(t, order);
        let lo = *dims.iter().min().expect("order >= 1");
        let hi = *dims.iter().max().expect("order >= 1");
        if hi <= lo.saturating_mul(max_ratio) {
            return Shape::new(dims).expect("divisors are positive");
        }
        t += 1;
    }
}

fn greedy_factor(t: usize, order: usize) -> Vec<usize> {
    let mut dims = vec![1; order];
    let mut remaining = t;
    for m in (1..=order).rev() {
        let d = smallest_divisor_with_power_at_least(remaining, m as u32);
        dims[m - 1] = d;
        remaining /= d;
    }
    dims
}

fn smallest_divisor_with_power_at_least(n: usize, m: u32) -> usize {
    let reaches = |d: usize| (d as u128).checked_pow(m).is_none_or(|p| p >= n as u128);
    let mut small = Vec::new();
    let mut large = Vec::new();
    let mut i = 1usize;
    while i * i <= n {
        if n.is_multiple_of(i) {
            small.push(i);
            if i * i != n {
                large.push(n / i);
            }
        }
        i += 1;
    }
    small
        .into_iter()
        .chain(large.into_iter().rev())
        .find(|&d| reaches(d))
        .unwrap_or(n)
}

/// Row-major flattening of each delta, concatenated in manifest order.
pub fn gather(manifest: &WeightManifest, deltas: &[(String, DenseTensor)]) -> Result<DenseTensor> {
    let mut out = Vec::with_capacity(manifest.total_elements());
    for e in manifest.entries() {
        let (_, t) = deltas
            .iter()
            .find(|(name, _)| *name == e.name)
            .ok_or_else(|| Error::InvalidManifest(format!("no delta for weight `{}`", e.name)))?;
        if t.dims() != e.shape {
            return Err(Error::DimensionMismatch(format!(
                "delta `{}` has shape {}, manifest says {:?}",
                e.name,
                t.shape(),
                e.shape
            )));
        }
        out.extend_from_slice(t.data());
    }
    Ok(DenseTensor::vector(out))
}

/// Inverse of [`gather`]: truncates each group tensor to its range length,
/// concatenates, and cuts the result into the manifest's weights.
pub fn scatter(
    group_tensors: &[DenseTensor],
    plan: &GroupPlan,
    manifest: &WeightManifest,
) -> Result<Vec<(String, DenseTensor)>> {
    if group_tensors.len() != plan.groups.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} group tensors for {} groups",
            group_tensors.len(),
            plan.groups.len()
        )));
    }
    let mut flat = Vec::with_capacity(manifest.total_elements());
    for (g, (t, span)) in group_tensors.iter().zip(&plan.groups).enumerate() {
        if t.len() < span.len() {
            return Err(Error::DimensionMismatch(format!(
                "group {g} tensor has {} elements, its range needs {}",
                t.len(),
                span.len()
            )));
        }
        flat.extend_from_slice(&t.data()[..span.len()]);
    }
    if flat.len() != manifest.total_elements() {
        return Err(Error::DimensionMismatch(format!(
            "plan covers {} elements, manifest has {}",
            flat.len(),
            manifest.total_elements()
        )));
    }
    let mut offset = 0;
    manifest
        .entries()
        .iter()
        .map(|e| {
            let n = e.element_count();
            let t = DenseTensor::from_dims(&e.shape, flat[offset..offset + n].to_vec())?;
            offset += n;
            Ok((e.name.clone(), t))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_manifest(count: usize, d: usize) -> WeightManifest {
        WeightManifest::new(
            (0..count)
                .map(|i| ManifestEntry::new(format!("w{i}"), d, d))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn manifest_validation() {
        assert!(WeightManifest::new(vec![]).is_err());
        assert!(WeightManifest::new(vec![
            ManifestEntry::new("a", 2, 2),
            ManifestEntry::new("a", 3, 3)
        ])
        .is_err());
        assert!(WeightManifest::new(vec![ManifestEntry::new("a", 0, 2)]).is_err());
        let m =
            WeightManifest::from_json(r#"[{"name":"q","shape":[2,3]},{"name":"v","shape":[3,3]}]"#)
                .unwrap();
        assert_eq!(m.total_elements(), 15);
        assert!(WeightManifest::from_json(r#"[{"name":"q","shape":[2,3],"x":1}]"#).is_err());
    }

    #[test]
    fn vit_weight_wise_plan() {
        let m = square_manifest(24, 768);
        let plan = build_group_plan(&m, 24, GroupMode::WeightWise, 2, false, 1.0).unwrap();
        assert_eq!(plan.groups.len(), 24);
        for g in &plan.groups {
            assert_eq!(g.target_shape.dims(), &[768, 768]);
            assert_eq!(g.lora_elements, 589_824);
        }
        let one = build_group_plan(&m, 1, GroupMode::GroupWise, 2, true, 1.0).unwrap();
        assert_eq!(one.groups[0].range, 0..14_155_776);
    }

    #[test]
    fn half_ratio_plan() {
        let m = square_manifest(2, 2);
        let plan = build_group_plan(&m, 1, GroupMode::GroupWise, 2, true, 0.5).unwrap();
        assert_eq!(plan.groups[0].lora_elements, 4);
        assert_eq!(plan.groups[0].target_shape.dims(), &[2, 2]);
    }

    #[test]
    fn near_equal_ranges() {
        let m = square_manifest(1, 3); // 9 elements
        let plan = build_group_plan(&m, 4, GroupMode::GroupWise, 2, true, 1.0).unwrap();
        let lens: Vec<usize> = plan.groups.iter().map(GroupSpan::len).collect();
        assert_eq!(lens, vec![3, 2, 2, 2]);
    }

    #[test]
    fn plan_errors() {
        let m = square_manifest(3, 4);
        assert!(build_group_plan(&m, 2, GroupMode::WeightWise, 2, true, 1.0).is_err());
        assert!(build_group_plan(&m, 0, GroupMode::GroupWise, 2, true, 1.0).is_err());
        assert!(build_group_plan(&m, 1, GroupMode::GroupWise, 2, true, 1.5).is_err());
        // 48 elements into 2 groups of 24 splits the middle weight
        assert!(build_group_plan(&m, 2, GroupMode::GroupWise, 2, false, 1.0).is_err());
        assert!(build_group_plan(&m, 3, GroupMode::GroupWise, 2, false, 0.5).is_err());
        // aligned stacking works
        let p = build_group_plan(&m, 3, GroupMode::GroupWise, 2, false, 1.0).unwrap();
        assert_eq!(p.groups[0].target_shape.dims(), &[4, 4]);
        let p = build_group_plan(&m, 1, GroupMode::GroupWise, 2, false, 1.0).unwrap();
        assert_eq!(p.groups[0].target_shape.dims(), &[12, 4]);
    }

    #[test]
    fn regular_dims_examples() {
        assert_eq!(regular_dims(589_824, 2).dims(), &[768, 768]);
        assert_eq!(regular_dims(14_155_776, 2).dims(), &[3456, 4096]);
        assert_eq!(regular_dims(14_155_776, 3).dims(), &[216, 256, 256]);
        assert_eq!(regular_dims(7, 1).dims(), &[7]);
        // a prime is padded
        let s = regular_dims(13, 2);
        assert!(s.element_count() >= 13 && s.element_count() < 26);
    }

    #[test]
    fn gather_and_scatter() {
        let m = square_manifest(2, 2);
        let deltas = vec![
            (
                "w0".to_string(),
                DenseTensor::matrix(&[vec![0., 1.], vec![2., 3.]]).unwrap(),
            ),
            (
                "w1".to_string(),
                DenseTensor::matrix(&[vec![4., 5.], vec![6., 7.]]).unwrap(),
            ),
        ];
        let flat = gather(&m, &deltas).unwrap();
        assert_eq!(flat.data(), &[0., 1., 2., 3., 4., 5., 6., 7.]);

        let plan = build_group_plan(&m, 2, GroupMode::GroupWise, 2, true, 1.0).unwrap();
        assert_eq!(plan.groups[0].range, 0..4);
        let groups = vec![
            DenseTensor::vector(flat.data()[..4].to_vec()),
            DenseTensor::vector(flat.data()[4..].to_vec()),
        ];
        let back = scatter(&groups, &plan, &m).unwrap();
        assert_eq!(back, deltas);

        let short = vec![DenseTensor::vector(vec![0.0; 3]), groups[1].clone()];
        assert!(scatter(&short, &plan, &m).is_err());
        assert!(gather(&m, &deltas[..1]).is_err());
    }

    #[test]
    fn scatter_drops_padding() {
        let m = square_manifest(1, 3);
        let plan = build_group_plan(&m, 1, GroupMode::GroupWise, 2, true, 1.0).unwrap();
        let mut data: Vec<f64> = (0..9).map(|v| v as f64).collect();
        data.extend([f64::NAN, f64::NAN]);
        let out = scatter(&[DenseTensor::vector(data)], &plan, &m).unwrap();
        assert!(out[0].1.data().iter().all(|v| v.is_finite()));
    }
}
