//! Parameter-count sweeps over a hyperparameter grid.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::Deserialize;
use superlora::adapter::{classify_variant, count_params, Rank, SuperLoraConfig};
use superlora::factorization::CoreKind;
use superlora::grouping::{GroupMode, WeightManifest};
use superlora::projection::ProjectionMode;
use superlora::{Error, Result};

fn one() -> Vec<usize> {
    vec![1]
}
fn weight_wise() -> Vec<GroupMode> {
    vec![GroupMode::WeightWise]
}
fn full_ratio() -> Vec<f64> {
    vec![1.0]
}
fn identity_core() -> Vec<CoreKind> {
    vec![CoreKind::Identity]
}
fn no_projection() -> Vec<ProjectionMode> {
    vec![ProjectionMode::Identity]
}
fn no_reshape() -> Vec<bool> {
    vec![false]
}
fn unit_alpha() -> f64 {
    1.0
}

/// Value lists per hyperparameter. `groups` is ignored for weight-wise
/// grouping, which always uses one group per weight.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(default = "one")]
    pub groups: Vec<usize>,
    #[serde(default = "weight_wise")]
    pub group_mode: Vec<GroupMode>,
    pub order: Vec<usize>,
    #[serde(default = "one")]
    pub splits: Vec<usize>,
    pub rank: Vec<usize>,
    #[serde(default = "full_ratio")]
    pub rho: Vec<f64>,
    #[serde(default = "identity_core")]
    pub core: Vec<CoreKind>,
    #[serde(default = "no_projection")]
    pub projection: Vec<ProjectionMode>,
    #[serde(default = "no_reshape")]
    pub reshape: Vec<bool>,
    #[serde(default = "unit_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SweepGrid {
    pub fn from_json(text: &str) -> Result<Self> {
        let grid: Self = serde_json::from_str(text)?;
        let lens = [
            ("groups", grid.groups.len()),
            ("group_mode", grid.group_mode.len()),
            ("order", grid.order.len()),
            ("splits", grid.splits.len()),
            ("rank", grid.rank.len()),
            ("rho", grid.rho.len()),
            ("core", grid.core.len()),
            ("projection", grid.projection.len()),
            ("reshape", grid.reshape.len()),
        ];
        if let Some((name, _)) = lens.iter().find(|(_, n)| *n == 0) {
            return Err(Error::InvalidConfig(format!("grid list `{name}` is empty")));
        }
        Ok(grid)
    }

    /// Cross product, with weight-wise duplicates over `groups` removed.
    pub fn configs(&self, manifest: &WeightManifest) -> Vec<SuperLoraConfig> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for &group_mode in &self.group_mode {
            for &g in &self.groups {
                let groups = if group_mode == GroupMode::WeightWise {
                    manifest.len()
                } else {
                    g
                };
                for &order in &self.order {
                    for &splits in &self.splits {
                        for &r in &self.rank {
                            for &rho in &self.rho {
                                for &core in &self.core {
                                    for &projection in &self.projection {
                                        for &reshape in &self.reshape {
                                            let cfg = SuperLoraConfig {
                                                groups,
                                                group_mode,
                                                order,
                                                splits,
                                                rank: Rank::Uniform(r),
                                                core,
                                                reshape,
                                                projection,
                                                seed: self.seed,
                                                rho,
                                                alpha: self.alpha,
                                                ..SuperLoraConfig::lora(groups, r, self.alpha)
                                            };
                                            if seen.insert(cfg.to_json()) {
                                                out.push(cfg);
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Inclusive bounds on the trainable parameter count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Budget {
    pub min: usize,
    pub max: usize,
}

impl FromStr for Budget {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (lo, hi) = s.split_once(':').ok_or("budget must look like MIN:MAX")?;
        let min = lo
            .trim()
            .parse()
            .map_err(|_| format!("bad budget minimum `{lo}`"))?;
        let max = hi
            .trim()
            .parse()
            .map_err(|_| format!("bad budget maximum `{hi}`"))?;
        if min > max {
            return Err(format!("budget minimum {min} exceeds maximum {max}"));
        }
        Ok(Budget { min, max })
    }
}

pub const HEADER: &str = "variant,G,group_mode,M,K,r,rho,core,projection,reshape,params";

fn key_fields(cfg: &SuperLoraConfig) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}",
        cfg.groups,
        cfg.group_mode,
        cfg.order,
        cfg.splits,
        cfg.rank,
        cfg.rho,
        cfg.core,
        cfg.projection,
        cfg.reshape
    )
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub config: SuperLoraConfig,
    pub params: usize,
}

impl SweepRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{}",
            classify_variant(&self.config),
            key_fields(&self.config),
            self.params
        )
    }
}

#[derive(Debug, Default)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub rejected: Vec<(SuperLoraConfig, String)>,
}

impl SweepResult {
    pub fn rows_csv(&self) -> String {
        let mut s = format!("{HEADER}\n");
        for row in &self.rows {
            let _ = writeln!(s, "{}", row.csv());
        }
        s
    }

    pub fn rejections_csv(&self) -> String {
        let mut s = String::from("G,group_mode,M,K,r,rho,core,projection,reshape,reason\n");
        for (cfg, why) in &self.rejected {
            let _ = writeln!(s, "{},\"{}\"", key_fields(cfg), why.replace('"', "'"));
        }
        s
    }
}

pub fn run_sweep(
    manifest: &WeightManifest,
    grid: &SweepGrid,
    budget: Option<Budget>,
) -> SweepResult {
    let mut result = SweepResult::default();
    for cfg in grid.configs(manifest) {
        match count_params(&cfg, manifest) {
            Ok(params) => match budget {
                Some(b) if params < b.min || params > b.max => result.rejected.push((
                    cfg,
                    format!("{params} parameters outside budget {}:{}", b.min, b.max),
                )),
                _ => result.rows.push(SweepRow {
                    config: cfg,
                    params,
                }),
            },
            Err(e) => result.rejected.push((cfg, e.to_string())),
        }
    }
    result.rows.sort_by_key(|r| r.params);
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use superlora::grouping::vit_base_qv;

    #[test]
    fn lora_grid_on_vit() {
        let grid = SweepGrid::from_json(r#"{"order": [2], "rank": [8, 1]}"#).unwrap();
        let res = run_sweep(&vit_base_qv(), &grid, None);
        let params: Vec<usize> = res.rows.iter().map(|r| r.params).collect();
        assert_eq!(params, [36_864, 294_912]);
        assert!(res.rows[0]
            .csv()
            .starts_with("LoRA,24,weight-wise,2,1,1,1,identity,identity,false,"));
    }

    #[test]
    fn invalid_points_are_rejected_with_reasons() {
        let grid =
            SweepGrid::from_json(r#"{"order": [2, 3], "splits": [2], "rank": [1]}"#).unwrap();
        let res = run_sweep(&vit_base_qv(), &grid, None);
        assert_eq!(res.rows.len(), 1);
        assert_eq!(res.rejected.len(), 1);
        assert!(res.rejected[0].1.contains("M=2"));
    }

    #[test]
    fn grid_and_budget_parsing() {
        assert!(SweepGrid::from_json(r#"{"order": [], "rank": [1]}"#).is_err());
        assert!(SweepGrid::from_json(r#"{"order": [2], "rank": [1], "dropout": [0.1]}"#).is_err());
        assert_eq!(
            "0:100".parse::<Budget>().unwrap(),
            Budget { min: 0, max: 100 }
        );
        assert!("5:1".parse::<Budget>().is_err());
        assert!("100".parse::<Budget>().is_err());
    }
}
