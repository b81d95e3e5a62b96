use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorization::CoreKind;
use crate::grouping::GroupMode;
use crate::projection::ProjectionMode;

/// A single rank replicated across modes, or one rank per mode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Rank {
    Uniform(usize),
    PerMode(Vec<usize>),
}

impl Rank {
    /// Ranks for an order-`order` split.
    pub fn per_mode(&self, order: usize) -> Vec<usize> {
        match self {
            Rank::Uniform(r) => vec![*r; order],
            Rank::PerMode(v) => v.clone(),
        }
    }

    /// The `r` in the `alpha / r` delta scale: the largest mode rank.
    pub fn scale_rank(&self) -> usize {
        match self {
            Rank::Uniform(r) => *r,
            Rank::PerMode(v) => v.iter().copied().max().unwrap_or(1),
        }
    }
}

impl fmt::Display for Rank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rank::Uniform(r) => write!(f, "{r}"),
            Rank::PerMode(v) => {
                let parts: Vec<String> = v.iter().map(usize::to_string).collect();
                write!(f, "{}", parts.join("x"))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// Deltas are multiplied by `alpha / r`.
    #[default]
    AlphaOverR,
    /// Deltas are multiplied by `alpha`.
    Alpha,
}

fn default_shared() -> bool {
    true
}

/// Full hyperparameter record of one adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuperLoraConfig {
    /// Number of groups G.
    pub groups: usize,
    pub group_mode: GroupMode,
    /// Tensor order M of every split.
    pub order: usize,
    /// Number of Kronecker splits K.
    pub splits: usize,
    pub rank: Rank,
    pub core: CoreKind,
    pub reshape: bool,
    pub projection: ProjectionMode,
    /// Seed of the frozen projection states.
    pub seed: u64,
    /// Projection ratio: factorized elements over group elements.
    pub rho: f64,
    pub alpha: f64,
    /// Side of a dense square left split (LoKr-style), if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense_split_dim: Option<usize>,
    #[serde(default)]
    pub scale_mode: ScaleMode,
    /// Share one projection state across groups of equal size.
    #[serde(default = "default_shared")]
    pub shared_projection: bool,
}

impl SuperLoraConfig {
    /// Plain weight-wise LoRA over `weights` matrices.
    pub fn lora(weights: usize, rank: usize, alpha: f64) -> Self {
        Self {
            groups: weights,
            group_mode: GroupMode::WeightWise,
            order: 2,
            splits: 1,
            rank: Rank::Uniform(rank),
            core: CoreKind::Identity,
            reshape: false,
            projection: ProjectionMode::Identity,
            seed: 0,
            rho: 1.0,
            alpha,
            dense_split_dim: None,
            scale_mode: ScaleMode::AlphaOverR,
            shared_projection: true,
        }
    }

    /// Dense weight-wise update (order 1, rank 1).
    pub fn dense(weights: usize) -> Self {
        Self {
            order: 1,
            rank: Rank::Uniform(1),
            alpha: 1.0,
            ..Self::lora(weights, 1, 1.0)
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.groups == 0 || self.order == 0 || self.splits == 0 {
            return bad(format!(
                "G, M and K must be at least 1 (got G={}, M={}, K={})",
                self.groups, self.order, self.splits
            ));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad(format!("rho must lie in (0, 1], got {}", self.rho));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if self.splits > 1 && self.order != 2 {
            return bad(format!(
                "K={} Kronecker splits need M=2, got M={}",
                self.splits, self.order
            ));
        }
        match &self.rank {
            Rank::Uniform(0) => return bad("rank must be positive".into()),
            Rank::PerMode(v) => {
                if self.core != CoreKind::Full {
                    return bad(format!(
                        "per-mode ranks need a full core, got {}",
                        self.core
                    ));
                }
                if v.len() != self.order {
                    return bad(format!("{} ranks given for order {}", v.len(), self.order));
                }
                if v.contains(&0) {
                    return bad("ranks must be positive".into());
                }
            }
            Rank::Uniform(_) => {}
        }
        if self.rho < 1.0 && !self.projection.allows_compression() {
            return bad(format!(
                "{} projection cannot compress (rho={})",
                self.projection, self.rho
            ));
        }
        if let Some(d) = self.dense_split_dim {
            if d == 0 {
                return bad("dense_split_dim must be positive".into());
            }
            if self.splits < 2 {
                return bad("dense_split_dim needs at least two splits".into());
            }
        }
        Ok(())
    }

    /// Multiplier applied to every materialized delta.
    pub fn delta_scale(&self) -> f64 {
        match self.scale_mode {
            ScaleMode::AlphaOverR => self.alpha / self.rank.scale_rank() as f64,
            ScaleMode::Alpha => self.alpha,
        }
    }
}
