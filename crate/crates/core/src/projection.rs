//! Fixed, seed-reproducible maps from a group's factorized output to its
//! final update: identity, shuffling, and fastfood-style projections.
//!
//! The linear chain is applied to the vector left to right:
//! zero-pad to 2^N, FWHT, scale by `gauss`, permute, FWHT, keep the first
//! `n_out` entries, scale by `right_diag`. Nonlinear modes follow the chain
//! with tanhshrink.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, SeededStream};
use crate::tensor::fwht_in_place;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    Identity,
    Shuffle,
    Linear,
    LinearV2,
    Nonlinear,
    NonlinearV2,
}

impl ProjectionMode {
    pub const ALL: [ProjectionMode; 6] = [
        ProjectionMode::Identity,
        ProjectionMode::Shuffle,
        ProjectionMode::Linear,
        ProjectionMode::LinearV2,
        ProjectionMode::Nonlinear,
        ProjectionMode::NonlinearV2,
    ];

    pub fn is_fastfood(self) -> bool {
        !matches!(self, ProjectionMode::Identity | ProjectionMode::Shuffle)
    }

    pub fn is_nonlinear(self) -> bool {
        matches!(
            self,
            ProjectionMode::Nonlinear | ProjectionMode::NonlinearV2
        )
    }

    fn gaussian_right_diag(self) -> bool {
        matches!(self, ProjectionMode::LinearV2 | ProjectionMode::NonlinearV2)
    }

    /// Whether the map may change the vector length.
    pub fn allows_compression(self) -> bool {
        self.is_fastfood()
    }
}

impl fmt::Display for ProjectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProjectionMode::Identity => "identity",
            ProjectionMode::Shuffle => "shuffle",
            ProjectionMode::Linear => "linear",
            ProjectionMode::LinearV2 => "linear_v2",
            ProjectionMode::Nonlinear => "nonlinear",
            ProjectionMode::NonlinearV2 => "nonlinear_v2",
        })
    }
}

impl FromStr for ProjectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown projection mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ProjectionSpec {
    pub mode: ProjectionMode,
    pub seed: u64,
    pub n_in: usize,
    pub n_out: usize,
}

impl ProjectionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_in == 0 || self.n_out == 0 {
            return Err(Error::InvalidProjection("sizes must be positive".into()));
        }
        if !self.mode.is_fastfood() && self.n_in != self.n_out {
            return Err(Error::InvalidProjection(format!(
                "{} projection needs n_in == n_out, got {} -> {}",
                self.mode, self.n_in, self.n_out
            )));
        }
        if self.n_in > self.n_out {
            return Err(Error::InvalidProjection(format!(
                "projection cannot shrink: n_in {} > n_out {}",
                self.n_in, self.n_out
            )));
        }
        Ok(())
    }
}

/// Frozen random state of one projection. Never trained, never serialized.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionState {
    spec: ProjectionSpec,
    exponent: u32,
    permutation: Vec<usize>,
    gauss: Vec<f64>,
    right_diag: Vec<f64>,
}

pub fn make_projection(spec: ProjectionSpec) -> Result<ProjectionState> {
    spec.validate()?;
    let exponent = spec
        .n_in
        .max(spec.n_out)
        .next_power_of_two()
        .trailing_zeros();
    let padded = 1usize << exponent;
    let mode = spec.mode;
    let permutation = match mode {
        ProjectionMode::Identity => Vec::new(),
        ProjectionMode::Shuffle => {
            SeededStream::new(spec.seed, stream::PERMUTATION).permutation(spec.n_out)
        }
        _ => SeededStream::new(spec.seed, stream::PERMUTATION).permutation(padded),
    };
    let (gauss, right_diag) = if mode.is_fastfood() {
        let mut g = SeededStream::new(spec.seed, stream::GAUSS);
        let gauss = (0..padded).map(|_| g.normal()).collect();
        let mut r = SeededStream::new(spec.seed, stream::RIGHT_DIAG);
        let right = (0..spec.n_out)
            .map(|_| {
                if mode.gaussian_right_diag() {
                    r.normal()
                } else {
                    r.rademacher()
                }
            })
            .collect();
        (gauss, right)
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(ProjectionState {
        spec,
        exponent,
        permutation,
        gauss,
        right_diag,
    })
}

impl ProjectionState {
    pub fn spec(&self) -> &ProjectionSpec {
        &self.spec
    }

    pub fn mode(&self) -> ProjectionMode {
        self.spec.mode
    }

    /// N with 2^N >= max(n_in, n_out).
    pub fn exponent(&self) -> u32 {
        self.exponent
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn gauss(&self) -> &[f64] {
        &self.gauss
    }

    pub fn right_diag(&self) -> &[f64] {
        &self.right_diag
    }

    fn check_len(&self, got: usize, want: usize, what: &str) -> Result<()> {
        if got != want {
            return Err(Error::DimensionMismatch(format!(
                "{what} has length {got}, projection expects {want}"
            )));
        }
        Ok(())
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.apply_with_preactivation(x)?.0)
    }

    /// Applies the map and also returns the linear-chain output, which the
    /// tanhshrink Jacobian needs during backpropagation.
    pub fn apply_with_preactivation(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_len(x.len(), self.spec.n_in, "input")?;
        let z = self.linear_forward(x)?;
        let out = if self.spec.mode.is_nonlinear() {
            z.iter().map(|&t| tanhshrink(t)).collect()
        } else {
            z.clone()
        };
        Ok((out, z))
    }

    fn linear_forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self.spec.mode {
            ProjectionMode::Identity => Ok(x.to_vec()),
            ProjectionMode::Shuffle => Ok(self.permutation.iter().map(|&p| x[p]).collect()),
            _ => {
                let mut buf = vec![0.0; 1 << self.exponent];
                buf[..x.len()].copy_from_slice(x);
                fwht_in_place(&mut buf)?;
                for (b, g) in buf.iter_mut().zip(&self.gauss) {
                    *b *= g;
                }
                let mut permuted: Vec<f64> = self.permutation.iter().map(|&p| buf[p]).collect();
                fwht_in_place(&mut permuted)?;
                permuted.truncate(self.spec.n_out);
                for (v, d) in permuted.iter_mut().zip(&self.right_diag) {
                    *v *= d;
                }
                Ok(permuted)
            }
        }
    }

    /// Transpose of the map, for the linear modes only.
    pub fn apply_adjoint(&self, g: &[f64]) -> Result<Vec<f64>> {
        if self.spec.mode.is_nonlinear() {
            return Err(Error::InvalidProjection(format!(
                "{} projection has no linear adjoint; chain the tanhshrink derivative and use linear_adjoint",
                self.spec.mode
            )));
        }
        self.linear_adjoint(g)
    }

    /// Transpose of the linear chain (for nonlinear modes, the part before
    /// tanhshrink).
    pub fn linear_adjoint(&self, g: &[f64]) -> Result<Vec<f64>> {
        self.check_len(g.len(), self.spec.n_out, "gradient")?;
        match self.spec.mode {
            ProjectionMode::Identity => Ok(g.to_vec()),
            ProjectionMode::Shuffle => {
                let mut out = vec![0.0; self.spec.n_in];
                for (i, &p) in self.permutation.iter().enumerate() {
                    out[p] = g[i];
                }
                Ok(out)
            }
            _ => {
                let mut buf = vec![0.0; 1 << self.exponent];
                for ((b, v), d) in buf.iter_mut().zip(g).zip(&self.right_diag) {
                    *b = v * d;
                }
                fwht_in_place(&mut buf)?;
                let mut unpermuted = vec![0.0; buf.len()];
                for (i, &p) in self.permutation.iter().enumerate() {
                    unpermuted[p] = buf[i];
                }
                for (b, gs) in unpermuted.iter_mut().zip(&self.gauss) {
                    *b *= gs;
                }
                fwht_in_place(&mut unpermuted)?;
                unpermuted.truncate(self.spec.n_in);
                Ok(unpermuted)
            }
        }
    }

    /// Gradient with respect to the input, given the gradient at the output
    /// and the pre-activation returned by `apply_with_preactivation`.
    pub fn backward(&self, g: &[f64], preactivation: &[f64]) -> Result<Vec<f64>> {
        if self.spec.mode.is_nonlinear() {
            self.check_len(preactivation.len(), self.spec.n_out, "pre-activation")?;
            let chained: Vec<f64> = g
                .iter()
                .zip(preactivation)
                .map(|(gi, &z)| gi * tanhshrink_derivative(z))
                .collect();
            self.linear_adjoint(&chained)
        } else {
            self.linear_adjoint(g)
        }
    }
}

pub fn tanhshrink(x: f64) -> f64 {
    x - x.tanh()
}

/// d/dx (x - tanh x) = tanh^2 x
pub fn tanhshrink_derivative(x: f64) -> f64 {
    let t = x.tanh();
    t * t
}
