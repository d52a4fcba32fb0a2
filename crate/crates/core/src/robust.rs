//! Robust M-estimator kernels and the chi-square natural test.
//!
//! Kernels act on whitened scalar residuals, one component at a time. The
//! weight returned by [`RobustKernel::weight`] is `ρ'(z)/z`, which is what
//! iteratively reweighted least squares multiplies into each row.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tukey bound giving 95% asymptotic efficiency on Gaussian data.
pub const TUKEY_95: f64 = 3.6851;
/// Chi-square 95% point for one degree of freedom.
pub const CHI2_1DOF_95: f64 = 3.841;

#[derive(Debug, Error, PartialEq)]
pub enum RobustError {
    #[error("kernel bound must be positive, got {0}")]
    NonPositiveBound(f64),
    #[error("gate threshold must be positive, got {0}")]
    NonPositiveThreshold(f64),
    #[error("innovation covariance is not positive definite")]
    NotPositiveDefinite,
    #[error("innovation has {0} entries but covariance is {1}x{2}")]
    DimensionMismatch(usize, usize, usize),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RobustKernel {
    #[default]
    None,
    Tukey {
        c: f64,
    },
    GemanMcClure {
        c: f64,
    },
}

impl RobustKernel {
    pub fn tukey(c: f64) -> Result<Self, RobustError> {
        check_bound(c).map(|c| Self::Tukey { c })
    }

    pub fn geman_mcclure(c: f64) -> Result<Self, RobustError> {
        check_bound(c).map(|c| Self::GemanMcClure { c })
    }

    pub fn validate(&self) -> Result<(), RobustError> {
        match *self {
            Self::None => Ok(()),
            Self::Tukey { c } | Self::GemanMcClure { c } => check_bound(c).map(|_| ()),
        }
    }

    pub fn cost(&self, z: f64) -> f64 {
        match *self {
            Self::None => 0.5 * z * z,
            Self::Tukey { c } => tukey_cost(z, c),
            Self::GemanMcClure { c } => gm_cost(z, c),
        }
    }

    pub fn weight(&self, z: f64) -> f64 {
        match *self {
            Self::None => 1.0,
            Self::Tukey { c } => tukey_weight(z, c),
            Self::GemanMcClure { c } => gm_weight(z, c),
        }
    }

    /// Short label used in tables: `none`, `TK`, `GM`.
    pub fn label(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Tukey { .. } => "TK",
            Self::GemanMcClure { .. } => "GM",
        }
    }
}

fn check_bound(c: f64) -> Result<f64, RobustError> {
    if c > 0.0 && c.is_finite() {
        Ok(c)
    } else {
        Err(RobustError::NonPositiveBound(c))
    }
}

pub fn tukey_cost(z: f64, c: f64) -> f64 {
    let sat = c * c / 6.0;
    if z.abs() <= c {
        let u = 1.0 - (z / c).powi(2);
        sat * (1.0 - u * u * u)
    } else {
        sat
    }
}

pub fn tukey_weight(z: f64, c: f64) -> f64 {
    if z.abs() <= c {
        let u = 1.0 - (z / c).powi(2);
        u * u
    } else {
        0.0
    }
}

pub fn gm_cost(z: f64, c: f64) -> f64 {
    let c2 = c * c;
    0.5 * c2 * z * z / (c2 + z * z)
}

pub fn gm_weight(z: f64, c: f64) -> f64 {
    let c2 = c * c;
    let d = c2 + z * z;
    c2 * c2 / (d * d)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub k: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self { k: CHI2_1DOF_95 }
    }
}

impl GateConfig {
    pub fn new(k: f64) -> Result<Self, RobustError> {
        if k > 0.0 && k.is_finite() {
            Ok(Self { k })
        } else {
            Err(RobustError::NonPositiveThreshold(k))
        }
    }
}

/// Per-component natural test: component `i` passes iff `ν_i² / S_ii ≤ k`.
pub fn natural_test(
    innovation: &DVector<f64>,
    s: &DMatrix<f64>,
    gate: &GateConfig,
) -> Result<Vec<bool>, RobustError> {
    let n = innovation.len();
    if s.nrows() != n || s.ncols() != n {
        return Err(RobustError::DimensionMismatch(n, s.nrows(), s.ncols()));
    }
    if s.clone().cholesky().is_none() {
        return Err(RobustError::NotPositiveDefinite);
    }
    Ok((0..n)
        .map(|i| innovation[i] * innovation[i] / s[(i, i)] <= gate.k)
        .collect())
}
