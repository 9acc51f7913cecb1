//! Fitted surfaces on an evaluation grid.

use serde::{Deserialize, Serialize};

use crate::error::{FpcaError, Result};
use crate::grid::EvaluationGrid;

/// Marker stored at masked-out nodes.
pub const OUTSIDE: f64 = f64::NAN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceKind {
    Mean,
    Covariance,
    DiagonalPlusNoise,
    NoiseVariance,
}

/// Values of a fitted function on a grid.
///
/// Covariance surfaces live on the product of the grid with itself: entry `s * M + t` holds the
/// value at the node pair `(s, t)`, with `M` the total node count.
#[derive(Debug, Clone)]
pub struct SurfaceEstimate {
    pub grid: EvaluationGrid,
    pub kind: SurfaceKind,
    pub values: Vec<f64>,
}

impl SurfaceEstimate {
    pub fn new(grid: EvaluationGrid, kind: SurfaceKind, values: Vec<f64>) -> Result<Self> {
        let m = grid.len();
        let expected = if kind == SurfaceKind::Covariance { m * m } else { m };
        if values.len() != expected {
            return Err(FpcaError::DimensionMismatch { expected, found: values.len() });
        }
        Ok(SurfaceEstimate { grid, kind, values })
    }

    pub fn is_outside(v: f64) -> bool {
        v.is_nan()
    }

    /// Value at node `idx`, or `None` at a masked-out node.
    pub fn at(&self, idx: usize) -> Option<f64> {
        let v = self.values[idx];
        (!v.is_nan()).then_some(v)
    }

    /// Values with masked-out nodes replaced by zero.
    pub fn zero_extended(&self) -> Vec<f64> {
        self.values.iter().map(|&v| if v.is_nan() { 0.0 } else { v }).collect()
    }

    pub fn cov(&self, s: usize, t: usize) -> f64 {
        self.values[s * self.grid.len() + t]
    }

    /// Diagonal `Gamma(t, t)` of a covariance surface.
    pub fn diagonal(&self) -> Vec<f64> {
        let m = self.grid.len();
        (0..m).map(|t| self.values[t * m + t]).collect()
    }

    /// Multilinear interpolation of a d-dimensional surface.
    pub fn interpolate(&self, x: &[f64]) -> Result<f64> {
        self.grid.interpolate(&self.values, x)
    }

    /// Checks that every in-mask value is finite.
    pub fn check_finite(&self) -> Result<()> {
        let m = self.grid.len();
        let bad = if self.kind == SurfaceKind::Covariance {
            (0..m * m).find(|&k| self.grid.in_mask(k / m) && self.grid.in_mask(k % m) && !self.values[k].is_finite())
        } else {
            (0..m).find(|&k| self.grid.in_mask(k) && !self.values[k].is_finite())
        };
        match bad {
            Some(k) => Err(FpcaError::Precondition(format!("surface has a non-finite value at entry {k}"))),
            None => Ok(()),
        }
    }
}
