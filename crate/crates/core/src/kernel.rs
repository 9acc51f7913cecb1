//! Epanechnikov product kernel, bandwidths and discrete stencils.

use crate::error::{FpcaError, Result};

/// One-dimensional Epanechnikov kernel `0.75 (1 - u^2)` on `|u| <= 1`.
#[inline]
pub fn epanechnikov(u: f64) -> f64 {
    if u.abs() <= 1.0 {
        0.75 * (1.0 - u * u)
    } else {
        0.0
    }
}

/// Product kernel at scaled offsets `u` (already divided by the bandwidth).
pub fn kernel_eval(u: &[f64]) -> f64 {
    let mut k = 1.0;
    for &ui in u {
        k *= epanechnikov(ui);
        if k == 0.0 {
            return 0.0;
        }
    }
    k
}

/// Per-axis bandwidths, in the units of the corresponding axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Bandwidth(Vec<f64>);

impl Bandwidth {
    pub fn new(h: Vec<f64>) -> Result<Self> {
        if h.is_empty() {
            return Err(FpcaError::InvalidBandwidth("no axes".into()));
        }
        if let Some(bad) = h.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
            return Err(FpcaError::InvalidBandwidth(format!("entry {bad} is not a positive finite number")));
        }
        Ok(Bandwidth(h))
    }

    pub fn uniform(dim: usize, h: f64) -> Result<Self> {
        Self::new(vec![h; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, k: usize) -> f64 {
        self.0[k]
    }

    pub fn scaled(&self, factor: f64) -> Bandwidth {
        Bandwidth(self.0.iter().map(|h| h * factor).collect())
    }

    /// Bandwidth for the product space of two copies of this one, as used for covariance surfaces.
    pub fn doubled(&self) -> Bandwidth {
        let mut v = self.0.clone();
        v.extend_from_slice(&self.0);
        Bandwidth(v)
    }

    /// Checks the dimension and that no entry exceeds the axis extent.
    pub fn check_against(&self, extents: &[f64]) -> Result<()> {
        if extents.len() != self.0.len() {
            return Err(FpcaError::DimensionMismatch { expected: extents.len(), found: self.0.len() });
        }
        for (k, (&h, &e)) in self.0.iter().zip(extents).enumerate() {
            if h > e * (1.0 + 1e-12) {
                return Err(FpcaError::InvalidBandwidth(format!(
                    "bandwidth {h} on axis {k} exceeds the axis extent {e}"
                )));
            }
        }
        Ok(())
    }
}

/// Kernel value at the origin for a product kernel with bandwidth `h`.
pub fn kernel_peak(h: &[f64]) -> f64 {
    h.iter().map(|hk| 0.75 / hk).product()
}

/// Discrete kernel stencils on an equispaced axis.
///
/// `taps[p][delta + radius]` holds `kappa_p(delta) = K(u) u^p / h` with `u = delta * spacing / h`.
#[derive(Debug, Clone)]
pub struct AxisStencil {
    pub radius: usize,
    pub taps: [Vec<f64>; 3],
}

impl AxisStencil {
    pub fn new(h: f64, spacing: f64) -> Self {
        let radius = stencil_radius(h, spacing);
        let mut taps = [vec![0.0; 2 * radius + 1], vec![0.0; 2 * radius + 1], vec![0.0; 2 * radius + 1]];
        for i in 0..=2 * radius {
            let delta = i as f64 - radius as f64;
            let u = delta * spacing / h;
            let k = epanechnikov(u) / h;
            taps[0][i] = k;
            taps[1][i] = k * u;
            taps[2][i] = k * u * u;
        }
        AxisStencil { radius, taps }
    }

    pub fn len(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Number of grid steps covered by half a kernel window.
pub fn stencil_radius(h: f64, spacing: f64) -> usize {
    ((h / spacing).ceil() as usize).max(1)
}
