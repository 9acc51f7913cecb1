//! Binned FFT evaluation of the local linear mean and diagonal-plus-noise estimators.

use crate::binning::BinnedData;
use crate::error::{FpcaError, Result};
use crate::fft::conv::{extract_region, powers, GridConvolver, IndexBox, Power};
use crate::grid::EvaluationGrid;
use crate::kernel::{kernel_peak, Bandwidth};
use crate::locfit::{LocalFit, LocalSystem};
use crate::smoother::PointCloud;

/// Response smoothed by [`fft_local_linear`](super::fft_local_linear).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentTarget {
    /// Observed values, for the mean.
    Mean,
    /// Squared values, for the diagonal plus noise.
    Squares,
}

/// Index of each degree-one and degree-two power in the listing of [`powers`].
pub(crate) struct PowerIndex {
    pub list: Vec<Power>,
}

impl PowerIndex {
    pub fn new(d: usize, deg: usize) -> Self {
        PowerIndex { list: powers(d, deg) }
    }

    pub fn of(&self, p: &[u8]) -> usize {
        self.list.iter().position(|q| q.as_slice() == p).expect("power listed")
    }

    pub fn unit(&self, k: usize) -> usize {
        let mut p = vec![0u8; self.list[0].len()];
        p[k] = 1;
        self.of(&p)
    }

    pub fn pair(&self, k: usize, l: usize) -> usize {
        let mut p = vec![0u8; self.list[0].len()];
        p[k] += 1;
        p[l] += 1;
        self.of(&p)
    }
}

/// Mass below which an FFT-evaluated window counts as empty: convolution round-off sits far below it.
pub(crate) fn empty_threshold(total_weight: f64, h: &[f64]) -> f64 {
    1e-12 * total_weight * kernel_peak(h)
}

/// Local fits on one block core. Results follow the row-major order of `core`.
pub(crate) fn local_linear_core(
    binned: &BinnedData,
    conv: &GridConvolver,
    h: &Bandwidth,
    target: MomentTarget,
    core: &IndexBox,
    halo: &[usize],
) -> Vec<LocalFit> {
    let d = binned.dim();
    let region = conv.region_for(core, halo);
    let shape = &binned.shape;
    let w = extract_region(&binned.weight, shape, &region);
    let response = match target {
        MomentTarget::Mean => &binned.value,
        MomentTarget::Squares => &binned.square,
    };
    let v = extract_region(response, shape, &region);
    let pw = PowerIndex::new(d, 2);
    let pv = PowerIndex::new(d, 1);
    let s = conv.moments(&w, &region, core, &pw.list);
    let t = conv.moments(&v, &region, core, &pv.list);
    let min_mass = empty_threshold(binned.total_weight(), h.values());
    let unit_w: Vec<usize> = (0..d).map(|k| pw.unit(k)).collect();
    let unit_v: Vec<usize> = (0..d).map(|k| pv.unit(k)).collect();
    let mut pair_w = vec![0; d * d];
    for k in 0..d {
        for l in 0..d {
            pair_w[k * d + l] = pw.pair(k, l);
        }
    }
    let mut sys = LocalSystem::new(d + 1);
    (0..core.len())
        .map(|i| {
            sys.clear();
            sys.set(0, 0, s[0][i]);
            sys.r[0] = t[0][i];
            for k in 0..d {
                sys.set(0, k + 1, s[unit_w[k]][i]);
                sys.r[k + 1] = t[unit_v[k]][i];
                for l in k..d {
                    sys.set(k + 1, l + 1, s[pair_w[k * d + l]][i]);
                }
            }
            sys.solve(min_mass)
        })
        .collect()
}

/// Refits empty windows directly on the binned pseudo-observations with enlarged bandwidths.
pub(crate) fn refit_empty(
    binned: &BinnedData,
    grid: &EvaluationGrid,
    h: &Bandwidth,
    target: MomentTarget,
    nodes: &[usize],
) -> Result<Vec<f64>> {
    let d = grid.dim();
    let mut coords = Vec::new();
    let mut weights = Vec::new();
    let mut values = Vec::new();
    let response = match target {
        MomentTarget::Mean => &binned.value,
        MomentTarget::Squares => &binned.square,
    };
    for a in 0..grid.len() {
        if binned.weight[a] > 0.0 {
            coords.extend(grid.node_vec(a));
            weights.push(binned.weight[a]);
            values.push(response[a] / binned.weight[a]);
        }
    }
    let cloud = PointCloud::new(d, coords, weights, values, h.values());
    let mut out = Vec::with_capacity(nodes.len());
    let mut empty = 0;
    for &a in nodes {
        match cloud.fit_with_fallback(&grid.node_vec(a), h.values()).value() {
            Some(v) => out.push(v),
            None => {
                empty += 1;
                out.push(f64::NAN);
            }
        }
    }
    if empty > 0 {
        return Err(FpcaError::BandwidthTooSmall { nodes: empty });
    }
    Ok(out)
}
