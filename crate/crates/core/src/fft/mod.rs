//! Binned FFT smoothing on equispaced grids, with overlapping-block evaluation.

pub mod conv;
pub mod covariance;
pub mod mean;
pub mod plan;

use std::sync::Arc;

use rayon::prelude::*;

pub use conv::IndexBox;
pub use covariance::CovarianceEngine;
pub use mean::MomentTarget;
pub use plan::BlockPlan;

use crate::binning::BinnedData;
use crate::error::{FpcaError, Result};
use crate::grid::EvaluationGrid;
use crate::kernel::{AxisStencil, Bandwidth};
use crate::locfit::LocalFit;
use crate::smoother::mean_on_grid;
use crate::surface::{SurfaceEstimate, SurfaceKind, OUTSIDE};
use conv::GridConvolver;

/// Operation evaluated block by block by [`blockwise_apply`].
pub enum FftOp<'a> {
    LocalLinear { binned: &'a BinnedData, target: MomentTarget },
    Covariance { binned: Arc<BinnedData>, mean: &'a SurfaceEstimate },
}

fn stencils(grid: &EvaluationGrid, h: &Bandwidth) -> Result<Vec<AxisStencil>> {
    grid.require_equispaced()?;
    if h.dim() != grid.dim() {
        return Err(FpcaError::DimensionMismatch { expected: grid.dim(), found: h.dim() });
    }
    Ok((0..grid.dim()).map(|k| AxisStencil::new(h.get(k), grid.spacing(k))).collect())
}

/// Stencil radius in nodes per axis for bandwidth `h` on `grid`.
pub fn stencil_radii(grid: &EvaluationGrid, h: &Bandwidth) -> Vec<usize> {
    (0..grid.dim()).map(|k| crate::kernel::stencil_radius(h.get(k), grid.spacing(k))).collect()
}

pub fn fft_local_linear(binned: &BinnedData, grid: &EvaluationGrid, h: &Bandwidth, target: MomentTarget) -> Result<SurfaceEstimate> {
    blockwise_apply(&BlockPlan::single(grid.shape()), grid, h, FftOp::LocalLinear { binned, target })
}

pub fn fft_covariance(binned: Arc<BinnedData>, grid: &EvaluationGrid, h: &Bandwidth, mean: &SurfaceEstimate) -> Result<SurfaceEstimate> {
    let mut shape = grid.shape().to_vec();
    shape.extend_from_slice(grid.shape());
    blockwise_apply(&BlockPlan::single(&shape), grid, h, FftOp::Covariance { binned, mean })
}

/// Local fits at every node with empty windows left empty; carries the self-influence factors.
pub fn fft_local_fits(binned: &BinnedData, grid: &EvaluationGrid, h: &Bandwidth, target: MomentTarget) -> Result<Vec<LocalFit>> {
    let st = stencils(grid, h)?;
    if binned.shape != grid.shape() {
        return Err(FpcaError::InvalidGrid("binned arrays do not conform to the grid".into()));
    }
    let conv = GridConvolver::new(grid.shape(), st);
    let core = IndexBox::full(grid.shape());
    Ok(mean::local_linear_core(binned, &conv, h, target, &core, grid.shape()))
}

/// Runs `op` on every block of `plan` and stitches the block cores.
///
/// Local linear plans partition the grid; covariance plans partition the product grid, the
/// first `d` axes indexing `s` and the last `d` indexing `t`.
pub fn blockwise_apply(plan: &BlockPlan, grid: &EvaluationGrid, h: &Bandwidth, op: FftOp<'_>) -> Result<SurfaceEstimate> {
    let st = stencils(grid, h)?;
    let radius: Vec<usize> = st.iter().map(|s| s.radius).collect();
    let d = grid.dim();
    match op {
        FftOp::LocalLinear { binned, target } => {
            if binned.shape != grid.shape() {
                return Err(FpcaError::InvalidGrid("binned arrays do not conform to the grid".into()));
            }
            plan.validate(grid.shape(), &radius)?;
            let conv = GridConvolver::new(grid.shape(), st);
            let results: Vec<Vec<LocalFit>> = plan
                .cores()
                .par_iter()
                .map(|core| mean::local_linear_core(binned, &conv, h, target, core, plan.halo()))
                .collect();
            let mut values = vec![OUTSIDE; grid.len()];
            let mut empty = Vec::new();
            for (core, fits) in plan.cores().iter().zip(results) {
                for (g, fit) in core.global_indices(grid.shape()).into_iter().zip(fits) {
                    if !grid.in_mask(g) {
                        continue;
                    }
                    match fit.value() {
                        Some(v) => values[g] = v,
                        None => empty.push(g),
                    }
                }
            }
            if !empty.is_empty() {
                let refits = mean::refit_empty(binned, grid, h, target, &empty)?;
                for (g, v) in empty.into_iter().zip(refits) {
                    values[g] = v;
                }
            }
            let kind = match target {
                MomentTarget::Mean => SurfaceKind::Mean,
                MomentTarget::Squares => SurfaceKind::DiagonalPlusNoise,
            };
            SurfaceEstimate::new(grid.clone(), kind, values)
        }
        FftOp::Covariance { binned, mean } => {
            let mut shape = grid.shape().to_vec();
            shape.extend_from_slice(grid.shape());
            let mut radius2 = radius.clone();
            radius2.extend_from_slice(&radius);
            plan.validate(&shape, &radius2)?;
            let mu = mean_on_grid(mean, grid)?;
            let engine = CovarianceEngine::new(binned, grid, h, &mu)?;
            let m = grid.len();
            let mut values = vec![OUTSIDE; m * m];
            let halo_s = &plan.halo()[..d];
            let halo_t = &plan.halo()[d..];
            for core in plan.cores() {
                let s_core = IndexBox { lo: core.lo[..d].to_vec(), hi: core.hi[..d].to_vec() };
                let t_core = IndexBox { lo: core.lo[d..].to_vec(), hi: core.hi[d..].to_vec() };
                let block = engine.compute_box(&s_core, &t_core, halo_s, halo_t)?;
                let s_idx = s_core.global_indices(grid.shape());
                let t_idx = t_core.global_indices(grid.shape());
                for (a, &s) in s_idx.iter().enumerate() {
                    let row = &block[a * t_idx.len()..(a + 1) * t_idx.len()];
                    for (b, &t) in t_idx.iter().enumerate() {
                        values[s * m + t] = row[b];
                    }
                }
            }
            SurfaceEstimate::new(grid.clone(), SurfaceKind::Covariance, values)
        }
    }
}
