//! Tensor-product evaluation grids with an optional in-domain mask.
//!
//! Flattened arrays over a grid are row-major with the last axis varying fastest.

use crate::error::{FpcaError, Result};

/// Relative tolerance used when deciding whether an axis is equispaced.
const EQUISPACED_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationGrid {
    axes: Vec<Vec<f64>>,
    mask: Option<Vec<bool>>,
    shape: Vec<usize>,
    strides: Vec<usize>,
    spacing: Vec<f64>,
    equispaced: Vec<bool>,
}

/// Location of a point relative to the grid cells along each axis.
#[derive(Debug, Clone)]
pub struct CellLocation {
    /// Lower node index of the enclosing cell per axis.
    pub base: Vec<usize>,
    /// Fractional position within the cell per axis, in [0, 1].
    pub frac: Vec<f64>,
}

impl EvaluationGrid {
    pub fn new(axes: Vec<Vec<f64>>, mask: Option<Vec<bool>>) -> Result<Self> {
        if axes.is_empty() {
            return Err(FpcaError::InvalidGrid("grid has no axes".into()));
        }
        let mut spacing = Vec::with_capacity(axes.len());
        let mut equispaced = Vec::with_capacity(axes.len());
        for (k, axis) in axes.iter().enumerate() {
            if axis.len() < 2 {
                return Err(FpcaError::InvalidGrid(format!("axis {k} has fewer than 2 nodes")));
            }
            if axis.iter().any(|x| !x.is_finite()) {
                return Err(FpcaError::InvalidGrid(format!("axis {k} has a non-finite node")));
            }
            if axis.windows(2).any(|w| w[1] <= w[0]) {
                return Err(FpcaError::InvalidGrid(format!("axis {k} is not strictly increasing")));
            }
            let span = axis[axis.len() - 1] - axis[0];
            let step = span / (axis.len() - 1) as f64;
            let even = axis
                .iter()
                .enumerate()
                .all(|(i, &x)| (x - (axis[0] + i as f64 * step)).abs() <= EQUISPACED_TOL * span);
            spacing.push(step);
            equispaced.push(even);
        }
        let shape: Vec<usize> = axes.iter().map(|a| a.len()).collect();
        let mut strides = vec![1; shape.len()];
        for k in (0..shape.len() - 1).rev() {
            strides[k] = strides[k + 1] * shape[k + 1];
        }
        let total: usize = shape.iter().product();
        if let Some(m) = &mask {
            if m.len() != total {
                return Err(FpcaError::InvalidGrid(format!(
                    "mask has {} entries but the grid has {total} nodes",
                    m.len()
                )));
            }
            if !m.iter().any(|&b| b) {
                return Err(FpcaError::InvalidGrid("mask excludes every node".into()));
            }
        }
        Ok(EvaluationGrid { axes, mask, shape, strides, spacing, equispaced })
    }

    /// Equispaced grid including both endpoints: `(lo, hi, nodes)` per axis.
    pub fn uniform(spec: &[(f64, f64, usize)]) -> Result<Self> {
        let axes = spec
            .iter()
            .map(|&(lo, hi, m)| {
                if m < 2 || !(hi > lo) {
                    return Err(FpcaError::InvalidGrid(format!("bad axis specification ({lo}, {hi}, {m})")));
                }
                let step = (hi - lo) / (m - 1) as f64;
                Ok((0..m).map(|i| if i == m - 1 { hi } else { lo + i as f64 * step }).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(axes, None)
    }

    /// Midpoint grid: `nodes` cell centres of equal cells partitioning `[lo, hi]`.
    pub fn cell_centered(spec: &[(f64, f64, usize)]) -> Result<Self> {
        let axes = spec
            .iter()
            .map(|&(lo, hi, m)| {
                if m < 2 || !(hi > lo) {
                    return Err(FpcaError::InvalidGrid(format!("bad axis specification ({lo}, {hi}, {m})")));
                }
                let step = (hi - lo) / m as f64;
                Ok((0..m).map(|i| lo + (i as f64 + 0.5) * step).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(axes, None)
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        self.mask = Some(mask);
        Self::new(self.axes, self.mask)
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    /// Total number of nodes, masked or not.
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn axes(&self) -> &[Vec<f64>] {
        &self.axes
    }

    pub fn axis(&self, k: usize) -> &[f64] {
        &self.axes[k]
    }

    /// Mean node spacing along axis `k`.
    pub fn spacing(&self, k: usize) -> f64 {
        self.spacing[k]
    }

    pub fn lo(&self) -> Vec<f64> {
        self.axes.iter().map(|a| a[0]).collect()
    }

    pub fn hi(&self) -> Vec<f64> {
        self.axes.iter().map(|a| a[a.len() - 1]).collect()
    }

    pub fn extents(&self) -> Vec<f64> {
        self.axes.iter().map(|a| a[a.len() - 1] - a[0]).collect()
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn is_equispaced(&self) -> bool {
        self.equispaced.iter().all(|&e| e)
    }

    pub fn require_equispaced(&self) -> Result<()> {
        match self.equispaced.iter().position(|&e| !e) {
            Some(axis) => Err(FpcaError::GridNotEquispaced { axis }),
            None => Ok(()),
        }
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    #[inline]
    pub fn in_mask(&self, idx: usize) -> bool {
        self.mask.as_ref().map_or(true, |m| m[idx])
    }

    /// Flat indices of in-mask nodes in increasing order.
    pub fn in_mask_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.in_mask(i)).collect()
    }

    pub fn in_mask_count(&self) -> usize {
        self.mask.as_ref().map_or(self.len(), |m| m.iter().filter(|&&b| b).count())
    }

    pub fn in_mask_volume(&self) -> f64 {
        self.in_mask_count() as f64 * self.cell_volume()
    }

    pub fn unravel(&self, mut idx: usize, out: &mut [usize]) {
        for k in 0..self.dim() {
            out[k] = idx / self.strides[k];
            idx %= self.strides[k];
        }
    }

    pub fn ravel(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    /// Coordinates of node `idx`.
    pub fn node(&self, idx: usize, out: &mut [f64]) {
        let mut rem = idx;
        for k in 0..self.dim() {
            let i = rem / self.strides[k];
            rem %= self.strides[k];
            out[k] = self.axes[k][i];
        }
    }

    pub fn node_vec(&self, idx: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.dim()];
        self.node(idx, &mut v);
        v
    }

    /// Whether `x` lies in the closed hull of the grid, allowing a relative slack of `1e-12`.
    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && self.axes.iter().zip(x).all(|(a, &v)| {
                let lo = a[0];
                let hi = a[a.len() - 1];
                let tol = 1e-12 * (hi - lo).max(lo.abs().max(hi.abs()));
                v >= lo - tol && v <= hi + tol
            })
    }

    /// Locates `x` within the grid cells. Returns `None` outside the hull.
    ///
    /// Points within `1e-10` of a node, relative to the cell width, are snapped onto it.
    pub fn locate(&self, x: &[f64]) -> Option<CellLocation> {
        if !self.contains(x) {
            return None;
        }
        let d = self.dim();
        let mut base = vec![0; d];
        let mut frac = vec![0.0; d];
        for k in 0..d {
            let axis = &self.axes[k];
            let m = axis.len();
            let v = x[k].clamp(axis[0], axis[m - 1]);
            let (b, f) = if self.equispaced[k] {
                let p = (v - axis[0]) / self.spacing[k];
                let b = (p.floor() as usize).min(m - 2);
                (b, (p - b as f64).clamp(0.0, 1.0))
            } else {
                let b = match axis.binary_search_by(|a| a.partial_cmp(&v).unwrap()) {
                    Ok(i) => i.min(m - 2),
                    Err(i) => i.saturating_sub(1).min(m - 2),
                };
                (b, ((v - axis[b]) / (axis[b + 1] - axis[b])).clamp(0.0, 1.0))
            };
            let (b, f) = if f < 1e-10 {
                (b, 0.0)
            } else if f > 1.0 - 1e-10 {
                if b + 2 < m {
                    (b + 1, 0.0)
                } else {
                    (b, 1.0)
                }
            } else {
                (b, f)
            };
            base[k] = b;
            frac[k] = f;
        }
        Some(CellLocation { base, frac })
    }

    /// Visits the `2^d` corners of the cell containing `loc` with their multilinear weights.
    /// Corners with zero weight are skipped.
    pub fn for_each_corner(&self, loc: &CellLocation, mut f: impl FnMut(usize, f64)) {
        let d = self.dim();
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut idx = 0;
            for k in 0..d {
                let hi = (corner >> (d - 1 - k)) & 1 == 1;
                let wk = if hi { loc.frac[k] } else { 1.0 - loc.frac[k] };
                if wk == 0.0 {
                    w = 0.0;
                    break;
                }
                w *= wk;
                idx += (loc.base[k] + hi as usize) * self.strides[k];
            }
            if w != 0.0 {
                f(idx, w);
            }
        }
    }

    /// Multilinear interpolation of grid `values` at `x`.
    ///
    /// Masked-out corners are dropped and the remaining weights renormalized.
    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> Result<f64> {
        let loc = self.locate(x).ok_or_else(|| FpcaError::OutOfDomain { point: x.to_vec() })?;
        let mut acc = 0.0;
        let mut wsum = 0.0;
        let mut all_in = true;
        self.for_each_corner(&loc, |idx, w| {
            if self.in_mask(idx) {
                acc += w * values[idx];
                wsum += w;
            } else {
                all_in = false;
            }
        });
        if all_in {
            return Ok(acc);
        }
        if wsum <= 0.0 {
            return Err(FpcaError::OutOfDomain { point: x.to_vec() });
        }
        Ok(acc / wsum)
    }

    /// Riemann sum `cell_volume * sum f` over in-mask nodes, with non-finite entries counted as zero.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        let mut s = 0.0;
        for (i, &v) in values.iter().enumerate() {
            if self.in_mask(i) && v.is_finite() {
                s += v;
            }
        }
        s * self.cell_volume()
    }

    /// Riemann inner product of two grid arrays.
    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..a.len() {
            if self.in_mask(i) && a[i].is_finite() && b[i].is_finite() {
                s += a[i] * b[i];
            }
        }
        s * self.cell_volume()
    }

    /// Same axes, no mask.
    pub fn unmasked(&self) -> EvaluationGrid {
        let mut g = self.clone();
        g.mask = None;
        g
    }

    /// Same shape and spacing with every axis mapped by `x -> offset + scale * x`.
    pub fn mapped(&self, offset: &[f64], scale: &[f64]) -> Result<EvaluationGrid> {
        let axes = self
            .axes
            .iter()
            .enumerate()
            .map(|(k, a)| a.iter().map(|&x| offset[k] + scale[k] * x).collect())
            .collect();
        Self::new(axes, self.mask.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_row_major() {
        let g = EvaluationGrid::uniform(&[(0.0, 1.0, 3), (0.0, 2.0, 5)]).unwrap();
        assert_eq!(g.strides(), &[5, 1]);
        assert_eq!(g.node_vec(7), vec![0.5, 1.0]);
        let mut m = [0; 2];
        g.unravel(13, &mut m);
        assert_eq!(m, [2, 3]);
        assert_eq!(g.ravel(&m), 13);
        assert!((g.cell_volume() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_axes() {
        assert!(EvaluationGrid::new(vec![vec![0.0]], None).is_err());
        assert!(EvaluationGrid::new(vec![vec![0.0, 0.0]], None).is_err());
        assert!(EvaluationGrid::new(vec![vec![0.0, 1.0]], Some(vec![true])).is_err());
        let g = EvaluationGrid::new(vec![vec![0.0, 1.0, 3.0]], None).unwrap();
        assert!(matches!(g.require_equispaced(), Err(FpcaError::GridNotEquispaced { axis: 0 })));
    }

    #[test]
    fn interpolation_is_exact_for_multilinear() {
        let g = EvaluationGrid::uniform(&[(0.0, 1.0, 4), (-1.0, 1.0, 5)]).unwrap();
        let f = |x: &[f64]| 1.0 + 2.0 * x[0] - x[1] + 0.5 * x[0] * x[1];
        let vals: Vec<f64> = (0..g.len()).map(|i| f(&g.node_vec(i))).collect();
        for p in [[0.1, 0.3], [0.99, -0.97], [1.0, 1.0], [0.0, -1.0]] {
            assert!((g.interpolate(&vals, &p).unwrap() - f(&p)).abs() < 1e-13);
        }
        assert!(matches!(g.interpolate(&vals, &[1.1, 0.0]), Err(FpcaError::OutOfDomain { .. })));
    }

    #[test]
    fn cell_centered_riemann_sum() {
        let g = EvaluationGrid::cell_centered(&[(0.0, 10.0, 500)]).unwrap();
        let ones = vec![1.0; g.len()];
        assert!((g.integrate(&ones) - 10.0).abs() < 1e-12);
    }
}
