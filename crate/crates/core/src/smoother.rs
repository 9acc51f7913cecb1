//! Direct local linear estimators of the mean, covariance and diagonal-plus-noise surfaces.
//!
//! These evaluate the kernel sums observation by observation. They are exact for any grid and
//! serve as the reference for the binned FFT path.

use rayon::prelude::*;

use crate::dataset::FunctionalDataset;
use crate::error::{FpcaError, Result};
use crate::grid::EvaluationGrid;
use crate::kernel::{epanechnikov, Bandwidth};
use crate::locfit::{LocalFit, LocalSystem, MAX_DIM};
use crate::surface::{SurfaceEstimate, SurfaceKind, OUTSIDE};

/// Window enlargement factor and number of attempts for empty windows.
pub const ENLARGE_FACTOR: f64 = 1.5;
pub const ENLARGE_STEPS: usize = 3;

/// Weighted scattered points with a bucket index for window queries.
#[derive(Debug, Clone)]
pub struct PointCloud {
    pub dim: usize,
    pub coords: Vec<f64>,
    pub weights: Vec<f64>,
    pub values: Vec<f64>,
    lo: Vec<f64>,
    cell: Vec<f64>,
    dims: Vec<usize>,
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl PointCloud {
    /// Builds the index with buckets of width `cell` per axis.
    pub fn new(dim: usize, coords: Vec<f64>, weights: Vec<f64>, values: Vec<f64>, cell: &[f64]) -> Self {
        let n = weights.len();
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for c in coords.chunks(dim) {
            for k in 0..dim {
                lo[k] = lo[k].min(c[k]);
                hi[k] = hi[k].max(c[k]);
            }
        }
        if n == 0 {
            lo = vec![0.0; dim];
            hi = vec![0.0; dim];
        }
        // Cap the bucket count so sparse clouds over wide domains stay cheap.
        let mut cell: Vec<f64> = cell.to_vec();
        let mut dims: Vec<usize>;
        loop {
            dims = (0..dim).map(|k| ((hi[k] - lo[k]) / cell[k]).floor() as usize + 1).collect();
            let total: f64 = dims.iter().map(|&x| x as f64).product();
            if total <= (4 * n + 1024) as f64 {
                break;
            }
            for c in cell.iter_mut() {
                *c *= 2.0;
            }
        }
        let total: usize = dims.iter().product();
        let mut bucket_of = vec![0usize; n];
        let mut counts = vec![0usize; total + 1];
        for (j, c) in coords.chunks(dim).enumerate() {
            let mut b = 0;
            for k in 0..dim {
                let i = (((c[k] - lo[k]) / cell[k]).floor() as usize).min(dims[k] - 1);
                b = b * dims[k] + i;
            }
            bucket_of[j] = b;
            counts[b + 1] += 1;
        }
        for b in 0..total {
            counts[b + 1] += counts[b];
        }
        let starts = counts.clone();
        let mut fill = counts;
        let mut order = vec![0; n];
        for j in 0..n {
            order[fill[bucket_of[j]]] = j;
            fill[bucket_of[j]] += 1;
        }
        PointCloud { dim, coords, weights, values, lo, cell, dims, starts, order }
    }

    /// Observations of a dataset with weight `1/N_i`, valued `Y` or `Y^2`.
    pub fn from_dataset(ds: &FunctionalDataset, squares: bool, cell: &[f64]) -> Self {
        let d = ds.dim();
        let mut coords = Vec::with_capacity(ds.total_observations() * d);
        let mut weights = Vec::with_capacity(ds.total_observations());
        let mut values = Vec::with_capacity(ds.total_observations());
        for s in ds.samples() {
            let w = 1.0 / s.len() as f64;
            coords.extend_from_slice(s.coords());
            for &y in s.values() {
                weights.push(w);
                values.push(if squares { y * y } else { y });
            }
        }
        Self::new(d, coords, weights, values, cell)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn coord(&self, j: usize) -> &[f64] {
        &self.coords[j * self.dim..(j + 1) * self.dim]
    }

    /// Calls `f(j)` for every point whose bucket intersects the box `center ± radius`,
    /// in a fixed order.
    pub fn for_each_near(&self, center: &[f64], radius: &[f64], mut f: impl FnMut(usize)) {
        let d = self.dim;
        let mut lo_b = [0usize; MAX_DIM * 2];
        let mut hi_b = [0usize; MAX_DIM * 2];
        for k in 0..d {
            let a = ((center[k] - radius[k] - self.lo[k]) / self.cell[k]).floor();
            let b = ((center[k] + radius[k] - self.lo[k]) / self.cell[k]).floor();
            if b < 0.0 || a > (self.dims[k] - 1) as f64 {
                return;
            }
            lo_b[k] = a.max(0.0) as usize;
            hi_b[k] = (b as usize).min(self.dims[k] - 1);
        }
        let mut cur = lo_b;
        loop {
            let mut b = 0;
            for k in 0..d {
                b = b * self.dims[k] + cur[k];
            }
            for &j in &self.order[self.starts[b]..self.starts[b + 1]] {
                f(j);
            }
            let mut k = d;
            loop {
                if k == 0 {
                    return;
                }
                k -= 1;
                if cur[k] < hi_b[k] {
                    cur[k] += 1;
                    break;
                }
                cur[k] = lo_b[k];
            }
        }
    }

    /// Local linear fit at `t`, optionally leaving out point `skip`.
    pub fn fit_at(&self, t: &[f64], h: &[f64], skip: Option<usize>) -> LocalFit {
        let d = self.dim;
        let mut sys = LocalSystem::new(d + 1);
        let mut u = [0.0; MAX_DIM * 2];
        self.for_each_near(t, h, |j| {
            if Some(j) == skip {
                return;
            }
            let x = self.coord(j);
            let mut k_val = 1.0;
            for k in 0..d {
                u[k] = (t[k] - x[k]) / h[k];
                k_val *= epanechnikov(u[k]) / h[k];
            }
            if k_val > 0.0 {
                sys.add(self.weights[j] * k_val, &u[..d], self.values[j]);
            }
        });
        sys.solve(0.0)
    }

    /// Fit at `t`, enlarging the window up to [`ENLARGE_STEPS`] times if it is empty.
    pub fn fit_with_fallback(&self, t: &[f64], h: &[f64]) -> LocalFit {
        let mut hk = h.to_vec();
        for step in 0..=ENLARGE_STEPS {
            if step > 0 {
                hk.iter_mut().for_each(|x| *x *= ENLARGE_FACTOR);
            }
            let fit = self.fit_at(t, &hk, None);
            if fit != LocalFit::Empty {
                return fit;
            }
        }
        LocalFit::Empty
    }
}

fn check_inputs(ds: &FunctionalDataset, grid: &EvaluationGrid, h: &Bandwidth) -> Result<()> {
    if ds.dim() != grid.dim() {
        return Err(FpcaError::DimensionMismatch { expected: grid.dim(), found: ds.dim() });
    }
    if h.dim() != grid.dim() {
        return Err(FpcaError::DimensionMismatch { expected: grid.dim(), found: h.dim() });
    }
    if ds.dim() > MAX_DIM {
        return Err(FpcaError::InvalidDataset(format!("dimension {} exceeds the supported maximum {MAX_DIM}", ds.dim())));
    }
    let lo = grid.lo();
    let hi = grid.hi();
    if ds.bounds().iter().enumerate().any(|(k, &(a, b))| lo[k] < a - 1e-12 || hi[k] > b + 1e-12) {
        log::info!("evaluation grid extends beyond the data; boundary nodes are extrapolated");
    }
    Ok(())
}

/// Smooths a point cloud at every in-mask node of `grid`.
pub fn smooth_cloud(cloud: &PointCloud, grid: &EvaluationGrid, h: &Bandwidth, kind: SurfaceKind) -> Result<SurfaceEstimate> {
    let nodes = grid.in_mask_indices();
    let fits: Vec<LocalFit> = nodes
        .par_iter()
        .map(|&idx| {
            let t = grid.node_vec(idx);
            cloud.fit_with_fallback(&t, h.values())
        })
        .collect();
    let mut values = vec![OUTSIDE; grid.len()];
    let mut empty = 0;
    let mut constant = 0;
    for (&idx, fit) in nodes.iter().zip(&fits) {
        match *fit {
            LocalFit::Empty => empty += 1,
            LocalFit::Constant { value, .. } => {
                constant += 1;
                values[idx] = value;
            }
            LocalFit::Linear { value, .. } => values[idx] = value,
        }
    }
    if constant > 0 {
        log::debug!("{constant} node(s) used the local constant fallback");
    }
    if empty > 0 {
        return Err(FpcaError::BandwidthTooSmall { nodes: empty });
    }
    SurfaceEstimate::new(grid.clone(), kind, values)
}

pub fn estimate_mean(ds: &FunctionalDataset, grid: &EvaluationGrid, h: &Bandwidth) -> Result<SurfaceEstimate> {
    check_inputs(ds, grid, h)?;
    let cloud = PointCloud::from_dataset(ds, false, h.values());
    smooth_cloud(&cloud, grid, h, SurfaceKind::Mean)
}

pub fn estimate_diag_plus_noise(ds: &FunctionalDataset, grid: &EvaluationGrid, h: &Bandwidth) -> Result<SurfaceEstimate> {
    check_inputs(ds, grid, h)?;
    let cloud = PointCloud::from_dataset(ds, true, h.values());
    smooth_cloud(&cloud, grid, h, SurfaceKind::DiagonalPlusNoise)
}

/// Mean values at the nodes of `grid`, taken directly when the mean lives on the same grid.
pub fn mean_on_grid(mean: &SurfaceEstimate, grid: &EvaluationGrid) -> Result<Vec<f64>> {
    if mean.grid.axes() == grid.axes() {
        return Ok(mean.values.clone());
    }
    (0..grid.len())
        .map(|idx| if grid.in_mask(idx) { mean.interpolate(&grid.node_vec(idx)) } else { Ok(OUTSIDE) })
        .collect()
}

struct WindowEntry {
    obs: usize,
    k: f64,
    u: [f64; MAX_DIM],
}

/// Observations of samples with at least two points, in sample order.
struct PairData {
    dim: usize,
    coords: Vec<f64>,
    values: Vec<f64>,
    sample_of: Vec<usize>,
    pair_weight: Vec<f64>,
}

impl PairData {
    fn new(ds: &FunctionalDataset) -> Self {
        let mut coords = Vec::new();
        let mut values = Vec::new();
        let mut sample_of = Vec::new();
        let mut pair_weight = Vec::new();
        for s in ds.samples().iter().filter(|s| s.len() >= 2) {
            let n = s.len() as f64;
            let id = pair_weight.len();
            pair_weight.push(1.0 / (n * (n - 1.0)));
            coords.extend_from_slice(s.coords());
            values.extend_from_slice(s.values());
            sample_of.extend(std::iter::repeat(id).take(s.len()));
        }
        PairData { dim: ds.dim(), coords, values, sample_of, pair_weight }
    }

    fn window(&self, index: &PointCloud, t: &[f64], h: &[f64]) -> Vec<WindowEntry> {
        let d = self.dim;
        let mut out = Vec::new();
        index.for_each_near(t, h, |j| {
            let x = &self.coords[j * d..(j + 1) * d];
            let mut u = [0.0; MAX_DIM];
            let mut k = 1.0;
            for a in 0..d {
                u[a] = (t[a] - x[a]) / h[a];
                k *= epanechnikov(u[a]) / h[a];
            }
            if k > 0.0 {
                out.push(WindowEntry { obs: j, k, u });
            }
        });
        out.sort_by_key(|e| e.obs);
        out
    }

    fn pair_fit(&self, ws: &[WindowEntry], wt: &[WindowEntry]) -> LocalFit {
        let d = self.dim;
        let mut sys = LocalSystem::new(2 * d + 1);
        let mut x = [0.0; 2 * MAX_DIM];
        let (mut a, mut b) = (0, 0);
        while a < ws.len() && b < wt.len() {
            let sa = self.sample_of[ws[a].obs];
            let sb = self.sample_of[wt[b].obs];
            if sa < sb {
                a += 1;
                continue;
            }
            if sb < sa {
                b += 1;
                continue;
            }
            let a_end = a + ws[a..].iter().take_while(|e| self.sample_of[e.obs] == sa).count();
            let b_end = b + wt[b..].iter().take_while(|e| self.sample_of[e.obs] == sa).count();
            let w = self.pair_weight[sa];
            for es in &ws[a..a_end] {
                for et in &wt[b..b_end] {
                    if es.obs == et.obs {
                        continue;
                    }
                    x[..d].copy_from_slice(&es.u[..d]);
                    x[d..2 * d].copy_from_slice(&et.u[..d]);
                    sys.add(w * es.k * et.k, &x[..2 * d], self.values[es.obs] * self.values[et.obs]);
                }
            }
            a = a_end;
            b = b_end;
        }
        sys.solve(0.0)
    }
}

pub fn estimate_covariance(
    ds: &FunctionalDataset,
    grid: &EvaluationGrid,
    h: &Bandwidth,
    mean: &SurfaceEstimate,
) -> Result<SurfaceEstimate> {
    check_inputs(ds, grid, h)?;
    if !ds.has_pairs() {
        return Err(FpcaError::NoPairs);
    }
    let mu = mean_on_grid(mean, grid)?;
    let pd = PairData::new(ds);
    let n = pd.values.len();
    let index = PointCloud::new(pd.dim, pd.coords.clone(), vec![1.0; n], vec![0.0; n], h.values());
    let nodes = grid.in_mask_indices();
    let hv = h.values();
    let windows: Vec<Vec<WindowEntry>> = nodes.par_iter().map(|&i| pd.window(&index, &grid.node_vec(i), hv)).collect();
    let rows: Vec<(Vec<f64>, usize)> = (0..nodes.len())
        .into_par_iter()
        .map(|a| {
            let mut row = Vec::with_capacity(nodes.len() - a);
            let mut empty = 0;
            for b in a..nodes.len() {
                let mut fit = pd.pair_fit(&windows[a], &windows[b]);
                let mut hk = hv.to_vec();
                let mut step = 0;
                while fit == LocalFit::Empty && step < ENLARGE_STEPS {
                    step += 1;
                    hk.iter_mut().for_each(|x| *x *= ENLARGE_FACTOR);
                    let ws = pd.window(&index, &grid.node_vec(nodes[a]), &hk);
                    let wt = pd.window(&index, &grid.node_vec(nodes[b]), &hk);
                    fit = pd.pair_fit(&ws, &wt);
                }
                match fit.value() {
                    Some(v) => row.push(v - mu[nodes[a]] * mu[nodes[b]]),
                    None => {
                        empty += 1;
                        row.push(OUTSIDE);
                    }
                }
            }
            (row, empty)
        })
        .collect();
    let empty: usize = rows.iter().map(|r| r.1).sum();
    if empty > 0 {
        return Err(FpcaError::BandwidthTooSmall { nodes: empty });
    }
    let m = grid.len();
    let mut values = vec![OUTSIDE; m * m];
    for (a, (row, _)) in rows.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            let (s, t) = (nodes[a], nodes[a + off]);
            values[s * m + t] = v;
            values[t * m + s] = v;
        }
    }
    SurfaceEstimate::new(grid.clone(), SurfaceKind::Covariance, values)
}
