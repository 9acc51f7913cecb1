//! Noise variance, principal component scores, reconstruction and hold-out prediction error.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{AffineMap, FunctionalDataset, Sample};
use crate::eigen::EigenSystem;
use crate::error::{FpcaError, Result};
use crate::grid::EvaluationGrid;
use crate::surface::{SurfaceEstimate, SurfaceKind};

/// Relative floor on the noise variance inside the PACE system.
pub const SIGMA2_FLOOR: f64 = 1e-6;
/// Integration scores need at least this fraction of grid nodes observed per sample.
pub const DENSE_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMethod {
    #[default]
    Auto,
    Pace,
    Integration,
}

impl ScoreMethod {
    /// Resolves `Auto` from the median sample size relative to the grid.
    pub fn resolve(self, ds: &FunctionalDataset, grid: &EvaluationGrid) -> ScoreMethod {
        match self {
            ScoreMethod::Auto if ds.median_observations() >= DENSE_FRACTION * grid.in_mask_count() as f64 => {
                ScoreMethod::Integration
            }
            ScoreMethod::Auto => ScoreMethod::Pace,
            m => m,
        }
    }
}

/// Everything besides the surfaces needed to reproduce a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub format_version: u32,
    pub h_mean: Vec<f64>,
    pub h_cov: Vec<f64>,
    pub h_noise: Vec<f64>,
    pub fve_threshold: f64,
    pub eigensolver: String,
    pub sketch: Option<usize>,
    pub seed: u64,
    pub score_method: ScoreMethod,
    /// Map from the unit cube used while smoothing back to data units.
    pub domain_map: AffineMap,
    /// FVE denominator.
    pub total_variance: f64,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

/// A fitted expansion `mu + sum_l A_l phi_l`, in data units.
#[derive(Debug, Clone)]
pub struct FpcaModel {
    pub mean: SurfaceEstimate,
    pub eig: EigenSystem,
    pub sigma2: f64,
    pub sample_ids: Vec<String>,
    /// `n x L`.
    pub scores: Vec<Vec<f64>>,
    pub metadata: ModelMetadata,
}

impl FpcaModel {
    pub fn grid(&self) -> &EvaluationGrid {
        &self.mean.grid
    }

    pub fn n_components(&self) -> usize {
        self.eig.len()
    }

    pub fn sample_position(&self, id: &str) -> Option<usize> {
        self.sample_ids.iter().position(|s| s == id)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.sigma2 >= 0.0) {
            return Err(FpcaError::Precondition("negative noise variance".into()));
        }
        if self.scores.len() != self.sample_ids.len() {
            return Err(FpcaError::Precondition("one score row per sample expected".into()));
        }
        if self.scores.iter().any(|r| r.len() != self.n_components() || r.iter().any(|v| !v.is_finite())) {
            return Err(FpcaError::Precondition("scores must be finite with one entry per component".into()));
        }
        Ok(())
    }
}

/// Noise variance from the smoothed second moment, the covariance diagonal and the mean:
/// `b0(t) - Gamma(t,t) - mu(t)^2`, averaged over the in-mask domain and clamped at zero.
pub fn estimate_sigma2(diag_plus_noise: &SurfaceEstimate, cov: &SurfaceEstimate, mean: &SurfaceEstimate) -> Result<f64> {
    if cov.grid != diag_plus_noise.grid {
        return Err(FpcaError::InvalidGrid("noise variance surfaces must share one grid".into()));
    }
    estimate_sigma2_from_diagonal(diag_plus_noise, &cov.diagonal(), mean)
}

/// [`estimate_sigma2`] with the covariance given by its diagonal alone.
pub fn estimate_sigma2_from_diagonal(diag_plus_noise: &SurfaceEstimate, diag: &[f64], mean: &SurfaceEstimate) -> Result<f64> {
    let grid = &diag_plus_noise.grid;
    if mean.grid != *grid {
        return Err(FpcaError::InvalidGrid("noise variance surfaces must share one grid".into()));
    }
    if diag.len() != grid.len() {
        return Err(FpcaError::DimensionMismatch { expected: grid.len(), found: diag.len() });
    }
    let pointwise: Vec<f64> = (0..grid.len())
        .map(|t| diag_plus_noise.values[t] - diag[t] - mean.values[t] * mean.values[t])
        .collect();
    let v = grid.integrate(&pointwise) / grid.in_mask_volume();
    Ok(v.max(0.0))
}

/// Pointwise noise variance surface, before averaging.
pub fn sigma2_surface(diag_plus_noise: &SurfaceEstimate, cov: &SurfaceEstimate, mean: &SurfaceEstimate) -> SurfaceEstimate {
    let diag = cov.diagonal();
    let values = (0..cov.grid.len())
        .map(|t| diag_plus_noise.values[t] - diag[t] - mean.values[t] * mean.values[t])
        .collect();
    SurfaceEstimate { grid: cov.grid.clone(), kind: SurfaceKind::NoiseVariance, values }
}

/// Mean and eigenfunctions interpolated at one sample's observation points.
struct Design {
    centered: Vec<f64>,
    /// `phi[l][j]`.
    phi: Vec<Vec<f64>>,
}

fn design(sample: &Sample, dim: usize, mean: &SurfaceEstimate, eig: &EigenSystem) -> Result<Design> {
    let grid = &mean.grid;
    let n = sample.len();
    let mut centered = Vec::with_capacity(n);
    let mut phi = vec![Vec::with_capacity(n); eig.len()];
    for j in 0..n {
        let x = sample.coord(j, dim);
        centered.push(sample.values()[j] - grid.interpolate(&mean.values, x)?);
        for (l, f) in eig.eigenfunctions.iter().enumerate() {
            phi[l].push(grid.interpolate(f, x)?);
        }
    }
    Ok(Design { centered, phi })
}

/// PACE scores `Lambda Phi^T (Phi Lambda Phi^T + s2 I)^-1 Y^c`, evaluated through the equivalent
/// `L x L` system `(s2 Lambda^-1 + Phi^T Phi)^-1 Phi^T Y^c` with `s2` floored.
pub fn pace_scores(sample: &Sample, dim: usize, mean: &SurfaceEstimate, eig: &EigenSystem, sigma2: f64) -> Result<Vec<f64>> {
    let l = eig.len();
    if l == 0 {
        return Ok(Vec::new());
    }
    let d = design(sample, dim, mean, eig)?;
    let s2 = sigma2.max(SIGMA2_FLOOR * eig.eigenvalues[0]);
    let mut a = vec![0.0; l * l];
    let mut rhs = vec![0.0; l];
    for p in 0..l {
        rhs[p] = d.phi[p].iter().zip(&d.centered).map(|(x, y)| x * y).sum();
        for q in 0..=p {
            let v: f64 = d.phi[p].iter().zip(&d.phi[q]).map(|(x, y)| x * y).sum();
            a[p * l + q] = v;
            a[q * l + p] = v;
        }
        a[p * l + p] += s2 / eig.eigenvalues[p];
    }
    cholesky_solve(&mut a, &mut rhs, l).ok_or_else(|| FpcaError::SingularCovariance { sample: sample.id.clone() })?;
    Ok(rhs)
}

/// Solves `A x = b` in place for symmetric positive definite `A`; `None` if not numerically so.
fn cholesky_solve(a: &mut [f64], b: &mut [f64], n: usize) -> Option<()> {
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0f64, f64::max);
    for j in 0..n {
        let mut s = a[j * n + j];
        for k in 0..j {
            s -= a[j * n + k] * a[j * n + k];
        }
        if !(s > 1e-14 * scale) {
            return None;
        }
        let piv = s.sqrt();
        a[j * n + j] = piv;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / piv;
        }
    }
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * n + k] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= a[k * n + i] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    Some(())
}

/// Riemann inner products of the gridded, centered sample with each eigenfunction.
///
/// The sample is gridded by multilinear weights; nodes it does not reach take the mean.
pub fn integration_scores(sample: &Sample, dim: usize, mean: &SurfaceEstimate, eig: &EigenSystem) -> Result<Vec<f64>> {
    let grid = &mean.grid;
    if (sample.len() as f64) < DENSE_FRACTION * grid.in_mask_count() as f64 {
        log::warn!("sample {} has {} observations for {} nodes; integration scores will be rough", sample.id, sample.len(), grid.in_mask_count());
    }
    let mut weight = vec![0.0; grid.len()];
    let mut sum = vec![0.0; grid.len()];
    for j in 0..sample.len() {
        let x = sample.coord(j, dim);
        let loc = grid.locate(x).ok_or_else(|| FpcaError::OutOfDomain { point: x.to_vec() })?;
        let y = sample.values()[j];
        grid.for_each_corner(&loc, |idx, w| {
            weight[idx] += w;
            sum[idx] += w * y;
        });
    }
    let centered: Vec<f64> = (0..grid.len())
        .map(|i| if weight[i] > 0.0 { sum[i] / weight[i] - mean.values[i] } else { 0.0 })
        .collect();
    Ok(eig.eigenfunctions.iter().map(|f| grid.inner(&centered, f)).collect())
}

/// Scores for every sample of `ds`, in sample order.
pub fn compute_scores(
    ds: &FunctionalDataset,
    mean: &SurfaceEstimate,
    eig: &EigenSystem,
    sigma2: f64,
    method: ScoreMethod,
) -> Result<Vec<Vec<f64>>> {
    let method = method.resolve(ds, &mean.grid);
    ds.samples()
        .par_iter()
        .map(|s| match method {
            ScoreMethod::Integration => integration_scores(s, ds.dim(), mean, eig),
            _ => pace_scores(s, ds.dim(), mean, eig, sigma2),
        })
        .collect()
}

/// `mu(x) + sum_l A_l phi_l(x)` at each point of `coords` (flattened, `dim` per point).
pub fn reconstruct_at(model: &FpcaModel, scores: &[f64], coords: &[f64]) -> Result<Vec<f64>> {
    let grid = model.grid();
    let d = grid.dim();
    coords
        .chunks(d)
        .map(|x| {
            let mut v = grid.interpolate(&model.mean.values, x)?;
            for (a, f) in scores.iter().zip(&model.eig.eigenfunctions) {
                v += a * grid.interpolate(f, x)?;
            }
            Ok(v)
        })
        .collect()
}

/// Reconstruction of training sample `i` at arbitrary points.
pub fn reconstruct(model: &FpcaModel, sample_index: usize, coords: &[f64]) -> Result<Vec<f64>> {
    let scores = model
        .scores
        .get(sample_index)
        .ok_or_else(|| FpcaError::Precondition(format!("no sample at index {sample_index}")))?;
    reconstruct_at(model, scores, coords)
}

/// Reconstruction on the model grid; masked-out nodes keep the outside sentinel.
pub fn reconstruct_grid(model: &FpcaModel, scores: &[f64]) -> Vec<f64> {
    let mut v = model.mean.values.clone();
    for (a, f) in scores.iter().zip(&model.eig.eigenfunctions) {
        for (x, p) in v.iter_mut().zip(f) {
            *x += a * p;
        }
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HoldoutMode {
    /// Fit a new model without the location.
    Refit,
    /// Keep the full-data model, re-score each sample without the location.
    Rescore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HoldoutReport {
    /// Summed squared error over the samples observed at each location.
    pub per_location: Vec<f64>,
    pub mean: f64,
    pub standard_error: f64,
}

impl HoldoutReport {
    pub fn from_errors(per_location: Vec<f64>) -> Self {
        let n = per_location.len() as f64;
        let mean = per_location.iter().sum::<f64>() / n;
        let var = if n > 1.0 { per_location.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        HoldoutReport { per_location, mean, standard_error: (var / n).sqrt() }
    }
}

fn same_point(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-9 * (1.0 + x.abs().max(y.abs())))
}

/// Leave-one-location-out squared prediction error. Each location's observations are removed
/// from every sample; the samples are then predicted there from the remaining data.
pub fn holdout_prediction_error(
    ds: &FunctionalDataset,
    locations: &[Vec<f64>],
    mode: HoldoutMode,
    fit: &(dyn Fn(&FunctionalDataset) -> Result<FpcaModel> + Sync),
) -> Result<HoldoutReport> {
    if locations.len() < 2 {
        return Err(FpcaError::Precondition("hold-out needs at least two locations".into()));
    }
    let d = ds.dim();
    let full = match mode {
        HoldoutMode::Rescore => Some(fit(ds)?),
        HoldoutMode::Refit => None,
    };
    let mut errors = Vec::with_capacity(locations.len());
    for loc in locations {
        let mut kept = Vec::new();
        let mut held: Vec<(usize, f64)> = Vec::new();
        for (i, s) in ds.samples().iter().enumerate() {
            let t = s.filtered(d, |j| !same_point(s.coord(j, d), loc));
            for j in 0..s.len() {
                if same_point(s.coord(j, d), loc) {
                    held.push((i, s.values()[j]));
                }
            }
            kept.push(t);
        }
        let refit;
        let model = match &full {
            Some(m) => m,
            None => {
                let nonempty: Vec<Sample> = kept.iter().filter(|s| !s.is_empty()).cloned().collect();
                let train = FunctionalDataset::with_bounds(d, nonempty, ds.bounds().to_vec())?;
                refit = fit(&train)?;
                &refit
            }
        };
        let mut err = 0.0;
        for (i, y) in held {
            let s = &kept[i];
            let scores = if s.is_empty() {
                vec![0.0; model.n_components()]
            } else {
                pace_scores(s, d, &model.mean, &model.eig, model.sigma2)?
            };
            let pred = reconstruct_at(model, &scores, loc)?[0];
            err += (y - pred).powi(2);
        }
        errors.push(err);
    }
    Ok(HoldoutReport::from_errors(errors))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(grid: EvaluationGrid, mean: Vec<f64>, lambdas: Vec<f64>, phis: Vec<Vec<f64>>, sigma2: f64) -> FpcaModel {
        let total = lambdas.iter().sum();
        let mut acc = 0.0;
        let fve = lambdas.iter().map(|l| {
            acc += l;
            acc / total
        }).collect();
        FpcaModel {
            mean: SurfaceEstimate { grid: grid.clone(), kind: SurfaceKind::Mean, values: mean },
            eig: EigenSystem { grid, eigenvalues: lambdas, eigenfunctions: phis, fve, total_variance: total },
            sigma2,
            sample_ids: Vec::new(),
            scores: Vec::new(),
            metadata: ModelMetadata {
                format_version: 1,
                h_mean: vec![],
                h_cov: vec![],
                h_noise: vec![],
                fve_threshold: 0.95,
                eigensolver: "dense".into(),
                sketch: None,
                seed: 0,
                score_method: ScoreMethod::Auto,
                domain_map: AffineMap::identity(1),
                total_variance: total,
                extra: BTreeMap::new(),
            },
        }
    }

    fn cosine_model(sigma2: f64) -> FpcaModel {
        let g = EvaluationGrid::cell_centered(&[(0.0, 1.0, 200)]).unwrap();
        let x = g.axis(0).to_vec();
        let phi1: Vec<f64> = x.iter().map(|t| 2f64.sqrt() * (std::f64::consts::PI * t).cos()).collect();
        let phi2: Vec<f64> = x.iter().map(|t| 2f64.sqrt() * (2.0 * std::f64::consts::PI * t).cos()).collect();
        let mean = x.iter().map(|t| 1.0 + t).collect();
        model(g, mean, vec![2.0, 0.5], vec![phi1, phi2], sigma2)
    }

    #[test]
    fn scalar_pace() {
        let m = cosine_model(0.3).eig.truncated(1);
        let full = cosine_model(0.3);
        let s = Sample::new("a", vec![0.1], vec![2.7]);
        let a = pace_scores(&s, 1, &full.mean, &m, 0.3).unwrap();
        let phi = full.grid().interpolate(&m.eigenfunctions[0], &[0.1]).unwrap();
        let yc = 2.7 - full.grid().interpolate(&full.mean.values, &[0.1]).unwrap();
        let want = 2.0 * phi * yc / (2.0 * phi * phi + 0.3);
        assert!((a[0] - want).abs() < 1e-12 * want.abs());
        // Shrinkage relative to the noise-free limit.
        assert!(a[0].abs() < (yc / phi).abs());
    }

    #[test]
    fn pace_on_mean_is_zero_and_linear() {
        let m = cosine_model(0.1);
        let xs = vec![0.05, 0.3, 0.42, 0.9];
        let on_mean: Vec<f64> = xs.iter().map(|&x| m.grid().interpolate(&m.mean.values, &[x]).unwrap()).collect();
        let s = Sample::new("a", xs.clone(), on_mean.clone());
        assert!(pace_scores(&s, 1, &m.mean, &m.eig, m.sigma2).unwrap().iter().all(|&v| v == 0.0));
        let yc = [0.3, -1.2, 0.8, 2.5];
        let base = Sample::new("a", xs.clone(), on_mean.iter().zip(&yc).map(|(a, b)| a + b).collect());
        let a1 = pace_scores(&base, 1, &m.mean, &m.eig, m.sigma2).unwrap();
        let scaled = Sample::new("a", xs, on_mean.iter().zip(&yc).map(|(a, b)| a + 2.0 * b).collect());
        let a2 = pace_scores(&scaled, 1, &m.mean, &m.eig, m.sigma2).unwrap();
        for (x, y) in a1.iter().zip(&a2) {
            assert!((2.0 * x - y).abs() < 1e-12 * y.abs().max(1.0));
        }
    }

    #[test]
    fn integration_recovers_component() {
        let m = cosine_model(0.0);
        let g = m.grid().clone();
        let coords = g.axis(0).to_vec();
        let vals: Vec<f64> = (0..g.len()).map(|i| m.mean.values[i] + 3.0 * m.eig.eigenfunctions[1][i]).collect();
        let a = integration_scores(&Sample::new("a", coords.clone(), vals), 1, &m.mean, &m.eig).unwrap();
        assert!(a[0].abs() < 1e-6 && (a[1] - 3.0).abs() < 1e-6, "{a:?}");
        let z = integration_scores(&Sample::new("b", coords, m.mean.values.clone()), 1, &m.mean, &m.eig).unwrap();
        assert!(z.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn pace_approaches_integration_when_dense() {
        let m = cosine_model(1e-8);
        let coords: Vec<f64> = (0..1000).map(|j| 0.0025 + 0.995 * j as f64 / 999.0).collect();
        let truth = [1.3, -0.7];
        let mut vals = Vec::new();
        for &t in &coords {
            let mut v = m.grid().interpolate(&m.mean.values, &[t]).unwrap();
            for l in 0..2 {
                v += truth[l] * m.grid().interpolate(&m.eig.eigenfunctions[l], &[t]).unwrap();
            }
            vals.push(v);
        }
        let s = Sample::new("a", coords, vals);
        let p = pace_scores(&s, 1, &m.mean, &m.eig, m.sigma2).unwrap();
        let q = integration_scores(&s, 1, &m.mean, &m.eig).unwrap();
        let rms = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt() / 2f64.sqrt();
        assert!(rms < 1e-2, "{p:?} {q:?}");
        assert!((p[0] - truth[0]).abs() < 1e-6);
    }

    #[test]
    fn sigma2_from_surfaces() {
        let g = EvaluationGrid::uniform(&[(0.0, 1.0, 5)]).unwrap();
        let mean = SurfaceEstimate { grid: g.clone(), kind: SurfaceKind::Mean, values: vec![1.0; 5] };
        let mut cv = vec![0.0; 25];
        for i in 0..5 {
            cv[i * 5 + i] = 2.0;
        }
        let cov = SurfaceEstimate { grid: g.clone(), kind: SurfaceKind::Covariance, values: cv };
        let dn = SurfaceEstimate { grid: g.clone(), kind: SurfaceKind::DiagonalPlusNoise, values: vec![3.25; 5] };
        assert!((estimate_sigma2(&dn, &cov, &mean).unwrap() - 0.25).abs() < 1e-14);
        let dn = SurfaceEstimate { grid: g, kind: SurfaceKind::DiagonalPlusNoise, values: vec![2.5; 5] };
        assert_eq!(estimate_sigma2(&dn, &cov, &mean).unwrap(), 0.0);
    }

    #[test]
    fn reconstruction_round_trip() {
        let mut m = cosine_model(0.1);
        m.sample_ids = vec!["a".into()];
        m.scores = vec![vec![0.0, 0.0]];
        let pts = [0.1, 0.55, 0.93];
        let r = reconstruct(&m, 0, &pts).unwrap();
        for (i, &x) in pts.iter().enumerate() {
            assert_eq!(r[i], m.grid().interpolate(&m.mean.values, &[x]).unwrap());
        }
        m.scores = vec![vec![1.5, -2.0]];
        let grid_vals = reconstruct_grid(&m, &m.scores[0]);
        let g = m.grid().clone();
        let at_nodes = reconstruct(&m, 0, g.axis(0)).unwrap();
        for (a, b) in at_nodes.iter().zip(&grid_vals) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(reconstruct(&m, 0, &[1.5]), Err(FpcaError::OutOfDomain { .. })));
    }
}
