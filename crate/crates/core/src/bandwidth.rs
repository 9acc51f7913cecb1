//! Leave-one-observation-out cross-validation and a derivative-free trust-region optimizer.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binning::{linear_bin, BinnedData};
use crate::dataset::FunctionalDataset;
use crate::error::{FpcaError, Result};
use crate::fft::{fft_local_fits, MomentTarget};
use crate::grid::EvaluationGrid;
use crate::kernel::{kernel_peak, Bandwidth};
use crate::locfit::LocalFit;
use crate::smoother::PointCloud;

/// Observations per window targeted by the initial bandwidth.
pub const WINDOW_TARGET: f64 = 30.0;
/// Above this many pseudo-observations `Auto` switches to the binned scheme.
pub const DIRECT_LIMIT: usize = 20_000;
/// Raw-product pairs kept for covariance cross-validation.
pub const DEFAULT_MAX_PAIRS: usize = 50_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvTarget {
    Mean,
    Covariance,
    DiagPlusNoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvScheme {
    /// Kernel sums over the observations themselves.
    Direct,
    /// Fits from binned FFT smoothing, interpolated to the observations.
    Binned,
    Auto,
}

/// Cross-validation objective with its pseudo-observations prepared once.
pub struct CvObjective {
    pub target: CvTarget,
    scheme: CvScheme,
    /// Dimension of the pseudo-observations: `2d` for covariance.
    dim: usize,
    coords: Vec<f64>,
    weights: Vec<f64>,
    values: Vec<f64>,
    binned: Option<(BinnedData, EvaluationGrid)>,
    extents: Vec<f64>,
    min_h: Vec<f64>,
    /// Pseudo-observations available before subsampling.
    population: usize,
}

impl CvObjective {
    /// `grid` is required by the binned scheme. Covariance pairs beyond `max_pairs` are
    /// subsampled per sample in proportion to its pair count, seeded by `seed`.
    pub fn new(
        target: CvTarget,
        ds: &FunctionalDataset,
        grid: Option<&EvaluationGrid>,
        scheme: CvScheme,
        max_pairs: usize,
        seed: u64,
    ) -> Result<Self> {
        let d = ds.dim();
        let mut population = 0;
        let (dim, coords, weights, values) = match target {
            CvTarget::Mean | CvTarget::DiagPlusNoise => {
                let sq = target == CvTarget::DiagPlusNoise;
                let mut coords = Vec::with_capacity(ds.total_observations() * d);
                let mut weights = Vec::new();
                let mut values = Vec::new();
                for s in ds.samples() {
                    coords.extend_from_slice(s.coords());
                    for &y in s.values() {
                        weights.push(1.0 / s.len() as f64);
                        values.push(if sq { y * y } else { y });
                    }
                }
                (d, coords, weights, values)
            }
            CvTarget::Covariance => {
                let (c, w, v) = pair_observations(ds, max_pairs, seed)?;
                population = ds.samples().iter().map(|s| s.len() * s.len().saturating_sub(1)).sum();
                (2 * d, c, w, v)
            }
        };
        let scheme = match scheme {
            CvScheme::Auto if target != CvTarget::Covariance && grid.is_some() && weights.len() > DIRECT_LIMIT => CvScheme::Binned,
            CvScheme::Auto => CvScheme::Direct,
            CvScheme::Binned if target == CvTarget::Covariance => {
                return Err(FpcaError::Precondition("covariance cross-validation uses the direct scheme".into()))
            }
            s => s,
        };
        let binned = if scheme == CvScheme::Binned {
            let g = grid.ok_or_else(|| FpcaError::Precondition("the binned scheme needs a grid".into()))?;
            g.require_equispaced()?;
            Some((linear_bin(ds, g)?, g.clone()))
        } else {
            None
        };
        let extents = ds.extents();
        let min_h = match &binned {
            Some((_, g)) => (0..d).map(|k| g.spacing(k)).collect(),
            None => extents.iter().map(|e| 1e-3 * e).collect(),
        };
        let population = population.max(weights.len());
        Ok(CvObjective { target, scheme, dim, coords, weights, values, binned, extents, min_h, population })
    }

    pub fn scheme(&self) -> CvScheme {
        self.scheme
    }

    /// Number of (pseudo-)observations entering the score.
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn extents(&self) -> &[f64] {
        &self.extents
    }

    /// Factor carrying a bandwidth chosen on the subsample over to the full pair set, from the
    /// `N^(-1/(4 + D))` rate of the local linear optimum in `D` dimensions.
    pub fn subsample_factor(&self) -> f64 {
        (self.len() as f64 / self.population as f64).powf(1.0 / (4.0 + self.dim as f64))
    }

    /// Smallest bandwidth the optimizer will try on each axis.
    pub fn min_bandwidth(&self) -> &[f64] {
        &self.min_h
    }

    fn window(&self, h: &Bandwidth) -> Vec<f64> {
        match self.target {
            CvTarget::Covariance => h.doubled().values().to_vec(),
            _ => h.values().to_vec(),
        }
    }

    fn coord(&self, j: usize) -> &[f64] {
        &self.coords[j * self.dim..(j + 1) * self.dim]
    }

    /// Pseudo-observations as a point cloud indexed for windows of size `h`.
    pub fn cloud(&self, h: &Bandwidth) -> PointCloud {
        PointCloud::new(self.dim, self.coords.clone(), self.weights.clone(), self.values.clone(), &self.window(h))
    }
}

/// Raw products `Y_ij Y_il`, `j != l`, at `(X_ij, X_il)` with weight `1/(N_i(N_i-1))`.
fn pair_observations(ds: &FunctionalDataset, max_pairs: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let d = ds.dim();
    let total: usize = ds.samples().iter().map(|s| s.len() * s.len().saturating_sub(1)).sum();
    if total == 0 {
        return Err(FpcaError::NoPairs);
    }
    let frac = (max_pairs as f64 / total as f64).min(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::new();
    let mut weights = Vec::new();
    let mut values = Vec::new();
    for s in ds.samples() {
        let n = s.len();
        if n < 2 {
            continue;
        }
        let w = 1.0 / (n * (n - 1)) as f64;
        let mut push = |j: usize, l: usize| {
            coords.extend_from_slice(s.coord(j, d));
            coords.extend_from_slice(s.coord(l, d));
            weights.push(w);
            values.push(s.values()[j] * s.values()[l]);
        };
        if frac >= 1.0 {
            for j in 0..n {
                for l in 0..n {
                    if j != l {
                        push(j, l);
                    }
                }
            }
        } else {
            let k = ((n * (n - 1)) as f64 * frac).round().max(1.0) as usize;
            for _ in 0..k {
                let j = rng.random_range(0..n);
                let mut l = rng.random_range(0..n - 1);
                if l >= j {
                    l += 1;
                }
                push(j, l);
            }
        }
    }
    Ok((coords, weights, values))
}

/// Weighted mean squared leave-one-out residual, each residual obtained from the full fit as
/// `(y - fit) / (1 - S_jj)` with self-influence `S_jj = w_j K(0) [A^-1]_00`.
pub fn cv_score(h: &Bandwidth, obj: &CvObjective) -> Result<f64> {
    let d = if obj.target == CvTarget::Covariance { obj.dim / 2 } else { obj.dim };
    if h.dim() != d {
        return Err(FpcaError::DimensionMismatch { expected: d, found: h.dim() });
    }
    let win = obj.window(h);
    let k0 = kernel_peak(&win);
    let fitted: Vec<Option<(f64, f64)>> = match &obj.binned {
        None => {
            let cloud = obj.cloud(h);
            (0..obj.len())
                .into_par_iter()
                .map(|j| match cloud.fit_at(obj.coord(j), &win, None) {
                    LocalFit::Empty => None,
                    f => Some((f.value().unwrap(), f.h00().unwrap())),
                })
                .collect()
        }
        Some((binned, grid)) => {
            let target = if obj.target == CvTarget::DiagPlusNoise { MomentTarget::Squares } else { MomentTarget::Mean };
            let fits = fft_local_fits(binned, grid, h, target)?;
            (0..obj.len()).into_par_iter().map(|j| interpolate_fit(grid, &fits, obj.coord(j))).collect()
        }
    };
    let mut num = 0.0;
    let mut den = 0.0;
    let mut degenerate = 0;
    for (j, f) in fitted.iter().enumerate() {
        let w = obj.weights[j];
        match f {
            Some((v, h00)) => {
                let s = w * k0 * h00;
                if !(1.0 - s > 1e-10) {
                    degenerate += 1;
                    continue;
                }
                let r = (obj.values[j] - v) / (1.0 - s);
                num += w * r * r;
                den += w;
            }
            None => degenerate += 1,
        }
    }
    if degenerate > 0 {
        return Err(FpcaError::BandwidthTooSmall { nodes: degenerate });
    }
    Ok(num / den)
}

/// Multilinear interpolation of fitted values and influence factors over non-empty corners.
fn interpolate_fit(grid: &EvaluationGrid, fits: &[LocalFit], x: &[f64]) -> Option<(f64, f64)> {
    let loc = grid.locate(x)?;
    let (mut v, mut h, mut wsum) = (0.0, 0.0, 0.0);
    grid.for_each_corner(&loc, |idx, w| {
        if let (Some(a), Some(b)) = (fits[idx].value(), fits[idx].h00()) {
            v += w * a;
            h += w * b;
            wsum += w;
        }
    });
    (wsum > 0.0).then(|| (v / wsum, h / wsum))
}

/// Initial bandwidth aiming at [`WINDOW_TARGET`] observations per window, clamped to
/// `[floor, extent]` per axis.
pub fn rule_of_thumb(obj: &CvObjective, floor: &[f64]) -> Result<Bandwidth> {
    let frac = (WINDOW_TARGET / (obj.len() as f64).max(1.0)).min(1.0).powf(1.0 / obj.dim as f64);
    let h: Vec<f64> = obj.extents().iter().zip(floor).map(|(e, f)| (e * frac).max(*f).min(*e)).collect();
    Bandwidth::new(h)
}

/// Tuning of the trust-region loop, in log-bandwidth units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustRegionConfig {
    pub budget: usize,
    pub radius0: f64,
    pub radius_min: f64,
    pub radius_max: f64,
    pub accept: f64,
    pub expand: f64,
    pub rel_tol: f64,
    pub seed: u64,
}

impl Default for TrustRegionConfig {
    fn default() -> Self {
        TrustRegionConfig { budget: 40, radius0: 0.5, radius_min: 1e-3, radius_max: 2.0, accept: 0.1, expand: 0.75, rel_tol: 1e-4, seed: 0 }
    }
}

/// One objective evaluation of the optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub point: Vec<f64>,
    pub objective: f64,
    pub radius: f64,
    /// The point became the trust-region center.
    pub accepted: bool,
    pub best_so_far: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrustRegionResult {
    pub best: Vec<f64>,
    pub best_value: f64,
    pub trace: Vec<TraceRecord>,
}

/// Number of coefficients of a full quadratic in `d` variables.
pub fn quadratic_terms(d: usize) -> usize {
    (d + 1) * (d + 2) / 2
}

fn features(z: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.push(1.0);
    out.extend_from_slice(z);
    for k in 0..z.len() {
        for l in k..z.len() {
            out.push(z[k] * z[l]);
        }
    }
}

struct Quadratic {
    coef: Vec<f64>,
}

impl Quadratic {
    fn eval(&self, z: &[f64]) -> f64 {
        let mut f = Vec::new();
        features(z, &mut f);
        f.iter().zip(&self.coef).map(|(a, b)| a * b).sum()
    }

    fn gradient(&self, z: &[f64]) -> Vec<f64> {
        let d = z.len();
        let mut g: Vec<f64> = self.coef[1..=d].to_vec();
        let mut i = d + 1;
        for k in 0..d {
            for l in k..d {
                let c = self.coef[i];
                if k == l {
                    g[k] += 2.0 * c * z[k];
                } else {
                    g[k] += c * z[l];
                    g[l] += c * z[k];
                }
                i += 1;
            }
        }
        g
    }

    /// Crude bound on the Hessian norm, for gradient step sizes.
    fn curvature(&self, d: usize) -> f64 {
        self.coef[d + 1..].iter().map(|c| 2.0 * c.abs()).sum::<f64>().max(1e-12)
    }
}

fn fit_quadratic(zs: &[Vec<f64>], fs: &[f64]) -> Option<Quadratic> {
    let d = zs[0].len();
    let p = quadratic_terms(d);
    let mut a = vec![0.0; p * p];
    let mut b = vec![0.0; p];
    let mut f = Vec::new();
    for (z, &y) in zs.iter().zip(fs) {
        features(z, &mut f);
        for i in 0..p {
            b[i] += f[i] * y;
            for j in 0..p {
                a[i * p + j] += f[i] * f[j];
            }
        }
    }
    let trace: f64 = (0..p).map(|i| a[i * p + i]).sum();
    for i in 0..p {
        a[i * p + i] += 1e-12 * trace;
    }
    solve_spd(&mut a, &mut b, p)?;
    b.iter().all(|c| c.is_finite()).then_some(Quadratic { coef: b })
}

fn solve_spd(a: &mut [f64], b: &mut [f64], n: usize) -> Option<()> {
    for j in 0..n {
        let mut s = a[j * n + j];
        for k in 0..j {
            s -= a[j * n + k] * a[j * n + k];
        }
        if !(s > 0.0) {
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

const PRIMES: [u64; 8] = [2, 3, 5, 7, 11, 13, 17, 19];

/// Halton points with a seeded Cranley-Patterson rotation.
struct Halton {
    shift: Vec<f64>,
    index: u64,
}

impl Halton {
    fn new(d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Halton { shift: (0..d).map(|_| rng.random::<f64>()).collect(), index: 1 }
    }

    fn next_point(&mut self) -> Vec<f64> {
        let i = self.index;
        self.index += 1;
        self.shift
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let base = PRIMES[k % PRIMES.len()];
                let (mut f, mut r, mut n) = (1.0, 0.0, i);
                while n > 0 {
                    f /= base as f64;
                    r += f * (n % base) as f64;
                    n /= base;
                }
                (r + s).fract()
            })
            .collect()
    }
}

/// Minimizes the model over the box `z in [lo, hi]` (scaled coordinates).
fn model_minimizer(q: &Quadratic, lo: &[f64], hi: &[f64], halton: &mut Halton) -> Vec<f64> {
    let d = lo.len();
    let clamp = |z: &mut Vec<f64>| {
        for k in 0..d {
            z[k] = z[k].clamp(lo[k], hi[k]);
        }
    };
    let mut best = vec![0.0; d];
    clamp(&mut best);
    let mut best_v = q.eval(&best);
    for _ in 0..32 {
        let u = halton.next_point();
        let z: Vec<f64> = (0..d).map(|k| lo[k] + u[k] * (hi[k] - lo[k])).collect();
        let v = q.eval(&z);
        if v < best_v {
            best_v = v;
            best = z;
        }
    }
    let step = 1.0 / q.curvature(d);
    for _ in 0..200 {
        let g = q.gradient(&best);
        let mut z: Vec<f64> = best.iter().zip(&g).map(|(a, b)| a - step * b).collect();
        clamp(&mut z);
        let v = q.eval(&z);
        if !(v < best_v - 1e-15 * best_v.abs()) {
            break;
        }
        best_v = v;
        best = z;
    }
    best
}

/// Derivative-free trust-region minimization with quadratic regression models on
/// space-filling samples. Returns the best evaluated point.
pub fn trust_region_minimize(
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    cfg: &TrustRegionConfig,
) -> Result<TrustRegionResult> {
    let d = x0.len();
    let p = quadratic_terms(d);
    if cfg.budget < p + 1 {
        return Err(FpcaError::Precondition(format!("budget {} below the {} evaluations a quadratic model needs", cfg.budget, p + 1)));
    }
    let project = |x: &[f64]| -> Vec<f64> { x.iter().enumerate().map(|(k, v)| v.clamp(lower[k], upper[k])).collect() };
    let value = |x: &[f64]| {
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let mut halton = Halton::new(d, cfg.seed);
    let mut points: Vec<Vec<f64>> = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    let mut trace: Vec<TraceRecord> = Vec::new();
    let mut best = f64::INFINITY;
    let mut best_x = project(x0);
    let record = |trace: &mut Vec<TraceRecord>, best: &mut f64, best_x: &mut Vec<f64>, it, x: &[f64], v: f64, r, acc| {
        if v < *best {
            *best = v;
            *best_x = x.to_vec();
        }
        trace.push(TraceRecord { iteration: it, point: x.to_vec(), objective: v, radius: r, accepted: acc, best_so_far: *best });
    };

    let mut center = project(x0);
    let mut fc = value(&center);
    let mut radius = cfg.radius0.clamp(cfg.radius_min, cfg.radius_max);
    points.push(center.clone());
    values.push(fc);
    record(&mut trace, &mut best, &mut best_x, 0, &center, fc, radius, true);

    let mut iteration = 0;
    while points.len() < cfg.budget && radius >= cfg.radius_min {
        iteration += 1;
        let in_region = |x: &[f64], c: &[f64], r: f64| x.iter().zip(c).all(|(a, b)| (a - b).abs() <= r * (1.0 + 1e-12));
        let have = points.iter().zip(&values).filter(|(x, v)| v.is_finite() && in_region(x, &center, radius)).count();
        let want = (p + d).saturating_sub(have);
        let room = cfg.budget - points.len() - 1;
        if have + want.min(room) < p {
            break;
        }
        let fresh: Vec<Vec<f64>> = (0..want.min(room))
            .map(|_| {
                let u = halton.next_point();
                project(&center.iter().zip(&u).map(|(c, u)| c + radius * (2.0 * u - 1.0)).collect::<Vec<_>>())
            })
            .collect();
        let fresh_values: Vec<f64> = fresh.par_iter().map(|x| value(x)).collect();
        for (x, v) in fresh.into_iter().zip(fresh_values) {
            record(&mut trace, &mut best, &mut best_x, iteration, &x, v, radius, false);
            points.push(x);
            values.push(v);
        }
        let mut near: Vec<(f64, Vec<f64>, f64)> = points
            .iter()
            .zip(&values)
            .filter(|(x, v)| v.is_finite() && in_region(x, &center, radius))
            .map(|(x, &v)| {
                let z: Vec<f64> = x.iter().zip(&center).map(|(a, c)| (a - c) / radius).collect();
                (z.iter().map(|t| t * t).sum::<f64>(), z, v)
            })
            .collect();
        near.sort_by(|a, b| a.0.total_cmp(&b.0));
        near.truncate(2 * p);
        let (zs, fs): (Vec<Vec<f64>>, Vec<f64>) = near.into_iter().map(|(_, z, v)| (z, v)).unzip();
        let model = if zs.len() >= p { fit_quadratic(&zs, &fs) } else { None };
        let Some(model) = model else {
            radius *= 0.5;
            continue;
        };
        let zlo: Vec<f64> = (0..d).map(|k| ((lower[k] - center[k]) / radius).max(-1.0)).collect();
        let zhi: Vec<f64> = (0..d).map(|k| ((upper[k] - center[k]) / radius).min(1.0)).collect();
        let z = model_minimizer(&model, &zlo, &zhi, &mut halton);
        let predicted = model.eval(&vec![0.0; d]) - model.eval(&z);
        if !(predicted > 1e-14 * fc.abs().max(1e-300)) || points.len() >= cfg.budget {
            radius *= 0.5;
            continue;
        }
        let x = project(&center.iter().zip(&z).map(|(c, z)| c + radius * z).collect::<Vec<_>>());
        let fx = value(&x);
        let rho = (fc - fx) / predicted;
        let accepted = rho > cfg.accept;
        record(&mut trace, &mut best, &mut best_x, iteration, &x, fx, radius, accepted);
        points.push(x.clone());
        values.push(fx);
        let old = fc;
        if accepted {
            center = x;
            fc = fx;
        }
        let on_edge = z.iter().any(|t| t.abs() > 0.5);
        if rho > cfg.expand && on_edge {
            radius = (2.0 * radius).min(cfg.radius_max);
        } else if rho < cfg.accept {
            radius *= 0.5;
        }
        if accepted && (old - fc).abs() <= cfg.rel_tol * old.abs() {
            break;
        }
    }
    Ok(TrustRegionResult { best: best_x, best_value: best, trace })
}

/// Bandwidth found by the trust-region search, its trace in bandwidth units, and the objective.
#[derive(Debug, Clone)]
pub struct BandwidthSearch {
    pub bandwidth: Bandwidth,
    pub cv: f64,
    pub trace: Vec<TraceRecord>,
}

/// Minimizes [`cv_score`] over log-bandwidths within `[min_bandwidth, extent]`. A subsampled
/// objective's minimizer is scaled by [`CvObjective::subsample_factor`]; the trace keeps the
/// points actually evaluated.
pub fn optimize_bandwidth(obj: &CvObjective, h0: &Bandwidth, cfg: &TrustRegionConfig) -> Result<BandwidthSearch> {
    let lower: Vec<f64> = obj.min_bandwidth().iter().map(|v| v.ln()).collect();
    let upper: Vec<f64> = obj.extents().iter().map(|v| v.ln()).collect();
    let x0: Vec<f64> = h0.values().iter().map(|v| v.ln()).collect();
    let f = |x: &[f64]| {
        let h = Bandwidth::new(x.iter().map(|v| v.exp()).collect()).expect("finite positive bandwidth");
        cv_score(&h, obj).unwrap_or(f64::INFINITY)
    };
    let res = trust_region_minimize(&f, &x0, &lower, &upper, cfg)?;
    if !res.best_value.is_finite() {
        return Err(FpcaError::BandwidthTooSmall { nodes: obj.len() });
    }
    let to_h = |x: &[f64]| x.iter().map(|v| v.exp()).collect::<Vec<f64>>();
    let trace = res.trace.iter().map(|t| TraceRecord { point: to_h(&t.point), ..t.clone() }).collect();
    let k = obj.subsample_factor();
    let h = to_h(&res.best).iter().zip(obj.min_bandwidth()).map(|(h, lo)| (h * k).max(*lo)).collect();
    Ok(BandwidthSearch { bandwidth: Bandwidth::new(h)?, cv: res.best_value, trace })
}
