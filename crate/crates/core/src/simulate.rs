//! Seeded generators for the two reference models and error metrics against their truth.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::dataset::{FunctionalDataset, Sample};
use crate::error::{FpcaError, Result};
use crate::grid::EvaluationGrid;
use crate::scores::{reconstruct_grid, FpcaModel};

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A user-specified Karhunen-Loeve model.
#[derive(Clone)]
pub struct CustomModel {
    pub domain: Vec<(f64, f64)>,
    pub mean: ScalarFn,
    /// Orthonormal on `domain`.
    pub eigenfunctions: Vec<ScalarFn>,
    /// Nonincreasing and nonnegative.
    pub variances: Vec<f64>,
    pub noise_variance: f64,
}

#[derive(Clone)]
pub enum SimModel {
    /// `mu(t) = t + sin t` on `[0, 10]` with two cosine/sine components.
    Sim1,
    /// Three-dimensional model on `[0,1]^3` with four product-sine components.
    Sim2,
    Custom(CustomModel),
}

/// Raw score variances of the second model; its eigenfunctions have squared norm `1/512`.
const SIM2_VARIANCES: [f64; 4] = [16.0, 4.0, 1.0, 0.25];
/// `sqrt(512)`: multiplies the raw product-sine functions to unit norm.
pub const SIM2_RESCALE: f64 = 22.627416997969522;

impl SimModel {
    pub fn dim(&self) -> usize {
        match self {
            SimModel::Sim1 => 1,
            SimModel::Sim2 => 3,
            SimModel::Custom(c) => c.domain.len(),
        }
    }

    pub fn domain(&self) -> Vec<(f64, f64)> {
        match self {
            SimModel::Sim1 => vec![(0.0, 10.0)],
            SimModel::Sim2 => vec![(0.0, 1.0); 3],
            SimModel::Custom(c) => c.domain.clone(),
        }
    }

    pub fn noise_variance(&self) -> f64 {
        match self {
            SimModel::Sim1 => 0.25,
            SimModel::Sim2 => 1.0 / 16.0,
            SimModel::Custom(c) => c.noise_variance,
        }
    }

    pub fn n_components(&self) -> usize {
        match self {
            SimModel::Sim1 => 2,
            SimModel::Sim2 => 4,
            SimModel::Custom(c) => c.eigenfunctions.len(),
        }
    }

    /// Factor taking the generating functions to unit norm (and generated scores to KL scale).
    pub fn rescale(&self) -> f64 {
        match self {
            SimModel::Sim2 => SIM2_RESCALE,
            _ => 1.0,
        }
    }

    pub fn mean(&self, x: &[f64]) -> f64 {
        match self {
            SimModel::Sim1 => x[0] + x[0].sin(),
            SimModel::Sim2 => x.iter().map(|t| (t - 0.5) * (t - 0.5)).sum::<f64>().exp(),
            SimModel::Custom(c) => (c.mean)(x),
        }
    }

    /// Generating function `l` exactly as written in the model, before any rescale.
    pub fn raw_eigenfunction(&self, l: usize, x: &[f64]) -> f64 {
        match self {
            SimModel::Sim1 => {
                let c = PI * x[0] / 10.0;
                if l == 0 {
                    -c.cos() / 5f64.sqrt()
                } else {
                    c.sin() / 5f64.sqrt()
                }
            }
            SimModel::Sim2 => x.iter().map(|t| (2.0 * (l + 1) as f64 * PI * t).sin() / 2.0).product(),
            SimModel::Custom(c) => (c.eigenfunctions[l])(x),
        }
    }

    /// Unit-norm eigenfunction `l`.
    pub fn eigenfunction(&self, l: usize, x: &[f64]) -> f64 {
        self.raw_eigenfunction(l, x) * self.rescale()
    }

    /// Variances of the generating scores.
    pub fn raw_variances(&self) -> Vec<f64> {
        match self {
            SimModel::Sim1 => vec![4.0, 1.0],
            SimModel::Sim2 => SIM2_VARIANCES.to_vec(),
            SimModel::Custom(c) => c.variances.clone(),
        }
    }

    /// Eigenvalues of the covariance operator.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let r2 = self.rescale() * self.rescale();
        self.raw_variances().iter().map(|v| v / r2).collect()
    }

    /// `mu(x) + sum_l a_l phi_l(x)` with KL-scale scores and unit-norm functions.
    pub fn signal(&self, scores: &[f64], x: &[f64]) -> f64 {
        self.mean(x) + scores.iter().enumerate().map(|(l, a)| a * self.eigenfunction(l, x)).sum::<f64>()
    }

    fn validate(&self) -> Result<()> {
        let v = self.raw_variances();
        if v.iter().any(|x| !(*x >= 0.0)) || v.windows(2).any(|w| w[1] > w[0]) {
            return Err(FpcaError::InvalidSpec("score variances must be nonnegative and nonincreasing".into()));
        }
        if !(self.noise_variance() >= 0.0) {
            return Err(FpcaError::InvalidSpec("noise variance must be nonnegative".into()));
        }
        if let SimModel::Custom(c) = self {
            if c.variances.len() != c.eigenfunctions.len() {
                return Err(FpcaError::InvalidSpec("one variance per eigenfunction".into()));
            }
            let d = c.domain.len();
            if d == 0 || c.domain.iter().any(|(a, b)| !(b > a)) {
                return Err(FpcaError::InvalidSpec("domain must be a nonempty box".into()));
            }
            let per_axis = match d {
                1 => 2000,
                2 => 64,
                3 => 16,
                _ => 8,
            };
            let grid = EvaluationGrid::cell_centered(&c.domain.iter().map(|&(a, b)| (a, b, per_axis)).collect::<Vec<_>>())?;
            let values: Vec<Vec<f64>> = (0..c.eigenfunctions.len())
                .map(|l| (0..grid.len()).map(|i| (c.eigenfunctions[l])(&grid.node_vec(i))).collect())
                .collect();
            for a in 0..values.len() {
                for b in 0..=a {
                    let ip = grid.inner(&values[a], &values[b]);
                    let want = if a == b { 1.0 } else { 0.0 };
                    if (ip - want).abs() > 1e-3 {
                        return Err(FpcaError::InvalidSpec(format!("eigenfunctions {a} and {b} have inner product {ip:.4}")));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Design {
    /// Every sample is observed at all nodes of an inclusive equispaced grid.
    Grid(Vec<usize>),
    /// Independent uniform points per sample.
    Random(usize),
}

#[derive(Clone)]
pub struct SimSpec {
    pub model: SimModel,
    pub n: usize,
    pub design: Design,
    pub seed: u64,
    /// Replicate index; selects an independent stream of the seeded generator.
    pub stream: u64,
}

impl SimSpec {
    /// Desk-scale first model: 1000 equispaced points per curve.
    pub fn sim1(n: usize, seed: u64) -> Self {
        SimSpec { model: SimModel::Sim1, n, design: Design::Grid(vec![1000]), seed, stream: 0 }
    }

    /// Second model on an `m^3` grid (the reference run uses 64).
    pub fn sim2(n: usize, m: usize, seed: u64) -> Self {
        SimSpec { model: SimModel::Sim2, n, design: Design::Grid(vec![m; 3]), seed, stream: 0 }
    }

    pub fn replicate(&self, r: u64) -> Self {
        SimSpec { stream: r, ..self.clone() }
    }

    /// Grid behind a `Design::Grid` design.
    pub fn design_grid(&self) -> Result<Option<EvaluationGrid>> {
        match &self.design {
            Design::Grid(m) => {
                let dom = self.model.domain();
                if m.len() != dom.len() {
                    return Err(FpcaError::DimensionMismatch { expected: dom.len(), found: m.len() });
                }
                let spec: Vec<_> = dom.iter().zip(m).map(|(&(a, b), &k)| (a, b, k)).collect();
                Ok(Some(EvaluationGrid::uniform(&spec)?))
            }
            Design::Random(_) => Ok(None),
        }
    }
}

/// Generator truth. Scores are on the KL scale of the unit-norm eigenfunctions.
#[derive(Debug, Clone)]
pub struct Truth {
    pub scores: Vec<Vec<f64>>,
    /// Noise-free values at each sample's observation points.
    pub noiseless: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Factor applied to the generating functions to reach unit norm.
    pub rescale: f64,
}

pub fn generate(spec: &SimSpec) -> Result<(FunctionalDataset, Truth)> {
    spec.model.validate()?;
    if spec.n == 0 {
        return Err(FpcaError::InvalidSpec("need at least one sample".into()));
    }
    let d = spec.model.dim();
    let dom = spec.model.domain();
    let grid = spec.design_grid()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(spec.stream);
    let sd: Vec<f64> = spec.model.raw_variances().iter().map(|v| v.sqrt()).collect();
    let noise_sd = spec.model.noise_variance().sqrt();
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let rescale = spec.model.rescale();
    let mut samples = Vec::with_capacity(spec.n);
    let mut truth = Truth { scores: Vec::new(), noiseless: Vec::new(), eigenvalues: spec.model.eigenvalues(), rescale };
    let width = samples_width(spec.n);
    for i in 0..spec.n {
        let raw: Vec<f64> = sd.iter().map(|s| s * std_normal.sample(&mut rng)).collect();
        let coords: Vec<f64> = match (&spec.design, &grid) {
            (Design::Grid(_), Some(g)) => (0..g.len()).flat_map(|j| g.node_vec(j)).collect(),
            (Design::Random(k), _) => (0..*k).flat_map(|_| dom.iter().map(|&(a, b)| rng.random_range(a..=b)).collect::<Vec<_>>()).collect(),
            _ => unreachable!("grid design always has a grid"),
        };
        let model = &spec.model;
        let clean: Vec<f64> = coords
            .par_chunks(d)
            .map(|x| model.mean(x) + raw.iter().enumerate().map(|(l, a)| a * model.raw_eigenfunction(l, x)).sum::<f64>())
            .collect();
        let values: Vec<f64> = clean.iter().map(|c| c + noise_sd * std_normal.sample(&mut rng)).collect();
        samples.push(Sample::new(format!("s{i:0width$}"), coords, values));
        truth.scores.push(raw.iter().map(|a| a / rescale).collect());
        truth.noiseless.push(clean);
    }
    let ds = FunctionalDataset::with_bounds(d, samples, dom)?;
    Ok((ds, truth))
}

fn samples_width(n: usize) -> usize {
    (n.max(2) - 1).to_string().len()
}

/// Mean over samples of the Riemann integrated squared difference.
pub fn mise(grid: &EvaluationGrid, estimates: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64> {
    if estimates.len() != truth.len() || estimates.is_empty() {
        return Err(FpcaError::DimensionMismatch { expected: truth.len(), found: estimates.len() });
    }
    let total: f64 = estimates
        .iter()
        .zip(truth)
        .map(|(a, b)| grid.integrate(&a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).collect::<Vec<_>>()))
        .sum();
    Ok(total / estimates.len() as f64)
}

/// Integrated squared error after choosing the sign of `phi_hat` that minimizes it.
pub fn ise(grid: &EvaluationGrid, phi_hat: &[f64], phi: &[f64]) -> f64 {
    let plus: Vec<f64> = phi_hat.iter().zip(phi).map(|(a, b)| (a - b) * (a - b)).collect();
    let minus: Vec<f64> = phi_hat.iter().zip(phi).map(|(a, b)| (a + b) * (a + b)).collect();
    grid.integrate(&plus).min(grid.integrate(&minus))
}

/// Model functions sampled on a grid: the mean and the unit-norm eigenfunctions.
pub fn truth_on_grid(model: &SimModel, grid: &EvaluationGrid) -> (Vec<f64>, Vec<Vec<f64>>) {
    let nodes: Vec<Vec<f64>> = (0..grid.len()).map(|i| grid.node_vec(i)).collect();
    let mean = nodes.iter().map(|x| model.mean(x)).collect();
    let phis = (0..model.n_components()).map(|l| nodes.iter().map(|x| model.eigenfunction(l, x)).collect()).collect();
    (mean, phis)
}

/// Noise-free curves `mu + sum_l A_l phi_l` of every sample on `grid`.
pub fn true_curves(model: &SimModel, truth: &Truth, grid: &EvaluationGrid) -> Vec<Vec<f64>> {
    let (mean, phis) = truth_on_grid(model, grid);
    truth
        .scores
        .iter()
        .map(|a| (0..grid.len()).map(|t| mean[t] + a.iter().zip(&phis).map(|(a, p)| a * p[t]).sum::<f64>()).collect())
        .collect()
}

/// Errors of a fitted model against the generator truth.
#[derive(Debug, Clone, PartialEq)]
pub struct FitErrors {
    /// Reconstruction MISE over the samples.
    pub mise: f64,
    /// Sign-aligned ISE of each eigenfunction the fit and the model share.
    pub ise: Vec<f64>,
}

pub fn fit_errors(fitted: &FpcaModel, model: &SimModel, truth: &Truth) -> Result<FitErrors> {
    let grid = fitted.grid();
    if truth.scores.len() != fitted.scores.len() {
        return Err(FpcaError::DimensionMismatch { expected: truth.scores.len(), found: fitted.scores.len() });
    }
    let est: Vec<Vec<f64>> = fitted.scores.iter().map(|a| reconstruct_grid(fitted, a)).collect();
    let mise = mise(grid, &est, &true_curves(model, truth, grid))?;
    let (_, phis) = truth_on_grid(model, grid);
    let ise = fitted.eig.eigenfunctions.iter().zip(&phis).map(|(a, b)| ise(grid, a, b)).collect();
    Ok(FitErrors { mise, ise })
}

/// Errors at increasing sample sizes and their fitted log-log slope.
#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    pub ns: Vec<usize>,
    /// Median error over repeats at each `n`.
    pub errors: Vec<f64>,
    pub monotone: bool,
    /// `None` when some error vanishes and logs are undefined.
    pub slope: Option<f64>,
    /// The `-1/2` reference rate, for documentation only.
    pub reference_slope: f64,
}

/// Runs `error_at(n, repeat)` for every `n` and repeat, keeping the median per `n`.
pub fn empirical_rate_check(ns: &[usize], repeats: usize, error_at: impl Fn(usize, usize) -> Result<f64> + Sync) -> Result<RateReport> {
    if ns.len() < 3 || repeats == 0 {
        return Err(FpcaError::Precondition("need at least three sample sizes and one repeat".into()));
    }
    let mut errors = Vec::with_capacity(ns.len());
    for &n in ns {
        let mut e: Vec<f64> = (0..repeats).into_par_iter().map(|r| error_at(n, r)).collect::<Result<_>>()?;
        e.sort_by(f64::total_cmp);
        let med = if repeats % 2 == 1 { e[repeats / 2] } else { 0.5 * (e[repeats / 2 - 1] + e[repeats / 2]) };
        errors.push(med);
    }
    let monotone = errors.windows(2).all(|w| w[1] < w[0]);
    let slope = if errors.iter().all(|&e| e > 1e-300) {
        let xs: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
        let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
        let k = xs.len() as f64;
        let (mx, my) = (xs.iter().sum::<f64>() / k, ys.iter().sum::<f64>() / k);
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        Some(sxy / sxx)
    } else {
        None
    };
    Ok(RateReport { ns: ns.to_vec(), errors, monotone, slope, reference_slope: -0.5 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sim1_score_variance() {
        let spec = SimSpec { model: SimModel::Sim1, n: 10000, design: Design::Random(1), seed: 5, stream: 0 };
        let (_, truth) = generate(&spec).unwrap();
        let var = truth.scores.iter().map(|a| a[0] * a[0]).sum::<f64>() / 10000.0;
        assert!((var / 4.0 - 1.0).abs() < 0.02, "{var}");
    }

    #[test]
    fn degenerate_process_equals_mean() {
        let c = CustomModel {
            domain: vec![(0.0, 1.0)],
            mean: Arc::new(|x| x[0] * x[0]),
            eigenfunctions: vec![Arc::new(|_| 1.0)],
            variances: vec![0.0],
            noise_variance: 0.0,
        };
        let spec = SimSpec { model: SimModel::Custom(c), n: 5, design: Design::Random(7), seed: 1, stream: 0 };
        let (ds, _) = generate(&spec).unwrap();
        for s in ds.samples() {
            for (x, y) in s.coords().iter().zip(s.values()) {
                assert_eq!(*y, x * x);
            }
        }
    }

    #[test]
    fn custom_rejects_non_orthonormal() {
        let c = CustomModel {
            domain: vec![(0.0, 1.0)],
            mean: Arc::new(|_| 0.0),
            eigenfunctions: vec![Arc::new(|_| 2.0)],
            variances: vec![1.0],
            noise_variance: 0.1,
        };
        let spec = SimSpec { model: SimModel::Custom(c), n: 5, design: Design::Random(7), seed: 1, stream: 0 };
        assert!(matches!(generate(&spec), Err(FpcaError::InvalidSpec(_))));
    }

    #[test]
    fn sim2_norms() {
        let g = EvaluationGrid::cell_centered(&[(0.0, 1.0, 40); 3]).unwrap();
        let (_, phis) = truth_on_grid(&SimModel::Sim2, &g);
        for a in 0..4 {
            for b in 0..4 {
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((g.inner(&phis[a], &phis[b]) - want).abs() < 1e-9);
            }
        }
        let raw: Vec<f64> = (0..g.len()).map(|i| SimModel::Sim2.raw_eigenfunction(0, &g.node_vec(i))).collect();
        assert!((g.inner(&raw, &raw) - 1.0 / 512.0).abs() < 1e-12);
    }

    #[test]
    fn reproducible_and_streams_differ() {
        let a = generate(&SimSpec::sim1(3, 7)).unwrap().0;
        let b = generate(&SimSpec::sim1(3, 7)).unwrap().0;
        let c = generate(&SimSpec::sim1(3, 7).replicate(1)).unwrap().0;
        assert_eq!(a.samples()[2].values(), b.samples()[2].values());
        assert_ne!(a.samples()[2].values(), c.samples()[2].values());
    }

    #[test]
    fn metrics() {
        let g = EvaluationGrid::cell_centered(&[(0.0, 2.0, 50)]).unwrap();
        let t = vec![(0..50).map(|i| i as f64).collect::<Vec<_>>()];
        let e = vec![t[0].iter().map(|v| v + 0.5).collect::<Vec<_>>()];
        assert!((mise(&g, &e, &t).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(mise(&g, &t, &t).unwrap(), 0.0);
        let x = g.axis(0).to_vec();
        let p: Vec<f64> = x.iter().map(|t| (PI * t / 2.0).sin()).collect();
        let q: Vec<f64> = x.iter().map(|t| (PI * t).sin()).collect();
        let neg: Vec<f64> = p.iter().map(|v| -v).collect();
        assert!(ise(&g, &neg, &p) < 1e-15);
        assert!((ise(&g, &p, &q) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn rate_report() {
        let r = empirical_rate_check(&[50, 100, 200], 3, |n, _| Ok(1.0 / (n as f64).sqrt())).unwrap();
        assert!(r.monotone);
        assert!((r.slope.unwrap() + 0.5).abs() < 1e-12);
        let z = empirical_rate_check(&[50, 100, 200], 3, |_, _| Ok(0.0)).unwrap();
        assert!(z.slope.is_none() && !z.monotone);
    }
}
