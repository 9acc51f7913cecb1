//! End-to-end fitting: domain normalization, bandwidths, smoothing, eigen, scores.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bandwidth::{
    optimize_bandwidth, rule_of_thumb, CvObjective, CvScheme, CvTarget, TraceRecord, TrustRegionConfig,
    DEFAULT_MAX_PAIRS,
};
use crate::binning::{linear_bin, BinnedData};
use crate::dataset::{AffineMap, FunctionalDataset};
use crate::eigen::{
    default_sketch, dense_eig, matrixize, randomized_eig, select_components_fve, EigenSystem, MatrixizedCovariance,
    StreamingCovariance, DEFAULT_MEMORY_BUDGET,
};
use crate::error::{FpcaError, Result};
use crate::fft::{blockwise_apply, stencil_radii, BlockPlan, CovarianceEngine, FftOp, MomentTarget};
use crate::grid::EvaluationGrid;
use crate::kernel::Bandwidth;
use crate::scores::{compute_scores, estimate_sigma2_from_diagonal, FpcaModel, ModelMetadata, ScoreMethod};
use crate::smoother::{estimate_covariance, estimate_diag_plus_noise, estimate_mean, mean_on_grid};
use crate::surface::SurfaceEstimate;

pub const FORMAT_VERSION: u32 = 1;

/// Core size, in nodes, of the diagonal blocks computed for a streamed covariance.
const STREAM_DIAG_NODES: usize = 512;
/// Core size per side of the blocks a streamed covariance is recomputed in.
const STREAM_BLOCK_NODES: usize = 4096;

/// Nodes per axis when the configuration leaves the grid open.
pub fn default_nodes(dim: usize) -> usize {
    match dim {
        1 => 400,
        2 => 64,
        _ => 32,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum BandwidthChoice {
    /// Cross-validated, then multiplied by `multiplier`.
    Auto { multiplier: f64 },
    /// Per-axis values in data units; a single value applies to every axis.
    Fixed { values: Vec<f64> },
}

impl Default for BandwidthChoice {
    fn default() -> Self {
        BandwidthChoice::Auto { multiplier: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SmootherPath {
    #[default]
    Fft,
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Eigensolver {
    Dense,
    /// `q` defaults to the oversampled sketch size.
    Randomized { q: Option<usize> },
}

impl Default for Eigensolver {
    fn default() -> Self {
        Eigensolver::Dense
    }
}

/// Full configuration of a fit; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Nodes per axis; one entry applies to every axis, empty picks [`default_nodes`].
    pub nodes: Vec<usize>,
    pub h_mean: BandwidthChoice,
    pub h_cov: BandwidthChoice,
    pub h_noise: BandwidthChoice,
    pub fve_threshold: f64,
    pub max_components: usize,
    pub eigensolver: Eigensolver,
    pub smoother: SmootherPath,
    /// Blocks per axis for the FFT path; one entry applies to every axis.
    pub blocks: Vec<usize>,
    pub score_method: ScoreMethod,
    pub seed: u64,
    pub cv_budget: usize,
    pub cv_scheme: CvScheme,
    pub cv_max_pairs: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            nodes: Vec::new(),
            h_mean: BandwidthChoice::default(),
            h_cov: BandwidthChoice::default(),
            h_noise: BandwidthChoice::default(),
            fve_threshold: 0.95,
            max_components: 20,
            eigensolver: Eigensolver::Dense,
            smoother: SmootherPath::Fft,
            blocks: vec![1],
            score_method: ScoreMethod::Auto,
            seed: 0,
            cv_budget: 20,
            cv_scheme: CvScheme::Auto,
            cv_max_pairs: DEFAULT_MAX_PAIRS,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fve_threshold > 0.0 && self.fve_threshold <= 1.0) {
            return Err(FpcaError::Config(format!("fve_threshold {} outside (0, 1]", self.fve_threshold)));
        }
        if self.max_components == 0 {
            return Err(FpcaError::Config("max_components must be positive".into()));
        }
        if self.nodes.iter().any(|&n| n < 2) {
            return Err(FpcaError::Config("every axis needs at least two nodes".into()));
        }
        if self.blocks.iter().any(|&b| b == 0) {
            return Err(FpcaError::Config("block counts must be positive".into()));
        }
        for (name, c) in [("h_mean", &self.h_mean), ("h_cov", &self.h_cov), ("h_noise", &self.h_noise)] {
            match c {
                BandwidthChoice::Auto { multiplier } if !(*multiplier > 0.0) => {
                    return Err(FpcaError::Config(format!("{name}: multiplier must be positive")))
                }
                BandwidthChoice::Fixed { values } if values.is_empty() || values.iter().any(|v| !(*v > 0.0)) => {
                    return Err(FpcaError::Config(format!("{name}: bandwidths must be positive")))
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn per_axis<T: Copy>(v: &[T], d: usize, what: &str) -> Result<Vec<T>> {
        match v.len() {
            1 => Ok(vec![v[0]; d]),
            n if n == d => Ok(v.to_vec()),
            n => Err(FpcaError::Config(format!("{what}: {n} values for {d} axes"))),
        }
    }

    pub fn nodes_for(&self, d: usize) -> Result<Vec<usize>> {
        if self.nodes.is_empty() {
            return Ok(vec![default_nodes(d); d]);
        }
        Self::per_axis(&self.nodes, d, "nodes")
    }
}

/// Wall-clock seconds per stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub bandwidth: f64,
    pub smoothing: f64,
    pub eigen: f64,
    pub scoring: f64,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub timings: StageTimings,
    /// Optimizer traces keyed by estimator, bandwidths in data units.
    pub traces: BTreeMap<&'static str, Vec<TraceRecord>>,
    /// Every eigenvalue the solver returned, before FVE truncation.
    pub all_eigenvalues: Vec<f64>,
    pub score_method: ScoreMethod,
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub model: FpcaModel,
    pub report: FitReport,
}

/// Unit-cube grid for `ds`, with an optional mask.
pub fn unit_grid(nodes: &[usize], mask: Option<Vec<bool>>) -> Result<EvaluationGrid> {
    let spec: Vec<(f64, f64, usize)> = nodes.iter().map(|&n| (0.0, 1.0, n)).collect();
    let g = EvaluationGrid::uniform(&spec)?;
    match mask {
        Some(m) => g.with_mask(m),
        None => Ok(g),
    }
}

/// The same grid in data units.
pub fn map_grid(grid: &EvaluationGrid, map: &AffineMap) -> Result<EvaluationGrid> {
    let axes = grid
        .axes()
        .iter()
        .enumerate()
        .map(|(k, a)| a.iter().map(|u| map.offset[k] + map.scale[k] * u).collect())
        .collect();
    EvaluationGrid::new(axes, grid.mask().map(|m| m.to_vec()))
}

/// Uniform plan with as many of the requested blocks as the halos allow.
fn block_plan(shape: &[usize], blocks: &[usize], radius: &[usize]) -> Result<BlockPlan> {
    let fit: Vec<usize> = (0..shape.len()).map(|k| blocks[k].min(shape[k] / radius[k].max(1)).max(1)).collect();
    if fit != blocks {
        log::warn!("kernel radius {radius:?} allows only {fit:?} blocks per axis");
    }
    if fit.iter().all(|&b| b == 1) {
        return Ok(BlockPlan::single(shape));
    }
    BlockPlan::uniform(shape, &fit, radius)
}

struct Bandwidths {
    mean: Bandwidth,
    cov: Bandwidth,
    noise: Bandwidth,
}

fn resolve_bandwidth(
    choice: &BandwidthChoice,
    target: CvTarget,
    ds: &FunctionalDataset,
    grid: &EvaluationGrid,
    map: &AffineMap,
    cfg: &FitConfig,
    traces: &mut BTreeMap<&'static str, Vec<TraceRecord>>,
    name: &'static str,
) -> Result<Bandwidth> {
    let d = ds.dim();
    match choice {
        BandwidthChoice::Fixed { values } => {
            let v = FitConfig::per_axis(values, d, name)?;
            Bandwidth::new(v.iter().enumerate().map(|(k, h)| (h / map.scale[k]).min(1.0)).collect())
        }
        BandwidthChoice::Auto { multiplier } => {
            let obj = CvObjective::new(target, ds, Some(grid), cfg.cv_scheme, cfg.cv_max_pairs, cfg.seed)?;
            let floor: Vec<f64> = (0..d).map(|k| obj.min_bandwidth()[k].max(2.0 * grid.spacing(k))).collect();
            let h0 = rule_of_thumb(&obj, &floor)?;
            let tr = TrustRegionConfig { budget: cfg.cv_budget, seed: cfg.seed, ..Default::default() };
            let found = optimize_bandwidth(&obj, &h0, &tr)?;
            let trace = found
                .trace
                .into_iter()
                .map(|mut t| {
                    for (k, h) in t.point.iter_mut().enumerate() {
                        *h *= map.scale[k];
                    }
                    t
                })
                .collect();
            traces.insert(name, trace);
            Bandwidth::new(found.bandwidth.values().iter().map(|h| (h * multiplier).min(1.0)).collect())
        }
    }
}

enum Covariance {
    Dense(SurfaceEstimate),
    /// Too large to hold; blocks are recomputed from the binned data whenever the solver asks.
    Streaming { engine: Arc<CovarianceEngine>, plan: BlockPlan, diagonal: Vec<f64> },
}

impl Covariance {
    fn diagonal(&self) -> Vec<f64> {
        match self {
            Covariance::Dense(c) => c.diagonal(),
            Covariance::Streaming { diagonal, .. } => diagonal.clone(),
        }
    }
}

/// Whether the `M x M` covariance of `grid` fits the dense memory budget.
pub fn covariance_fits_in_memory(grid: &EvaluationGrid) -> bool {
    let m = grid.in_mask_count().max(grid.len());
    m.saturating_mul(m).saturating_mul(8) <= DEFAULT_MEMORY_BUDGET
}

/// Blocks per axis giving cores of at most `target` nodes.
fn blocks_for(shape: &[usize], target: usize) -> Vec<usize> {
    let side = ((target as f64).powf(1.0 / shape.len() as f64).floor() as usize).max(1);
    shape.iter().map(|&n| n.div_ceil(side)).collect()
}

fn streaming_covariance(binned: Arc<BinnedData>, grid: &EvaluationGrid, h: &Bandwidth, mean: &SurfaceEstimate) -> Result<Covariance> {
    let mu = mean_on_grid(mean, grid)?;
    let engine = Arc::new(CovarianceEngine::new(binned, grid, h, &mu)?);
    let r = stencil_radii(grid, h);
    let shape = grid.shape();
    let mut diagonal = vec![0.0; grid.len()];
    let side = block_plan(shape, &blocks_for(shape, STREAM_DIAG_NODES), &r)?;
    for core in side.cores() {
        let values = engine.compute_box(core, core, side.halo(), side.halo())?;
        let idx = core.global_indices(shape);
        for (a, &g) in idx.iter().enumerate() {
            diagonal[g] = values[a * idx.len() + a];
        }
    }
    let b = blocks_for(shape, STREAM_BLOCK_NODES);
    let mut shape2 = shape.to_vec();
    shape2.extend_from_slice(shape);
    let plan = block_plan(&shape2, &[b.clone(), b].concat(), &[r.clone(), r].concat())?;
    Ok(Covariance::Streaming { engine, plan, diagonal })
}

struct Surfaces {
    mean: SurfaceEstimate,
    cov: Covariance,
    diag: SurfaceEstimate,
    // the mean smoothed with the noise bandwidth, subtracted inside the variance estimate
    noise_mean: SurfaceEstimate,
}

fn smooth(ds: &FunctionalDataset, grid: &EvaluationGrid, h: &Bandwidths, cfg: &FitConfig) -> Result<Surfaces> {
    match cfg.smoother {
        SmootherPath::Direct => {
            let mean_at = |hh: &Bandwidth, stage| estimate_mean(ds, grid, hh).map_err(|e| e.at_stage(stage));
            let mean = mean_at(&h.mean, "mean")?;
            // the subtracted mean shares the product bandwidth so their leading biases cancel
            let cov_mean = if h.cov == h.mean { mean.clone() } else { mean_at(&h.cov, "covariance")? };
            let noise_mean = if h.noise == h.mean { mean.clone() } else { mean_at(&h.noise, "noise")? };
            if !covariance_fits_in_memory(grid) {
                return Err(FpcaError::Precondition("the covariance exceeds the memory budget; use the fft smoother".into()).at_stage("covariance"));
            }
            let cov = Covariance::Dense(estimate_covariance(ds, grid, &h.cov, &cov_mean).map_err(|e| e.at_stage("covariance"))?);
            let diag = estimate_diag_plus_noise(ds, grid, &h.noise).map_err(|e| e.at_stage("noise"))?;
            Ok(Surfaces { mean, cov, diag, noise_mean })
        }
        SmootherPath::Fft => {
            let d = ds.dim();
            let blocks = FitConfig::per_axis(&cfg.blocks, d, "blocks")?;
            let binned = Arc::new(linear_bin(ds, grid).map_err(|e| e.at_stage("binning"))?);
            let local = |hh: &Bandwidth, target, stage| {
                let plan = block_plan(grid.shape(), &blocks, &stencil_radii(grid, hh))?;
                blockwise_apply(&plan, grid, hh, FftOp::LocalLinear { binned: &binned, target }).map_err(|e: FpcaError| e.at_stage(stage))
            };
            let mean = local(&h.mean, MomentTarget::Mean, "mean")?;
            let cov_mean = if h.cov == h.mean { mean.clone() } else { local(&h.cov, MomentTarget::Mean, "covariance")? };
            let noise_mean = if h.noise == h.mean { mean.clone() } else { local(&h.noise, MomentTarget::Mean, "noise")? };
            let diag = local(&h.noise, MomentTarget::Squares, "noise")?;
            if !covariance_fits_in_memory(grid) {
                log::warn!("covariance of {} nodes exceeds the memory budget; streaming blocks", grid.len());
                let cov = streaming_covariance(binned, grid, &h.cov, &cov_mean).map_err(|e| e.at_stage("covariance"))?;
                return Ok(Surfaces { mean, cov, diag, noise_mean });
            }
            let mut shape = grid.shape().to_vec();
            shape.extend_from_slice(grid.shape());
            let mut b2 = blocks.clone();
            b2.extend_from_slice(&blocks);
            let mut r2 = stencil_radii(grid, &h.cov);
            r2.extend(stencil_radii(grid, &h.cov));
            let cov = block_plan(&shape, &b2, &r2)
                .and_then(|plan| blockwise_apply(&plan, grid, &h.cov, FftOp::Covariance { binned: binned.clone(), mean: &cov_mean }))
                .map_err(|e| e.at_stage("covariance"))?;
            Ok(Surfaces { mean, cov: Covariance::Dense(cov), diag, noise_mean })
        }
    }
}

fn eigensystem_of(cov: Covariance, cfg: &FitConfig) -> Result<EigenSystem> {
    match cov {
        Covariance::Dense(c) => eigensystem(&c, cfg),
        Covariance::Streaming { engine, plan, .. } => {
            let s = MatrixizedCovariance::streaming(StreamingCovariance::new(engine, plan)?);
            let l_max = cfg.max_components.min(s.dim());
            let q = match cfg.eigensolver {
                Eigensolver::Randomized { q: Some(q) } => q,
                Eigensolver::Randomized { q: None } => default_sketch(l_max, s.dim()),
                Eigensolver::Dense => {
                    log::warn!("the dense solver needs the whole matrix in memory; using the randomized solver");
                    default_sketch(l_max, s.dim())
                }
            };
            randomized_eig(&s, q.min(s.dim()), l_max.min(q), cfg.seed)
        }
    }
}

/// Eigen system of a covariance surface with the configured solver, all components kept.
pub fn eigensystem(cov: &SurfaceEstimate, cfg: &FitConfig) -> Result<EigenSystem> {
    let s = matrixize(cov)?;
    let l_max = cfg.max_components.min(s.dim());
    match cfg.eigensolver {
        Eigensolver::Dense if s.dense().is_some() => dense_eig(&s, l_max),
        Eigensolver::Dense => randomized_eig(&s, default_sketch(l_max, s.dim()), l_max, cfg.seed),
        Eigensolver::Randomized { q } => {
            let q = q.unwrap_or_else(|| default_sketch(l_max, s.dim())).min(s.dim());
            randomized_eig(&s, q, l_max.min(q), cfg.seed)
        }
    }
}

/// Fits the full model. Smoothing happens on the unit cube; the returned model is in data units.
pub fn fit(ds: &FunctionalDataset, cfg: &FitConfig, mask: Option<Vec<bool>>) -> Result<FitOutput> {
    cfg.validate()?;
    let d = ds.dim();
    let (unit, map) = ds.normalize_domain().map_err(|e| e.at_stage("normalize"))?;
    let grid = unit_grid(&cfg.nodes_for(d)?, mask).map_err(|e| e.at_stage("grid"))?;
    let mut timings = StageTimings::default();
    let mut traces = BTreeMap::new();

    let t0 = Instant::now();
    let h = Bandwidths {
        mean: resolve_bandwidth(&cfg.h_mean, CvTarget::Mean, &unit, &grid, &map, cfg, &mut traces, "mean")
            .map_err(|e| e.at_stage("bandwidth"))?,
        cov: resolve_bandwidth(&cfg.h_cov, CvTarget::Covariance, &unit, &grid, &map, cfg, &mut traces, "covariance")
            .map_err(|e| e.at_stage("bandwidth"))?,
        noise: resolve_bandwidth(&cfg.h_noise, CvTarget::DiagPlusNoise, &unit, &grid, &map, cfg, &mut traces, "noise")
            .map_err(|e| e.at_stage("bandwidth"))?,
    };
    timings.bandwidth = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let s = smooth(&unit, &grid, &h, cfg)?;
    let sigma2 = estimate_sigma2_from_diagonal(&s.diag, &s.cov.diagonal(), &s.noise_mean).map_err(|e| e.at_stage("noise"))?;
    timings.smoothing = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let full = eigensystem_of(s.cov, cfg).map_err(|e| e.at_stage("eigen"))?;
    if full.is_empty() {
        return Err(FpcaError::EigFailure("the covariance has no positive eigenvalue".into()).at_stage("eigen"));
    }
    let l = select_components_fve(&full, cfg.fve_threshold).map_err(|e| e.at_stage("eigen"))?;
    let eig = full.truncated(l);
    timings.eigen = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let method = cfg.score_method.resolve(&unit, &grid);
    let scores = compute_scores(&unit, &s.mean, &eig, sigma2, method).map_err(|e| e.at_stage("scores"))?;
    timings.scoring = t0.elapsed().as_secs_f64();

    let vol = map.volume_factor();
    let data_grid = map_grid(&grid, &map)?;
    let to_data = |b: &Bandwidth| b.values().iter().enumerate().map(|(k, v)| v * map.scale[k]).collect();
    let eigenvalues: Vec<f64> = eig.eigenvalues.iter().map(|v| v * vol).collect();
    let eig_data = EigenSystem {
        grid: data_grid.clone(),
        eigenvalues,
        eigenfunctions: eig.eigenfunctions.iter().map(|f| f.iter().map(|v| v / vol.sqrt()).collect()).collect(),
        fve: eig.fve.clone(),
        total_variance: eig.total_variance * vol,
    };
    let (eigensolver, sketch) = match cfg.eigensolver {
        Eigensolver::Dense => ("dense".to_string(), None),
        Eigensolver::Randomized { q } => {
            ("randomized".to_string(), Some(q.unwrap_or_else(|| default_sketch(cfg.max_components, grid.in_mask_count())).min(grid.in_mask_count())))
        }
    };
    let metadata = ModelMetadata {
        format_version: FORMAT_VERSION,
        h_mean: to_data(&h.mean),
        h_cov: to_data(&h.cov),
        h_noise: to_data(&h.noise),
        fve_threshold: cfg.fve_threshold,
        eigensolver,
        sketch,
        seed: cfg.seed,
        score_method: method,
        domain_map: map.clone(),
        total_variance: eig_data.total_variance,
        extra: BTreeMap::new(),
    };
    let model = FpcaModel {
        mean: SurfaceEstimate { grid: data_grid, ..s.mean },
        eig: eig_data,
        sigma2,
        sample_ids: ds.samples().iter().map(|s| s.id.clone()).collect(),
        scores: scores.into_iter().map(|r| r.into_iter().map(|a| a * vol.sqrt()).collect()).collect(),
        metadata,
    };
    model.check()?;
    let all_eigenvalues = full.eigenvalues.iter().map(|v| v * vol).collect();
    Ok(FitOutput { model, report: FitReport { timings, traces, all_eigenvalues, score_method: method } })
}

/// Covariance surface on the unit-cube grid with bandwidths resolved as in [`fit`].
pub fn covariance_surface(ds: &FunctionalDataset, cfg: &FitConfig, mask: Option<Vec<bool>>) -> Result<SurfaceEstimate> {
    cfg.validate()?;
    let (unit, map) = ds.normalize_domain().map_err(|e| e.at_stage("normalize"))?;
    let grid = unit_grid(&cfg.nodes_for(ds.dim())?, mask).map_err(|e| e.at_stage("grid"))?;
    let mut traces = BTreeMap::new();
    let mean = resolve_bandwidth(&cfg.h_mean, CvTarget::Mean, &unit, &grid, &map, cfg, &mut traces, "mean")
        .map_err(|e| e.at_stage("bandwidth"))?;
    let cov = resolve_bandwidth(&cfg.h_cov, CvTarget::Covariance, &unit, &grid, &map, cfg, &mut traces, "covariance")
        .map_err(|e| e.at_stage("bandwidth"))?;
    let h = Bandwidths { noise: mean.clone(), mean, cov };
    match smooth(&unit, &grid, &h, cfg)?.cov {
        Covariance::Dense(c) => Ok(c),
        Covariance::Streaming { .. } => Err(FpcaError::Precondition("the covariance exceeds the memory budget".into()).at_stage("covariance")),
    }
}
