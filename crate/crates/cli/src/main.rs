use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dfpca::bandwidth::{optimize_bandwidth, rule_of_thumb, CvObjective, CvTarget, TrustRegionConfig};
use dfpca::eigen::{default_sketch, dense_eig, matrixize, randomized_eig, residuals};
use dfpca::io;
use dfpca::pipeline::{covariance_surface, fit, unit_grid, BandwidthChoice, Eigensolver, FitConfig, SmootherPath};
use dfpca::scores::{holdout_prediction_error, pace_scores, reconstruct_at, HoldoutMode, ScoreMethod};
use dfpca::simulate::{fit_errors, generate, SimSpec};
use dfpca::{FpcaError, FunctionalDataset};
use serde_json::json;

#[derive(Parser)]
#[command(name = "dfpca", version, about = "Multi-dimensional functional principal component analysis")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit a model and write its bundle.
    Fit(FitArgs),
    /// Score samples against a fitted model and predict at coordinates.
    Predict(PredictArgs),
    /// Generate simulated datasets, optionally fitting each replicate.
    Simulate(SimArgs),
    /// Run the bandwidth search alone and write its trace.
    Bandwidth(BandwidthArgs),
    /// Compare dense and randomized eigenpairs with residual diagnostics.
    EigDiag(EigDiagArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    Dense,
    Randomized,
}

#[derive(Clone, Copy, ValueEnum)]
enum SmootherArg {
    Fft,
    Direct,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoreArg {
    Auto,
    Pace,
    Integration,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML configuration; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Mask file of 0/1 entries over the grid, last axis fastest.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Grid nodes per axis (one value for all axes, or one per axis).
    #[arg(long, value_delimiter = ',')]
    nodes: Option<Vec<usize>>,
    /// Mean bandwidth: `auto` or per-axis values in data units.
    #[arg(long)]
    h_mean: Option<String>,
    #[arg(long)]
    h_cov: Option<String>,
    #[arg(long)]
    h_noise: Option<String>,
    /// Multiplier applied to every cross-validated bandwidth.
    #[arg(long)]
    h_multiplier: Option<f64>,
    #[arg(long)]
    fve: Option<f64>,
    #[arg(long)]
    max_components: Option<usize>,
    #[arg(long, value_enum)]
    eigensolver: Option<SolverArg>,
    /// Sketch size of the randomized eigensolver.
    #[arg(long)]
    sketch: Option<usize>,
    #[arg(long, value_enum)]
    smoother: Option<SmootherArg>,
    /// Blocks per axis for the FFT smoother.
    #[arg(long, value_delimiter = ',')]
    blocks: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    score_method: Option<ScoreArg>,
    #[arg(long)]
    seed: Option<u64>,
    /// Objective evaluations per bandwidth search.
    #[arg(long)]
    cv_budget: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<FitConfig, FpcaError> {
        let mut cfg = match &self.config {
            Some(p) => io::parse_config(&read(p)?, &p.display().to_string())?,
            None => FitConfig::default(),
        };
        if let Some(n) = &self.nodes {
            cfg.nodes = n.clone();
        }
        for (flag, slot) in [(&self.h_mean, &mut cfg.h_mean), (&self.h_cov, &mut cfg.h_cov), (&self.h_noise, &mut cfg.h_noise)] {
            if let Some(v) = flag {
                *slot = parse_bandwidth(v)?;
            }
        }
        if let Some(m) = self.h_multiplier {
            for slot in [&mut cfg.h_mean, &mut cfg.h_cov, &mut cfg.h_noise] {
                if let BandwidthChoice::Auto { multiplier } = slot {
                    *multiplier = m;
                }
            }
        }
        if let Some(v) = self.fve {
            cfg.fve_threshold = v;
        }
        if let Some(v) = self.max_components {
            cfg.max_components = v;
        }
        match (self.eigensolver, self.sketch) {
            (Some(SolverArg::Dense), _) => cfg.eigensolver = Eigensolver::Dense,
            (Some(SolverArg::Randomized), q) => cfg.eigensolver = Eigensolver::Randomized { q },
            (None, Some(q)) => cfg.eigensolver = Eigensolver::Randomized { q: Some(q) },
            (None, None) => {}
        }
        if let Some(s) = self.smoother {
            cfg.smoother = match s {
                SmootherArg::Fft => SmootherPath::Fft,
                SmootherArg::Direct => SmootherPath::Direct,
            };
        }
        if let Some(b) = &self.blocks {
            cfg.blocks = b.clone();
        }
        if let Some(s) = self.score_method {
            cfg.score_method = match s {
                ScoreArg::Auto => ScoreMethod::Auto,
                ScoreArg::Pace => ScoreMethod::Pace,
                ScoreArg::Integration => ScoreMethod::Integration,
            };
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(b) = self.cv_budget {
            cfg.cv_budget = b;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn mask(&self) -> Result<Option<Vec<bool>>, FpcaError> {
        self.mask.as_ref().map(|p| io::parse_mask(&read(p)?, &p.display().to_string())).transpose()
    }
}

fn parse_bandwidth(v: &str) -> Result<BandwidthChoice, FpcaError> {
    if v.eq_ignore_ascii_case("auto") {
        return Ok(BandwidthChoice::Auto { multiplier: 1.0 });
    }
    let values = v
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| FpcaError::Config(format!("bandwidth '{v}' is neither auto nor numbers"))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(BandwidthChoice::Fixed { values })
}

#[derive(Args)]
struct FitArgs {
    /// Long-format observations.
    #[arg(long)]
    input: PathBuf,
    /// Output bundle directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Observations used to score each sample.
    #[arg(long)]
    input: PathBuf,
    /// Coordinates to predict at, as `sample_id, t_1 .. t_d[, y]`; defaults to the input points.
    #[arg(long)]
    query: Option<PathBuf>,
    /// Score every sample from its observations even when the model holds stored scores.
    #[arg(long)]
    rescore: bool,
    /// Leave-one-location-out squared prediction error over the input locations instead.
    #[arg(long)]
    holdout: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SimModelArg {
    Sim1,
    Sim2,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long, value_enum)]
    model: SimModelArg,
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Points per curve for sim1.
    #[arg(long, default_value_t = 1000)]
    points: usize,
    /// Nodes per axis of the sim2 design.
    #[arg(long, default_value_t = 16)]
    grid: usize,
    /// Uniform random points per sample instead of the grid design.
    #[arg(long)]
    random_points: Option<usize>,
    #[arg(long, default_value_t = 1)]
    runs: usize,
    /// Fit every replicate and write a summary table.
    #[arg(long)]
    fit: bool,
    /// Cross-validate bandwidths on the first replicate only and reuse them for the rest.
    #[arg(long)]
    select_once: bool,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Mean,
    Covariance,
    Noise,
}

#[derive(Args)]
struct BandwidthArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "mean")]
    target: TargetArg,
    #[arg(long, default_value_t = 20)]
    budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Grid nodes per axis for the binned scheme.
    #[arg(long, value_delimiter = ',')]
    nodes: Option<Vec<usize>>,
    /// Trace output (CSV).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EigDiagArgs {
    #[arg(long)]
    input: PathBuf,
    /// Components compared.
    #[arg(long, default_value_t = 5)]
    components: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

fn read(path: &Path) -> Result<String, FpcaError> {
    fs::read_to_string(path).map_err(|e| FpcaError::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<(), FpcaError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| FpcaError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| FpcaError::io(path, e))
}

fn cmd_fit(a: &FitArgs) -> Result<(), FpcaError> {
    let cfg = a.cfg.resolve()?;
    let ds = io::read_observations(&a.input)?;
    let out = fit(&ds, &cfg, a.cfg.mask()?)?;
    io::write_bundle(&a.out, &out.model, Some(&cfg))?;
    for (name, trace) in &out.report.traces {
        write(&a.out.join(format!("trace_{name}.csv")), &io::format_trace(trace))?;
    }
    let m = &out.model;
    let report = json!({
        "n_samples": m.sample_ids.len(),
        "n_components": m.n_components(),
        "eigenvalues": m.eig.eigenvalues,
        "fve": m.eig.fve,
        "all_eigenvalues": out.report.all_eigenvalues,
        "sigma2": m.sigma2,
        "h_mean": m.metadata.h_mean,
        "h_cov": m.metadata.h_cov,
        "h_noise": m.metadata.h_noise,
        "score_method": out.report.score_method,
        "timings": out.report.timings,
    });
    write(&a.out.join("report.json"), &(serde_json::to_string_pretty(&report).expect("json") + "\n"))?;
    println!("samples      {}", m.sample_ids.len());
    println!("components   {} (fve threshold {})", m.n_components(), cfg.fve_threshold);
    for (l, (v, f)) in m.eig.eigenvalues.iter().zip(&m.eig.fve).enumerate() {
        println!("  lambda_{}   {v:.6}  fve {f:.4}", l + 1);
    }
    println!("sigma2       {:.6}", m.sigma2);
    let t = &out.report.timings;
    println!("time [s]     bandwidth {:.2}  smoothing {:.2}  eigen {:.2}  scoring {:.2}", t.bandwidth, t.smoothing, t.eigen, t.scoring);
    Ok(())
}

/// Query points per sample id, with optional observed values.
fn read_query(path: &Path, d: usize) -> Result<Vec<(String, Vec<f64>, Option<f64>)>, FpcaError> {
    let text = read(path)?;
    let src = path.display().to_string();
    let mut out = Vec::new();
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
    let (_, header) = lines.next().ok_or_else(|| FpcaError::parse(&src, 1, "empty query file"))?;
    let width = header.split(',').count();
    if width != d + 1 && width != d + 2 {
        return Err(FpcaError::parse(&src, 1, format!("expected sample_id, {d} coordinate(s) and an optional y")));
    }
    for (i, line) in lines {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != width {
            return Err(FpcaError::parse(&src, i + 1, format!("expected {width} fields")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| FpcaError::parse(&src, i + 1, format!("'{s}' is not a number")));
        let x = f[1..=d].iter().map(|s| num(s)).collect::<Result<Vec<_>, _>>()?;
        let y = if width == d + 2 { Some(num(f[d + 1])?) } else { None };
        out.push((f[0].to_string(), x, y));
    }
    Ok(out)
}

fn cmd_predict(a: &PredictArgs) -> Result<(), FpcaError> {
    let model = io::read_bundle(&a.model)?;
    let ds: FunctionalDataset = io::read_observations(&a.input)?;
    let d = ds.dim();
    if d != model.grid().dim() {
        return Err(FpcaError::DimensionMismatch { expected: model.grid().dim(), found: d });
    }
    if a.holdout {
        let mut locations: Vec<Vec<f64>> = Vec::new();
        for s in ds.samples() {
            for j in 0..s.len() {
                let x = s.coord(j, d);
                if !locations.iter().any(|l| l.as_slice() == x) {
                    locations.push(x.to_vec());
                }
            }
        }
        let frozen = model.clone();
        let rep = holdout_prediction_error(&ds, &locations, HoldoutMode::Rescore, &|_| Ok(frozen.clone()))?;
        let mut text = String::from("location");
        for k in 1..=d {
            let _ = write!(text, ",t{k}");
        }
        text.push_str(",squared_error\n");
        for (i, (loc, e)) in locations.iter().zip(&rep.per_location).enumerate() {
            let _ = write!(text, "{}", i + 1);
            for x in loc {
                let _ = write!(text, ",{x}");
            }
            let _ = writeln!(text, ",{e}");
        }
        write(&a.out, &text)?;
        println!("locations {}  mean {:.4}  se {:.4}", locations.len(), rep.mean, rep.standard_error);
        return Ok(());
    }
    let mut scores = std::collections::HashMap::new();
    for s in ds.samples() {
        let a_i = match model.sample_position(&s.id).filter(|_| !a.rescore) {
            Some(i) => model.scores[i].clone(),
            None => pace_scores(s, d, &model.mean, &model.eig, model.sigma2)?,
        };
        scores.insert(s.id.clone(), a_i);
    }
    let query: Vec<(String, Vec<f64>, Option<f64>)> = match &a.query {
        Some(p) => read_query(p, d)?,
        None => ds
            .samples()
            .iter()
            .flat_map(|s| (0..s.len()).map(move |j| (s.id.clone(), s.coord(j, d).to_vec(), Some(s.values()[j]))))
            .collect(),
    };
    let with_truth = query.iter().all(|q| q.2.is_some());
    let mut text = String::from("sample_id");
    for k in 1..=d {
        let _ = write!(text, ",t{k}");
    }
    text.push_str(if with_truth { ",y_hat,y,squared_error\n" } else { ",y_hat\n" });
    let mut total = 0.0;
    for (id, x, y) in &query {
        let a_i = scores.get(id).ok_or_else(|| FpcaError::Precondition(format!("query sample '{id}' has no observations to score")))?;
        let pred = reconstruct_at(&model, a_i, x)?[0];
        let _ = write!(text, "{id}");
        for v in x {
            let _ = write!(text, ",{v}");
        }
        match y {
            Some(y) if with_truth => {
                total += (y - pred).powi(2);
                let _ = writeln!(text, ",{pred},{y},{}", (y - pred).powi(2));
            }
            _ => {
                let _ = writeln!(text, ",{pred}");
            }
        }
    }
    write(&a.out, &text)?;
    if with_truth {
        println!("predictions {}  total squared error {:.6}", query.len(), total);
    } else {
        println!("predictions {}", query.len());
    }
    Ok(())
}

fn cmd_simulate(a: &SimArgs) -> Result<(), FpcaError> {
    let seed = a.cfg.seed.unwrap_or(0);
    let mut spec = match a.model {
        SimModelArg::Sim1 => SimSpec { design: dfpca::simulate::Design::Grid(vec![a.points]), ..SimSpec::sim1(a.n, seed) },
        SimModelArg::Sim2 => SimSpec::sim2(a.n, a.grid, seed),
    };
    if let Some(k) = a.random_points {
        spec.design = dfpca::simulate::Design::Random(k);
    }
    let mut cfg = if a.fit { Some(a.cfg.resolve()?) } else { None };
    if let (Some(c), dfpca::simulate::Design::Grid(m)) = (&mut cfg, &spec.design) {
        // A fit grid finer than the design only adds cost.
        if c.nodes.is_empty() && m.iter().all(|&k| k < dfpca::pipeline::default_nodes(m.len())) {
            c.nodes = m.clone();
        }
    }
    let name = match a.model {
        SimModelArg::Sim1 => "sim1",
        SimModelArg::Sim2 => "sim2",
    };
    let design = match &spec.design {
        dfpca::simulate::Design::Grid(m) => json!({ "grid": m }),
        dfpca::simulate::Design::Random(k) => json!({ "random_points": k }),
    };
    let meta = json!({
        "model": name,
        "n": a.n,
        "runs": a.runs,
        "seed": seed,
        "design": design,
        "eigenvalues": spec.model.eigenvalues(),
        "noise_variance": spec.model.noise_variance(),
        "eigenfunction_rescale": spec.model.rescale(),
        "domain": spec.model.domain(),
    });
    write(&a.out.join("simulation.json"), &(serde_json::to_string_pretty(&meta).expect("json") + "\n"))?;
    let axes = io::default_axes(spec.model.dim());
    let mut summary = String::from("run,seconds,mise");
    for l in 1..=spec.model.n_components() {
        let _ = write!(summary, ",ise_{l}");
    }
    summary.push_str(",components,sigma2\n");
    let mut mises = Vec::new();
    for r in 0..a.runs {
        let rep = spec.replicate(r as u64);
        let (ds, truth) = generate(&rep)?;
        let suffix = if a.runs > 1 { format!("_r{:03}", r + 1) } else { String::new() };
        write(&a.out.join(format!("data{suffix}.csv")), &io::format_observations(&ds, &axes))?;
        let ids: Vec<String> = ds.samples().iter().map(|s| s.id.clone()).collect();
        write(&a.out.join(format!("truth_scores{suffix}.csv")), &io::format_scores(&ids, &truth.scores))?;
        if let Some(cfg) = &mut cfg {
            let t0 = Instant::now();
            let out = fit(&ds, &FitConfig { seed: cfg.seed.wrapping_add(r as u64), ..cfg.clone() }, None)?;
            if a.select_once && r == 0 {
                let m = &out.model.metadata;
                cfg.h_mean = BandwidthChoice::Fixed { values: m.h_mean.clone() };
                cfg.h_cov = BandwidthChoice::Fixed { values: m.h_cov.clone() };
                cfg.h_noise = BandwidthChoice::Fixed { values: m.h_noise.clone() };
            }
            let secs = t0.elapsed().as_secs_f64();
            let err = fit_errors(&out.model, &rep.model, &truth)?;
            let _ = write!(summary, "{},{secs:.3},{}", r + 1, err.mise);
            for l in 0..spec.model.n_components() {
                match err.ise.get(l) {
                    Some(v) => {
                        let _ = write!(summary, ",{v}");
                    }
                    None => summary.push(','),
                }
            }
            let _ = writeln!(summary, ",{},{}", out.model.n_components(), out.model.sigma2);
            mises.push(err.mise);
        }
    }
    if cfg.is_some() {
        write(&a.out.join("summary.csv"), &summary)?;
        let n = mises.len() as f64;
        let mean = mises.iter().sum::<f64>() / n;
        let sd = if n > 1.0 { (mises.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
        println!("runs {}  MISE {mean:.4} +- {sd:.4}", a.runs);
    } else {
        println!("wrote {} run(s) to {}", a.runs, a.out.display());
    }
    Ok(())
}

fn cmd_bandwidth(a: &BandwidthArgs) -> Result<(), FpcaError> {
    let ds = io::read_observations(&a.input)?;
    let (unit, map) = ds.normalize_domain()?;
    let d = ds.dim();
    let target = match a.target {
        TargetArg::Mean => CvTarget::Mean,
        TargetArg::Covariance => CvTarget::Covariance,
        TargetArg::Noise => CvTarget::DiagPlusNoise,
    };
    let nodes = FitConfig { nodes: a.nodes.clone().unwrap_or_default(), ..Default::default() }.nodes_for(d)?;
    let grid = unit_grid(&nodes, None)?;
    let obj = CvObjective::new(target, &unit, Some(&grid), dfpca::CvScheme::Auto, dfpca::bandwidth::DEFAULT_MAX_PAIRS, a.seed)?;
    let floor: Vec<f64> = (0..d).map(|k| obj.min_bandwidth()[k].max(2.0 * grid.spacing(k))).collect();
    let h0 = rule_of_thumb(&obj, &floor)?;
    let found = optimize_bandwidth(&obj, &h0, &TrustRegionConfig { budget: a.budget, seed: a.seed, ..Default::default() })?;
    let trace: Vec<_> = found
        .trace
        .into_iter()
        .map(|mut t| {
            for (k, h) in t.point.iter_mut().enumerate() {
                *h *= map.scale[k];
            }
            t
        })
        .collect();
    write(&a.out, &io::format_trace(&trace))?;
    let h: Vec<String> = found.bandwidth.values().iter().enumerate().map(|(k, h)| format!("{}", h * map.scale[k])).collect();
    println!("bandwidth {}  cv {:.6e}  evaluations {}", h.join(","), found.cv, trace.len());
    Ok(())
}

fn cmd_eig_diag(a: &EigDiagArgs) -> Result<(), FpcaError> {
    let cfg = a.cfg.resolve()?;
    let ds = io::read_observations(&a.input)?;
    let cov = covariance_surface(&ds, &cfg, a.cfg.mask()?)?;
    let s = matrixize(&cov)?;
    let l = a.components.min(s.dim()).max(1);
    let q = match cfg.eigensolver {
        Eigensolver::Randomized { q: Some(q) } => q.min(s.dim()),
        _ => default_sketch(l, s.dim()),
    };
    let rand = randomized_eig(&s, q, l, cfg.seed)?;
    let rres = residuals(&s, &rand)?;
    let dense = if s.dense().is_some() { Some(dense_eig(&s, l)?) } else { None };
    let dres = dense.as_ref().map(|e| residuals(&s, e)).transpose()?;
    let mut text = String::from("component,lambda_randomized,residual_randomized,lambda_dense,residual_dense,ise_gap\n");
    for k in 0..rand.len() {
        let _ = write!(text, "{},{},{}", k + 1, rand.eigenvalues[k], rres[k]);
        match (&dense, &dres) {
            (Some(e), Some(r)) if k < e.len() => {
                let gap = dfpca::simulate::ise(&cov.grid, &rand.eigenfunctions[k], &e.eigenfunctions[k]);
                let _ = writeln!(text, ",{},{},{gap}", e.eigenvalues[k], r[k]);
            }
            _ => text.push_str(",,,\n"),
        }
    }
    match &a.out {
        Some(p) => write(p, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

/// Exit status per error class.
fn exit_code(e: &FpcaError) -> u8 {
    match e.root() {
        FpcaError::Parse { .. } | FpcaError::Io { .. } | FpcaError::InvalidDataset(_) => 3,
        FpcaError::Config(_) | FpcaError::InvalidSpec(_) | FpcaError::Precondition(_) | FpcaError::DimensionMismatch { .. } => 4,
        FpcaError::VersionMismatch { .. } => 5,
        FpcaError::OutOfDomain { .. } | FpcaError::ObservationOutsideGrid { .. } => 6,
        FpcaError::AllWeightsZero { .. } | FpcaError::BandwidthTooSmall { .. } | FpcaError::NoPairs | FpcaError::InvalidBandwidth(_) => 7,
        FpcaError::EigFailure(_) | FpcaError::SketchTooSmall { .. } | FpcaError::SingularCovariance { .. } => 8,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let res = match &cli.cmd {
        Cmd::Fit(a) => cmd_fit(a),
        Cmd::Predict(a) => cmd_predict(a),
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::Bandwidth(a) => cmd_bandwidth(a),
        Cmd::EigDiag(a) => cmd_eig_diag(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
