//! Text formats: long-format observations, grids, flattened arrays, model bundles, traces.
//!
//! Flattened arrays are row-major with the last axis varying fastest; masked-out entries are
//! written as `nan`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bandwidth::TraceRecord;
use crate::dataset::{FunctionalDataset, Sample};
use crate::eigen::EigenSystem;
use crate::error::{FpcaError, Result};
use crate::grid::EvaluationGrid;
use crate::pipeline::{FitConfig, FORMAT_VERSION};
use crate::scores::{FpcaModel, ModelMetadata};
use crate::surface::{SurfaceEstimate, SurfaceKind};

pub const GRID_FILE: &str = "grid.csv";
pub const MEAN_FILE: &str = "mean.txt";
pub const EIGEN_MANIFEST: &str = "eigen.csv";
pub const SCORES_FILE: &str = "scores.csv";
pub const MODEL_FILE: &str = "model.json";
pub const CONFIG_FILE: &str = "config.toml";

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| FpcaError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| FpcaError::io(path, e))
}

fn detect_delimiter(header: &str) -> u8 {
    if header.contains('\t') {
        b'\t'
    } else if header.contains(';') && !header.contains(',') {
        b';'
    } else {
        b','
    }
}

fn parse_f64(field: &str, source: &str, line: usize, what: &str) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| FpcaError::parse(source, line, format!("{what}: '{field}' is not a number")))
}

/// Axis names from the header of an observation file.
pub fn observation_axes(text: &str) -> Vec<String> {
    let header = text.lines().next().unwrap_or("");
    let delim = detect_delimiter(header) as char;
    let f: Vec<&str> = header.split(delim).map(str::trim).collect();
    if f.len() < 3 {
        return Vec::new();
    }
    f[1..f.len() - 1].iter().map(|s| s.to_string()).collect()
}

/// Parses long-format records `sample_id, t_1 .. t_d, y` under a header naming the axes.
/// Records of one sample need not be contiguous; samples keep first-appearance order.
pub fn parse_observations(text: &str, source: &str) -> Result<FunctionalDataset> {
    let header = text.lines().next().ok_or_else(|| FpcaError::parse(source, 1, "empty file, expected a header"))?;
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(detect_delimiter(header))
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(text.as_bytes());
    let width = rdr.headers().map_err(|e| FpcaError::parse(source, 1, e.to_string()))?.len();
    if width < 3 {
        return Err(FpcaError::parse(source, 1, "header needs sample_id, at least one axis and y"));
    }
    let d = width - 2;
    let mut order: Vec<String> = Vec::new();
    let mut index = std::collections::HashMap::new();
    let mut coords: Vec<Vec<f64>> = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            FpcaError::parse(source, line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() != width {
            return Err(FpcaError::parse(source, line, format!("expected {width} fields, found {}", rec.len())));
        }
        let id = &rec[0];
        if id.is_empty() {
            return Err(FpcaError::parse(source, line, "empty sample id"));
        }
        let slot = *index.entry(id.to_string()).or_insert_with(|| {
            order.push(id.to_string());
            coords.push(Vec::new());
            values.push(Vec::new());
            order.len() - 1
        });
        for k in 0..d {
            let v = parse_f64(&rec[k + 1], source, line, "coordinate")?;
            if !v.is_finite() {
                return Err(FpcaError::parse(source, line, "coordinates must be finite"));
            }
            coords[slot].push(v);
        }
        let y = parse_f64(&rec[width - 1], source, line, "value")?;
        if !y.is_finite() {
            return Err(FpcaError::parse(source, line, "values must be finite"));
        }
        values[slot].push(y);
    }
    if order.is_empty() {
        return Err(FpcaError::parse(source, 2, "no observations"));
    }
    let samples = order.into_iter().zip(coords).zip(values).map(|((id, c), v)| Sample::new(id, c, v)).collect();
    FunctionalDataset::new(d, samples)
}

pub fn read_observations(path: &Path) -> Result<FunctionalDataset> {
    parse_observations(&read_text(path)?, &path.display().to_string())
}

pub fn format_observations(ds: &FunctionalDataset, axes: &[String]) -> String {
    let d = ds.dim();
    let mut out = String::from("sample_id");
    for k in 0..d {
        out.push(',');
        out.push_str(axes.get(k).map(String::as_str).unwrap_or(&format!("t{}", k + 1)));
    }
    out.push_str(",y\n");
    for s in ds.samples() {
        for j in 0..s.len() {
            out.push_str(&s.id);
            for x in s.coord(j, d) {
                let _ = write!(out, ",{x}");
            }
            let _ = writeln!(out, ",{}", s.values()[j]);
        }
    }
    out
}

pub fn default_axes(d: usize) -> Vec<String> {
    (1..=d).map(|k| format!("t{k}")).collect()
}

/// Lines `axis,x0,x1,..` per axis and an optional `mask,b0,b1,..` of `0`/`1`.
pub fn format_grid(grid: &EvaluationGrid) -> String {
    let mut out = String::new();
    for a in grid.axes() {
        out.push_str("axis");
        for x in a {
            let _ = write!(out, ",{x}");
        }
        out.push('\n');
    }
    if let Some(m) = grid.mask() {
        out.push_str("mask");
        for &b in m {
            out.push_str(if b { ",1" } else { ",0" });
        }
        out.push('\n');
    }
    out
}

pub fn parse_grid(text: &str, source: &str) -> Result<EvaluationGrid> {
    let mut axes = Vec::new();
    let mut mask = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        match fields.next() {
            Some("axis") => {
                if mask.is_some() {
                    return Err(FpcaError::parse(source, line_no, "axis after mask"));
                }
                axes.push(fields.map(|f| parse_f64(f, source, line_no, "node")).collect::<Result<Vec<_>>>()?);
            }
            Some("mask") => {
                if mask.is_some() {
                    return Err(FpcaError::parse(source, line_no, "second mask"));
                }
                mask = Some(
                    fields
                        .map(|f| match f {
                            "1" => Ok(true),
                            "0" => Ok(false),
                            _ => Err(FpcaError::parse(source, line_no, format!("mask entry '{f}' is not 0 or 1"))),
                        })
                        .collect::<Result<Vec<_>>>()?,
                );
            }
            Some(tag) => return Err(FpcaError::parse(source, line_no, format!("unknown record '{tag}'"))),
            None => {}
        }
    }
    if axes.is_empty() {
        return Err(FpcaError::parse(source, 1, "no axis records"));
    }
    EvaluationGrid::new(axes, mask)
}

/// A mask alone: `0`/`1` entries separated by commas or whitespace.
pub fn parse_mask(text: &str, source: &str) -> Result<Vec<bool>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        for f in line.split(|c: char| c == ',' || c.is_whitespace()).filter(|f| !f.is_empty()) {
            match f {
                "1" | "true" => out.push(true),
                "0" | "false" => out.push(false),
                _ => return Err(FpcaError::parse(source, i + 1, format!("mask entry '{f}' is not 0 or 1"))),
            }
        }
    }
    if out.is_empty() {
        return Err(FpcaError::parse(source, 1, "empty mask"));
    }
    Ok(out)
}

/// One value per line; non-finite entries as `nan`.
pub fn format_array(values: &[f64]) -> String {
    let mut out = String::with_capacity(values.len() * 20);
    for v in values {
        if v.is_nan() {
            out.push_str("nan\n");
        } else {
            let _ = writeln!(out, "{v}");
        }
    }
    out
}

pub fn parse_array(text: &str, source: &str) -> Result<Vec<f64>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_f64(l, source, i + 1, "array entry"))
        .collect()
}

/// One manifest row per retained component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenRecord {
    pub component: usize,
    pub eigenvalue: f64,
    pub fve: f64,
    pub file: String,
}

pub fn eigen_file(component: usize) -> String {
    format!("phi_{component:03}.txt")
}

pub fn format_eigen_manifest(eig: &EigenSystem) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for l in 0..eig.len() {
        w.serialize(EigenRecord { component: l + 1, eigenvalue: eig.eigenvalues[l], fve: eig.fve[l], file: eigen_file(l + 1) })
            .map_err(|e| FpcaError::parse(EIGEN_MANIFEST, l + 2, e.to_string()))?;
    }
    Ok(String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8"))
}

pub fn parse_eigen_manifest(text: &str, source: &str) -> Result<Vec<EigenRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut out: Vec<EigenRecord> = Vec::new();
    for rec in rdr.deserialize::<EigenRecord>() {
        let r = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            FpcaError::parse(source, line, e.to_string())
        })?;
        let line = out.len() + 2;
        if r.component != out.len() + 1 {
            return Err(FpcaError::parse(source, line, "components must be numbered 1, 2, .. in order"));
        }
        if !(r.eigenvalue > 0.0) || !r.eigenvalue.is_finite() || !(r.fve > 0.0 && r.fve <= 1.0 + 1e-9) {
            return Err(FpcaError::parse(source, line, "eigenvalue must be positive and fve in (0, 1]"));
        }
        if r.file.is_empty() || r.file.contains(['/', '\\']) || r.file.starts_with('.') {
            return Err(FpcaError::parse(source, line, "component file must be a plain file name"));
        }
        out.push(r);
    }
    Ok(out)
}

pub fn format_scores(ids: &[String], scores: &[Vec<f64>]) -> String {
    let l = scores.first().map_or(0, Vec::len);
    let mut out = String::from("sample_id");
    for k in 1..=l {
        let _ = write!(out, ",A_{k}");
    }
    out.push('\n');
    for (id, row) in ids.iter().zip(scores) {
        out.push_str(id);
        for a in row {
            let _ = write!(out, ",{a}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_scores(text: &str, source: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let width = rdr.headers().map_err(|e| FpcaError::parse(source, 1, e.to_string()))?.len();
    if width == 0 {
        return Err(FpcaError::parse(source, 1, "missing header"));
    }
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| FpcaError::parse(source, e.position().map(|p| p.line() as usize).unwrap_or(0), e.to_string()))?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        ids.push(rec[0].to_string());
        rows.push(rec.iter().skip(1).map(|f| parse_f64(f, source, line, "score")).collect::<Result<Vec<_>>>()?);
    }
    Ok((ids, rows))
}

pub fn format_trace(trace: &[TraceRecord]) -> String {
    let d = trace.first().map_or(0, |t| t.point.len());
    let mut out = String::from("iteration");
    for k in 1..=d {
        let _ = write!(out, ",h_{k}");
    }
    out.push_str(",objective,radius,accepted,best_so_far\n");
    for t in trace {
        let _ = write!(out, "{}", t.iteration);
        for h in &t.point {
            let _ = write!(out, ",{h}");
        }
        let _ = writeln!(out, ",{},{},{},{}", t.objective, t.radius, t.accepted, t.best_so_far);
    }
    out
}

pub fn parse_trace(text: &str, source: &str) -> Result<Vec<TraceRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let width = rdr.headers().map_err(|e| FpcaError::parse(source, 1, e.to_string()))?.len();
    if width < 6 {
        return Err(FpcaError::parse(source, 1, "trace needs iteration, bandwidths, objective, radius, accepted, best_so_far"));
    }
    let d = width - 5;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| FpcaError::parse(source, e.position().map(|p| p.line() as usize).unwrap_or(0), e.to_string()))?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let num = |i: usize, what| parse_f64(&rec[i], source, line, what);
        let iteration = rec[0].parse().map_err(|_| FpcaError::parse(source, line, "iteration is not an integer"))?;
        let point = (1..=d).map(|i| num(i, "bandwidth")).collect::<Result<Vec<_>>>()?;
        let accepted = match &rec[d + 3] {
            "true" => true,
            "false" => false,
            f => return Err(FpcaError::parse(source, line, format!("accepted flag '{f}'"))),
        };
        out.push(TraceRecord { iteration, point, objective: num(d + 1, "objective")?, radius: num(d + 2, "radius")?, accepted, best_so_far: num(d + 4, "best")? });
    }
    Ok(out)
}

/// The model file: metadata plus the scalars not stored as arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub metadata: ModelMetadata,
    pub sigma2: f64,
    pub n_components: usize,
    pub n_samples: usize,
}

pub fn parse_model_file(text: &str, source: &str) -> Result<ModelFile> {
    let m: ModelFile = serde_json::from_str(text).map_err(|e| FpcaError::parse(source, e.line(), e.to_string()))?;
    if m.metadata.format_version != FORMAT_VERSION {
        return Err(FpcaError::VersionMismatch { found: m.metadata.format_version, expected: FORMAT_VERSION });
    }
    if !(m.sigma2 >= 0.0) || !m.sigma2.is_finite() {
        return Err(FpcaError::parse(source, 1, "sigma2 must be a finite nonnegative number"));
    }
    Ok(m)
}

pub fn parse_config(text: &str, source: &str) -> Result<FitConfig> {
    let cfg: FitConfig = toml::from_str(text).map_err(|e| {
        let line = e.span().map(|s| text[..s.start.min(text.len())].lines().count().max(1)).unwrap_or(1);
        FpcaError::parse(source, line, e.message().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn format_config(cfg: &FitConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| FpcaError::Config(e.to_string()))
}

/// Writes the model bundle into `dir`, creating it when missing.
pub fn write_bundle(dir: &Path, model: &FpcaModel, cfg: Option<&FitConfig>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| FpcaError::io(dir, e))?;
    write_text(&dir.join(GRID_FILE), &format_grid(model.grid()))?;
    write_text(&dir.join(MEAN_FILE), &format_array(&model.mean.values))?;
    for l in 0..model.n_components() {
        write_text(&dir.join(eigen_file(l + 1)), &format_array(&model.eig.eigenfunctions[l]))?;
    }
    write_text(&dir.join(EIGEN_MANIFEST), &format_eigen_manifest(&model.eig)?)?;
    write_text(&dir.join(SCORES_FILE), &format_scores(&model.sample_ids, &model.scores))?;
    let file = ModelFile {
        metadata: model.metadata.clone(),
        sigma2: model.sigma2,
        n_components: model.n_components(),
        n_samples: model.sample_ids.len(),
    };
    let json = serde_json::to_string_pretty(&file).map_err(|e| FpcaError::Config(e.to_string()))?;
    write_text(&dir.join(MODEL_FILE), &(json + "\n"))?;
    if let Some(cfg) = cfg {
        write_text(&dir.join(CONFIG_FILE), &format_config(cfg)?)?;
    }
    Ok(())
}

pub fn read_bundle(dir: &Path) -> Result<FpcaModel> {
    let path = |f: &str| dir.join(f);
    let src = |f: &str| path(f).display().to_string();
    let file = parse_model_file(&read_text(&path(MODEL_FILE))?, &src(MODEL_FILE))?;
    let grid = parse_grid(&read_text(&path(GRID_FILE))?, &src(GRID_FILE))?;
    let sized = |f: &str| -> Result<Vec<f64>> {
        let v = parse_array(&read_text(&path(f))?, &src(f))?;
        if v.len() != grid.len() {
            return Err(FpcaError::parse(src(f), v.len(), format!("expected {} entries", grid.len())));
        }
        Ok(v)
    };
    let mean = SurfaceEstimate::new(grid.clone(), SurfaceKind::Mean, sized(MEAN_FILE)?)?;
    let manifest = parse_eigen_manifest(&read_text(&path(EIGEN_MANIFEST))?, &src(EIGEN_MANIFEST))?;
    if manifest.len() != file.n_components {
        return Err(FpcaError::parse(src(EIGEN_MANIFEST), manifest.len() + 1, "component count disagrees with the model file"));
    }
    let eigenfunctions = manifest.iter().map(|r| sized(&r.file)).collect::<Result<Vec<_>>>()?;
    let eig = EigenSystem {
        grid,
        eigenvalues: manifest.iter().map(|r| r.eigenvalue).collect(),
        eigenfunctions,
        fve: manifest.iter().map(|r| r.fve).collect(),
        total_variance: file.metadata.total_variance,
    };
    let (sample_ids, scores) = parse_scores(&read_text(&path(SCORES_FILE))?, &src(SCORES_FILE))?;
    let model = FpcaModel { mean, eig, sigma2: file.sigma2, sample_ids, scores, metadata: file.metadata };
    model.check()?;
    Ok(model)
}
