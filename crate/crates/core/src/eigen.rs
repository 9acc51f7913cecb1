//! Matrixized covariance operators and their eigendecomposition under the Riemann inner product.

use std::sync::Arc;

use faer::{Mat, Side};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{FpcaError, Result};
use crate::fft::{BlockPlan, CovarianceEngine, IndexBox};
use crate::grid::EvaluationGrid;
use crate::surface::{SurfaceEstimate, SurfaceKind, OUTSIDE};

/// Dense matrices above this many bytes go through a block provider.
pub const DEFAULT_MEMORY_BUDGET: usize = 2 << 30;
/// Rows and columns per tile of a stored block provider.
pub const DEFAULT_TILE: usize = 512;
/// Eigenvalues at or below this fraction of the largest are numerical zeros.
pub const EIGEN_REL_TOL: f64 = 1e-10;

/// Row or column block of matrix indices paired with the grid nodes they came from.
#[derive(Debug, Clone)]
pub struct StoredBlock {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    /// Row-major `rows.len() x cols.len()`.
    pub data: Vec<f64>,
}

/// Blocks of a covariance matrix kept in memory, multiplied tile by tile.
#[derive(Debug, Clone)]
pub struct BlockStore {
    blocks: Vec<StoredBlock>,
}

impl BlockStore {
    pub fn new(blocks: Vec<StoredBlock>) -> Self {
        BlockStore { blocks }
    }

    pub fn blocks(&self) -> &[StoredBlock] {
        &self.blocks
    }
}

/// Computes covariance blocks on demand from the binned data; nothing `M x M` is ever held.
pub struct StreamingCovariance {
    engine: Arc<CovarianceEngine>,
    plan: BlockPlan,
}

impl StreamingCovariance {
    pub fn new(engine: Arc<CovarianceEngine>, plan: BlockPlan) -> Result<Self> {
        let g = engine.grid();
        let mut shape = g.shape().to_vec();
        shape.extend_from_slice(g.shape());
        let mut radius = engine.radius().to_vec();
        radius.extend_from_slice(engine.radius());
        plan.validate(&shape, &radius)?;
        Ok(StreamingCovariance { engine, plan })
    }
}

pub enum Provider {
    Dense(Mat<f64>),
    Blocked(BlockStore),
    Streaming(StreamingCovariance),
}

/// The covariance surface reshaped to an `M x M` matrix over in-mask nodes.
pub struct MatrixizedCovariance {
    grid: EvaluationGrid,
    /// Grid index of each matrix row, in row-major node order.
    node_index: Vec<usize>,
    provider: Provider,
}

impl MatrixizedCovariance {
    pub fn dim(&self) -> usize {
        self.node_index.len()
    }

    pub fn grid(&self) -> &EvaluationGrid {
        &self.grid
    }

    pub fn node_index(&self) -> &[usize] {
        &self.node_index
    }

    pub fn provider(&self) -> &Provider {
        &self.provider
    }

    pub fn dense(&self) -> Option<&Mat<f64>> {
        match &self.provider {
            Provider::Dense(m) => Some(m),
            _ => None,
        }
    }

    /// Wraps a streaming provider; the grid and mask come from the engine.
    pub fn streaming(source: StreamingCovariance) -> Self {
        let grid = source.engine.grid().clone();
        let node_index = grid.in_mask_indices();
        MatrixizedCovariance { grid, node_index, provider: Provider::Streaming(source) }
    }

    /// `Sigma * v` for a tall `M x k` matrix.
    pub fn apply(&self, v: &Mat<f64>) -> Result<Mat<f64>> {
        let m = self.dim();
        if v.nrows() != m {
            return Err(FpcaError::DimensionMismatch { expected: m, found: v.nrows() });
        }
        match &self.provider {
            Provider::Dense(s) => Ok(s * v),
            Provider::Blocked(store) => Ok(apply_blocks(&store.blocks, v, m)),
            Provider::Streaming(src) => self.apply_streaming(src, v),
        }
    }

    fn apply_streaming(&self, src: &StreamingCovariance, v: &Mat<f64>) -> Result<Mat<f64>> {
        let g = &self.grid;
        let d = g.dim();
        let mut position = vec![usize::MAX; g.len()];
        for (i, &n) in self.node_index.iter().enumerate() {
            position[n] = i;
        }
        let halo = src.plan.halo();
        let mut out = Mat::zeros(self.dim(), v.ncols());
        for core in src.plan.cores() {
            let s_core = IndexBox { lo: core.lo[..d].to_vec(), hi: core.hi[..d].to_vec() };
            let t_core = IndexBox { lo: core.lo[d..].to_vec(), hi: core.hi[d..].to_vec() };
            let values = src.engine.compute_box(&s_core, &t_core, &halo[..d], &halo[d..])?;
            let s_idx = s_core.global_indices(g.shape());
            let t_idx = t_core.global_indices(g.shape());
            let (rows, rsel): (Vec<usize>, Vec<usize>) =
                s_idx.iter().enumerate().filter(|(_, &n)| position[n] != usize::MAX).map(|(a, &n)| (position[n], a)).unzip();
            let (cols, csel): (Vec<usize>, Vec<usize>) =
                t_idx.iter().enumerate().filter(|(_, &n)| position[n] != usize::MAX).map(|(b, &n)| (position[n], b)).unzip();
            let nt = t_idx.len();
            let mut data = Vec::with_capacity(rows.len() * cols.len());
            for &a in &rsel {
                for &b in &csel {
                    data.push(values[a * nt + b]);
                }
            }
            let block = StoredBlock { rows, cols, data };
            accumulate_block(&block, v, &mut out);
        }
        Ok(out)
    }
}

fn accumulate_block(block: &StoredBlock, v: &Mat<f64>, out: &mut Mat<f64>) {
    let nc = block.cols.len();
    let mut gathered = vec![0.0; nc];
    for j in 0..v.ncols() {
        let vj = v.col_as_slice(j);
        for (k, &c) in block.cols.iter().enumerate() {
            gathered[k] = vj[c];
        }
        let oj = out.col_as_slice_mut(j);
        for (i, &r) in block.rows.iter().enumerate() {
            let row = &block.data[i * nc..(i + 1) * nc];
            oj[r] += row.iter().zip(&gathered).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

fn apply_blocks(blocks: &[StoredBlock], v: &Mat<f64>, m: usize) -> Mat<f64> {
    // Group by row set so every output row is owned by one task and summed in block order.
    let mut groups: Vec<(&[usize], Vec<&StoredBlock>)> = Vec::new();
    for b in blocks {
        match groups.iter_mut().find(|(rows, _)| *rows == b.rows.as_slice()) {
            Some((_, list)) => list.push(b),
            None => groups.push((&b.rows, vec![b])),
        }
    }
    let partial: Vec<Mat<f64>> = groups
        .par_iter()
        .map(|(_, list)| {
            let mut out = Mat::zeros(m, v.ncols());
            for b in list {
                accumulate_block(b, v, &mut out);
            }
            out
        })
        .collect();
    let mut out = Mat::zeros(m, v.ncols());
    for (p, (rows, _)) in partial.iter().zip(&groups) {
        for j in 0..v.ncols() {
            let src = p.col_as_slice(j);
            let dst = out.col_as_slice_mut(j);
            for &r in rows.iter() {
                dst[r] += src[r];
            }
        }
    }
    out
}

/// Reshapes a covariance surface, dense when `M^2` doubles fit `budget` bytes.
pub fn matrixize(cov: &SurfaceEstimate) -> Result<MatrixizedCovariance> {
    matrixize_with_budget(cov, DEFAULT_MEMORY_BUDGET, DEFAULT_TILE)
}

pub fn matrixize_with_budget(cov: &SurfaceEstimate, budget: usize, tile: usize) -> Result<MatrixizedCovariance> {
    if cov.kind != SurfaceKind::Covariance {
        return Err(FpcaError::Precondition("matrixize needs a covariance surface".into()));
    }
    let grid = cov.grid.clone();
    let node_index = grid.in_mask_indices();
    let m = node_index.len();
    let full = grid.len();
    let entry = |i: usize, j: usize| cov.values[node_index[i] * full + node_index[j]];
    let provider = if m.saturating_mul(m).saturating_mul(8) <= budget {
        Provider::Dense(Mat::from_fn(m, m, entry))
    } else {
        let tile = tile.max(1);
        let mut blocks = Vec::new();
        for r0 in (0..m).step_by(tile) {
            let rows: Vec<usize> = (r0..(r0 + tile).min(m)).collect();
            for c0 in (0..m).step_by(tile) {
                let cols: Vec<usize> = (c0..(c0 + tile).min(m)).collect();
                let mut data = Vec::with_capacity(rows.len() * cols.len());
                for &i in &rows {
                    for &j in &cols {
                        data.push(entry(i, j));
                    }
                }
                blocks.push(StoredBlock { rows: rows.clone(), cols, data });
            }
        }
        Provider::Blocked(BlockStore::new(blocks))
    };
    Ok(MatrixizedCovariance { grid, node_index, provider })
}

/// Eigenpairs rescaled to the continuous problem: eigenfunctions have unit Riemann norm.
#[derive(Debug, Clone)]
pub struct EigenSystem {
    pub grid: EvaluationGrid,
    /// Positive, descending.
    pub eigenvalues: Vec<f64>,
    /// Full-grid arrays; masked-out nodes hold the outside sentinel.
    pub eigenfunctions: Vec<Vec<f64>>,
    /// Cumulative fraction of variation of the retained components.
    pub fve: Vec<f64>,
    /// Sum of every positive eigenvalue seen by the solver, the FVE denominator.
    pub total_variance: f64,
}

impl EigenSystem {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// Keeps the leading `l` components; the FVE denominator is unchanged.
    pub fn truncated(&self, l: usize) -> EigenSystem {
        let l = l.min(self.len());
        EigenSystem {
            grid: self.grid.clone(),
            eigenvalues: self.eigenvalues[..l].to_vec(),
            eigenfunctions: self.eigenfunctions[..l].to_vec(),
            fve: self.fve[..l].to_vec(),
            total_variance: self.total_variance,
        }
    }

    pub fn eigenfunction(&self, l: usize) -> SurfaceEstimate {
        SurfaceEstimate { grid: self.grid.clone(), kind: SurfaceKind::Mean, values: self.eigenfunctions[l].clone() }
    }
}

/// Builds the system from Euclidean-orthonormal vectors over in-mask nodes and eigenvalues of
/// the matrix (descending). `all_positive` is the sum of the matrix eigenvalues kept for FVE.
fn assemble(
    grid: &EvaluationGrid,
    node_index: &[usize],
    values: &[f64],
    vectors: &[Vec<f64>],
    l_max: usize,
) -> EigenSystem {
    let cv = grid.cell_volume();
    let top = values.first().copied().unwrap_or(0.0);
    let keep: Vec<usize> = (0..values.len()).filter(|&i| top > 0.0 && values[i] > EIGEN_REL_TOL * top).collect();
    let total: f64 = keep.iter().map(|&i| values[i] * cv).sum();
    let mut eigenvalues = Vec::new();
    let mut eigenfunctions = Vec::new();
    let mut fve = Vec::new();
    let mut acc = 0.0;
    for &i in keep.iter().take(l_max) {
        let lambda = values[i] * cv;
        let mut phi = vec![OUTSIDE; grid.len()];
        let s = 1.0 / cv.sqrt();
        for (k, &n) in node_index.iter().enumerate() {
            phi[n] = vectors[i][k] * s;
        }
        canonicalize_sign(grid, &mut phi);
        acc += lambda;
        eigenvalues.push(lambda);
        eigenfunctions.push(phi);
        fve.push(acc / total);
    }
    EigenSystem { grid: grid.clone(), eigenvalues, eigenfunctions, fve, total_variance: total }
}

/// Positive integral against one when that integral is not negligible, else a positive first
/// clearly nonzero in-mask value.
pub fn canonicalize_sign(grid: &EvaluationGrid, phi: &mut [f64]) {
    let integral = grid.integrate(phi);
    let scale = phi.iter().filter(|v| v.is_finite()).fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-8 * scale * grid.in_mask_volume();
    let flip = if integral.abs() > tol {
        integral < 0.0
    } else {
        phi.iter().find(|v| v.is_finite() && v.abs() > 1e-8 * scale).is_some_and(|&v| v < 0.0)
    };
    if flip {
        for v in phi.iter_mut() {
            if v.is_finite() {
                *v = -*v;
            }
        }
    }
}

fn symmetric_eig(a: &Mat<f64>) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = a.nrows();
    let sym = Mat::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]));
    let evd = sym.self_adjoint_eigen(Side::Lower).map_err(|e| FpcaError::EigFailure(format!("{e:?}")))?;
    let s = evd.S().column_vector();
    let u = evd.U();
    let mut values = Vec::with_capacity(n);
    let mut vectors = Vec::with_capacity(n);
    for k in (0..n).rev() {
        values.push(s[k]);
        vectors.push((0..n).map(|i| u[(i, k)]).collect());
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(FpcaError::EigFailure("non-finite eigenvalue".into()));
    }
    Ok((values, vectors))
}

/// Full symmetric eigendecomposition of a dense provider.
pub fn dense_eig(s: &MatrixizedCovariance, l_max: usize) -> Result<EigenSystem> {
    let a = s.dense().ok_or_else(|| FpcaError::Precondition("dense_eig needs a dense provider".into()))?;
    let (values, vectors) = symmetric_eig(a)?;
    Ok(assemble(&s.grid, &s.node_index, &values, &vectors, l_max))
}

/// Default sketch size: the larger of `2 L + 10` and 99, capped by `M`.
pub fn default_sketch(l_max: usize, m: usize) -> usize {
    (2 * l_max + 10).max(99).min(m)
}

/// Gaussian-sketch eigensolver. The sketch `Q` (entries `N(0, 1/q)`) is pushed through the
/// operator once to find its range; the compressed matrix is then formed on an orthonormal
/// basis of that range, so an operator of rank at most `q` is recovered exactly.
pub fn randomized_eig(s: &MatrixizedCovariance, q: usize, l_max: usize, seed: u64) -> Result<EigenSystem> {
    if q < l_max || q == 0 {
        return Err(FpcaError::SketchTooSmall { q, requested: l_max });
    }
    let m = s.dim();
    let q = q.min(m);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, (1.0 / q as f64).sqrt()).map_err(|e| FpcaError::InvalidSpec(e.to_string()))?;
    let mut sketch = Mat::zeros(m, q);
    for i in 0..m {
        for j in 0..q {
            sketch[(i, j)] = normal.sample(&mut rng);
        }
    }
    let y = s.apply(&sketch)?;
    let basis = orthonormal_columns(&y);
    if basis.ncols() == 0 {
        return Ok(assemble(&s.grid, &s.node_index, &[], &[], l_max));
    }
    let z = s.apply(&basis)?;
    let small = basis.transpose() * &z;
    let (values, small_vecs) = symmetric_eig(&small)?;
    let k = basis.ncols();
    let mut lifted: Vec<Vec<f64>> = small_vecs
        .iter()
        .map(|u| {
            let mut v = vec![0.0; m];
            for (c, &uc) in u.iter().enumerate().take(k) {
                let col = basis.col_as_slice(c);
                for i in 0..m {
                    v[i] += col[i] * uc;
                }
            }
            v
        })
        .collect();
    gram_schmidt(&mut lifted);
    Ok(assemble(&s.grid, &s.node_index, &values, &lifted, l_max))
}

/// Orthonormal basis of the column space, dropping directions below round-off.
fn orthonormal_columns(y: &Mat<f64>) -> Mat<f64> {
    let qr = y.qr();
    let r = qr.R();
    let qfull = qr.compute_thin_Q();
    let k = r.nrows().min(r.ncols());
    let rmax = (0..k).map(|i| r[(i, i)].abs()).fold(0.0f64, f64::max);
    let keep: Vec<usize> = (0..k).filter(|&i| rmax > 0.0 && r[(i, i)].abs() > 1e-12 * rmax).collect();
    Mat::from_fn(y.nrows(), keep.len(), |i, j| qfull[(i, keep[j])])
}

/// Modified Gram-Schmidt, twice, for orthonormality at round-off level.
fn gram_schmidt(vs: &mut [Vec<f64>]) {
    for _ in 0..2 {
        for i in 0..vs.len() {
            let (done, rest) = vs.split_at_mut(i);
            let v = &mut rest[0];
            for u in done.iter() {
                let c: f64 = u.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= c * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                v.iter_mut().for_each(|x| *x /= norm);
            }
        }
    }
}

/// Smallest `L` whose cumulative FVE reaches `threshold`, or every component when none does.
pub fn select_components_fve(eig: &EigenSystem, threshold: f64) -> Result<usize> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(FpcaError::Precondition(format!("FVE threshold {threshold} outside (0, 1]")));
    }
    // Tolerate accumulated rounding at the threshold itself.
    Ok(eig.fve.iter().position(|&f| f >= threshold - 1e-12).map_or(eig.len(), |i| i + 1))
}

/// Relative residual `||Sigma psi - lambda psi|| / lambda` of each eigenpair.
pub fn residuals(s: &MatrixizedCovariance, eig: &EigenSystem) -> Result<Vec<f64>> {
    let m = s.dim();
    let cv = s.grid.cell_volume();
    let l = eig.len();
    if l == 0 {
        return Ok(Vec::new());
    }
    let psi = Mat::from_fn(m, l, |i, k| eig.eigenfunctions[k][s.node_index[i]] * cv.sqrt());
    let img = s.apply(&psi)?;
    Ok((0..l)
        .map(|k| {
            let lam = eig.eigenvalues[k] / cv;
            let r: f64 = (0..m).map(|i| (img[(i, k)] - lam * psi[(i, k)]).powi(2)).sum();
            r.sqrt() / lam
        })
        .collect())
}

/// Riemann Gram matrix of the eigenfunctions; the identity up to round-off.
pub fn riemann_gram(eig: &EigenSystem) -> Vec<Vec<f64>> {
    let l = eig.len();
    (0..l)
        .map(|a| (0..l).map(|b| eig.grid.inner(&eig.eigenfunctions[a], &eig.eigenfunctions[b])).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cov_from(grid: &EvaluationGrid, f: impl Fn(&[f64], &[f64]) -> f64) -> SurfaceEstimate {
        let m = grid.len();
        let mut values = vec![0.0; m * m];
        for s in 0..m {
            let a = grid.node_vec(s);
            for t in 0..m {
                values[s * m + t] = f(&a, &grid.node_vec(t));
            }
        }
        SurfaceEstimate::new(grid.clone(), SurfaceKind::Covariance, values).unwrap()
    }

    fn sim1_phi(t: f64) -> [f64; 2] {
        let c = std::f64::consts::PI * t / 10.0;
        [-c.cos() / 5f64.sqrt(), c.sin() / 5f64.sqrt()]
    }

    #[test]
    fn reshape_small() {
        let g = EvaluationGrid::uniform(&[(0.0, 1.0, 2)]).unwrap();
        let cov = SurfaceEstimate::new(g, SurfaceKind::Covariance, vec![1.0, 2.0, 2.0, 3.0]).unwrap();
        let s = matrixize(&cov).unwrap();
        let a = s.dense().unwrap();
        assert_eq!((a[(0, 0)], a[(0, 1)], a[(1, 0)], a[(1, 1)]), (1.0, 2.0, 2.0, 3.0));
    }

    #[test]
    fn constant_kernel_rank_one() {
        let g = EvaluationGrid::cell_centered(&[(0.0, 1.0, 37)]).unwrap();
        let eig = dense_eig(&matrixize(&cov_from(&g, |_, _| 1.0)).unwrap(), 5).unwrap();
        assert_eq!(eig.len(), 1);
        assert!((eig.eigenvalues[0] - 1.0).abs() < 1e-12);
        assert!(eig.eigenfunctions[0].iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn sim1_analytic_pairs() {
        let g = EvaluationGrid::cell_centered(&[(0.0, 10.0, 500)]).unwrap();
        let cov = cov_from(&g, |s, t| {
            let (a, b) = (sim1_phi(s[0]), sim1_phi(t[0]));
            4.0 * a[0] * b[0] + a[1] * b[1]
        });
        let eig = dense_eig(&matrixize(&cov).unwrap(), 5).unwrap();
        assert_eq!(eig.len(), 2);
        assert!((eig.eigenvalues[0] - 4.0).abs() < 1e-3 && (eig.eigenvalues[1] - 1.0).abs() < 1e-3);
        for l in 0..2 {
            let truth: Vec<f64> = (0..g.len()).map(|i| sim1_phi(g.axis(0)[i])[l]).collect();
            let ise = sign_aligned_ise(&g, &eig.eigenfunctions[l], &truth);
            assert!(ise < 1e-4, "{ise}");
        }
        let gram = riemann_gram(&eig);
        for a in 0..2 {
            for b in 0..2 {
                assert!((gram[a][b] - if a == b { 1.0 } else { 0.0 }).abs() < 1e-8);
            }
        }
    }

    fn sign_aligned_ise(g: &EvaluationGrid, a: &[f64], b: &[f64]) -> f64 {
        let plus: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).collect();
        let minus: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x + y).powi(2)).collect();
        g.integrate(&plus).min(g.integrate(&minus))
    }

    #[test]
    fn separable_products() {
        let g = EvaluationGrid::cell_centered(&[(0.0, 1.0, 24), (0.0, 1.0, 20)]).unwrap();
        let f = |x: f64, k: usize| match k {
            0 => 1.0,
            _ => 2f64.sqrt() * (std::f64::consts::PI * x).cos(),
        };
        let lam = [2.0, 0.5];
        let cov = cov_from(&g, |s, t| {
            let a: f64 = (0..2).map(|k| lam[k] * f(s[0], k) * f(t[0], k)).sum();
            let b: f64 = (0..2).map(|k| lam[k] * f(s[1], k) * f(t[1], k)).sum();
            a * b
        });
        let eig = dense_eig(&matrixize(&cov).unwrap(), 4).unwrap();
        let want = [4.0, 1.0, 1.0, 0.25];
        for (got, w) in eig.eigenvalues.iter().zip(want) {
            assert!((got - w).abs() < 5e-3, "{got} vs {w}");
        }
        // The leading product is 1 x 1, constant.
        let phi0 = &eig.eigenfunctions[0];
        assert!(phi0.iter().all(|v| (v - 1.0).abs() < 1e-2));
    }

    fn rank3(m: usize) -> SurfaceEstimate {
        let g = EvaluationGrid::cell_centered(&[(0.0, 1.0, m)]).unwrap();
        cov_from(&g, |s, t| {
            let (x, y) = (s[0], t[0]);
            3.0 + 2.0 * (6.0 * x).sin() * (6.0 * y).sin() + 0.5 * (x - 0.5) * (y - 0.5) * 12.0
        })
    }

    #[test]
    fn randomized_matches_dense_on_low_rank() {
        let cov = rank3(200);
        let s = matrixize(&cov).unwrap();
        let dense = dense_eig(&s, 3).unwrap();
        let rand = randomized_eig(&s, 10, 3, 42).unwrap();
        assert_eq!(rand.len(), 3);
        for l in 0..3 {
            assert!((rand.eigenvalues[l] / dense.eigenvalues[l] - 1.0).abs() < 1e-6);
            assert!(sign_aligned_ise(&cov.grid, &rand.eigenfunctions[l], &dense.eigenfunctions[l]) < 1e-8);
        }
        let again = randomized_eig(&s, 10, 3, 42).unwrap();
        for (a, b) in rand.eigenfunctions.iter().flatten().zip(again.eigenfunctions.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(matches!(randomized_eig(&s, 2, 3, 1), Err(FpcaError::SketchTooSmall { .. })));
        let res = residuals(&s, &rand).unwrap();
        assert!(res.iter().all(|&r| r < 1e-8));
    }

    #[test]
    fn rank_one_single_sketch() {
        let g = EvaluationGrid::cell_centered(&[(0.0, 1.0, 50)]).unwrap();
        let cov = cov_from(&g, |s, t| (1.0 + s[0]) * (1.0 + t[0]));
        let s = matrixize(&cov).unwrap();
        let d = dense_eig(&s, 1).unwrap();
        let r = randomized_eig(&s, 1, 1, 3).unwrap();
        assert!((d.eigenvalues[0] - r.eigenvalues[0]).abs() < 1e-4);
        assert!(sign_aligned_ise(&g, &d.eigenfunctions[0], &r.eigenfunctions[0]) < 1e-4);
    }

    #[test]
    fn block_provider_matches_dense() {
        let cov = rank3(37);
        let dense = matrixize(&cov).unwrap();
        let blocked = matrixize_with_budget(&cov, 0, 8).unwrap();
        assert!(blocked.dense().is_none());
        let eye = Mat::from_fn(37, 37, |i, j| if i == j { 1.0 } else { 0.0 });
        let a = blocked.apply(&eye).unwrap();
        let b = dense.dense().unwrap();
        for i in 0..37 {
            for j in 0..37 {
                assert!((a[(i, j)] - b[(i, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn streaming_provider_matches_dense() {
        use crate::binning::linear_bin;
        use crate::dataset::{FunctionalDataset, Sample};
        use crate::kernel::Bandwidth;
        let g = EvaluationGrid::uniform(&[(0.0, 1.0, 9), (0.0, 1.0, 7)]).unwrap();
        let samples = (0..25)
            .map(|i| {
                let coords: Vec<f64> = (0..10).flat_map(|j| [((i * 7 + j * 3) % 17) as f64 / 16.0, ((i + j * 5) % 13) as f64 / 12.0]).collect();
                let values = coords.chunks(2).map(|c| (i as f64 * 0.3).sin() * (c[0] + c[1]) + c[0] * c[1]).collect();
                Sample::new(format!("{i}"), coords, values)
            })
            .collect();
        let ds = FunctionalDataset::with_bounds(2, samples, vec![(0.0, 1.0), (0.0, 1.0)]).unwrap();
        let h = Bandwidth::new(vec![0.3, 0.35]).unwrap();
        let binned = Arc::new(linear_bin(&ds, &g).unwrap());
        let mean = crate::fft::fft_local_linear(&binned, &g, &h, crate::fft::MomentTarget::Mean).unwrap();
        let cov = crate::fft::fft_covariance(binned.clone(), &g, &h, &mean).unwrap();
        let dense = matrixize(&cov).unwrap();
        let engine = Arc::new(CovarianceEngine::new(binned, &g, &h, &mean.values).unwrap());
        let r = engine.radius().to_vec();
        let halo = vec![r[0] + 1, r[1] + 1, r[0] + 1, r[1] + 1];
        let plan = BlockPlan::uniform(&[9, 7, 9, 7], &[2, 1, 2, 1], &halo).unwrap();
        let stream = MatrixizedCovariance::streaming(StreamingCovariance::new(engine, plan).unwrap());
        let v = Mat::from_fn(63, 3, |i, j| ((i * 31 + j * 7) % 11) as f64 - 5.0);
        let a = stream.apply(&v).unwrap();
        let b = dense.apply(&v).unwrap();
        for i in 0..63 {
            for j in 0..3 {
                assert!((a[(i, j)] - b[(i, j)]).abs() < 1e-12 * (1.0 + b[(i, j)].abs()));
            }
        }
    }

    #[test]
    fn masked_nodes_change_nothing() {
        let g = EvaluationGrid::cell_centered(&[(0.0, 1.0, 30)]).unwrap();
        let f = |s: &[f64], t: &[f64]| 1.0 + 3.0 * (4.0 * s[0]).cos() * (4.0 * t[0]).cos();
        let base = dense_eig(&matrixize(&cov_from(&g, f)).unwrap(), 3).unwrap();
        let wide = EvaluationGrid::cell_centered(&[(0.0, 1.2, 36)]).unwrap();
        let mask: Vec<bool> = (0..36).map(|i| i < 30).collect();
        let wide = wide.with_mask(mask).unwrap();
        let masked = dense_eig(&matrixize(&cov_from(&wide, f)).unwrap(), 3).unwrap();
        for l in 0..base.len() {
            assert!((base.eigenvalues[l] - masked.eigenvalues[l]).abs() < 1e-10);
            for i in 0..30 {
                assert!((base.eigenfunctions[l][i] - masked.eigenfunctions[l][i]).abs() < 1e-10);
            }
            assert!(masked.eigenfunctions[l][31].is_nan());
        }
    }

    #[test]
    fn fve_selection() {
        let g = EvaluationGrid::uniform(&[(0.0, 1.0, 3)]).unwrap();
        let mk = |vals: &[f64]| {
            let total: f64 = vals.iter().sum();
            let mut acc = 0.0;
            EigenSystem {
                grid: g.clone(),
                eigenvalues: vals.to_vec(),
                eigenfunctions: vec![vec![0.0; 3]; vals.len()],
                fve: vals.iter().map(|v| {
                    acc += v;
                    acc / total
                }).collect(),
                total_variance: total,
            }
        };
        assert_eq!(select_components_fve(&mk(&[4.0, 1.0]), 0.95).unwrap(), 2);
        assert_eq!(select_components_fve(&mk(&[16.0, 4.0, 1.0]), 0.75).unwrap(), 1);
        assert_eq!(select_components_fve(&mk(&[16.0, 4.0, 1.0]), 1.0).unwrap(), 3);
        assert!(select_components_fve(&mk(&[1.0]), 0.0).is_err());
    }
}
