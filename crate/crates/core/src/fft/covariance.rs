//! Binned FFT evaluation of the local linear covariance estimator.
//!
//! For every sample with at least two observations the binned counts `C_i` and value sums `B_i`
//! are convolved with the moment stencils, giving `G_i^p` and `H_i^p`. Kernel moments over
//! observation pairs are then `sum_i w_i G_i^p(s) G_i^q(t)` minus the same-observation terms,
//! which are recovered from the binned self-pair arrays. This equals convolving the
//! 2d-dimensional outer-product array with the product stencil, without ever forming it.
//!
//! Each node pair is evaluated through its canonical order (lower flat index first), so the
//! surface is exactly symmetric and any block of it is bit-identical to the full computation.

use std::sync::Arc;

use rayon::prelude::*;

use crate::binning::BinnedData;
use crate::error::{FpcaError, Result};
use crate::fft::conv::{GridConvolver, IndexBox};
use crate::fft::mean::{empty_threshold, PowerIndex};
use crate::grid::EvaluationGrid;
use crate::kernel::{epanechnikov, AxisStencil, Bandwidth};
use crate::locfit::{LocalFit, LocalSystem, MAX_DIM};
use crate::smoother::{ENLARGE_FACTOR, ENLARGE_STEPS};
use crate::surface::OUTSIDE;

/// Relative pair mass below which a window only holds same-observation pairs.
const PAIR_MASS_TOL: f64 = 1e-9;
/// First-side nodes accumulated together, sharing each second-side row read.
const ROW_CHUNK: usize = 8;
/// Second-side nodes per accumulation tile.
const TILE: usize = 256;

/// Fitted `(local index, value)` pairs and empty windows `(local index, node)` of one row.
type FitRow = (Vec<(usize, f64)>, Vec<(usize, usize)>);

/// Convolved per-sample arrays on one block core.
struct Side {
    nodes: Vec<usize>,
    len: usize,
    /// `g[p][i * len + loc]`
    g: Vec<Vec<f64>>,
    wg: Vec<Vec<f64>>,
    hv: Vec<Vec<f64>>,
    wh: Vec<Vec<f64>>,
}

/// Same-observation correction around one node, indexed by combo then by the offset `t - s`.
struct CorrTable {
    w: Vec<f64>,
    r: Vec<f64>,
}

pub struct CovarianceEngine {
    binned: Arc<BinnedData>,
    grid: EvaluationGrid,
    h: Bandwidth,
    conv: GridConvolver,
    mu: Vec<f64>,
    pw: PowerIndex,
    pv: PowerIndex,
    /// Weight moments `(p, q)` as indices into `pw`.
    wcombos: Vec<(usize, usize)>,
    /// Response moments `(p, q)` as indices into `pv`.
    rcombos: Vec<(usize, usize)>,
    a_map: Vec<usize>,
    r_map: Vec<usize>,
    min_mass: f64,
    radius: Vec<usize>,
    /// Extent of the correction offset box per axis, `4R + 3`.
    ebox: Vec<usize>,
}

impl CovarianceEngine {
    pub fn new(binned: Arc<BinnedData>, grid: &EvaluationGrid, h: &Bandwidth, mean: &[f64]) -> Result<Self> {
        grid.require_equispaced()?;
        let d = grid.dim();
        if d > MAX_DIM {
            return Err(FpcaError::InvalidDataset(format!("dimension {d} exceeds the supported maximum {MAX_DIM}")));
        }
        if h.dim() != d {
            return Err(FpcaError::DimensionMismatch { expected: d, found: h.dim() });
        }
        if binned.shape != grid.shape() {
            return Err(FpcaError::InvalidGrid("binned arrays do not conform to the grid".into()));
        }
        if binned.samples.is_empty() {
            return Err(FpcaError::NoPairs);
        }
        let stencils: Vec<AxisStencil> = (0..d).map(|k| AxisStencil::new(h.get(k), grid.spacing(k))).collect();
        let radius: Vec<usize> = stencils.iter().map(|s| s.radius).collect();
        let conv = GridConvolver::new(grid.shape(), stencils);
        let pw = PowerIndex::new(d, 2);
        let pv = PowerIndex::new(d, 1);
        let deg = |p: &[u8]| p.iter().map(|&x| x as usize).sum::<usize>();
        let mut wcombos = Vec::new();
        for (i, p) in pw.list.iter().enumerate() {
            for (j, q) in pw.list.iter().enumerate() {
                if deg(p) + deg(q) <= 2 {
                    wcombos.push((i, j));
                }
            }
        }
        let mut rcombos = Vec::new();
        for (i, p) in pv.list.iter().enumerate() {
            for (j, q) in pv.list.iter().enumerate() {
                if deg(p) + deg(q) <= 1 {
                    rcombos.push((i, j));
                }
            }
        }
        // Parameter powers: intercept, slopes in s, slopes in t.
        let np = 2 * d + 1;
        let param = |i: usize| -> (Vec<u8>, Vec<u8>) {
            let mut ps = vec![0u8; d];
            let mut pt = vec![0u8; d];
            if i >= 1 && i <= d {
                ps[i - 1] = 1;
            } else if i > d {
                pt[i - 1 - d] = 1;
            }
            (ps, pt)
        };
        let mut a_map = vec![0; np * np];
        for i in 0..np {
            for j in 0..np {
                let (si, ti) = param(i);
                let (sj, tj) = param(j);
                let ps: Vec<u8> = si.iter().zip(&sj).map(|(a, b)| a + b).collect();
                let pt: Vec<u8> = ti.iter().zip(&tj).map(|(a, b)| a + b).collect();
                let key = (pw.of(&ps), pw.of(&pt));
                a_map[i * np + j] = wcombos.iter().position(|&c| c == key).unwrap();
            }
        }
        let r_map = (0..np)
            .map(|i| {
                let (ps, pt) = param(i);
                let key = (pv.of(&ps), pv.of(&pt));
                rcombos.iter().position(|&c| c == key).unwrap()
            })
            .collect();
        let total_pair_weight: f64 = binned.samples.iter().map(|s| s.pair_weight * s.counts.iter().sum::<f64>().powi(2)).sum();
        let min_mass = empty_threshold(total_pair_weight, &h.doubled().values().to_vec());
        let ebox = radius.iter().map(|r| 4 * r + 3).collect();
        if mean.len() != grid.len() {
            return Err(FpcaError::DimensionMismatch { expected: grid.len(), found: mean.len() });
        }
        Ok(CovarianceEngine {
            binned,
            grid: grid.clone(),
            h: h.clone(),
            conv,
            mu: mean.to_vec(),
            pw,
            pv,
            wcombos,
            rcombos,
            a_map,
            r_map,
            min_mass,
            radius,
            ebox,
        })
    }

    pub fn grid(&self) -> &EvaluationGrid {
        &self.grid
    }

    pub fn radius(&self) -> &[usize] {
        &self.radius
    }

    /// Number of distinct kernel moments per node pair.
    pub fn moment_count(&self) -> usize {
        self.wcombos.len() + self.rcombos.len()
    }

    fn side(&self, core: &IndexBox, halo: &[usize]) -> Side {
        let shape = self.grid.shape();
        let region = self.conv.region_for(core, halo);
        let rshape = region.shape();
        let rlen: usize = rshape.iter().product();
        let d = shape.len();
        let len = core.len();
        let per_sample: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = self
            .binned
            .samples
            .par_iter()
            .map(|sb| {
                let mut c = vec![0.0; rlen];
                let mut b = vec![0.0; rlen];
                let mut any = false;
                let mut multi = [0usize; MAX_DIM];
                for (k, &node) in sb.nodes.iter().enumerate() {
                    let mut rem = node;
                    let mut inside = true;
                    let mut local = 0;
                    for a in 0..d {
                        let st = self.grid.strides()[a];
                        multi[a] = rem / st;
                        rem %= st;
                        if multi[a] < region.lo[a] || multi[a] >= region.hi[a] {
                            inside = false;
                            break;
                        }
                        local = local * rshape[a] + multi[a] - region.lo[a];
                    }
                    if inside {
                        c[local] = sb.counts[k];
                        b[local] = sb.sums[k];
                        any = true;
                    }
                }
                if !any {
                    return (vec![vec![0.0; len]; self.pw.list.len()], vec![vec![0.0; len]; self.pv.list.len()]);
                }
                (self.conv.moments(&c, &region, core, &self.pw.list), self.conv.moments(&b, &region, core, &self.pv.list))
            })
            .collect();
        let n = per_sample.len();
        let mut g = vec![vec![0.0; n * len]; self.pw.list.len()];
        let mut wg = g.clone();
        let mut hv = vec![vec![0.0; n * len]; self.pv.list.len()];
        let mut wh = hv.clone();
        for (i, (gs, hs)) in per_sample.into_iter().enumerate() {
            let w = self.binned.samples[i].pair_weight;
            for (p, arr) in gs.into_iter().enumerate() {
                for (loc, v) in arr.into_iter().enumerate() {
                    g[p][i * len + loc] = v;
                    wg[p][i * len + loc] = w * v;
                }
            }
            for (p, arr) in hs.into_iter().enumerate() {
                for (loc, v) in arr.into_iter().enumerate() {
                    hv[p][i * len + loc] = v;
                    wh[p][i * len + loc] = w * v;
                }
            }
        }
        Side { nodes: core.global_indices(shape), len, g, wg, hv, wh }
    }

    /// Same-observation correction for pairs whose first node is `a`.
    fn corr_table(&self, a: usize) -> CorrTable {
        let d = self.grid.dim();
        let shape = self.grid.shape();
        let strides = self.grid.strides();
        let r = &self.radius;
        let mut am = [0isize; MAX_DIM];
        let mut rem = a;
        for k in 0..d {
            am[k] = (rem / strides[k]) as isize;
            rem %= strides[k];
        }
        // Step 1: Z_p(e') = sum over x near a and delta with x + delta - a = e'.
        let zdims: Vec<usize> = r.iter().map(|&x| 2 * x + 3).collect();
        let zlen: usize = zdims.iter().product();
        let npw = self.pw.list.len();
        let npv = self.pv.list.len();
        let mut z0 = vec![0.0; npw * zlen];
        let mut z2 = vec![0.0; npv * zlen];
        let noff = self.binned.offsets();
        let wlen: usize = r.iter().map(|&x| 2 * x + 1).product();
        let stencils: Vec<&AxisStencil> = self.conv.axes.iter().map(|c| &c.stencil).collect();
        let mut off = [0isize; MAX_DIM];
        let mut delta = [0isize; MAX_DIM];
        let mut tapw = vec![0.0; npw];
        let pv_in_pw: Vec<usize> = self.pv.list.iter().map(|p| self.pw.of(p)).collect();
        for widx in 0..wlen {
            // offset r_k = a_k - x_k in [-R, R]
            let mut rem = widx;
            for k in (0..d).rev() {
                let w = 2 * r[k] + 1;
                off[k] = (rem % w) as isize - r[k] as isize;
                rem /= w;
            }
            let mut x = 0usize;
            let mut inside = true;
            for k in 0..d {
                let xk = am[k] - off[k];
                if xk < 0 || xk >= shape[k] as isize {
                    inside = false;
                    break;
                }
                x += xk as usize * strides[k];
            }
            if !inside {
                continue;
            }
            for (pi, p) in self.pw.list.iter().enumerate() {
                let mut t = 1.0;
                for k in 0..d {
                    t *= stencils[k].taps[p[k] as usize][(off[k] + r[k] as isize) as usize];
                }
                tapw[pi] = t;
            }
            for code in 0..noff {
                let dc = self.binned.pair_count[x * noff + code];
                let ds = self.binned.pair_square[x * noff + code];
                if dc == 0.0 && ds == 0.0 {
                    continue;
                }
                crate::binning::offset_decode(code, d, &mut delta);
                // e' = x + delta - a = delta - off, shifted into [0, 2R + 2].
                let mut zi = 0;
                for k in 0..d {
                    zi = zi * zdims[k] + (delta[k] - off[k] + r[k] as isize + 1) as usize;
                }
                for pi in 0..npw {
                    z0[pi * zlen + zi] += dc * tapw[pi];
                }
                for pi in 0..npv {
                    z2[pi * zlen + zi] += ds * tapw[pv_in_pw[pi]];
                }
            }
        }
        // Step 2: convolve Z_p with the q stencils over the offset box, axis by axis.
        let elen: usize = self.ebox.iter().product();
        let nw = self.wcombos.len();
        let nr = self.rcombos.len();
        let mut w = vec![0.0; nw * elen];
        for (ci, &(p, q)) in self.wcombos.iter().enumerate() {
            let out = self.spread(&z0[p * zlen..(p + 1) * zlen], &self.pw.list[q], &zdims);
            for (e, v) in out.into_iter().enumerate() {
                w[e * nw + ci] = v;
            }
        }
        let mut r = vec![0.0; nr * elen];
        for (ci, &(p, q)) in self.rcombos.iter().enumerate() {
            let out = self.spread(&z2[p * zlen..(p + 1) * zlen], &self.pv.list[q], &zdims);
            for (e, v) in out.into_iter().enumerate() {
                r[e * nr + ci] = v;
            }
        }
        CorrTable { w, r }
    }

    /// Separable convolution of a `(2R+3)^d` offset box into the `(4R+3)^d` box.
    fn spread(&self, z: &[f64], q: &[u8], zdims: &[usize]) -> Vec<f64> {
        let d = zdims.len();
        let mut dims = zdims.to_vec();
        let mut cur = z.to_vec();
        for k in 0..d {
            let taps = &self.conv.axes[k].stencil.taps[q[k] as usize];
            let n_in = dims[k];
            let n_out = self.ebox[k];
            let outer: usize = dims[..k].iter().product();
            let inner: usize = dims[k + 1..].iter().product();
            let mut next = vec![0.0; outer * n_out * inner];
            for o in 0..outer {
                for ii in 0..n_in {
                    // input offset e' = ii - (R+1); output offset e = oo - (2R+1); tap index e - e' + R
                    for (ti, &tap) in taps.iter().enumerate() {
                        if tap == 0.0 {
                            continue;
                        }
                        let oo = ii + ti;
                        let src = (o * n_in + ii) * inner;
                        let dst = (o * n_out + oo) * inner;
                        for j in 0..inner {
                            next[dst + j] += cur[src + j] * tap;
                        }
                    }
                }
            }
            dims[k] = n_out;
            cur = next;
        }
        cur
    }

    /// Fits every pair whose first node is one of `alocs` (local indices in `first`) against
    /// the nodes `b` of `second` with `idx(b) >= idx(a)` (or `>` when `strict`).
    /// Returns, per first node, `(local index in second, value)` for each fitted pair and the
    /// pairs whose window was empty.
    fn fit_rows(&self, first: &Side, alocs: &[usize], second: &Side, strict: bool) -> Vec<FitRow> {
        let d = self.grid.dim();
        let n = self.binned.samples.len();
        let nw = self.wcombos.len();
        let nr = self.rcombos.len();
        let nc = nw + nr;
        let np = 2 * d + 1;
        let strides = self.grid.strides();
        let unravel = |g: usize| {
            let mut m = [0isize; MAX_DIM];
            let mut rem = g;
            for k in 0..d {
                m[k] = (rem / strides[k]) as isize;
                rem %= strides[k];
            }
            m
        };
        let rows: Vec<usize> = alocs.iter().copied().filter(|&al| self.grid.in_mask(first.nodes[al])).collect();
        let mut out: Vec<FitRow> = alocs.iter().map(|_| (Vec::new(), Vec::new())).collect();
        let slot = |al: usize| alocs.iter().position(|&x| x == al).unwrap();
        let amultis: Vec<[isize; MAX_DIM]> = rows.iter().map(|&al| unravel(first.nodes[al])).collect();
        let mut tables: Vec<Option<CorrTable>> = rows.iter().map(|_| None).collect();
        let mut acc = vec![0.0; rows.len() * nc * TILE];
        let mut sys = LocalSystem::new(np);
        for t0 in (0..second.len).step_by(TILE) {
            let t1 = (t0 + TILE).min(second.len);
            let span = t1 - t0;
            // Skip tiles lying wholly before every first node.
            let last = second.nodes[t1 - 1];
            if rows.iter().all(|&al| if strict { last <= first.nodes[al] } else { last < first.nodes[al] }) {
                continue;
            }
            acc.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..n {
                let ib = i * second.len + t0;
                for (ci, &(p, q)) in self.wcombos.iter().enumerate() {
                    let row = &second.g[q][ib..ib + span];
                    for (r, &al) in rows.iter().enumerate() {
                        let coef = first.wg[p][i * first.len + al];
                        if coef == 0.0 {
                            continue;
                        }
                        let dst = &mut acc[(r * nc + ci) * TILE..(r * nc + ci) * TILE + span];
                        for (x, &y) in dst.iter_mut().zip(row) {
                            *x += coef * y;
                        }
                    }
                }
                for (ci, &(p, q)) in self.rcombos.iter().enumerate() {
                    let row = &second.hv[q][ib..ib + span];
                    for (r, &al) in rows.iter().enumerate() {
                        let coef = first.wh[p][i * first.len + al];
                        if coef == 0.0 {
                            continue;
                        }
                        let dst = &mut acc[(r * nc + nw + ci) * TILE..(r * nc + nw + ci) * TILE + span];
                        for (x, &y) in dst.iter_mut().zip(row) {
                            *x += coef * y;
                        }
                    }
                }
            }
            for (r, &al) in rows.iter().enumerate() {
                let a = first.nodes[al];
                let am = &amultis[r];
                let (fitted, empties) = &mut out[slot(al)];
                for j in 0..span {
                    let bl = t0 + j;
                    let b = second.nodes[bl];
                    if (strict && b <= a) || (!strict && b < a) || !self.grid.in_mask(b) {
                        continue;
                    }
                    let bm = unravel(b);
                    let near = (0..d).all(|k| (bm[k] - am[k]).unsigned_abs() <= 2 * self.radius[k] + 1);
                    let mut m = [0.0; 64];
                    let mut rm = [0.0; 16];
                    for ci in 0..nw {
                        m[ci] = acc[(r * nc + ci) * TILE + j];
                    }
                    for ci in 0..nr {
                        rm[ci] = acc[(r * nc + nw + ci) * TILE + j];
                    }
                    let uncorrected = m[0];
                    if near {
                        let mut e = 0usize;
                        for k in 0..d {
                            e = e * self.ebox[k] + (bm[k] - am[k] + 2 * self.radius[k] as isize + 1) as usize;
                        }
                        let t = tables[r].get_or_insert_with(|| self.corr_table(a));
                        for ci in 0..nw {
                            m[ci] -= t.w[e * nw + ci];
                        }
                        for ci in 0..nr {
                            rm[ci] -= t.r[e * nr + ci];
                        }
                    }
                    sys.clear();
                    for i in 0..np {
                        for jj in i..np {
                            sys.set(i, jj, m[self.a_map[i * np + jj]]);
                        }
                        sys.r[i] = rm[self.r_map[i]];
                    }
                    let threshold = self.min_mass.max(PAIR_MASS_TOL * uncorrected);
                    match sys.solve(threshold) {
                        LocalFit::Empty => empties.push((bl, b)),
                        fit => fitted.push((bl, fit.value().unwrap() - self.mu[a] * self.mu[b])),
                    }
                }
            }
        }
        out
    }

    /// [`Self::fit_rows`] over every node of `first`, in parallel chunks.
    fn fit_all(&self, first: &Side, second: &Side, strict: bool) -> Vec<FitRow> {
        let all: Vec<usize> = (0..first.len).collect();
        all.par_chunks(ROW_CHUNK).flat_map_iter(|c| self.fit_rows(first, c, second, strict)).collect()
    }

    /// Direct evaluation on the binned data at one canonical pair, with bandwidth `h`.
    pub fn fit_pair_direct(&self, a: usize, b: usize, h: &[f64]) -> LocalFit {
        let d = self.grid.dim();
        let xa = self.grid.node_vec(a);
        let xb = self.grid.node_vec(b);
        let np = 2 * d + 1;
        let pw = &self.pw;
        let pv = &self.pv;
        let kern = |t: &[f64], x: &[f64], p: &[u8]| -> f64 {
            let mut v = 1.0;
            for k in 0..d {
                let u = (t[k] - x[k]) / h[k];
                let kv = epanechnikov(u) / h[k];
                if kv == 0.0 {
                    return 0.0;
                }
                v *= kv * u.powi(p[k] as i32);
            }
            v
        };
        let mut wm = vec![0.0; self.wcombos.len()];
        let mut rm = vec![0.0; self.rcombos.len()];
        let mut ga = vec![0.0; pw.list.len()];
        let mut gb = vec![0.0; pw.list.len()];
        let mut ha = vec![0.0; pv.list.len()];
        let mut hb = vec![0.0; pv.list.len()];
        for sb in &self.binned.samples {
            ga.iter_mut().chain(gb.iter_mut()).chain(ha.iter_mut()).chain(hb.iter_mut()).for_each(|v| *v = 0.0);
            for (k, &node) in sb.nodes.iter().enumerate() {
                let x = self.grid.node_vec(node);
                for (pi, p) in pw.list.iter().enumerate() {
                    ga[pi] += sb.counts[k] * kern(&xa, &x, p);
                    gb[pi] += sb.counts[k] * kern(&xb, &x, p);
                }
                for (pi, p) in pv.list.iter().enumerate() {
                    ha[pi] += sb.sums[k] * kern(&xa, &x, p);
                    hb[pi] += sb.sums[k] * kern(&xb, &x, p);
                }
            }
            for (ci, &(p, q)) in self.wcombos.iter().enumerate() {
                wm[ci] += sb.pair_weight * ga[p] * gb[q];
            }
            for (ci, &(p, q)) in self.rcombos.iter().enumerate() {
                rm[ci] += sb.pair_weight * ha[p] * hb[q];
            }
        }
        let uncorrected = wm[0];
        let noff = self.binned.offsets();
        let mut delta = [0isize; MAX_DIM];
        for x in 0..self.grid.len() {
            for code in 0..noff {
                let dc = self.binned.pair_count[x * noff + code];
                let ds = self.binned.pair_square[x * noff + code];
                if dc == 0.0 && ds == 0.0 {
                    continue;
                }
                crate::binning::offset_decode(code, d, &mut delta);
                let mut multi = vec![0usize; d];
                self.grid.unravel(x, &mut multi);
                let y: Vec<usize> = (0..d).map(|k| (multi[k] as isize + delta[k]) as usize).collect();
                let xc = self.grid.node_vec(x);
                let yc = self.grid.node_vec(self.grid.ravel(&y));
                for (ci, &(p, q)) in self.wcombos.iter().enumerate() {
                    wm[ci] -= dc * kern(&xa, &xc, &pw.list[p]) * kern(&xb, &yc, &pw.list[q]);
                }
                for (ci, &(p, q)) in self.rcombos.iter().enumerate() {
                    rm[ci] -= ds * kern(&xa, &xc, &pv.list[p]) * kern(&xb, &yc, &pv.list[q]);
                }
            }
        }
        let mut sys = LocalSystem::new(np);
        for i in 0..np {
            for j in i..np {
                sys.set(i, j, wm[self.a_map[i * np + j]]);
            }
            sys.r[i] = rm[self.r_map[i]];
        }
        sys.solve(self.min_mass.max(PAIR_MASS_TOL * uncorrected))
    }

    fn refit(&self, a: usize, b: usize) -> Option<f64> {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        let mut h = self.h.values().to_vec();
        for _ in 0..ENLARGE_STEPS {
            h.iter_mut().for_each(|x| *x *= ENLARGE_FACTOR);
            if let Some(v) = self.fit_pair_direct(a, b, &h).value() {
                return Some(v - self.mu[a] * self.mu[b]);
            }
        }
        None
    }

    /// Covariance values on `s_core x t_core`, row-major in `s` then `t`.
    pub fn compute_box(&self, s_core: &IndexBox, t_core: &IndexBox, s_halo: &[usize], t_halo: &[usize]) -> Result<Vec<f64>> {
        let s_side = self.side(s_core, s_halo);
        let same = s_core == t_core;
        let t_side = if same { None } else { Some(self.side(t_core, t_halo)) };
        let t_ref = t_side.as_ref().unwrap_or(&s_side);
        let ns = s_side.len;
        let nt = t_ref.len;
        let mut values = vec![OUTSIDE; ns * nt];
        let mut empties: Vec<(usize, usize)> = Vec::new();
        let forward = self.fit_all(&s_side, t_ref, false);
        for (al, (row, emp)) in forward.into_iter().enumerate() {
            for (bl, v) in row {
                values[al * nt + bl] = v;
            }
            empties.extend(emp.into_iter().map(|(bl, _)| (al, bl)));
        }
        if same {
            // Mirror: the canonical value of (s, t) with s > t was computed from t's row.
            for al in 0..ns {
                for bl in 0..al {
                    if s_side.nodes[bl] < s_side.nodes[al] {
                        values[al * nt + bl] = values[bl * nt + al];
                    }
                }
            }
            let mut mirrored = Vec::new();
            for &(al, bl) in &empties {
                if al != bl {
                    mirrored.push((bl, al));
                }
            }
            empties.extend(mirrored);
        } else {
            let backward = self.fit_all(t_ref, &s_side, true);
            for (bl, (row, emp)) in backward.into_iter().enumerate() {
                for (al, v) in row {
                    values[al * nt + bl] = v;
                }
                empties.extend(emp.into_iter().map(|(al, _)| (al, bl)));
            }
        }
        let mut failed = 0;
        for (al, bl) in empties {
            match self.refit(s_side.nodes[al], t_ref.nodes[bl]) {
                Some(v) => values[al * nt + bl] = v,
                None => failed += 1,
            }
        }
        if failed > 0 {
            return Err(FpcaError::BandwidthTooSmall { nodes: failed });
        }
        Ok(values)
    }
}

