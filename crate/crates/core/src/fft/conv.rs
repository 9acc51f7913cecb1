//! Separable zero-padded convolution of grid arrays with kernel moment stencils, by FFT.
//!
//! Each axis is processed with overlap-add over segments whose positions are fixed in global
//! grid coordinates. A region that starts on a segment boundary therefore reproduces the
//! full-grid result bit for bit at every node whose window lies inside the region.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::kernel::AxisStencil;

/// Smallest 5-smooth integer `>= n`.
pub fn next_smooth(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5] {
            while r % p == 0 {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

/// FFT plan and stencil spectra for one axis.
pub struct AxisConvolver {
    pub stencil: AxisStencil,
    /// Segment length in nodes.
    pub seg: usize,
    /// Transform length.
    pub len: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    /// Normalized spectra of the three moment stencils.
    spectra: [Vec<Complex<f64>>; 3],
}

impl AxisConvolver {
    pub fn new(stencil: AxisStencil) -> Self {
        let width = stencil.len();
        let len = next_smooth((4 * width).max(32));
        let seg = len - (width - 1);
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(len);
        let inv = planner.plan_fft_inverse(len);
        let spectra = std::array::from_fn(|p| {
            let mut buf = vec![Complex::new(0.0, 0.0); len];
            for (i, &v) in stencil.taps[p].iter().enumerate() {
                buf[i] = Complex::new(v / len as f64, 0.0);
            }
            fwd.process(&mut buf);
            buf
        });
        AxisConvolver { stencil, seg, len, fwd, inv, spectra }
    }

    pub fn radius(&self) -> usize {
        self.stencil.radius
    }

    /// Convolves `x` with stencil `pa` into `ya` and, if given, stencil `pb` into `yb`.
    ///
    /// `ya[t] = sum_a x[a] kappa_pa(t - a)`; outputs must be zeroed by the caller.
    fn convolve_line(
        &self,
        x: &[f64],
        pa: usize,
        pb: Option<usize>,
        ya: &mut [f64],
        mut yb: Option<&mut [f64]>,
        buf: &mut Vec<Complex<f64>>,
        scratch: &mut Vec<Complex<f64>>,
    ) {
        let n = x.len();
        let r = self.radius();
        buf.resize(self.len, Complex::new(0.0, 0.0));
        let fscratch = self.fwd.get_inplace_scratch_len().max(self.inv.get_inplace_scratch_len());
        scratch.resize(fscratch, Complex::new(0.0, 0.0));
        let mut c = 0;
        while c < n {
            let l = self.seg.min(n - c);
            if x[c..c + l].iter().all(|&v| v == 0.0) {
                c += self.seg;
                continue;
            }
            for (i, b) in buf.iter_mut().enumerate() {
                *b = if i < l { Complex::new(x[c + i], 0.0) } else { Complex::new(0.0, 0.0) };
            }
            self.fwd.process_with_scratch(buf, scratch);
            let sa = &self.spectra[pa];
            match pb {
                Some(pb) => {
                    let sb = &self.spectra[pb];
                    for i in 0..self.len {
                        let k = Complex::new(sa[i].re - sb[i].im, sa[i].im + sb[i].re);
                        buf[i] *= k;
                    }
                }
                None => {
                    for i in 0..self.len {
                        buf[i] *= sa[i];
                    }
                }
            }
            self.inv.process_with_scratch(buf, scratch);
            let t0 = c as isize - r as isize;
            let m_lo = (-t0).max(0) as usize;
            let m_hi = (l + 2 * r).min((n as isize - t0) as usize);
            for m in m_lo..m_hi {
                let t = (t0 + m as isize) as usize;
                ya[t] += buf[m].re;
                if let Some(yb) = yb.as_deref_mut() {
                    yb[t] += buf[m].im;
                }
            }
            c += self.seg;
        }
    }
}

/// Axis-aligned box of node indices, half-open per axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexBox {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
}

impl IndexBox {
    pub fn full(shape: &[usize]) -> Self {
        IndexBox { lo: vec![0; shape.len()], hi: shape.to_vec() }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).collect()
    }

    pub fn len(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, multi: &[usize]) -> bool {
        multi.iter().enumerate().all(|(k, &i)| i >= self.lo[k] && i < self.hi[k])
    }

    /// Global flat indices (in a grid of `shape`) of the nodes of this box, row-major.
    pub fn global_indices(&self, shape: &[usize]) -> Vec<usize> {
        let d = shape.len();
        let bs = self.shape();
        let n: usize = bs.iter().product();
        let mut out = Vec::with_capacity(n);
        let mut cur = vec![0; d];
        for _ in 0..n {
            let mut g = 0;
            for k in 0..d {
                g = g * shape[k] + self.lo[k] + cur[k];
            }
            out.push(g);
            for k in (0..d).rev() {
                cur[k] += 1;
                if cur[k] < bs[k] {
                    break;
                }
                cur[k] = 0;
            }
        }
        out
    }
}

/// Convolution engine for a grid: one [`AxisConvolver`] per axis.
pub struct GridConvolver {
    pub shape: Vec<usize>,
    pub axes: Vec<AxisConvolver>,
}

/// Moment multi-index: the power of the scaled offset on each axis.
pub type Power = Vec<u8>;

/// All multi-indices of total degree at most `max_degree` in `d` variables, in a fixed order.
pub fn powers(d: usize, max_degree: usize) -> Vec<Power> {
    let mut out = vec![vec![0u8; d]];
    for deg in 1..=max_degree {
        let mut level = Vec::new();
        collect_powers(d, deg, 0, &mut vec![0u8; d], &mut level);
        out.extend(level);
    }
    out
}

fn collect_powers(d: usize, left: usize, k: usize, cur: &mut Vec<u8>, out: &mut Vec<Power>) {
    if k == d {
        if left == 0 {
            out.push(cur.clone());
        }
        return;
    }
    for e in (0..=left).rev() {
        cur[k] = e as u8;
        collect_powers(d, left - e, k + 1, cur, out);
    }
    cur[k] = 0;
}

impl GridConvolver {
    pub fn new(shape: &[usize], stencils: Vec<AxisStencil>) -> Self {
        GridConvolver { shape: shape.to_vec(), axes: stencils.into_iter().map(AxisConvolver::new).collect() }
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    /// Region over which input must be supplied to obtain exact results on `core`:
    /// `core` widened by `halo` and rounded outward to segment boundaries.
    pub fn region_for(&self, core: &IndexBox, halo: &[usize]) -> IndexBox {
        let d = self.dim();
        let mut lo = vec![0; d];
        let mut hi = vec![0; d];
        for k in 0..d {
            let seg = self.axes[k].seg;
            lo[k] = (core.lo[k].saturating_sub(halo[k]) / seg) * seg;
            hi[k] = ((core.hi[k] + halo[k]).div_ceil(seg) * seg).min(self.shape[k]);
        }
        IndexBox { lo, hi }
    }

    /// Convolves `input` (laid out over `region`) with every moment stencil in `targets`,
    /// returning arrays laid out over `core` in the order of `targets`.
    pub fn moments(&self, input: &[f64], region: &IndexBox, core: &IndexBox, targets: &[Power]) -> Vec<Vec<f64>> {
        let mut results: BTreeMap<Power, Vec<f64>> = BTreeMap::new();
        let mut shape = region.shape();
        self.recurse(0, Vec::new(), input.to_vec(), &mut shape, region, core, targets, &mut results);
        targets.iter().map(|p| results.remove(p).unwrap_or_default()).collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn recurse(
        &self,
        axis: usize,
        prefix: Power,
        data: Vec<f64>,
        shape: &mut Vec<usize>,
        region: &IndexBox,
        core: &IndexBox,
        targets: &[Power],
        results: &mut BTreeMap<Power, Vec<f64>>,
    ) {
        if axis == self.dim() {
            results.insert(prefix, data);
            return;
        }
        let mut digits: Vec<u8> = targets.iter().filter(|p| p[..axis] == prefix[..]).map(|p| p[axis]).collect();
        digits.sort_unstable();
        digits.dedup();
        let outs = self.convolve_axis(&data, shape, axis, region.lo[axis], core, &digits);
        let mut out_shape = shape.clone();
        out_shape[axis] = core.hi[axis] - core.lo[axis];
        for (digit, arr) in digits.iter().zip(outs) {
            let mut p = prefix.clone();
            p.push(*digit);
            let mut s = out_shape.clone();
            self.recurse(axis + 1, p, arr, &mut s, region, core, targets, results);
        }
    }

    /// Convolves along `axis` with each stencil in `digits`, cropping that axis to `core`.
    fn convolve_axis(
        &self,
        data: &[f64],
        shape: &[usize],
        axis: usize,
        region_lo: usize,
        core: &IndexBox,
        digits: &[u8],
    ) -> Vec<Vec<f64>> {
        let conv = &self.axes[axis];
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let c0 = core.lo[axis] - region_lo;
        let nc = core.hi[axis] - core.lo[axis];
        let slab = nc * inner;
        let mut outs: Vec<Vec<f64>> = digits.iter().map(|_| vec![0.0; outer * slab]).collect();
        // Work on one outer slab at a time so slabs can be filled in parallel.
        let work = |o: usize, slabs: &mut [&mut [f64]]| {
            let mut x = vec![0.0; n];
            let mut ya = vec![0.0; n];
            let mut yb = vec![0.0; n];
            let mut buf = Vec::new();
            let mut scratch = Vec::new();
            for i in 0..inner {
                for (a, xa) in x.iter_mut().enumerate() {
                    *xa = data[(o * n + a) * inner + i];
                }
                for pair in (0..digits.len()).step_by(2) {
                    ya.iter_mut().for_each(|v| *v = 0.0);
                    yb.iter_mut().for_each(|v| *v = 0.0);
                    let second = (pair + 1 < digits.len()).then(|| digits[pair + 1] as usize);
                    conv.convolve_line(
                        &x,
                        digits[pair] as usize,
                        second,
                        &mut ya,
                        second.map(|_| &mut yb[..]),
                        &mut buf,
                        &mut scratch,
                    );
                    for t in 0..nc {
                        slabs[pair][t * inner + i] = ya[c0 + t];
                        if second.is_some() {
                            slabs[pair + 1][t * inner + i] = yb[c0 + t];
                        }
                    }
                }
            }
        };
        if outer == 1 {
            let mut slabs: Vec<&mut [f64]> = outs.iter_mut().map(|v| &mut v[..]).collect();
            work(0, &mut slabs);
        } else {
            let mut per_slab: Vec<Vec<&mut [f64]>> = (0..outer).map(|_| Vec::with_capacity(digits.len())).collect();
            for out in outs.iter_mut() {
                for (o, chunk) in out.chunks_mut(slab).enumerate() {
                    per_slab[o].push(chunk);
                }
            }
            per_slab.into_par_iter().enumerate().for_each(|(o, mut slabs)| work(o, &mut slabs));
        }
        outs
    }
}

/// Copies the `region` part of a full-grid array into a dense buffer.
pub fn extract_region(full: &[f64], shape: &[usize], region: &IndexBox) -> Vec<f64> {
    region.global_indices(shape).into_iter().map(|g| full[g]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct(x: &[f64], taps: &[f64], r: usize) -> Vec<f64> {
        let n = x.len();
        (0..n)
            .map(|t| {
                let mut s = 0.0;
                for (a, &xa) in x.iter().enumerate() {
                    let d = t as isize - a as isize;
                    if d.unsigned_abs() <= r {
                        s += xa * taps[(d + r as isize) as usize];
                    }
                }
                s
            })
            .collect()
    }

    #[test]
    fn smooth_sizes() {
        assert_eq!(next_smooth(7), 8);
        assert_eq!(next_smooth(121), 125);
        assert_eq!(next_smooth(1), 1);
    }

    #[test]
    fn powers_listing() {
        assert_eq!(powers(1, 2), vec![vec![0], vec![1], vec![2]]);
        assert_eq!(powers(2, 2).len(), 6);
        assert_eq!(powers(3, 2).len(), 10);
        assert_eq!(powers(3, 1).len(), 4);
    }

    #[test]
    fn matches_direct_convolution_1d() {
        let n = 301;
        let x: Vec<f64> = (0..n).map(|i| ((i * 37) % 11) as f64 - 3.0).collect();
        let st = AxisStencil::new(0.07, 1.0 / 300.0);
        let r = st.radius;
        let gc = GridConvolver::new(&[n], vec![st.clone()]);
        let full = IndexBox::full(&[n]);
        let out = gc.moments(&x, &full, &full, &powers(1, 2));
        for p in 0..3 {
            let d = direct(&x, &st.taps[p], r);
            let scale = d.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            for t in 0..n {
                assert!((out[p][t] - d[t]).abs() < 1e-12 * scale, "p={p} t={t}");
            }
        }
    }

    #[test]
    fn region_cores_are_bit_identical() {
        let shape = [40, 33];
        let n: usize = shape.iter().product();
        let x: Vec<f64> = (0..n).map(|i| ((i * 7919) % 101) as f64 / 17.0).collect();
        let st = vec![AxisStencil::new(0.1, 1.0 / 39.0), AxisStencil::new(0.2, 1.0 / 32.0)];
        let gc = GridConvolver::new(&shape, st);
        let full = IndexBox::full(&shape);
        let targets = powers(2, 2);
        let whole = gc.moments(&x, &full, &full, &targets);
        let core = IndexBox { lo: vec![13, 5], hi: vec![27, 20] };
        let halo = [gc.axes[0].radius(), gc.axes[1].radius()];
        let region = gc.region_for(&core, &halo);
        let part = gc.moments(&extract_region(&x, &shape, &region), &region, &core, &targets);
        let idx = core.global_indices(&shape);
        for (p, arr) in part.iter().enumerate() {
            for (local, &g) in idx.iter().enumerate() {
                assert_eq!(arr[local].to_bits(), whole[p][g].to_bits());
            }
        }
    }
}
