//! Multilinear binning of weighted observations onto an equispaced grid.

use rayon::prelude::*;

use crate::dataset::FunctionalDataset;
use crate::error::{FpcaError, Result};
use crate::grid::EvaluationGrid;

/// Binned image of one sample with at least two observations, used by the covariance path.
#[derive(Debug, Clone)]
pub struct SampleBins {
    /// Position of the sample in the dataset.
    pub sample: usize,
    /// Pair weight `1 / (N_i (N_i - 1))`.
    pub pair_weight: f64,
    /// Occupied nodes in increasing order.
    pub nodes: Vec<usize>,
    /// Unweighted multilinear counts at `nodes`.
    pub counts: Vec<f64>,
    /// Count-weighted value sums at `nodes`.
    pub sums: Vec<f64>,
}

/// Output of [`linear_bin`].
///
/// `weight`, `value` and `square` carry the per-sample weight `1/N_i`. The correction arrays
/// hold, for every node `a` and neighbour offset `delta` in `{-1,0,1}^d`, the pair-weighted sum
/// over observations of `l_j(a) l_j(a + delta)` (times `Y_j^2` for `pair_square`), where `l_j`
/// are the multilinear weights of observation `j`. They are what the covariance path subtracts
/// to exclude same-observation pairs.
#[derive(Debug, Clone)]
pub struct BinnedData {
    pub shape: Vec<usize>,
    pub weight: Vec<f64>,
    pub value: Vec<f64>,
    pub square: Vec<f64>,
    pub samples: Vec<SampleBins>,
    pub pair_count: Vec<f64>,
    pub pair_square: Vec<f64>,
    pub n_samples: usize,
}

impl BinnedData {
    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    /// Number of neighbour offsets, `3^d`.
    pub fn offsets(&self) -> usize {
        3usize.pow(self.dim() as u32)
    }

    pub fn total_weight(&self) -> f64 {
        self.weight.iter().sum()
    }
}

/// Offset `delta` in `{-1,0,1}^d` encoded base 3, first axis most significant.
pub fn offset_code(delta: &[isize]) -> usize {
    delta.iter().fold(0, |acc, &e| acc * 3 + (e + 1) as usize)
}

pub fn offset_decode(mut code: usize, d: usize, out: &mut [isize]) {
    for k in (0..d).rev() {
        out[k] = (code % 3) as isize - 1;
        code /= 3;
    }
}

struct Contribution {
    nodes: Vec<usize>,
    counts: Vec<f64>,
    sums: Vec<f64>,
    squares: Vec<f64>,
    // (node, offset code, l_a * l_b, l_a * l_b * y^2)
    self_pairs: Vec<(usize, usize, f64, f64)>,
}

pub fn linear_bin(dataset: &FunctionalDataset, grid: &EvaluationGrid) -> Result<BinnedData> {
    grid.require_equispaced()?;
    let d = dataset.dim();
    if d != grid.dim() {
        return Err(FpcaError::DimensionMismatch { expected: grid.dim(), found: d });
    }
    let m = grid.len();
    let contributions: Vec<Contribution> = dataset
        .samples()
        .par_iter()
        .map(|s| {
            let mut entries: Vec<(usize, f64, f64, f64)> = Vec::with_capacity(s.len() * (1 << d));
            let mut self_pairs = Vec::new();
            let mut corner: Vec<(usize, f64)> = Vec::with_capacity(1 << d);
            for j in 0..s.len() {
                let x = s.coord(j, d);
                let y = s.values()[j];
                let loc = grid
                    .locate(x)
                    .ok_or_else(|| FpcaError::ObservationOutsideGrid { sample: s.id.clone(), obs: j })?;
                corner.clear();
                grid.for_each_corner(&loc, |idx, w| corner.push((idx, w)));
                for &(idx, w) in &corner {
                    entries.push((idx, w, w * y, w * y * y));
                }
                if s.len() >= 2 {
                    for &(a, wa) in &corner {
                        for &(b, wb) in &corner {
                            let code = offset_between(grid, a, b);
                            let p = wa * wb;
                            self_pairs.push((a, code, p, p * y * y));
                        }
                    }
                }
            }
            entries.sort_by_key(|e| e.0);
            let mut nodes = Vec::new();
            let mut counts = Vec::new();
            let mut sums = Vec::new();
            let mut squares = Vec::new();
            for (idx, w, wy, wyy) in entries {
                if nodes.last() == Some(&idx) {
                    *counts.last_mut().unwrap() += w;
                    *sums.last_mut().unwrap() += wy;
                    *squares.last_mut().unwrap() += wyy;
                } else {
                    nodes.push(idx);
                    counts.push(w);
                    sums.push(wy);
                    squares.push(wyy);
                }
            }
            Ok(Contribution { nodes, counts, sums, squares, self_pairs })
        })
        .collect::<Result<Vec<_>>>()?;

    let noff = 3usize.pow(d as u32);
    let mut weight = vec![0.0; m];
    let mut value = vec![0.0; m];
    let mut square = vec![0.0; m];
    let mut pair_count = vec![0.0; m * noff];
    let mut pair_square = vec![0.0; m * noff];
    let mut samples = Vec::new();
    for (i, (c, s)) in contributions.into_iter().zip(dataset.samples()).enumerate() {
        let ni = s.len() as f64;
        let w = 1.0 / ni;
        for k in 0..c.nodes.len() {
            weight[c.nodes[k]] += w * c.counts[k];
            value[c.nodes[k]] += w * c.sums[k];
            square[c.nodes[k]] += w * c.squares[k];
        }
        if s.len() >= 2 {
            let pw = 1.0 / (ni * (ni - 1.0));
            for &(a, code, p, py) in &c.self_pairs {
                pair_count[a * noff + code] += pw * p;
                pair_square[a * noff + code] += pw * py;
            }
            samples.push(SampleBins { sample: i, pair_weight: pw, nodes: c.nodes, counts: c.counts, sums: c.sums });
        }
    }
    Ok(BinnedData {
        shape: grid.shape().to_vec(),
        weight,
        value,
        square,
        samples,
        pair_count,
        pair_square,
        n_samples: dataset.n(),
    })
}

fn offset_between(grid: &EvaluationGrid, a: usize, b: usize) -> usize {
    let d = grid.dim();
    let mut code = 0;
    let (mut ra, mut rb) = (a, b);
    for k in 0..d {
        let st = grid.strides()[k];
        let ia = ra / st;
        let ib = rb / st;
        ra %= st;
        rb %= st;
        code = code * 3 + (ib as isize - ia as isize + 1) as usize;
    }
    code
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Sample;

    #[test]
    fn node_and_midpoint() {
        let g = EvaluationGrid::uniform(&[(0.0, 1.0, 5)]).unwrap();
        let ds = FunctionalDataset::new(1, vec![Sample::new("a", vec![0.5], vec![2.0])]).unwrap();
        let b = linear_bin(&ds, &g).unwrap();
        assert_eq!(b.weight, vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        let ds = FunctionalDataset::new(1, vec![Sample::new("a", vec![0.125], vec![2.0])]).unwrap();
        let b = linear_bin(&ds, &g).unwrap();
        assert_eq!(b.weight, vec![0.5, 0.5, 0.0, 0.0, 0.0]);
        assert_eq!(b.value, vec![1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn boundary_and_outside() {
        let g = EvaluationGrid::uniform(&[(0.0, 1.0, 5)]).unwrap();
        let ds = FunctionalDataset::new(1, vec![Sample::new("a", vec![1.0, 0.0], vec![2.0, 1.0])]).unwrap();
        let b = linear_bin(&ds, &g).unwrap();
        assert_eq!(b.weight, vec![0.5, 0.0, 0.0, 0.0, 0.5]);
        let ds = FunctionalDataset::new(1, vec![Sample::new("a", vec![1.5], vec![2.0])]).unwrap();
        assert!(matches!(linear_bin(&ds, &g), Err(FpcaError::ObservationOutsideGrid { .. })));
    }

    #[test]
    fn self_pair_correction_two_nodes() {
        let g = EvaluationGrid::uniform(&[(0.0, 1.0, 5)]).unwrap();
        let ds = FunctionalDataset::new(1, vec![Sample::new("a", vec![0.25, 0.75], vec![1.0, 3.0])]).unwrap();
        let b = linear_bin(&ds, &g).unwrap();
        // N_i = 2: pair weight 1/2; self pairs sit on the zero offset only.
        assert_eq!(b.pair_count[3 + 1], 0.5);
        assert_eq!(b.pair_count[3 * 3 + 1], 0.5);
        assert_eq!(b.pair_square[3 * 3 + 1], 4.5);
        assert_eq!(b.pair_count.iter().sum::<f64>(), 1.0);
        assert_eq!(b.samples[0].counts, vec![1.0, 1.0]);
    }
}
