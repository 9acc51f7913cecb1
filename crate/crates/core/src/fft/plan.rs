//! Overlapping block partitions of a grid.

use crate::error::{FpcaError, Result};
use crate::fft::conv::IndexBox;

/// Block cores tiling a grid, plus a per-axis halo in nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPlan {
    shape: Vec<usize>,
    cores: Vec<IndexBox>,
    halo: Vec<usize>,
}

impl BlockPlan {
    pub fn new(shape: Vec<usize>, cores: Vec<IndexBox>, halo: Vec<usize>) -> Result<Self> {
        let d = shape.len();
        if halo.len() != d {
            return Err(FpcaError::InvalidPlan(format!("halo has {} entries for {d} axes", halo.len())));
        }
        if cores.is_empty() {
            return Err(FpcaError::InvalidPlan("no blocks".into()));
        }
        for c in &cores {
            if c.lo.len() != d || c.hi.len() != d || (0..d).any(|k| c.lo[k] >= c.hi[k] || c.hi[k] > shape[k]) {
                return Err(FpcaError::InvalidPlan(format!("block {c:?} is empty or exceeds the grid")));
            }
        }
        let total: usize = shape.iter().product();
        let covered: usize = cores.iter().map(IndexBox::len).sum();
        if covered != total {
            return Err(FpcaError::InvalidPlan("block cores do not tile the grid".into()));
        }
        for (i, a) in cores.iter().enumerate() {
            for b in &cores[i + 1..] {
                if (0..d).all(|k| a.lo[k] < b.hi[k] && b.lo[k] < a.hi[k]) {
                    return Err(FpcaError::InvalidPlan("block cores overlap".into()));
                }
            }
        }
        for k in 0..d {
            let split = cores.iter().any(|c| c.lo[k] > 0 || c.hi[k] < shape[k]);
            if split && cores.iter().any(|c| c.hi[k] - c.lo[k] < halo[k]) {
                return Err(FpcaError::BlockTooSmall { axis: k });
            }
        }
        Ok(BlockPlan { shape, cores, halo })
    }

    /// A single block covering the whole grid.
    pub fn single(shape: &[usize]) -> Self {
        BlockPlan { shape: shape.to_vec(), cores: vec![IndexBox::full(shape)], halo: shape.to_vec() }
    }

    /// Splits each axis into `blocks[k]` nearly equal cores.
    pub fn uniform(shape: &[usize], blocks: &[usize], halo: &[usize]) -> Result<Self> {
        let d = shape.len();
        if blocks.len() != d {
            return Err(FpcaError::InvalidPlan(format!("{} block counts for {d} axes", blocks.len())));
        }
        let cuts: Vec<Vec<usize>> = (0..d)
            .map(|k| {
                let b = blocks[k].clamp(1, shape[k]);
                (0..=b).map(|j| j * shape[k] / b).collect()
            })
            .collect();
        let counts: Vec<usize> = cuts.iter().map(|c| c.len() - 1).collect();
        let nblocks: usize = counts.iter().product();
        let mut cores = Vec::with_capacity(nblocks);
        let mut cur = vec![0; d];
        for _ in 0..nblocks {
            cores.push(IndexBox {
                lo: (0..d).map(|k| cuts[k][cur[k]]).collect(),
                hi: (0..d).map(|k| cuts[k][cur[k] + 1]).collect(),
            });
            for k in (0..d).rev() {
                cur[k] += 1;
                if cur[k] < counts[k] {
                    break;
                }
                cur[k] = 0;
            }
        }
        Self::new(shape.to_vec(), cores, halo.to_vec())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn cores(&self) -> &[IndexBox] {
        &self.cores
    }

    pub fn halo(&self) -> &[usize] {
        &self.halo
    }

    pub fn is_single(&self) -> bool {
        self.cores.len() == 1
    }

    /// Checks the plan against a grid shape and per-axis stencil radii.
    pub fn validate(&self, shape: &[usize], radius: &[usize]) -> Result<()> {
        if shape != self.shape.as_slice() {
            return Err(FpcaError::InvalidPlan(format!("plan shape {:?} does not match grid shape {shape:?}", self.shape)));
        }
        if self.is_single() {
            return Ok(());
        }
        for (axis, (&halo, &radius)) in self.halo.iter().zip(radius).enumerate() {
            if halo < radius {
                return Err(FpcaError::HaloTooSmall { axis, halo, radius });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_tiles() {
        let p = BlockPlan::uniform(&[10, 7], &[2, 3], &[2, 2]).unwrap();
        assert_eq!(p.cores().len(), 6);
        assert!(matches!(BlockPlan::uniform(&[10], &[5], &[3]), Err(FpcaError::BlockTooSmall { axis: 0 })));
        assert!(matches!(p.validate(&[10, 7], &[3, 1]), Err(FpcaError::HaloTooSmall { axis: 0, .. })));
        assert!(p.validate(&[10, 7], &[2, 2]).is_ok());
    }

    #[test]
    fn rejects_gaps_and_overlaps() {
        let a = IndexBox { lo: vec![0], hi: vec![5] };
        let b = IndexBox { lo: vec![4], hi: vec![10] };
        assert!(BlockPlan::new(vec![10], vec![a.clone(), b], vec![1]).is_err());
        let c = IndexBox { lo: vec![6], hi: vec![10] };
        assert!(BlockPlan::new(vec![10], vec![a, c], vec![1]).is_err());
    }
}
