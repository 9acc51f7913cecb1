//! Functional datasets: samples of scattered `(coordinate, value)` observations.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{FpcaError, Result};

/// One subject's observations. Coordinates are stored flat, `dim` values per observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    coords: Vec<f64>,
    values: Vec<f64>,
}

impl Sample {
    pub fn new(id: impl Into<String>, coords: Vec<f64>, values: Vec<f64>) -> Self {
        Sample { id: id.into(), coords, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn coord(&self, j: usize, dim: usize) -> &[f64] {
        &self.coords[j * dim..(j + 1) * dim]
    }

    pub fn with_values(&self, values: Vec<f64>) -> Sample {
        Sample { id: self.id.clone(), coords: self.coords.clone(), values }
    }

    /// Keeps only the observations for which `keep(j)` holds.
    pub fn filtered(&self, dim: usize, mut keep: impl FnMut(usize) -> bool) -> Sample {
        let mut coords = Vec::new();
        let mut values = Vec::new();
        for j in 0..self.len() {
            if keep(j) {
                coords.extend_from_slice(self.coord(j, dim));
                values.push(self.values[j]);
            }
        }
        Sample { id: self.id.clone(), coords, values }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalDataset {
    dim: usize,
    samples: Vec<Sample>,
    bounds: Vec<(f64, f64)>,
}

impl FunctionalDataset {
    /// Validates the samples and takes the bounding box from the data.
    pub fn new(dim: usize, samples: Vec<Sample>) -> Result<Self> {
        if dim == 0 {
            return Err(FpcaError::InvalidDataset("dimension must be at least 1".into()));
        }
        if samples.is_empty() {
            return Err(FpcaError::InvalidDataset("no samples".into()));
        }
        let mut ids = HashSet::new();
        let mut bounds = vec![(f64::INFINITY, f64::NEG_INFINITY); dim];
        for s in &samples {
            if !ids.insert(s.id.as_str()) {
                return Err(FpcaError::InvalidDataset(format!("duplicate sample id '{}'", s.id)));
            }
            if s.is_empty() {
                return Err(FpcaError::InvalidDataset(format!("sample '{}' has no observations", s.id)));
            }
            if s.coords.len() != s.values.len() * dim {
                return Err(FpcaError::DimensionMismatch { expected: s.values.len() * dim, found: s.coords.len() });
            }
            if let Some(j) = s.values.iter().position(|v| !v.is_finite()) {
                return Err(FpcaError::InvalidDataset(format!("sample '{}' observation {j} has a non-finite value", s.id)));
            }
            for (j, c) in s.coords.chunks(dim).enumerate() {
                for k in 0..dim {
                    if !c[k].is_finite() {
                        return Err(FpcaError::InvalidDataset(format!(
                            "sample '{}' observation {j} has a non-finite coordinate",
                            s.id
                        )));
                    }
                    bounds[k].0 = bounds[k].0.min(c[k]);
                    bounds[k].1 = bounds[k].1.max(c[k]);
                }
            }
        }
        Ok(FunctionalDataset { dim, samples, bounds })
    }

    /// Like [`new`](Self::new) with an explicit bounding box that must contain every coordinate.
    pub fn with_bounds(dim: usize, samples: Vec<Sample>, bounds: Vec<(f64, f64)>) -> Result<Self> {
        let mut ds = Self::new(dim, samples)?;
        if bounds.len() != dim {
            return Err(FpcaError::DimensionMismatch { expected: dim, found: bounds.len() });
        }
        for (k, (&(lo, hi), &(dlo, dhi))) in bounds.iter().zip(&ds.bounds).enumerate() {
            if !(lo <= dlo && dhi <= hi) {
                return Err(FpcaError::InvalidDataset(format!("data on axis {k} extend beyond the bounding box")));
            }
        }
        ds.bounds = bounds;
        Ok(ds)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    pub fn n(&self) -> usize {
        self.samples.len()
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn extents(&self) -> Vec<f64> {
        self.bounds.iter().map(|(lo, hi)| hi - lo).collect()
    }

    pub fn total_observations(&self) -> usize {
        self.samples.iter().map(Sample::len).sum()
    }

    pub fn median_observations(&self) -> f64 {
        let mut n: Vec<usize> = self.samples.iter().map(Sample::len).collect();
        n.sort_unstable();
        let m = n.len();
        if m % 2 == 1 {
            n[m / 2] as f64
        } else {
            0.5 * (n[m / 2 - 1] + n[m / 2]) as f64
        }
    }

    pub fn has_pairs(&self) -> bool {
        self.samples.iter().any(|s| s.len() >= 2)
    }

    /// Maps coordinates to `[0, 1]^d` using the bounding box and returns the map back to original units.
    pub fn normalize_domain(&self) -> Result<(FunctionalDataset, AffineMap)> {
        let map = AffineMap::from_bounds(&self.bounds)?;
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let mut coords = s.coords.clone();
                for c in coords.chunks_mut(self.dim) {
                    map.to_unit(c);
                }
                Sample { id: s.id.clone(), coords, values: s.values.clone() }
            })
            .collect();
        let ds = FunctionalDataset { dim: self.dim, samples, bounds: vec![(0.0, 1.0); self.dim] };
        Ok((ds, map))
    }
}

/// Per-axis affine map `x = offset + scale * u` from unit coordinates back to original units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl AffineMap {
    pub fn identity(dim: usize) -> Self {
        AffineMap { offset: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    pub fn from_bounds(bounds: &[(f64, f64)]) -> Result<Self> {
        let mut offset = Vec::with_capacity(bounds.len());
        let mut scale = Vec::with_capacity(bounds.len());
        for (axis, &(lo, hi)) in bounds.iter().enumerate() {
            if !(hi > lo) {
                return Err(FpcaError::DegenerateAxis { axis });
            }
            offset.push(lo);
            scale.push(hi - lo);
        }
        Ok(AffineMap { offset, scale })
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn is_identity(&self) -> bool {
        self.offset.iter().all(|&o| o == 0.0) && self.scale.iter().all(|&s| s == 1.0)
    }

    /// Unit coordinates to original units, in place.
    pub fn to_original(&self, u: &mut [f64]) {
        for k in 0..u.len() {
            u[k] = self.offset[k] + self.scale[k] * u[k];
        }
    }

    /// Original units to unit coordinates, in place.
    pub fn to_unit(&self, x: &mut [f64]) {
        for k in 0..x.len() {
            x[k] = (x[k] - self.offset[k]) / self.scale[k];
        }
    }

    /// Jacobian of the map to original units.
    pub fn volume_factor(&self) -> f64 {
        self.scale.iter().product()
    }
}
