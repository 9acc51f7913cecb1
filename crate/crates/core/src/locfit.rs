//! Small weighted least-squares systems solved at each evaluation point.

/// Largest parameter count supported: a covariance fit in four dimensions.
pub const MAX_PARAMS: usize = 9;
pub const MAX_DIM: usize = 4;

/// Relative ridge added to the slope entries of the diagonal.
pub const RIDGE: f64 = 1e-10;
/// Smallest acceptable pivot of the Jacobi-scaled Cholesky factor.
const PIVOT_TOL: f64 = 1e-9;

/// Normal equations `A b = r` of a local linear fit. Parameter 0 is the intercept.
#[derive(Clone)]
pub struct LocalSystem {
    pub p: usize,
    pub a: [f64; MAX_PARAMS * MAX_PARAMS],
    pub r: [f64; MAX_PARAMS],
}

/// Outcome of a local fit: the intercept and `[A^-1]_00`, the self-influence factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LocalFit {
    Linear { value: f64, h00: f64 },
    Constant { value: f64, h00: f64 },
    Empty,
}

impl LocalFit {
    pub fn value(&self) -> Option<f64> {
        match *self {
            LocalFit::Linear { value, .. } | LocalFit::Constant { value, .. } => Some(value),
            LocalFit::Empty => None,
        }
    }

    pub fn h00(&self) -> Option<f64> {
        match *self {
            LocalFit::Linear { h00, .. } | LocalFit::Constant { h00, .. } => Some(h00),
            LocalFit::Empty => None,
        }
    }
}

impl LocalSystem {
    pub fn new(p: usize) -> Self {
        assert!(p <= MAX_PARAMS);
        LocalSystem { p, a: [0.0; MAX_PARAMS * MAX_PARAMS], r: [0.0; MAX_PARAMS] }
    }

    pub fn clear(&mut self) {
        self.a = [0.0; MAX_PARAMS * MAX_PARAMS];
        self.r = [0.0; MAX_PARAMS];
    }

    /// Adds one weighted observation with design row `(1, x...)`.
    #[inline]
    pub fn add(&mut self, w: f64, x: &[f64], y: f64) {
        let p = self.p;
        let mut row = [0.0; MAX_PARAMS];
        row[0] = 1.0;
        row[1..p].copy_from_slice(&x[..p - 1]);
        for i in 0..p {
            let wi = w * row[i];
            self.r[i] += wi * y;
            for j in i..p {
                self.a[i * MAX_PARAMS + j] += wi * row[j];
            }
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i <= j {
            self.a[i * MAX_PARAMS + j]
        } else {
            self.a[j * MAX_PARAMS + i]
        }
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        self.a[i * MAX_PARAMS + j] = v;
    }

    /// Solves for the intercept. Windows with `A_00 <= min_mass` are empty; a numerically
    /// singular system falls back to the local constant fit.
    pub fn solve(&self, min_mass: f64) -> LocalFit {
        let p = self.p;
        let a00 = self.a[0];
        if !(a00 > min_mass) || !a00.is_finite() {
            return LocalFit::Empty;
        }
        let constant = LocalFit::Constant { value: self.r[0] / a00, h00: 1.0 / a00 };
        if p == 1 {
            return constant;
        }
        // Scaled by the slope entries alone, so points at the target leave it unchanged.
        let trace: f64 = (1..p).map(|i| self.a[i * MAX_PARAMS + i]).sum();
        let eps = RIDGE * trace;
        // Jacobi scaling, then Cholesky of the scaled upper triangle.
        let mut scale = [0.0; MAX_PARAMS];
        for i in 0..p {
            let dii = self.a[i * MAX_PARAMS + i] + if i > 0 { eps } else { 0.0 };
            if !(dii > 0.0) {
                return constant;
            }
            scale[i] = 1.0 / dii.sqrt();
        }
        let mut l = [0.0; MAX_PARAMS * MAX_PARAMS];
        for i in 0..p {
            for j in 0..=i {
                let ridge = if i == j && i > 0 { eps * scale[i] * scale[i] } else { 0.0 };
                let mut s = self.get(j, i) * scale[i] * scale[j];
                for k in 0..j {
                    s -= l[i * MAX_PARAMS + k] * l[j * MAX_PARAMS + k];
                }
                if i == j {
                    // The ridge must not mask a singular design.
                    if !(s > PIVOT_TOL) {
                        return constant;
                    }
                    s += ridge;
                    l[i * MAX_PARAMS + i] = s.sqrt();
                } else {
                    l[i * MAX_PARAMS + j] = s / l[j * MAX_PARAMS + j];
                }
            }
        }
        let mut z = [0.0; MAX_PARAMS];
        for i in 0..p {
            z[i] = self.r[i] * scale[i];
        }
        let b = chol_solve(&l, p, z);
        let value = b[0] * scale[0];
        let mut e0 = [0.0; MAX_PARAMS];
        e0[0] = 1.0;
        let u = chol_solve(&l, p, e0);
        let h00 = u[0] * scale[0] * scale[0];
        if !value.is_finite() {
            return constant;
        }
        LocalFit::Linear { value, h00 }
    }
}

fn chol_solve(l: &[f64; MAX_PARAMS * MAX_PARAMS], p: usize, mut z: [f64; MAX_PARAMS]) -> [f64; MAX_PARAMS] {
    for i in 0..p {
        let mut s = z[i];
        for k in 0..i {
            s -= l[i * MAX_PARAMS + k] * z[k];
        }
        z[i] = s / l[i * MAX_PARAMS + i];
    }
    for i in (0..p).rev() {
        let mut s = z[i];
        for k in i + 1..p {
            s -= l[k * MAX_PARAMS + i] * z[k];
        }
        z[i] = s / l[i * MAX_PARAMS + i];
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproduces_affine_data() {
        let mut s = LocalSystem::new(3);
        for (x, y) in [([0.1, 0.2], 0.0), ([-0.5, 0.3], 0.0), ([0.2, -0.7], 0.0), ([0.9, 0.9], 0.0)] {
            let yv = 2.0 + 3.0 * x[0] - x[1] + y;
            s.add(0.7, &x, yv);
        }
        let v = s.solve(0.0).value().unwrap();
        assert!((v - 2.0).abs() < 1e-9);
    }

    #[test]
    fn constants_exact_and_fallbacks() {
        let mut s = LocalSystem::new(2);
        s.add(1.0, &[0.3], 2.0);
        s.add(0.5, &[0.3], 2.0);
        // Both points share a location: slope is unidentifiable.
        assert_eq!(s.solve(0.0), LocalFit::Constant { value: 2.0, h00: 1.0 / 1.5 });
        assert_eq!(LocalSystem::new(2).solve(0.0), LocalFit::Empty);
        let mut s = LocalSystem::new(2);
        for x in [-0.5, 0.1, 0.4] {
            s.add(1.0, &[x], 2.0);
        }
        assert!((s.solve(0.0).value().unwrap() - 2.0).abs() < 1e-14);
    }
}
