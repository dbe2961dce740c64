//! Discrete calculus on square `p × p` grids.
//!
//! The gradient uses forward differences with a zero difference on the last
//! row/column (Neumann boundary). The divergence is its exact negative
//! adjoint, `<grad u, v> = -<u, div v>`, so `‖div‖² = ‖grad‖² <= 8`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solver::Vector;

/// A `p × p` image stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarField {
    width: usize,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(width: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 {
            return Err(Error::Dimension("grid width must be at least 1".into()));
        }
        if values.len() != width * width {
            return Err(Error::Dimension(format!(
                "{} values do not fill a {width}x{width} grid",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("field values must be finite".into()));
        }
        Ok(ScalarField { width, values })
    }

    pub fn zeros(width: usize) -> Self {
        ScalarField {
            width,
            values: vec![0.0; width * width],
        }
    }

    pub fn constant(width: usize, value: f64) -> Self {
        ScalarField {
            width,
            values: vec![value; width * width],
        }
    }

    pub fn from_fn(width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(width * width);
        for i in 0..width {
            for j in 0..width {
                values.push(f(i, j));
            }
        }
        ScalarField { width, values }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.values[i * self.width + j] = value;
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn dist_sq(&self, other: &ScalarField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

impl Vector for ScalarField {
    fn dot(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.width, other.width);
        self.values.dot(&other.values)
    }

    fn axpy(&mut self, a: f64, x: &Self) {
        debug_assert_eq!(self.width, x.width);
        self.values.axpy(a, &x.values);
    }

    fn scale(&mut self, a: f64) {
        self.values.scale(a);
    }
}

/// A field of 2-vectors on a `p × p` grid, stored row-major as `(x, y)` pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VectorField {
    width: usize,
    values: Vec<[f64; 2]>,
}

impl VectorField {
    pub fn new(width: usize, values: Vec<[f64; 2]>) -> Result<Self> {
        if width == 0 {
            return Err(Error::Dimension("grid width must be at least 1".into()));
        }
        if values.len() != width * width {
            return Err(Error::Dimension(format!(
                "{} vectors do not fill a {width}x{width} grid",
                values.len()
            )));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("field values must be finite".into()));
        }
        Ok(VectorField { width, values })
    }

    pub fn zeros(width: usize) -> Self {
        VectorField {
            width,
            values: vec![[0.0; 2]; width * width],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[[f64; 2]] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [[f64; 2]] {
        &mut self.values
    }

    pub fn get(&self, i: usize, j: usize) -> [f64; 2] {
        self.values[i * self.width + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: [f64; 2]) {
        self.values[i * self.width + j] = value;
    }

    /// Per-pixel Euclidean norms.
    pub fn pointwise_norms(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().map(|&[x, y]| x.hypot(y))
    }
}

impl Vector for VectorField {
    fn dot(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.width, other.width);
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a[0] * b[0] + a[1] * b[1])
            .sum()
    }

    fn axpy(&mut self, a: f64, x: &Self) {
        debug_assert_eq!(self.width, x.width);
        for (s, x) in self.values.iter_mut().zip(&x.values) {
            s[0] += a * x[0];
            s[1] += a * x[1];
        }
    }

    fn scale(&mut self, a: f64) {
        for s in self.values.iter_mut() {
            s[0] *= a;
            s[1] *= a;
        }
    }
}

/// Forward-difference gradient: x along columns, y along rows.
pub fn grad(u: &ScalarField) -> VectorField {
    let p = u.width;
    let mut out = VectorField::zeros(p);
    for i in 0..p {
        for j in 0..p {
            let here = u.get(i, j);
            let dx = if j + 1 < p {
                u.get(i, j + 1) - here
            } else {
                0.0
            };
            let dy = if i + 1 < p {
                u.get(i + 1, j) - here
            } else {
                0.0
            };
            out.values[i * p + j] = [dx, dy];
        }
    }
    out
}

/// Discrete divergence, the transpose stencil of [`grad`] with a minus sign.
pub fn div(v: &VectorField) -> ScalarField {
    let p = v.width;
    let mut out = ScalarField::zeros(p);
    for i in 0..p {
        for j in 0..p {
            let [vx, vy] = v.get(i, j);
            let mut acc = 0.0;
            if j + 1 < p {
                acc += vx;
            }
            if j > 0 {
                acc -= v.get(i, j - 1)[0];
            }
            if i + 1 < p {
                acc += vy;
            }
            if i > 0 {
                acc -= v.get(i - 1, j)[1];
            }
            out.values[i * p + j] = acc;
        }
    }
    out
}

/// `Σ_j ‖v_j‖₂`
pub fn norm_1_2(v: &VectorField) -> f64 {
    v.pointwise_norms().sum()
}

/// `max_j ‖v_j‖₂`
pub fn norm_inf_2(v: &VectorField) -> f64 {
    v.pointwise_norms().fold(0.0, f64::max)
}

/// Isotropic total variation `‖grad u‖_{1,2}`.
pub fn tv(u: &ScalarField) -> f64 {
    norm_1_2(&grad(u))
}

/// Power-iteration estimate of `‖grad‖²` (the largest eigenvalue of
/// `-div ∘ grad`) on a `p × p` grid.
pub fn grad_norm_sq_estimate(p: usize, iterations: usize) -> f64 {
    // Start from a checkerboard-weighted ramp so the top eigenvector is not
    // orthogonal to the start vector.
    let mut u = ScalarField::from_fn(p, |i, j| {
        let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
        sign * (1.0 + 0.1 * i as f64 + 0.01 * j as f64)
    });
    let mut estimate = 0.0;
    for _ in 0..iterations {
        let norm = u.norm_sq().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        u.scale(1.0 / norm);
        let mut w = div(&grad(&u));
        w.scale(-1.0);
        estimate = u.dot(&w);
        u = w;
    }
    estimate
}
