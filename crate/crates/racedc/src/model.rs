//! Regression mean functions used by the nonlinear pipeline.

use crate::linalg::{dot, Mat};

/// A regression function `f(x, β)` with its gradient in `β`.
///
/// Implementations must be pure: the value and gradient may depend only on
/// the arguments, so fits and projections stay reproducible.
pub trait RegressionModel: Sync {
    fn value(&self, x: &[f64], beta: &[f64]) -> f64;

    /// Writes `∂f/∂β` at `(x, β)` into `grad`.
    fn gradient(&self, x: &[f64], beta: &[f64], grad: &mut [f64]);

    /// Rowwise evaluation over a design matrix.
    fn value_rows(&self, x: &Mat, beta: &[f64]) -> Vec<f64> {
        (0..x.n_rows()).map(|i| self.value(x.row(i), beta)).collect()
    }

    /// Stacked rowwise gradients: an `m×p` Jacobian of the mean vector.
    fn jacobian_rows(&self, x: &Mat, beta: &[f64]) -> Mat {
        let mut j = Mat::zeros(x.n_rows(), beta.len());
        for i in 0..x.n_rows() {
            self.gradient(x.row(i), beta, j.row_mut(i));
        }
        j
    }
}

/// `f(x, β) = (xᵀβ + offset)²`, the quadratic mean used by the nonlinear
/// simulation experiments (offset 2).
#[derive(Debug, Clone, Copy)]
pub struct ShiftedSquare {
    pub offset: f64,
}

impl Default for ShiftedSquare {
    fn default() -> Self {
        ShiftedSquare { offset: 2.0 }
    }
}

impl RegressionModel for ShiftedSquare {
    fn value(&self, x: &[f64], beta: &[f64]) -> f64 {
        let u = dot(x, beta) + self.offset;
        u * u
    }

    fn gradient(&self, x: &[f64], beta: &[f64], grad: &mut [f64]) {
        let u = dot(x, beta) + self.offset;
        for (g, xi) in grad.iter_mut().zip(x) {
            *g = 2.0 * u * xi;
        }
    }
}

/// `f(x, β) = xᵀβ`; turns the nonlinear machinery into plain least squares,
/// which several consistency checks rely on.
#[derive(Debug, Clone, Copy, Default)]
pub struct LinearMean;

impl RegressionModel for LinearMean {
    fn value(&self, x: &[f64], beta: &[f64]) -> f64 {
        dot(x, beta)
    }

    fn gradient(&self, x: &[f64], _beta: &[f64], grad: &mut [f64]) {
        grad.copy_from_slice(x);
    }
}
