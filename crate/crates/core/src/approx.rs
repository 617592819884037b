//! Affine token-wise maps `y = W·x + b` standing in for skipped blocks and
//! for the static-token bypass, plus their ridge least-squares fit.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::scalar::Scalar;
use crate::tensor::{Matrix, Result, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearApproximator<T> {
    /// `out_dim × in_dim`.
    weight: Matrix<T>,
    bias: Vec<T>,
    /// `weightᵀ`, kept so application is a plain row-major matmul.
    weight_t: Matrix<T>,
}

impl<T: Scalar> LinearApproximator<T> {
    pub fn new(weight: Matrix<T>, bias: Vec<T>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(TensorError::Shape { op: "LinearApproximator::new", lhs: weight.shape(), rhs: (bias.len(), 1) });
        }
        if !weight.is_finite() || bias.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { row: 0, col: 0 });
        }
        let weight_t = weight.transpose();
        Ok(Self { weight, bias, weight_t })
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(Matrix::identity(dim), vec![T::zero(); dim]).expect("identity is well-formed")
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn weight(&self) -> &Matrix<T> {
        &self.weight
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    /// Row-wise `W·x + b`.
    pub fn apply(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.in_dim() {
            return Err(TensorError::Shape { op: "LinearApproximator::apply", lhs: x.shape(), rhs: self.weight.shape() });
        }
        let mut y = x.matmul(&self.weight_t)?;
        y.add_row_broadcast(&self.bias)?;
        Ok(y)
    }

    /// FLOPs of applying the map to `n` rows.
    pub fn flops(&self, n: usize) -> u64 {
        (n as u64) * (2 * self.in_dim() as u64 * self.out_dim() as u64 + self.out_dim() as u64)
    }
}

/// Per-layer block substitutes plus the static-token bypass.
#[derive(Debug, Clone, PartialEq)]
pub struct ApproximatorSet<T> {
    pub layers: Vec<LinearApproximator<T>>,
    pub bypass: LinearApproximator<T>,
}

impl<T: Scalar> ApproximatorSet<T> {
    pub fn identity(layers: usize, dim: usize) -> Self {
        Self { layers: vec![LinearApproximator::identity(dim); layers], bypass: LinearApproximator::identity(dim) }
    }

    pub fn cast<U: Scalar>(&self) -> ApproximatorSet<U> {
        let c = |a: &LinearApproximator<T>| {
            LinearApproximator::new(a.weight().cast(), a.bias().iter().map(|v| U::from_f64_lossy(v.to_f64_lossless())).collect())
                .expect("cast preserves shape")
        };
        ApproximatorSet { layers: self.layers.iter().map(c).collect(), bypass: c(&self.bypass) }
    }
}

/// Why a fit fell back to the identity map.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum FitWarning {
    Underdetermined { rows: usize, needed: usize },
    Singular,
}

/// Accumulates the normal equations of `y ≈ W·x + b` one row pair at a time.
#[derive(Debug, Clone)]
pub struct RidgeAccumulator {
    in_dim: usize,
    out_dim: usize,
    rows: usize,
    /// `(in+1) × (in+1)` Gram matrix of `[x, 1]`.
    gram: DMatrix<f64>,
    /// `(in+1) × out` cross moments.
    cross: DMatrix<f64>,
}

impl RidgeAccumulator {
    pub fn new(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            rows: 0,
            gram: DMatrix::zeros(in_dim + 1, in_dim + 1),
            cross: DMatrix::zeros(in_dim + 1, out_dim),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Adds every row of `inputs` paired with the same row of `outputs`.
    pub fn push<T: Scalar>(&mut self, inputs: &Matrix<T>, outputs: &Matrix<T>) -> Result<()> {
        if inputs.rows() != outputs.rows() || inputs.cols() != self.in_dim || outputs.cols() != self.out_dim {
            return Err(TensorError::Shape { op: "RidgeAccumulator::push", lhs: inputs.shape(), rhs: outputs.shape() });
        }
        let p = self.in_dim;
        let mut aug = vec![0.0; p + 1];
        for r in 0..inputs.rows() {
            for (a, v) in aug.iter_mut().zip(inputs.row(r)) {
                *a = v.to_f64_lossless();
            }
            aug[p] = 1.0;
            for i in 0..=p {
                let ai = aug[i];
                if ai == 0.0 {
                    continue;
                }
                for (j, aj) in aug.iter().enumerate().take(p + 1).skip(i) {
                    self.gram[(i, j)] += ai * aj;
                }
                for (j, y) in outputs.row(r).iter().enumerate() {
                    self.cross[(i, j)] += ai * y.to_f64_lossless();
                }
            }
        }
        self.rows += inputs.rows();
        Ok(())
    }

    /// Solves `(G + λ·diag(1,…,1,0))·Θ = C`; the intercept is not penalized.
    /// Returns the `(in+1) × out` coefficient matrix (intercept last), or
    /// `None` if the system is not positive definite or its smallest Cholesky
    /// pivot is below `min_pivot_ratio` times the largest.
    pub fn solve_theta(&self, ridge: f64, min_pivot_ratio: f64) -> Option<DMatrix<f64>> {
        let p = self.in_dim;
        let mut g = self.gram.clone();
        for i in 0..=p {
            for j in 0..i {
                g[(i, j)] = g[(j, i)];
            }
        }
        for i in 0..p {
            g[(i, i)] += ridge;
        }
        let chol = g.cholesky()?;
        let diag = chol.l_dirty().diagonal();
        let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v.abs()), hi.max(v.abs())));
        if !(lo > min_pivot_ratio * hi) {
            return None;
        }
        let theta = chol.solve(&self.cross);
        theta.iter().all(|v| v.is_finite()).then_some(theta)
    }

    /// Fits the affine map. Falls back to the identity (square maps) or the
    /// zero map with a warning when there are fewer rows than unknowns per
    /// output or the system is singular.
    pub fn solve<T: Scalar>(&self, ridge: f64) -> (LinearApproximator<T>, Option<FitWarning>) {
        let p = self.in_dim;
        let fallback = || {
            if self.in_dim == self.out_dim {
                LinearApproximator::identity(self.in_dim)
            } else {
                LinearApproximator::new(Matrix::zeros(self.out_dim, self.in_dim), vec![T::zero(); self.out_dim]).expect("zero map")
            }
        };
        if self.rows < p + 1 {
            return (fallback(), Some(FitWarning::Underdetermined { rows: self.rows, needed: p + 1 }));
        }
        let Some(theta) = self.solve_theta(ridge, 1e-12) else {
            return (fallback(), Some(FitWarning::Singular));
        };
        let weight = Matrix::from_fn(self.out_dim, p, |o, i| T::from_f64_lossy(theta[(i, o)]));
        let bias = (0..self.out_dim).map(|o| T::from_f64_lossy(theta[(p, o)])).collect();
        match LinearApproximator::new(weight, bias) {
            Ok(a) => (a, None),
            Err(_) => (fallback(), Some(FitWarning::Singular)),
        }
    }
}
