//! Spatial-temporal token reduction: per-token saliency, the motion/static
//! split, the static-token affine bypass and the motion-aware blend.

use serde::{Deserialize, Serialize};

use crate::approx::LinearApproximator;
use crate::scalar::Scalar;
use crate::tensor::{Matrix, Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaliencyConfig {
    /// Tokens with saliency strictly above `tau_s` are motion tokens.
    pub tau_s: f64,
    /// Weight of the fresh bypass output in the static-token blend.
    pub gamma: f64,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        Self { tau_s: 0.05, gamma: 0.5 }
    }
}

impl SaliencyConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.tau_s >= 0.0) {
            return Err(format!("tau_s must be non-negative, got {}", self.tau_s));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenPartition {
    motion: Vec<usize>,
    stat: Vec<usize>,
    n_tokens: usize,
}

impl TokenPartition {
    /// Every token is a motion token.
    pub fn all_motion(n_tokens: usize) -> Self {
        Self { motion: (0..n_tokens).collect(), stat: Vec::new(), n_tokens }
    }

    pub fn motion_indices(&self) -> &[usize] {
        &self.motion
    }

    pub fn static_indices(&self) -> &[usize] {
        &self.stat
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn is_all_motion(&self) -> bool {
        self.stat.is_empty()
    }
}

/// Squared L2 distance of each token row between consecutive timesteps.
pub fn compute_saliency<T: Scalar>(current: &Matrix<T>, previous: &Matrix<T>) -> Result<Vec<f64>> {
    if current.shape() != previous.shape() {
        return Err(TensorError::Shape { op: "compute_saliency", lhs: current.shape(), rhs: previous.shape() });
    }
    Ok((0..current.rows())
        .map(|i| {
            current.row(i).iter().zip(previous.row(i)).fold(0.0, |acc, (a, b)| {
                let d = a.to_f64_lossless() - b.to_f64_lossless();
                acc + d * d
            })
        })
        .collect())
}

/// Motion = {i : saliency[i] > τ_s}; everything else is static.
pub fn partition_tokens(saliency: &[f64], cfg: &SaliencyConfig) -> TokenPartition {
    let (motion, stat): (Vec<usize>, Vec<usize>) = (0..saliency.len()).partition(|&i| saliency[i] > cfg.tau_s);
    TokenPartition { motion, stat, n_tokens: saliency.len() }
}

/// `W_c·x + b_c` for every static row.
pub fn static_bypass<T: Scalar>(static_rows: &Matrix<T>, approx: &LinearApproximator<T>) -> Result<Matrix<T>> {
    if approx.in_dim() != approx.out_dim() {
        return Err(TensorError::Shape { op: "static_bypass", lhs: static_rows.shape(), rhs: approx.weight().shape() });
    }
    approx.apply(static_rows)
}

/// `γ·computed + (1 − γ)·cached`, elementwise.
pub fn blend<T: Scalar>(computed: &Matrix<T>, cached: &Matrix<T>, gamma: f64) -> Result<Matrix<T>> {
    if computed.shape() != cached.shape() {
        return Err(TensorError::Shape { op: "blend", lhs: computed.shape(), rhs: cached.shape() });
    }
    let g = T::from_f64_lossy(gamma);
    let h = T::from_f64_lossy(1.0 - gamma);
    let data = computed.data().iter().zip(cached.data()).map(|(&c, &k)| g * c + h * k).collect();
    Matrix::new(computed.rows(), computed.cols(), data)
}

/// Puts motion and static rows back at their original token positions.
pub fn reassemble<T: Scalar>(partition: &TokenPartition, motion_rows: &Matrix<T>, static_rows: &Matrix<T>) -> Result<Matrix<T>> {
    let cols = if motion_rows.rows() > 0 { motion_rows.cols() } else { static_rows.cols() };
    if motion_rows.rows() != partition.motion.len() || static_rows.rows() != partition.stat.len() {
        return Err(TensorError::Shape {
            op: "reassemble",
            lhs: (partition.motion.len(), partition.stat.len()),
            rhs: (motion_rows.rows(), static_rows.rows()),
        });
    }
    if (motion_rows.rows() > 0 && motion_rows.cols() != cols) || (static_rows.rows() > 0 && static_rows.cols() != cols) {
        return Err(TensorError::Shape { op: "reassemble", lhs: motion_rows.shape(), rhs: static_rows.shape() });
    }
    let mut out = Matrix::zeros(partition.n_tokens, cols);
    out.scatter_rows(&partition.motion, motion_rows)?;
    out.scatter_rows(&partition.stat, static_rows)?;
    Ok(out)
}
