//! Synthetic denoising input sequences with controllable temporal redundancy.

use serde::{Deserialize, Serialize};

use crate::rng::{derive_seed, SplitMix64};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Per-step geometric shrink factor of the `decaying` perturbation.
pub const DECAY_RATE: f64 = 0.85;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// x_t = x_0 for every t.
    Static,
    /// A fresh random subset of ⌊motion_fraction·N⌉ tokens moves by
    /// noise_scale·ξ each step; the rest are unchanged.
    LowMotion,
    /// Every step is an independent standard normal draw.
    HighMotion,
    /// Every token moves by noise_scale·ρᵗ⁻¹·ξ̂, with ξ̂ rescaled so that
    /// ‖ξ̂‖_F = √(N·D); the step size shrinks geometrically.
    Decaying,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 4] = [Self::Static, Self::LowMotion, Self::HighMotion, Self::Decaying];
}

impl std::str::FromStr for ScheduleKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.replace('-', "_").as_str() {
            "static" => Ok(Self::Static),
            "low_motion" => Ok(Self::LowMotion),
            "high_motion" => Ok(Self::HighMotion),
            "decaying" => Ok(Self::Decaying),
            other => Err(format!("unknown schedule kind `{other}`")),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Static => "static",
            Self::LowMotion => "low_motion",
            Self::HighMotion => "high_motion",
            Self::Decaying => "decaying",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub tokens: usize,
    pub dim: usize,
    pub noise_scale: f64,
    pub motion_fraction: f64,
}

impl Schedule {
    pub fn new(kind: ScheduleKind, steps: usize, tokens: usize, dim: usize) -> Self {
        Self { kind, steps, tokens, dim, noise_scale: 0.1, motion_fraction: 0.25 }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.tokens == 0 || self.dim == 0 {
            return Err("schedule needs at least one token and one feature".into());
        }
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return Err(format!("noise_scale must be finite and non-negative, got {}", self.noise_scale));
        }
        if !(0.0..=1.0).contains(&self.motion_fraction) {
            return Err(format!("motion_fraction must lie in [0, 1], got {}", self.motion_fraction));
        }
        Ok(())
    }

    /// Number of tokens moved per `LowMotion` step.
    pub fn moving_tokens(&self) -> usize {
        ((self.motion_fraction * self.tokens as f64).round() as usize).min(self.tokens)
    }
}

/// The T model inputs x_0 … x_{T−1}. Same schedule and seed give
/// bit-identical sequences.
pub fn make_schedule<T: Scalar>(sched: &Schedule, seed: u64) -> Vec<Matrix<T>> {
    let (n, d) = (sched.tokens, sched.dim);
    let mut out = Vec::with_capacity(sched.steps);
    if sched.steps == 0 {
        return out;
    }
    let mut rng = SplitMix64::new(derive_seed(seed, 0x5C4E_D01E));
    let first: Matrix<T> = Matrix::gaussian_from(&mut rng, n, d, 1.0);
    out.push(first);
    for t in 1..sched.steps {
        let prev = out.last().expect("non-empty");
        let next = match sched.kind {
            ScheduleKind::Static => prev.clone(),
            ScheduleKind::HighMotion => Matrix::gaussian_from(&mut rng, n, d, 1.0),
            ScheduleKind::LowMotion => {
                let mut x = prev.clone();
                for i in rng.sample_indices(n, sched.moving_tokens()) {
                    for v in x.row_mut(i) {
                        *v += T::from_f64_lossy(sched.noise_scale * rng.next_gaussian());
                    }
                }
                x
            }
            ScheduleKind::Decaying => {
                let xi: Vec<f64> = (0..n * d).map(|_| rng.next_gaussian()).collect();
                let norm = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
                let target = sched.noise_scale * DECAY_RATE.powi(t as i32 - 1) * ((n * d) as f64).sqrt();
                let k = if norm > 0.0 { target / norm } else { 0.0 };
                let mut x = prev.clone();
                for (v, e) in x.data_mut().iter_mut().zip(xi) {
                    *v += T::from_f64_lossy(k * e);
                }
                x
            }
        };
        out.push(next);
    }
    out
}

/// Inputs whose step-to-step relative change `‖x_t − x_{t−1}‖_F / ‖x_{t−1}‖_F`
/// ramps linearly from `lo` to `hi` over the run.
pub fn make_sweep<T: Scalar>(tokens: usize, dim: usize, steps: usize, lo: f64, hi: f64, seed: u64) -> Vec<Matrix<T>> {
    let mut out = Vec::with_capacity(steps);
    if steps == 0 {
        return out;
    }
    let mut rng = SplitMix64::new(derive_seed(seed, 0x5EE9));
    out.push(Matrix::gaussian_from(&mut rng, tokens, dim, 1.0));
    for t in 1..steps {
        let r = if steps > 2 { lo + (hi - lo) * (t - 1) as f64 / (steps - 2) as f64 } else { lo };
        let prev = out.last().expect("non-empty");
        let xi: Vec<f64> = (0..tokens * dim).map(|_| rng.next_gaussian()).collect();
        let norm = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
        let k = if norm > 0.0 { r * prev.frobenius_norm() / norm } else { 0.0 };
        let data = prev.data().iter().zip(xi).map(|(&v, e)| T::from_f64_lossy(v.to_f64_lossless() + k * e)).collect();
        out.push(Matrix::new(tokens, dim, data).expect("shape"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn saliency(a: &Matrix<f32>, b: &Matrix<f32>) -> Vec<f64> {
        a.sub(b).unwrap().row_sq_norms()
    }

    #[test]
    fn static_has_zero_change() {
        let s = Schedule::new(ScheduleKind::Static, 6, 8, 4);
        let xs = make_schedule::<f32>(&s, 1);
        assert_eq!(xs.len(), 6);
        for w in xs.windows(2) {
            assert!(saliency(&w[1], &w[0]).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn low_motion_moves_exact_token_count() {
        let s = Schedule::new(ScheduleKind::LowMotion, 10, 16, 8);
        let xs = make_schedule::<f32>(&s, 2);
        for w in xs.windows(2) {
            let moved = saliency(&w[1], &w[0]).iter().filter(|&&v| v > 0.0).count();
            assert_eq!(moved, 4);
        }
    }

    #[test]
    fn decaying_change_strictly_decreases() {
        let s = Schedule::new(ScheduleKind::Decaying, 50, 64, 128);
        let xs = make_schedule::<f32>(&s, 3);
        let changes: Vec<f64> = xs.windows(2).map(|w| w[1].frobenius_distance(&w[0]).unwrap()).collect();
        assert!(changes.windows(2).all(|c| c[1] < c[0]), "{changes:?}");
    }

    #[test]
    fn reproducible() {
        let s = Schedule::new(ScheduleKind::HighMotion, 4, 4, 4);
        assert_eq!(make_schedule::<f32>(&s, 9), make_schedule::<f32>(&s, 9));
        assert_ne!(make_schedule::<f32>(&s, 9), make_schedule::<f32>(&s, 10));
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("low-motion".parse::<ScheduleKind>().unwrap(), ScheduleKind::LowMotion);
        assert!("wobbly".parse::<ScheduleKind>().is_err());
        assert!(Schedule { motion_fraction: 1.5, ..Schedule::new(ScheduleKind::Static, 1, 1, 1) }.validate().is_err());
    }

    #[test]
    fn sweep_hits_requested_changes() {
        let xs = make_sweep::<f64>(8, 4, 6, 0.5, 1.0, 3);
        for (t, w) in xs.windows(2).enumerate() {
            let r = w[1].frobenius_distance(&w[0]).unwrap() / w[0].frobenius_norm();
            assert!((r - (0.5 + 0.125 * t as f64)).abs() < 1e-12, "{t}: {r}");
        }
    }
}
