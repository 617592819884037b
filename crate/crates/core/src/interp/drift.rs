//! Monte Carlo check of `|v(X) − v(B̃)| ≤ L(δ + model_eps + drift_gamma)`.
//!
//! Each sample draws a true background `B₀ = B_ref + σZ` around the
//! background model's prediction `B_ref`, shifts it by a constant mean
//! offset to `B₁ = B₀ + Δμ·𝟙`, adds the recorded motion residual to get
//! `X = B₁ + M`, and compares against a perturbed model background
//! `B̃ = B₀ + E`. The shift size is set from `drift_gamma` through the
//! Pinsker bound `TV(N(μ,σ²I), N(μ+Δμ𝟙,σ²I)) ≤ √(ND)·|Δμ|/(2σ)`, so
//! `‖B₁ − B₀‖_F = 2σ·drift_gamma`.

use serde::Serialize;

use crate::rng::SplitMix64;
use crate::tensor::Matrix;

use super::background::BackgroundModel;
use super::probe::AnalyticProbe;
use super::{InterpError, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftSetting {
    pub name: String,
    /// Upper bound on the total-variation distance between the drifted and
    /// undrifted background distributions.
    pub drift_gamma: f64,
    /// Per-coordinate standard deviation of the background distribution.
    pub sigma: f64,
    /// Frobenius norm of the model error `E`.
    pub model_eps: f64,
    /// Multiplier on the recorded motion residual; 0 gives `δ = 0`.
    pub motion_scale: f64,
}

impl DriftSetting {
    pub fn new(name: &str, drift_gamma: f64, sigma: f64, model_eps: f64, motion_scale: f64) -> Self {
        Self { name: name.into(), drift_gamma, sigma, model_eps, motion_scale }
    }

    /// Degenerate, zero-motion and two mean-shift settings at `σ ∈ {0.25, 0.5}`.
    pub fn standard() -> Vec<Self> {
        vec![
            Self::new("no_drift_exact_model", 0.0, 0.25, 0.0, 1.0),
            Self::new("zero_motion_exact_model", 0.0, 0.25, 0.0, 0.0),
            Self::new("mean_shift_0.05", 0.05, 0.25, 0.01, 1.0),
            Self::new("mean_shift_0.2", 0.2, 0.5, 0.05, 1.0),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftReport {
    pub setting: DriftSetting,
    pub samples: usize,
    pub violations: usize,
    pub lipschitz: f64,
    pub max_lhs: f64,
    /// Largest `lhs / rhs` over samples with `rhs > 0`.
    pub max_ratio: f64,
    /// Smallest `rhs − lhs`.
    pub min_slack: f64,
    pub mean_delta: f64,
    pub mean_model_eps: f64,
}

impl DriftReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

fn unit_direction(rng: &mut SplitMix64, n: usize, d: usize) -> Matrix<f64> {
    loop {
        let z = Matrix::<f64>::gaussian_from(rng, n, d, 1.0);
        let norm = z.frobenius_norm();
        if norm > 0.0 {
            return z.scale(1.0 / norm);
        }
    }
}

/// Draws `samples` drifted pairs from frames `k..` of `history` and counts
/// bound violations. The left side and `δ`, `model_eps` are measured on each
/// sample; `drift_gamma` is the generator's analytic bound.
pub fn drift_bound_check(
    probe: &dyn AnalyticProbe,
    history: &[Matrix<f64>],
    model: &BackgroundModel<f64>,
    setting: &DriftSetting,
    samples: usize,
    seed: u64,
) -> Result<DriftReport> {
    let lipschitz = probe.lipschitz().ok_or(InterpError::MissingLipschitz)?;
    let k = model.k();
    if history.len() <= k {
        return Err(InterpError::History { needed: k + 1, got: history.len() });
    }
    let (n, d) = probe.shape();
    if history.iter().any(|h| h.shape() != (n, d)) {
        return Err(InterpError::Shape(format!("probe is {n}x{d}, history frames are {:?}", history[0].shape())));
    }
    let mut refs = Vec::with_capacity(history.len() - k);
    for t in k..history.len() {
        let b = model.predict(&history[t - k..t])?;
        let m = history[t].sub(&b).map_err(|e| InterpError::Shape(e.to_string()))?;
        refs.push((b, m));
    }
    let shift = 2.0 * setting.sigma * setting.drift_gamma / ((n * d) as f64).sqrt();
    let mut rng = SplitMix64::new(seed);
    let mut report = DriftReport {
        setting: setting.clone(),
        samples,
        violations: 0,
        lipschitz,
        max_lhs: 0.0,
        max_ratio: 0.0,
        min_slack: f64::INFINITY,
        mean_delta: 0.0,
        mean_model_eps: 0.0,
    };
    for _ in 0..samples {
        let (b_ref, motion) = &refs[rng.next_below(refs.len() as u64) as usize];
        let b0 = b_ref.add(&Matrix::gaussian_from(&mut rng, n, d, setting.sigma)).expect("same shape");
        let b1 = b0.map(|v| v + shift);
        let x = b1.add(&motion.scale(setting.motion_scale)).expect("same shape");
        let b_tilde = if setting.model_eps > 0.0 { b0.add(&unit_direction(&mut rng, n, d).scale(setting.model_eps)).expect("same shape") } else { b0.clone() };

        let delta = x.frobenius_distance(&b1).expect("same shape");
        let eps = b0.frobenius_distance(&b_tilde).expect("same shape");
        let lhs = (probe.value(&x) - probe.value(&b_tilde)).abs();
        let rhs = lipschitz * (delta + eps + setting.drift_gamma);
        // Rounding allowance for evaluating the two sides in floating point.
        let tol = 1e-12 * (1.0 + probe.value(&x).abs() + rhs);
        if lhs > rhs + tol {
            report.violations += 1;
        }
        report.max_lhs = report.max_lhs.max(lhs);
        if rhs > 0.0 {
            report.max_ratio = report.max_ratio.max(lhs / rhs);
        }
        report.min_slack = report.min_slack.min(rhs - lhs);
        report.mean_delta += delta / samples as f64;
        report.mean_model_eps += eps / samples as f64;
    }
    if samples == 0 {
        report.min_slack = 0.0;
    }
    Ok(report)
}
