//! χ² machinery and the relative-change statistic behind every cache decision.
//!
//! A block is skipped when its input moved little since the previous
//! timestep: with δ = ‖H_t − H_{t−1}‖_F / ‖H_{t−1}‖_F over an N×D state, the
//! block is skipped iff δ² ≤ χ²_{ND,1−α} / ND. The right-hand side is the
//! [`ChiSquareTest::threshold`] and its square root bounds δ on every skip.

pub mod gamma;

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{Matrix, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("{what} out of domain: {value}")]
    Domain { what: &'static str, value: f64 },
    #[error("reference state has zero norm")]
    DegenerateReference,
    #[error("{0} did not converge")]
    Convergence(&'static str),
    #[error(transparent)]
    Shape(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, StatsError>;

/// P(χ²_dof ≤ x).
pub fn chi2_cdf(dof: u64, x: f64) -> Result<f64> {
    if dof == 0 {
        return Err(StatsError::Domain { what: "dof", value: 0.0 });
    }
    if !(x >= 0.0) {
        return Err(StatsError::Domain { what: "x", value: x });
    }
    gamma::regularized_lower(dof as f64 / 2.0, x / 2.0).ok_or(StatsError::Convergence("incomplete gamma"))
}

/// χ² density; used as the Newton derivative during quantile inversion.
pub fn chi2_pdf(dof: u64, x: f64) -> f64 {
    if x <= 0.0 {
        return match dof {
            1 => f64::INFINITY,
            2 => 0.5,
            _ => 0.0,
        };
    }
    let k = dof as f64 / 2.0;
    ((k - 1.0) * x.ln() - x / 2.0 - k * std::f64::consts::LN_2 - gamma::ln_gamma(k)).exp()
}

/// x with P(χ²_dof ≤ x) = p.
///
/// Wilson–Hilferty gives the starting point; a bracket is grown around it and
/// refined with Newton steps that fall back to bisection whenever they leave
/// the bracket.
pub fn chi2_quantile(dof: u64, p: f64) -> Result<f64> {
    if dof == 0 {
        return Err(StatsError::Domain { what: "dof", value: 0.0 });
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(StatsError::Domain { what: "p", value: p });
    }
    let k = dof as f64;
    let z = normal_quantile(p);
    let h = 2.0 / (9.0 * k);
    let mut x = k * (1.0 - h + z * h.sqrt()).powi(3);
    if !(x > 0.0) || !x.is_finite() {
        x = k.max(1e-3);
    }

    let f = |x: f64| chi2_cdf(dof, x).map(|c| c - p);

    let mut lo = x;
    let mut hi = x;
    let mut f_lo = f(lo)?;
    let mut f_hi = f_lo;
    let mut grow = 0;
    while f_lo > 0.0 {
        lo *= 0.5;
        f_lo = f(lo)?;
        grow += 1;
        if grow > 2000 {
            return Err(StatsError::Convergence("quantile bracket"));
        }
    }
    while f_hi < 0.0 {
        hi = hi * 2.0 + 1.0;
        f_hi = f(hi)?;
        grow += 1;
        if grow > 2000 {
            return Err(StatsError::Convergence("quantile bracket"));
        }
    }
    if f_lo == 0.0 {
        return Ok(lo);
    }
    if f_hi == 0.0 {
        return Ok(hi);
    }

    let mut x = x.clamp(lo, hi);
    for _ in 0..500 {
        let fx = f(x)?;
        if fx == 0.0 {
            return Ok(x);
        }
        if fx < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let d = chi2_pdf(dof, x);
        let newton = if d > 0.0 && d.is_finite() { x - fx / d } else { f64::NAN };
        let next = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if (next - x).abs() <= 4.0 * f64::EPSILON * x.abs() || hi - lo <= 4.0 * f64::EPSILON * hi {
            return Ok(next);
        }
        x = next;
    }
    Ok(x)
}

/// Standard normal quantile (Acklam's rational approximation, |rel err| < 1.2e-9).
/// Only used to seed the χ² inversion.
pub fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [-3.969683028665376e1, 2.209460984245205e2, -2.759285104469687e2, 1.383_577_518_672_69e2, -3.066479806614716e1, 2.506628277459239];
    const B: [f64; 5] = [-5.447609879822406e1, 1.615858368580409e2, -1.556989798598866e2, 6.680131188771972e1, -1.328068155288572e1];
    const C: [f64; 6] = [-7.784894002430293e-3, -3.223964580411365e-1, -2.400758277161838, -2.549732539343734, 4.374664141464968, 2.938163982698783];
    const D: [f64; 4] = [7.784695709041462e-3, 3.224671290700398e-1, 2.445134137142996, 3.754408661907416];
    let p_low = 0.02425;
    if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5]) / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5]) / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// The per-block skip test for a fixed state size and significance level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareTest {
    dof: u64,
    significance: f64,
    threshold: f64,
}

fn threshold_memo() -> &'static Mutex<HashMap<(u64, u64), f64>> {
    static MEMO: OnceLock<Mutex<HashMap<(u64, u64), f64>>> = OnceLock::new();
    MEMO.get_or_init(|| Mutex::new(HashMap::new()))
}

impl ChiSquareTest {
    /// `dof = N·D`; threshold = χ²_{dof,1−α}/dof, memoized per (dof, α).
    pub fn new(dof: u64, significance: f64) -> Result<Self> {
        if !(significance > 0.0 && significance < 1.0) {
            return Err(StatsError::Domain { what: "significance", value: significance });
        }
        if dof == 0 {
            return Err(StatsError::Domain { what: "dof", value: 0.0 });
        }
        let key = (dof, significance.to_bits());
        if let Some(&threshold) = threshold_memo().lock().expect("memo poisoned").get(&key) {
            return Ok(Self { dof, significance, threshold });
        }
        let threshold = chi2_quantile(dof, 1.0 - significance)? / dof as f64;
        threshold_memo().lock().expect("memo poisoned").insert(key, threshold);
        Ok(Self { dof, significance, threshold })
    }

    /// Test with an explicit threshold; the significance is back-solved from
    /// the χ² CDF. Used for replay and fault injection.
    pub fn from_threshold(dof: u64, threshold: f64) -> Result<Self> {
        if !(threshold >= 0.0) || !threshold.is_finite() {
            return Err(StatsError::Domain { what: "threshold", value: threshold });
        }
        let significance = 1.0 - chi2_cdf(dof, threshold * dof as f64)?;
        Ok(Self { dof, significance, threshold })
    }

    pub fn dof(&self) -> u64 {
        self.dof
    }

    pub fn significance(&self) -> f64 {
        self.significance
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }
}

/// ‖current − previous‖_F / ‖previous‖_F.
pub fn relative_change<T: Scalar>(current: &Matrix<T>, previous: &Matrix<T>) -> Result<f64> {
    let diff = current.frobenius_distance(previous)?;
    let reference = previous.frobenius_norm();
    if reference == 0.0 {
        return Err(StatsError::DegenerateReference);
    }
    Ok(diff / reference)
}

/// δ² ≤ threshold, boundary inclusive.
#[inline]
pub fn should_skip(test: &ChiSquareTest, delta: f64) -> bool {
    delta * delta <= test.threshold
}

/// ε_cache = √threshold: the largest δ any skipped block can have.
#[inline]
pub fn cache_error_bound(test: &ChiSquareTest) -> f64 {
    test.threshold.sqrt()
}
