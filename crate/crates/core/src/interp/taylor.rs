//! Log-log slope tests for truncated Taylor expansions along a line.

use serde::Serialize;

use crate::tensor::Matrix;

use super::harsanyi::shapley_singletons;
use super::probe::{fd_gradient, frob_inner, AnalyticProbe, ProbeFunction};
use super::{InterpError, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeReport {
    pub order: usize,
    pub scales: Vec<f64>,
    pub residuals: Vec<f64>,
    /// Least-squares slope of `log r` against `log s` over the nonzero
    /// residuals; `None` when fewer than two are nonzero.
    pub slope: Option<f64>,
    pub max_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaylorReport {
    pub orders: Vec<SlopeReport>,
    /// Largest `|∇_fd − ∇| / (1 + |∇|)` over coordinates at the base point.
    pub fd_gradient_error: f64,
}

/// Ordinary least-squares slope of `y` on `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len().min(y.len());
    if n < 2 {
        return None;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
    }
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Geometric ladder `from, from·r, …` ending at `to` with `steps` points.
pub fn geometric_ladder(from: f64, to: f64, steps: usize) -> Vec<f64> {
    if steps < 2 {
        return vec![from];
    }
    let r = (to / from).powf(1.0 / (steps - 1) as f64);
    (0..steps).map(|i| from * r.powi(i as i32)).collect()
}

fn slope_of(order: usize, scales: &[f64], residuals: Vec<f64>) -> SlopeReport {
    let (lx, ly): (Vec<f64>, Vec<f64>) = scales.iter().zip(&residuals).filter(|(_, r)| **r > 0.0).map(|(s, r)| (s.ln(), r.ln())).unzip();
    SlopeReport { order, scales: scales.to_vec(), max_residual: residuals.iter().copied().fold(0.0, f64::max), residuals, slope: fit_slope(&lx, &ly) }
}

/// `r(n, s) = |v(B + s·M) − Σ_{k≤n} c_k s^k|` for each order and scale, with
/// `v` evaluated directly and `c_k` from the probe's analytic series.
/// `scales` may differ per order; a single slice is reused otherwise.
pub fn taylor_residual_check(probe: &dyn AnalyticProbe, base: &Matrix<f64>, dir: &Matrix<f64>, orders: &[usize], scales: &[Vec<f64>]) -> Result<TaylorReport> {
    if base.shape() != probe.shape() || dir.shape() != probe.shape() {
        return Err(InterpError::Shape(format!("probe is {:?}, base {:?}, direction {:?}", probe.shape(), base.shape(), dir.shape())));
    }
    if scales.is_empty() {
        return Err(InterpError::Shape("no scales given".into()));
    }
    let max_order = orders.iter().copied().max().unwrap_or(0);
    let series = probe.directional_series(base, dir, max_order);
    let mut reports = Vec::with_capacity(orders.len());
    for (idx, &n) in orders.iter().enumerate() {
        let ladder = &scales[idx.min(scales.len() - 1)];
        let residuals = ladder
            .iter()
            .map(|&s| {
                let exact = probe.value(&base.add(&dir.scale(s)).expect("same shape"));
                let approx: f64 = series[..=n].iter().rev().fold(0.0, |acc, c| acc * s + c);
                (exact - approx).abs()
            })
            .collect();
        reports.push(slope_of(n, ladder, residuals));
    }
    let g = probe.gradient(base);
    let fd = fd_gradient(|x| probe.value(x), base, 1e-5);
    let fd_gradient_error = g.data().iter().zip(fd.data()).map(|(a, b)| (a - b).abs() / (1.0 + a.abs())).fold(0.0, f64::max);
    Ok(TaylorReport { orders: reports, fd_gradient_error })
}

/// `|Σ_i I({i}) − s·∇v(B)ᵀM|` with baseline `B` and input `B + s·M`; the
/// slope should approach 2.
pub fn first_order_equivalence<P>(probe: &P, base: &Matrix<f64>, dir: &Matrix<f64>, scales: &[f64]) -> Result<SlopeReport>
where
    P: AnalyticProbe + Clone + 'static,
{
    if base.shape() != probe.shape() || dir.shape() != probe.shape() {
        return Err(InterpError::Shape(format!("probe is {:?}, base {:?}, direction {:?}", probe.shape(), base.shape(), dir.shape())));
    }
    let p = probe.clone();
    let pf = ProbeFunction::new(base.clone(), move |x| p.value(x));
    let lin = frob_inner(&probe.gradient(base), dir);
    let mut residuals = Vec::with_capacity(scales.len());
    for &s in scales {
        let x = base.add(&dir.scale(s)).expect("same shape");
        let phi: f64 = shapley_singletons(&pf, &x)?.iter().sum();
        residuals.push((phi - s * lin).abs());
    }
    Ok(slope_of(1, scales, residuals))
}
