//! Token interactions by Möbius inversion over the subset lattice.

use serde::Serialize;

use crate::tensor::Matrix;

use super::probe::ProbeFunction;
use super::{InterpError, Result};

/// Largest arity for full subset enumeration (`2^12` evaluations).
pub const BRUTE_FORCE_CAP: usize = 12;

/// Interactions for every subset, indexed by bitmask (bit `i` = token `i`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InteractionReport {
    pub tokens: usize,
    /// `v(x_S) − v(b)` for every mask `S`.
    pub values: Vec<f64>,
    /// `I(S)` for every mask `S`; `I(∅) = 0`.
    pub interactions: Vec<f64>,
    /// `φ(i) = I({i})`.
    pub singletons: Vec<f64>,
    pub full_value: f64,
    pub baseline_value: f64,
    /// `|Σ_{S≠∅} I(S) − (v(x) − v(b))|`.
    pub efficiency_residual: f64,
    /// Worst `|Σ_{T⊆S} I(T) − (v(x_S) − v(b))|` over all `S`.
    pub roundtrip_residual: f64,
    /// `Σ_{|S|=k} I(S)` for `k = 0..=N`.
    pub order_sums: Vec<f64>,
}

impl InteractionReport {
    pub fn interaction(&self, members: &[usize]) -> f64 {
        self.interactions[members.iter().fold(0usize, |m, &i| m | 1 << i)]
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("report is plain data")
    }
}

/// `f[S] −= f[S \ {i}]` for every bit: turns subset values into interactions.
pub fn mobius_inverse(values: &mut [f64], n: usize) {
    for bit in 0..n {
        let b = 1 << bit;
        for mask in 0..values.len() {
            if mask & b != 0 {
                values[mask] -= values[mask ^ b];
            }
        }
    }
}

/// `f[S] += f[S \ {i}]` for every bit: sums interactions over subsets.
pub fn zeta_transform(values: &mut [f64], n: usize) {
    for bit in 0..n {
        let b = 1 << bit;
        for mask in 0..values.len() {
            if mask & b != 0 {
                values[mask] += values[mask ^ b];
            }
        }
    }
}

/// Exact interactions of every token subset of `x` under baseline masking.
pub fn harsanyi(probe: &ProbeFunction, x: &Matrix<f64>) -> Result<InteractionReport> {
    probe.check_input(x)?;
    let n = probe.arity();
    if n > BRUTE_FORCE_CAP {
        return Err(InterpError::TooManyTokens { n, cap: BRUTE_FORCE_CAP });
    }
    let size = 1usize << n;
    let baseline_value = probe.eval(probe.baseline());
    let values: Vec<f64> = (0..size).map(|m| if m == 0 { 0.0 } else { probe.eval_masked(x, m as u64) - baseline_value }).collect();
    let mut interactions = values.clone();
    mobius_inverse(&mut interactions, n);
    interactions[0] = 0.0;

    let mut rebuilt = interactions.clone();
    zeta_transform(&mut rebuilt, n);
    let roundtrip_residual = rebuilt.iter().zip(&values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let mut order_sums = vec![0.0; n + 1];
    for (m, v) in interactions.iter().enumerate() {
        order_sums[m.count_ones() as usize] += v;
    }
    let full_value = values[size - 1] + baseline_value;
    let total: f64 = interactions.iter().skip(1).sum();
    Ok(InteractionReport {
        tokens: n,
        singletons: (0..n).map(|i| interactions[1 << i]).collect(),
        efficiency_residual: (total - values[size - 1]).abs(),
        roundtrip_residual,
        values,
        interactions,
        full_value,
        baseline_value,
        order_sums,
    })
}

/// `φ(i) = v(x_{i}) − v(b)` for every token, for any arity.
pub fn shapley_singletons(probe: &ProbeFunction, x: &Matrix<f64>) -> Result<Vec<f64>> {
    probe.check_input(x)?;
    let base = probe.eval(probe.baseline());
    Ok((0..probe.arity()).map(|i| probe.eval_single(x, i) - base).collect())
}

/// Per-token reuse flags: `|φ_t(i) − φ_{t−1}(i)| < τ_c`.
pub fn cache_trigger(phi_t: &[f64], phi_prev: &[f64], tau_c: f64) -> Result<Vec<bool>> {
    if phi_t.len() != phi_prev.len() {
        return Err(InterpError::Shape(format!("φ lengths differ: {} vs {}", phi_t.len(), phi_prev.len())));
    }
    Ok(phi_t.iter().zip(phi_prev).map(|(a, b)| (a - b).abs() < tau_c).collect())
}

/// Long-format `t,token,abs_phi` rows for a per-timestep singleton series.
pub fn write_heatmap_csv<W: std::io::Write>(phis: &[Vec<f64>], w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t", "token", "abs_phi"])?;
    for (t, row) in phis.iter().enumerate() {
        for (i, p) in row.iter().enumerate() {
            out.write_record([t.to_string(), i.to_string(), p.abs().to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}
