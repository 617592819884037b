//! Self-check suites with per-invariant measured margins.

use serde::Serialize;

use crate::engine::{self, CacheDecision, DecisionReason, EngineConfig, EngineState};
use crate::interp::{self, AnalyticProbe, DriftSetting, ExpProbe, PolynomialProbe};
use crate::interp::probe::frob_inner;
use crate::interp::taylor::geometric_ladder;
use crate::model::ToyModel;
use crate::rng::SplitMix64;
use crate::schedule::{make_schedule, make_sweep, Schedule, ScheduleKind};
use crate::stats::{chi2_cdf, chi2_quantile, ChiSquareTest};
use crate::tensor::Matrix;

pub const SIGNIFICANCE_GRID: [f64; 4] = [0.01, 0.05, 0.1, 0.2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Suite {
    Stats,
    Bounds,
    Interp,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Stats, Suite::Bounds, Suite::Interp];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Stats => "stats",
            Self::Bounds => "bounds",
            Self::Interp => "interp",
        }
    }

    /// `stats`, `bounds`, `interp` or `all`.
    pub fn parse(s: &str) -> Result<Vec<Suite>, String> {
        match s {
            "stats" => Ok(vec![Self::Stats]),
            "bounds" => Ok(vec![Self::Bounds]),
            "interp" => Ok(vec![Self::Interp]),
            "all" => Ok(Self::ALL.to_vec()),
            other => Err(format!("unknown suite `{other}` (expected stats, bounds, interp or all)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Invariant {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub limit: f64,
    /// Distance from the limit on the passing side; negative on failure.
    pub margin: f64,
}

impl Invariant {
    pub fn at_most(name: impl Into<String>, measured: f64, limit: f64) -> Self {
        let margin = limit - measured;
        Self { name: name.into(), passed: measured <= limit, measured, limit, margin }
    }

    pub fn at_least(name: impl Into<String>, measured: f64, limit: f64) -> Self {
        let margin = measured - limit;
        Self { name: name.into(), passed: measured >= limit, measured, limit, margin }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub passed: bool,
    pub invariants: Vec<Invariant>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub suites: Vec<SuiteReport>,
}

impl VerifyReport {
    pub fn failures(&self) -> Vec<String> {
        self.suites.iter().flat_map(|s| s.invariants.iter().filter(|i| !i.passed).map(move |i| format!("{}/{}", s.suite, i.name))).collect()
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Monte Carlo samples per drift setting.
    pub drift_samples: usize,
    /// Multiplies the gate threshold in the bounds suite; `None` leaves it
    /// untouched. Used to confirm the suite catches a broken gate.
    pub threshold_fault: Option<f64>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { seed: 42, drift_samples: 1000, threshold_fault: None }
    }
}

pub fn run_verify(suites: &[Suite], opts: &VerifyOptions) -> VerifyReport {
    let reports: Vec<SuiteReport> = suites
        .iter()
        .map(|s| {
            let invariants = match s {
                Suite::Stats => stats_suite(),
                Suite::Bounds => bounds_suite(opts),
                Suite::Interp => interp_suite(opts),
            };
            SuiteReport { suite: s.name().into(), passed: invariants.iter().all(|i| i.passed), invariants }
        })
        .collect();
    VerifyReport { passed: reports.iter().all(|r| r.passed), suites: reports }
}

fn stats_suite() -> Vec<Invariant> {
    let mut worst: f64 = 0.0;
    for dof in [1, 2, 10, 128, 1024] {
        for p in [0.9, 0.95, 0.99] {
            let err = chi2_quantile(dof, p).and_then(|q| chi2_cdf(dof, q)).map(|c| (c - p).abs()).unwrap_or(f64::INFINITY);
            worst = worst.max(err);
        }
    }
    let closed = chi2_quantile(2, 0.95).map(|q| (q + 2.0 * 0.05f64.ln()).abs()).unwrap_or(f64::INFINITY);
    let mut consistency: f64 = 0.0;
    for dof in [128, 1024, 8192] {
        for a in SIGNIFICANCE_GRID {
            let err = match (ChiSquareTest::new(dof, a), chi2_quantile(dof, 1.0 - a)) {
                (Ok(t), Ok(q)) => (t.threshold() - q / dof as f64).abs() / (q / dof as f64),
                _ => f64::INFINITY,
            };
            consistency = consistency.max(err);
        }
    }
    vec![
        Invariant::at_most("quantile_roundtrip", worst, 1e-8),
        Invariant::at_most("dof2_closed_form", closed, 1e-9),
        Invariant::at_most("threshold_from_quantile", consistency, 1e-12),
    ]
}

struct GateCheck {
    ratio: f64,
    threshold_error: f64,
}

/// Worst `δ/√thr` over gated skips (0 without skips), `thr` re-derived from `alpha`.
fn check_gate(decisions: &[CacheDecision], dof: u64, alpha: f64) -> GateCheck {
    let reference = ChiSquareTest::new(dof, alpha).map(|t| t.threshold()).unwrap_or(f64::NAN);
    let mut out = GateCheck { ratio: 0.0, threshold_error: 0.0 };
    for d in decisions.iter().filter(|d| d.reason == DecisionReason::Gate) {
        out.threshold_error = out.threshold_error.max((d.threshold - reference).abs() / reference);
        if d.skipped {
            out.ratio = out.ratio.max(d.delta / reference.sqrt());
        }
    }
    out
}

/// Runs the engine with an optional threshold multiplier and returns its decisions.
fn gated_run(model: &ToyModel<f32>, inputs: &[Matrix<f32>], cfg: &EngineConfig, fault: Option<f64>) -> Vec<CacheDecision> {
    let mut state = EngineState::new(model, cfg.clone()).expect("valid config");
    if let (Some(scale), Some(x)) = (fault, inputs.first()) {
        let dof = (x.rows() * x.cols()) as u64;
        let thr = ChiSquareTest::new(dof, cfg.significance).expect("valid test").threshold();
        state = state.with_test(ChiSquareTest::from_threshold(dof, scale * thr).expect("positive threshold"));
    }
    for x in inputs {
        state.step(x).expect("shapes agree");
    }
    state.decisions().to_vec()
}

fn bounds_suite(opts: &VerifyOptions) -> Vec<Invariant> {
    let (layers, dim, heads, tokens, steps) = (4, 32, 2, 16, 16);
    let dof = (tokens * dim) as u64;
    let model = ToyModel::<f32>::seeded(layers, dim, heads, opts.seed);
    let mut ratio: f64 = 0.0;
    let mut thr_err: f64 = 0.0;
    let mut own_bound = 0usize;
    for kind in ScheduleKind::ALL {
        let inputs = make_schedule::<f32>(&Schedule::new(kind, steps, tokens, dim), opts.seed);
        for alpha in SIGNIFICANCE_GRID {
            let cfg = EngineConfig { significance: alpha, ..EngineConfig::default() };
            let decisions = gated_run(&model, &inputs, &cfg, opts.threshold_fault);
            let g = check_gate(&decisions, dof, alpha);
            ratio = ratio.max(g.ratio);
            thr_err = thr_err.max(g.threshold_error);
            own_bound += decisions.iter().filter(|d| d.violates_bound()).count();
        }
    }
    let inputs = make_schedule::<f32>(&Schedule::new(ScheduleKind::LowMotion, steps, tokens, dim), opts.seed);
    let off = engine::run_generation(&model, &inputs, &EngineConfig::disabled(), None).expect("run");
    let full = engine::run_full(&model, &inputs).expect("run");
    let mismatched = off.outputs.iter().zip(&full).map(|(a, b)| a.data().iter().zip(b.data()).filter(|(x, y)| x.to_bits() != y.to_bits()).count()).sum::<usize>();

    let sweep = make_sweep::<f32>(tokens, dim, 40, 0.995, 1.025, opts.seed);
    let counts: Vec<usize> = SIGNIFICANCE_GRID
        .iter()
        .map(|&a| {
            let cfg = EngineConfig { significance: a, ..EngineConfig::with_modules(false, true, false) };
            gated_run(&model, &sweep, &cfg, opts.threshold_fault).iter().filter(|d| d.skipped).count()
        })
        .collect();
    let inversions = counts.windows(2).filter(|w| w[0] < w[1]).count();

    vec![
        Invariant::at_most("gate_soundness", ratio, 1.0),
        Invariant::at_most("threshold_consistency", thr_err, 1e-12),
        Invariant::at_most("recorded_bound_violations", own_bound as f64, 0.0),
        Invariant::at_most("off_switch_mismatched_values", mismatched as f64, 0.0),
        Invariant::at_most("skip_count_inversions", inversions as f64, 0.0),
    ]
}

/// `x_t = θ_0 + A_1 x_{t−1} + A_2 x_{t−2} + noise` for every token.
pub fn planted_ar2(tokens: usize, dim: usize, steps: usize, noise: f64, seed: u64) -> (Vec<Matrix<f64>>, [Matrix<f64>; 2], Vec<f64>) {
    let mut rng = SplitMix64::new(seed);
    let a1 = Matrix::from_fn(dim, dim, |i, j| if i == j { 0.5 } else { 0.0 } + 0.1 * rng.next_gaussian());
    let a2 = Matrix::from_fn(dim, dim, |i, j| if i == j { 0.2 } else { 0.0 } + 0.1 * rng.next_gaussian());
    let c: Vec<f64> = (0..dim).map(|_| 0.1 * rng.next_gaussian()).collect();
    let mut h = vec![Matrix::gaussian_from(&mut rng, tokens, dim, 1.0), Matrix::gaussian_from(&mut rng, tokens, dim, 1.0)];
    for t in 2..steps {
        let next = Matrix::from_fn(tokens, dim, |i, o| {
            let mut v = c[o];
            for j in 0..dim {
                v += a1.get(o, j) * h[t - 1].get(i, j) + a2.get(o, j) * h[t - 2].get(i, j);
            }
            v + noise * rng.next_gaussian()
        });
        h.push(next);
    }
    (h, [a1, a2], c)
}

fn interp_suite(opts: &VerifyOptions) -> Vec<Invariant> {
    let mut eff: f64 = 0.0;
    let mut round: f64 = 0.0;
    for (k, n) in [2usize, 4, 8].into_iter().enumerate() {
        for rep in 0..3u64 {
            let seed = opts.seed.wrapping_add(100 * k as u64 + rep);
            let poly = PolynomialProbe::random(n, 3, 3, 2 * n, seed);
            let b = Matrix::<f64>::seeded_gaussian(n, 3, seed ^ 1, 0.3);
            let x = Matrix::<f64>::seeded_gaussian(n, 3, seed ^ 2, 1.0);
            match interp::harsanyi(&poly.to_probe(b.clone()), &x) {
                Ok(r) => {
                    let direct = poly.value(&x) - poly.value(&b);
                    eff = eff.max((r.interactions.iter().sum::<f64>() - direct).abs());
                    round = round.max(r.roundtrip_residual);
                }
                Err(_) => {
                    eff = f64::INFINITY;
                }
            }
        }
    }
    let mut out = vec![Invariant::at_most("harsanyi_efficiency", eff, 1e-9), Invariant::at_most("mobius_roundtrip", round, 1e-9)];

    let (n, d) = (4, 3);
    let w = Matrix::<f64>::seeded_gaussian(n, d, opts.seed ^ 3, 0.2);
    let exp = ExpProbe::new(w.clone(), 1.0);
    let base = Matrix::<f64>::seeded_gaussian(n, d, opts.seed ^ 4, 0.5);
    let raw = Matrix::<f64>::seeded_gaussian(n, d, opts.seed ^ 5, 1.0);
    let dir = raw.scale(1.0 / frob_inner(&w, &raw));
    let ladders = exp_ladders();
    match interp::taylor_residual_check(&exp, &base, &dir, &[1, 2, 3], &ladders) {
        Ok(r) => {
            for s in &r.orders {
                let slope = s.slope.unwrap_or(f64::NAN);
                out.push(Invariant::at_most(format!("taylor_slope_order_{}", s.order), (slope - (s.order + 1) as f64).abs(), 0.2));
            }
            out.push(Invariant::at_most("fd_gradient_crosscheck", r.fd_gradient_error, 1e-6));
        }
        Err(_) => out.push(Invariant::at_most("taylor_slopes", f64::INFINITY, 0.2)),
    }
    let poly = PolynomialProbe::random(n, d, 3, 6, opts.seed ^ 6);
    let deg = poly.degree();
    let exact = interp::taylor_residual_check(&poly, &base, &raw, &[deg], &[geometric_ladder(1e-1, 1e-4, 4)]).map(|r| r.orders[0].max_residual).unwrap_or(f64::INFINITY);
    out.push(Invariant::at_most("polynomial_taylor_exact", exact, 1e-12));
    let fo = interp::first_order_equivalence(&poly, &base, &raw, &geometric_ladder(1e-1, 1e-3, 5)).ok().and_then(|r| r.slope).unwrap_or(f64::NAN);
    out.push(Invariant::at_least("first_order_equivalence_slope", fo, 1.8));

    let history = make_schedule::<f64>(&Schedule::new(ScheduleKind::Decaying, 20, 16, 8), opts.seed);
    let mean = PolynomialProbe::coordinate_mean(16, 8);
    match interp::fit_background(&history, 1) {
        Ok((model, _)) => {
            for s in DriftSetting::standard() {
                let v = interp::drift_bound_check(&mean, &history, &model, &s, opts.drift_samples, opts.seed).map(|r| r.violations as f64).unwrap_or(f64::INFINITY);
                out.push(Invariant::at_most(format!("drift_bound_{}", s.name), v, 0.0));
            }
        }
        Err(_) => out.push(Invariant::at_most("drift_bound", f64::INFINITY, 0.0)),
    }

    let (hist, theta, c) = planted_ar2(64, 4, 12, 1e-4, opts.seed);
    let recovery = match interp::fit_background(&hist, 2) {
        Ok((m, _)) => {
            let mut e: f64 = 0.0;
            for (j, a) in theta.iter().enumerate() {
                for (g, w) in m.theta()[j].data().iter().zip(a.data()) {
                    e = e.max((g - w).abs());
                }
            }
            for (g, w) in m.intercept().iter().zip(&c) {
                e = e.max((g - w).abs());
            }
            e
        }
        Err(_) => f64::INFINITY,
    };
    out.push(Invariant::at_most("ar2_recovery", recovery, 1e-3));

    let frames = make_schedule::<f32>(&Schedule::new(ScheduleKind::LowMotion, 8, 16, 8), opts.seed);
    let bits = match interp::fit_background(&frames[..7], 2) {
        Ok((m, _)) => interp::motion_residual(&frames[7], &m, &frames[..7])
            .map(|dcmp| dcmp.reconstruct().data().iter().zip(frames[7].data()).filter(|(r, x)| r.to_bits() != (**x as f64).to_bits()).count() as f64)
            .unwrap_or(f64::INFINITY),
        Err(_) => f64::INFINITY,
    };
    out.push(Invariant::at_most("background_reconstruction_mismatches", bits, 0.0));
    out
}

/// Scale ladders for the exp-probe slope test, per order 1, 2, 3.
pub fn exp_ladders() -> Vec<Vec<f64>> {
    vec![geometric_ladder(1e-1, 1e-4, 7), geometric_ladder(1e-1, 1e-4, 7), geometric_ladder(1e-1, 1e-3, 5)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        let r = run_verify(&Suite::ALL, &VerifyOptions { drift_samples: 200, ..VerifyOptions::default() });
        assert!(r.passed, "{:?}", r.failures());
        let n: usize = r.suites.iter().map(|s| s.invariants.len()).sum();
        assert!(n >= 15);
    }

    #[test]
    fn threshold_fault_is_reported() {
        let r = run_verify(&[Suite::Bounds], &VerifyOptions { threshold_fault: Some(2.0), ..VerifyOptions::default() });
        assert!(!r.passed);
        let f = r.failures();
        assert!(f.contains(&"bounds/gate_soundness".to_string()), "{f:?}");
        assert!(f.contains(&"bounds/threshold_consistency".to_string()), "{f:?}");
    }

    #[test]
    fn suite_names() {
        assert_eq!(Suite::parse("all").unwrap().len(), 3);
        assert!(Suite::parse("everything").is_err());
    }
}
