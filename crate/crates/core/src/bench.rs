//! Method × configuration comparison runs and their CSV rows.

use std::time::Instant;

use serde::Serialize;

use crate::approx::ApproximatorSet;
use crate::engine::{self, EngineConfig, EngineError, SkipMode};
use crate::model::ToyModel;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Which of the three modules are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Modules {
    pub token_reduction: bool,
    pub statistical_cache: bool,
    pub blending: bool,
}

impl Modules {
    pub const NONE: Self = Self { token_reduction: false, statistical_cache: false, blending: false };
    pub const ALL: Self = Self { token_reduction: true, statistical_cache: true, blending: true };

    /// The five ablation rows: none, STR+MB, SC+MB, STR+SC, all.
    pub fn grid() -> Vec<Self> {
        vec![
            Self::NONE,
            Self { token_reduction: true, statistical_cache: false, blending: true },
            Self { token_reduction: false, statistical_cache: true, blending: true },
            Self { token_reduction: true, statistical_cache: true, blending: false },
            Self::ALL,
        ]
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.token_reduction {
            parts.push("STR");
        }
        if self.statistical_cache {
            parts.push("SC");
        }
        if self.blending {
            parts.push("MB");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }

    /// Parses one enabled-module list such as `STR,SC` or `none`.
    pub fn parse(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("none") {
            return Ok(Self::NONE);
        }
        let mut m = Self::NONE;
        for part in s.split([',', '+']) {
            match part.trim().to_ascii_uppercase().as_str() {
                "STR" => m.token_reduction = true,
                "SC" => m.statistical_cache = true,
                "MB" => m.blending = true,
                "ALL" => m = Self::ALL,
                other => return Err(format!("unknown module `{other}` (expected STR, SC, MB, all, none or grid)")),
            }
        }
        Ok(m)
    }

    /// `grid`, or one or more `;`-separated module lists.
    pub fn parse_list(s: &str) -> Result<Vec<Self>, String> {
        if s.trim().eq_ignore_ascii_case("grid") {
            return Ok(Self::grid());
        }
        s.split(';').map(Self::parse).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Method {
    Full,
    FixedSkip(usize),
    FastCache,
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Self::Full => "full".into(),
            Self::FixedSkip(k) => format!("fixed-skip({k})"),
            Self::FastCache => "fastcache".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub significance: f64,
    pub tau_s: f64,
    pub gamma: f64,
    pub skip_mode: SkipMode,
    pub methods: Vec<Method>,
    pub configs: Vec<Modules>,
    /// Each cell is timed this many times; the minimum is reported.
    pub repeats: usize,
    pub threads: usize,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            significance: 0.05,
            tau_s: 0.05,
            gamma: 0.5,
            skip_mode: SkipMode::Linear,
            methods: vec![Method::Full, Method::FixedSkip(2), Method::FastCache],
            configs: vec![Modules::ALL],
            repeats: 3,
            threads: 1,
        }
    }
}

impl BenchSpec {
    pub fn engine_config(&self, m: Modules) -> EngineConfig {
        EngineConfig {
            significance: self.significance,
            tau_s: self.tau_s,
            gamma: self.gamma,
            skip_mode: self.skip_mode,
            ..EngineConfig::with_modules(m.token_reduction, m.statistical_cache, m.blending)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub method: String,
    pub config: String,
    pub wall_ms: f64,
    /// Baseline full-compute time over the same inputs divided by `wall_ms`.
    pub speedup: f64,
    pub flops: u64,
    pub full_flops: u64,
    pub flop_savings: u64,
    pub skip_rate: f64,
    /// Mean over timesteps of ‖out − ref‖_F / ‖ref‖_F against full compute.
    pub deviation: f64,
    pub bound_violations: usize,
    pub motion_fraction: f64,
}

/// Worker count from `FASTCACHE_THREADS`, default 1.
pub fn threads_from_env() -> usize {
    std::env::var("FASTCACHE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0).unwrap_or(1)
}

/// Mean relative Frobenius deviation of `outputs` from `reference`.
pub fn mean_deviation<T: Scalar>(outputs: &[Matrix<T>], reference: &[Matrix<T>]) -> f64 {
    if outputs.is_empty() {
        return 0.0;
    }
    let total: f64 = outputs
        .iter()
        .zip(reference)
        .map(|(o, r)| {
            let n = r.frobenius_norm();
            let d = o.frobenius_distance(r).unwrap_or(f64::INFINITY);
            if n > 0.0 {
                d / n
            } else {
                d
            }
        })
        .sum();
    total / outputs.len() as f64
}

fn time_full<T: Scalar>(model: &ToyModel<T>, inputs: &[Matrix<T>], repeats: usize) -> Result<(f64, Vec<Matrix<T>>), EngineError> {
    let mut best = f64::INFINITY;
    let mut out = Vec::new();
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        out = engine::run_full(model, inputs)?;
        best = best.min(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok((best, out))
}

#[allow(clippy::too_many_arguments)]
fn run_cell<T: Scalar>(
    model: &ToyModel<T>,
    inputs: &[Matrix<T>],
    approx: Option<&ApproximatorSet<T>>,
    spec: &BenchSpec,
    method: Method,
    modules: Modules,
    reference: &[Matrix<T>],
    full_ms: f64,
) -> Result<BenchResult, EngineError> {
    let full_flops = engine::full_flops(model, inputs);
    if method == Method::Full {
        let (ms, out) = time_full(model, inputs, spec.repeats)?;
        return Ok(BenchResult {
            method: method.name(),
            config: modules.label(),
            wall_ms: ms,
            speedup: full_ms / ms,
            flops: full_flops,
            full_flops,
            flop_savings: 0,
            skip_rate: 0.0,
            deviation: mean_deviation(&out, reference),
            bound_violations: 0,
            motion_fraction: 1.0,
        });
    }
    let cfg = match method {
        Method::FixedSkip(k) => EngineConfig::fixed_interval(k),
        _ => spec.engine_config(modules),
    };
    let mut best: Option<engine::RunReport<T>> = None;
    for _ in 0..spec.repeats.max(1) {
        let r = engine::run_generation(model, inputs, &cfg, approx)?;
        if best.as_ref().is_none_or(|b| r.summary.wall_ms < b.summary.wall_ms) {
            best = Some(r);
        }
    }
    let r = best.expect("at least one repeat");
    let s = &r.summary;
    Ok(BenchResult {
        method: method.name(),
        config: modules.label(),
        wall_ms: s.wall_ms,
        speedup: full_ms / s.wall_ms,
        flops: s.flops,
        full_flops,
        flop_savings: full_flops.saturating_sub(s.flops),
        skip_rate: s.skip_rate,
        deviation: mean_deviation(&r.outputs, reference),
        bound_violations: s.bound_violations,
        motion_fraction: s.mean_motion_fraction,
    })
}

/// Runs every (config, method) cell, config-major; one row per cell.
pub fn run_bench<T: Scalar>(
    model: &ToyModel<T>,
    inputs: &[Matrix<T>],
    approx: Option<&ApproximatorSet<T>>,
    spec: &BenchSpec,
) -> Result<Vec<BenchResult>, EngineError> {
    let (full_ms, reference) = time_full(model, inputs, spec.repeats)?;
    let cells: Vec<(Modules, Method)> = spec.configs.iter().flat_map(|&c| spec.methods.iter().map(move |&m| (c, m))).collect();
    let threads = spec.threads.max(1).min(cells.len().max(1));
    if threads == 1 {
        return cells.iter().map(|&(c, m)| run_cell(model, inputs, approx, spec, m, c, &reference, full_ms)).collect();
    }
    let chunk = cells.len().div_ceil(threads);
    let results: Vec<Result<Vec<BenchResult>, EngineError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = cells
            .chunks(chunk)
            .map(|part| {
                let reference = &reference;
                scope.spawn(move || part.iter().map(|&(c, m)| run_cell(model, inputs, approx, spec, m, c, reference, full_ms)).collect())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("bench worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(cells.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

pub fn write_csv<W: std::io::Write>(rows: &[BenchResult], w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}
