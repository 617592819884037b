//! The caching state machine: per-block cache slots, the gated skip/compute
//! decision, and the per-timestep orchestration across the block stack.
//!
//! One timestep:
//!
//! 1. Saliency of `x_t` against `x_{t-1}` splits tokens into motion/static.
//! 2. Static rows take the affine bypass (optionally blended with their
//!    previous final value) and are carried unchanged through the stack.
//! 3. Each block sees the full reassembled state for its gate statistic, but
//!    only motion rows are computed, approximated or reused.

use std::collections::VecDeque;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::approx::{ApproximatorSet, FitWarning, LinearApproximator, RidgeAccumulator};
use crate::model::{block_flops, ToyModel, TransformerBlock};
use crate::saliency::{self, SaliencyConfig, TokenPartition};
use crate::scalar::Scalar;
use crate::stats::{cache_error_bound, relative_change, should_skip, ChiSquareTest, StatsError};
use crate::tensor::{Matrix, TensorError};
use crate::trace::Trace;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, EngineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    /// Substitute the block with its fitted affine map.
    Linear,
    /// Return the block's output from the previous timestep.
    Reuse,
}

impl std::str::FromStr for SkipMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(Self::Linear),
            "reuse" => Ok(Self::Reuse),
            other => Err(format!("unknown skip mode `{other}` (expected linear or reuse)")),
        }
    }
}

impl std::fmt::Display for SkipMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::Reuse => "reuse",
        })
    }
}

/// What drove a decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionReason {
    /// The chi-squared gate.
    Gate,
    /// Fixed-interval baseline schedule; the gate was not consulted.
    FixedInterval,
    /// Empty slot: nothing to compare against.
    NoReference,
    /// Previous input had zero norm.
    DegenerateReference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheDecision {
    pub timestep: usize,
    pub layer: usize,
    pub delta: f64,
    pub threshold: f64,
    pub skipped: bool,
    pub skip_mode: SkipMode,
    pub bound: f64,
    pub reason: DecisionReason,
}

impl CacheDecision {
    /// A gate skip whose δ exceeds the bound.
    pub fn violates_bound(&self) -> bool {
        self.reason == DecisionReason::Gate && self.skipped && !(self.delta <= self.bound)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub significance: f64,
    pub tau_s: f64,
    pub gamma: f64,
    pub skip_mode: SkipMode,
    pub window: usize,
    pub token_reduction_enabled: bool,
    pub block_cache_enabled: bool,
    pub blend_enabled: bool,
    /// Replace the gate with "skip every k-th block cell" (baseline).
    pub fixed_interval: Option<usize>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            significance: 0.05,
            tau_s: 0.05,
            gamma: 0.5,
            skip_mode: SkipMode::Linear,
            window: 8,
            token_reduction_enabled: true,
            block_cache_enabled: true,
            blend_enabled: true,
            fixed_interval: None,
        }
    }
}

impl EngineConfig {
    /// Every module off: a plain forward pass per timestep.
    pub fn disabled() -> Self {
        Self::with_modules(false, false, false)
    }

    pub fn with_modules(token_reduction: bool, block_cache: bool, blend: bool) -> Self {
        Self { token_reduction_enabled: token_reduction, block_cache_enabled: block_cache, blend_enabled: blend, ..Self::default() }
    }

    /// Baseline that reuses every `k`-th block cell after the first timestep.
    pub fn fixed_interval(k: usize) -> Self {
        Self { skip_mode: SkipMode::Reuse, fixed_interval: Some(k), ..Self::with_modules(false, true, false) }
    }

    pub fn saliency(&self) -> SaliencyConfig {
        SaliencyConfig { tau_s: self.tau_s, gamma: self.gamma }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.significance > 0.0 && self.significance < 1.0) {
            return Err(EngineError::Config(format!("significance must lie in (0, 1), got {}", self.significance)));
        }
        self.saliency().validate().map_err(EngineError::Config)?;
        if self.window == 0 {
            return Err(EngineError::Config("window must be positive".into()));
        }
        if self.fixed_interval == Some(0) {
            return Err(EngineError::Config("fixed interval must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BlockCacheSlot<T> {
    prev_input: Option<Matrix<T>>,
    prev_output: Option<Matrix<T>>,
    pub approximator: LinearApproximator<T>,
    delta_history: VecDeque<f64>,
    window: usize,
}

impl<T: Scalar> BlockCacheSlot<T> {
    pub fn new(approximator: LinearApproximator<T>, window: usize) -> Self {
        Self { prev_input: None, prev_output: None, approximator, delta_history: VecDeque::with_capacity(window), window: window.max(1) }
    }

    pub fn prev_input(&self) -> Option<&Matrix<T>> {
        self.prev_input.as_ref()
    }

    pub fn prev_output(&self) -> Option<&Matrix<T>> {
        self.prev_output.as_ref()
    }

    /// Most recent δ values, oldest first, at most `window` of them.
    pub fn delta_history(&self) -> &VecDeque<f64> {
        &self.delta_history
    }

    fn record(&mut self, input: &Matrix<T>, output: &Matrix<T>, delta: Option<f64>) {
        self.prev_input = Some(input.clone());
        self.prev_output = Some(output.clone());
        if let Some(d) = delta {
            if self.delta_history.len() == self.window {
                self.delta_history.pop_front();
            }
            self.delta_history.push_back(d);
        }
    }
}

/// Where a block step sits and which rows it may touch.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub timestep: usize,
    pub layer: usize,
    /// Rows to compute/approximate/reuse; `None` means all.
    pub active: Option<&'a [usize]>,
    /// Predetermined decision (fixed-interval baseline) instead of the gate.
    pub forced_skip: Option<bool>,
}

impl StepContext<'_> {
    pub fn at(timestep: usize, layer: usize) -> Self {
        Self { timestep, layer, active: None, forced_skip: None }
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    pub output: Matrix<T>,
    pub decision: CacheDecision,
    pub flops: u64,
}

fn compute_rows<T: Scalar>(block: &TransformerBlock<T>, input: &Matrix<T>, active: Option<&[usize]>) -> Result<(Matrix<T>, u64)> {
    match active {
        None => Ok((block.forward(input)?, block.flops(input.rows()))),
        Some([]) => Ok((input.clone(), 0)),
        Some(idx) => {
            let sub = block.forward(&input.gather_rows(idx)?)?;
            let mut out = input.clone();
            out.scatter_rows(idx, &sub)?;
            Ok((out, block.flops(idx.len())))
        }
    }
}

/// One gated block: compare the input with the slot's previous input, then
/// skip (linear map or reuse) or compute. The slot is updated either way.
pub fn block_step<T: Scalar>(
    slot: &mut BlockCacheSlot<T>,
    input: &Matrix<T>,
    block: &TransformerBlock<T>,
    test: &ChiSquareTest,
    mode: SkipMode,
    ctx: StepContext<'_>,
) -> Result<StepOutput<T>> {
    let (delta, reason, skip) = match &slot.prev_input {
        None => (0.0, DecisionReason::NoReference, false),
        Some(prev) => match relative_change(input, prev) {
            Ok(d) => match ctx.forced_skip {
                Some(s) => (d, DecisionReason::FixedInterval, s),
                None => (d, DecisionReason::Gate, should_skip(test, d)),
            },
            Err(StatsError::DegenerateReference) => (0.0, DecisionReason::DegenerateReference, false),
            Err(e) => return Err(e.into()),
        },
    };
    let (output, flops) = if skip {
        match mode {
            SkipMode::Linear => match ctx.active {
                None => (slot.approximator.apply(input)?, slot.approximator.flops(input.rows())),
                Some(idx) => {
                    let mut out = input.clone();
                    if !idx.is_empty() {
                        out.scatter_rows(idx, &slot.approximator.apply(&input.gather_rows(idx)?)?)?;
                    }
                    (out, slot.approximator.flops(idx.len()))
                }
            },
            SkipMode::Reuse => {
                let prev = slot.prev_output.as_ref().expect("slot holds both states");
                match ctx.active {
                    None => (prev.clone(), 0),
                    Some(idx) => {
                        let mut out = input.clone();
                        out.scatter_rows(idx, &prev.gather_rows(idx)?)?;
                        (out, 0)
                    }
                }
            }
        }
    } else {
        compute_rows(block, input, ctx.active)?
    };
    let measured = matches!(reason, DecisionReason::Gate | DecisionReason::FixedInterval).then_some(delta);
    slot.record(input, &output, measured);
    let decision = CacheDecision {
        timestep: ctx.timestep,
        layer: ctx.layer,
        delta,
        threshold: test.threshold(),
        skipped: skip,
        skip_mode: mode,
        bound: cache_error_bound(test),
        reason,
    };
    Ok(StepOutput { output, decision, flops })
}

/// Per-stream state across timesteps.
#[derive(Debug, Clone)]
pub struct EngineState<'m, T> {
    model: &'m ToyModel<T>,
    cfg: EngineConfig,
    slots: Vec<BlockCacheSlot<T>>,
    bypass: LinearApproximator<T>,
    test: Option<ChiSquareTest>,
    prev_x: Option<Matrix<T>>,
    prev_final: Option<Matrix<T>>,
    timestep: usize,
    decisions: Vec<CacheDecision>,
    flops: u64,
    motion_tokens: Vec<usize>,
}

impl<'m, T: Scalar> EngineState<'m, T> {
    /// Identity approximators everywhere until [`Self::with_approximators`].
    pub fn new(model: &'m ToyModel<T>, cfg: EngineConfig) -> Result<Self> {
        cfg.validate()?;
        let set = ApproximatorSet::identity(model.depth(), model.dim);
        Self::with_approximators(model, cfg, &set)
    }

    pub fn with_approximators(model: &'m ToyModel<T>, cfg: EngineConfig, set: &ApproximatorSet<T>) -> Result<Self> {
        cfg.validate()?;
        if set.layers.len() != model.depth() {
            return Err(EngineError::Config(format!("{} approximators for {} layers", set.layers.len(), model.depth())));
        }
        if set.layers.iter().chain(std::iter::once(&set.bypass)).any(|a| a.in_dim() != model.dim || a.out_dim() != model.dim) {
            return Err(EngineError::Config(format!("approximators must be {0}x{0}", model.dim)));
        }
        let slots = set.layers.iter().map(|a| BlockCacheSlot::new(a.clone(), cfg.window)).collect();
        Ok(Self {
            model,
            cfg,
            slots,
            bypass: set.bypass.clone(),
            test: None,
            prev_x: None,
            prev_final: None,
            timestep: 0,
            decisions: Vec::new(),
            flops: 0,
            motion_tokens: Vec::new(),
        })
    }

    /// Use `test` instead of deriving one from the configured significance.
    pub fn with_test(mut self, test: ChiSquareTest) -> Self {
        self.test = Some(test);
        self
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn slots(&self) -> &[BlockCacheSlot<T>] {
        &self.slots
    }

    pub fn decisions(&self) -> &[CacheDecision] {
        &self.decisions
    }

    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn timestep(&self) -> usize {
        self.timestep
    }

    /// Motion-token count of every timestep so far.
    pub fn motion_tokens(&self) -> &[usize] {
        &self.motion_tokens
    }

    fn test_for(&mut self, dof: u64) -> Result<ChiSquareTest> {
        match self.test {
            Some(t) if t.dof() == dof => Ok(t),
            Some(t) => Err(EngineError::Config(format!("test has dof {} but state has {dof}", t.dof()))),
            None => {
                let t = ChiSquareTest::new(dof, self.cfg.significance)?;
                self.test = Some(t);
                Ok(t)
            }
        }
    }

    fn partition(&self, x: &Matrix<T>) -> Result<TokenPartition> {
        match (&self.prev_x, self.cfg.token_reduction_enabled) {
            (Some(prev), true) => Ok(saliency::partition_tokens(&saliency::compute_saliency(x, prev)?, &self.cfg.saliency())),
            _ => Ok(TokenPartition::all_motion(x.rows())),
        }
    }

    /// Processes one timestep and returns the final hidden state.
    pub fn step(&mut self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.model.dim {
            return Err(TensorError::Shape { op: "fastcache_timestep", lhs: x.shape(), rhs: (x.rows(), self.model.dim) }.into());
        }
        let t = self.timestep;
        let partition = self.partition(x)?;
        let active = (!partition.is_all_motion()).then(|| partition.motion_indices());
        let mut h = x.clone();
        if let Some(motion) = active {
            let stat = partition.static_indices();
            let mut rows = saliency::static_bypass(&x.gather_rows(stat)?, &self.bypass)?;
            self.flops += self.bypass.flops(stat.len());
            if let (true, Some(prev)) = (self.cfg.blend_enabled && self.cfg.gamma < 1.0, &self.prev_final) {
                rows = saliency::blend(&rows, &prev.gather_rows(stat)?, self.cfg.gamma)?;
                self.flops += 3 * (stat.len() * x.cols()) as u64;
            }
            h.scatter_rows(stat, &rows)?;
            debug_assert_eq!(motion.len() + stat.len(), x.rows());
        }
        self.motion_tokens.push(partition.motion_indices().len());

        if self.cfg.block_cache_enabled {
            let test = self.test_for((x.rows() * x.cols()) as u64)?;
            let depth = self.model.depth();
            for (l, block) in self.model.layers.iter().enumerate() {
                let forced_skip = self.cfg.fixed_interval.map(|k| t > 0 && (t * depth + l + 1).is_multiple_of(k));
                let ctx = StepContext { timestep: t, layer: l, active, forced_skip };
                let step = block_step(&mut self.slots[l], &h, block, &test, self.cfg.skip_mode, ctx)?;
                h = step.output;
                self.flops += step.flops;
                self.decisions.push(step.decision);
            }
        } else {
            for block in &self.model.layers {
                let (out, flops) = compute_rows(block, &h, active)?;
                h = out;
                self.flops += flops;
            }
        }

        self.prev_x = Some(x.clone());
        self.prev_final = Some(h.clone());
        self.timestep += 1;
        Ok(h)
    }
}

/// One timestep of the caching loop; see [`EngineState::step`].
pub fn fastcache_timestep<T: Scalar>(state: &mut EngineState<'_, T>, x_t: &Matrix<T>) -> Result<Matrix<T>> {
    state.step(x_t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: usize,
    pub skipped: usize,
    pub computed: usize,
    pub skip_rate: f64,
    pub mean_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub timesteps: usize,
    pub layers: usize,
    pub decisions: usize,
    pub skipped: usize,
    /// Skipped cells over all T·L (timestep, layer) cells.
    pub skip_rate: f64,
    /// Mean δ over decisions that measured one.
    pub mean_delta: f64,
    pub bound_violations: usize,
    pub wall_ms: f64,
    pub flops: u64,
    pub full_flops: u64,
    pub mean_motion_fraction: f64,
    pub per_layer: Vec<LayerStats>,
}

impl RunSummary {
    /// Rebuilds every counter from a decision log.
    pub fn from_decisions(decisions: &[CacheDecision], timesteps: usize, layers: usize) -> Self {
        let measured = |d: &CacheDecision| matches!(d.reason, DecisionReason::Gate | DecisionReason::FixedInterval);
        let mean = |it: Vec<f64>| if it.is_empty() { 0.0 } else { it.iter().sum::<f64>() / it.len() as f64 };
        let cells = (timesteps * layers).max(1) as f64;
        let per_layer = (0..layers)
            .map(|l| {
                let ds: Vec<&CacheDecision> = decisions.iter().filter(|d| d.layer == l).collect();
                let skipped = ds.iter().filter(|d| d.skipped).count();
                LayerStats {
                    layer: l,
                    skipped,
                    computed: ds.len() - skipped,
                    skip_rate: skipped as f64 / timesteps.max(1) as f64,
                    mean_delta: mean(ds.iter().filter(|d| measured(d)).map(|d| d.delta).collect()),
                }
            })
            .collect();
        let skipped = decisions.iter().filter(|d| d.skipped).count();
        Self {
            timesteps,
            layers,
            decisions: decisions.len(),
            skipped,
            skip_rate: skipped as f64 / cells,
            mean_delta: mean(decisions.iter().filter(|d| measured(d)).map(|d| d.delta).collect()),
            bound_violations: decisions.iter().filter(|d| d.violates_bound()).count(),
            wall_ms: 0.0,
            flops: 0,
            full_flops: 0,
            mean_motion_fraction: 1.0,
            per_layer,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunReport<T> {
    pub outputs: Vec<Matrix<T>>,
    pub decisions: Vec<CacheDecision>,
    pub summary: RunSummary,
}

#[derive(Serialize)]
struct DecisionRow {
    t: usize,
    l: usize,
    delta: f64,
    threshold: f64,
    skipped: bool,
    mode: SkipMode,
}

impl<T> RunReport<T> {
    /// Decision log as CSV with header `t,l,delta,threshold,skipped,mode`.
    pub fn write_decisions_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for d in &self.decisions {
            out.serialize(DecisionRow { t: d.timestep, l: d.layer, delta: d.delta, threshold: d.threshold, skipped: d.skipped, mode: d.skip_mode })?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.summary).expect("summary serializes")
    }
}

/// Runs the whole denoising loop over `inputs`.
pub fn run_generation<T: Scalar>(model: &ToyModel<T>, inputs: &[Matrix<T>], cfg: &EngineConfig, approximators: Option<&ApproximatorSet<T>>) -> Result<RunReport<T>> {
    let mut state = match approximators {
        Some(set) => EngineState::with_approximators(model, cfg.clone(), set)?,
        None => EngineState::new(model, cfg.clone())?,
    };
    let mut outputs = Vec::with_capacity(inputs.len());
    let start = Instant::now();
    for x in inputs {
        outputs.push(state.step(x)?);
    }
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let mut summary = RunSummary::from_decisions(&state.decisions, inputs.len(), model.depth());
    summary.wall_ms = wall_ms;
    summary.flops = state.flops;
    summary.full_flops = full_flops(model, inputs);
    let total_tokens: usize = inputs.iter().map(|x| x.rows()).sum();
    if total_tokens > 0 {
        summary.mean_motion_fraction = state.motion_tokens.iter().sum::<usize>() as f64 / total_tokens as f64;
    }
    Ok(RunReport { outputs, decisions: state.decisions, summary })
}

/// FLOPs of a plain full-compute run over `inputs`.
pub fn full_flops<T: Scalar>(model: &ToyModel<T>, inputs: &[Matrix<T>]) -> u64 {
    inputs.iter().map(|x| block_flops(x.rows(), model.dim) * model.depth() as u64).sum()
}

/// Plain forward over every timestep.
pub fn run_full<T: Scalar>(model: &ToyModel<T>, inputs: &[Matrix<T>]) -> Result<Vec<Matrix<T>>> {
    inputs.iter().map(|x| Ok(model.forward(x)?)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerFit {
    pub layer: Option<usize>,
    pub train_rows: usize,
    pub heldout_rows: usize,
    /// Relative Frobenius error of the fit on held-out pairs.
    pub heldout_error: Option<f64>,
    /// Same metric for the identity map.
    pub identity_error: Option<f64>,
    pub warning: Option<FitWarning>,
}

#[derive(Debug, Clone)]
pub struct Calibration<T> {
    pub set: ApproximatorSet<T>,
    /// One entry per layer.
    pub layers: Vec<LayerFit>,
    /// The static-token bypass, fitted on x_t → final hidden state.
    pub bypass: LayerFit,
    pub warnings: Vec<String>,
}

/// Number of trailing frames of a `steps`-frame trace held out from fitting.
pub fn heldout_frames(steps: usize) -> usize {
    if steps < 2 {
        0
    } else {
        ((steps as f64 * 0.2).round() as usize).clamp(1, steps - 1)
    }
}

struct ErrAcc {
    fit: f64,
    ident: f64,
    norm: f64,
    rows: usize,
}

impl ErrAcc {
    fn new() -> Self {
        Self { fit: 0.0, ident: 0.0, norm: 0.0, rows: 0 }
    }

    fn push<T: Scalar>(&mut self, approx: &LinearApproximator<T>, x: &Matrix<T>, y: &Matrix<T>) -> Result<()> {
        let pred = approx.apply(x)?;
        self.fit += pred.sub(y)?.sq_sum();
        self.ident += x.sub(y)?.sq_sum();
        self.norm += y.sq_sum();
        self.rows += x.rows();
        Ok(())
    }

    fn finish(&self) -> (Option<f64>, Option<f64>) {
        if self.rows == 0 || self.norm == 0.0 {
            return (None, None);
        }
        (Some((self.fit / self.norm).sqrt()), Some((self.ident / self.norm).sqrt()))
    }
}

/// Ridge fit of every block (input → output) and of the static bypass
/// (x_t → H^L), on the leading frames of each trace; the trailing
/// [`heldout_frames`] are scored against the identity map.
pub fn fit_approximators<T: Scalar>(traces: &[Trace], layers: usize, dim: usize, ridge: f64) -> Result<Calibration<T>> {
    if !(ridge >= 0.0) {
        return Err(EngineError::Config(format!("ridge must be non-negative, got {ridge}")));
    }
    let mut warnings = Vec::new();
    if traces.is_empty() {
        warnings.push("no calibration traces; using identity approximators".to_string());
    }
    for (i, tr) in traces.iter().enumerate() {
        if tr.header.layers != layers || tr.header.dim != dim {
            return Err(EngineError::Config(format!(
                "trace {i} is {}x{} (layers x dim), expected {layers}x{dim}",
                tr.header.layers, tr.header.dim
            )));
        }
        if !tr.header.layer_pairs {
            warnings.push(format!("trace {i} has no layer pairs and is ignored"));
        }
    }
    let usable: Vec<&Trace> = traces.iter().filter(|t| t.header.layer_pairs).collect();
    let split = |tr: &Trace| tr.frames.len() - heldout_frames(tr.frames.len());

    let mut accs: Vec<RidgeAccumulator> = (0..=layers).map(|_| RidgeAccumulator::new(dim, dim)).collect();
    for tr in &usable {
        for f in &tr.frames[..split(tr)] {
            for (l, (a, b)) in f.pairs.iter().enumerate() {
                accs[l].push(&a.cast::<T>(), &b.cast::<T>())?;
            }
            if let Some((_, last)) = f.pairs.last() {
                accs[layers].push(&f.input.cast::<T>(), &last.cast::<T>())?;
            }
        }
    }
    let mut fitted = Vec::with_capacity(layers + 1);
    let mut fits = Vec::with_capacity(layers + 1);
    for (idx, acc) in accs.iter().enumerate() {
        let (approx, warning) = acc.solve::<T>(ridge);
        let name = if idx == layers { "bypass".to_string() } else { format!("layer {idx}") };
        if let Some(w) = &warning {
            warnings.push(format!("{name}: {w:?}, identity fallback"));
        }
        let mut err = ErrAcc::new();
        for tr in &usable {
            for f in &tr.frames[split(tr)..] {
                if idx == layers {
                    if let Some((_, last)) = f.pairs.last() {
                        err.push(&approx, &f.input.cast::<T>(), &last.cast::<T>())?;
                    }
                } else {
                    let (a, b) = &f.pairs[idx];
                    err.push(&approx, &a.cast::<T>(), &b.cast::<T>())?;
                }
            }
        }
        let (heldout_error, identity_error) = err.finish();
        fits.push(LayerFit {
            layer: (idx < layers).then_some(idx),
            train_rows: acc.rows(),
            heldout_rows: err.rows,
            heldout_error,
            identity_error,
            warning,
        });
        fitted.push(approx);
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let bypass = fitted.pop().expect("bypass fitted");
    let bypass_fit = fits.pop().expect("bypass fit");
    Ok(Calibration { set: ApproximatorSet { layers: fitted, bypass }, layers: fits, bypass: bypass_fit, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{make_schedule, Schedule, ScheduleKind};

    fn small() -> (ToyModel<f32>, Vec<Matrix<f32>>) {
        let m = ToyModel::seeded(3, 16, 2, 7);
        let xs = make_schedule(&Schedule::new(ScheduleKind::LowMotion, 8, 8, 16), 3);
        (m, xs)
    }

    #[test]
    fn first_step_always_computes() {
        let (m, xs) = small();
        let test = ChiSquareTest::new(8 * 16, 0.05).unwrap();
        let mut slot = BlockCacheSlot::new(LinearApproximator::identity(16), 4);
        let s = block_step(&mut slot, &xs[0], &m.layers[0], &test, SkipMode::Reuse, StepContext::at(0, 0)).unwrap();
        assert!(!s.decision.skipped);
        assert_eq!(s.decision.reason, DecisionReason::NoReference);
        assert_eq!(s.output, m.layers[0].forward(&xs[0]).unwrap());
        assert!(slot.prev_input().is_some() && slot.prev_output().is_some());
    }

    #[test]
    fn identical_input_reuses_bit_exactly() {
        let (m, xs) = small();
        let test = ChiSquareTest::new(8 * 16, 0.05).unwrap();
        let mut slot = BlockCacheSlot::new(LinearApproximator::identity(16), 4);
        let first = block_step(&mut slot, &xs[0], &m.layers[0], &test, SkipMode::Reuse, StepContext::at(0, 0)).unwrap();
        let second = block_step(&mut slot, &xs[0], &m.layers[0], &test, SkipMode::Reuse, StepContext::at(1, 0)).unwrap();
        assert!(second.decision.skipped);
        assert_eq!(second.decision.delta, 0.0);
        assert_eq!(second.output, first.output);
        assert_eq!(second.flops, 0);
    }

    #[test]
    fn over_threshold_computes_exactly() {
        let m = ToyModel::<f32>::seeded(1, 16, 2, 7);
        let a = Matrix::seeded_gaussian(8, 16, 1, 1.0);
        let b = Matrix::seeded_gaussian(8, 16, 2, 1.0);
        let test = ChiSquareTest::new(8 * 16, 0.05).unwrap();
        let mut slot = BlockCacheSlot::new(LinearApproximator::identity(16), 4);
        block_step(&mut slot, &a, &m.layers[0], &test, SkipMode::Linear, StepContext::at(0, 0)).unwrap();
        let s = block_step(&mut slot, &b, &m.layers[0], &test, SkipMode::Linear, StepContext::at(1, 0)).unwrap();
        assert!(s.decision.delta * s.decision.delta > test.threshold());
        assert!(!s.decision.skipped);
        assert_eq!(s.output, m.layers[0].forward(&b).unwrap());
    }

    #[test]
    fn zero_reference_forces_compute() {
        let m = ToyModel::<f32>::seeded(1, 16, 2, 7);
        let z = Matrix::zeros(4, 16);
        let test = ChiSquareTest::new(64, 0.05).unwrap();
        let mut slot = BlockCacheSlot::new(LinearApproximator::identity(16), 4);
        block_step(&mut slot, &z, &m.layers[0], &test, SkipMode::Reuse, StepContext::at(0, 0)).unwrap();
        let s = block_step(&mut slot, &z, &m.layers[0], &test, SkipMode::Reuse, StepContext::at(1, 0)).unwrap();
        assert_eq!(s.decision.reason, DecisionReason::DegenerateReference);
        assert!(!s.decision.skipped);
        assert!(slot.delta_history().is_empty());
    }

    #[test]
    fn window_is_bounded() {
        let (m, xs) = small();
        let test = ChiSquareTest::new(8 * 16, 0.05).unwrap();
        let mut slot = BlockCacheSlot::new(LinearApproximator::identity(16), 3);
        for (t, x) in xs.iter().enumerate() {
            block_step(&mut slot, x, &m.layers[0], &test, SkipMode::Linear, StepContext::at(t, 0)).unwrap();
        }
        assert_eq!(slot.delta_history().len(), 3);
    }

    #[test]
    fn all_off_matches_plain_forward() {
        let (m, xs) = small();
        let report = run_generation(&m, &xs, &EngineConfig::disabled(), None).unwrap();
        assert_eq!(report.outputs, run_full(&m, &xs).unwrap());
        assert!(report.decisions.is_empty());
        assert_eq!(report.summary.skip_rate, 0.0);
        assert_eq!(report.summary.flops, report.summary.full_flops);
    }

    #[test]
    fn constant_sequence_reuse_is_stable() {
        let (m, xs) = small();
        let xs = vec![xs[0].clone(); 5];
        let mut cfg = EngineConfig::with_modules(false, true, false);
        cfg.skip_mode = SkipMode::Reuse;
        let r = run_generation(&m, &xs, &cfg, None).unwrap();
        for t in 1..5 {
            assert_eq!(r.outputs[t], r.outputs[0]);
        }
        assert!(r.decisions.iter().filter(|d| d.timestep >= 1).all(|d| d.skipped));
    }

    #[test]
    fn summary_recount_matches_log() {
        let (m, xs) = small();
        let r = run_generation(&m, &xs, &EngineConfig::default(), None).unwrap();
        let re = RunSummary::from_decisions(&r.decisions, xs.len(), m.depth());
        assert_eq!(re.skipped, r.summary.skipped);
        assert_eq!(re.per_layer, r.summary.per_layer);
        assert_eq!(r.summary.bound_violations, 0);
        let mut csv = Vec::new();
        r.write_decisions_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().next(), Some("t,l,delta,threshold,skipped,mode"));
        assert_eq!(text.lines().count(), r.decisions.len() + 1);
    }

    #[test]
    fn static_schedule_skips_after_warmup() {
        let m = ToyModel::<f32>::seeded(2, 16, 2, 1);
        let xs = make_schedule(&Schedule::new(ScheduleKind::Static, 6, 8, 16), 1);
        let r = run_generation(&m, &xs, &EngineConfig::default(), None).unwrap();
        assert!(r.decisions.iter().filter(|d| d.timestep >= 1).all(|d| d.skipped));
        assert!(r.summary.flops < r.summary.full_flops / 4);
    }

    #[test]
    fn fixed_interval_reuses_every_kth_cell() {
        let (m, xs) = small();
        let r = run_generation(&m, &xs, &EngineConfig::fixed_interval(2), None).unwrap();
        for d in &r.decisions {
            let expect = d.timestep > 0 && (d.timestep * 3 + d.layer + 1) % 2 == 0;
            assert_eq!(d.skipped, expect);
        }
        assert_eq!(r.summary.bound_violations, 0);
    }

    #[test]
    fn zero_traces_give_identity() {
        let c = fit_approximators::<f32>(&[], 2, 4, 1e-6).unwrap();
        assert_eq!(c.set, ApproximatorSet::identity(2, 4));
        assert!(!c.warnings.is_empty());
        assert!(c.layers.iter().all(|f| f.warning.is_some()));
    }

    #[test]
    fn heldout_split_sizes() {
        assert_eq!(heldout_frames(0), 0);
        assert_eq!(heldout_frames(1), 0);
        assert_eq!(heldout_frames(2), 1);
        assert_eq!(heldout_frames(50), 10);
    }
}
