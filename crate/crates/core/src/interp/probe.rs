//! Scalar scoring functions over an `N × D` token input.

use std::sync::Arc;

use crate::model::ToyModel;
use crate::rng::SplitMix64;
use crate::tensor::Matrix;

use super::{InterpError, Result};

type Evaluator = Arc<dyn Fn(&Matrix<f64>) -> f64 + Send + Sync>;

/// A pure scorer `v`, the baseline rows used for masking, and an optional
/// Lipschitz constant with respect to the Frobenius norm.
#[derive(Clone)]
pub struct ProbeFunction {
    tokens: usize,
    dim: usize,
    evaluator: Evaluator,
    baseline: Matrix<f64>,
    lipschitz: Option<f64>,
}

impl std::fmt::Debug for ProbeFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProbeFunction").field("tokens", &self.tokens).field("dim", &self.dim).field("lipschitz", &self.lipschitz).finish()
    }
}

impl ProbeFunction {
    pub fn new(baseline: Matrix<f64>, evaluator: impl Fn(&Matrix<f64>) -> f64 + Send + Sync + 'static) -> Self {
        Self { tokens: baseline.rows(), dim: baseline.cols(), evaluator: Arc::new(evaluator), baseline, lipschitz: None }
    }

    pub fn with_lipschitz(mut self, l: f64) -> Self {
        self.lipschitz = Some(l);
        self
    }

    pub fn arity(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn baseline(&self) -> &Matrix<f64> {
        &self.baseline
    }

    pub fn lipschitz(&self) -> Option<f64> {
        self.lipschitz
    }

    pub fn check_input(&self, x: &Matrix<f64>) -> Result<()> {
        if x.shape() != (self.tokens, self.dim) {
            return Err(InterpError::Shape(format!("probe expects {}x{}, got {:?}", self.tokens, self.dim, x.shape())));
        }
        Ok(())
    }

    pub fn eval(&self, x: &Matrix<f64>) -> f64 {
        (self.evaluator)(x)
    }

    /// `v(x_S)`: rows in `mask` come from `x`, the rest from the baseline.
    pub fn eval_masked(&self, x: &Matrix<f64>, mask: u64) -> f64 {
        let xs = Matrix::from_fn(self.tokens, self.dim, |i, j| if mask >> i & 1 == 1 { x.get(i, j) } else { self.baseline.get(i, j) });
        self.eval(&xs)
    }

    /// `v(x_{i})` for a single token, valid for any arity.
    pub fn eval_single(&self, x: &Matrix<f64>, token: usize) -> f64 {
        let mut xs = self.baseline.clone();
        xs.row_mut(token).copy_from_slice(x.row(token));
        self.eval(&xs)
    }

    /// Scores a model's final hidden state with a fixed seeded linear readout.
    pub fn model_readout(model: Arc<ToyModel<f64>>, baseline: Matrix<f64>, seed: u64) -> Self {
        let (n, d) = baseline.shape();
        let w = Matrix::<f64>::seeded_gaussian(n, d, seed, 1.0 / ((n * d) as f64).sqrt());
        Self::new(baseline, move |x| {
            let h = model.forward(x).expect("probe input shape checked by caller");
            frob_inner(&w, &h)
        })
    }
}

/// `⟨a, b⟩_F = Σ a_ij b_ij`.
pub fn frob_inner(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// A probe whose gradient and Taylor coefficients along a line are known
/// in closed form.
pub trait AnalyticProbe: Send + Sync {
    fn shape(&self) -> (usize, usize);

    fn value(&self, x: &Matrix<f64>) -> f64;

    fn gradient(&self, x: &Matrix<f64>) -> Matrix<f64>;

    /// Coefficients `c_0..=c_order` of `s ↦ v(base + s·dir)` around `s = 0`.
    fn directional_series(&self, base: &Matrix<f64>, dir: &Matrix<f64>, order: usize) -> Vec<f64>;

    fn lipschitz(&self) -> Option<f64> {
        None
    }
}

/// `Σ_k coef_k · Π_f ⟨w_{k,f}, X⟩`.
#[derive(Debug, Clone)]
pub struct PolynomialProbe {
    shape: (usize, usize),
    terms: Vec<(f64, Vec<Matrix<f64>>)>,
}

impl PolynomialProbe {
    pub fn new(shape: (usize, usize), terms: Vec<(f64, Vec<Matrix<f64>>)>) -> Result<Self> {
        if terms.iter().flat_map(|(_, f)| f).any(|w| w.shape() != shape) {
            return Err(InterpError::Shape(format!("every factor must be {}x{}", shape.0, shape.1)));
        }
        Ok(Self { shape, terms })
    }

    /// The single linear functional `⟨w, X⟩`.
    pub fn linear(w: Matrix<f64>) -> Self {
        Self { shape: w.shape(), terms: vec![(1.0, vec![w])] }
    }

    /// Mean over all coordinates; Lipschitz constant `1/√(ND)`.
    pub fn coordinate_mean(n: usize, d: usize) -> Self {
        Self::linear(Matrix::from_fn(n, d, |_, _| 1.0 / (n * d) as f64))
    }

    /// `terms` random monomials of degree `1..=max_degree` with Gaussian
    /// factors, each factor supported on one random token so that cross-token
    /// products create genuine interactions.
    pub fn random(n: usize, d: usize, max_degree: usize, terms: usize, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let terms = (0..terms)
            .map(|_| {
                let deg = 1 + rng.next_below(max_degree.max(1) as u64) as usize;
                let coef = rng.next_gaussian();
                let factors = (0..deg)
                    .map(|_| {
                        let tok = rng.next_below(n as u64) as usize;
                        let row: Vec<f64> = (0..d).map(|_| rng.next_gaussian()).collect();
                        Matrix::from_fn(n, d, |i, j| if i == tok { row[j] } else { 0.0 })
                    })
                    .collect();
                (coef, factors)
            })
            .collect();
        Self { shape: (n, d), terms }
    }

    pub fn degree(&self) -> usize {
        self.terms.iter().map(|(_, f)| f.len()).max().unwrap_or(0)
    }

    pub fn to_probe(&self, baseline: Matrix<f64>) -> ProbeFunction {
        let me = self.clone();
        let l = self.lipschitz();
        let p = ProbeFunction::new(baseline, move |x| me.value(x));
        match l {
            Some(l) => p.with_lipschitz(l),
            None => p,
        }
    }
}

impl AnalyticProbe for PolynomialProbe {
    fn shape(&self) -> (usize, usize) {
        self.shape
    }

    fn value(&self, x: &Matrix<f64>) -> f64 {
        self.terms.iter().map(|(c, f)| c * f.iter().map(|w| frob_inner(w, x)).product::<f64>()).sum()
    }

    fn gradient(&self, x: &Matrix<f64>) -> Matrix<f64> {
        let (n, d) = self.shape;
        let mut g = Matrix::zeros(n, d);
        for (c, factors) in &self.terms {
            let vals: Vec<f64> = factors.iter().map(|w| frob_inner(w, x)).collect();
            for (f, w) in factors.iter().enumerate() {
                let others: f64 = vals.iter().enumerate().filter(|&(g, _)| g != f).map(|(_, v)| v).product();
                let k = c * others;
                for (o, wi) in g.data_mut().iter_mut().zip(w.data()) {
                    *o += k * wi;
                }
            }
        }
        g
    }

    fn directional_series(&self, base: &Matrix<f64>, dir: &Matrix<f64>, order: usize) -> Vec<f64> {
        let mut out = vec![0.0; order + 1];
        for (c, factors) in &self.terms {
            let mut poly = vec![*c];
            for w in factors {
                let (a, b) = (frob_inner(w, base), frob_inner(w, dir));
                let mut next = vec![0.0; poly.len() + 1];
                for (k, p) in poly.iter().enumerate() {
                    next[k] += p * a;
                    next[k + 1] += p * b;
                }
                poly = next;
            }
            for (o, p) in out.iter_mut().zip(&poly) {
                *o += p;
            }
        }
        out
    }

    fn lipschitz(&self) -> Option<f64> {
        match self.terms.as_slice() {
            [] => Some(0.0),
            [(c, f)] if f.len() == 1 => Some(c.abs() * f[0].frobenius_norm()),
            _ if self.degree() == 0 => Some(0.0),
            _ => None,
        }
    }
}

/// `scale · exp(⟨w, X⟩)`.
#[derive(Debug, Clone)]
pub struct ExpProbe {
    pub w: Matrix<f64>,
    pub scale: f64,
}

impl ExpProbe {
    pub fn new(w: Matrix<f64>, scale: f64) -> Self {
        Self { w, scale }
    }

    pub fn to_probe(&self, baseline: Matrix<f64>) -> ProbeFunction {
        let me = self.clone();
        ProbeFunction::new(baseline, move |x| me.value(x))
    }
}

impl AnalyticProbe for ExpProbe {
    fn shape(&self) -> (usize, usize) {
        self.w.shape()
    }

    fn value(&self, x: &Matrix<f64>) -> f64 {
        self.scale * frob_inner(&self.w, x).exp()
    }

    fn gradient(&self, x: &Matrix<f64>) -> Matrix<f64> {
        self.w.scale(self.value(x))
    }

    fn directional_series(&self, base: &Matrix<f64>, dir: &Matrix<f64>, order: usize) -> Vec<f64> {
        let a = frob_inner(&self.w, base);
        let b = frob_inner(&self.w, dir);
        let mut c = self.scale * a.exp();
        let mut out = Vec::with_capacity(order + 1);
        for k in 0..=order {
            out.push(c);
            c *= b / (k + 1) as f64;
        }
        out
    }
}

/// Central-difference gradient with per-coordinate step `rel·max(|x|, 1)`.
pub fn fd_gradient(f: impl Fn(&Matrix<f64>) -> f64, x: &Matrix<f64>, rel: f64) -> Matrix<f64> {
    let mut probe = x.clone();
    let mut g = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let x0 = x.get(i, j);
            let h = rel * x0.abs().max(1.0);
            probe.set(i, j, x0 + h);
            let up = f(&probe);
            probe.set(i, j, x0 - h);
            let down = f(&probe);
            probe.set(i, j, x0);
            g.set(i, j, (up - down) / (2.0 * h));
        }
    }
    g
}
