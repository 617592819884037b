//! A small pre-norm transformer stack: the substrate the cache accelerates.
//!
//! ```text
//! h → LN → MHSA → (+) → LN → MLP(GELU) → (+) → out
//! └──────────────┘ └─────────────────────┘
//! ```
//!
//! Linear layers store weights as `in × out`, so `y = x·W + b`.

use crate::rng::{derive_seed, SplitMix64};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, Result, TensorError};

const LN_EPS: f64 = 1e-5;
pub const MLP_RATIO: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    fn seeded(rng: &mut SplitMix64, input: usize, output: usize, gain: f64) -> Self {
        let std = gain / (input as f64).sqrt();
        let weight = Matrix::gaussian_from(rng, input, output, std);
        let bias = (0..output).map(|_| T::from_f64_lossy(0.01 * rng.next_gaussian())).collect();
        Self { weight, bias }
    }

    fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Matrix::zeros(input, output), bias: vec![T::zero(); output] }
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut y = x.matmul(&self.weight)?;
        y.add_row_broadcast(&self.bias)?;
        Ok(y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub scale: Vec<T>,
    pub shift: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    fn new(dim: usize) -> Self {
        Self { scale: vec![T::one(); dim], shift: vec![T::zero(); dim] }
    }

    pub fn forward(&self, x: &Matrix<T>) -> Matrix<T> {
        let d = x.cols();
        let inv_d = T::from_f64_lossy(1.0 / d as f64);
        let eps = T::from_f64_lossy(LN_EPS);
        let mut out = x.clone();
        for i in 0..x.rows() {
            let row = out.row_mut(i);
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
            let inv_std = (var + eps).sqrt().recip();
            for ((v, &g), &b) in row.iter_mut().zip(&self.scale).zip(&self.shift) {
                *v = (*v - mean) * inv_std * g + b;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock<T> {
    pub dim: usize,
    pub heads: usize,
    pub ln1: LayerNorm<T>,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub ln2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> TransformerBlock<T> {
    pub fn seeded(dim: usize, heads: usize, seed: u64) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "heads must divide dim");
        let mut rng = SplitMix64::new(seed);
        let hidden = MLP_RATIO * dim;
        Self {
            dim,
            heads,
            ln1: LayerNorm::new(dim),
            q: Linear::seeded(&mut rng, dim, dim, 1.0),
            k: Linear::seeded(&mut rng, dim, dim, 1.0),
            v: Linear::seeded(&mut rng, dim, dim, 1.0),
            o: Linear::seeded(&mut rng, dim, dim, 0.5),
            ln2: LayerNorm::new(dim),
            fc1: Linear::seeded(&mut rng, dim, hidden, 1.0),
            fc2: Linear::seeded(&mut rng, hidden, dim, 0.5),
        }
    }

    /// All projection weights and biases zero: the block is the identity.
    pub fn zeros(dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "heads must divide dim");
        let hidden = MLP_RATIO * dim;
        Self {
            dim,
            heads,
            ln1: LayerNorm::new(dim),
            q: Linear::zeros(dim, dim),
            k: Linear::zeros(dim, dim),
            v: Linear::zeros(dim, dim),
            o: Linear::zeros(dim, dim),
            ln2: LayerNorm::new(dim),
            fc1: Linear::zeros(dim, hidden),
            fc2: Linear::zeros(hidden, dim),
        }
    }

    pub fn forward(&self, h: &Matrix<T>) -> Result<Matrix<T>> {
        if h.cols() != self.dim {
            return Err(TensorError::Shape { op: "block_forward", lhs: h.shape(), rhs: (h.rows(), self.dim) });
        }
        let mut x = h.clone();
        if h.rows() == 0 {
            return Ok(x);
        }
        let attn = self.attention(&self.ln1.forward(&x))?;
        x.add_assign(&attn)?;
        let mut hidden = self.fc1.forward(&self.ln2.forward(&x))?;
        for v in hidden.data_mut() {
            *v = gelu(*v);
        }
        let mlp = self.fc2.forward(&hidden)?;
        x.add_assign(&mlp)?;
        Ok(x)
    }

    fn attention(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let n = x.rows();
        let hd = self.dim / self.heads;
        let q = self.q.forward(x)?;
        let k = self.k.forward(x)?;
        let v = self.v.forward(x)?;
        let scale = T::from_f64_lossy(1.0 / (hd as f64).sqrt());
        let mut concat = Matrix::zeros(n, self.dim);
        for head in 0..self.heads {
            let cols = head * hd..(head + 1) * hd;
            let qh = Matrix::from_fn(n, hd, |i, j| q.get(i, cols.start + j));
            let kh = Matrix::from_fn(n, hd, |i, j| k.get(i, cols.start + j));
            let vh = Matrix::from_fn(n, hd, |i, j| v.get(i, cols.start + j));
            let mut scores = qh.matmul_t(&kh)?.scale(scale);
            softmax_rows(&mut scores);
            let out = scores.matmul(&vh)?;
            for i in 0..n {
                concat.row_mut(i)[cols.clone()].copy_from_slice(out.row(i));
            }
        }
        self.o.forward(&concat)
    }

    /// Multiply-add count of one forward over `n` tokens, counting two FLOPs
    /// per multiply-accumulate: projections 8nd², scores and mixing 4n²d,
    /// MLP 16nd².
    pub fn flops(&self, n: usize) -> u64 {
        block_flops(n, self.dim)
    }
}

pub fn block_flops(n: usize, d: usize) -> u64 {
    let (n, d) = (n as u64, d as u64);
    8 * n * d * d + 4 * n * n * d + 4 * (MLP_RATIO as u64) * n * d * d
}

fn softmax_rows<T: Scalar>(m: &mut Matrix<T>) {
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Tanh-form GELU, evaluated as `x·σ(2u)`, which equals `½x(1 + tanh u)`.
#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(2.0 * (2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64_lossy(0.044715);
    x / (T::one() + (-(c * (x + a * x * x * x))).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel<T> {
    pub layers: Vec<TransformerBlock<T>>,
    pub dim: usize,
    pub heads: usize,
    pub seed: u64,
}

impl<T: Scalar> ToyModel<T> {
    /// Block `l` is seeded with `derive_seed(seed, l)`.
    pub fn seeded(layers: usize, dim: usize, heads: usize, seed: u64) -> Self {
        let layers = (0..layers).map(|l| TransformerBlock::seeded(dim, heads, derive_seed(seed, l as u64))).collect();
        Self { layers, dim, heads, seed }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Plain L-block forward.
    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut h = x.clone();
        for block in &self.layers {
            h = block.forward(&h)?;
        }
        Ok(h)
    }

    /// Forward that also returns every intermediate state (L + 1 matrices,
    /// starting with the input).
    pub fn forward_states(&self, x: &Matrix<T>) -> Result<Vec<Matrix<T>>> {
        let mut states = Vec::with_capacity(self.layers.len() + 1);
        states.push(x.clone());
        for block in &self.layers {
            let next = block.forward(states.last().expect("non-empty"))?;
            states.push(next);
        }
        Ok(states)
    }
}
