//! Token-wise k-lag autoregressive background model and the motion residual.

use serde::Serialize;

use crate::approx::RidgeAccumulator;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

use super::{InterpError, Result};

/// Ridge used when the unregularized design is rank deficient.
pub const FALLBACK_RIDGE: f64 = 1e-8;
/// Default weight of the previous prediction in [`BackgroundTracker`].
pub const DEFAULT_MOMENTUM: f64 = 0.7;

#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundModel<T> {
    k: usize,
    /// `theta[j]` multiplies the lag-(j+1) row: `D × D`, applied as `θ·x`.
    theta: Vec<Matrix<T>>,
    intercept: Vec<T>,
    pub momentum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BackgroundFit {
    /// Root-sum-square in-sample residual over all fitted rows.
    pub residual_norm: f64,
    pub rows: usize,
    /// Set when the ridge fallback was needed.
    pub ridge_fallback: bool,
}

impl<T: Scalar> BackgroundModel<T> {
    pub fn new(theta: Vec<Matrix<T>>, intercept: Vec<T>) -> Result<Self> {
        let d = intercept.len();
        if theta.is_empty() || theta.iter().any(|m| m.shape() != (d, d)) {
            return Err(InterpError::Shape(format!("need k ≥ 1 matrices of {d}x{d}")));
        }
        Ok(Self { k: theta.len(), theta, intercept, momentum: DEFAULT_MOMENTUM })
    }

    /// All-zero coefficients: predicts 0 everywhere.
    pub fn zero(k: usize, dim: usize) -> Self {
        Self { k, theta: vec![Matrix::zeros(dim, dim); k], intercept: vec![T::zero(); dim], momentum: DEFAULT_MOMENTUM }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.intercept.len()
    }

    pub fn theta(&self) -> &[Matrix<T>] {
        &self.theta
    }

    pub fn intercept(&self) -> &[T] {
        &self.intercept
    }

    /// `B_i = θ_0 + Σ_j θ_j·x^{t−j}_i` from the last `k` history entries
    /// (most recent last), accumulated in `T::Wide` and rounded once.
    pub fn predict(&self, history: &[Matrix<T>]) -> Result<Matrix<T>> {
        if history.len() < self.k {
            return Err(InterpError::History { needed: self.k, got: history.len() });
        }
        let d = self.dim();
        let last = &history[history.len() - 1];
        let n = last.rows();
        if history.iter().any(|h| h.shape() != (n, d)) {
            return Err(InterpError::Shape(format!("history entries must all be {n}x{d}")));
        }
        let mut out = Matrix::zeros(n, d);
        for i in 0..n {
            for o in 0..d {
                let mut acc = self.intercept[o].widen();
                for (j, th) in self.theta.iter().enumerate() {
                    let x = history[history.len() - 1 - j].row(i);
                    for (w, v) in th.row(o).iter().zip(x) {
                        acc += w.widen() * v.widen();
                    }
                }
                out.set(i, o, T::from_f64_lossy(acc.to_f64_lossless()));
            }
        }
        Ok(out)
    }
}

/// Least-squares fit of the k-lag token-wise autoregression over every
/// (t ≥ k, token) row of `history`. Rank-deficient designs are refitted with
/// [`FALLBACK_RIDGE`] and flagged.
pub fn fit_background<T: Scalar>(history: &[Matrix<T>], k: usize) -> Result<(BackgroundModel<T>, BackgroundFit)> {
    if k == 0 {
        return Err(InterpError::Shape("k must be positive".into()));
    }
    if history.len() < k + 1 {
        return Err(InterpError::History { needed: k + 1, got: history.len() });
    }
    let (n, d) = history[0].shape();
    if history.iter().any(|h| h.shape() != (n, d)) {
        return Err(InterpError::Shape("history entries differ in shape".into()));
    }
    let mut acc = RidgeAccumulator::new(k * d, d);
    for t in k..history.len() {
        let features = Matrix::from_fn(n, k * d, |i, c| history[t - 1 - c / d].get(i, c % d));
        acc.push(&features, &history[t]).map_err(|e| InterpError::Shape(e.to_string()))?;
    }
    let (theta, ridge_fallback) = match acc.solve_theta(0.0, 1e-7) {
        Some(th) => (th, false),
        None => {
            log::warn!("background design is rank deficient; refitting with ridge {FALLBACK_RIDGE}");
            let th = acc.solve_theta(FALLBACK_RIDGE, 0.0).ok_or_else(|| InterpError::Numerical("ridge background fit failed".into()))?;
            (th, true)
        }
    };
    let mats = (0..k).map(|j| Matrix::from_fn(d, d, |o, i| T::from_f64_lossy(theta[(j * d + i, o)]))).collect();
    let intercept = (0..d).map(|o| T::from_f64_lossy(theta[(k * d, o)])).collect();
    let model = BackgroundModel::new(mats, intercept)?;
    let mut sq = 0.0;
    for t in k..history.len() {
        let pred = model.predict(&history[..t])?;
        sq += pred.frobenius_distance(&history[t]).map_err(|e| InterpError::Shape(e.to_string()))?.powi(2);
    }
    Ok((model, BackgroundFit { residual_norm: sq.sqrt(), rows: acc.rows(), ridge_fallback }))
}

/// `X = B + M` with `B` in the payload type and `M` in its wide type.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition<T: Scalar> {
    pub background: Matrix<T>,
    pub motion: Matrix<T::Wide>,
}

impl<T: Scalar> Decomposition<T> {
    /// `background + motion`, evaluated in `T::Wide`.
    pub fn reconstruct(&self) -> Matrix<T::Wide> {
        let data = self.background.data().iter().zip(self.motion.data()).map(|(b, m)| b.widen() + *m).collect();
        Matrix::new(self.background.rows(), self.background.cols(), data).expect("same shape")
    }
}

/// Splits `x_t` into the background prediction from `history` and the
/// residual. For `f32` payloads the residual is exact in `f64`, so
/// `reconstruct()` returns `x_t` bit-for-bit.
pub fn motion_residual<T: Scalar>(x_t: &Matrix<T>, model: &BackgroundModel<T>, history: &[Matrix<T>]) -> Result<Decomposition<T>> {
    let background = model.predict(history)?;
    decompose(x_t, background)
}

pub fn decompose<T: Scalar>(x_t: &Matrix<T>, background: Matrix<T>) -> Result<Decomposition<T>> {
    if background.shape() != x_t.shape() {
        return Err(InterpError::Shape(format!("background {:?} vs input {:?}", background.shape(), x_t.shape())));
    }
    let data = x_t.data().iter().zip(background.data()).map(|(x, b)| x.widen() - b.widen()).collect();
    let motion = Matrix::new(x_t.rows(), x_t.cols(), data).map_err(|e| InterpError::Numerical(e.to_string()))?;
    Ok(Decomposition { background, motion })
}

/// Exponential smoothing of successive background predictions:
/// `B ← m·B_prev + (1 − m)·B_fit`.
#[derive(Debug, Clone)]
pub struct BackgroundTracker<T> {
    pub model: BackgroundModel<T>,
    prev: Option<Matrix<T>>,
}

impl<T: Scalar> BackgroundTracker<T> {
    pub fn new(model: BackgroundModel<T>) -> Self {
        Self { model, prev: None }
    }

    /// The smoothed background for the step after `history`.
    pub fn update(&mut self, history: &[Matrix<T>]) -> Result<Matrix<T>> {
        let fit = self.model.predict(history)?;
        let next = match &self.prev {
            None => fit,
            Some(prev) => {
                let m = T::from_f64_lossy(self.model.momentum);
                let r = T::from_f64_lossy(1.0 - self.model.momentum);
                let data = prev.data().iter().zip(fit.data()).map(|(&p, &f)| m * p + r * f).collect();
                Matrix::new(fit.rows(), fit.cols(), data).map_err(|e| InterpError::Numerical(e.to_string()))?
            }
        };
        self.prev = Some(next.clone());
        Ok(next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn constant_history_is_reproduced() {
        let x = Matrix::<f64>::seeded_gaussian(6, 3, 1, 1.0);
        let hist = vec![x.clone(); 6];
        let (m, fit) = fit_background(&hist, 2).unwrap();
        assert!(fit.ridge_fallback);
        let pred = m.predict(&hist).unwrap();
        assert!(pred.frobenius_distance(&x).unwrap() < 1e-6);
    }

    #[test]
    fn geometric_ar1() {
        let c = 0.9;
        let mut hist = vec![Matrix::<f64>::seeded_gaussian(12, 3, 2, 1.0)];
        for _ in 0..8 {
            hist.push(hist.last().unwrap().scale(c));
        }
        let (m, fit) = fit_background(&hist, 1).unwrap();
        assert!(fit.residual_norm < 1e-6, "{}", fit.residual_norm);
        let next = m.predict(&hist).unwrap();
        assert!(next.frobenius_distance(&hist.last().unwrap().scale(c)).unwrap() < 1e-6);
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { c } else { 0.0 };
                assert!((m.theta()[0].get(i, j) - e).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn residual_edge_cases() {
        let hist = vec![Matrix::<f32>::seeded_gaussian(4, 3, 3, 1.0); 2];
        let x = Matrix::<f32>::seeded_gaussian(4, 3, 4, 1.0);
        let zero = BackgroundModel::<f32>::zero(2, 3);
        let d = motion_residual(&x, &zero, &hist).unwrap();
        assert_eq!(d.motion, x.cast::<f64>());
        let pred = Matrix::<f32>::seeded_gaussian(4, 3, 5, 1.0);
        let same = decompose(&pred, pred.clone()).unwrap();
        assert!(same.motion.data().iter().all(|&v| v == 0.0));
        assert!(matches!(motion_residual(&x, &zero, &hist[..1]), Err(InterpError::History { .. })));
    }

    #[test]
    fn reconstruction_is_bit_exact_for_f32() {
        let mut rng = SplitMix64::new(9);
        for seed in 0..50u64 {
            let x = Matrix::<f32>::gaussian_from(&mut rng, 8, 8, 10.0);
            let b = Matrix::<f32>::seeded_gaussian(8, 8, seed, 3.0);
            let d = decompose(&x, b).unwrap();
            assert_eq!(d.reconstruct(), x.cast::<f64>());
        }
    }

    #[test]
    fn tracker_smooths() {
        let hist = vec![Matrix::<f64>::from_rows(&[&[1.0]]).unwrap(); 2];
        let model = BackgroundModel::new(vec![Matrix::from_rows(&[&[1.0]]).unwrap()], vec![0.0]).unwrap();
        let mut tr = BackgroundTracker::new(model);
        assert_eq!(tr.update(&hist).unwrap().get(0, 0), 1.0);
        let hist2 = vec![Matrix::<f64>::from_rows(&[&[3.0]]).unwrap()];
        assert!((tr.update(&hist2).unwrap().get(0, 0) - (0.7 + 0.9)).abs() < 1e-12);
    }
}
