//! Dense row-major matrices and the handful of kernels everything else is
//! written in.
//!
//! All reductions run in a fixed left-to-right order, so results are
//! bit-reproducible for fixed inputs. Norms accumulate in `f64` whatever the
//! payload type.

use thiserror::Error;

use crate::rng::SplitMix64;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("data length {len} does not match {rows}x{cols}")]
    Length { rows: usize, cols: usize, len: usize },
    #[error("row index {index} out of range for {rows} rows")]
    Index { index: usize, rows: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    /// Build from row-major data. Rejects wrong lengths and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TensorError::Length { rows, cols, len: data.len() });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { row: pos / cols.max(1), col: pos % cols.max(1) });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Convenience constructor from `f64` literals, mainly for tests.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for r in rows {
            if r.len() != n_cols {
                return Err(TensorError::Shape { op: "from_rows", lhs: (n_rows, n_cols), rhs: (1, r.len()) });
            }
            data.extend(r.iter().map(|&v| T::from_f64_lossy(v)));
        }
        Self::new(n_rows, n_cols, data)
    }

    /// I.i.d. standard normal entries from SplitMix64 + Box–Muller, scaled by `std`.
    ///
    /// Entries are drawn in row-major order, in `f64`, then rounded to `T`.
    pub fn seeded_gaussian(rows: usize, cols: usize, seed: u64, std: f64) -> Self {
        let mut rng = SplitMix64::new(seed);
        Self::gaussian_from(&mut rng, rows, cols, std)
    }

    pub fn gaussian_from(rng: &mut SplitMix64, rows: usize, cols: usize, std: f64) -> Self {
        let data = (0..rows * cols).map(|_| T::from_f64_lossy(std * rng.next_gaussian())).collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossless())).collect(),
        }
    }

    fn check_same(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(TensorError::Shape { op, lhs: self.shape(), rhs: other.shape() });
        }
        Ok(())
    }

    /// `self · other`. Each output entry sums over the inner index in
    /// ascending order, starting from zero.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(TensorError::Shape { op: "matmul", lhs: self.shape(), rhs: other.shape() });
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![T::zero(); n * m];
        if m == 0 {
            return Ok(Self { rows: n, cols: m, data: out });
        }
        // Four output rows per pass share each loaded row of `other`; the
        // per-entry accumulation order is unchanged.
        let mut blocks = out.chunks_exact_mut(4 * m);
        let mut i = 0;
        for block in &mut blocks {
            let (c0, rest) = block.split_at_mut(m);
            let (c1, rest) = rest.split_at_mut(m);
            let (c2, c3) = rest.split_at_mut(m);
            let a = &self.data[i * k..(i + 4) * k];
            for p in 0..k {
                let b_row = &other.data[p * m..(p + 1) * m];
                let (a0, a1, a2, a3) = (a[p], a[k + p], a[2 * k + p], a[3 * k + p]);
                for j in 0..m {
                    let b = b_row[j];
                    c0[j] += a0 * b;
                    c1[j] += a1 * b;
                    c2[j] += a2 * b;
                    c3[j] += a3 * b;
                }
            }
            i += 4;
        }
        for c_row in blocks.into_remainder().chunks_exact_mut(m) {
            let a_row = &self.data[i * k..(i + 1) * k];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * m..(p + 1) * m];
                for (c, &b) in c_row.iter_mut().zip(b_row) {
                    *c += a * b;
                }
            }
            i += 1;
        }
        Ok(Self { rows: n, cols: m, data: out })
    }

    /// `self · otherᵀ`, with the same per-entry summation order as `matmul`.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(TensorError::Shape { op: "matmul_t", lhs: self.shape(), rhs: other.shape() });
        }
        self.matmul(&other.transpose())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                out.push(self.data[i * self.cols + j]);
            }
        }
        Self { rows: self.cols, cols: self.rows, data: out }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same(other, "add")?;
        Ok(self.zip_with(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same(other, "sub")?;
        Ok(self.zip_with(other, |a, b| a - b))
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// Adds `bias` to every row.
    pub fn add_row_broadcast(&mut self, bias: &[T]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(TensorError::Shape { op: "add_row_broadcast", lhs: self.shape(), rhs: (1, bias.len()) });
        }
        for row in self.data.chunks_exact_mut(self.cols.max(1)) {
            for (v, &b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Rows `indices[0], indices[1], ...` stacked in that order.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(TensorError::Index { index: i, rows: self.rows });
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self { rows: indices.len(), cols: self.cols, data })
    }

    /// Writes row `k` of `src` into row `indices[k]` of `self`.
    pub fn scatter_rows(&mut self, indices: &[usize], src: &Self) -> Result<()> {
        if src.rows != indices.len() || src.cols != self.cols {
            return Err(TensorError::Shape { op: "scatter_rows", lhs: (indices.len(), self.cols), rhs: src.shape() });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.rows) {
            return Err(TensorError::Index { index: bad, rows: self.rows });
        }
        for (k, &i) in indices.iter().enumerate() {
            self.row_mut(i).copy_from_slice(src.row(k));
        }
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.sq_sum().sqrt()
    }

    pub fn sq_sum(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| {
            let x = v.to_f64_lossless();
            acc + x * x
        })
    }

    pub fn row_sq_norms(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|i| {
                self.row(i).iter().fold(0.0, |acc, v| {
                    let x = v.to_f64_lossless();
                    acc + x * x
                })
            })
            .collect()
    }

    /// `‖self − other‖_F` in `f64` without materializing the difference.
    pub fn frobenius_distance(&self, other: &Self) -> Result<f64> {
        self.check_same(other, "frobenius_distance")?;
        let s = self.data.iter().zip(&other.data).fold(0.0, |acc, (a, b)| {
            let d = a.to_f64_lossless() - b.to_f64_lossless();
            acc + d * d
        });
        Ok(s.sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    type M = Matrix<f64>;

    fn naive_matmul(a: &M, b: &M) -> Vec<f64> {
        let mut out = vec![0.0; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for p in 0..a.cols() {
                    s += a.get(i, p) * b.get(p, j);
                }
                out[i * b.cols() + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_small_cases() {
        let a = M::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(M::identity(2).matmul(&a).unwrap(), a);
        assert_eq!(a.matmul(&M::identity(2)).unwrap(), a);
        let r = M::from_rows(&[&[1.0, 2.0]]).unwrap().matmul(&M::from_rows(&[&[3.0], &[4.0]]).unwrap()).unwrap();
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = M::seeded_gaussian(7, 5, 1, 1.0);
        let b = M::seeded_gaussian(5, 3, 2, 1.0);
        let got = a.matmul(&b).unwrap();
        for (g, e) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((g - e).abs() <= 1e-12);
        }
        let bt = b.transpose();
        let via_t = a.matmul_t(&bt).unwrap();
        for (g, e) in via_t.data().iter().zip(got.data()) {
            assert!((g - e).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error() {
        let a = M::zeros(2, 3);
        assert!(matches!(a.matmul(&M::zeros(2, 3)), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn norms() {
        assert_eq!(M::zeros(3, 3).frobenius_norm(), 0.0);
        assert_eq!(M::from_rows(&[&[3.0, 4.0]]).unwrap().frobenius_norm(), 5.0);
        let r = M::seeded_gaussian(8, 8, 9, 1.0);
        let oracle: f64 = r.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((r.frobenius_norm() - oracle).abs() <= 1e-12);

        assert_eq!(M::zeros(2, 2).row_sq_norms(), vec![0.0, 0.0]);
        assert_eq!(M::from_rows(&[&[1.0, 1.0], &[2.0, 3.0]]).unwrap().row_sq_norms(), vec![2.0, 13.0]);
        let r = M::seeded_gaussian(16, 4, 10, 1.0);
        for (i, n) in r.row_sq_norms().into_iter().enumerate() {
            let mut s = 0.0;
            for j in 0..4 {
                s += r.get(i, j) * r.get(i, j);
            }
            assert!((n - s).abs() <= 1e-12);
        }
    }

    #[test]
    fn elementwise_ops_match_loops() {
        let a = M::seeded_gaussian(4, 3, 11, 1.0);
        let b = M::seeded_gaussian(4, 3, 12, 1.0);
        let s = a.add(&b).unwrap();
        let d = a.sub(&b).unwrap();
        let k = a.scale(2.5);
        for i in 0..12 {
            assert_eq!(s.data()[i], a.data()[i] + b.data()[i]);
            assert_eq!(d.data()[i], a.data()[i] - b.data()[i]);
            assert_eq!(k.data()[i], a.data()[i] * 2.5);
        }
        let t = a.transpose();
        for i in 0..4 {
            for j in 0..3 {
                assert_eq!(t.get(j, i), a.get(i, j));
            }
        }
        assert!(a.add(&M::zeros(3, 4)).is_err());
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(matches!(M::new(2, 2, vec![0.0; 3]), Err(TensorError::Length { .. })));
        assert!(matches!(M::new(1, 2, vec![0.0, f64::NAN]), Err(TensorError::NonFinite { row: 0, col: 1 })));
    }

    #[test]
    fn seeded_gaussian_is_bit_reproducible() {
        let a = Matrix::<f32>::seeded_gaussian(5, 6, 42, 1.0);
        let b = Matrix::<f32>::seeded_gaussian(5, 6, 42, 1.0);
        assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_ne!(a, Matrix::<f32>::seeded_gaussian(5, 6, 43, 1.0));
    }

    proptest! {
        #[test]
        fn gather_scatter_identity(rows in 1usize..12, cols in 1usize..6, seed: u64, mask: u16) {
            let x = M::seeded_gaussian(rows, cols, seed, 1.0);
            let idx: Vec<usize> = (0..rows).filter(|i| mask & (1 << i) != 0).collect();
            let g = x.gather_rows(&idx).unwrap();
            let mut y = M::zeros(rows, cols);
            y.scatter_rows(&idx, &g).unwrap();
            for &i in &idx {
                prop_assert_eq!(y.row(i), x.row(i));
            }
        }
    }
}
