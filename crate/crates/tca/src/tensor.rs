//! Dense numeric substrate: row-major `f64` matrices, numerically stable
//! softmax with optional causal masking, L1 row distance, and seeded
//! tensor generation.
//!
//! Everything here is pure and deterministic. Summation order is fixed
//! (left-to-right over the contraction axis) so results are reproducible
//! bit-for-bit on one platform.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Result, TcaError};

/// Dense row-major matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2D {
    /// Builds a tensor, validating the element count and that every entry
    /// is finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(TcaError::invalid(
                "shape",
                format!("dimensions must be positive, got {rows}x{cols}"),
            ));
        }
        if data.len() != rows * cols {
            return Err(TcaError::invalid(
                "data",
                format!(
                    "expected {} elements for a {rows}x{cols} tensor, got {}",
                    rows * cols,
                    data.len()
                ),
            ));
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(TcaError::NonFinite { op: "Tensor2D::new" });
        }
        Ok(Tensor2D { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Tensor2D::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        debug_assert!(row < self.rows && col < self.cols);
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[f64] {
        debug_assert!(row < self.rows);
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn transpose(&self) -> Tensor2D {
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Tensor2D {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    /// Elementwise scaling by a finite factor.
    pub fn scale(&self, factor: f64) -> Result<Tensor2D> {
        let data = self.data.iter().map(|x| x * factor).collect();
        Tensor2D::new(self.rows, self.cols, data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, x| acc.max(x.abs()))
    }
}

/// Seed for deterministic tensor generation. Identical seeds yield
/// bit-identical tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Seed(pub u64);

/// Entry distribution for [`random_tensor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distribution {
    /// Uniform on (-1, 1).
    Uniform,
    /// Standard normal, generated by Box-Muller so the stream depends only
    /// on the ChaCha8 output and stays stable across dependency upgrades.
    Gaussian,
}

pub(crate) fn rng_for(seed: Seed) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.0)
}

/// Uniform draw in [0, 1) with 53 bits of precision.
#[inline]
pub(crate) fn next_unit(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// One standard-normal draw (Box-Muller, cosine branch).
#[inline]
pub(crate) fn next_gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = 1.0 - next_unit(rng); // (0, 1], keeps ln finite
    let u2 = next_unit(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub(crate) fn fill_random(rng: &mut ChaCha8Rng, n: usize, dist: Distribution) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let x = match dist {
            Distribution::Uniform => 2.0 * next_unit(rng) - 1.0,
            Distribution::Gaussian => next_gaussian(rng),
        };
        out.push(x);
    }
    out
}

/// Deterministic seeded tensor with entries drawn from `dist`.
pub fn random_tensor(rows: usize, cols: usize, seed: Seed, dist: Distribution) -> Result<Tensor2D> {
    let mut rng = rng_for(seed);
    Tensor2D::new(rows, cols, fill_random(&mut rng, rows * cols, dist))
}

/// Standard matrix product with a fixed left-to-right summation order.
pub fn matmul(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.cols != b.rows {
        return Err(TcaError::ShapeMismatch {
            op: "matmul",
            left_rows: a.rows,
            left_cols: a.cols,
            right_rows: b.rows,
            right_cols: b.cols,
        });
    }
    let mut data = vec![0.0; a.rows * b.cols];
    for i in 0..a.rows {
        let a_row = a.row(i);
        for j in 0..b.cols {
            let mut acc = 0.0;
            for (k, &aik) in a_row.iter().enumerate() {
                acc += aik * b.data[k * b.cols + j];
            }
            data[i * b.cols + j] = acc;
        }
    }
    Tensor2D::new(a.rows, b.cols, data)
}

/// Row-wise stable softmax. With `causal` set, row `i` only sees columns
/// `0..=i`; masked entries come out exactly 0 and never enter the max or
/// the sum, so no infinities appear in the arithmetic.
pub fn softmax_rows(a: &Tensor2D, causal: bool) -> Result<Tensor2D> {
    if causal && a.rows > a.cols {
        return Err(TcaError::ShapeMismatch {
            op: "softmax_rows(causal)",
            left_rows: a.rows,
            left_cols: a.cols,
            right_rows: a.cols,
            right_cols: a.cols,
        });
    }
    let mut data = vec![0.0; a.data.len()];
    for i in 0..a.rows {
        let visible = if causal { i + 1 } else { a.cols };
        let row = a.row(i);
        softmax_into(&row[..visible], &mut data[i * a.cols..i * a.cols + visible])?;
    }
    Tensor2D::new(a.rows, a.cols, data)
}

/// Stable softmax of `src` written into `dst`. Shared kernel for the
/// matrix path and the per-query paths in the attention modules.
pub(crate) fn softmax_into(src: &[f64], dst: &mut [f64]) -> Result<()> {
    if src.is_empty() {
        return Err(TcaError::contract("softmax over an empty (all-masked) row"));
    }
    let max = src.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut sum = 0.0;
    for (d, &x) in dst.iter_mut().zip(src) {
        let e = (x - max).exp();
        *d = e;
        sum += e;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
    Ok(())
}

/// L1 distance between the `row`-th rows of two equally shaped tensors.
pub fn l1_row_distance(a: &Tensor2D, b: &Tensor2D, row: usize) -> Result<f64> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(TcaError::ShapeMismatch {
            op: "l1_row_distance",
            left_rows: a.rows,
            left_cols: a.cols,
            right_rows: b.rows,
            right_cols: b.cols,
        });
    }
    if row >= a.rows {
        return Err(TcaError::invalid(
            "row",
            format!("row {row} out of range for {} rows", a.rows),
        ));
    }
    Ok(l1_distance(a.row(row), b.row(row)))
}

#[inline]
pub(crate) fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tensor(rows: usize, cols: usize, data: &[f64]) -> Tensor2D {
        Tensor2D::new(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i2 = tensor(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(matmul(&i2, &i2).unwrap(), i2);
    }

    #[test]
    fn matmul_hand_checkable() {
        let a = tensor(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = tensor(2, 1, &[1.0, 1.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let a = random_tensor(8, 4, Seed(17), Distribution::Gaussian).unwrap();
        let b = random_tensor(4, 8, Seed(18), Distribution::Gaussian).unwrap();
        let c = matmul(&a, &b).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let mut want = 0.0;
                for k in 0..4 {
                    want += a.get(i, k) * b.get(k, j);
                }
                assert!((c.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error() {
        let a = tensor(2, 3, &[0.0; 6]);
        let b = tensor(2, 2, &[0.0; 4]);
        assert!(matches!(
            matmul(&a, &b),
            Err(TcaError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn softmax_flat_row() {
        let a = tensor(1, 3, &[0.0, 0.0, 0.0]);
        let s = softmax_rows(&a, false).unwrap();
        for j in 0..3 {
            assert!((s.get(0, j) - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_causal_first_row_single_entry() {
        let a = tensor(1, 3, &[2.5, 100.0, -7.0]);
        let s = softmax_rows(&a, true).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let a = tensor(1, 3, &[1.0, 2.0, 3.0]);
        let s = softmax_rows(&a, false).unwrap();
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        for j in 0..3 {
            assert!((s.get(0, j) - ((j + 1) as f64).exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_causal_zeroes_future() {
        let a = random_tensor(6, 6, Seed(3), Distribution::Uniform).unwrap();
        let s = softmax_rows(&a, true).unwrap();
        for i in 0..6 {
            for j in (i + 1)..6 {
                assert_eq!(s.get(i, j), 0.0);
            }
        }
    }

    #[test]
    fn l1_row_distance_cases() {
        let a = tensor(2, 2, &[1.0, 0.0, 0.5, 0.5]);
        let b = tensor(2, 2, &[0.0, 1.0, 0.5, 0.5]);
        assert_eq!(l1_row_distance(&a, &b, 0).unwrap(), 2.0);
        assert_eq!(l1_row_distance(&a, &b, 1).unwrap(), 0.0);
        let c = random_tensor(2, 2, Seed(9), Distribution::Gaussian).unwrap();
        let want: f64 = (0..2).map(|j| (a.get(1, j) - c.get(1, j)).abs()).sum();
        assert!((l1_row_distance(&a, &c, 1).unwrap() - want).abs() < 1e-15);

        let wide = tensor(2, 3, &[0.0; 6]);
        assert!(matches!(
            l1_row_distance(&a, &wide, 0),
            Err(TcaError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn random_tensor_deterministic_and_seed_sensitive() {
        let a = random_tensor(1, 1, Seed(0), Distribution::Gaussian).unwrap();
        let b = random_tensor(1, 1, Seed(0), Distribution::Gaussian).unwrap();
        assert_eq!(a.data(), b.data());
        let c = random_tensor(4, 4, Seed(1), Distribution::Uniform).unwrap();
        let d = random_tensor(4, 4, Seed(2), Distribution::Uniform).unwrap();
        assert_ne!(c.data(), d.data());
    }

    #[test]
    fn gaussian_moments() {
        let t = random_tensor(100, 100, Seed(42), Distribution::Gaussian).unwrap();
        let n = t.data().len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "var {var}");
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(
            rows in 1usize..6,
            cols in 1usize..8,
            seed in 0u64..1000,
            causal in proptest::bool::ANY,
        ) {
            prop_assume!(!causal || rows <= cols);
            let a = random_tensor(rows, cols, Seed(seed), Distribution::Uniform).unwrap();
            let s = softmax_rows(&a, causal).unwrap();
            for i in 0..rows {
                let sum: f64 = s.row(i).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn softmax_shift_invariant(seed in 0u64..500, shift in -100.0f64..100.0) {
            let a = random_tensor(3, 5, Seed(seed), Distribution::Gaussian).unwrap();
            let shifted = Tensor2D::new(3, 5, a.data().iter().map(|x| x + shift).collect()).unwrap();
            let s1 = softmax_rows(&a, false).unwrap();
            let s2 = softmax_rows(&shifted, false).unwrap();
            for (x, y) in s1.data().iter().zip(s2.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn matmul_associative(seed in 0u64..200) {
            let a = random_tensor(3, 4, Seed(seed), Distribution::Gaussian).unwrap();
            let b = random_tensor(4, 2, Seed(seed + 1), Distribution::Gaussian).unwrap();
            let c = random_tensor(2, 3, Seed(seed + 2), Distribution::Gaussian).unwrap();
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                let scale = x.abs().max(y.abs()).max(1.0);
                prop_assert!((x - y).abs() / scale < 1e-6);
            }
        }
    }
}
