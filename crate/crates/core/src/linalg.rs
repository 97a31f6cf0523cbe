//! Minimal dense linear algebra for the toy backbone and low-rank adapter math.
//!
//! Everything is `f64`, row-major, and explicitly dimensioned. There is no
//! broadcasting: a dimension mismatch is a hard error, matching the fail-closed
//! posture of the rest of the system.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Contract violations raised by linear algebra operations.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum LinalgError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("zero-sized dimension in {0}")]
    EmptyDimension(&'static str),
    #[error("non-finite entry at index {0}")]
    NonFinite(usize),
}

/// Dense vector of 64-bit floats. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.is_empty() {
            return Err(LinalgError::EmptyDimension("vector"));
        }
        Ok(Self { data })
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "vector dimension must be positive");
        Self {
            data: vec![0.0; dim],
        }
    }

    pub fn from_fn(dim: usize, f: impl FnMut(usize) -> f64) -> Self {
        assert!(dim > 0, "vector dimension must be positive");
        Self {
            data: (0..dim).map(f).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }
}

/// Dense row-major matrix. Entries are validated finite at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if rows == 0 || cols == 0 {
            return Err(LinalgError::EmptyDimension("matrix"));
        }
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch {
                context: "matrix data length",
                expected: rows * cols,
                got: data.len(),
            });
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite(idx));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Frobenius norm of the matrix.
    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// Re-check the finiteness invariant after in-place mutation.
    pub(crate) fn validate_finite(&self) -> Result<(), LinalgError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(idx) => Err(LinalgError::NonFinite(idx)),
            None => Ok(()),
        }
    }
}

/// `m · x` for an `rows×cols` matrix and a `cols`-dim vector.
pub fn matvec(m: &Matrix, x: &Vector) -> Result<Vector, LinalgError> {
    if m.cols != x.dim() {
        return Err(LinalgError::DimensionMismatch {
            context: "matvec",
            expected: m.cols,
            got: x.dim(),
        });
    }
    let xs = x.as_slice();
    let data = (0..m.rows)
        .map(|i| m.row(i).iter().zip(xs).map(|(a, b)| a * b).sum())
        .collect();
    Vector::new(data)
}

/// `mᵀ · x` for an `rows×cols` matrix and a `rows`-dim vector.
pub fn matvec_transposed(m: &Matrix, x: &Vector) -> Result<Vector, LinalgError> {
    if m.rows != x.dim() {
        return Err(LinalgError::DimensionMismatch {
            context: "matvec_transposed",
            expected: m.rows,
            got: x.dim(),
        });
    }
    let mut out = vec![0.0; m.cols];
    for (i, &xi) in x.as_slice().iter().enumerate() {
        for (j, o) in out.iter_mut().enumerate() {
            *o += m.get(i, j) * xi;
        }
    }
    Vector::new(out)
}

/// `scale · a·(b·x)` without ever materializing the `d_out×d_in` product.
pub fn lowrank_delta(
    a: &Matrix,
    b: &Matrix,
    x: &Vector,
    scale: f64,
) -> Result<Vector, LinalgError> {
    if a.cols != b.rows {
        return Err(LinalgError::DimensionMismatch {
            context: "lowrank_delta rank",
            expected: a.cols,
            got: b.rows,
        });
    }
    let inner = matvec(b, x)?;
    let outer = matvec(a, &inner)?;
    vec_scale(&outer, scale)
}

/// Dense `a · b` product, used for merged-weight oracles and importance scores.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    if a.cols != b.rows {
        return Err(LinalgError::DimensionMismatch {
            context: "matmul",
            expected: a.cols,
            got: b.rows,
        });
    }
    let mut data = vec![0.0; a.rows * b.cols];
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.get(i, k);
            for j in 0..b.cols {
                data[i * b.cols + j] += aik * b.get(k, j);
            }
        }
    }
    Matrix::new(a.rows, b.cols, data)
}

/// Elementwise sum of two equal-dimension vectors.
pub fn vec_add(x: &Vector, y: &Vector) -> Result<Vector, LinalgError> {
    if x.dim() != y.dim() {
        return Err(LinalgError::DimensionMismatch {
            context: "vec_add",
            expected: x.dim(),
            got: y.dim(),
        });
    }
    Vector::new(
        x.as_slice()
            .iter()
            .zip(y.as_slice())
            .map(|(a, b)| a + b)
            .collect(),
    )
}

/// Elementwise scaling of a vector.
pub fn vec_scale(x: &Vector, scale: f64) -> Result<Vector, LinalgError> {
    Vector::new(x.as_slice().iter().map(|a| a * scale).collect())
}

/// Elementwise scaled matrix sum `a + scale·b`, both same shape.
pub fn mat_add_scaled(a: &Matrix, b: &Matrix, scale: f64) -> Result<Matrix, LinalgError> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(LinalgError::DimensionMismatch {
            context: "mat_add_scaled",
            expected: a.rows * a.cols,
            got: b.rows * b.cols,
        });
    }
    Matrix::new(
        a.rows,
        a.cols,
        a.data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| x + scale * y)
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// Index-based matvec, kept independent of the iterator implementation.
    #[allow(clippy::needless_range_loop)]
    fn naive_matvec(m: &Matrix, x: &Vector) -> Vec<f64> {
        let mut out = vec![0.0; m.rows()];
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                out[i] += m.get(i, j) * x.as_slice()[j];
            }
        }
        out
    }

    fn rand_matrix(rng: &mut StdRng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn rand_vector(rng: &mut StdRng, dim: usize) -> Vector {
        Vector::from_fn(dim, |_| rng.gen_range(-1.0..1.0))
    }

    fn rel_err(got: &[f64], want: &[f64]) -> f64 {
        let denom = want.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        let num = got
            .iter()
            .zip(want)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        num / denom
    }

    #[test]
    fn matvec_identity() {
        let m = Matrix::identity(3);
        let x = Vector::new(vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(matvec(&m, &x).unwrap().as_slice(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn matvec_zeros() {
        let m = Matrix::zeros(2, 3);
        let x = Vector::new(vec![5.0, 5.0, 5.0]).unwrap();
        assert_eq!(matvec(&m, &x).unwrap().as_slice(), &[0.0, 0.0]);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn matvec_matches_naive_oracle() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..32 {
            let m = rand_matrix(&mut rng, 4, 4);
            let x = rand_vector(&mut rng, 4);
            let got = matvec(&m, &x).unwrap();
            let want = naive_matvec(&m, &x);
            for (g, w) in got.as_slice().iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "got {g}, want {w}");
            }
        }
    }

    #[test]
    fn matvec_dimension_mismatch() {
        let m = Matrix::zeros(2, 3);
        let x = Vector::new(vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            matvec(&m, &x),
            Err(LinalgError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn matvec_transposed_matches_explicit_transpose() {
        let mut rng = StdRng::seed_from_u64(11);
        let m = rand_matrix(&mut rng, 3, 5);
        let x = rand_vector(&mut rng, 3);
        let t = Matrix::from_fn(5, 3, |i, j| m.get(j, i));
        let got = matvec_transposed(&m, &x).unwrap();
        let want = matvec(&t, &x).unwrap();
        assert!(rel_err(got.as_slice(), want.as_slice()) < 1e-12);
    }

    #[test]
    fn lowrank_delta_zero_a() {
        let a = Matrix::zeros(3, 2);
        let b = Matrix::from_fn(2, 4, |i, j| (i + j) as f64);
        let x = Vector::from_fn(4, |i| i as f64 + 1.0);
        let d = lowrank_delta(&a, &b, &x, 2.0).unwrap();
        assert!(d.is_zero());
    }

    #[test]
    fn lowrank_delta_identity_b() {
        let mut rng = StdRng::seed_from_u64(3);
        let a = rand_matrix(&mut rng, 3, 4);
        let b = Matrix::identity(4);
        let x = rand_vector(&mut rng, 4);
        let d = lowrank_delta(&a, &b, &x, 1.0).unwrap();
        let want = matvec(&a, &x).unwrap();
        assert_eq!(d.as_slice(), want.as_slice());
    }

    #[test]
    fn lowrank_delta_matches_dense_oracle() {
        let mut rng = StdRng::seed_from_u64(19);
        for _ in 0..32 {
            let a = rand_matrix(&mut rng, 5, 2);
            let b = rand_matrix(&mut rng, 2, 6);
            let x = rand_vector(&mut rng, 6);
            let scale = rng.gen_range(0.1..4.0);
            let got = lowrank_delta(&a, &b, &x, scale).unwrap();
            let dense = matmul(&a, &b).unwrap();
            let want: Vec<f64> = naive_matvec(&dense, &x).iter().map(|v| v * scale).collect();
            assert!(rel_err(got.as_slice(), &want) < 1e-10);
        }
    }

    #[test]
    fn vec_add_and_scale_basics() {
        let x = Vector::new(vec![1.0, 2.0]).unwrap();
        let y = Vector::new(vec![0.0, 0.0]).unwrap();
        assert_eq!(vec_add(&x, &y).unwrap().as_slice(), &[1.0, 2.0]);
        let z = Vector::new(vec![2.0, 4.0]).unwrap();
        assert_eq!(vec_scale(&z, 0.5).unwrap().as_slice(), &[1.0, 2.0]);
        let short = Vector::new(vec![1.0]).unwrap();
        assert!(vec_add(&x, &short).is_err());
    }

    #[test]
    fn vec_add_commutes_bitwise() {
        let mut rng = StdRng::seed_from_u64(23);
        for _ in 0..32 {
            let x = rand_vector(&mut rng, 8);
            let y = rand_vector(&mut rng, 8);
            let xy = vec_add(&x, &y).unwrap();
            let yx = vec_add(&y, &x).unwrap();
            assert_eq!(xy.as_slice(), yx.as_slice());
        }
    }

    #[test]
    fn non_finite_matrix_rejected() {
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(LinalgError::NonFinite(1))
        ));
    }

    proptest! {
        #[test]
        fn lowrank_delta_equals_merged_dense(
            seed in any::<u64>(),
            d_out in 1usize..6,
            rank in 1usize..4,
            d_in in 1usize..6,
        ) {
            let mut rng = StdRng::seed_from_u64(seed);
            let a = rand_matrix(&mut rng, d_out, rank);
            let b = rand_matrix(&mut rng, rank, d_in);
            let x = rand_vector(&mut rng, d_in);
            let scale = rng.gen_range(0.05..8.0);
            let split = lowrank_delta(&a, &b, &x, scale).unwrap();
            let dense = matmul(&a, &b).unwrap();
            let scaled = Matrix::from_fn(d_out, d_in, |i, j| dense.get(i, j) * scale);
            let merged = matvec(&scaled, &x).unwrap();
            prop_assert!(rel_err(split.as_slice(), merged.as_slice()) < 1e-10);
        }

        #[test]
        fn matvec_is_linear(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let mut rng = StdRng::seed_from_u64(seed);
            let m = rand_matrix(&mut rng, 4, 4);
            let x = rand_vector(&mut rng, 4);
            let y = rand_vector(&mut rng, 4);
            let combo = vec_add(&vec_scale(&x, alpha).unwrap(), &vec_scale(&y, beta).unwrap()).unwrap();
            let lhs = matvec(&m, &combo).unwrap();
            let rhs = vec_add(
                &vec_scale(&matvec(&m, &x).unwrap(), alpha).unwrap(),
                &vec_scale(&matvec(&m, &y).unwrap(), beta).unwrap(),
            ).unwrap();
            prop_assert!(rel_err(lhs.as_slice(), rhs.as_slice()) < 1e-10);
        }
    }
}
