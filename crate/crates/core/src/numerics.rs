// SPDX-License-Identifier: Apache-2.0

//! Small dense matrices, addressable random streams and a central-difference
//! gradient oracle.
//!
//! Everything is `f64`. The identity checks elsewhere in the crate run at
//! relative tolerances around 1e-9 and need the extra mantissa.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} entries cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_columns<C: AsRef<[f64]>>(cols: &[C]) -> Result<Self> {
        Ok(Self::from_rows(cols)?.transpose())
    }

    /// `v vᵀ`
    pub fn outer(v: &[f64]) -> Self {
        Self::outer_pair(v, v)
    }

    /// `u vᵀ`
    pub fn outer_pair(u: &[f64], v: &[f64]) -> Self {
        let mut m = Self::zeros(u.len(), v.len());
        for (i, &ui) in u.iter().enumerate() {
            for (j, &vj) in v.iter().enumerate() {
                m[(i, j)] = ui * vj;
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · v`
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::shape(format!(
                "cannot multiply {}x{} by vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    fn check_same_shape(&self, other: &Matrix, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "{op}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        let mut out = self.clone();
        out.axpy(1.0, other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        let mut out = self.clone();
        out.axpy(-1.0, other)?;
        Ok(out)
    }

    /// `self += a · other`
    pub fn axpy(&mut self, a: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += a * y;
        }
        Ok(())
    }

    pub fn scale(&self, a: f64) -> Matrix {
        let mut out = self.clone();
        out.scale_in_place(a);
        out
    }

    pub fn scale_in_place(&mut self, a: f64) {
        self.data.iter_mut().for_each(|x| *x *= a);
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// Frobenius inner product `Σ aᵢⱼ bᵢⱼ = Tr{AᵀB}`.
    pub fn frobenius_dot(&self, other: &Matrix) -> Result<f64> {
        self.check_same_shape(other, "frobenius_dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.is_square()
            && (0..self.rows)
                .all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol))
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

/// `(M + Mᵀ) / 2`
pub fn sym_part(m: &Matrix) -> Result<Matrix> {
    if !m.is_square() {
        return Err(Error::shape(format!(
            "sym_part needs a square matrix, got {}x{}",
            m.rows, m.cols
        )));
    }
    let n = m.rows;
    let mut out = m.clone();
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            out[(i, j)] = avg;
            out[(j, i)] = avg;
        }
    }
    Ok(out)
}

/// What a random stream is used for. Part of the stream address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Purpose {
    Dataset,
    Partition,
    Holdout,
    Init,
    ClientSampling,
    LocalTraining,
    ShareViews,
    ShareNoise,
    Eval,
    Test,
}

impl Purpose {
    fn code(self) -> u64 {
        match self {
            Purpose::Dataset => 1,
            Purpose::Partition => 2,
            Purpose::Holdout => 3,
            Purpose::Init => 4,
            Purpose::ClientSampling => 5,
            Purpose::LocalTraining => 6,
            Purpose::ShareViews => 7,
            Purpose::ShareNoise => 8,
            Purpose::Eval => 9,
            Purpose::Test => 10,
        }
    }
}

/// Address of a random stream: which round, which client, what for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamId {
    pub round: u64,
    pub client: u64,
    pub purpose: Purpose,
}

impl StreamId {
    /// Client id used for server-side streams.
    pub const SERVER: u64 = u64::MAX;

    pub fn new(round: u64, client: u64, purpose: Purpose) -> Self {
        Self {
            round,
            client,
            purpose,
        }
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A random stream keyed by `(seed, round, client, purpose)`.
///
/// The generator state is a pure function of the address, so streams can be
/// created in any order, on any thread, and always yield the same draws.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    id: StreamId,
    lane: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, id: StreamId) -> Self {
        Self::with_lane(seed, id, 0)
    }

    /// Convenience for a stream that is not tied to a round or client.
    pub fn for_purpose(seed: u64, purpose: Purpose) -> Self {
        Self::new(seed, StreamId::new(0, StreamId::SERVER, purpose))
    }

    fn with_lane(seed: u64, id: StreamId, lane: u64) -> Self {
        let mut state = seed;
        let mut key = [0u8; 32];
        let words = [id.round, id.client, id.purpose.code(), lane];
        for (chunk, w) in key.chunks_exact_mut(8).zip(words) {
            state ^= w.wrapping_mul(0xD6E8_FEB8_6659_FD93);
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        Self {
            seed,
            id,
            lane,
            rng: ChaCha8Rng::from_seed(key),
        }
    }

    /// Independent child stream, e.g. one per anchor. Children of the same
    /// parent address are reproducible regardless of the parent's position.
    pub fn fork(&self, index: u64) -> Self {
        let lane = self
            .lane
            .wrapping_mul(0x100_0000_01B3)
            .wrapping_add(index.wrapping_add(1));
        Self::with_lane(self.seed, self.id, lane)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn id(&self) -> StreamId {
        self.id
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform index in `0..n`. `n` must be positive.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Matrix of i.i.d. `N(0, sigma²)` entries.
pub fn gaussian_matrix(rows: usize, cols: usize, sigma: f64, rng: &mut RngStream) -> Result<Matrix> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    let mut m = Matrix::zeros(rows, cols);
    if sigma > 0.0 {
        for x in m.as_mut_slice() {
            *x = sigma * rng.normal();
        }
    }
    Ok(m)
}

/// Default step for [`finite_diff_grad`].
pub const FD_STEP: f64 = 1e-4;

/// Central-difference gradient `(f(θ + h eₚ) − f(θ − h eₚ)) / 2h` per coordinate.
pub fn finite_diff_grad<F>(f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for p in 0..theta.len() {
        let orig = probe[p];
        probe[p] = orig + h;
        let up = f(&probe);
        probe[p] = orig - h;
        let down = f(&probe);
        probe[p] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// `‖a − b‖₂ / max(‖b‖₂, floor)`.
pub fn relative_l2_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    diff / l2_norm(b).max(floor)
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};

    fn test_stream(seed: u64) -> RngStream {
        RngStream::for_purpose(seed, Purpose::Test)
    }

    #[test]
    fn gaussian_zero_sigma_is_zero() {
        let m = gaussian_matrix(2, 2, 0.0, &mut test_stream(1)).unwrap();
        assert_eq!(m, Matrix::zeros(2, 2));
    }

    #[test]
    fn gaussian_negative_sigma_rejected() {
        assert!(matches!(
            gaussian_matrix(1, 1, -0.5, &mut test_stream(1)),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn gaussian_same_stream_same_draw() {
        let a = gaussian_matrix(1, 1, 1.0, &mut test_stream(7)).unwrap();
        let b = gaussian_matrix(1, 1, 1.0, &mut test_stream(7)).unwrap();
        assert_eq!(a.as_slice()[0].to_bits(), b.as_slice()[0].to_bits());
    }

    #[test]
    fn gaussian_moments_at_n_1000() {
        let m = gaussian_matrix(1000, 1, 1.0, &mut test_stream(3)).unwrap();
        let n = 1000.0;
        let mean = m.as_slice().iter().sum::<f64>() / n;
        let var = m.as_slice().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.1, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.1, "std {}", var.sqrt());
    }

    #[test]
    fn streams_are_order_independent() {
        let id_a = StreamId::new(3, 1, Purpose::LocalTraining);
        let id_b = StreamId::new(3, 2, Purpose::LocalTraining);
        let mut a1 = RngStream::new(11, id_a);
        let mut b1 = RngStream::new(11, id_b);
        let first: Vec<u64> = (0..4).map(|_| a1.next_u64()).chain((0..4).map(|_| b1.next_u64())).collect();
        let mut b2 = RngStream::new(11, id_b);
        let mut a2 = RngStream::new(11, id_a);
        let bs: Vec<u64> = (0..4).map(|_| b2.next_u64()).collect();
        let as_: Vec<u64> = (0..4).map(|_| a2.next_u64()).collect();
        assert_eq!(first[..4], as_[..]);
        assert_eq!(first[4..], bs[..]);
        assert_ne!(as_, bs);
    }

    #[test]
    fn fork_ignores_parent_position() {
        let mut parent = test_stream(5);
        let before = parent.fork(9).next_u64();
        parent.next_u64();
        parent.next_u64();
        assert_eq!(parent.fork(9).next_u64(), before);
        assert_ne!(parent.fork(10).next_u64(), before);
    }

    #[test]
    fn sym_part_examples() {
        assert_eq!(sym_part(&Matrix::identity(3)).unwrap(), Matrix::identity(3));
        let m = Matrix::from_rows(&[[0.0, 2.0], [0.0, 0.0]]).unwrap();
        let expected = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        assert_eq!(sym_part(&m).unwrap(), expected);
        assert!(sym_part(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn finite_diff_quadratic() {
        let g = finite_diff_grad(|t| t[0] * t[0], &[3.0], 1e-4).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 0.5], 1e-4).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
        assert!(finite_diff_grad(|t| t[0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn matmul_and_transpose() {
        let a = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let b = a.transpose();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c, Matrix::from_rows(&[[14.0, 32.0], [32.0, 77.0]]).unwrap());
        assert!(a.matmul(&a).is_err());
        assert_eq!(a.matvec(&[1.0, 0.0, -1.0]).unwrap(), vec![-2.0, -2.0]);
    }

    proptest! {
        #[test]
        fn sym_part_is_symmetric_and_idempotent(
            n in 1usize..6,
            seed in any::<u64>(),
        ) {
            let m = gaussian_matrix(n, n, 1.0, &mut test_stream(seed)).unwrap();
            let s = sym_part(&m).unwrap();
            prop_assert!(s.is_symmetric(0.0));
            prop_assert_eq!(sym_part(&s).unwrap(), s);
        }

        #[test]
        fn gaussian_matrix_reproducible(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..5) {
            let a = gaussian_matrix(rows, cols, 0.3, &mut test_stream(seed)).unwrap();
            let b = gaussian_matrix(rows, cols, 0.3, &mut test_stream(seed)).unwrap();
            prop_assert!(a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
