//! Dense row-major `f64` vectors and matrices plus the seeded sampler used
//! for weight initialization.
//!
//! Everything here is deliberately small: the networks in this crate are at
//! most a few thousand units wide, so plain loops over contiguous storage are
//! all that is needed.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense column vector.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    pub fn filled(len: usize, value: f64) -> Self {
        Vector(vec![value; len])
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Vector(data)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn norm_l2(&self) -> f64 {
        norm_l2(&self.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn add(&self, other: &Vector) -> Result<Vector> {
        check_len(self.len(), other.len(), "vector add")?;
        Ok(Vector(
            self.iter().zip(other.iter()).map(|(a, b)| a + b).collect(),
        ))
    }

    pub fn scale(&self, factor: f64) -> Vector {
        Vector(self.iter().map(|v| v * factor).collect())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Vector {
        Vector(self.iter().map(|&v| f(v)).collect())
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Vector(data)
    }
}

/// A dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::rejected(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::rejected("ragged rows"));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Matrix::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vector {
        (0..self.rows).map(|r| self.get(r, c)).collect::<Vec<_>>().into()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        check_len(self.cols, other.rows, "matmul inner dimension")?;
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (o, b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vector> {
        check_len(self.cols, v.len(), "matvec")?;
        let mut out = vec![0.0; self.rows];
        self.matvec_into(v, &mut out);
        Ok(out.into())
    }

    /// `selfᵀ · v`.
    pub fn matvec_transposed(&self, v: &[f64]) -> Result<Vector> {
        check_len(self.rows, v.len(), "transposed matvec")?;
        let mut out = vec![0.0; self.cols];
        self.matvec_transposed_acc(v, &mut out);
        Ok(out.into())
    }

    pub(crate) fn matvec_into(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols.max(1))) {
            *o = dot(row, v);
        }
    }

    /// `out += selfᵀ · v`.
    pub(crate) fn matvec_transposed_acc(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (row, &s) in self.data.chunks_exact(self.cols.max(1)).zip(v) {
            if s == 0.0 {
                continue;
            }
            for (o, m) in out.iter_mut().zip(row) {
                *o += s * m;
            }
        }
    }

    /// `self += a · bᵀ`.
    pub(crate) fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (row, &s) in self.data.chunks_exact_mut(self.cols.max(1)).zip(a) {
            if s == 0.0 {
                continue;
            }
            for (m, x) in row.iter_mut().zip(b) {
                *m += s * x;
            }
        }
    }

    /// `self[:, c] += a`, i.e. the outer product with a one-hot vector.
    pub(crate) fn add_to_column(&mut self, c: usize, a: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        for (r, v) in a.iter().enumerate() {
            self.data[r * self.cols + c] += v;
        }
    }

    pub(crate) fn column_into(&self, c: usize, out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o = self.data[r * self.cols + c];
        }
    }
}

/// Matrix-vector product with dimension checking.
pub fn matvec(m: &Matrix, v: &Vector) -> Result<Vector> {
    m.matvec(v)
}

/// Elementwise product of two equal-length vectors.
pub fn hadamard(a: &[f64], b: &[f64]) -> Result<Vector> {
    check_len(a.len(), b.len(), "hadamard")?;
    Ok(a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<_>>().into())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_len(expected: usize, got: usize, what: &str) -> Result<()> {
    if expected != got {
        return Err(Error::rejected(format!(
            "{what}: dimension mismatch ({expected} vs {got})"
        )));
    }
    Ok(())
}

/// SplitMix64 (Steele, Lea & Flood 2014). One 64-bit word of state, so the
/// generator position is trivially checkpointed and identical on every
/// platform.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let v = lo + (hi - lo) * self.next_f64();
        // rounding can land exactly on `hi` for some (lo, hi)
        if v >= hi {
            lo
        } else {
            v
        }
    }

    /// Uniform integer in `[0, n)`; `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Lemire's multiply-shift; the bias is < n / 2^64.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Derives an independent stream, e.g. one per sweep job.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplingScheme {
    UniformRange { lo: f64, hi: f64 },
}

impl SamplingScheme {
    pub fn symmetric(r: f64) -> Self {
        SamplingScheme::UniformRange { lo: -r, hi: r }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            SamplingScheme::UniformRange { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
                    return Err(Error::config(format!(
                        "uniform range requires lo < hi, got [{lo}, {hi})"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RngConfig {
    pub seed: u64,
    pub scheme: SamplingScheme,
}

impl RngConfig {
    pub fn uniform(seed: u64, lo: f64, hi: f64) -> Self {
        RngConfig {
            seed,
            scheme: SamplingScheme::UniformRange { lo, hi },
        }
    }
}

/// Samples a `rows × cols` matrix from a fresh generator seeded by `rng.seed`.
pub fn sample_matrix(rng: &RngConfig, rows: usize, cols: usize) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::rejected("sample_matrix needs rows, cols >= 1"));
    }
    let mut gen = Rng::new(rng.seed);
    fill_matrix(&mut gen, rng.scheme, rows, cols)
}

/// Samples from an existing generator, advancing it.
pub fn fill_matrix(
    gen: &mut Rng,
    scheme: SamplingScheme,
    rows: usize,
    cols: usize,
) -> Result<Matrix> {
    scheme.validate()?;
    let SamplingScheme::UniformRange { lo, hi } = scheme;
    let data = (0..rows * cols).map(|_| gen.uniform(lo, hi)).collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn fill_vector(gen: &mut Rng, scheme: SamplingScheme, len: usize) -> Result<Vector> {
    scheme.validate()?;
    let SamplingScheme::UniformRange { lo, hi } = scheme;
    Ok((0..len).map(|_| gen.uniform(lo, hi)).collect::<Vec<_>>().into())
}
