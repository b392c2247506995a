//! Dense linear algebra, elementwise kernels and the seedable generator.
//!
//! Everything here works in `f64`. Hot paths in the model use the
//! unchecked `Matrix` methods (shape errors there are programming bugs and
//! panic); the free functions are the checked, contract-level entry points.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Vector = Vec<f64>;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
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
            return Err(Error::Dimension {
                op: "Matrix::from_vec",
                detail: format!("{} entries for a {rows}x{cols} matrix", data.len()),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension {
                op: "Matrix::from_rows",
                detail: "ragged rows".into(),
            });
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Matrix::from_vec(rows.len(), cols, data)
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
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vector {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension {
                op: "matmul",
                detail: format!(
                    "lhs is {}x{}, rhs is {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `out += W x`.
    #[inline]
    pub fn mul_vec_acc(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o += dot(row, x);
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vector {
        let mut out = vec![0.0; self.rows];
        self.mul_vec_acc(x, &mut out);
        out
    }

    /// `out += Wᵀ y`.
    #[inline]
    pub fn tmul_vec_acc(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (&yi, row) in y.iter().zip(self.data.chunks_exact(self.cols)) {
            if yi == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(row) {
                *o += yi * w;
            }
        }
    }

    /// `self += a bᵀ`.
    #[inline]
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (&ai, row) in a.iter().zip(self.data.chunks_exact_mut(self.cols)) {
            if ai == 0.0 {
                continue;
            }
            for (w, &bj) in row.iter_mut().zip(b) {
                *w += ai * bj;
            }
        }
    }

    /// `out += W[:, col]`.
    #[inline]
    pub fn column_acc(&self, col: usize, out: &mut [f64]) {
        debug_assert!(col < self.cols);
        for (r, o) in out.iter_mut().enumerate() {
            *o += self.data[r * self.cols + col];
        }
    }

    /// `W[:, col] += v`.
    #[inline]
    pub fn add_to_column(&mut self, col: usize, v: &[f64]) {
        debug_assert!(col < self.cols);
        for (r, &x) in v.iter().enumerate() {
            self.data[r * self.cols + col] += x;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `W x + b`, checking every shape.
pub fn affine(w: &Matrix, x: &[f64], b: &[f64]) -> Result<Vector> {
    if w.cols() != x.len() {
        return Err(Error::Dimension {
            op: "affine",
            detail: format!("W has {} columns but x has dim {}", w.cols(), x.len()),
        });
    }
    if w.rows() != b.len() {
        return Err(Error::Dimension {
            op: "affine",
            detail: format!("W has {} rows but b has dim {}", w.rows(), b.len()),
        });
    }
    let mut out = b.to_vec();
    w.mul_vec_acc(x, &mut out);
    Ok(out)
}

pub fn softmax_stable(z: &[f64]) -> Vector {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vector = z.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    out
}

/// `z_i - logsumexp(z)`; entries equal to `-inf` stay `-inf`.
pub fn log_softmax(z: &[f64]) -> Vector {
    let lse = log_sum_exp(z);
    z.iter().map(|&v| v - lse).collect()
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = z.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

pub fn l2_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// U(-a, a) with a = sqrt(6 / (rows + cols)).
    UniformScaled,
    /// Orthonormal columns from Gram-Schmidt on a Gaussian draw. Square only.
    OrthogonalRecurrent,
}

impl InitScheme {
    pub fn name(self) -> &'static str {
        match self {
            InitScheme::UniformScaled => "uniform-scaled",
            InitScheme::OrthogonalRecurrent => "orthogonal-recurrent",
        }
    }
}

pub fn init_params(rows: usize, cols: usize, scheme: InitScheme, prng: &mut Prng) -> Result<Matrix> {
    match scheme {
        InitScheme::UniformScaled => {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            let data = (0..rows * cols).map(|_| prng.uniform(-a, a)).collect();
            Matrix::from_vec(rows, cols, data)
        }
        InitScheme::OrthogonalRecurrent => {
            if rows != cols {
                return Err(Error::InvalidArgument(format!(
                    "orthogonal-recurrent initialization needs a square matrix, got {rows}x{cols}"
                )));
            }
            Ok(orthogonal(rows, prng))
        }
    }
}

fn orthogonal(n: usize, prng: &mut Prng) -> Matrix {
    // columns stored as rows of `q` while orthogonalizing
    let mut q: Vec<Vector> = Vec::with_capacity(n);
    while q.len() < n {
        let mut v: Vector = (0..n).map(|_| prng.normal()).collect();
        // two passes of modified Gram-Schmidt keep the loss of orthogonality at roundoff
        for _ in 0..2 {
            for prev in &q {
                let p = dot(&v, prev);
                for (vi, &pi) in v.iter_mut().zip(prev) {
                    *vi -= p * pi;
                }
            }
        }
        let norm = l2_norm(&v);
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        q.push(v);
    }
    let mut m = Matrix::zeros(n, n);
    for (c, col) in q.iter().enumerate() {
        for (r, &x) in col.iter().enumerate() {
            m.set(r, c, x);
        }
    }
    m
}

/// Seedable generator: ChaCha8 keyed through `SeedableRng::seed_from_u64`.
///
/// Every derived draw (uniform reals, bounded integers, normals, shuffles)
/// is computed here from raw 64-bit outputs, so sequences only depend on the
/// ChaCha8 stream and are identical across platforms.
#[derive(Debug, Clone)]
pub struct Prng {
    seed: u64,
    rng: ChaCha8Rng,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Prng {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`, unbiased (rejection sampling).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    /// Standard normal via Box-Muller (one value per call).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Index drawn proportionally to non-negative `weights`.
    pub fn weighted_index(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        assert!(total > 0.0, "weighted_index needs positive total weight");
        let target = self.next_f64() * total;
        let mut acc = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            acc += w;
            if target < acc {
                return i;
            }
        }
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }

    /// Child generator seeded from this stream.
    pub fn fork(&mut self) -> Prng {
        Prng::new(self.next_u64())
    }
}
