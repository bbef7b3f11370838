//! Dense tensors for the adapter math.
//!
//! [`Tensor3`] is a `(depth, tokens, channels)` stack of token grids: one
//! `N x C` frame per depth slice, stored channel-fastest so a frame is one
//! contiguous block. [`Mat`] is a row-major matrix used for weights.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Range of the seeded uniform initializer used for test weights and
/// inputs.
pub const INIT_RANGE: f64 = 0.1;

fn seeded_values(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-INIT_RANGE..INIT_RANGE)).collect()
}

/// Dense `(D, N, C)` tensor: depth frames of `N` tokens with `C` channels.
/// Element `(d, n, c)` lives at `(d * N + n) * C + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    d: usize,
    n: usize,
    c: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn new(d: usize, n: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if d == 0 || n == 0 || c == 0 {
            return Err(Error::validation(format!(
                "tensor dims must be positive, got ({d}, {n}, {c})"
            )));
        }
        if data.len() != d * n * c {
            return Err(Error::validation(format!(
                "tensor buffer has {} entries for shape ({d}, {n}, {c})",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::validation(
                "tensors must hold finite values only".to_string(),
            ));
        }
        Ok(Self { d, n, c, data })
    }

    pub fn zeros(d: usize, n: usize, c: usize) -> Result<Self> {
        Self::new(d, n, c, vec![0.0; d * n * c])
    }

    /// Seeded uniform values in the initializer range.
    pub fn seeded(d: usize, n: usize, c: usize, seed: u64) -> Result<Self> {
        Self::new(d, n, c, seeded_values(d * n * c, seed))
    }

    pub fn depth(&self) -> usize {
        self.d
    }

    pub fn tokens(&self) -> usize {
        self.n
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.d, self.n, self.c)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, d: usize, n: usize, c: usize) -> usize {
        debug_assert!(d < self.d && n < self.n && c < self.c);
        (d * self.n + n) * self.c + c
    }

    #[inline]
    pub fn at(&self, d: usize, n: usize, c: usize) -> f64 {
        self.data[self.index(d, n, c)]
    }

    #[inline]
    pub fn at_mut(&mut self, d: usize, n: usize, c: usize) -> &mut f64 {
        let i = self.index(d, n, c);
        &mut self.data[i]
    }

    /// One depth frame as a contiguous `N x C` row-major slice.
    pub fn frame(&self, d: usize) -> &[f64] {
        let len = self.n * self.c;
        &self.data[d * len..(d + 1) * len]
    }

    pub fn frame_mut(&mut self, d: usize) -> &mut [f64] {
        let len = self.n * self.c;
        &mut self.data[d * len..(d + 1) * len]
    }

    /// Elementwise sum; shapes must match.
    pub fn add(&self, other: &Tensor3) -> Result<Tensor3> {
        if self.shape() != other.shape() {
            return Err(Error::validation(format!(
                "tensor shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Self {
            d: self.d,
            n: self.n,
            c: self.c,
            data,
        })
    }

    /// Elementwise difference; shapes must match.
    pub fn sub(&self, other: &Tensor3) -> Result<Tensor3> {
        if self.shape() != other.shape() {
            return Err(Error::validation(format!(
                "tensor shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Self {
            d: self.d,
            n: self.n,
            c: self.c,
            data,
        })
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor3 {
        Self {
            d: self.d,
            n: self.n,
            c: self.c,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Row-major matrix; element `(r, c)` lives at `r * cols + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::validation(format!(
                "matrix dims must be positive, got {rows} x {cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::validation(format!(
                "matrix buffer has {} entries for {rows} x {cols}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::validation(
                "matrices must hold finite values only".to_string(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn seeded(rows: usize, cols: usize, seed: u64) -> Result<Self> {
        Self::new(rows, cols, seeded_values(rows * cols, seed))
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}
