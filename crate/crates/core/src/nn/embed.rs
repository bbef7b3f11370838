//! Learnable depth positional embedding.
//!
//! A `(d_max, C)` table whose row `d` is added to every token of depth
//! frame `d`. Volumes shallower than `d_max` use a prefix of the table;
//! deeper volumes are rejected.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::tensor::{Tensor3, INIT_RANGE};

#[derive(Debug, Clone, PartialEq)]
pub struct DepthPosEmbed {
    d_max: usize,
    channels: usize,
    table: Vec<f64>,
}

impl DepthPosEmbed {
    pub fn new(d_max: usize, channels: usize, table: Vec<f64>) -> Result<Self> {
        if d_max == 0 || channels == 0 {
            return Err(Error::validation(format!(
                "embedding dims must be positive, got ({d_max}, {channels})"
            )));
        }
        if table.len() != d_max * channels {
            return Err(Error::validation(format!(
                "embedding table has {} entries for shape ({d_max}, {channels})",
                table.len()
            )));
        }
        if !table.iter().all(|v| v.is_finite()) {
            return Err(Error::validation(
                "embedding table must hold finite values only".to_string(),
            ));
        }
        Ok(Self {
            d_max,
            channels,
            table,
        })
    }

    pub fn zeros(d_max: usize, channels: usize) -> Result<Self> {
        Self::new(d_max, channels, vec![0.0; d_max * channels])
    }

    pub fn seeded(d_max: usize, channels: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = (0..d_max * channels)
            .map(|_| rng.random_range(-INIT_RANGE..INIT_RANGE))
            .collect();
        Self::new(d_max, channels, table)
    }

    pub fn d_max(&self) -> usize {
        self.d_max
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    #[inline]
    pub fn at(&self, d: usize, c: usize) -> f64 {
        debug_assert!(d < self.d_max && c < self.channels);
        self.table[d * self.channels + c]
    }
}

/// Adds row `d` of the table to every token of frame `d`:
/// `out[d, n, c] = x[d, n, c] + e[d, c]`.
pub fn apply_depth_pos_embed(x: &Tensor3, e: &DepthPosEmbed) -> Result<Tensor3> {
    let (d, _, c) = x.shape();
    if c != e.channels() {
        return Err(Error::validation(format!(
            "embedding has {} channels, input has {c}",
            e.channels()
        )));
    }
    if d > e.d_max() {
        return Err(Error::validation(format!(
            "input depth {d} exceeds the embedding capacity {}",
            e.d_max()
        )));
    }
    let mut out = x.clone();
    for di in 0..d {
        let row = &e.table()[di * c..(di + 1) * c];
        for token in out.frame_mut(di).chunks_mut(c) {
            for (v, &b) in token.iter_mut().zip(row) {
                *v += b;
            }
        }
    }
    Ok(out)
}
