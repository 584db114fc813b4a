//! Seeded pixel subsampling.
//!
//! All randomness in the crate comes from SplitMix64, a counter-based generator
//! that is easy to reproduce in any language:
//!
//! ```text
//! state <- seed
//! next():  state <- state + 0x9E3779B97F4A7C15          (wrapping)
//!          z <- state
//!          z <- (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9   (wrapping)
//!          z <- (z ^ (z >> 27)) * 0x94D049BB133111EB   (wrapping)
//!          return z ^ (z >> 31)
//! unit():  (next() >> 11) * 2^-53                        (uniform in [0, 1))
//! ```
//!
//! Choosing `k` of `n` indices uses selection sampling (Knuth, TAOCP vol. 2,
//! Algorithm S): walk `t = 0..n`, draw `u = unit()` for every visited index, and
//! keep `t` when `(n - t) * u < k - selected`, stopping once `k` are kept. The
//! result is a uniform `k`-subset returned in ascending order.

use ndarray::Array2;
use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::PixelFeatureSet;

pub const DEFAULT_MAX_PIXELS: usize = 4096;

/// Cap on the number of pixels drawn from one task, plus the seed that picks them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsampleSpec {
    pub max_pixels: usize,
    pub seed: u64,
}

impl Default for SubsampleSpec {
    fn default() -> Self {
        Self {
            max_pixels: DEFAULT_MAX_PIXELS,
            seed: 42,
        }
    }
}

impl SubsampleSpec {
    pub fn new(max_pixels: usize, seed: u64) -> Self {
        Self { max_pixels, seed }
    }

    /// Same cap, different stream.
    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// SplitMix64 stream with the `unit()` mapping used throughout the crate.
#[derive(Clone, Debug)]
pub struct SeededRng(SplitMix64);

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self(SplitMix64::seed_from_u64(seed))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform double in `[0, 1)` built from the top 53 bits.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw (Box-Muller, one output per two uniforms).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.unit();
        let u2 = self.unit();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// Uniform `k`-subset of `0..n` in ascending order. Returns `0..n` when `k >= n`.
pub fn select_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut rng = SeededRng::new(seed);
    let mut chosen = Vec::with_capacity(k);
    for t in 0..n {
        if chosen.len() == k {
            break;
        }
        let remaining = (n - t) as f64;
        let needed = (k - chosen.len()) as f64;
        if remaining * rng.unit() < needed {
            chosen.push(t);
        }
    }
    chosen
}

/// Flattened `(feature vector, label)` pairs drawn from a [`PixelFeatureSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct PixelSample {
    /// One row per chosen pixel, widened to f64.
    pub features: Array2<f64>,
    pub labels: Vec<u8>,
    /// Row-major pixel indices (sample, row, col) of the chosen pixels.
    pub indices: Vec<usize>,
}

impl PixelSample {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.features.ncols()
    }

    /// Applies the same permutation to features, labels and indices.
    pub fn permuted(&self, order: &[usize]) -> PixelSample {
        let c = self.channels();
        let mut features = Array2::zeros((order.len(), c));
        for (dst, &src) in order.iter().enumerate() {
            features.row_mut(dst).assign(&self.features.row(src));
        }
        PixelSample {
            features,
            labels: order.iter().map(|&i| self.labels[i]).collect(),
            indices: order.iter().map(|&i| self.indices[i]).collect(),
        }
    }
}

/// All pixels in row-major order when they fit under `max_pixels`; otherwise a
/// seeded uniform subsample of exactly `max_pixels`, still in row-major order.
pub fn flatten_pixels(fs: &PixelFeatureSet<'_>, sampler: SubsampleSpec) -> Result<PixelSample> {
    let total = fs.n_pixels();
    if total == 0 || fs.channels() == 0 {
        return Err(Error::EmptyFeatureSet(fs.task_id.to_string()));
    }
    if sampler.max_pixels == 0 {
        return Err(Error::InvalidParams("max_pixels must be at least 1".into()));
    }
    let indices = select_indices(total, sampler.max_pixels, sampler.seed);
    let c = fs.channels();
    let flat = fs.features().into_shape_with_order((total, c)).ok();
    let mut features = Array2::zeros((indices.len(), c));
    let mut labels = Vec::with_capacity(indices.len());
    let all_labels = fs.labels().as_slice();
    for (row, &i) in indices.iter().enumerate() {
        match &flat {
            Some(flat) => features
                .row_mut(row)
                .iter_mut()
                .zip(flat.row(i))
                .for_each(|(d, &s)| *d = f64::from(s)),
            None => features
                .row_mut(row)
                .iter_mut()
                .zip(fs.pixel(i))
                .for_each(|(d, s)| *d = s),
        }
        labels.push(all_labels[i]);
    }
    Ok(PixelSample {
        features,
        labels,
        indices,
    })
}
