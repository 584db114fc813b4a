//! Global SSIM between label images and the RoI shape similarity built on it.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::select_indices;
use crate::task::LabelMaskSet;

pub const DEFAULT_MAX_PAIRS: usize = 256;

/// Stabilizing constants `C1 = (k1 L)^2`, `C2 = (k2 L)^2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(self.k1) && ok(self.k2) && ok(self.dynamic_range) {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!(
                "ssim constants must be positive, got k1={} k2={} L={}",
                self.k1, self.k2, self.dynamic_range
            )))
        }
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }
}

/// Single-window SSIM over whole images, using population (divisor `n`) moments.
pub fn ssim_global(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, params: &SsimParams) -> Result<f64> {
    params.validate()?;
    if x.dim() != y.dim() {
        return Err(Error::ShapeMismatch(format!(
            "ssim inputs {:?} vs {:?}",
            x.dim(),
            y.dim()
        )));
    }
    if x.is_empty() {
        return Err(Error::EmptyImage);
    }
    let n = x.len() as f64;
    let mu_x = x.sum() / n;
    let mu_y = y.sum() / n;
    let (mut var_x, mut var_y, mut cov) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y.iter()) {
        let (dx, dy) = (a - mu_x, b - mu_y);
        var_x += dx * dx;
        var_y += dy * dy;
        cov += dx * dy;
    }
    var_x /= n;
    var_y /= n;
    cov /= n;
    let (c1, c2) = (params.c1(), params.c2());
    Ok(((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2))
        / ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairingMode {
    /// Mean SSIM over seeded index-aligned mask pairs.
    PairedSample,
    /// SSIM between the per-pixel foreground occupancy of each set.
    MeanMask,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiSimOptions {
    pub params: SsimParams,
    pub mode: PairingMode,
    pub max_pairs: usize,
    pub seed: u64,
    /// Resample source masks to the target grid when the shapes differ.
    pub resample: bool,
}

impl Default for RoiSimOptions {
    fn default() -> Self {
        Self {
            params: SsimParams::default(),
            mode: PairingMode::PairedSample,
            max_pairs: DEFAULT_MAX_PAIRS,
            seed: 42,
            resample: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoiSimReport {
    pub source_id: String,
    pub target_id: String,
    pub score: f64,
    pub n_pairs: usize,
    /// Smallest and largest per-pair SSIM aggregated into `score`.
    pub pair_range: (f64, f64),
    pub params: SsimParams,
    pub pairing_mode: PairingMode,
}

/// Foreground indicator of mask `index`, nearest-neighbour resampled to `(h, w)`.
fn binarized(set: &LabelMaskSet, index: usize, h: usize, w: usize) -> Array2<f64> {
    let mask = set.mask(index);
    let (sh, sw) = mask.dim();
    let fg = set.positive_class;
    Array2::from_shape_fn((h, w), |(r, c)| {
        let (sr, sc) = (r * sh / h, c * sw / w);
        if mask[[sr, sc]] == fg {
            1.0
        } else {
            0.0
        }
    })
}

fn mean_mask(set: &LabelMaskSet, h: usize, w: usize) -> Array2<f64> {
    let mut acc = Array2::<f64>::zeros((h, w));
    for i in 0..set.n_samples() {
        acc += &binarized(set, i, h, w);
    }
    acc / set.n_samples() as f64
}

/// RoI shape similarity between two label sets. The target grid is the reference.
pub fn roi_sim(source: &LabelMaskSet, target: &LabelMaskSet, opts: &RoiSimOptions) -> Result<RoiSimReport> {
    opts.params.validate()?;
    for set in [source, target] {
        if set.n_samples() == 0 {
            return Err(Error::EmptyLabelSet(set.task_id.clone()));
        }
        if set.height() == 0 || set.width() == 0 {
            return Err(Error::EmptyImage);
        }
    }
    let (h, w) = (target.height(), target.width());
    if !opts.resample && (source.height(), source.width()) != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "source masks {}x{} vs target {}x{} with resampling disabled",
            source.height(),
            source.width(),
            h,
            w
        )));
    }

    let values: Vec<f64> = match opts.mode {
        PairingMode::PairedSample => {
            if opts.max_pairs == 0 {
                return Err(Error::InvalidParams("max_pairs must be at least 1".into()));
            }
            let shared = source.n_samples().min(target.n_samples());
            let picks = select_indices(shared, opts.max_pairs, opts.seed);
            picks
                .par_iter()
                .map(|&i| {
                    let x = binarized(source, i, h, w);
                    let y = binarized(target, i, h, w);
                    ssim_global(x.view(), y.view(), &opts.params)
                })
                .collect::<Result<_>>()?
        }
        PairingMode::MeanMask => {
            let x = mean_mask(source, h, w);
            let y = mean_mask(target, h, w);
            vec![ssim_global(x.view(), y.view(), &opts.params)?]
        }
    };

    // fixed-order reduction keeps the result independent of the thread count
    let score = values.iter().sum::<f64>() / values.len() as f64;
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(RoiSimReport {
        source_id: source.task_id.clone(),
        target_id: target.task_id.clone(),
        score,
        n_pairs: values.len(),
        pair_range: (lo, hi),
        params: opts.params,
        pairing_mode: opts.mode,
    })
}

/// Per-pixel foreground occupancy of a set on its own grid.
pub fn occupancy(set: &LabelMaskSet) -> Array2<f64> {
    if set.n_samples() == 0 {
        return Array2::zeros((set.height(), set.width()));
    }
    mean_mask(set, set.height(), set.width())
}
