//! H-score for classification and its pixel-wise segmentation average.
//!
//! For features `F` and labels `Y`, the score is
//! `tr((cov(F) + ridge I)^-1 cov(E[F | Y]))` with population covariances and
//! class-conditional means weighted by their empirical class frequencies.
//! Segmentation treats every pixel position as its own classification problem
//! over the images of the target set and averages the per-pixel scores.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::PixelFeatureSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HScoreParams {
    /// Added to the feature covariance diagonal before inversion.
    pub ridge: f64,
    pub min_samples_per_pixel: usize,
    /// Keep the `H x W` map of per-pixel scores in the report.
    #[serde(default)]
    pub keep_per_pixel: bool,
}

impl Default for HScoreParams {
    fn default() -> Self {
        Self {
            ridge: 1e-8,
            min_samples_per_pixel: 2,
            keep_per_pixel: false,
        }
    }
}

impl HScoreParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.ridge.is_finite() && self.ridge >= 0.0) {
            return Err(Error::InvalidParams(format!("ridge must be >= 0, got {}", self.ridge)));
        }
        if self.min_samples_per_pixel < 2 {
            return Err(Error::InvalidParams("min_samples_per_pixel must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HScoreReport {
    pub source_id: String,
    pub target_id: String,
    pub score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_pixel_scores: Option<Vec<Vec<f64>>>,
    /// Pixel positions where only one class occurs; they contribute 0.
    pub skipped_pixels: usize,
    pub n_pixels: usize,
}

/// Score of a single classification problem; rows of `features` are samples.
pub fn hscore_classification(
    features: ArrayView2<'_, f64>,
    labels: &[u8],
    params: &HScoreParams,
) -> Result<f64> {
    params.validate()?;
    let n = features.nrows();
    if labels.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: labels.len(),
        });
    }
    if n < 2 {
        return Err(Error::DegenerateInput(format!("{n} samples; at least 2 required")));
    }
    if let Some(index) = features.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteFeature { index });
    }
    Ok(score_rows(features, labels, params.ridge)?.unwrap_or(0.0))
}

/// `None` when fewer than two classes are present.
fn score_rows(features: ArrayView2<'_, f64>, labels: &[u8], ridge: f64) -> Result<Option<f64>> {
    let (n, c) = features.dim();
    let mut counts = [0usize; 256];
    for &y in labels {
        counts[y as usize] += 1;
    }
    if counts.iter().filter(|&&k| k > 0).count() < 2 {
        return Ok(None);
    }

    let nf = n as f64;
    let mean = DVector::from_iterator(c, (0..c).map(|k| features.column(k).sum() / nf));

    let mut cov = DMatrix::<f64>::zeros(c, c);
    let mut centered = DVector::<f64>::zeros(c);
    for row in features.rows() {
        for k in 0..c {
            centered[k] = row[k] - mean[k];
        }
        cov.syger(1.0, &centered, &centered, 1.0);
    }
    cov /= nf;
    for k in 0..c {
        cov[(k, k)] += ridge;
    }
    let chol = nalgebra::Cholesky::new(cov).ok_or(Error::SingularCovariance)?;

    let mut class_sums: Vec<(usize, DVector<f64>)> = Vec::new();
    let mut slot = [usize::MAX; 256];
    for (row, &y) in features.rows().into_iter().zip(labels) {
        let s = &mut slot[y as usize];
        if *s == usize::MAX {
            *s = class_sums.len();
            class_sums.push((0, DVector::zeros(c)));
        }
        let (count, sum) = &mut class_sums[*s];
        *count += 1;
        for k in 0..c {
            sum[k] += row[k];
        }
    }

    // tr(A^-1 B) with B = sum_c p_c d_c d_c^T  ==  sum_c p_c d_c^T A^-1 d_c
    let mut total = 0.0;
    for (count, sum) in class_sums {
        let d = sum / count as f64 - &mean;
        let solved = chol.solve(&d);
        total += (count as f64 / nf) * d.dot(&solved);
    }
    Ok(Some(total))
}

/// Pixel-wise H-score: `fs` holds the source model's features on the target
/// images together with the target labels.
pub fn hscore_segmentation(
    source_id: &str,
    fs: &PixelFeatureSet<'_>,
    params: &HScoreParams,
) -> Result<HScoreReport> {
    params.validate()?;
    let (n, h, w, c) = fs.features().dim();
    if n < params.min_samples_per_pixel {
        return Err(Error::DegenerateInput(format!(
            "{n} samples per pixel, at least {} required",
            params.min_samples_per_pixel
        )));
    }
    if h * w == 0 || c == 0 {
        return Err(Error::EmptyFeatureSet(fs.task_id.to_string()));
    }
    let features = fs.features();
    let labels = fs.labels().masks();

    let per_pixel: Vec<Option<f64>> = (0..h * w)
        .into_par_iter()
        .map(|j| {
            let (r, col) = (j / w, j % w);
            let mut block = Array2::<f64>::zeros((n, c));
            let mut ys = Vec::with_capacity(n);
            for i in 0..n {
                for k in 0..c {
                    block[[i, k]] = f64::from(features[[i, r, col, k]]);
                }
                ys.push(labels[[i, r, col]]);
            }
            score_rows(block.view(), &ys, params.ridge)
        })
        .collect::<Result<_>>()?;

    let skipped_pixels = per_pixel.iter().filter(|s| s.is_none()).count();
    let values: Vec<f64> = per_pixel.iter().map(|s| s.unwrap_or(0.0)).collect();
    let score = values.iter().sum::<f64>() / values.len() as f64;
    let per_pixel_scores = params
        .keep_per_pixel
        .then(|| values.chunks(w).map(<[f64]>::to_vec).collect());
    Ok(HScoreReport {
        source_id: source_id.to_string(),
        target_id: fs.task_id.to_string(),
        score,
        per_pixel_scores,
        skipped_pixels,
        n_pixels: h * w,
    })
}
