//! Synthetic task families with a tunable amount of label information in the
//! features, plus a linear-probe transfer oracle to rank sources against.
//!
//! Every task gets binary masks from thresholded, box-smoothed Gaussian fields.
//! Pixel features are `s * m_y + (1 - s) * noise_std * z`, with class means
//! `m_0 = 0` and `m_1 = 1` in every channel and `z` standard normal. Because each
//! task stands for a separately trained model, every task also carries its
//! model's features on every other task's images: the same recipe with the
//! source's strength applied to the other task's labels.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array3, Array4, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hscore::HScoreParams;
use crate::otce::{CostNormalization, SinkhornParams};
use crate::pipeline::{score_pair, Metric};
use crate::ranking::{build_ranking, footrule_full, footrule_topk, Direction};
use crate::sampling::{flatten_pixels, SeededRng, SubsampleSpec};
use crate::task::{FeatureMap, LabelMaskSet, TaskBundle, TaskDescriptor};

pub const SYNTH_EXTRACTOR: &str = "synthetic mixture";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_tasks: usize,
    pub n_samples: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub signal_strengths: Vec<f64>,
    pub seed: u64,
    pub noise_std: f64,
    /// Fraction of each mask labelled foreground.
    pub fg_fraction: f64,
    /// Half-width of the box filter that smooths the mask fields.
    pub smoothing: usize,
}

impl Default for SynthSpec {
    /// Six sources at strengths 0, 0.2, ..., 1 followed by one task at 0.8
    /// intended as the target.
    fn default() -> Self {
        Self {
            n_tasks: 7,
            n_samples: 16,
            height: 16,
            width: 16,
            channels: 4,
            signal_strengths: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 0.8],
            seed: 42,
            noise_std: 2.0,
            fg_fraction: 0.3,
            smoothing: 2,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.n_tasks == 0 || self.n_samples == 0 || self.height == 0 || self.width == 0 || self.channels == 0 {
            return bad("n_tasks, n_samples, height, width and channels must be positive".into());
        }
        if self.signal_strengths.len() != self.n_tasks {
            return bad(format!(
                "{} signal strengths for {} tasks",
                self.signal_strengths.len(),
                self.n_tasks
            ));
        }
        if let Some(s) = self.signal_strengths.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return bad(format!("signal strength {s} outside [0, 1]"));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad(format!("noise_std must be >= 0, got {}", self.noise_std));
        }
        if !(self.fg_fraction > 0.0 && self.fg_fraction < 1.0) {
            return bad(format!("fg_fraction must be in (0, 1), got {}", self.fg_fraction));
        }
        Ok(())
    }

    pub fn task_id(index: usize) -> String {
        format!("syn-{index:02}")
    }
}

/// Binary masks: smoothed white noise, thresholded so that exactly
/// `round(fg_fraction * H * W)` pixels of each mask are foreground.
fn masks(spec: &SynthSpec, rng: &mut SeededRng) -> Array3<u8> {
    let (n, h, w, r) = (spec.n_samples, spec.height, spec.width, spec.smoothing as isize);
    let fg = ((spec.fg_fraction * (h * w) as f64).round() as usize).clamp(1, h * w - 1);
    let mut out = Array3::<u8>::zeros((n, h, w));
    for i in 0..n {
        let raw: Vec<f64> = (0..h * w).map(|_| rng.normal()).collect();
        let mut smooth = vec![0.0; h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        // wrap around so every pixel sees the same window size
                        let yy = (y + dy).rem_euclid(h as isize) as usize;
                        let xx = (x + dx).rem_euclid(w as isize) as usize;
                        acc += raw[yy * w + xx];
                    }
                }
                smooth[y as usize * w + x as usize] = acc;
            }
        }
        let mut order: Vec<usize> = (0..h * w).collect();
        order.sort_by(|&a, &b| smooth[b].total_cmp(&smooth[a]).then(a.cmp(&b)));
        let mut mask = out.index_axis_mut(Axis(0), i);
        let flat = mask.as_slice_mut().expect("standard layout");
        for &p in &order[..fg] {
            flat[p] = 1;
        }
    }
    out
}

fn mixture(labels: &Array3<u8>, strength: f64, spec: &SynthSpec, rng: &mut SeededRng) -> Array4<f32> {
    let (n, h, w) = labels.dim();
    let c = spec.channels;
    let mut out = Array4::<f32>::zeros((n, h, w, c));
    let slice = out.as_slice_mut().expect("standard layout");
    for (pixel, &y) in labels.iter().enumerate() {
        for k in 0..c {
            let v = strength * f64::from(y) + (1.0 - strength) * spec.noise_std * rng.normal();
            slice[pixel * c + k] = v as f32;
        }
    }
    out
}

/// Builds the task family. Deterministic for a given spec.
pub fn generate_tasks(spec: &SynthSpec) -> Result<Vec<TaskBundle>> {
    spec.validate()?;
    let mut rng = SeededRng::new(spec.seed);
    let labels: Vec<Array3<u8>> = (0..spec.n_tasks).map(|_| masks(spec, &mut rng)).collect();
    let mut bundles = Vec::with_capacity(spec.n_tasks);
    for (t, (y, &s)) in labels.iter().zip(&spec.signal_strengths).enumerate() {
        let id = SynthSpec::task_id(t);
        let descriptor = TaskDescriptor::new(&id, "FG", "SYN", "synthetic")?.with_partition(t.to_string());
        let features = FeatureMap {
            data: mixture(y, s, spec, &mut rng),
            extractor: SYNTH_EXTRACTOR.into(),
        };
        bundles.push(TaskBundle::new(
            descriptor,
            LabelMaskSet::new(&id, y.clone(), 1),
            Some(features),
        )?);
    }
    for (src, &s) in spec.signal_strengths.iter().enumerate() {
        for (tgt, y) in labels.iter().enumerate() {
            if tgt == src {
                continue;
            }
            let data = mixture(y, s, spec, &mut rng);
            bundles[src].add_transfer(SynthSpec::task_id(tgt), data)?;
        }
    }
    Ok(bundles)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeParams {
    /// L2 penalty on the weights (not the intercept), relative to the mean log-loss.
    pub l2: f64,
    pub max_iters: usize,
    /// Cap on training pixels drawn from the source.
    pub max_train_pixels: usize,
}

impl Default for ProbeParams {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            max_iters: 50,
            max_train_pixels: 8192,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeResult {
    pub task_id: String,
    pub target_id: String,
    /// Pixel accuracy on the target, in `[0, 1]`.
    pub accuracy: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Fits `P(y = positive | v) = sigmoid(b + w.v)` by Newton's method.
/// Returns `[b, w_1, ..., w_C]`.
fn fit_logistic(x: ArrayView2<'_, f64>, y: &[bool], params: &ProbeParams) -> DVector<f64> {
    let (n, c) = x.dim();
    let d = c + 1;
    let nf = n as f64;
    let mut beta = DVector::<f64>::zeros(d);
    let row = |i: usize| std::iter::once(1.0).chain(x.row(i).iter().copied()).collect::<Vec<f64>>();
    for _ in 0..params.max_iters {
        let mut grad = DVector::<f64>::zeros(d);
        let mut hess = DMatrix::<f64>::zeros(d, d);
        for (i, &yi) in y.iter().enumerate().take(n) {
            let xi = row(i);
            let z: f64 = xi.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
            let p = sigmoid(z);
            let r = p - if yi { 1.0 } else { 0.0 };
            let wgt = p * (1.0 - p);
            for a in 0..d {
                grad[a] += r * xi[a] / nf;
                for b in 0..d {
                    hess[(a, b)] += wgt * xi[a] * xi[b] / nf;
                }
            }
        }
        for a in 1..d {
            grad[a] += params.l2 * beta[a];
            hess[(a, a)] += params.l2;
        }
        // keeps the system solvable when the intercept direction saturates
        hess[(0, 0)] += 1e-12;
        let Some(step) = hess.cholesky().map(|ch| ch.solve(&grad)) else {
            break;
        };
        beta -= &step;
        if step.amax() < 1e-10 {
            break;
        }
    }
    beta
}

/// Trains a logistic probe on the source's own pixels and reports its pixel
/// accuracy on the source model's features of the target images.
pub fn probe_transfer(source: &TaskBundle, target: &TaskBundle, seed: u64, params: &ProbeParams) -> Result<ProbeResult> {
    let train = source.feature_set()?;
    let (test, _) = source.features_on(target)?;
    if train.channels() != test.channels() {
        return Err(Error::DimensionMismatch {
            expected: train.channels(),
            got: test.channels(),
        });
    }
    let sample = flatten_pixels(&train, SubsampleSpec::new(params.max_train_pixels, seed))?;
    let pos = source.labels.positive_class;
    let y: Vec<bool> = sample.labels.iter().map(|&l| l == pos).collect();
    let beta = fit_logistic(sample.features.view(), &y, params);

    let target_pos = target.labels.positive_class;
    let total = test.n_pixels();
    let mut correct = 0usize;
    for i in 0..total {
        let z = beta[0] + test.pixel(i).zip(beta.iter().skip(1)).map(|(v, b)| v * b).sum::<f64>();
        if (z > 0.0) == (test.label(i) == target_pos) {
            correct += 1;
        }
    }
    Ok(ProbeResult {
        task_id: source.task_id().to_string(),
        target_id: target.task_id().to_string(),
        accuracy: correct as f64 / total as f64,
    })
}

/// Everything that fixes the outcome of [`evaluate_family`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalSettings {
    pub metric: Metric,
    pub hscore: HScoreParams,
    pub sinkhorn: SinkhornParams,
    pub sampler: SubsampleSpec,
    pub probe: ProbeParams,
    /// Seed for the probe's training subsample.
    pub probe_seed: u64,
}

impl EvalSettings {
    pub fn new(metric: Metric, seed: u64) -> Self {
        Self {
            metric,
            hscore: HScoreParams::default(),
            sinkhorn: SinkhornParams::default(),
            sampler: SubsampleSpec::new(512, seed),
            probe: ProbeParams::default(),
            probe_seed: seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SourceEvaluation {
    pub task_id: String,
    pub score: f64,
    pub probe_accuracy: f64,
    pub metric_rank: usize,
    pub probe_rank: usize,
}

/// Metric ranking of every other task in a family against the probe ranking.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FamilyEvaluation {
    pub target_id: String,
    pub sources: Vec<SourceEvaluation>,
    /// Full footrule between the two rankings.
    pub footrule: u64,
    /// Displacement of the metric's top pick in the probe ranking.
    pub footrule_top1: u64,
}

/// Scores every task except `target_id` as a source for it, with both the
/// metric and the probe, and compares the two rankings. Sources keep pool order.
pub fn evaluate_family(pool: &[TaskBundle], target_id: &str, settings: &EvalSettings) -> Result<FamilyEvaluation> {
    use rayon::prelude::*;

    let target = pool
        .iter()
        .find(|b| b.task_id() == target_id)
        .ok_or_else(|| Error::UnknownTask(target_id.to_string()))?;
    let sources: Vec<&TaskBundle> = pool.iter().filter(|b| b.task_id() != target_id).collect();
    if sources.is_empty() {
        return Err(Error::NoCompatibleSource(format!("{target_id} is the only task")));
    }
    let rows: Vec<(String, f64, f64)> = sources
        .par_iter()
        .map(|s| {
            let m = score_pair(
                s,
                target,
                settings.metric,
                &settings.hscore,
                &settings.sinkhorn,
                CostNormalization::None,
                settings.sampler,
            )?;
            let p = probe_transfer(s, target, settings.probe_seed, &settings.probe)?;
            Ok((s.task_id().to_string(), m.score, p.accuracy))
        })
        .collect::<Result<_>>()?;
    let rank = |col: fn(&(String, f64, f64)) -> f64| {
        build_ranking(&rows.iter().map(|r| (r.0.clone(), col(r))).collect::<Vec<_>>(), Direction::HigherIsBetter)
    };
    let metric_rank = rank(|r| r.1)?;
    let probe_rank = rank(|r| r.2)?;
    let footrule = footrule_full(&metric_rank, &probe_rank)?.distance;
    let footrule_top1 = footrule_topk(&metric_rank, &probe_rank, 1)?.distance;
    let sources = rows
        .into_iter()
        .map(|(task_id, score, probe_accuracy)| SourceEvaluation {
            metric_rank: metric_rank.position(&task_id).unwrap_or(0),
            probe_rank: probe_rank.position(&task_id).unwrap_or(0),
            task_id,
            score,
            probe_accuracy,
        })
        .collect();
    Ok(FamilyEvaluation {
        target_id: target_id.to_string(),
        sources,
        footrule,
        footrule_top1,
    })
}
