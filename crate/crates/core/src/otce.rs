//! OTCE: negative conditional entropy of target labels given source labels under
//! an entropic optimal-transport coupling of source and target pixel features.
//!
//! The pipeline is `flatten_pixels` on both sides, squared-Euclidean
//! [`cost_matrix`], [`sinkhorn`] with uniform marginals, [`joint_label_distribution`]
//! and finally [`otce_from_joint`]. Entropies are in nats.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::{flatten_pixels, PixelSample, SubsampleSpec};
use crate::task::PixelFeatureSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkhornParams {
    pub epsilon: f64,
    pub max_iters: usize,
    pub marginal_tol: f64,
    pub log_domain: bool,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            max_iters: 1000,
            marginal_tol: 1e-9,
            log_domain: true,
        }
    }
}

impl SinkhornParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::InvalidParams(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.marginal_tol.is_finite() && self.marginal_tol > 0.0) {
            return Err(Error::InvalidParams(format!(
                "marginal_tol must be > 0, got {}",
                self.marginal_tol
            )));
        }
        Ok(())
    }
}

/// Rescaling applied to the cost matrix before solving.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostNormalization {
    #[default]
    None,
    /// Divide by the largest entry (no-op for an all-zero matrix).
    Max,
}

/// Coupling between `N_s` source and `N_t` target samples.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub coupling: Array2<f64>,
    pub row_marginal: Array1<f64>,
    pub col_marginal: Array1<f64>,
    pub iterations_used: usize,
    /// Largest absolute deviation of any row or column sum from its marginal.
    pub final_marginal_error: f64,
    pub converged: bool,
}

impl TransportPlan {
    pub fn total_mass(&self) -> f64 {
        self.coupling.sum()
    }

    /// `sum_ij C_ij pi_ij`, the transport part of the objective.
    pub fn transport_cost(&self, cost: ArrayView2<'_, f64>) -> f64 {
        self.coupling
            .iter()
            .zip(cost.iter())
            .map(|(p, c)| p * c)
            .sum()
    }
}

/// Pairwise squared Euclidean distances, clamped at zero.
pub fn cost_matrix(src: ArrayView2<'_, f64>, tgt: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if src.nrows() == 0 || tgt.nrows() == 0 {
        return Err(Error::EmptyFeatureSet(if src.nrows() == 0 { "source" } else { "target" }.into()));
    }
    if src.ncols() != tgt.ncols() {
        return Err(Error::DimensionMismatch {
            expected: src.ncols(),
            got: tgt.ncols(),
        });
    }
    let m = tgt.nrows();
    let mut cost = Array2::<f64>::zeros((src.nrows(), m));
    cost.as_slice_mut()
        .expect("fresh array")
        .par_chunks_mut(m)
        .enumerate()
        .for_each(|(i, out)| {
            let s = src.row(i);
            for (o, t) in out.iter_mut().zip(tgt.rows()) {
                let d: f64 = s.iter().zip(t.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                *o = d.max(0.0);
            }
        });
    Ok(cost)
}

fn check_cost(cost: ArrayView2<'_, f64>) -> Result<()> {
    if cost.is_empty() {
        return Err(Error::EmptyFeatureSet("cost matrix".into()));
    }
    for ((row, col), &c) in cost.indexed_iter() {
        if !c.is_finite() {
            return Err(Error::NonFiniteCost { row, col });
        }
        if c < 0.0 {
            return Err(Error::InvalidParams(format!("negative cost {c} at ({row}, {col})")));
        }
    }
    Ok(())
}

/// `log sum_k exp(v_k)` for a stream with a known maximum.
#[inline]
fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Entropic OT with uniform marginals by alternating marginal scaling.
///
/// Stops as soon as every row and column sum is within `marginal_tol` of its
/// marginal, or after `max_iters` sweeps. A plan that did not converge is still
/// returned; check [`TransportPlan::converged`].
pub fn sinkhorn(cost: ArrayView2<'_, f64>, params: &SinkhornParams) -> Result<TransportPlan> {
    params.validate()?;
    check_cost(cost)?;
    let (n, m) = cost.dim();
    if params.log_domain {
        sinkhorn_log(cost, n, m, params)
    } else {
        sinkhorn_scaling(cost, n, m, params)
    }
}

fn uniform(n: usize) -> Array1<f64> {
    Array1::from_elem(n, 1.0 / n as f64)
}

fn finish(
    coupling: Array2<f64>,
    iterations_used: usize,
    tol: f64,
) -> TransportPlan {
    let (n, m) = coupling.dim();
    let row_marginal = uniform(n);
    let col_marginal = uniform(m);
    let row_err = coupling
        .sum_axis(Axis(1))
        .iter()
        .zip(row_marginal.iter())
        .map(|(s, a)| (s - a).abs())
        .fold(0.0, f64::max);
    let col_err = coupling
        .sum_axis(Axis(0))
        .iter()
        .zip(col_marginal.iter())
        .map(|(s, b)| (s - b).abs())
        .fold(0.0, f64::max);
    let final_marginal_error = row_err.max(col_err);
    TransportPlan {
        coupling,
        row_marginal,
        col_marginal,
        iterations_used,
        final_marginal_error,
        converged: final_marginal_error <= tol,
    }
}

/// Scalings beyond this factor are folded back into the log-domain potentials.
const ABSORB_LIMIT: f64 = 1e30;

/// Exact log-domain half-step: `out_i = eps * (log(1/len(out)) - LSE_j((pot_j - C_ij) / eps))`,
/// with `cost` given row-major as `out.len()` rows of `pot.len()` entries.
fn lse_half_step(out: &mut Array1<f64>, pot: &Array1<f64>, cost: &[f64], eps: f64) {
    let len = pot.len();
    let log_marginal = -(out.len() as f64).ln();
    out.as_slice_mut()
        .expect("contiguous")
        .par_iter_mut()
        .zip(cost.par_chunks(len))
        .for_each(|(o, row)| {
            let lse = log_sum_exp(row.iter().zip(pot.iter()).map(|(c, p)| (p - c) / eps));
            *o = eps * (log_marginal - lse);
        });
}

/// `exp((f_i + g_j - C_ij) / eps)` row-major, for `cost` given as `f.len()` rows.
fn stabilized_kernel(f: &Array1<f64>, g: &Array1<f64>, cost: &[f64], eps: f64) -> Vec<f64> {
    let m = g.len();
    let mut k = vec![0.0; cost.len()];
    k.par_chunks_mut(m)
        .zip(cost.par_chunks(m))
        .zip(f.as_slice().expect("contiguous").par_iter())
        .for_each(|((out, row), fi)| {
            for ((o, c), gj) in out.iter_mut().zip(row).zip(g.iter()) {
                *o = ((fi + gj - c) / eps).exp();
            }
        });
    k
}

/// `out_i = sum_j k_ij x_j` over row-major `k`.
fn mat_vec(k: &[f64], x: &Array1<f64>, out: &mut Array1<f64>) {
    let m = x.len();
    out.as_slice_mut()
        .expect("contiguous")
        .par_iter_mut()
        .zip(k.par_chunks(m))
        .for_each(|(o, row)| *o = row.iter().zip(x.iter()).map(|(a, b)| a * b).sum());
}

/// Log-stabilized Sinkhorn. The plan is kept as `diag(u) K diag(v)` with
/// `K_ij = exp((f_i + g_j - C_ij) / eps)`; the scalings `u`, `v` are updated by
/// cheap matrix-vector products and absorbed into the potentials `f`, `g`
/// whenever they drift far from 1, at which point `K` is rebuilt. Starting from
/// an exact log-domain sweep keeps every row and column of `K` representable.
fn sinkhorn_log(cost: ArrayView2<'_, f64>, n: usize, m: usize, params: &SinkhornParams) -> Result<TransportPlan> {
    let eps = params.epsilon;
    let (a, b) = (1.0 / n as f64, 1.0 / m as f64);
    let cost_t = cost.t().as_standard_layout().into_owned();
    let cost = cost.as_standard_layout();
    let rows = cost.as_slice().expect("standard layout");
    let cols = cost_t.as_slice().expect("standard layout");

    let mut f = Array1::<f64>::zeros(n);
    let mut g = Array1::<f64>::zeros(m);
    let mut u = Array1::<f64>::ones(n);
    let mut v = Array1::<f64>::ones(m);
    let mut kv = Array1::<f64>::zeros(n);
    let mut ktu = Array1::<f64>::zeros(m);

    let exact_sweep = |f: &mut Array1<f64>, g: &mut Array1<f64>| {
        lse_half_step(f, g, rows, eps);
        lse_half_step(g, f, cols, eps);
    };
    let kernels = |f: &Array1<f64>, g: &Array1<f64>| (stabilized_kernel(f, g, rows, eps), stabilized_kernel(g, f, cols, eps));

    exact_sweep(&mut f, &mut g);
    let mut iterations = 1;
    let (mut k, mut kt) = kernels(&f, &g);

    loop {
        // column sums are exact after each v-update; rows are checked here
        mat_vec(&k, &v, &mut kv);
        if kv.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            absorb(&mut f, &mut u, eps);
            absorb(&mut g, &mut v, eps);
            exact_sweep(&mut f, &mut g);
            (k, kt) = kernels(&f, &g);
            iterations += 1;
            if iterations >= params.max_iters {
                break;
            }
            continue;
        }
        let row_err = u
            .iter()
            .zip(kv.iter())
            .map(|(ui, s)| (ui * s - a).abs())
            .fold(0.0, f64::max);
        if row_err <= params.marginal_tol || iterations >= params.max_iters {
            break;
        }

        u.iter_mut().zip(kv.iter()).for_each(|(ui, s)| *ui = a / s);
        mat_vec(&kt, &u, &mut ktu);
        v.iter_mut().zip(ktu.iter()).for_each(|(vj, s)| *vj = b / s);
        iterations += 1;

        let drifted = |x: &Array1<f64>| x.iter().any(|s| !(s.is_finite() && (1.0 / ABSORB_LIMIT..=ABSORB_LIMIT).contains(s)));
        if drifted(&u) || drifted(&v) {
            absorb(&mut f, &mut u, eps);
            absorb(&mut g, &mut v, eps);
            (k, kt) = kernels(&f, &g);
        }
    }

    let mut coupling = Array2::<f64>::zeros((n, m));
    coupling
        .as_slice_mut()
        .expect("fresh array")
        .par_chunks_mut(m)
        .zip(k.par_chunks(m))
        .zip(u.as_slice().expect("contiguous").par_iter())
        .for_each(|((out, row), ui)| {
            for ((o, kij), vj) in out.iter_mut().zip(row).zip(v.iter()) {
                *o = ui * kij * vj;
            }
        });
    Ok(finish(coupling, iterations, params.marginal_tol))
}

/// Moves a scaling into its potential: `pot += eps * ln(scale)`, `scale = 1`.
fn absorb(pot: &mut Array1<f64>, scale: &mut Array1<f64>, eps: f64) {
    for (p, s) in pot.iter_mut().zip(scale.iter_mut()) {
        if s.is_finite() && *s > 0.0 {
            *p += eps * s.ln();
        }
        *s = 1.0;
    }
}

fn sinkhorn_scaling(cost: ArrayView2<'_, f64>, n: usize, m: usize, params: &SinkhornParams) -> Result<TransportPlan> {
    let eps = params.epsilon;
    let kernel = cost.mapv(|c| (-c / eps).exp());
    let a = 1.0 / n as f64;
    let b = 1.0 / m as f64;
    let mut u = Array1::<f64>::from_elem(n, 1.0);
    let mut v = Array1::<f64>::from_elem(m, 1.0);
    let mut iterations = 0;
    loop {
        let kv = kernel.dot(&v);
        for (i, (ui, s)) in u.iter_mut().zip(kv.iter()).enumerate() {
            if *s <= 0.0 || !s.is_finite() {
                return Err(Error::KernelUnderflow(i));
            }
            *ui = a / s;
        }
        let ktu = kernel.t().dot(&u);
        for (j, (vj, s)) in v.iter_mut().zip(ktu.iter()).enumerate() {
            if *s <= 0.0 || !s.is_finite() {
                return Err(Error::KernelUnderflow(j));
            }
            *vj = b / s;
        }
        iterations += 1;
        let rows = kernel.dot(&v) * &u;
        let row_err = rows.iter().map(|r| (r - a).abs()).fold(0.0, f64::max);
        if row_err <= params.marginal_tol || iterations >= params.max_iters {
            break;
        }
    }
    let coupling = Array2::from_shape_fn((n, m), |(i, j)| u[i] * kernel[[i, j]] * v[j]);
    Ok(finish(coupling, iterations, params.marginal_tol))
}

/// Empirical joint distribution of (source label, target label) under a coupling.
#[derive(Clone, Debug, PartialEq)]
pub struct JointLabelDistribution {
    /// `table[[s, t]]` is the mass on `(source_classes[s], target_classes[t])`.
    pub table: Array2<f64>,
    pub source_classes: Vec<u8>,
    pub target_classes: Vec<u8>,
}

impl JointLabelDistribution {
    pub fn source_marginal(&self) -> Array1<f64> {
        self.table.sum_axis(Axis(1))
    }

    pub fn target_marginal(&self) -> Array1<f64> {
        self.table.sum_axis(Axis(0))
    }
}

fn class_index(labels: &[u8]) -> (Vec<u8>, [usize; 256]) {
    let mut present = [false; 256];
    for &y in labels {
        present[y as usize] = true;
    }
    let classes: Vec<u8> = (0..=255u8).filter(|&c| present[c as usize]).collect();
    let mut slot = [usize::MAX; 256];
    for (k, &c) in classes.iter().enumerate() {
        slot[c as usize] = k;
    }
    (classes, slot)
}

pub fn joint_label_distribution(
    plan: &TransportPlan,
    src_labels: &[u8],
    tgt_labels: &[u8],
) -> Result<JointLabelDistribution> {
    let (n, m) = plan.coupling.dim();
    if src_labels.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: src_labels.len(),
        });
    }
    if tgt_labels.len() != m {
        return Err(Error::LengthMismatch {
            expected: m,
            got: tgt_labels.len(),
        });
    }
    let (source_classes, s_slot) = class_index(src_labels);
    let (target_classes, t_slot) = class_index(tgt_labels);
    let mut table = Array2::<f64>::zeros((source_classes.len(), target_classes.len()));
    let t_idx: Vec<usize> = tgt_labels.iter().map(|&y| t_slot[y as usize]).collect();
    for (row, &ys) in plan.coupling.rows().into_iter().zip(src_labels) {
        let mut out = table.row_mut(s_slot[ys as usize]);
        for (&p, &t) in row.iter().zip(&t_idx) {
            out[t] += p;
        }
    }
    Ok(JointLabelDistribution {
        table,
        source_classes,
        target_classes,
    })
}

/// `sum P(ys, yt) log(P(ys, yt) / P(ys))`, i.e. `-H(Yt | Ys)`; zero cells contribute nothing.
pub fn otce_from_joint(joint: &JointLabelDistribution) -> f64 {
    let mut total = 0.0;
    for row in joint.table.rows() {
        let p_s: f64 = row.sum();
        if p_s <= 0.0 {
            continue;
        }
        for &p in row {
            if p > 0.0 {
                total += p * (p / p_s).ln();
            }
        }
    }
    // -H(Yt|Ys) is never positive; rounding may leave a tiny positive residue
    total.min(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OtceReport {
    pub source_id: String,
    pub target_id: String,
    pub score: f64,
    pub ot_cost: f64,
    pub iterations_used: usize,
    pub final_marginal_error: f64,
    pub converged: bool,
    pub n_source: usize,
    pub n_target: usize,
    /// Source pixels use `subsample.seed`; target pixels use `subsample.seed + 1`.
    pub subsample: SubsampleSpec,
    pub normalization: CostNormalization,
}

/// Seed stream used for the target side of an OTCE evaluation.
pub fn target_stream(sampler: SubsampleSpec) -> SubsampleSpec {
    sampler.with_seed(sampler.seed.wrapping_add(1))
}

/// OTCE between a source feature set (source model on source images) and a
/// target feature set (same source model on target images).
pub fn otce(
    source: &PixelFeatureSet<'_>,
    target: &PixelFeatureSet<'_>,
    sampler: SubsampleSpec,
    params: &SinkhornParams,
    normalization: CostNormalization,
) -> Result<OtceReport> {
    if source.channels() != target.channels() {
        return Err(Error::DimensionMismatch {
            expected: source.channels(),
            got: target.channels(),
        });
    }
    let src = flatten_pixels(source, sampler)?;
    let tgt = flatten_pixels(target, target_stream(sampler))?;
    let mut report = otce_from_samples(&src, &tgt, params, normalization)?;
    report.source_id = source.task_id.to_string();
    report.target_id = target.task_id.to_string();
    report.subsample = sampler;
    Ok(report)
}

/// OTCE over already-flattened pixel samples. Ids are left empty.
pub fn otce_from_samples(
    src: &PixelSample,
    tgt: &PixelSample,
    params: &SinkhornParams,
    normalization: CostNormalization,
) -> Result<OtceReport> {
    params.validate()?;
    let mut cost = cost_matrix(src.features.view(), tgt.features.view())?;
    if normalization == CostNormalization::Max {
        let max = cost.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            cost.mapv_inplace(|c| c / max);
        }
    }
    let plan = sinkhorn(cost.view(), params)?;
    let joint = joint_label_distribution(&plan, &src.labels, &tgt.labels)?;
    Ok(OtceReport {
        source_id: String::new(),
        target_id: String::new(),
        score: otce_from_joint(&joint),
        ot_cost: plan.transport_cost(cost.view()),
        iterations_used: plan.iterations_used,
        final_marginal_error: plan.final_marginal_error,
        converged: plan.converged,
        n_source: src.len(),
        n_target: tgt.len(),
        subsample: SubsampleSpec::new(src.len().max(tgt.len()), 0),
        normalization,
    })
}
