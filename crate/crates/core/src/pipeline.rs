//! Source selection: modality filter, RoI filter, then a transferability ranking
//! (guided path), or the metric applied to the whole pool (baseline path).
//!
//! RoI similarities and per-source scores come from pluggable providers so that
//! externally computed numbers can drive the same ranking logic as live metrics.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hscore::{hscore_segmentation, HScoreParams};
use crate::otce::{otce, CostNormalization, SinkhornParams};
use crate::ranking::{build_ranking, Direction, Ranking};
use crate::sampling::SubsampleSpec;
use crate::ssim::{roi_sim, RoiSimOptions};
use crate::task::{LabelMaskSet, TargetFeatureOrigin, TaskBundle, TaskDescriptor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionPath {
    Guided,
    Baseline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    HScore,
    Otce,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::HScore => "hscore",
            Metric::Otce => "otce",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoMatchPolicy {
    #[default]
    Error,
    FallbackAll,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelectionConfig {
    pub path: SelectionPath,
    pub metric: Metric,
    pub roi_keep_classes: usize,
    pub top_k: usize,
    pub no_modality_match_policy: NoMatchPolicy,
    pub hscore: HScoreParams,
    pub sinkhorn: SinkhornParams,
    pub cost_normalization: CostNormalization,
    pub sampler: SubsampleSpec,
    pub roi: RoiSimOptions,
}

impl SelectionConfig {
    pub fn new(path: SelectionPath, metric: Metric) -> Self {
        Self {
            path,
            metric,
            roi_keep_classes: 1,
            top_k: 1,
            no_modality_match_policy: NoMatchPolicy::Error,
            hscore: HScoreParams::default(),
            sinkhorn: SinkhornParams::default(),
            cost_normalization: CostNormalization::None,
            sampler: SubsampleSpec::default(),
            roi: RoiSimOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::InvalidParams("top_k must be at least 1".into()));
        }
        if self.roi_keep_classes == 0 {
            return Err(Error::InvalidParams("roi_keep_classes must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalityMatch {
    pub tasks: Vec<TaskDescriptor>,
    /// No source shared the target modality and the whole pool was kept.
    pub fallback: bool,
}

/// Sources sharing the target's canonical modality, in pool order.
pub fn modality_filter(
    pool: &[TaskDescriptor],
    target: &TaskDescriptor,
    policy: NoMatchPolicy,
) -> Result<ModalityMatch> {
    if pool.is_empty() {
        return Err(Error::NoCompatibleSource(format!("{} (empty pool)", target.modality())));
    }
    let tasks: Vec<TaskDescriptor> = pool.iter().filter(|d| d.same_modality(target)).cloned().collect();
    if !tasks.is_empty() {
        return Ok(ModalityMatch { tasks, fallback: false });
    }
    match policy {
        NoMatchPolicy::Error => Err(Error::NoCompatibleSource(target.modality().to_string())),
        NoMatchPolicy::FallbackAll => Ok(ModalityMatch {
            tasks: pool.to_vec(),
            fallback: true,
        }),
    }
}

/// Similarity between the masks of one RoI class and the target masks.
pub trait RoiSimProvider: Sync {
    fn class_similarity(&self, roi_class: &str, members: &[&TaskDescriptor], target: &TaskDescriptor) -> Result<f64>;
}

/// Fixed per-class values, e.g. numbers reported elsewhere.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoiSimTable(pub BTreeMap<String, f64>);

impl RoiSimProvider for RoiSimTable {
    fn class_similarity(&self, roi_class: &str, _: &[&TaskDescriptor], _: &TaskDescriptor) -> Result<f64> {
        self.0
            .get(roi_class)
            .copied()
            .ok_or_else(|| Error::MissingLabels(format!("RoI class {roi_class}")))
    }
}

/// Pools the masks of every member of a class and scores them against the target masks.
pub struct PooledLabelSim<'a> {
    labels: HashMap<&'a str, &'a LabelMaskSet>,
    target: &'a LabelMaskSet,
    opts: RoiSimOptions,
}

impl<'a> PooledLabelSim<'a> {
    pub fn new(pool: &'a [TaskBundle], target: &'a TaskBundle, opts: RoiSimOptions) -> Self {
        Self {
            labels: pool.iter().map(|b| (b.task_id(), &b.labels)).collect(),
            target: &target.labels,
            opts,
        }
    }
}

impl RoiSimProvider for PooledLabelSim<'_> {
    fn class_similarity(&self, roi_class: &str, members: &[&TaskDescriptor], _: &TaskDescriptor) -> Result<f64> {
        let sets = members
            .iter()
            .map(|d| {
                self.labels
                    .get(d.task_id.as_str())
                    .copied()
                    .ok_or_else(|| Error::MissingLabels(d.task_id.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        let pooled = LabelMaskSet::concat(roi_class, &sets)?;
        Ok(roi_sim(&pooled, self.target, &self.opts)?.score)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoiFilterResult {
    pub tasks: Vec<TaskDescriptor>,
    /// Empty when the filter had nothing to decide (no more classes than `keep`).
    pub roi_sim_by_class: BTreeMap<String, f64>,
}

/// Keeps every source of the `keep` RoI classes most similar to the target.
/// Equal similarities are ordered by class name.
pub fn roi_filter(
    subset1: &[TaskDescriptor],
    target: &TaskDescriptor,
    keep: usize,
    provider: &dyn RoiSimProvider,
) -> Result<RoiFilterResult> {
    if keep == 0 {
        return Err(Error::InvalidParams("roi_keep_classes must be at least 1".into()));
    }
    let mut classes: BTreeMap<&str, Vec<&TaskDescriptor>> = BTreeMap::new();
    for d in subset1 {
        classes.entry(d.roi_class.as_str()).or_default().push(d);
    }
    if classes.len() <= keep {
        return Ok(RoiFilterResult {
            tasks: subset1.to_vec(),
            roi_sim_by_class: BTreeMap::new(),
        });
    }
    let mut sims = Vec::with_capacity(classes.len());
    for (class, members) in &classes {
        sims.push((*class, provider.class_similarity(class, members, target)?));
    }
    // classes iterate in name order, so a stable sort settles ties by name
    sims.sort_by(|a, b| b.1.total_cmp(&a.1));
    let kept: Vec<&str> = sims.iter().take(keep).map(|(c, _)| *c).collect();
    Ok(RoiFilterResult {
        tasks: subset1
            .iter()
            .filter(|d| kept.contains(&d.roi_class.as_str()))
            .cloned()
            .collect(),
        roi_sim_by_class: sims.into_iter().map(|(c, s)| (c.to_string(), s)).collect(),
    })
}

/// Score of one source for the target, with whatever diagnostics the metric produced.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SourceScore {
    pub task_id: String,
    pub metric: Metric,
    pub score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skipped_pixels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_marginal_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations_used: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_features: Option<TargetFeatureOrigin>,
}

impl SourceScore {
    pub fn plain(task_id: impl Into<String>, metric: Metric, score: f64) -> Self {
        Self {
            task_id: task_id.into(),
            metric,
            score,
            skipped_pixels: None,
            converged: None,
            final_marginal_error: None,
            iterations_used: None,
            target_features: None,
        }
    }
}

pub trait ScoreProvider: Sync {
    fn score(&self, source: &TaskDescriptor, target: &TaskDescriptor, metric: Metric) -> Result<SourceScore>;
}

/// Precomputed scores keyed by task id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreTable(pub HashMap<String, f64>);

impl ScoreTable {
    pub fn from_rows(rows: &[(String, f64)]) -> Result<Self> {
        let mut map = HashMap::with_capacity(rows.len());
        for (id, s) in rows {
            if map.insert(id.clone(), *s).is_some() {
                return Err(Error::DuplicateTaskId(id.clone()));
            }
        }
        Ok(Self(map))
    }
}

impl ScoreProvider for ScoreTable {
    fn score(&self, source: &TaskDescriptor, _: &TaskDescriptor, metric: Metric) -> Result<SourceScore> {
        let s = self
            .0
            .get(&source.task_id)
            .copied()
            .ok_or_else(|| Error::UnknownTask(source.task_id.clone()))?;
        Ok(SourceScore::plain(source.task_id.clone(), metric, s))
    }
}

/// Computes H-score or OTCE from the feature maps in the bundles.
pub struct ComputedScores<'a> {
    bundles: HashMap<&'a str, &'a TaskBundle>,
    target: &'a TaskBundle,
    hscore: HScoreParams,
    sinkhorn: SinkhornParams,
    normalization: CostNormalization,
    sampler: SubsampleSpec,
}

impl<'a> ComputedScores<'a> {
    pub fn new(pool: &'a [TaskBundle], target: &'a TaskBundle, cfg: &SelectionConfig) -> Self {
        Self {
            bundles: pool.iter().map(|b| (b.task_id(), b)).collect(),
            target,
            hscore: cfg.hscore,
            sinkhorn: cfg.sinkhorn,
            normalization: cfg.cost_normalization,
            sampler: cfg.sampler,
        }
    }
}

/// Scores one source bundle against a target bundle.
pub fn score_pair(
    source: &TaskBundle,
    target: &TaskBundle,
    metric: Metric,
    hscore: &HScoreParams,
    sinkhorn: &SinkhornParams,
    normalization: CostNormalization,
    sampler: SubsampleSpec,
) -> Result<SourceScore> {
    let (on_target, origin) = source.features_on(target)?;
    let mut out = SourceScore::plain(source.task_id(), metric, 0.0);
    out.target_features = Some(origin);
    match metric {
        Metric::HScore => {
            let rep = hscore_segmentation(source.task_id(), &on_target, hscore)?;
            out.score = rep.score;
            out.skipped_pixels = Some(rep.skipped_pixels);
        }
        Metric::Otce => {
            let own = source.feature_set()?;
            let rep = otce(&own, &on_target, sampler, sinkhorn, normalization)?;
            out.score = rep.score;
            out.converged = Some(rep.converged);
            out.final_marginal_error = Some(rep.final_marginal_error);
            out.iterations_used = Some(rep.iterations_used);
        }
    }
    Ok(out)
}

impl ScoreProvider for ComputedScores<'_> {
    fn score(&self, source: &TaskDescriptor, _: &TaskDescriptor, metric: Metric) -> Result<SourceScore> {
        let bundle = self
            .bundles
            .get(source.task_id.as_str())
            .ok_or_else(|| Error::MissingFeatures(source.task_id.clone()))?;
        score_pair(
            bundle,
            self.target,
            metric,
            &self.hscore,
            &self.sinkhorn,
            self.normalization,
            self.sampler,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelectionReport {
    pub target_id: String,
    pub subset1: Vec<String>,
    pub subset2: Vec<String>,
    pub modality_fallback: bool,
    pub roi_sim_by_class: BTreeMap<String, f64>,
    pub final_ranking: Ranking,
    pub top_k: Vec<String>,
    pub per_source_scores: Vec<SourceScore>,
    pub config: SelectionConfig,
}

fn ids(tasks: &[TaskDescriptor]) -> Vec<String> {
    tasks.iter().map(|d| d.task_id.clone()).collect()
}

/// Runs either path of the selection framework over descriptors, with RoI
/// similarities and scores supplied by the given providers.
pub fn select(
    pool: &[TaskDescriptor],
    target: &TaskDescriptor,
    cfg: &SelectionConfig,
    roi: &dyn RoiSimProvider,
    scores: &dyn ScoreProvider,
) -> Result<SelectionReport> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::NoCompatibleSource(format!("{} (empty pool)", target.modality())));
    }
    let mut seen = std::collections::HashSet::new();
    for d in pool {
        if !seen.insert(d.task_id.as_str()) {
            return Err(Error::DuplicateTaskId(d.task_id.clone()));
        }
    }

    let (subset1, subset2, modality_fallback, roi_sim_by_class) = match cfg.path {
        SelectionPath::Baseline => (pool.to_vec(), pool.to_vec(), false, BTreeMap::new()),
        SelectionPath::Guided => {
            let m = modality_filter(pool, target, cfg.no_modality_match_policy)?;
            let r = roi_filter(&m.tasks, target, cfg.roi_keep_classes, roi)?;
            (m.tasks, r.tasks, m.fallback, r.roi_sim_by_class)
        }
    };

    let per_source_scores: Vec<SourceScore> = subset2
        .par_iter()
        .map(|d| scores.score(d, target, cfg.metric))
        .collect::<Result<_>>()?;
    let pairs: Vec<(String, f64)> = per_source_scores
        .iter()
        .map(|s| (s.task_id.clone(), s.score))
        .collect();
    let final_ranking = build_ranking(&pairs, Direction::HigherIsBetter)?;
    let top_k = final_ranking.top(cfg.top_k).into_iter().map(String::from).collect();

    Ok(SelectionReport {
        target_id: target.task_id.clone(),
        subset1: ids(&subset1),
        subset2: ids(&subset2),
        modality_fallback,
        roi_sim_by_class,
        final_ranking,
        top_k,
        per_source_scores,
        config: cfg.clone(),
    })
}

/// [`select`] with RoI similarities from pooled masks and scores computed from features.
pub fn select_bundles(pool: &[TaskBundle], target: &TaskBundle, cfg: &SelectionConfig) -> Result<SelectionReport> {
    let descriptors: Vec<TaskDescriptor> = pool.iter().map(|b| b.descriptor.clone()).collect();
    let roi = PooledLabelSim::new(pool, target, cfg.roi);
    let scores = ComputedScores::new(pool, target, cfg);
    select(&descriptors, &target.descriptor, cfg, &roi, &scores)
}
