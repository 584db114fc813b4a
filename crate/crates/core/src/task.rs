//! Task data model: descriptors, label masks and per-pixel feature maps.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array3, Array4, ArrayView2, ArrayView4, Axis};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};

/// Canonical form of a modality string: trimmed and ASCII-uppercased.
pub fn canonical_modality(raw: &str) -> String {
    raw.trim().to_ascii_uppercase()
}

fn de_modality<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<String, D::Error> {
    String::deserialize(d).map(|s| canonical_modality(&s))
}

/// Identity and prior-knowledge metadata of a segmentation task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDescriptor {
    pub task_id: String,
    pub roi_class: String,
    #[serde(deserialize_with = "de_modality")]
    modality: String,
    pub dataset: String,
    #[serde(default)]
    pub partition: Option<String>,
}

impl TaskDescriptor {
    pub fn new(
        task_id: impl Into<String>,
        roi_class: impl Into<String>,
        modality: &str,
        dataset: impl Into<String>,
    ) -> Result<Self> {
        let task_id = task_id.into();
        if task_id.trim().is_empty() {
            return Err(Error::InvalidParams("task_id must be non-empty".into()));
        }
        Ok(Self {
            task_id,
            roi_class: roi_class.into(),
            modality: canonical_modality(modality),
            dataset: dataset.into(),
            partition: None,
        })
    }

    pub fn with_partition(mut self, partition: impl Into<String>) -> Self {
        self.partition = Some(partition.into());
        self
    }

    /// Parses the `Roi-Partition-Modality` naming convention, e.g. `ED-14-T1`.
    /// A two-part id (`ED-T1`) is read as roi and modality without a partition.
    pub fn from_task_name(name: &str, dataset: impl Into<String>) -> Result<Self> {
        let parts: Vec<&str> = name.trim().split('-').collect();
        let desc = match parts.as_slice() {
            [roi, modality] => Self::new(name.trim(), *roi, modality, dataset)?,
            [roi, partition, modality] => {
                Self::new(name.trim(), *roi, modality, dataset)?.with_partition(*partition)
            }
            _ => {
                return Err(Error::InvalidParams(format!(
                    "task name {name:?} is not Roi-Partition-Modality"
                )))
            }
        };
        Ok(desc)
    }

    pub fn modality(&self) -> &str {
        &self.modality
    }

    pub fn same_modality(&self, other: &TaskDescriptor) -> bool {
        self.modality == other.modality
    }
}

impl fmt::Display for TaskDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.task_id)
    }
}

/// A stack of 2-D class-index masks sharing one height and width.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMaskSet {
    pub task_id: String,
    masks: Array3<u8>,
    pub positive_class: u8,
}

impl LabelMaskSet {
    /// `masks` is laid out `[n_samples, height, width]`.
    pub fn new(task_id: impl Into<String>, masks: Array3<u8>, positive_class: u8) -> Self {
        Self {
            task_id: task_id.into(),
            masks: masks.as_standard_layout().into_owned(),
            positive_class,
        }
    }

    pub fn n_samples(&self) -> usize {
        self.masks.len_of(Axis(0))
    }

    pub fn height(&self) -> usize {
        self.masks.len_of(Axis(1))
    }

    pub fn width(&self) -> usize {
        self.masks.len_of(Axis(2))
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.masks.dim();
        (s.0, s.1, s.2)
    }

    pub fn masks(&self) -> &Array3<u8> {
        &self.masks
    }

    pub fn mask(&self, index: usize) -> ArrayView2<'_, u8> {
        self.masks.index_axis(Axis(0), index)
    }

    /// Row-major flat view of every label, sample-major.
    pub fn as_slice(&self) -> &[u8] {
        self.masks
            .as_slice()
            .expect("label masks are kept in standard layout")
    }

    /// Concatenates several sets along the sample axis. All sets must share H and W.
    pub fn concat(task_id: impl Into<String>, sets: &[&LabelMaskSet]) -> Result<Self> {
        let first = sets
            .first()
            .ok_or_else(|| Error::EmptyLabelSet("<pooled>".into()))?;
        let (h, w) = (first.height(), first.width());
        for s in sets {
            if (s.height(), s.width()) != (h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "cannot pool {}x{} masks of {} with {}x{} masks of {}",
                    s.height(),
                    s.width(),
                    s.task_id,
                    h,
                    w,
                    first.task_id
                )));
            }
        }
        let views: Vec<_> = sets.iter().map(|s| s.masks.view()).collect();
        let masks = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        Ok(Self::new(task_id, masks, first.positive_class))
    }
}

/// Borrowed, validated pairing of a `[n, H, W, C]` feature map with its labels.
#[derive(Clone, Copy, Debug)]
pub struct PixelFeatureSet<'a> {
    pub task_id: &'a str,
    features: ArrayView4<'a, f32>,
    labels: &'a LabelMaskSet,
}

impl<'a> PixelFeatureSet<'a> {
    pub fn new(
        task_id: &'a str,
        features: ArrayView4<'a, f32>,
        labels: &'a LabelMaskSet,
    ) -> Result<Self> {
        check_feature_shape(features.dim(), labels)?;
        check_finite(features.iter().copied())?;
        Ok(Self {
            task_id,
            features,
            labels,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.labels.n_samples()
    }

    pub fn height(&self) -> usize {
        self.labels.height()
    }

    pub fn width(&self) -> usize {
        self.labels.width()
    }

    pub fn channels(&self) -> usize {
        self.features.len_of(Axis(3))
    }

    pub fn n_pixels(&self) -> usize {
        self.n_samples() * self.height() * self.width()
    }

    pub fn features(&self) -> ArrayView4<'a, f32> {
        self.features
    }

    pub fn labels(&self) -> &'a LabelMaskSet {
        self.labels
    }

    /// Feature vector of the pixel at row-major flat index `i`.
    pub fn pixel(&self, i: usize) -> impl Iterator<Item = f64> + 'a {
        let (h, w) = (self.height(), self.width());
        let (n, rem) = (i / (h * w), i % (h * w));
        let lane = self.features.slice_move(ndarray::s![n, rem / w, rem % w, ..]);
        lane.into_iter().map(|&v| f64::from(v))
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels.as_slice()[i]
    }
}

pub(crate) fn check_feature_shape(
    dim: (usize, usize, usize, usize),
    labels: &LabelMaskSet,
) -> Result<()> {
    let (n, h, w, _) = dim;
    if (n, h, w) != labels.shape() {
        let (ln, lh, lw) = labels.shape();
        return Err(Error::ShapeMismatch(format!(
            "features [{n},{h},{w},_] vs labels [{ln},{lh},{lw}] for {}",
            labels.task_id
        )));
    }
    Ok(())
}

pub(crate) fn check_finite(values: impl Iterator<Item = f32>) -> Result<()> {
    for (index, v) in values.enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFiniteFeature { index });
        }
    }
    Ok(())
}

/// Feature map exported from a task's own model, with a free-text provenance note.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Array4<f32>,
    pub extractor: String,
}

/// Where the target-side features of a source/target evaluation came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetFeatureOrigin {
    /// The source bundle shipped its model's features on the target images.
    Transfer,
    /// No transfer features were shipped; the target bundle's own features are used.
    TargetBundle,
}

/// Everything known about one task: metadata, labels, and optional features.
///
/// `transfer` holds features the task's model produced on *other* tasks' images,
/// keyed by the other task's id. Each entry is `[n, H, W, C]` over that task's samples.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskBundle {
    pub descriptor: TaskDescriptor,
    pub labels: LabelMaskSet,
    pub features: Option<FeatureMap>,
    pub transfer: BTreeMap<String, Array4<f32>>,
}

impl TaskBundle {
    pub fn new(
        descriptor: TaskDescriptor,
        labels: LabelMaskSet,
        features: Option<FeatureMap>,
    ) -> Result<Self> {
        if labels.task_id != descriptor.task_id {
            return Err(Error::InvalidParams(format!(
                "labels belong to {} but descriptor is {}",
                labels.task_id, descriptor.task_id
            )));
        }
        if let Some(f) = &features {
            check_feature_shape(f.data.dim(), &labels)?;
            check_finite(f.data.iter().copied())?;
        }
        Ok(Self {
            descriptor,
            labels,
            features: features.map(|mut f| {
                f.data = f.data.as_standard_layout().into_owned();
                f
            }),
            transfer: BTreeMap::new(),
        })
    }

    /// Attaches this task's model features computed on `target_id`'s images.
    pub fn with_transfer(mut self, target_id: impl Into<String>, data: Array4<f32>) -> Result<Self> {
        self.add_transfer(target_id, data)?;
        Ok(self)
    }

    pub fn add_transfer(&mut self, target_id: impl Into<String>, data: Array4<f32>) -> Result<()> {
        if let Some(own) = &self.features {
            let (c_own, c_new) = (own.data.len_of(Axis(3)), data.len_of(Axis(3)));
            if c_own != c_new {
                return Err(Error::DimensionMismatch {
                    expected: c_own,
                    got: c_new,
                });
            }
        }
        check_finite(data.iter().copied())?;
        self.transfer
            .insert(target_id.into(), data.as_standard_layout().into_owned());
        Ok(())
    }

    pub fn task_id(&self) -> &str {
        &self.descriptor.task_id
    }

    pub fn channels(&self) -> Option<usize> {
        self.features.as_ref().map(|f| f.data.len_of(Axis(3)))
    }

    /// This task's own features paired with its own labels.
    pub fn feature_set(&self) -> Result<PixelFeatureSet<'_>> {
        let f = self
            .features
            .as_ref()
            .ok_or_else(|| Error::MissingFeatures(self.task_id().to_string()))?;
        PixelFeatureSet::new(self.task_id(), f.data.view(), &self.labels)
    }

    /// Features of this task's model on `target`'s images, aligned with the target labels.
    ///
    /// Falls back to the target's own features when no transfer map was shipped,
    /// which is only meaningful when all bundles share one feature extractor.
    pub fn features_on<'a>(
        &'a self,
        target: &'a TaskBundle,
    ) -> Result<(PixelFeatureSet<'a>, TargetFeatureOrigin)> {
        match self.transfer.get(target.task_id()) {
            Some(data) => Ok((
                PixelFeatureSet::new(target.task_id(), data.view(), &target.labels)?,
                TargetFeatureOrigin::Transfer,
            )),
            None => Ok((target.feature_set()?, TargetFeatureOrigin::TargetBundle)),
        }
    }
}
