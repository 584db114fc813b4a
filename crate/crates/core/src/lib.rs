//! Source-task selection for transfer learning in segmentation.
//!
//! Prior-knowledge filters (modality match, RoI shape similarity) narrow a pool
//! of source tasks; pixel-wise H-score or OTCE then ranks the survivors.
//! Rankings are compared with Spearman's footrule.

pub mod bundle;
pub mod error;
pub mod hscore;
pub mod otce;
pub mod pipeline;
pub mod ranking;
pub mod sampling;
pub mod ssim;
pub mod synth;
pub mod task;

pub use bundle::{load_bundle, load_pool, write_bundle};
pub use error::{Error, Result};
pub use hscore::{hscore_classification, hscore_segmentation, HScoreParams, HScoreReport};
pub use otce::{
    cost_matrix, joint_label_distribution, otce, otce_from_joint, sinkhorn, CostNormalization,
    JointLabelDistribution, OtceReport, SinkhornParams, TransportPlan,
};
pub use ranking::{build_ranking, footrule_full, footrule_topk, FootruleReport, Ranking};
pub use sampling::{flatten_pixels, PixelSample, SeededRng, SubsampleSpec};
pub use ssim::{roi_sim, ssim_global, PairingMode, RoiSimOptions, RoiSimReport, SsimParams};
pub use task::{LabelMaskSet, PixelFeatureSet, TaskBundle, TaskDescriptor};
