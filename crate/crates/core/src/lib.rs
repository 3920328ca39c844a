//! Distance-gated multi-branch detection-by-segmentation for 3D volumes.
//!
//! The numeric core is generic over the floating point type (see
//! [`Real`]); the aliases below fix the precision used by the on-disk
//! formats and the training pipeline.

pub mod edt;
pub mod error;
pub mod gating;
pub mod inference;
pub mod instances;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod volume;

pub use edt::{boundary_voxels, edt_bruteforce, edt_exact, DistanceMap};
pub use error::{Error, Result};
pub use gating::{binary_gate, soft_gate, Branch, GatingParams, GatingWeights};
pub use inference::{fuse, sliding_window_predict, WindowConfig};
pub use instances::{extract_instances, match_hits, InstancePrediction, MatchResult};
pub use loss::{gated_nll, gated_nll_grad, GatedLossInput};
pub use metrics::{evaluate, EvalReport};
pub use model::{backward, forward, forward_cached, init_params, MomentumSgd, SegmenterConfig, SegmenterParams};
pub use phantom::{generate_case, generate_dataset, PhantomConfig};
pub use pipeline::{prepare_case, sample_crops, CaseRecord, CropConfig, TrainingCrop};
pub use scalar::Real;
pub use volume::{BinaryMask, LabelVolume, Volume, VolumeGrid};

/// 32-bit scalar volume: CT, PET and probability maps.
pub type ScalarVolume = Volume<f32>;
pub type ScalarVolume64 = Volume<f64>;
pub type GatingWeights32 = GatingWeights<f32>;
pub type GatingWeights64 = GatingWeights<f64>;
pub type Params32 = SegmenterParams<f32>;
pub type Params64 = SegmenterParams<f64>;
pub type FeatureMap32 = model::FeatureMap<f32>;
