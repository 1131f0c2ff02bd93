//! Video object segmentation by long/short-term similarity matching.
//!
//! Given the object labels for the first frame of a clip, the engine
//! propagates per-object masks through the remaining frames:
//!
//! 1. [`encoder`] extracts multi-stride features and two anisotropic
//!    convolution branches produce global/local matching features,
//! 2. [`matching`] correlates current-frame features against the first
//!    frame (everywhere) and the previous frame (inside a spatial window),
//!    keeping the top-N gated scores per pixel,
//! 3. [`decoder`] fuses similarity maps, the previous mask and encoder
//!    features, then upsamples through two refine stages to a
//!    full-resolution probability map,
//! 4. [`pipeline`] runs the per-frame, per-object loop and merges objects,
//! 5. [`metrics`] scores results under the DAVIS J/F protocol.
//!
//! Everything runs on CPU in f32. Kernels parallelize over independent
//! output elements, so parallel and serial runs are bit-identical.

pub mod aic;
pub mod dataio;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod mask;
pub mod matching;
pub mod metrics;
pub mod numerics;
pub mod oracle;
pub mod pipeline;
pub mod selftest;
pub mod synthetic;

pub use dataio::{SequenceHandle, WeightsContainer};
pub use decoder::{DecoderInput, DecoderParams, ProbabilityMask};
pub use encoder::{CropRecord, EncoderFeatures, EncoderParams, FeatureMap, MatchFeatures};
pub use error::{Error, Result};
pub use mask::{BinaryMask, LabelMap};
pub use matching::{GateMask, MatchConfig, SimilarityMap};
pub use metrics::EvalReport;
pub use numerics::{ConvSpec, Tensor};
pub use pipeline::{
    AblationConfig, ModelParams, PipelineConfig, PropagationState, RunCounters, StageCounters,
};
