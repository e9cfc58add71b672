//! Dynamic token-pass vision transformer inference engine and benchmark
//! harness for semantic segmentation.
//!
//! The engine runs a ViT segmentation backbone in which tokens that an
//! auxiliary probe head already classifies confidently are halted early:
//! they skip the remaining self-attention blocks and are re-inserted into
//! the feature map at the end. Halting is controlled by a confidence
//! threshold; at threshold 1.0 the dynamic path reproduces the dense
//! model bit for bit. The crate also provides exact FLOP accounting, the
//! training losses used to fit probe heads, segmentation metrics, weight
//! and image I/O, synthetic model/scene generators, and a benchmark
//! harness with JSON/CSV reporting.

pub mod error;
pub mod flops;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod token_pass;

pub use error::{Error, Result};
pub use flops::{FlopsBreakdown, FlopsConvention};
pub use heads::{FeatureMap, ProbMap};
pub use losses::{LabelMap, LossBreakdown};
pub use metrics::SegMetrics;
pub use model::{HeadParams, LayerParams, ModelSpec, ModelWeights, TokenSequence};
pub use tensor::Matrix;
pub use token_pass::{ConfidenceMap, DecisionMask, GatherIndex};
