//! Channel-splitting post-training quantization for linear layers that see
//! both text and vision tokens.
//!
//! Input channels are partitioned into a shared main set and small
//! modality-specific outlier sets, each routed through its own invertible
//! transform before fake quantization. Low-rank branches smooth the main
//! weight and compensate the activation residual of text tokens, and a
//! straight-through gradient loop calibrates transforms and gates against
//! the full-precision output.

pub mod calibrate;
pub mod error;
pub mod eval;
pub mod io;
pub mod layer;
pub mod lowrank;
pub mod mocd;
pub mod quantizer;
pub mod synth;
pub mod tensor;
pub mod transform;

pub use calibrate::{calibrate, stability_report, CalibConfig, GradMode, LossTrace, StabilityRow};
pub use error::{Result, SplitqError};
pub use layer::{forward_reference, LayerConfig, QuantOp, SplitQLayer, Ste};
pub use lowrank::{build_branch, rank_for_ratio, truncated_svd, LowRankBranch, SvdFactors};
pub use mocd::{build_partition, jaccard, ChannelPartition, MocdConfig};
pub use quantizer::{Granularity, Precision, QuantParams, QuantSpec};
pub use synth::{generate, generate_weight, SynthConfig, WeightConfig};
pub use tensor::{ActivationBatch, Matrix, ModalityTag};
pub use transform::{Transform, TransformKind};
