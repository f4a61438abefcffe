//! Training and evaluation core for blind video quality assessment.
//!
//! The crate provides a small reverse-mode autodiff engine, the pairwise
//! pre-training objective, a GRU temporal head with hysteresis pooling,
//! differentiable correlation losses, feature I/O and fusion, and the
//! evaluation protocol used to select and compare models.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod head;
pub mod io;
pub mod pretrain;
pub mod ranking;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, ErrorKind, Result};
pub use eval::{EvalReport, Scored};
pub use fusion::{FeatureSequence, Stream, FUSED_CHANNELS, MOTION_CHANNELS, SPATIAL_CHANNELS};
pub use head::{HeadConfig, HeadParams, PoolingConfig};
pub use io::{Manifest, Split, TensorFile, VideoRecord};
pub use pretrain::{MlpQualityModel, PairRecord, PairSample, QualityModel};
pub use ranking::{LogisticParams, SoftRankConfig};
pub use tensor::Tensor;
pub use train::{LabeledVideo, ModelParams, PretrainConfig, TrainConfig};
