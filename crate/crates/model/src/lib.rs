//! Dual-head diffusion denoiser for loosely timed keyframe in-betweening:
//! network, training, sampling, long-sequence splicing and evaluation.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod longform;
pub mod net;
pub mod optim;
pub mod sampler;
pub mod schedule;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointHeader};
pub use error::{ModelError, Result};
pub use eval::{evaluate, EvalConfig, Evaluation, Generator};
pub use net::{Denoiser, Mode, NetConfig, NetOutput};
pub use sampler::{sample, SamplerConfig};
pub use schedule::{NoiseSchedule, ScheduleKind};
pub use train::{TrainConfig, Trainer};
