//! Motion data model and the non-learned parts of loosely timed keyframe
//! in-betweening: kinematics, time warping, keyframe observations, training
//! pair synthesis and evaluation metrics.

pub mod datagen;
pub mod error;
pub mod io;
pub mod metrics;
pub mod motion;
pub mod observation;
pub mod skeleton;
pub mod warp;

pub use error::{Error, Result};
pub use motion::{Motion, Pose, PoseLayout};
pub use observation::{infill_linear, place_on_timeline, Keyframe, KeyframeSet, ObservationSignal};
pub use skeleton::Skeleton;
pub use warp::{apply_warp, WarpFunction};
