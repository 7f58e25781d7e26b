//! Multi-dataset, multi-task longitudinal lesion segmentation at desk scale.
//!
//! The crate covers the full pipeline: synthetic longitudinal phantoms with
//! heterogeneous annotation styles, packing of records into a fixed
//! 4-channel network input, an anatomically constrained composite loss with
//! curriculum scheduling, a small 3D encoder-decoder network with four
//! sigmoid heads, a deterministic training loop with k-fold ensembles, and
//! the evaluation protocol (Dice, lesion-wise F1, volume trajectories,
//! paired t-tests).
//!
//! Data-parallel inner loops run on rayon when the `parallel` feature
//! (default) is enabled; all parallel work writes disjoint outputs or is
//! reduced in fixed order, so results are bit-identical to the sequential
//! fallback.

pub mod assembly;
pub mod error;
pub mod exec;
pub mod io;
pub mod labels;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Dtype, Volume3D};
