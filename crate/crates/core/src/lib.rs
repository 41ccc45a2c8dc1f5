//! Self-supervised inertial odometry.
//!
//! LiDAR scan registration and a pose graph turn raw scans into relative-motion
//! pseudo-labels; a small correction model learns IMU corrections and
//! uncertainties from them, weighted so that rare motion patterns are not
//! drowned out; at inference the learned uncertainties and registration overlap
//! scores set the weights of an adaptive pose graph.
//!
//! Module map:
//!
//! | module        | contents                                                   |
//! |---------------|------------------------------------------------------------|
//! | [`geom`]        | SO(3)/SE(3) exponential, logarithm, composition            |
//! | [`imu`]         | segments, preintegration, state and covariance propagation |
//! | [`correction`]  | correction model, losses, trainer, checkpoints             |
//! | [`registration`]| k-d tree, point-to-point ICP, overlap scores, cloud files  |
//! | [`pgo`]         | pose graph costs and Levenberg-Marquardt                   |
//! | [`pseudolabel`] | ICP/PGO selection and supervisory state propagation        |
//! | [`motion`]      | descriptors, diagonal GMM with BIC, class-balanced weights |
//! | [`eval`]        | APE, reinitialized RPE, TUM trajectories                   |

pub mod correction;
pub mod error;
pub mod eval;
pub mod geom;
pub mod imu;
pub mod kv;
pub mod motion;
pub mod pgo;
pub mod pseudolabel;
pub mod registration;

pub use error::{Error, Result};
