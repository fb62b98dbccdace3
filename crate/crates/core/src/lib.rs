//! canonica fits a spatiotemporal neural field to a single monocular video
//! clip at test time. A canonical density/color volume is shared across
//! frames; per-frame invertible coupling networks transport 3D points between
//! each frame and the canonical space. Rays rendered through the volume give
//! per-pixel color, cross-frame correspondence (dense tracks), and
//! pseudo-depth, all trained from pairwise optical flow and the frames
//! themselves.
//!
//! Modules:
//! - [`autodiff`]: reverse-mode tape and Adam.
//! - [`fields`]: positional encoding, the canonical field, per-frame
//!   invertible mapping networks, checkpoints.
//! - [`renderer`]: ray casting and quadrature compositing.
//! - [`training`]: correspondence batches, losses, optimization loop.
//! - [`scenedata`]: clip ingestion, file formats, synthetic scene generator.
//! - [`eval`]: mask-propagated tracks, tracking accuracy, depth metrics.
//! - [`cli`]: the `canonica` command-line tool.

pub mod autodiff;
pub mod cli;
pub mod eval;
pub mod fields;
pub mod renderer;
pub mod scenedata;
pub mod training;
