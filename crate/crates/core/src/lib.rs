//! A fully differentiable 2D multi-agent driving simulator.
//!
//! The crate combines:
//!
//! - [`kinematics`]: the kinematic bicycle model and alternative action
//!   spaces, differentiable end to end;
//! - [`fitting`]: recovery of bicycle actions from recorded trajectories and
//!   per-vehicle rear-axle grid search;
//! - [`rasterizer`]: soft (differentiable) and hard ego-centered birdview
//!   rendering;
//! - [`model`]: a small conditional variational recurrent driver model;
//! - [`sim`]: joint multi-agent rollout and variational training;
//! - [`metrics`]: displacement-error and diversity metrics;
//! - [`io`]: track/map ingestion, synthetic datasets, and result export;
//!
//! all built on [`autodiff`], a minimal reverse-mode tape over dense tensors.

pub mod autodiff;
pub mod fitting;
pub mod geom;
pub mod io;
pub mod kinematics;
pub mod metrics;
pub mod model;
pub mod rasterizer;
pub mod rng;
pub mod scene;
pub mod sim;
pub mod suites;
