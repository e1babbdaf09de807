//! Safe imitation learning of spline-parametrized driving plans.
//!
//! A shallow policy network maps lane and lead-vehicle features to the free
//! control points of a cubic B-spline trajectory. Training adds a softplus
//! barrier on those control points to the usual imitation loss, so that the
//! convex hull of the plan (and with it the whole trajectory) stays inside the
//! lane and behind the lead vehicle. The crate also contains everything needed
//! to exercise the method end to end: a synthetic expert and log pipeline, a
//! kinematic closed-loop simulator with a safety monitor, a PID/Pure Pursuit
//! tracker and the experiment drivers used by the `safeil` command line tool.

pub mod config;
pub mod datapipe;
pub mod error;
pub mod experiment;
pub mod geom;
pub mod losses;
pub mod policy;
pub mod sim;
pub mod splines;
pub mod svg;
pub mod tracker;
pub mod training;

pub use error::{Error, Result};
