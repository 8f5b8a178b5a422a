//! Point cloud frame interpolation with a pyramid motion-structure network.
//!
//! The crate carries its own reverse-mode autodiff engine ([`tensor`]), the
//! point-set kernels the network is built on ([`kernels`]), the network
//! itself ([`msformer`], [`pyramid`], [`refine`]), its training objective
//! ([`losses`]), evaluation metrics ([`metrics`]), a synthetic scene
//! generator ([`synth`]) and the training/evaluation runtime.

pub mod checkpoint;
pub mod cloud;
pub mod config;
pub mod error;
pub mod eval;
pub mod io;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod msformer;
pub mod nn;
pub mod oracle;
pub mod params;
pub mod pyramid;
pub mod refine;
pub mod selfcheck;
pub mod synth;
pub mod tensor;
pub mod train;

pub use cloud::{Direction, Point, PointCloud, SceneFlow};
pub use error::{Error, Result};
