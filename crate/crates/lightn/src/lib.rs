//! Task-oriented point-cloud downsampling: a learnable attention-based
//! sampler with soft projection, classic sampling baselines, task-driven
//! losses, a small classification task network, and an analytic cost model.

pub mod checkpoint;
pub mod cloud;
pub mod cost;
pub mod data;
pub mod error;
pub mod io;
pub mod losses;
pub mod model;
pub mod projection;
pub mod samplers;
pub mod task;
pub mod tensor;

pub use cloud::{PointCloud, SampleIndices};
pub use error::{Error, Result};
pub use tensor::{Matrix, Tape, VarId};
