//! Simulation and training library for small neural networks running on
//! intermittent, energy-harvested power.
//!
//! - [`ehsim`]: harvested-power traces and capacitor storage
//! - [`devmodel`]: device profiles and the kernel energy model
//! - [`kernels`]: deterministic fixed-point and float tensor kernels
//! - [`intermittent`]: quanta sizing, task fusion, checkpoints, and the
//!   power-failure execution engine
//! - [`dynfit`]: the training core with dynamic dropout and quantization
//! - [`scheduler`]: task-graph inference with deadline/criticality priority
//! - [`nas`]: enumerate-and-filter architecture search

pub mod devmodel;
pub mod ehsim;
pub mod kernels;
pub mod intermittent;
pub mod dynfit;
pub mod scheduler;
pub mod nas;
