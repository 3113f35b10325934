//! Mixture-of-experts diffusion policy for a toy multi-stage manipulation
//! task.
//!
//! The crate is organised bottom-up:
//!
//! - [`diffkit`]: tensors, tape-based reverse-mode gradients, Adam.
//! - [`blockworld`]: deterministic 2-D pick-and-place simulator with a
//!   scripted demonstrator, stage labels and a grasp-reset disturbance.
//! - [`moe`]: softmax router, sparse top-k expert combination and the
//!   load-balancing / entropy auxiliary losses.
//! - [`policy`]: observation encoder, noise schedule, noise-prediction
//!   network and the receding-horizon sampler.
//! - [`trainer`]: datasets, file formats, the composite training loop,
//!   evaluation and the auxiliary-loss ablation.
//! - [`steer`]: gate telemetry, expert/stage calibration, router overrides,
//!   subtask reordering and the live steering server.

pub mod blockworld;
pub mod diffkit;
pub mod error;
pub mod moe;
pub mod policy;
pub mod seeding;
pub mod steer;
pub mod trainer;

pub use error::{Error, FormatError, Result};
