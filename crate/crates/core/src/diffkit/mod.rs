//! Minimal differentiable-computation substrate: dense `f64` tensors, a
//! closed set of differentiable operations recorded on a tape, reverse-mode
//! gradients, and Adam.

mod nn;
mod optim;
mod params;
mod tape;
mod tensor;

pub use nn::{Linear, Mlp};
pub use optim::{adam_step, adam_step_store, AdamConfig, AdamState, Ema};
pub use params::{Graph, ParamId, ParamStore};
pub use tape::{matmul_values, ElementwiseKind, Tape, Var};
pub use tensor::{pairwise_sum, sinusoidal_embedding, Tensor};
