//! Minimal tensor-graph machinery: eager ops with taped reverse-mode
//! gradients, layers over a named parameter store, an AdamW optimizer, and a
//! finite-difference gradient checker.

pub mod adamw;
pub mod gradcheck;
pub mod graph;
pub mod layers;

pub use adamw::AdamW;
pub use graph::{Grads, Graph, Tensor, VarId};
pub use layers::{BatchNorm2d, BnSink, Conv2d, ConvBnSelu, Linear, ParamEntry, ParamStore};
