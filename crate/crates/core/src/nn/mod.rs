//! Minimal reverse-mode autodiff engine in f64.
//!
//! Forward passes build an eager tape ([`graph::Graph`]); `backward` walks it
//! in reverse and accumulates gradients into parameter leaves. Everything is
//! single-threaded and bit-deterministic given the seeds.

pub mod adam;
pub mod graph;
pub mod gru;
pub mod init;
pub mod layers;
pub mod linalg;
pub mod params;
pub mod tensor;


pub use adam::Adam;
pub use graph::{Graph, Grads, Mode, NodeId};
pub use params::{ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;
