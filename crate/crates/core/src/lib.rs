//! Chunked sequence-parallel transformer mechanics, verified at desk scale.
//!
//! The library simulates the moving parts of pipelined long-context
//! transformer training on one machine: chunked online causal attention with
//! a host-offload store, per-chunk Alltoall layout transforms across
//! simulated ranks, an end-to-end transformer block whose chunked forward
//! and backward are checked against monolithic oracles, a closed-form
//! activation/model-state memory model, and a discrete-event simulator of
//! the compute/HtoD/DtoH pipeline that reports makespans and MFU.
//!
//! All functional numerics are f64 with fixed summation orders, so chunked
//! and monolithic paths can be compared at tight tolerances. Training dtypes
//! enter only as byte widths in the memory model and the simulator.

pub mod attention;
pub mod block;
pub mod config;
pub mod error;
pub mod layout;
pub mod memory;
pub mod rng;
pub mod sim;
pub mod store;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{matmul, row_softmax_stable, ChunkTensor, Dims, Layout, Matrix};
