//! Hierarchical architecture search for deformable image registration.
//!
//! The crate is organized around a small differentiable tensor engine
//! ([`ndtensor`]), diffeomorphic registration math ([`regmath`]), a relaxed
//! supernet over network topologies and convolutional cells
//! ([`searchspace`]), alternating bi-level optimization ([`bilevel`]),
//! discrete-architecture decoding and retraining ([`decode`]), and a
//! deterministic synthetic data generator ([`synthdata`]).

pub mod binio;
pub mod ndtensor;
pub mod params;
pub mod regmath;
pub mod searchspace;
pub mod bilevel;
pub mod decode;
pub mod synthdata;
pub mod rng;

pub use ndtensor::{Dtype, Scalar, Tape, Tensor, TensorError};
