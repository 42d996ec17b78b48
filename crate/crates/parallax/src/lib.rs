//! Desk-scale light-field toolkit: 4D light-field containers with a bit-exact
//! file format, shift-and-sum refocusing into focal stacks, sub-aperture view
//! selection, and a two-step angular adapter that tags per-view token streams
//! with a compact angular marker before fusing them.
//!
//! The numeric substrate is a small dense-tensor library with reverse-mode
//! gradients and a finite-difference gradient oracle, so every backward rule
//! in the adapter and the toy encoder is independently checkable.

pub mod adapter;
pub mod encoder;
pub mod lightfield;
pub mod metrics;
pub mod refocus;
pub mod seeds;
pub mod tensor;

pub use adapter::{AdapterMode, AdapterParams};
pub use lightfield::{Image, LightField, SelectionStrategy, ViewCoord, ViewSelection};
pub use refocus::{FocalSlice, FocalStack};
pub use tensor::{Graph, NodeId, Tensor};
