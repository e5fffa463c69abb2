//! Sparse non-local attention for 2D feature maps.
//!
//! The crate provides a dense non-local block ([`nonlocal`]) and a sparse
//! variant ([`sparse`]) in which every query attends to `K` keys gathered by
//! bilinear sampling at learned offsets around it. Both blocks come with
//! hand-written backward passes, validated against finite differences by
//! [`gradcheck`]. [`train`] fits a small network on a synthetic long-range
//! task and [`bench`] measures how the two blocks scale.
//!
//! Query-parallel kernels use rayon when the `parallel` feature (on by
//! default) is enabled; see [`Exec`].

pub mod bench;
pub mod config;
pub mod equiv;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod io;
pub mod nonlocal;
pub mod sparse;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use exec::{Exec, MulCounter};
pub use nonlocal::{AttentionOpts, NlActivations, NlParams};
pub use sparse::{GridSpec, SamplingGrid, SnlActivations, SnlParams};
pub use tensor::{Precision, Scalar, Shape2D, Tensor};
