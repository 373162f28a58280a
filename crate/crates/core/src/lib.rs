//! PhysFormer and PhysFormer++ for remote photoplethysmography, built on a
//! small self-contained tensor and autodiff core.

pub mod attention;
pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod loss;
pub mod model;
pub mod nn;
pub mod rng;
pub mod signal;
pub mod synth;
pub mod tdc;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;

// Book chapters run as doctests.
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
mod book_introduction {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/tensors.md")]
mod book_tensors {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/tdc.md")]
mod book_tdc {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/attention.md")]
mod book_attention {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/models.md")]
mod book_models {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/losses.md")]
mod book_losses {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/signal.md")]
mod book_signal {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/synthetic.md")]
mod book_synthetic {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/training.md")]
mod book_training {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
mod book_cli {}
