//! Depth-granularity attention for RGB-D salient object detection.
//!
//! The crate bundles a small reverse-mode tensor engine ([`tensor`]), the
//! multi-threshold Otsu mask pipeline ([`granularity`]), the attention and
//! fusion blocks ([`gba`], [`fusion`]), a toy-scale two-stream network
//! ([`network`]), its supervision ([`objective`]), the standard saliency
//! metrics ([`metrics`]) and image/noise tooling ([`imageio`]).

pub mod cli;
pub mod error;
pub mod fusion;
pub mod gba;
pub mod granularity;
pub mod imageio;
pub mod metrics;
pub mod network;
pub mod objective;
pub mod params;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
