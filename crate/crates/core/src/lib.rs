//! Fast stereo disparity estimation: fixed census and chroma cost volumes,
//! compressed per pixel into a learned cost signature and refined by a 2D
//! convolutional encoder-decoder.

pub mod autodiff;
pub mod costvol;
pub mod evalmetrics;
pub mod imageio;
pub mod network;
pub mod preprocess;
pub mod synthstereo;
pub mod trainer;

mod error;

pub use error::{Error, Result};
