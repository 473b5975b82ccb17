//! Localized high-resolution densification of Gaussian splatting scenes.
pub mod densifier;
pub mod error;
pub mod features;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod pixel;
pub mod raster;
pub mod roi;
pub mod synth;
#[doc(hidden)]
pub mod testing;
pub mod train;
pub mod types;
pub use error::{Error, Result};
pub use types::{Camera, Gaussian3D, GaussianSet, Image, ImageView, Mask, Rect, SourceTag};
