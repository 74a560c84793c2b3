//! Depth-map colorization: encode object geometry as color so that
//! RGB-trained networks can consume depth. The plain pipeline maps surface
//! normals to RGB; the extended pipeline first fills holes and smooths,
//! then sharpens the colorized result.

pub mod error;
pub mod image;
pub mod pipeline;

pub use error::{DepthColorError, Result};
pub use image::{ColorImage, DepthImage};
pub use pipeline::{
    bilateral_filter, colorize, gaussian_blur, normals_to_rgb, recursive_median_fill,
    surface_normals, surface_normals_field, unsharp_mask, Method, SnPlusConfig,
};
