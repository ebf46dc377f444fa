//! Stereo block matching fused with 2D object detections.
//!
//! The pipeline rectifies a calibrated stereo pair, computes an integer
//! block-matching disparity map, averages the non-zero disparities inside
//! each detected bounding box, reprojects the result into the ego frame and
//! renders a bird's-eye Local Dynamic Map (LDM) per frame.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calib;
pub mod detect;
pub mod disparity;
pub mod fusion;
pub mod ldm;
pub mod pipeline;
pub mod raster;
pub mod reproject;
pub mod synth;

mod font;

pub use calib::{CameraIntrinsics, RectificationMap, StereoRig};
pub use detect::{BoundingBox, Detection, DetectionFrame};
pub use disparity::{DisparityMap, DisparityParams};
pub use fusion::{BoxDisparityStats, FusionOutcome};
pub use ldm::{LdmObject, LdmParams};
pub use raster::{GrayImage, RgbImage};
pub use reproject::{RectifiedParams, WorldPoint};
