//! Triangulation of a (pixel, disparity) pair in a rectified rig.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ReprojectError {
    #[error("invalid disparity {0} (must be > 0)")]
    InvalidDisparity(f64),
    #[error("invalid rig: f = {f}, B = {baseline}")]
    InvalidRig { f: f64, baseline: f64 },
}

/// Shared intrinsics and baseline of a rectified pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RectifiedParams {
    /// Focal length in pixels.
    pub f: f64,
    pub cx: f64,
    pub cy: f64,
    /// Baseline in meters.
    pub baseline: f64,
}

/// Ego-frame point anchored at the left camera center: X right, Y down,
/// Z forward, all in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldPoint {
    #[serde(rename = "X")]
    pub x: f64,
    #[serde(rename = "Y")]
    pub y: f64,
    #[serde(rename = "Z")]
    pub z: f64,
}

impl WorldPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }
}

/// Z = f·B/d.
pub fn disparity_to_depth(d: f64, f: f64, baseline: f64) -> Result<f64, ReprojectError> {
    if !(d > 0.0) || !d.is_finite() {
        return Err(ReprojectError::InvalidDisparity(d));
    }
    if !(f > 0.0) || !(baseline > 0.0) {
        return Err(ReprojectError::InvalidRig { f, baseline });
    }
    Ok(f * baseline / d)
}

pub fn pixel_to_world(
    u: f64,
    v: f64,
    d: f64,
    rig: &RectifiedParams,
) -> Result<WorldPoint, ReprojectError> {
    let z = disparity_to_depth(d, rig.f, rig.baseline)?;
    Ok(WorldPoint {
        x: (u - rig.cx) * z / rig.f,
        y: (v - rig.cy) * z / rig.f,
        z,
    })
}

/// Distance in the ground (X–Z) plane; height is ignored.
pub fn ground_distance(p: &WorldPoint) -> f64 {
    p.x.hypot(p.z)
}

/// Depth change caused by one integer disparity step at depth `z`.
pub fn quantization_bound(z: f64, rig: &RectifiedParams) -> f64 {
    z * z / (rig.f * rig.baseline)
}
