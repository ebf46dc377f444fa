//! Bounding box × disparity fusion: only non-zero disparities inside a box
//! contribute to its estimate.

use serde::Serialize;
use thiserror::Error;

use crate::detect::{BoundingBox, Detection};
use crate::disparity::DisparityMap;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("box {0:?} covers no pixel of the {1}x{2} disparity map")]
    BoxOutsideImage([f64; 4], usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoxDisparityStats {
    /// Number of pixels with non-zero disparity.
    pub count: usize,
    pub mean_d: f64,
    pub min_d: u16,
    pub max_d: u16,
    /// Unweighted mean pixel coordinate of the valid pixels.
    pub centroid: (f64, f64),
    pub bbox: BoundingBox,
}

/// Pixel index range `[lo, hi)` whose integer coordinates fall in `[min, max)`,
/// clamped to `[0, len)`.
fn pixel_span(min: f64, max: f64, len: usize) -> (usize, usize) {
    let clamp = |x: f64| x.ceil().clamp(0.0, len as f64) as usize;
    (clamp(min), clamp(max))
}

/// Statistics of the non-zero disparities at pixels `(x, y)` with
/// `x_min <= x < x_max`, `y_min <= y < y_max`, after clamping to the map.
pub fn collect_box_stats(
    dmap: &DisparityMap,
    bbox: &BoundingBox,
) -> Result<BoxDisparityStats, FusionError> {
    let (x0, x1) = pixel_span(bbox.x_min, bbox.x_max, dmap.width());
    let (y0, y1) = pixel_span(bbox.y_min, bbox.y_max, dmap.height());
    if x0 >= x1 || y0 >= y1 {
        return Err(FusionError::BoxOutsideImage(
            (*bbox).into(),
            dmap.width(),
            dmap.height(),
        ));
    }
    let mut count = 0u64;
    let (mut sum_d, mut sum_x, mut sum_y) = (0u64, 0u64, 0u64);
    let (mut min_d, mut max_d) = (u16::MAX, 0u16);
    for y in y0..y1 {
        for x in x0..x1 {
            let d = dmap.get(x, y);
            if d == 0 {
                continue;
            }
            count += 1;
            sum_d += d as u64;
            sum_x += x as u64;
            sum_y += y as u64;
            min_d = min_d.min(d);
            max_d = max_d.max(d);
        }
    }
    if count == 0 {
        return Ok(BoxDisparityStats {
            count: 0,
            mean_d: 0.0,
            min_d: 0,
            max_d: 0,
            centroid: (0.0, 0.0),
            bbox: *bbox,
        });
    }
    let n = count as f64;
    Ok(BoxDisparityStats {
        count: count as usize,
        mean_d: sum_d as f64 / n,
        min_d,
        max_d,
        centroid: (sum_x as f64 / n, sum_y as f64 / n),
        bbox: *bbox,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FusionOutcome {
    /// Mean disparity at full precision and the pixel it is attributed to.
    Fused {
        mean_d: f64,
        pixel: (f64, f64),
        stats: BoxDisparityStats,
    },
    /// Fewer than `min_valid` valid pixels; reported without distance.
    NoEstimate { stats: BoxDisparityStats },
}

impl FusionOutcome {
    pub fn stats(&self) -> &BoxDisparityStats {
        match self {
            FusionOutcome::Fused { stats, .. } | FusionOutcome::NoEstimate { stats } => stats,
        }
    }
}

/// Fuses one detection (already in disparity-map coordinates). The
/// representative pixel is the centroid of the valid pixels.
pub fn fuse_detection(
    dmap: &DisparityMap,
    det: &Detection,
    min_valid: usize,
) -> Result<FusionOutcome, FusionError> {
    let stats = collect_box_stats(dmap, &det.bbox)?;
    if stats.count == 0 || stats.count < min_valid {
        return Ok(FusionOutcome::NoEstimate { stats });
    }
    Ok(FusionOutcome::Fused {
        mean_d: stats.mean_d,
        pixel: stats.centroid,
        stats,
    })
}
