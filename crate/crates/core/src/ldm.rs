//! Local Dynamic Map: a bird's-eye raster of object positions relative to
//! the ego vehicle, one per frame.

use nalgebra::{Matrix3, Vector3};
use serde::Serialize;
use thiserror::Error;

use crate::font;
use crate::raster::RgbImage;
use crate::reproject::{ground_distance, WorldPoint};

pub const BLUE: [u8; 3] = [0, 0, 255];
pub const GREEN: [u8; 3] = [0, 255, 0];
pub const YELLOW: [u8; 3] = [255, 255, 0];
pub const RED: [u8; 3] = [255, 0, 0];
pub const BACKGROUND: [u8; 3] = [255, 255, 255];
pub const TEXT: [u8; 3] = [0, 0, 0];

#[derive(Debug, Error, PartialEq)]
pub enum LdmError {
    #[error("invalid LDM parameters: {0}")]
    InvalidParams(String),
    #[error("point ({0}, {1}) maps to infinity")]
    PointAtInfinity(f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LdmParams {
    pub base_w: usize,
    pub base_h: usize,
    /// Margin in pixels between the image border and the range anchors.
    pub offset: usize,
    /// Lateral view range in meters on either side of the car.
    pub side_range: f64,
    /// Forward view range in meters.
    pub front_range: f64,
    pub marker_radius: usize,
}

impl Default for LdmParams {
    fn default() -> Self {
        Self {
            base_w: 500,
            base_h: 600,
            offset: 20,
            side_range: 2.5,
            front_range: 6.0,
            marker_radius: 8,
        }
    }
}

impl LdmParams {
    pub fn validate(&self) -> Result<(), LdmError> {
        let bad = |m: String| Err(LdmError::InvalidParams(m));
        if !(self.side_range > 0.0 && self.side_range.is_finite()) {
            return bad(format!("side_range {} must be positive", self.side_range));
        }
        if !(self.front_range > 0.0 && self.front_range.is_finite()) {
            return bad(format!("front_range {} must be positive", self.front_range));
        }
        if self.base_w <= 2 * self.offset || self.base_h <= 2 * self.offset {
            return bad(format!(
                "base {}x{} too small for offset {}",
                self.base_w, self.base_h, self.offset
            ));
        }
        Ok(())
    }

    pub fn car_front(&self) -> (f64, f64) {
        (self.base_w as f64 / 2.0, (self.base_h - self.offset) as f64)
    }

    pub fn front_anchor(&self) -> (f64, f64) {
        (self.base_w as f64 / 2.0, self.offset as f64)
    }

    /// Upper-left and upper-right corner markers.
    pub fn side_anchors(&self) -> [(f64, f64); 2] {
        let o = self.offset as f64;
        [(o, o), ((self.base_w - self.offset) as f64, o)]
    }
}

/// Affine world `(X, Z, 1)` → pixel `(u, v, 1)` map: the car front sits at
/// the bottom-center margin, `front_range` reaches the top margin and
/// `±side_range` reaches the side margins.
pub fn build_ldm_homography(params: &LdmParams) -> Result<Matrix3<f64>, LdmError> {
    params.validate()?;
    let (w, h, o) = (params.base_w as f64, params.base_h as f64, params.offset as f64);
    let su = (w / 2.0 - o) / params.side_range;
    let sv = (h - 2.0 * o) / params.front_range;
    Ok(Matrix3::new(su, 0.0, w / 2.0, 0.0, -sv, h - o, 0.0, 0.0, 1.0))
}

pub fn apply_homography(h: &Matrix3<f64>, x: f64, z: f64) -> Result<(f64, f64), LdmError> {
    let p = h * Vector3::new(x, z, 1.0);
    if p.z == 0.0 {
        return Err(LdmError::PointAtInfinity(x, z));
    }
    Ok((p.x / p.z, p.y / p.z))
}

pub fn in_bounds(params: &LdmParams, (u, v): (f64, f64)) -> bool {
    (0.0..params.base_w as f64).contains(&u) && (0.0..params.base_h as f64).contains(&v)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LdmObject {
    pub label: String,
    pub world: WorldPoint,
    pub distance_euclid: f64,
    pub distance_z: f64,
    pub in_view: bool,
}

impl LdmObject {
    pub fn new(label: impl Into<String>, world: WorldPoint, h: &Matrix3<f64>, params: &LdmParams) -> Self {
        let in_view = apply_homography(h, world.x, world.z)
            .map(|px| in_bounds(params, px))
            .unwrap_or(false);
        Self {
            label: label.into(),
            world,
            distance_euclid: ground_distance(&world),
            distance_z: world.z,
            in_view,
        }
    }

    pub fn caption(&self) -> String {
        format!("{} {:.2} m", self.label, self.distance_euclid)
    }
}

fn fill_circle(img: &mut RgbImage, (cu, cv): (f64, f64), radius: usize, color: [u8; 3]) {
    let (cu, cv) = (cu.round() as i64, cv.round() as i64);
    let r = radius as i64;
    for dv in -r..=r {
        for du in -r..=r {
            if du * du + dv * dv <= r * r {
                img.put(cu + du, cv + dv, color);
            }
        }
    }
}

fn ring(img: &mut RgbImage, (cu, cv): (f64, f64), radius: usize, color: [u8; 3]) {
    let (cu, cv) = (cu.round() as i64, cv.round() as i64);
    let r = radius as i64;
    let (inner, outer) = ((r - 2).max(0).pow(2), r * r);
    for dv in -r..=r {
        for du in -r..=r {
            let d2 = du * du + dv * dv;
            if d2 <= outer && d2 > inner {
                img.put(cu + du, cv + dv, color);
            }
        }
    }
}

/// Draws the car-front and view-range markers onto a blank base image.
pub fn render_base(params: &LdmParams) -> RgbImage {
    let mut img = RgbImage::filled(params.base_w, params.base_h, BACKGROUND);
    let r = params.marker_radius;
    fill_circle(&mut img, params.car_front(), r, BLUE);
    for anchor in params.side_anchors() {
        ring(&mut img, anchor, r, GREEN);
    }
    ring(&mut img, params.front_anchor(), r, YELLOW);
    img
}

/// Renders one frame. Objects outside the base image are skipped.
pub fn render_ldm_frame(objects: &[LdmObject], params: &LdmParams) -> Result<RgbImage, LdmError> {
    let h = build_ldm_homography(params)?;
    let mut img = render_base(params);
    let r = params.marker_radius as i64;
    for obj in objects {
        let Ok(px) = apply_homography(&h, obj.world.x, obj.world.z) else {
            continue;
        };
        if !in_bounds(params, px) {
            continue;
        }
        fill_circle(&mut img, px, params.marker_radius, RED);
        let caption = obj.caption();
        let (cu, cv) = (px.0.round() as i64, px.1.round() as i64);
        // Right of the marker, flipped to the left near the right border.
        let width = font::text_width(&caption) as i64;
        let x0 = if cu + r + 4 + width < params.base_w as i64 {
            cu + r + 4
        } else {
            cu - r - 4 - width
        };
        font::draw_text(&caption, x0, cv - font::GLYPH_H as i64 / 2, |x, y| img.put(x, y, TEXT));
    }
    Ok(img)
}
