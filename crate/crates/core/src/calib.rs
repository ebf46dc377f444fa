//! Stereo calibration: document parsing, two-view rectification and
//! per-pixel remapping of raw images into the rectified frame.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{GrayImage, RgbImage};
use crate::reproject::RectifiedParams;

const ORTHONORMAL_TOL: f64 = 1e-9;
const MIN_BASELINE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("malformed calibration document: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("{path}: non-positive focal length ({value})")]
    NonPositiveFocal { path: String, value: f64 },
    #[error("{path}: non-finite value")]
    NonFinite { path: String },
    #[error("R: not orthonormal with det +1 (max |RᵀR - I| = {deviation:e}, det = {det})")]
    NotOrthonormal { deviation: f64, det: f64 },
    #[error("T: non-positive baseline ({0} m)")]
    NonPositiveBaseline(f64),
    #[error("degenerate baseline: {0}")]
    DegenerateBaseline(String),
    #[error("{0}: rectifying homography is singular")]
    SingularHomography(&'static str),
    #[error("image is {got_w}x{got_h}, rectification map expects {want_w}x{want_h}")]
    DimsMismatch {
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
}

/// Pinhole intrinsics plus Brown–Conrady distortion `[k1, k2, p1, p2, k3]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub dist: [f64; 5],
}

impl CameraIntrinsics {
    pub fn ideal(f: f64, cx: f64, cy: f64) -> Self {
        Self {
            fx: f,
            fy: f,
            cx,
            cy,
            dist: [0.0; 5],
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn has_distortion(&self) -> bool {
        self.dist.iter().any(|&c| c != 0.0)
    }

    /// Applies radial + tangential distortion to a normalized image point.
    pub fn distort(&self, x: f64, y: f64) -> (f64, f64) {
        let [k1, k2, p1, p2, k3] = self.dist;
        let r2 = x * x + y * y;
        let radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3));
        let xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x);
        let yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y;
        (xd, yd)
    }

    fn validate(&self, side: &str) -> Result<(), CalibError> {
        let fields = [
            ("fx", self.fx),
            ("fy", self.fy),
            ("cx", self.cx),
            ("cy", self.cy),
        ];
        for (name, value) in fields {
            if !value.is_finite() {
                return Err(CalibError::NonFinite {
                    path: format!("{side}.{name}"),
                });
            }
        }
        for (name, value) in [("fx", self.fx), ("fy", self.fy)] {
            if value <= 0.0 {
                return Err(CalibError::NonPositiveFocal {
                    path: format!("{side}.{name}"),
                    value,
                });
            }
        }
        if let Some(i) = self.dist.iter().position(|c| !c.is_finite()) {
            return Err(CalibError::NonFinite {
                path: format!("{side}.dist[{i}]"),
            });
        }
        Ok(())
    }
}

/// A calibrated stereo pair. `rotation`/`translation` map left-camera
/// coordinates into the right camera: `X_r = R·X_l + T` (meters).
#[derive(Clone, Debug, PartialEq)]
pub struct StereoRig {
    pub left: CameraIntrinsics,
    pub right: CameraIntrinsics,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub baseline: f64,
    pub rect_left: Option<Matrix3<f64>>,
    pub rect_right: Option<Matrix3<f64>>,
    pub rectified_input: bool,
}

#[derive(Serialize, Deserialize)]
struct CalibrationDoc {
    left: CameraIntrinsics,
    right: CameraIntrinsics,
    #[serde(rename = "R")]
    rotation: [[f64; 3]; 3],
    #[serde(rename = "T")]
    translation: [f64; 3],
    #[serde(default)]
    rectified_input: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rect_left: Option<[[f64; 3]; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rect_right: Option<[[f64; 3]; 3]>,
}

fn mat_from_rows(rows: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| rows[r][c])
}

fn rows_from_mat(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
}

/// Parses and validates a calibration document.
pub fn parse_calibration(text: &str) -> Result<StereoRig, CalibError> {
    let doc: CalibrationDoc = serde_json::from_str(text)?;
    StereoRig::new(
        doc.left,
        doc.right,
        mat_from_rows(&doc.rotation),
        Vector3::from(doc.translation),
        doc.rect_left.as_ref().map(mat_from_rows),
        doc.rect_right.as_ref().map(mat_from_rows),
        doc.rectified_input,
    )
}

impl StereoRig {
    pub fn new(
        left: CameraIntrinsics,
        right: CameraIntrinsics,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        rect_left: Option<Matrix3<f64>>,
        rect_right: Option<Matrix3<f64>>,
        rectified_input: bool,
    ) -> Result<Self, CalibError> {
        left.validate("left")?;
        right.validate("right")?;
        if rotation.iter().any(|v| !v.is_finite()) {
            return Err(CalibError::NonFinite { path: "R".into() });
        }
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(CalibError::NonFinite { path: "T".into() });
        }
        let deviation = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        let det = rotation.determinant();
        if deviation > ORTHONORMAL_TOL || (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(CalibError::NotOrthonormal { deviation, det });
        }
        // After rectification the whole translation lies on the x axis.
        let baseline = translation.norm();
        if baseline <= 0.0 {
            return Err(CalibError::NonPositiveBaseline(baseline));
        }
        let (rect_left, rect_right) = if rectified_input {
            (None, None)
        } else {
            (rect_left, rect_right)
        };
        Ok(Self {
            left,
            right,
            rotation,
            translation,
            baseline,
            rect_left,
            rect_right,
            rectified_input,
        })
    }

    /// An already-rectified rig: shared ideal intrinsics, no rotation, right
    /// camera `baseline` meters along +x.
    pub fn rectified(params: RectifiedParams) -> Self {
        let intr = CameraIntrinsics::ideal(params.f, params.cx, params.cy);
        Self {
            left: intr,
            right: intr,
            rotation: Matrix3::identity(),
            translation: Vector3::new(-params.baseline, 0.0, 0.0),
            baseline: params.baseline,
            rect_left: None,
            rect_right: None,
            rectified_input: true,
        }
    }

    /// Shared f, cx, cy and B used for reprojection. Meaningful for rectified
    /// rigs; for raw rigs it returns the intrinsics rectification would adopt.
    pub fn rectified_params(&self) -> RectifiedParams {
        RectifiedParams {
            f: 0.5 * (self.left.fx + self.right.fx),
            cx: 0.5 * (self.left.cx + self.right.cx),
            cy: 0.5 * (self.left.cy + self.right.cy),
            baseline: self.baseline,
        }
    }

    pub fn to_json(&self) -> String {
        let doc = CalibrationDoc {
            left: self.left,
            right: self.right,
            rotation: rows_from_mat(&self.rotation),
            translation: self.translation.into(),
            rectified_input: self.rectified_input,
            rect_left: self.rect_left.as_ref().map(rows_from_mat),
            rect_right: self.rect_right.as_ref().map(rows_from_mat),
        };
        serde_json::to_string_pretty(&doc).expect("calibration serializes")
    }
}

/// Output of [`compute_rectifying_transforms`]. Each homography maps an
/// undistorted raw pixel to its rectified pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Rectification {
    pub h_left: Matrix3<f64>,
    pub h_right: Matrix3<f64>,
    pub rig: StereoRig,
}

/// Baseline-aligned half-rotation rectification.
///
/// Each camera is rotated by half of the relative rotation, then both are
/// rotated so the baseline becomes the x axis, and finally re-projected with a
/// shared intrinsic matrix (mean focal length, mean principal point).
pub fn compute_rectifying_transforms(rig: &StereoRig) -> Result<Rectification, CalibError> {
    let params = rig.rectified_params();
    let rectified = StereoRig::rectified(params);
    if rig.rectified_input {
        return Ok(Rectification {
            h_left: Matrix3::identity(),
            h_right: Matrix3::identity(),
            rig: rectified,
        });
    }
    if let (Some(h_left), Some(h_right)) = (rig.rect_left, rig.rect_right) {
        return Ok(Rectification {
            h_left,
            h_right,
            rig: rectified,
        });
    }
    if rig.translation.norm() < MIN_BASELINE {
        return Err(CalibError::DegenerateBaseline(format!(
            "|T| = {:e} m",
            rig.translation.norm()
        )));
    }

    let axis = Rotation3::from_matrix_unchecked(rig.rotation).scaled_axis();
    let half_left = Rotation3::from_scaled_axis(axis * 0.5);
    let half_right = Rotation3::from_scaled_axis(axis * -0.5);
    let t = half_right * rig.translation;

    // Rows of the aligning rotation: e1 points from the right camera center
    // towards the left one so the rectified T is (-B, 0, 0).
    let e1 = -t / t.norm();
    let planar = (e1.x * e1.x + e1.y * e1.y).sqrt();
    if planar < 1e-9 {
        return Err(CalibError::DegenerateBaseline(
            "baseline is parallel to the optical axis".into(),
        ));
    }
    let e2 = Vector3::new(-e1.y, e1.x, 0.0) / planar;
    let e3 = e1.cross(&e2);
    let align = Matrix3::from_rows(&[e1.transpose(), e2.transpose(), e3.transpose()]);

    let k_new = rectified.left.matrix();
    let inv = |k: Matrix3<f64>, which| k.try_inverse().ok_or(CalibError::SingularHomography(which));
    let h_left = k_new * align * half_left.matrix() * inv(rig.left.matrix(), "left")?;
    let h_right = k_new * align * half_right.matrix() * inv(rig.right.matrix(), "right")?;
    Ok(Rectification {
        h_left,
        h_right,
        rig: rectified,
    })
}

/// Per-destination-pixel source coordinates for remapping a raw image into
/// the rectified frame. Entries outside the source image hold
/// [`RectificationMap::OUT_OF_BOUNDS`] in both coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct RectificationMap {
    pub width: usize,
    pub height: usize,
    pub src_width: usize,
    pub src_height: usize,
    pub src_x: Vec<f32>,
    pub src_y: Vec<f32>,
}

impl RectificationMap {
    pub const OUT_OF_BOUNDS: f32 = -1.0;

    #[inline]
    pub fn source(&self, u: usize, v: usize) -> Option<(f32, f32)> {
        let i = v * self.width + u;
        let (x, y) = (self.src_x[i], self.src_y[i]);
        (x != Self::OUT_OF_BOUNDS).then_some((x, y))
    }
}

/// Source pixel for destination `(u, v)` under `h_inv`, or `None` when the
/// perspective divide degenerates.
#[inline]
fn source_coordinate(
    intr: &CameraIntrinsics,
    h_inv: &Matrix3<f64>,
    distort: bool,
    u: f64,
    v: f64,
) -> Option<(f64, f64)> {
    let p = h_inv * Vector3::new(u, v, 1.0);
    if p.z == 0.0 {
        return None;
    }
    let (px, py) = (p.x / p.z, p.y / p.z);
    if !distort {
        return Some((px, py));
    }
    let (xd, yd) = intr.distort((px - intr.cx) / intr.fx, (py - intr.cy) / intr.fy);
    Some((intr.fx * xd + intr.cx, intr.fy * yd + intr.cy))
}

/// Builds the remap table for one camera. `dims` is (width, height), used
/// for both the raw and the rectified image.
pub fn build_rectification_map(
    intr: &CameraIntrinsics,
    h: &Matrix3<f64>,
    dims: (usize, usize),
) -> Result<RectificationMap, CalibError> {
    let (width, height) = dims;
    let h_inv = h
        .try_inverse()
        .ok_or(CalibError::SingularHomography("rectification"))?;
    let distort = intr.has_distortion();
    let (max_x, max_y) = (width as f64 - 1.0, height as f64 - 1.0);
    let rows: Vec<(Vec<f32>, Vec<f32>)> = (0..height)
        .into_par_iter()
        .map(|v| {
            let mut xs = Vec::with_capacity(width);
            let mut ys = Vec::with_capacity(width);
            for u in 0..width {
                match source_coordinate(intr, &h_inv, distort, u as f64, v as f64) {
                    Some((x, y)) if (0.0..=max_x).contains(&x) && (0.0..=max_y).contains(&y) => {
                        xs.push(x as f32);
                        ys.push(y as f32);
                    }
                    _ => {
                        xs.push(RectificationMap::OUT_OF_BOUNDS);
                        ys.push(RectificationMap::OUT_OF_BOUNDS);
                    }
                }
            }
            (xs, ys)
        })
        .collect();
    let mut src_x = Vec::with_capacity(width * height);
    let mut src_y = Vec::with_capacity(width * height);
    for (xs, ys) in rows {
        src_x.extend(xs);
        src_y.extend(ys);
    }
    Ok(RectificationMap {
        width,
        height,
        src_width: width,
        src_height: height,
        src_x,
        src_y,
    })
}

/// Bilinear sample of a single float plane; `(x, y)` must lie within
/// `[0, w-1] × [0, h-1]`.
#[inline]
fn bilinear(plane: &[f32], w: usize, h: usize, x: f32, y: f32) -> f32 {
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let fx = x - x0 as f32;
    let fy = y - y0 as f32;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let p = |xx: usize, yy: usize| plane[yy * w + xx];
    let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
    let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
    top * (1.0 - fy) + bottom * fy
}

fn check_dims(map: &RectificationMap, w: usize, h: usize) -> Result<(), CalibError> {
    if (w, h) != (map.src_width, map.src_height) {
        return Err(CalibError::DimsMismatch {
            got_w: w,
            got_h: h,
            want_w: map.src_width,
            want_h: map.src_height,
        });
    }
    Ok(())
}

/// Remaps a float plane of `map.src_width × map.src_height`. Pixels without a
/// source become 0.
pub fn rectify_plane(plane: &[f32], map: &RectificationMap) -> Result<Vec<f32>, CalibError> {
    let (w, h) = (map.src_width, map.src_height);
    if plane.len() != w * h {
        return Err(CalibError::DimsMismatch {
            got_w: plane.len(),
            got_h: 1,
            want_w: w,
            want_h: h,
        });
    }
    Ok((0..map.width * map.height)
        .map(|i| {
            let (x, y) = (map.src_x[i], map.src_y[i]);
            if x == RectificationMap::OUT_OF_BOUNDS {
                0.0
            } else {
                bilinear(plane, w, h, x, y)
            }
        })
        .collect())
}

fn rectify_channels(data: &[u8], channels: usize, map: &RectificationMap) -> Vec<u8> {
    let (w, h) = (map.src_width, map.src_height);
    let planes: Vec<Vec<f32>> = (0..channels)
        .map(|c| data.iter().skip(c).step_by(channels).map(|&b| b as f32).collect())
        .collect();
    let mut out = vec![0u8; map.width * map.height * channels];
    out.par_chunks_mut(map.width * channels)
        .enumerate()
        .for_each(|(v, row)| {
            for u in 0..map.width {
                let i = v * map.width + u;
                let (x, y) = (map.src_x[i], map.src_y[i]);
                if x == RectificationMap::OUT_OF_BOUNDS {
                    continue;
                }
                for (c, plane) in planes.iter().enumerate() {
                    let value = bilinear(plane, w, h, x, y);
                    row[u * channels + c] = value.round().clamp(0.0, 255.0) as u8;
                }
            }
        });
    out
}

/// Remaps a grayscale image with bilinear sampling.
pub fn rectify_image(img: &GrayImage, map: &RectificationMap) -> Result<GrayImage, CalibError> {
    check_dims(map, img.width(), img.height())?;
    let data = rectify_channels(img.as_raw(), 1, map);
    Ok(GrayImage::from_vec(map.width, map.height, data).expect("dims match"))
}

/// Remaps an RGB image with bilinear sampling per channel.
pub fn rectify_rgb(img: &RgbImage, map: &RectificationMap) -> Result<RgbImage, CalibError> {
    check_dims(map, img.width(), img.height())?;
    let data = rectify_channels(img.as_raw(), 3, map);
    Ok(RgbImage::from_vec(map.width, map.height, data).expect("dims match"))
}

/// Both remap tables for a rig, built once and applied to every frame.
#[derive(Clone, Debug)]
pub struct Rectifier {
    pub rectification: Rectification,
    maps: Option<(RectificationMap, RectificationMap)>,
}

impl Rectifier {
    pub fn new(rig: &StereoRig, dims: (usize, usize)) -> Result<Self, CalibError> {
        let rectification = compute_rectifying_transforms(rig)?;
        let maps = if rig.rectified_input {
            None
        } else {
            Some((
                build_rectification_map(&rig.left, &rectification.h_left, dims)?,
                build_rectification_map(&rig.right, &rectification.h_right, dims)?,
            ))
        };
        Ok(Self {
            rectification,
            maps,
        })
    }

    pub fn params(&self) -> RectifiedParams {
        self.rectification.rig.rectified_params()
    }

    /// Rectifies a pair; a pass-through for rigs with rectified input.
    pub fn apply(
        &self,
        left: &GrayImage,
        right: &GrayImage,
    ) -> Result<(GrayImage, GrayImage), CalibError> {
        match &self.maps {
            None => Ok((left.clone(), right.clone())),
            Some((ml, mr)) => Ok((rectify_image(left, ml)?, rectify_image(right, mr)?)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn doc(fx: f64, r: [[f64; 3]; 3], t: [f64; 3]) -> String {
        serde_json::json!({
            "left": {"fx": fx, "fy": 500.0, "cx": 320.0, "cy": 240.0, "dist": [0.0, 0.0, 0.0, 0.0, 0.0]},
            "right": {"fx": 500.0, "fy": 500.0, "cx": 320.0, "cy": 240.0, "dist": [0.0, 0.0, 0.0, 0.0, 0.0]},
            "R": r,
            "T": t,
            "rectified_input": false
        })
        .to_string()
    }

    const IDENTITY: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

    #[test]
    fn parses_basic_rig() {
        let rig = parse_calibration(&doc(500.0, IDENTITY, [-0.1, 0.0, 0.0])).unwrap();
        assert_eq!(rig.left.fx, 500.0);
        assert_eq!(rig.right.cy, 240.0);
        assert_abs_diff_eq!(rig.baseline, 0.1, epsilon = 1e-15);
        assert!(!rig.rectified_input);
    }

    #[test]
    fn rejects_negative_focal() {
        let err = parse_calibration(&doc(-5.0, IDENTITY, [-0.1, 0.0, 0.0])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("non-positive focal length"), "{msg}");
        assert!(msg.contains("left.fx"), "{msg}");
    }

    #[test]
    fn accepts_axis_angle_rotation() {
        let rot = Rotation3::from_scaled_axis(Vector3::new(0.2, 1.0, -0.3).normalize() * 5f64.to_radians());
        let rows = rows_from_mat(rot.matrix());
        let rig = parse_calibration(&doc(500.0, rows, [-0.1, 0.0, 0.0])).unwrap();
        assert_abs_diff_eq!(rig.rotation.determinant(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn rejects_scaled_rotation() {
        let r = [[1.01, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let err = parse_calibration(&doc(500.0, r, [-0.1, 0.0, 0.0])).unwrap_err();
        assert!(matches!(err, CalibError::NotOrthonormal { .. }));
    }

    #[test]
    fn rejects_zero_baseline_and_garbage() {
        assert!(matches!(
            parse_calibration(&doc(500.0, IDENTITY, [0.0, 0.0, 0.0])),
            Err(CalibError::NonPositiveBaseline(_))
        ));
        assert!(matches!(
            parse_calibration("{\"left\": 3}"),
            Err(CalibError::Malformed(_))
        ));
    }

    #[test]
    fn degenerate_baseline_in_rectification() {
        // Bypass the parser to reach the rectification guard directly.
        let intr = CameraIntrinsics::ideal(500.0, 320.0, 240.0);
        let rig = StereoRig {
            left: intr,
            right: intr,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            baseline: 0.0,
            rect_left: None,
            rect_right: None,
            rectified_input: false,
        };
        let err = compute_rectifying_transforms(&rig).unwrap_err();
        assert!(err.to_string().contains("degenerate baseline"));
    }

    #[test]
    fn fronto_parallel_rig_gives_identity() {
        let rig = parse_calibration(&doc(500.0, IDENTITY, [-0.1, 0.0, 0.0])).unwrap();
        let rect = compute_rectifying_transforms(&rig).unwrap();
        assert_abs_diff_eq!(rect.h_left, Matrix3::identity(), epsilon = 1e-12);
        assert_abs_diff_eq!(rect.h_right, Matrix3::identity(), epsilon = 1e-12);
        assert_abs_diff_eq!(rect.rig.baseline, 0.1, epsilon = 1e-15);
    }

    #[test]
    fn rectified_rig_is_idempotent() {
        let rig = parse_calibration(&doc(500.0, IDENTITY, [-0.1, 0.0, 0.0])).unwrap();
        let once = compute_rectifying_transforms(&rig).unwrap();
        let twice = compute_rectifying_transforms(&once.rig).unwrap();
        assert_eq!(twice.h_left, Matrix3::identity());
        assert_eq!(twice.h_right, Matrix3::identity());
        assert_eq!(twice.rig, once.rig);
    }

    #[test]
    fn supplied_homographies_pass_through() {
        let h = Matrix3::new(1.0, 0.0, 2.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        let mut rig = parse_calibration(&doc(500.0, IDENTITY, [-0.1, 0.0, 0.0])).unwrap();
        rig.rect_left = Some(h);
        rig.rect_right = Some(h.transpose());
        let rect = compute_rectifying_transforms(&rig).unwrap();
        assert_eq!(rect.h_left, h);
        assert_eq!(rect.h_right, h.transpose());
    }

    fn project(k: &Matrix3<f64>, p: &Vector3<f64>) -> Vector3<f64> {
        let q = k * p;
        q / q.z
    }

    #[test]
    fn yawed_rig_rows_align() {
        let yaw = Rotation3::from_scaled_axis(Vector3::y() * 2f64.to_radians());
        let mut right = CameraIntrinsics::ideal(510.0, 318.0, 243.0);
        right.fy = 505.0;
        let rig = StereoRig::new(
            CameraIntrinsics::ideal(500.0, 320.0, 240.0),
            right,
            *yaw.matrix(),
            Vector3::new(-0.12, 0.003, 0.002),
            None,
            None,
            false,
        )
        .unwrap();
        let rect = compute_rectifying_transforms(&rig).unwrap();
        let world = Vector3::new(0.4, -0.3, 3.5);
        let pl = project(&rig.left.matrix(), &world);
        let pr = project(&rig.right.matrix(), &(rig.rotation * world + rig.translation));
        let rl = rect.h_left * pl;
        let rr = rect.h_right * pr;
        let (vl, vr) = (rl.y / rl.z, rr.y / rr.z);
        assert!((vl - vr).abs() < 0.5, "row difference {}", (vl - vr).abs());
        // Rectified disparity is positive for a point in front of both cameras.
        assert!(rl.x / rl.z > rr.x / rr.z);
    }

    #[test]
    fn identity_map_is_exact() {
        let intr = CameraIntrinsics::ideal(500.0, 31.3, 17.9);
        let map = build_rectification_map(&intr, &Matrix3::identity(), (40, 30)).unwrap();
        for v in 0..30 {
            for u in 0..40 {
                assert_eq!(map.source(u, v), Some((u as f32, v as f32)));
            }
        }
    }

    #[test]
    fn translation_map_shifts_source() {
        let intr = CameraIntrinsics::ideal(500.0, 20.0, 10.0);
        let h = Matrix3::new(1.0, 0.0, 2.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        let map = build_rectification_map(&intr, &h, (20, 10)).unwrap();
        for v in 0..10 {
            for u in 0..20 {
                match map.source(u, v) {
                    Some((x, y)) => {
                        assert_eq!(x, u as f32 - 2.0);
                        assert_eq!(y, v as f32);
                    }
                    None => assert!(u < 2),
                }
            }
        }
    }

    #[test]
    fn distortion_map_matches_direct_evaluation() {
        let mut intr = CameraIntrinsics::ideal(300.0, 32.0, 24.0);
        intr.dist = [-0.25, 0.08, 0.001, -0.0005, -0.01];
        let h = Matrix3::new(1.0, 0.002, 0.7, -0.001, 1.0, -0.4, 0.0, 0.0, 1.0);
        let (w, hgt) = (64usize, 48usize);
        let map = build_rectification_map(&intr, &h, (w, hgt)).unwrap();
        let hi = h.try_inverse().unwrap();
        for v in 0..hgt {
            for u in 0..w {
                // Straight-line evaluation of the same model.
                let den = hi[(2, 0)] * u as f64 + hi[(2, 1)] * v as f64 + hi[(2, 2)];
                let px = (hi[(0, 0)] * u as f64 + hi[(0, 1)] * v as f64 + hi[(0, 2)]) / den;
                let py = (hi[(1, 0)] * u as f64 + hi[(1, 1)] * v as f64 + hi[(1, 2)]) / den;
                let x = (px - 32.0) / 300.0;
                let y = (py - 24.0) / 300.0;
                let r2 = x * x + y * y;
                let rad = 1.0 - 0.25 * r2 + 0.08 * r2 * r2 - 0.01 * r2 * r2 * r2;
                let xd = x * rad + 2.0 * 0.001 * x * y - 0.0005 * (r2 + 2.0 * x * x);
                let yd = y * rad + 0.001 * (r2 + 2.0 * y * y) + 2.0 * -0.0005 * x * y;
                let (sx, sy) = (300.0 * xd + 32.0, 300.0 * yd + 24.0);
                let inside = (0.0..=(w - 1) as f64).contains(&sx) && (0.0..=(hgt - 1) as f64).contains(&sy);
                match map.source(u, v) {
                    Some((mx, my)) => {
                        assert!(inside);
                        assert!((mx as f64 - sx).abs() < 1e-4 && (my as f64 - sy).abs() < 1e-4);
                    }
                    None => assert!(!inside),
                }
            }
        }
    }

    #[test]
    fn singular_homography_rejected() {
        let intr = CameraIntrinsics::ideal(500.0, 20.0, 10.0);
        assert!(matches!(
            build_rectification_map(&intr, &Matrix3::zeros(), (4, 4)),
            Err(CalibError::SingularHomography(_))
        ));
    }

    #[test]
    fn identity_rectify_is_noop() {
        let img = GrayImage::from_fn(13, 7, |u, v| (u * 17 + v * 31) as u8);
        let map = build_rectification_map(&CameraIntrinsics::ideal(100.0, 6.0, 3.0), &Matrix3::identity(), (13, 7)).unwrap();
        assert_eq!(rectify_image(&img, &map).unwrap(), img);
    }

    #[test]
    fn shift_rectify_zeroes_border() {
        let img = GrayImage::from_fn(16, 4, |u, _| 10 + u as u8 * 10);
        let h = Matrix3::new(1.0, 0.0, 2.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        let map = build_rectification_map(&CameraIntrinsics::ideal(100.0, 8.0, 2.0), &h, (16, 4)).unwrap();
        let out = rectify_image(&img, &map).unwrap();
        for v in 0..4 {
            for u in 0..16 {
                let want = if u < 2 { 0 } else { img.get(u - 2, v) };
                assert_eq!(out.get(u, v), want);
            }
        }
    }

    #[test]
    fn half_pixel_shift_on_ramp() {
        let (w, h) = (12usize, 3usize);
        let plane: Vec<f32> = (0..w * h).map(|i| (i % w) as f32).collect();
        let shift = Matrix3::new(1.0, 0.0, 0.5, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        let map = build_rectification_map(&CameraIntrinsics::ideal(100.0, 6.0, 1.0), &shift, (w, h)).unwrap();
        let out = rectify_plane(&plane, &map).unwrap();
        for v in 0..h {
            for u in 1..w {
                assert_eq!(out[v * w + u], u as f32 - 0.5);
            }
            assert_eq!(out[v * w], 0.0);
        }
    }

    #[test]
    fn rectify_rejects_wrong_dims() {
        let map = build_rectification_map(&CameraIntrinsics::ideal(100.0, 6.0, 3.0), &Matrix3::identity(), (13, 7)).unwrap();
        assert!(matches!(
            rectify_image(&GrayImage::new(12, 7), &map),
            Err(CalibError::DimsMismatch { .. })
        ));
    }

    #[test]
    fn json_roundtrip() {
        let rig = parse_calibration(&doc(500.0, IDENTITY, [-0.1, 0.0, 0.0])).unwrap();
        assert_eq!(parse_calibration(&rig.to_json()).unwrap(), rig);
    }
}
