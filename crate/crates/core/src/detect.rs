//! Detector output: schema parsing, confidence filtering and mapping boxes
//! between image spaces.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("malformed detection document: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("invalid image dimensions {width}x{height}")]
    BadDims { width: f64, height: f64 },
    #[error("detections[{index}]: degenerate box {bbox:?}")]
    DegenerateBox { index: usize, bbox: [f64; 4] },
    #[error("detections[{index}]: box {bbox:?} outside {width}x{height} image")]
    BoxOutOfBounds {
        index: usize,
        bbox: [f64; 4],
        width: usize,
        height: usize,
    },
    #[error("detections[{index}]: score {score} not in [0, 1]")]
    BadScore { index: usize, score: f64 },
    #[error("zero target dimensions {0}x{1}")]
    ZeroTarget(usize, usize),
}

/// Half-open pixel rectangle `[x_min, x_max) × [y_min, y_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl From<[f64; 4]> for BoundingBox {
    fn from([x_min, y_min, x_max, y_max]: [f64; 4]) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub label: String,
    pub score: f64,
    pub bbox: BoundingBox,
    /// Dimensions of the image space `bbox` is expressed in.
    pub image_width: usize,
    pub image_height: usize,
}

/// One frame's worth of detections, as carried by the detection document.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionFrame {
    pub frame_id: String,
    pub image_width: usize,
    pub image_height: usize,
    pub detections: Vec<Detection>,
}

#[derive(Serialize, Deserialize)]
struct RawDetection {
    label: String,
    score: f64,
    #[serde(rename = "box")]
    bbox: BoundingBox,
}

#[derive(Deserialize)]
struct DetectionDoc {
    frame_id: String,
    image_width: f64,
    image_height: f64,
    detections: Vec<RawDetection>,
}

#[derive(Serialize)]
struct DetectionDocOut<'a> {
    frame_id: &'a str,
    image_width: usize,
    image_height: usize,
    detections: Vec<RawDetection>,
}

fn validate(index: usize, raw: &RawDetection, width: usize, height: usize) -> Result<(), DetectError> {
    let b = raw.bbox;
    if !(0.0..=1.0).contains(&raw.score) {
        return Err(DetectError::BadScore {
            index,
            score: raw.score,
        });
    }
    let bbox: [f64; 4] = b.into();
    if bbox.iter().any(|c| !c.is_finite()) || !(b.x_min < b.x_max) || !(b.y_min < b.y_max) {
        return Err(DetectError::DegenerateBox { index, bbox });
    }
    if b.x_min < 0.0 || b.y_min < 0.0 || b.x_max > width as f64 || b.y_max > height as f64 {
        return Err(DetectError::BoxOutOfBounds {
            index,
            bbox,
            width,
            height,
        });
    }
    Ok(())
}

/// Parses and validates one detection document.
pub fn parse_detections(text: &str) -> Result<DetectionFrame, DetectError> {
    let doc: DetectionDoc = serde_json::from_str(text)?;
    let dims_ok = |x: f64| x >= 1.0 && x.fract() == 0.0 && x <= u32::MAX as f64;
    if !dims_ok(doc.image_width) || !dims_ok(doc.image_height) {
        return Err(DetectError::BadDims {
            width: doc.image_width,
            height: doc.image_height,
        });
    }
    let (width, height) = (doc.image_width as usize, doc.image_height as usize);
    let detections = doc
        .detections
        .into_iter()
        .enumerate()
        .map(|(i, raw)| {
            validate(i, &raw, width, height)?;
            Ok(Detection {
                label: raw.label,
                score: raw.score,
                bbox: raw.bbox,
                image_width: width,
                image_height: height,
            })
        })
        .collect::<Result<_, DetectError>>()?;
    Ok(DetectionFrame {
        frame_id: doc.frame_id,
        image_width: width,
        image_height: height,
        detections,
    })
}

impl DetectionFrame {
    pub fn to_json(&self) -> String {
        let doc = DetectionDocOut {
            frame_id: &self.frame_id,
            image_width: self.image_width,
            image_height: self.image_height,
            detections: self
                .detections
                .iter()
                .map(|d| RawDetection {
                    label: d.label.clone(),
                    score: d.score,
                    bbox: d.bbox,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("detections serialize")
    }
}

/// Keeps detections with `score >= tau`, preserving order.
pub fn filter_by_threshold(dets: &[Detection], tau: f64) -> Vec<Detection> {
    dets.iter().filter(|d| d.score >= tau).cloned().collect()
}

/// Detector input size: shorter side 480, longer side 640, orientation kept.
/// Square inputs are treated as landscape.
pub fn detector_input_dims(orig_w: usize, orig_h: usize) -> (usize, usize) {
    if orig_w >= orig_h {
        (640, 480)
    } else {
        (480, 640)
    }
}

/// Scales box corners into a `to_w × to_h` image without clamping.
pub fn scale_box(det: &Detection, to_w: usize, to_h: usize) -> Result<Detection, DetectError> {
    if to_w == 0 || to_h == 0 {
        return Err(DetectError::ZeroTarget(to_w, to_h));
    }
    // Multiply before dividing so edge coordinates map to edges exactly.
    let sx = |x: f64| x * to_w as f64 / det.image_width as f64;
    let sy = |y: f64| y * to_h as f64 / det.image_height as f64;
    let b = det.bbox;
    Ok(Detection {
        label: det.label.clone(),
        score: det.score,
        bbox: BoundingBox::new(sx(b.x_min), sy(b.y_min), sx(b.x_max), sy(b.y_max)),
        image_width: to_w,
        image_height: to_h,
    })
}

/// Scales box corners into a `to_w × to_h` image, clamped to its bounds.
pub fn rescale_box(det: &Detection, to_w: usize, to_h: usize) -> Result<Detection, DetectError> {
    let mut out = scale_box(det, to_w, to_h)?;
    let (w, h) = (to_w as f64, to_h as f64);
    let b = &mut out.bbox;
    b.x_min = b.x_min.clamp(0.0, w);
    b.x_max = b.x_max.clamp(0.0, w);
    b.y_min = b.y_min.clamp(0.0, h);
    b.y_max = b.y_max.clamp(0.0, h);
    Ok(out)
}
