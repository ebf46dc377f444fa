//! Synthetic rectified stereo pairs with exact integer ground truth.
//!
//! Every surface is a fronto-parallel textured rectangle, so each one moves
//! by a single integer disparity between the views.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calib::StereoRig;
use crate::detect::{BoundingBox, Detection, DetectionFrame};
use crate::disparity::DisparityMap;
use crate::raster::{self, GrayImage, RasterError};
use crate::reproject::RectifiedParams;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("{label}: disparity {disparity} exceeds max_disparity {max}")]
    DisparityTooLarge {
        label: String,
        disparity: usize,
        max: usize,
    },
    #[error("{label}: does not fit in both views")]
    OutOfFrame { label: String },
    #[error("objects {0} and {1} overlap at equal depth")]
    EqualDepthOverlap(String, String),
    #[error("malformed scene document: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub label: String,
    /// Lateral center, meters.
    pub x: f64,
    /// Vertical center (down positive), meters.
    #[serde(default)]
    pub y: f64,
    /// Depth, meters.
    pub z: f64,
    pub width: f64,
    pub height: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub rig: RectifiedParams,
    pub image_width: usize,
    pub image_height: usize,
    pub max_disparity: usize,
    pub background_z: f64,
    pub objects: Vec<SceneObject>,
    pub texture_seed: u64,
    pub frame_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StereoPair {
    pub left: GrayImage,
    pub right: GrayImage,
    pub truth: DisparityMap,
    pub detections: DetectionFrame,
}

/// Left-image footprint of an object: continuous box plus covered pixels.
struct Footprint {
    bbox: BoundingBox,
    cols: (usize, usize),
    rows: (usize, usize),
    disparity: usize,
}

fn integer_disparity(rig: &RectifiedParams, z: f64) -> f64 {
    (rig.f * rig.baseline / z).round()
}

fn footprint(spec: &SceneSpec, obj: &SceneObject) -> Result<Footprint, SynthError> {
    let rig = &spec.rig;
    let valid = [obj.x, obj.y, obj.z, obj.width, obj.height].iter().all(|v| v.is_finite())
        && obj.z > 0.0
        && obj.width > 0.0
        && obj.height > 0.0;
    if !valid {
        return Err(SynthError::InvalidScene(format!(
            "{}: needs finite position, Z > 0 and positive size",
            obj.label
        )));
    }
    let d = integer_disparity(rig, obj.z);
    if d > spec.max_disparity as f64 {
        return Err(SynthError::DisparityTooLarge {
            label: obj.label.clone(),
            disparity: d as usize,
            max: spec.max_disparity,
        });
    }
    let u0 = rig.f * (obj.x - obj.width / 2.0) / obj.z + rig.cx;
    let u1 = rig.f * (obj.x + obj.width / 2.0) / obj.z + rig.cx;
    let v0 = rig.f * (obj.y - obj.height / 2.0) / obj.z + rig.cy;
    let v1 = rig.f * (obj.y + obj.height / 2.0) / obj.z + rig.cy;
    let (w, h) = (spec.image_width as f64, spec.image_height as f64);
    // The right-view copy starts d pixels further left.
    if u0 - d < 0.0 || v0 < 0.0 || u1 > w || v1 > h {
        return Err(SynthError::OutOfFrame {
            label: obj.label.clone(),
        });
    }
    let cols = (u0.ceil() as usize, u1.ceil() as usize);
    let rows = (v0.ceil() as usize, v1.ceil() as usize);
    if cols.0 >= cols.1 || rows.0 >= rows.1 {
        return Err(SynthError::InvalidScene(format!(
            "{}: covers no pixel",
            obj.label
        )));
    }
    Ok(Footprint {
        bbox: BoundingBox::new(u0, v0, u1, v1),
        cols,
        rows,
        disparity: d as usize,
    })
}

fn overlaps(a: &Footprint, b: &Footprint) -> bool {
    a.cols.0 < b.cols.1 && b.cols.0 < a.cols.1 && a.rows.0 < b.rows.1 && b.rows.0 < a.rows.1
}

fn texture(rng: &mut ChaCha8Rng, w: usize, h: usize) -> GrayImage {
    GrayImage::from_fn(w, h, |_, _| rng.gen())
}

/// Renders a scene: a textured background plane plus textured object
/// rectangles, nearer objects drawn last in both views.
pub fn generate_stereo_pair(spec: &SceneSpec) -> Result<StereoPair, SynthError> {
    let (w, h) = (spec.image_width, spec.image_height);
    let rig = &spec.rig;
    if w == 0 || h == 0 || !(rig.f > 0.0) || !(rig.baseline > 0.0) {
        return Err(SynthError::InvalidScene("image dims, f and B must be positive".into()));
    }
    if spec.max_disparity >= w {
        return Err(SynthError::InvalidScene(format!(
            "max_disparity {} must be below image width {w}",
            spec.max_disparity
        )));
    }
    if !(spec.background_z > 0.0) {
        return Err(SynthError::InvalidScene("background_z must be positive".into()));
    }
    let bg_d = integer_disparity(rig, spec.background_z);
    if bg_d > spec.max_disparity as f64 {
        return Err(SynthError::DisparityTooLarge {
            label: "background".into(),
            disparity: bg_d as usize,
            max: spec.max_disparity,
        });
    }
    let bg_d = bg_d as usize;

    let prints = spec
        .objects
        .iter()
        .map(|o| footprint(spec, o))
        .collect::<Result<Vec<_>, _>>()?;
    for i in 0..prints.len() {
        for j in i + 1..prints.len() {
            if spec.objects[i].z == spec.objects[j].z && overlaps(&prints[i], &prints[j]) {
                return Err(SynthError::EqualDepthOverlap(
                    spec.objects[i].label.clone(),
                    spec.objects[j].label.clone(),
                ));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.texture_seed);
    // Background texture lives in left-view coordinates; the right view
    // sees it shifted by the background disparity.
    let bg = texture(&mut rng, w + bg_d, h);
    let mut left = GrayImage::from_fn(w, h, |u, v| bg.get(u, v));
    let mut right = GrayImage::from_fn(w, h, |u, v| bg.get(u + bg_d, v));
    let mut truth = DisparityMap::from_vec(w, h, vec![bg_d as u16; w * h])?;

    let textures: Vec<GrayImage> = prints
        .iter()
        .map(|p| texture(&mut rng, p.cols.1 - p.cols.0, p.rows.1 - p.rows.0))
        .collect();
    let mut order: Vec<usize> = (0..prints.len()).collect();
    order.sort_by(|&a, &b| spec.objects[b].z.total_cmp(&spec.objects[a].z));
    for i in order {
        let (p, tex) = (&prints[i], &textures[i]);
        for v in p.rows.0..p.rows.1 {
            for u in p.cols.0..p.cols.1 {
                let value = tex.get(u - p.cols.0, v - p.rows.0);
                left.set(u, v, value);
                right.set(u - p.disparity, v, value);
                truth.set(u, v, p.disparity as u16);
            }
        }
    }

    let detections = spec
        .objects
        .iter()
        .zip(&prints)
        .map(|(o, p)| Detection {
            label: o.label.clone(),
            score: 1.0,
            bbox: p.bbox,
            image_width: w,
            image_height: h,
        })
        .collect();
    Ok(StereoPair {
        left,
        right,
        truth,
        detections: DetectionFrame {
            frame_id: spec.frame_id.clone(),
            image_width: w,
            image_height: h,
            detections,
        },
    })
}

fn default_max_disparity() -> usize {
    64
}

/// One frame of a scene document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameScene {
    pub frame_id: String,
    pub background_z: f64,
    pub texture_seed: u64,
    #[serde(default)]
    pub objects: Vec<SceneObject>,
}

/// Scene document accepted by `stereofuse synth`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneDocument {
    pub camera: RectifiedParams,
    pub image_width: usize,
    pub image_height: usize,
    #[serde(default = "default_max_disparity")]
    pub max_disparity: usize,
    pub frames: Vec<FrameScene>,
}

impl SceneDocument {
    pub fn parse(text: &str) -> Result<Self, SynthError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn frame_spec(&self, frame: &FrameScene) -> SceneSpec {
        SceneSpec {
            rig: self.camera,
            image_width: self.image_width,
            image_height: self.image_height,
            max_disparity: self.max_disparity,
            background_z: frame.background_z,
            objects: frame.objects.clone(),
            texture_seed: frame.texture_seed,
            frame_id: frame.frame_id.clone(),
        }
    }
}

/// Frame id made safe for use in a file name.
pub fn file_stem(frame_id: &str) -> String {
    frame_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

/// Renders every frame of `doc` into `out_dir`: per-frame left/right PNGs,
/// truth PGM and detection document, plus `calib.json` and `manifest.json`
/// ready for `stereofuse run`. Returns the manifest path.
pub fn write_scene(doc: &SceneDocument, out_dir: &Path) -> Result<PathBuf, SynthError> {
    fs::create_dir_all(out_dir)?;
    let mut entries = Vec::with_capacity(doc.frames.len());
    for frame in &doc.frames {
        let pair = generate_stereo_pair(&doc.frame_spec(frame))?;
        let stem = file_stem(&frame.frame_id);
        let names = [
            format!("left_{stem}.png"),
            format!("right_{stem}.png"),
            format!("detections_{stem}.json"),
        ];
        raster::save_png_gray(out_dir.join(&names[0]), &pair.left)?;
        raster::save_png_gray(out_dir.join(&names[1]), &pair.right)?;
        fs::write(out_dir.join(&names[2]), pair.detections.to_json())?;
        let truth = fs::File::create(out_dir.join(format!("truth_{stem}.pgm")))?;
        pair.truth.write_pgm(std::io::BufWriter::new(truth))?;
        entries.push(serde_json::json!({
            "frame_id": frame.frame_id,
            "left": names[0],
            "right": names[1],
            "detections": names[2],
        }));
    }
    fs::write(out_dir.join("calib.json"), StereoRig::rectified(doc.camera).to_json())?;
    let manifest = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&serde_json::json!({ "frames": entries }))?;
    fs::write(&manifest, text)?;
    Ok(manifest)
}
