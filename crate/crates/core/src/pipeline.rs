//! Per-frame orchestration (rectify → disparity → detections → fusion →
//! reprojection → LDM) and manifest-driven sequence processing.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calib::{CalibError, Rectifier, StereoRig};
use crate::detect::{self, BoundingBox, DetectError, DetectionFrame};
use crate::disparity::{self, DisparityError, DisparityParams};
use crate::fusion::{self, FusionError, FusionOutcome};
use crate::ldm::{self, LdmError, LdmObject, LdmParams};
use crate::raster::{self, RasterError, RgbImage};
use crate::reproject::{self, ReprojectError, WorldPoint};
use crate::synth::file_stem;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Load,
    Rectify,
    Disparity,
    Detections,
    Fusion,
    Reproject,
    Render,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Load => "load",
            Stage::Rectify => "rectify",
            Stage::Disparity => "disparity",
            Stage::Detections => "detections",
            Stage::Fusion => "fusion",
            Stage::Reproject => "reproject",
            Stage::Render => "render",
            Stage::Write => "write",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Calib(#[from] CalibError),
    #[error(transparent)]
    Disparity(#[from] DisparityError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Reproject(#[from] ReprojectError),
    #[error(transparent)]
    Ldm(#[from] LdmError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Input(String),
}

#[derive(Debug, Error)]
#[error("frame {frame_id}: {stage}: {source}")]
pub struct FrameError {
    pub frame_id: String,
    pub stage: Stage,
    #[source]
    pub source: StageError,
}

trait AtStage<T> {
    fn at(self, stage: Stage, frame_id: &str) -> Result<T, FrameError>;
}

impl<T, E: Into<StageError>> AtStage<T> for Result<T, E> {
    fn at(self, stage: Stage, frame_id: &str) -> Result<T, FrameError> {
        self.map_err(|e| FrameError {
            frame_id: frame_id.to_owned(),
            stage,
            source: e.into(),
        })
    }
}

#[derive(Debug, Error)]
pub enum SequenceError {
    #[error("cannot read manifest {path}: {source}")]
    ManifestIo {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {source}")]
    ManifestParse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("cannot write output in {path}: {source}")]
    Output {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    /// Minimum detection confidence.
    pub threshold: f64,
    pub disparity: DisparityParams,
    /// Minimum number of valid disparities for a box to get a distance.
    pub min_valid: usize,
    pub ldm: LdmParams,
    /// Labels to keep; `None` keeps every label.
    pub labels: Option<Vec<String>>,
    /// Frames processed concurrently.
    pub jobs: usize,
    /// Include stage timings in per-frame reports (makes reports
    /// run-dependent).
    pub record_timings: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            threshold: 0.8,
            disparity: DisparityParams::default(),
            min_valid: 25,
            ldm: LdmParams::default(),
            labels: None,
            jobs: 1,
            record_timings: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(format!("threshold {} not in [0, 1]", self.threshold));
        }
        if self.jobs == 0 {
            return Err("jobs must be >= 1".into());
        }
        self.ldm.validate().map_err(|e| e.to_string())
    }
}

/// Milliseconds spent per stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StageTimings {
    pub load: f64,
    pub rectify: f64,
    pub disparity: f64,
    pub detections: f64,
    pub fusion: f64,
    pub reproject: f64,
    pub render: f64,
}

impl StageTimings {
    pub fn total(&self) -> f64 {
        self.load
            + self.rectify
            + self.disparity
            + self.detections
            + self.fusion
            + self.reproject
            + self.render
    }

    fn add(&mut self, o: &StageTimings) {
        self.load += o.load;
        self.rectify += o.rectify;
        self.disparity += o.disparity;
        self.detections += o.detections;
        self.fusion += o.fusion;
        self.reproject += o.reproject;
        self.render += o.render;
    }

    fn scaled(&self, k: f64) -> StageTimings {
        StageTimings {
            load: self.load * k,
            rectify: self.rectify * k,
            disparity: self.disparity * k,
            detections: self.detections * k,
            fusion: self.fusion * k,
            reproject: self.reproject * k,
            render: self.render * k,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ObjectReport {
    pub label: String,
    pub score: f64,
    /// Box in rectified-left-image pixels.
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub mean_disparity: Option<f64>,
    pub valid_pixel_count: usize,
    /// Representative pixel (centroid of valid disparities).
    pub pixel: Option<(f64, f64)>,
    pub world: Option<WorldPoint>,
    pub distance_euclid: Option<f64>,
    pub distance_z: Option<f64>,
    pub in_view: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameReport {
    pub frame_id: String,
    pub objects: Vec<ObjectReport>,
    pub timings: StageTimings,
}

#[derive(Serialize)]
struct FrameReportDoc<'a> {
    frame_id: &'a str,
    objects: &'a [ObjectReport],
    #[serde(skip_serializing_if = "Option::is_none")]
    timings_ms: Option<&'a StageTimings>,
}

impl FrameReport {
    pub fn to_json(&self, include_timings: bool) -> String {
        let doc = FrameReportDoc {
            frame_id: &self.frame_id,
            objects: &self.objects,
            timings_ms: include_timings.then_some(&self.timings),
        };
        serde_json::to_string_pretty(&doc).expect("report serializes")
    }
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Frame processor for one rig and configuration. Rectification maps are
/// built once per image size and shared across frames.
pub struct Pipeline {
    rig: StereoRig,
    config: PipelineConfig,
    ldm_h: nalgebra::Matrix3<f64>,
    rectifiers: Mutex<HashMap<(usize, usize), Arc<Rectifier>>>,
}

impl Pipeline {
    pub fn new(rig: StereoRig, config: PipelineConfig) -> Result<Self, SequenceError> {
        config.validate().map_err(SequenceError::Config)?;
        let ldm_h = ldm::build_ldm_homography(&config.ldm)
            .map_err(|e| SequenceError::Config(e.to_string()))?;
        Ok(Self {
            rig,
            config,
            ldm_h,
            rectifiers: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    fn rectifier(&self, dims: (usize, usize)) -> Result<Arc<Rectifier>, CalibError> {
        if let Some(r) = self.rectifiers.lock().expect("rectifier cache").get(&dims) {
            return Ok(r.clone());
        }
        let r = Arc::new(Rectifier::new(&self.rig, dims)?);
        self.rectifiers
            .lock()
            .expect("rectifier cache")
            .insert(dims, r.clone());
        Ok(r)
    }

    /// Runs one frame end to end. A box without enough valid disparities is
    /// reported without distance rather than failing the frame.
    pub fn run_frame(
        &self,
        left: &RgbImage,
        right: &RgbImage,
        detections: &DetectionFrame,
    ) -> Result<(FrameReport, RgbImage), FrameError> {
        let id = detections.frame_id.as_str();
        let cfg = &self.config;
        let mut timings = StageTimings::default();

        let t = Instant::now();
        if left.dims() != right.dims() {
            return Err(StageError::Input(format!(
                "left image is {:?}, right image is {:?}",
                left.dims(),
                right.dims()
            )))
            .at(Stage::Rectify, id);
        }
        let (w, h) = left.dims();
        let params = self.rig.rectified_params();
        if !(0.0..w as f64).contains(&params.cx) || !(0.0..h as f64).contains(&params.cy) {
            return Err(StageError::Input(format!(
                "principal point ({}, {}) outside {w}x{h} image",
                params.cx, params.cy
            )))
            .at(Stage::Rectify, id);
        }
        let rectifier = self.rectifier((w, h)).at(Stage::Rectify, id)?;
        let (gray_l, gray_r) = rectifier
            .apply(&left.to_gray(), &right.to_gray())
            .at(Stage::Rectify, id)?;
        let rect = rectifier.params();
        timings.rectify = elapsed_ms(t);

        let t = Instant::now();
        let dmap = disparity::compute_disparity_map(&gray_l, &gray_r, &cfg.disparity)
            .at(Stage::Disparity, id)?;
        timings.disparity = elapsed_ms(t);

        let t = Instant::now();
        let kept: Vec<_> = detect::filter_by_threshold(&detections.detections, cfg.threshold)
            .into_iter()
            .filter(|d| cfg.labels.as_ref().is_none_or(|l| l.contains(&d.label)))
            .map(|d| detect::rescale_box(&d, w, h))
            .collect::<Result<_, _>>()
            .at(Stage::Detections, id)?;
        timings.detections = elapsed_ms(t);

        let t = Instant::now();
        let outcomes = kept
            .iter()
            .map(|d| fusion::fuse_detection(&dmap, d, cfg.min_valid))
            .collect::<Result<Vec<_>, _>>()
            .at(Stage::Fusion, id)?;
        timings.fusion = elapsed_ms(t);

        let t = Instant::now();
        let mut objects = Vec::with_capacity(kept.len());
        let mut ldm_objects = Vec::new();
        for (det, outcome) in kept.iter().zip(&outcomes) {
            let stats = outcome.stats();
            let mut report = ObjectReport {
                label: det.label.clone(),
                score: det.score,
                bbox: det.bbox,
                mean_disparity: (stats.count > 0).then_some(stats.mean_d),
                valid_pixel_count: stats.count,
                pixel: None,
                world: None,
                distance_euclid: None,
                distance_z: None,
                in_view: false,
            };
            if let FusionOutcome::Fused { mean_d, pixel, .. } = *outcome {
                let world = reproject::pixel_to_world(pixel.0, pixel.1, mean_d, &rect)
                    .at(Stage::Reproject, id)?;
                let obj = LdmObject::new(det.label.clone(), world, &self.ldm_h, &cfg.ldm);
                report.pixel = Some(pixel);
                report.world = Some(world);
                report.distance_euclid = Some(obj.distance_euclid);
                report.distance_z = Some(obj.distance_z);
                report.in_view = obj.in_view;
                ldm_objects.push(obj);
            }
            objects.push(report);
        }
        timings.reproject = elapsed_ms(t);

        let t = Instant::now();
        let frame = ldm::render_ldm_frame(&ldm_objects, &cfg.ldm).at(Stage::Render, id)?;
        timings.render = elapsed_ms(t);

        log::debug!(
            "frame {id}: {} objects, disparity {:.1} ms, total {:.1} ms",
            objects.len(),
            timings.disparity,
            timings.total()
        );
        Ok((
            FrameReport {
                frame_id: id.to_owned(),
                objects,
                timings,
            },
            frame,
        ))
    }
}

/// Single-frame convenience wrapper around [`Pipeline::run_frame`].
pub fn run_frame(
    rig: &StereoRig,
    left: &RgbImage,
    right: &RgbImage,
    detections: &DetectionFrame,
    config: &PipelineConfig,
) -> Result<(FrameReport, RgbImage), FrameError> {
    let pipeline = Pipeline::new(rig.clone(), config.clone()).map_err(|e| FrameError {
        frame_id: detections.frame_id.clone(),
        stage: Stage::Load,
        source: StageError::Input(e.to_string()),
    })?;
    pipeline.run_frame(left, right, detections)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_id: Option<String>,
    pub left: PathBuf,
    pub right: PathBuf,
    pub detections: PathBuf,
}

/// Ordered list of frames. Relative paths resolve against the manifest's
/// directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub frames: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<(Self, PathBuf), SequenceError> {
        let text = fs::read_to_string(path).map_err(|source| SequenceError::ManifestIo {
            path: path.to_owned(),
            source,
        })?;
        let manifest = serde_json::from_str(&text).map_err(|source| SequenceError::ManifestParse {
            path: path.to_owned(),
            source,
        })?;
        let base = path.parent().map(Path::to_owned).unwrap_or_default();
        Ok((manifest, base))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameStatus {
    pub frame_id: String,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub objects: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SequenceSummary {
    pub frame_count: usize,
    pub error_count: usize,
    pub frames: Vec<FrameStatus>,
    pub timings_total_ms: StageTimings,
    pub timings_mean_ms: StageTimings,
}

impl SequenceSummary {
    /// Failure only when every frame of a non-empty sequence failed.
    pub fn success(&self) -> bool {
        self.frame_count == 0 || self.error_count < self.frame_count
    }
}

fn fallback_id(index: usize) -> String {
    format!("frame_{index:04}")
}

fn read_text(path: &Path) -> Result<String, StageError> {
    fs::read_to_string(path).map_err(|source| StageError::Io {
        path: path.to_owned(),
        source,
    })
}

fn process_entry(
    pipeline: &Pipeline,
    entry: &ManifestEntry,
    index: usize,
    base: &Path,
    out_dir: &Path,
) -> Result<FrameReport, FrameError> {
    let start = Instant::now();
    let mut id = entry.frame_id.clone().unwrap_or_else(|| fallback_id(index));
    let mut detections = read_text(&base.join(&entry.detections))
        .and_then(|t| detect::parse_detections(&t).map_err(StageError::from))
        .at(Stage::Load, &id)?;
    match &entry.frame_id {
        Some(fid) => detections.frame_id = fid.clone(),
        None => id = detections.frame_id.clone(),
    }
    let left = raster::load_rgb(base.join(&entry.left)).at(Stage::Load, &id)?;
    let right = raster::load_rgb(base.join(&entry.right)).at(Stage::Load, &id)?;
    let load_ms = elapsed_ms(start);

    let (mut report, frame) = pipeline.run_frame(&left, &right, &detections)?;
    report.timings.load = load_ms;

    let stem = file_stem(&id);
    let report_path = out_dir.join(format!("report_{stem}.json"));
    fs::write(&report_path, report.to_json(pipeline.config.record_timings)).map_err(|source| {
        FrameError {
            frame_id: id.clone(),
            stage: Stage::Write,
            source: StageError::Io {
                path: report_path.clone(),
                source,
            },
        }
    })?;
    raster::save_png_rgb(out_dir.join(format!("ldm_{stem}.png")), &frame).at(Stage::Write, &id)?;
    Ok(report)
}

/// Processes every manifest frame, writing `report_<id>.json`,
/// `ldm_<id>.png` and a final `summary.json` into `out_dir`. Frame failures
/// are recorded and do not stop the sequence.
pub fn run_sequence(
    manifest_path: &Path,
    rig: &StereoRig,
    config: &PipelineConfig,
    out_dir: &Path,
) -> Result<SequenceSummary, SequenceError> {
    let (manifest, base) = Manifest::load(manifest_path)?;
    let pipeline = Pipeline::new(rig.clone(), config.clone())?;
    fs::create_dir_all(out_dir).map_err(|source| SequenceError::Output {
        path: out_dir.to_owned(),
        source,
    })?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| SequenceError::Config(e.to_string()))?;
    let results: Vec<Result<FrameReport, FrameError>> = pool.install(|| {
        manifest
            .frames
            .par_iter()
            .enumerate()
            .map(|(i, entry)| process_entry(&pipeline, entry, i, &base, out_dir))
            .collect()
    });

    let mut total = StageTimings::default();
    let mut frames = Vec::with_capacity(results.len());
    for (i, result) in results.into_iter().enumerate() {
        match result {
            Ok(report) => {
                total.add(&report.timings);
                frames.push(FrameStatus {
                    frame_id: report.frame_id,
                    ok: true,
                    error: None,
                    objects: report.objects.len(),
                });
            }
            Err(e) => {
                log::warn!("{e}");
                let frame_id = if e.frame_id.is_empty() { fallback_id(i) } else { e.frame_id.clone() };
                frames.push(FrameStatus {
                    frame_id,
                    ok: false,
                    error: Some(e.to_string()),
                    objects: 0,
                });
            }
        }
    }
    let ok = frames.iter().filter(|f| f.ok).count();
    let summary = SequenceSummary {
        frame_count: frames.len(),
        error_count: frames.len() - ok,
        frames,
        timings_total_ms: total,
        timings_mean_ms: total.scaled(if ok > 0 { 1.0 / ok as f64 } else { 0.0 }),
    };
    let summary_path = out_dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&summary_path, text).map_err(|source| SequenceError::Output {
        path: summary_path,
        source,
    })?;
    Ok(summary)
}
