//! Dehazing quality and detection success over a dataset's test split.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{DatasetManifest, LoadedFrame, Split};
use crate::detector::{iou, DetectParams, Detection, DetectorModel};
use crate::error::{Error, Result};
use crate::gan::{DehazeModel, Dehazer};
use crate::imaging::{ImageBuffer, MetricsReport, SsimParams};

pub const MATCH_IOU: f64 = 0.5;

/// `hazy` (no-op baseline) and, with a dehazer, `dehazed` rows against the clear frames.
pub fn eval_dehaze(
    manifest: &DatasetManifest,
    dir: &Path,
    dehazer: Option<&dyn Dehazer>,
    ssim: &SsimParams,
) -> Result<Vec<MetricsReport>> {
    let frames = manifest.load_split(dir, Split::Test)?;
    if frames.is_empty() {
        return Err(Error::Dataset("test split is empty".into()));
    }
    let mut rows = vec![MetricsReport::evaluate("hazy", frames.iter().map(|f| (&f.hazy, &f.clear)), ssim)?];
    if let Some(d) = dehazer {
        let out: Vec<ImageBuffer> = frames.iter().map(|f| d.dehaze_image(&f.hazy)).collect::<Result<_>>()?;
        rows.push(MetricsReport::evaluate("dehazed", out.iter().zip(frames.iter().map(|f| &f.clear)), ssim)?);
    }
    Ok(rows)
}

/// Mean discriminator score on real and on generated test pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorScores {
    pub real: f64,
    pub generated: f64,
}

pub fn discriminator_scores(manifest: &DatasetManifest, dir: &Path, model: &DehazeModel) -> Result<DiscriminatorScores> {
    let frames = manifest.load_split(dir, Split::Test)?;
    if frames.is_empty() {
        return Err(Error::Dataset("test split is empty".into()));
    }
    let (mut real, mut generated) = (0.0, 0.0);
    for f in &frames {
        real += model.realness(&f.hazy, &f.clear)?;
        generated += model.realness(&f.hazy, &model.dehaze(&f.hazy)?)?;
    }
    let n = frames.len() as f64;
    Ok(DiscriminatorScores { real: real / n, generated: generated / n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub input: String,
    /// Frames with at least one truth box.
    pub annotated: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Reported detections that overlap no truth box.
    pub false_positives: usize,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub rows: Vec<DetectionRow>,
    pub params: DetectParams,
}

impl DetectionReport {
    pub fn rate(&self, input: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.input == input).map(|r| r.success_rate)
    }
}

pub const DETECTION_REPORT_CSV_HEADER: &str = "input,frames,annotated,successes,success_rate,false_positives";

pub fn detection_report_csv(report: &DetectionReport) -> String {
    let mut s = format!("{DETECTION_REPORT_CSV_HEADER}\n");
    for r in &report.rows {
        s.push_str(&format!(
            "{},{},{},{},{:.4},{}\n",
            r.input, r.frames, r.annotated, r.successes, r.success_rate, r.false_positives
        ));
    }
    s
}

/// Whether the highest-confidence detection overlaps a truth box at IoU >= 0.5.
pub fn top_detection_matches(dets: &[Detection], truth: &[(usize, crate::detector::BoundingBox)], params: &DetectParams) -> bool {
    let top = dets
        .iter()
        .filter(|d| d.confidence >= params.conf_threshold)
        .max_by(|a, b| a.confidence.total_cmp(&b.confidence));
    top.is_some_and(|d| truth.iter().any(|(_, t)| iou(&d.bbox, t) >= MATCH_IOU))
}

/// Score one set of inputs. Returns the row and the per-frame detections.
pub fn score_detections(
    input: &str,
    detector: &DetectorModel,
    frames: &[LoadedFrame],
    images: &[ImageBuffer],
    params: &DetectParams,
) -> Result<(DetectionRow, Vec<(String, Detection)>)> {
    let (mut annotated, mut successes, mut fps) = (0, 0, 0);
    let mut dump = Vec::new();
    for (f, img) in frames.iter().zip(images) {
        let dets = detector.detect(img, params)?;
        if !f.boxes.is_empty() {
            annotated += 1;
            successes += usize::from(top_detection_matches(&dets, &f.boxes, params));
        }
        fps += dets.iter().filter(|d| !f.boxes.iter().any(|(_, t)| iou(&d.bbox, t) >= MATCH_IOU)).count();
        dump.extend(dets.into_iter().map(|d| (f.frame_id.clone(), d)));
    }
    let success_rate = if annotated == 0 { 0.0 } else { successes as f64 / annotated as f64 };
    let row = DetectionRow { input: input.into(), annotated, successes, success_rate, false_positives: fps, frames: frames.len() };
    Ok((row, dump))
}

/// Success rates on the test split for clear, hazy and (optionally) dehazed inputs.
pub fn eval_detector(
    manifest: &DatasetManifest,
    dir: &Path,
    detector: &DetectorModel,
    dehazer: Option<&dyn Dehazer>,
    params: &DetectParams,
) -> Result<(DetectionReport, Vec<(String, Detection)>)> {
    let frames = manifest.load_split(dir, Split::Test)?;
    if !frames.iter().any(|f| !f.boxes.is_empty()) {
        return Err(Error::Dataset("test split has no annotated frames".into()));
    }
    let clear: Vec<ImageBuffer> = frames.iter().map(|f| f.clear.clone()).collect();
    let hazy: Vec<ImageBuffer> = frames.iter().map(|f| f.hazy.clone()).collect();
    let mut inputs = vec![("clear", clear), ("hazy", hazy)];
    if let Some(d) = dehazer {
        let out = frames.iter().map(|f| d.dehaze_image(&f.hazy)).collect::<Result<Vec<_>>>()?;
        inputs.push(("dehazed", out));
    }
    let mut rows = Vec::new();
    let mut dump = Vec::new();
    for (name, images) in &inputs {
        let (row, dets) = score_detections(name, detector, &frames, images, params)?;
        rows.push(row);
        dump.extend(dets.into_iter().map(|(id, d)| (format!("{name}/{id}"), d)));
    }
    Ok((DetectionReport { rows, params: *params }, dump))
}
