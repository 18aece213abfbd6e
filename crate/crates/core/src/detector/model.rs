//! Detector training, inference and post-processing.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use usv_nn::{export_state, import_state, Adam, Mode, Scalar, Tensor};

use super::assign::{assign_targets, fit_anchors, GridSpec, TargetAssignment};
use super::geometry::{iou, BoundingBox};
use super::loss::{decode, total_loss_grad};
use super::net::{DetectorArch, DetectorNet};
use crate::checkpoint::{CheckpointKind, RawCheckpoint};
use crate::error::{Error, Result};
use crate::imaging::ImageBuffer;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Grid cells per side.
    pub k: usize,
    pub anchors_per_cell: usize,
    pub classes: usize,
    pub lambda_noobj: f64,
    pub arch: DetectorArch,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 8,
            lr: 2e-3,
            seed: 0,
            k: 8,
            anchors_per_cell: 2,
            classes: 6,
            lambda_noobj: 0.5,
            arch: DetectorArch::default(),
        }
    }
}

impl DetectorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.k == 0 || self.anchors_per_cell == 0 || self.classes == 0 {
            return Err(Error::Config("detector epochs, batch_size, k, anchors_per_cell and classes must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !(self.lambda_noobj >= 0.0) {
            return Err(Error::Config("detector lr must be > 0 and lambda_noobj >= 0".into()));
        }
        Ok(())
    }

    pub fn input_size(&self) -> usize {
        self.k * self.arch.stride()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorLossRecord {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectParams {
    pub conf_threshold: f64,
    pub iou_threshold: f64,
}

impl Default for DetectParams {
    fn default() -> Self {
        Self { conf_threshold: 0.5, iou_threshold: 0.5 }
    }
}

#[derive(Debug, Clone)]
pub struct DetectorModel {
    pub net: DetectorNet<f32>,
    pub config: DetectorTrainConfig,
    pub losses: Vec<DetectorLossRecord>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: DetectorTrainConfig,
    grid: GridSpec,
    losses: Vec<DetectorLossRecord>,
}

impl DetectorModel {
    pub fn new(config: DetectorTrainConfig, anchors: Vec<(f64, f64)>) -> Result<Self> {
        config.validate()?;
        let grid = GridSpec::new(config.k, anchors, config.classes, config.lambda_noobj)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let net = DetectorNet::new(config.arch.clone(), grid, &mut rng)?;
        Ok(Self { net, config, losses: Vec::new() })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.net.grid
    }

    /// Bring `image` to the network resolution by repeated 2x box downsampling.
    pub fn prepare(&self, image: &ImageBuffer) -> Result<ImageBuffer> {
        let s = self.net.input_size();
        let mut img = image.clone();
        while img.height() > s && img.height().is_multiple_of(2) && img.width().is_multiple_of(2) {
            img = img.downsample2()?;
        }
        if img.dims() != (s, s) {
            return Err(Error::InvalidArgument(format!(
                "detector needs {s}x{s} input (or a power-of-two multiple), got {:?}",
                image.dims()
            )));
        }
        Ok(img)
    }

    /// Every slot decoded, before thresholding.
    pub fn raw_detections(&self, image: &ImageBuffer) -> Result<Vec<Detection>> {
        let img = self.prepare(image)?;
        let raw: Vec<f64> = self.net.infer(&img.to_tensor::<f32>()).data().iter().map(|&v| v as f64).collect();
        let preds = decode(&raw, self.grid())?;
        Ok(preds
            .into_iter()
            .map(|p| {
                let class_id = p
                    .class_probs
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                    .map(|(c, _)| c)
                    .unwrap_or(0);
                Detection { bbox: p.bbox.clipped(), class_id, confidence: p.conf }
            })
            .collect())
    }

    /// Forward pass, decode, threshold and non-maximum suppression.
    pub fn detect(&self, image: &ImageBuffer, params: &DetectParams) -> Result<Vec<Detection>> {
        Ok(nms(self.raw_detections(image)?, params.iou_threshold, params.conf_threshold))
    }

    pub fn to_checkpoint(&mut self) -> Result<RawCheckpoint<f32>> {
        let meta = serde_json::to_string(&Meta {
            config: self.config.clone(),
            grid: self.net.grid.clone(),
            losses: self.losses.clone(),
        })?;
        Ok(RawCheckpoint { kind: CheckpointKind::Detector, meta, arrays: export_state(&mut self.net) })
    }

    pub fn from_checkpoint(ckpt: &RawCheckpoint<f32>) -> Result<Self> {
        if ckpt.kind != CheckpointKind::Detector {
            return Err(Error::Checkpoint("not a detector checkpoint".into()));
        }
        let meta: Meta = serde_json::from_str(&ckpt.meta)?;
        let mut model = Self::new(meta.config, meta.grid.anchors)?;
        model.net.grid.lambda_noobj = meta.grid.lambda_noobj;
        model.losses = meta.losses;
        import_state(&mut model.net, &ckpt.arrays).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(model)
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&RawCheckpoint::load(path)?)
    }
}

/// Drop detections below `conf_threshold`, then greedily keep the most
/// confident one and suppress same-class boxes overlapping it by more than
/// `iou_threshold`.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f64, conf_threshold: f64) -> Vec<Detection> {
    dets.retain(|d| d.confidence >= conf_threshold);
    // stable sort keeps input order among equal confidences
    dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut keep: Vec<Detection> = Vec::new();
    for d in dets {
        if keep.iter().all(|k| k.class_id != d.class_id || iou(&k.bbox, &d.bbox) <= iou_threshold) {
            keep.push(d);
        }
    }
    keep
}

pub const DETECTION_CSV_HEADER: &str = "frame_id,class_id,conf,cx,cy,w,h";

pub fn detection_csv(rows: &[(String, Detection)]) -> String {
    let mut s = format!("{DETECTION_CSV_HEADER}\n");
    for (frame, d) in rows {
        s.push_str(&format!(
            "{frame},{},{},{},{},{},{}\n",
            d.class_id, d.confidence, d.bbox.cx, d.bbox.cy, d.bbox.w, d.bbox.h
        ));
    }
    s
}

/// One annotated training frame.
pub type AnnotatedFrame = (ImageBuffer, Vec<(usize, BoundingBox)>);

/// Train on annotated frames with the combined loss, Adam, fixed seed.
/// Anchors come from 2-means (or `anchors_per_cell`-means) over the truth sizes.
pub fn train_detector(frames: &[AnnotatedFrame], cfg: &DetectorTrainConfig) -> Result<DetectorModel> {
    cfg.validate()?;
    let sizes: Vec<(f64, f64)> = frames.iter().flat_map(|(_, b)| b.iter().map(|(_, bb)| (bb.w, bb.h))).collect();
    if frames.is_empty() || sizes.is_empty() {
        return Err(Error::Dataset("detector training needs at least one annotated frame".into()));
    }
    let anchors = fit_anchors(&sizes, cfg.anchors_per_cell, cfg.seed)?;
    let mut model = DetectorModel::new(cfg.clone(), anchors)?;
    let grid = model.grid().clone();

    let mut inputs = Vec::with_capacity(frames.len());
    let mut assigns: Vec<TargetAssignment> = Vec::with_capacity(frames.len());
    for (img, boxes) in frames {
        inputs.push(model.prepare(img)?.to_tensor::<f32>());
        assigns.push(assign_targets(boxes, &grid)?);
    }

    let mut opt = Adam::new(cfg.lr, 0.9, 0.999);
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xde7e_c70f);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = Tensor::stack(&batch.iter().map(|&i| inputs[i].clone()).collect::<Vec<_>>());
            let raw = model.net.forward(&x, Mode::Train);
            let mut grad = Tensor::<f32>::zeros(raw.shape());
            let scale = 1.0 / batch.len() as f64;
            for (j, &i) in batch.iter().enumerate() {
                let r: Vec<f64> = raw.sample(j).iter().map(|&v| v as f64).collect();
                let (loss, g) = total_loss_grad(&assigns[i], &r, &grid)?;
                sum += loss.total;
                for (dst, v) in grad.sample_mut(j).iter_mut().zip(g) {
                    *dst = <f32 as Scalar>::lit(v * scale);
                }
            }
            model.net.backward(&grad);
            opt.step(&mut model.net);
        }
        let loss = sum / frames.len() as f64;
        if !loss.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite detector loss at epoch {epoch}")));
        }
        log::info!("detector epoch {epoch}: loss {loss:.5}");
        model.losses.push(DetectorLossRecord { epoch, loss });
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(cx: f64, conf: f64, class_id: usize) -> Detection {
        Detection { bbox: BoundingBox::new(cx, 0.5, 0.2, 0.2).unwrap(), class_id, confidence: conf }
    }

    #[test]
    fn nms_cases() {
        assert!(nms(vec![], 0.5, 0.5).is_empty());
        let kept = nms(vec![det(0.5, 0.8, 0), det(0.5, 0.9, 0)], 0.5, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].confidence, 0.9);
        assert_eq!(nms(vec![det(0.2, 0.9, 0), det(0.8, 0.9, 0)], 0.5, 0.5).len(), 2);
        // other classes are not suppressed, low confidence is dropped
        assert_eq!(nms(vec![det(0.5, 0.9, 0), det(0.5, 0.8, 1), det(0.5, 0.3, 2)], 0.5, 0.5).len(), 2);
    }

    fn tiny_cfg(epochs: usize) -> DetectorTrainConfig {
        DetectorTrainConfig {
            epochs,
            batch_size: 2,
            k: 2,
            classes: 2,
            arch: DetectorArch { stem: 4, stages: vec![4, 4], neck: 4 },
            ..Default::default()
        }
    }

    fn frames(n: usize) -> Vec<AnnotatedFrame> {
        (0..n)
            .map(|i| {
                let mut img = ImageBuffer::filled(8, 8, [0.6, 0.7, 0.8]).unwrap();
                let x = 1 + i % 4;
                for y in 3..6 {
                    for xx in x..x + 3 {
                        img.set_pixel(y, xx, [0.1, 0.1, 0.1]);
                    }
                }
                let b = BoundingBox::from_corners(x as f64 / 8.0, 3.0 / 8.0, (x + 3) as f64 / 8.0, 6.0 / 8.0);
                (img, vec![(i % 2, b)])
            })
            .collect()
    }

    #[test]
    fn training_bookkeeping_determinism_and_round_trip() {
        let data = frames(4);
        let mut a = train_detector(&data, &tiny_cfg(1)).unwrap();
        assert_eq!(a.losses.len(), 1);
        let mut b = train_detector(&data, &tiny_cfg(1)).unwrap();
        let bytes = a.to_checkpoint().unwrap().to_bytes().unwrap();
        assert_eq!(bytes, b.to_checkpoint().unwrap().to_bytes().unwrap());
        let back = DetectorModel::from_checkpoint(&RawCheckpoint::from_bytes(&bytes).unwrap()).unwrap();
        let p = DetectParams::default();
        assert_eq!(back.detect(&data[0].0, &p).unwrap(), a.detect(&data[0].0, &p).unwrap());
    }

    #[test]
    fn unannotated_dataset_is_rejected() {
        let data: Vec<AnnotatedFrame> = frames(2).into_iter().map(|(i, _)| (i, vec![])).collect();
        assert!(train_detector(&data, &tiny_cfg(1)).is_err());
    }

    #[test]
    fn csv_layout() {
        let s = detection_csv(&[("f0".into(), det(0.5, 0.9, 1))]);
        assert!(s.starts_with("frame_id,class_id,conf,cx,cy,w,h\nf0,1,0.9,0.5,0.5,0.2,0.2"));
    }
}
