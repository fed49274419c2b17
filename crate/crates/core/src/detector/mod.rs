//! Miniature single-shot grid detector.
//!
//! The network maps an image to a grid of cells. Each cell predicts a box
//! (center offset inside the cell plus size relative to the image), an
//! objectness logit, and class logits. A cell's confidence for class `k` is
//! `sigmoid(objectness) * softmax(classes)[k]`.

mod boxes;
mod network;
mod train;
mod weights;

pub use boxes::{iou, nms, BoundingBox, Detection};
pub use network::{
    forward, Architecture, ConvLayer, DetectorParams, LayerSpec, ParamGrads, RawGrid, BOX_CHANNELS,
    HEAD_FIXED_CHANNELS, LEAKY_SLOPE, OBJECTNESS_CHANNEL,
};
pub use train::{train_detector, training_loss, Augmentation, TrainConfig, TrainingReport, TrainingSample, TruthBox};
pub use weights::{decode_weights, encode_weights, load_weights, save_weights};

use crate::error::{Error, Result};
use crate::image::{Image8, ImageF};

/// Detections below this confidence are not reported.
pub const CONFIDENCE_THRESHOLD: f64 = 0.3;
pub const NMS_IOU_THRESHOLD: f64 = 0.5;

/// Cell layout of a detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    pub cell_rows: usize,
    pub cell_cols: usize,
    /// Pixels per cell along each axis.
    pub stride: usize,
    pub classes: usize,
}

impl GridSpec {
    pub fn of(params: &DetectorParams) -> Self {
        let (cell_rows, cell_cols) = params.grid();
        Self { cell_rows, cell_cols, stride: params.cell_stride(), classes: params.classes() }
    }
}

/// Post-processing knobs of [`detect`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectConfig {
    pub conf_threshold: f64,
    pub iou_threshold: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self { conf_threshold: CONFIDENCE_THRESHOLD, iou_threshold: NMS_IOU_THRESHOLD }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl RawGrid {
    pub fn objectness(&self, r: usize, c: usize) -> f64 {
        sigmoid(self.at(OBJECTNESS_CHANNEL, r, c))
    }

    pub fn class_probs(&self, r: usize, c: usize) -> Vec<f64> {
        let logits: Vec<f64> = (HEAD_FIXED_CHANNELS..self.channels).map(|k| self.at(k, r, c)).collect();
        softmax(&logits)
    }

    /// `objectness × P(class)` for one cell.
    pub fn cell_confidence(&self, r: usize, c: usize, class_id: usize) -> f64 {
        self.objectness(r, c) * self.class_probs(r, c)[class_id]
    }

    /// Highest cell confidence for `class_id` and the cell that attains it
    /// (first in row-major order on ties).
    pub fn max_confidence(&self, class_id: usize) -> (f64, (usize, usize)) {
        let mut best = (f64::NEG_INFINITY, (0, 0));
        for r in 0..self.rows {
            for c in 0..self.cols {
                let v = self.cell_confidence(r, c, class_id);
                if v > best.0 {
                    best = (v, (r, c));
                }
            }
        }
        best
    }

    /// Decodes the predicted box of one cell, clamped to the image.
    pub fn cell_box(&self, r: usize, c: usize, stride: usize, img_rows: usize, img_cols: usize) -> BoundingBox {
        let s = stride as f64;
        let cx = (c as f64 + sigmoid(self.at(0, r, c))) * s;
        let cy = (r as f64 + sigmoid(self.at(1, r, c))) * s;
        let w = sigmoid(self.at(2, r, c)) * img_cols as f64;
        let h = sigmoid(self.at(3, r, c)) * img_rows as f64;
        BoundingBox::new(cx, cy, w, h).clamp_to(img_rows, img_cols)
    }
}

fn check_class(params: &DetectorParams, class_id: usize) -> Result<()> {
    if class_id >= params.classes() {
        return Err(Error::UnknownClass(class_id));
    }
    Ok(())
}

/// Smooth scene confidence: the maximum cell confidence for `class_id`,
/// computed before thresholding and NMS.
pub fn confidence(params: &DetectorParams, img: &ImageF, class_id: usize) -> Result<f64> {
    check_class(params, class_id)?;
    Ok(forward(params, img)?.max_confidence(class_id).0)
}

/// Scalar objective whose pixel gradient is requested from [`input_gradient`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub class_id: usize,
    /// Square the scene confidence before scaling.
    pub squared: bool,
    pub scale: f64,
}

impl LossSpec {
    pub fn squared_confidence(class_id: usize) -> Self {
        Self { class_id, squared: true, scale: 1.0 }
    }

    pub fn confidence(class_id: usize) -> Self {
        Self { class_id, squared: false, scale: 1.0 }
    }

    pub fn scaled(self, scale: f64) -> Self {
        Self { scale: self.scale * scale, ..self }
    }

    pub fn value(&self, conf: f64) -> f64 {
        self.scale * if self.squared { conf * conf } else { conf }
    }

    fn derivative(&self, conf: f64) -> f64 {
        self.scale * if self.squared { 2.0 * conf } else { 1.0 }
    }
}

/// Loss value, the scene confidence it was computed from, and the exact
/// gradient of the loss w.r.t. every input pixel.
#[derive(Debug, Clone)]
pub struct InputGradient {
    pub loss: f64,
    pub confidence: f64,
    pub grad: ImageF,
}

/// Exact reverse-mode gradient of `loss` w.r.t. the input pixels.
///
/// The scene confidence is a max over cells, so the gradient flows through
/// the maximizing cell only.
pub fn input_gradient(params: &DetectorParams, img: &ImageF, loss: &LossSpec) -> Result<InputGradient> {
    check_class(params, loss.class_id)?;
    let (raw, trace) = network::forward_traced(params, img)?;
    let (conf, (r, c)) = raw.max_confidence(loss.class_id);
    let dl = loss.derivative(conf);
    let mut d_out = raw.zeros_like();
    let obj = raw.objectness(r, c);
    let probs = raw.class_probs(r, c);
    let pk = probs[loss.class_id];
    *d_out.at_mut(OBJECTNESS_CHANNEL, r, c) = dl * conf * (1.0 - obj);
    for (j, pj) in probs.iter().enumerate() {
        let kron = if j == loss.class_id { 1.0 } else { 0.0 };
        *d_out.at_mut(HEAD_FIXED_CHANNELS + j, r, c) = dl * obj * pk * (kron - pj);
    }
    let (grad, _) = network::backward(params, img, &trace, &d_out, false, true);
    Ok(InputGradient { loss: loss.value(conf), confidence: conf, grad: grad.expect("requested") })
}

/// Turns a raw grid into thresholded, NMS-filtered detections.
pub fn decode_detections(raw: &RawGrid, spec: &GridSpec, img_rows: usize, img_cols: usize, cfg: &DetectConfig) -> Vec<Detection> {
    let mut cands = Vec::new();
    for r in 0..raw.rows {
        for c in 0..raw.cols {
            let probs = raw.class_probs(r, c);
            let best = probs.iter().cloned().fold(0.0, f64::max);
            let conf = raw.objectness(r, c) * best;
            if conf >= cfg.conf_threshold {
                cands.push(Detection {
                    bbox: raw.cell_box(r, c, spec.stride, img_rows, img_cols),
                    confidence: conf,
                    class_probs: probs,
                });
            }
        }
    }
    nms(&cands, cfg.iou_threshold)
}

/// Runs the detector on a float image and decodes its detections.
pub fn detect_f(params: &DetectorParams, img: &ImageF, cfg: &DetectConfig) -> Result<Vec<Detection>> {
    let raw = forward(params, img)?;
    Ok(decode_detections(&raw, &GridSpec::of(params), img.rows(), img.cols(), cfg))
}

/// Runs the detector on an 8-bit image with the default threshold and NMS.
pub fn detect(params: &DetectorParams, img: &Image8) -> Result<Vec<Detection>> {
    detect_f(params, &img.to_float(), &DetectConfig::default())
}

/// Confidence reported for a scene: the top surviving detection of
/// `class_id`, or 0 when nothing is reported.
pub fn reported_confidence(dets: &[Detection], class_id: usize) -> f64 {
    dets.iter()
        .filter(|d| d.class_id() == class_id)
        .map(|d| d.confidence)
        .fold(0.0, f64::max)
}

/// Reported scene confidence of a float image, equivalent to thresholding
/// the smooth confidence: `C` when `C ≥ 0.3`, else 0.
pub fn scene_confidence(params: &DetectorParams, img: &ImageF, class_id: usize) -> Result<f64> {
    check_class(params, class_id)?;
    let dets = detect_f(params, img, &DetectConfig::default())?;
    Ok(reported_confidence(&dets, class_id))
}

#[cfg(test)]
mod tests;
