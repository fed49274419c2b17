//! Boxes, detections, and greedy non-maximum suppression.

use std::cmp::Ordering;

/// Axis-aligned box given by its center and size, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub center_x: f64,
    pub center_y: f64,
    pub width: f64,
    pub height: f64,
}

impl BoundingBox {
    pub fn new(center_x: f64, center_y: f64, width: f64, height: f64) -> Self {
        Self { center_x, center_y, width, height }
    }

    /// Box covering pixel rows `top..=bottom` and columns `left..=right`.
    pub fn from_pixel_extent(top: usize, left: usize, bottom: usize, right: usize) -> Self {
        let w = (right + 1 - left) as f64;
        let h = (bottom + 1 - top) as f64;
        Self::new(left as f64 + w / 2.0, top as f64 + h / 2.0, w, h)
    }

    pub fn left(&self) -> f64 {
        self.center_x - self.width / 2.0
    }

    pub fn right(&self) -> f64 {
        self.center_x + self.width / 2.0
    }

    pub fn top(&self) -> f64 {
        self.center_y - self.height / 2.0
    }

    pub fn bottom(&self) -> f64 {
        self.center_y + self.height / 2.0
    }

    pub fn area(&self) -> f64 {
        self.width.max(0.0) * self.height.max(0.0)
    }

    /// Clips the box to `[0, cols] × [0, rows]`.
    pub fn clamp_to(&self, rows: usize, cols: usize) -> Self {
        let l = self.left().clamp(0.0, cols as f64);
        let r = self.right().clamp(0.0, cols as f64);
        let t = self.top().clamp(0.0, rows as f64);
        let b = self.bottom().clamp(0.0, rows as f64);
        Self::new((l + r) / 2.0, (t + b) / 2.0, r - l, b - t)
    }
}

/// Intersection over union of two boxes; 0 when both are empty.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.right().min(b.right()) - a.left().max(b.left())).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.top().max(b.top())).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// One reported object: box, confidence, and class distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub confidence: f64,
    pub class_probs: Vec<f64>,
}

impl Detection {
    pub fn class_id(&self) -> usize {
        self.class_probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(Ordering::Equal))
            .map_or(0, |(i, _)| i)
    }
}

/// Greedy NMS: keep the most confident box, drop every box whose IoU with it
/// exceeds `iou_threshold`, repeat. The result is sorted by decreasing
/// confidence; ties keep their input order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .partial_cmp(&dets[a].confidence)
            .unwrap_or(Ordering::Equal)
    });
    let mut keep: Vec<Detection> = Vec::new();
    for i in order {
        if keep.iter().all(|k| iou(&k.bbox, &dets[i].bbox) <= iou_threshold) {
            keep.push(dets[i].clone());
        }
    }
    keep
}
