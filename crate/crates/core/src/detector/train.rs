//! Supervised training of the grid detector.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use super::network::{self, DetectorParams, ParamGrads, RawGrid};
use super::{sigmoid, softmax, BoundingBox, HEAD_FIXED_CHANNELS, OBJECTNESS_CHANNEL};
use crate::error::{Error, Result};
use crate::image::{gaussian_blur, make_gaussian_kernel, Image8, ImageF};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthBox {
    pub bbox: BoundingBox,
    pub class_id: usize,
}

/// An image with its ground-truth annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub image: Image8,
    pub truth: Vec<TruthBox>,
}

/// Random perturbations applied to training images.
///
/// Occluders are square blocks of i.i.d. uniform noise pasted next to or over
/// the object, which teaches the detector to ignore unstructured clutter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    pub occluder_prob: f64,
    pub occluder_min: usize,
    pub occluder_max: usize,
    /// Largest gap between an occluder and the object box, in pixels.
    pub occluder_gap: usize,
    /// Width of the Gaussian low-pass applied to occluder noise, 0 for white noise.
    pub occluder_smoothing: f64,
    pub blur_prob: f64,
    pub blur_sigma: f64,
}

impl Augmentation {
    pub fn none() -> Self {
        Self { occluder_prob: 0.0, occluder_min: 1, occluder_max: 1, occluder_gap: 0, occluder_smoothing: 0.0, blur_prob: 0.0, blur_sigma: 0.8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Heavy-ball momentum coefficient, 0 for plain gradient descent.
    pub momentum: f64,
    pub seed: u64,
    /// Weight of the box regression term on positive cells.
    pub coord_weight: f64,
    /// Weight of the objectness term on cells without an object.
    pub noobj_weight: f64,
    /// Objectness target on cells holding an object; below 1 caps the logit.
    pub objectness_target: f64,
    pub augmentation: Augmentation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            learning_rate: 0.01,
            batch_size: 16,
            momentum: 0.9,
            seed: 0,
            coord_weight: 5.0,
            noobj_weight: 0.5,
            objectness_target: 1.0,
            augmentation: Augmentation::none(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingReport {
    pub params: DetectorParams,
    /// Mean mini-batch loss of each epoch, in order.
    pub loss_curve: Vec<f64>,
}

struct CellTarget {
    r: usize,
    c: usize,
    offsets: [f64; 4],
    class_id: usize,
}

fn targets(sample_truth: &[TruthBox], raw: &RawGrid, stride: usize, rows: usize, cols: usize) -> Vec<CellTarget> {
    let s = stride as f64;
    let mut out: Vec<CellTarget> = Vec::new();
    for t in sample_truth {
        let c = ((t.bbox.center_x / s).floor() as usize).min(raw.cols - 1);
        let r = ((t.bbox.center_y / s).floor() as usize).min(raw.rows - 1);
        let offsets = [
            (t.bbox.center_x / s - c as f64).clamp(0.0, 1.0),
            (t.bbox.center_y / s - r as f64).clamp(0.0, 1.0),
            t.bbox.width / cols as f64,
            t.bbox.height / rows as f64,
        ];
        out.retain(|e| (e.r, e.c) != (r, c));
        out.push(CellTarget { r, c, offsets, class_id: t.class_id });
    }
    out
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Per-image loss and its gradient w.r.t. the raw head output.
fn loss_and_head_grad(raw: &RawGrid, truth: &[TruthBox], cfg: &TrainConfig, stride: usize, rows: usize, cols: usize) -> (f64, RawGrid) {
    let tgts = targets(truth, raw, stride, rows, cols);
    let mut d = raw.zeros_like();
    let mut loss = 0.0;
    for r in 0..raw.rows {
        for c in 0..raw.cols {
            let positive = tgts.iter().find(|t| (t.r, t.c) == (r, c));
            let o = raw.at(OBJECTNESS_CHANNEL, r, c);
            let (y, w) = if positive.is_some() { (cfg.objectness_target, 1.0) } else { (0.0, cfg.noobj_weight) };
            loss += w * (softplus(o) - y * o);
            *d.at_mut(OBJECTNESS_CHANNEL, r, c) = w * (sigmoid(o) - y);
            if let Some(t) = positive {
                for (k, &target) in t.offsets.iter().enumerate() {
                    let p = sigmoid(raw.at(k, r, c));
                    loss += cfg.coord_weight * (p - target).powi(2);
                    *d.at_mut(k, r, c) = cfg.coord_weight * 2.0 * (p - target) * p * (1.0 - p);
                }
                let logits: Vec<f64> = (HEAD_FIXED_CHANNELS..raw.channels).map(|k| raw.at(k, r, c)).collect();
                let probs = softmax(&logits);
                loss -= probs[t.class_id].max(1e-300).ln();
                for (j, pj) in probs.iter().enumerate() {
                    let onehot = if j == t.class_id { 1.0 } else { 0.0 };
                    *d.at_mut(HEAD_FIXED_CHANNELS + j, r, c) = pj - onehot;
                }
            }
        }
    }
    (loss, d)
}

/// Detector loss of one annotated image: objectness cross-entropy on every
/// cell, squared error of the box terms and class cross-entropy on the cells
/// holding a box center.
pub fn training_loss(params: &DetectorParams, img: &ImageF, truth: &[TruthBox], cfg: &TrainConfig) -> Result<(f64, ParamGrads)> {
    let (raw, trace) = network::forward_traced(params, img)?;
    let (loss, d) = loss_and_head_grad(&raw, truth, cfg, params.cell_stride(), img.rows(), img.cols());
    let (_, grads) = network::backward(params, img, &trace, &d, true, false);
    Ok((loss, grads.expect("requested")))
}

fn box_gap(a_top: f64, a_left: f64, size: f64, b: &BoundingBox) -> f64 {
    let dx = (b.left() - (a_left + size)).max(a_left - b.right()).max(0.0);
    let dy = (b.top() - (a_top + size)).max(a_top - b.bottom()).max(0.0);
    dx.max(dy)
}

/// Uniform noise block, low-passed by a Gaussian of width `smoothing` and
/// stretched back to the full intensity range.
fn occluder_block(size: usize, channels: usize, smoothing: f64, rng: &mut impl Rng) -> ImageF {
    let values: Vec<f64> = (0..size * size * channels).map(|_| rng.random_range(0.0..=255.0)).collect();
    let block = ImageF::new(size, size, channels, values).expect("consistent block shape");
    if smoothing <= 0.0 {
        return block;
    }
    let radius = (2.0 * smoothing).ceil() as usize;
    let k = make_gaussian_kernel(2 * radius + 1, smoothing).expect("positive smoothing");
    let mut smooth = gaussian_blur(&block, &k);
    let (lo, hi) = smooth.pixels().iter().fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (hi - lo).max(1e-9);
    smooth.pixels_mut().iter_mut().for_each(|v| *v = (*v - lo) / span * 255.0);
    smooth
}

fn augment(sample: &TrainingSample, aug: &Augmentation, seed: u64) -> ImageF {
    let mut rng = seed::rng(seed);
    let mut img = sample.image.to_float();
    let (rows, cols) = (img.rows(), img.cols());
    if aug.occluder_prob > 0.0 && rng.random::<f64>() < aug.occluder_prob {
        let hi = aug.occluder_max.min(rows).min(cols).max(aug.occluder_min);
        let size = rng.random_range(aug.occluder_min..=hi);
        let anchor = sample.truth.first().map(|t| t.bbox);
        let mut origin = (rng.random_range(0..=rows - size), rng.random_range(0..=cols - size));
        if let Some(b) = anchor {
            // rejection sampling inside the ring around the object
            for _ in 0..64 {
                let cand = (rng.random_range(0..=rows - size), rng.random_range(0..=cols - size));
                if box_gap(cand.0 as f64, cand.1 as f64, size as f64, &b) <= aug.occluder_gap as f64 {
                    origin = cand;
                    break;
                }
            }
        }
        let block = occluder_block(size, img.channels(), aug.occluder_smoothing, &mut rng);
        for r in 0..size {
            for c in 0..size {
                for ch in 0..img.channels() {
                    img.set(origin.0 + r, origin.1 + c, ch, block.get(r, c, ch));
                }
            }
        }
    }
    if aug.blur_prob > 0.0 && rng.random::<f64>() < aug.blur_prob {
        let k = make_gaussian_kernel(3, aug.blur_sigma).expect("positive sigma");
        img = gaussian_blur(&img, &k);
    }
    img
}

/// Trains `params` by mini-batch gradient descent with heavy-ball momentum.
pub fn train_detector(mut params: DetectorParams, dataset: &[TrainingSample], cfg: &TrainConfig) -> Result<TrainingReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Parameter("batch size and learning rate must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::Parameter("momentum must lie in [0, 1)".into()));
    }
    let mut velocity = ParamGrads::zeros(&params);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut shuffle_rng = seed::rng(seed::derive(cfg.seed, "detector-shuffle"));
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(f64, ParamGrads)>> = batch
                .par_iter()
                .map(|&i| {
                    let s = &dataset[i];
                    let aug_seed = seed::derive_indexed(cfg.seed, "detector-augment", (epoch * dataset.len() + i) as u64);
                    let img = augment(s, &cfg.augmentation, aug_seed);
                    training_loss(&params, &img, &s.truth, cfg)
                })
                .collect();
            let mut total = ParamGrads::zeros(&params);
            for res in results {
                let (l, g) = res?;
                epoch_loss += l;
                total.add(&g);
            }
            let step = cfg.learning_rate / batch.len() as f64;
            for (li, layer) in params.layers.iter_mut().enumerate() {
                let vel = velocity.weights[li].iter_mut().zip(&total.weights[li]);
                for (w, (v, g)) in layer.weights.iter_mut().zip(vel) {
                    *v = cfg.momentum * *v + step * g;
                    *w = (f64::from(*w) - *v) as f32;
                }
                let vel = velocity.bias[li].iter_mut().zip(&total.bias[li]);
                for (b, (v, g)) in layer.bias.iter_mut().zip(vel) {
                    *v = cfg.momentum * *v + step * g;
                    *b = (f64::from(*b) - *v) as f32;
                }
            }
        }
        curve.push(epoch_loss / dataset.len() as f64);
    }
    if !params.is_finite() {
        return Err(Error::Parameter("detector training diverged".into()));
    }
    Ok(TrainingReport { params, loss_curve: curve })
}
