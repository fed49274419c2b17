//! Adversarial patch construction.
//!
//! A patch is a square block of intensities pasted over an image at a random
//! location near the object. It is optimized to minimize the mean squared
//! scene confidence over many random placements, using sign-of-gradient steps
//! with momentum and clipping to the valid intensity range.

mod heatmap;
mod io;
mod placement;

pub use heatmap::{confidence_heatmap, Heatmap, HeatmapCell};
pub use io::{decode_patch_values, encode_patch_values, load_patch, save_patch, write_curve_csv};
pub use placement::{make_mask, patch_gap, sample_placements, FeasibleSet, Placement, PlacementMask};

use rand::Rng;
use rayon::prelude::*;

use crate::detector::{input_gradient, BoundingBox, DetectorParams, LossSpec};
use crate::error::{Error, Result};
use crate::image::ImageF;
use crate::seed;

pub const INTENSITY_MAX: f64 = 255.0;

/// A trainable square block of intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    size: usize,
    values: Vec<f64>,
}

impl Patch {
    pub fn new(size: usize, values: Vec<f64>) -> Result<Self> {
        if size == 0 || values.len() != size * size {
            return Err(Error::Parameter(format!("patch of size {size} needs {} values, got {}", size * size, values.len())));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > INTENSITY_MAX) {
            return Err(Error::Parameter("patch values must lie in [0, 255]".into()));
        }
        Ok(Self { size, values })
    }

    pub fn filled(size: usize, value: f64) -> Result<Self> {
        Self::new(size, vec![value; size * size])
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.size + c]
    }
}

/// Patch with i.i.d. uniform values in `[0, 255]`.
pub fn random_noise_patch(size: usize, seed: u64) -> Result<Patch> {
    if size == 0 {
        return Err(Error::Parameter("patch size must be at least 1".into()));
    }
    let mut rng = seed::rng(seed);
    Patch::new(size, (0..size * size).map(|_| rng.random_range(0.0..=INTENSITY_MAX)).collect())
}

/// Pastes `z` into `x` under `mask`: `(1 - m) ⊙ x + m ⊙ z`, every channel.
pub fn apply_patch(x: &ImageF, z: &Patch, mask: &PlacementMask) -> Result<ImageF> {
    if mask.rows() != x.rows() || mask.cols() != x.cols() || mask.size() != z.size() {
        return Err(Error::Dimension(format!(
            "mask {}x{} (patch {}) does not fit image {}x{} with patch {}",
            mask.rows(), mask.cols(), mask.size(), x.rows(), x.cols(), z.size()
        )));
    }
    let mut out = x.clone();
    let (i, j) = mask.origin();
    for r in 0..z.size() {
        for c in 0..z.size() {
            for ch in 0..x.channels() {
                out.set(i + r, j + c, ch, z.get(r, c));
            }
        }
    }
    Ok(out)
}

/// Random-placement family of the expectation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EotConfig {
    /// Placements drawn per optimization step.
    pub transforms_per_step: usize,
    /// Largest allowed gap between the patch and the object box, in pixels.
    pub offset_limit: usize,
    pub seed: u64,
}

impl EotConfig {
    pub fn validate(&self) -> Result<()> {
        if self.transforms_per_step == 0 {
            return Err(Error::Config("transforms_per_step must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FgsmConfig {
    /// Step magnitude in intensity units.
    pub epsilon: f64,
    /// Weight of the fresh gradient in the momentum blend.
    pub alpha: f64,
    pub iterations: usize,
    pub clip_lo: f64,
    pub clip_hi: f64,
}

impl FgsmConfig {
    pub fn new(epsilon: f64, alpha: f64, iterations: usize) -> Self {
        Self { epsilon, alpha, iterations, clip_lo: 0.0, clip_hi: INTENSITY_MAX }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!("epsilon must be non-negative, got {}", self.epsilon)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.clip_lo <= self.clip_hi) || self.clip_lo < 0.0 || self.clip_hi > INTENSITY_MAX {
            return Err(Error::Config("clip bounds must satisfy 0 <= lo <= hi <= 255".into()));
        }
        Ok(())
    }
}

/// Previous blended gradient, all zeros before the first step.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    pub prev_grad: Vec<f64>,
}

impl MomentumState {
    pub fn new(size: usize) -> Self {
        Self { prev_grad: vec![0.0; size * size] }
    }
}

/// `alpha · grad_now + (1 − alpha) · prev`; the result becomes the new `prev`.
pub fn momentum_blend(grad_now: &[f64], state: &mut MomentumState, alpha: f64) -> Result<Vec<f64>> {
    if grad_now.len() != state.prev_grad.len() {
        return Err(Error::Dimension("gradient and momentum state differ in size".into()));
    }
    let out: Vec<f64> = grad_now
        .iter()
        .zip(&state.prev_grad)
        .map(|(g, p)| alpha * g + (1.0 - alpha) * p)
        .collect();
    state.prev_grad.clone_from(&out);
    Ok(out)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One descent step: `clip(z − ε · sign(grad), lo, hi)`, with `sign(0) = 0`.
pub fn fgsm_step(z: &Patch, grad: &[f64], cfg: &FgsmConfig) -> Result<Patch> {
    if grad.len() != z.values.len() {
        return Err(Error::Dimension("gradient and patch differ in size".into()));
    }
    let values = z
        .values
        .iter()
        .zip(grad)
        .map(|(v, g)| (v - cfg.epsilon * sign(*g)).clamp(cfg.clip_lo, cfg.clip_hi))
        .collect();
    Ok(Patch { size: z.size, values })
}

/// An image under attack and the box of the object the patch must hide.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetImage {
    pub image: ImageF,
    pub object: BoundingBox,
}

/// One patched view: which image, and where the patch goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlacedView {
    pub image: usize,
    pub placement: Placement,
}

/// Squared-confidence objective and its gradient w.r.t. the patch pixels.
#[derive(Debug, Clone)]
pub struct EotEvaluation {
    /// Mean of squared scene confidence over the views.
    pub loss: f64,
    /// Mean (unsquared) scene confidence over the views.
    pub mean_confidence: f64,
    /// `size × size`, row-major.
    pub grad: Vec<f64>,
}

fn check_views(images: &[ImageF], z: &Patch, views: &[PlacedView]) -> Result<()> {
    if images.is_empty() || views.is_empty() {
        return Err(Error::Parameter("expectation needs at least one image and one placement".into()));
    }
    for v in views {
        let img = images
            .get(v.image)
            .ok_or_else(|| Error::Parameter(format!("view refers to missing image {}", v.image)))?;
        let (i, j) = v.placement;
        if i + z.size() > img.rows() || j + z.size() > img.cols() {
            return Err(Error::Placement(format!("patch of size {} at ({i}, {j})", z.size())));
        }
    }
    Ok(())
}

/// Mean over views of the squared scene confidence of the patched image.
pub fn eot_loss(params: &DetectorParams, images: &[ImageF], z: &Patch, views: &[PlacedView], class_id: usize) -> Result<f64> {
    Ok(eot_evaluate(params, images, z, views, class_id)?.loss)
}

/// Loss plus its exact gradient w.r.t. the patch: the mean over views of the
/// detector's input gradient restricted to the masked region.
pub fn eot_evaluate(params: &DetectorParams, images: &[ImageF], z: &Patch, views: &[PlacedView], class_id: usize) -> Result<EotEvaluation> {
    check_views(images, z, views)?;
    let spec = LossSpec::squared_confidence(class_id);
    let n = z.size();
    let per_view: Vec<Result<(f64, f64, Vec<f64>)>> = views
        .par_iter()
        .map(|v| {
            let img = &images[v.image];
            let mask = make_mask(v.placement.0, v.placement.1, n, img.rows(), img.cols())?;
            let patched = apply_patch(img, z, &mask)?;
            let g = input_gradient(params, &patched, &spec)?;
            let mut local = vec![0.0; n * n];
            let (i, j) = v.placement;
            for r in 0..n {
                for c in 0..n {
                    for ch in 0..img.channels() {
                        local[r * n + c] += g.grad.get(i + r, j + c, ch);
                    }
                }
            }
            Ok((g.loss, g.confidence, local))
        })
        .collect();
    let mut loss = 0.0;
    let mut conf = 0.0;
    let mut grad = vec![0.0; n * n];
    for res in per_view {
        let (l, c, g) = res?;
        loss += l;
        conf += c;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    let k = views.len() as f64;
    grad.iter_mut().for_each(|v| *v /= k);
    Ok(EotEvaluation { loss: loss / k, mean_confidence: conf / k, grad })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub iteration: usize,
    pub loss: f64,
    pub mean_confidence: f64,
}

#[derive(Debug, Clone)]
pub struct PatchTraining {
    pub patch: Patch,
    pub curve: Vec<CurvePoint>,
}

/// Trains one patch jointly over all `images`.
///
/// Each iteration draws `transforms_per_step` views, cycling through the
/// images in order and placing the patch uniformly within the offset ring of
/// the object, then averages the exact per-view gradients, blends them with
/// momentum, and takes a clipped sign step. The patch starts as uniform noise.
pub fn train_patch(
    params: &DetectorParams,
    images: &[TargetImage],
    size: usize,
    eot: &EotConfig,
    fgsm: &FgsmConfig,
    init_seed: u64,
    class_id: usize,
) -> Result<PatchTraining> {
    train_patch_from(params, images, random_noise_patch(size, init_seed)?, eot, fgsm, class_id)
}

/// [`train_patch`] starting from a given patch.
pub fn train_patch_from(
    params: &DetectorParams,
    images: &[TargetImage],
    init: Patch,
    eot: &EotConfig,
    fgsm: &FgsmConfig,
    class_id: usize,
) -> Result<PatchTraining> {
    eot.validate()?;
    fgsm.validate()?;
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = init.size();
    let feasible: Vec<FeasibleSet> = images
        .iter()
        .map(|t| FeasibleSet::new(&t.object, n, t.image.rows(), t.image.cols(), eot.offset_limit))
        .collect::<Result<_>>()?;
    let plain: Vec<ImageF> = images.iter().map(|t| t.image.clone()).collect();
    let mut rng = seed::rng(eot.seed);
    let mut z = init;
    let mut momentum = MomentumState::new(n);
    let mut curve = Vec::with_capacity(fgsm.iterations);
    let mut cursor = 0usize;
    for it in 0..fgsm.iterations {
        let views: Vec<PlacedView> = (0..eot.transforms_per_step)
            .map(|_| {
                let image = cursor % images.len();
                cursor += 1;
                PlacedView { image, placement: feasible[image].sample(&mut rng) }
            })
            .collect();
        let eval = eot_evaluate(params, &plain, &z, &views, class_id)?;
        curve.push(CurvePoint { iteration: it, loss: eval.loss, mean_confidence: eval.mean_confidence });
        let blended = momentum_blend(&eval.grad, &mut momentum, fgsm.alpha)?;
        z = fgsm_step(&z, &blended, fgsm)?;
    }
    Ok(PatchTraining { patch: z, curve })
}
