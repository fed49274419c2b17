//! Experiment drivers: detector training, patch training, and the
//! mean-confidence tables for patch size, noise patches, noise and blur
//! countermeasures, placement heatmaps, hyper-parameters, and blur-delta
//! attack detection.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::attack::{
    apply_patch, confidence_heatmap, make_mask, random_noise_patch, sample_placements, train_patch, EotConfig, FeasibleSet,
    Heatmap, Patch, PatchTraining, Placement, TargetImage,
};
use crate::defense::{
    attack_score, calibrate_threshold, defend_blur_with, defend_noise, ranking_quality, AttackScore, Confusion,
    DetectorThreshold, LabeledScore,
};
use crate::detector::{
    detect, scene_confidence, train_detector, BoundingBox, DetectorParams, TrainingSample, CONFIDENCE_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::image::ImageF;
use crate::seed;

use super::config::ExperimentConfig;
use super::report::ExperimentReport;
use super::scene::{generate_dataset, render_scenes, PERSON_CLASS};

/// Named random streams, listed in every report.
pub const STREAMS: &[&str] = &[
    "dataset",
    "detector-data",
    "detector-init",
    "detector-train",
    "detector-eval",
    "patch-init",
    "eot",
    "eval-placement",
    "noise",
    "noise-patch",
    "attack-detection",
];

/// Scenes the patch is trained on and tested against.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: Vec<TargetImage>,
    pub test: Vec<TargetImage>,
}

fn targets(samples: &[TrainingSample]) -> Result<Vec<TargetImage>> {
    samples
        .iter()
        .map(|s| {
            let object = s.truth.first().ok_or_else(|| Error::Config("patch experiments need person scenes".into()))?.bbox;
            Ok(TargetImage { image: s.image.to_float(), object })
        })
        .collect()
}

pub fn patch_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    let (train, test) = generate_dataset(&cfg.scene()?, cfg.n_train, cfg.n_test, cfg.stream("dataset"))?;
    Ok(Datasets { train: targets(&train)?, test: targets(&test)? })
}

/// Person and background scenes the detector learns from.
pub fn detector_training_set(cfg: &ExperimentConfig) -> Result<Vec<TrainingSample>> {
    let spec = cfg.scene()?;
    let master = cfg.stream("detector-data");
    let mut data = render_scenes(&spec, cfg.detector_person_scenes, master, "person")?;
    data.extend(render_scenes(&spec.background_only(), cfg.detector_background_scenes, master, "background")?);
    Ok(data)
}

/// Held-out quality of a trained detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorGate {
    /// Mean reported confidence on person scenes.
    pub clean_mean: f64,
    /// Fraction of background scenes with any detection.
    pub false_detection_rate: f64,
    pub n_person: usize,
    pub n_background: usize,
}

pub fn detector_gate(cfg: &ExperimentConfig, params: &DetectorParams) -> Result<DetectorGate> {
    let spec = cfg.scene()?;
    let master = cfg.stream("detector-eval");
    let person = render_scenes(&spec, cfg.detector_eval_scenes, master, "person")?;
    let background = render_scenes(&spec.background_only(), cfg.detector_eval_scenes, master, "background")?;
    let confs: Vec<f64> = person
        .par_iter()
        .map(|s| scene_confidence(params, &s.image.to_float(), PERSON_CLASS))
        .collect::<Result<_>>()?;
    let fired: Vec<bool> = background
        .par_iter()
        .map(|s| detect(params, &s.image).map(|d| !d.is_empty()))
        .collect::<Result<_>>()?;
    Ok(DetectorGate {
        clean_mean: confs.iter().sum::<f64>() / confs.len() as f64,
        false_detection_rate: fired.iter().filter(|&&f| f).count() as f64 / fired.len() as f64,
        n_person: person.len(),
        n_background: background.len(),
    })
}

#[derive(Debug, Clone)]
pub struct DetectorRun {
    pub params: DetectorParams,
    pub loss_curve: Vec<f64>,
    pub gate: DetectorGate,
}

pub fn run_train_detector(cfg: &ExperimentConfig) -> Result<DetectorRun> {
    cfg.validate()?;
    let data = detector_training_set(cfg)?;
    let init = DetectorParams::init(cfg.architecture(), cfg.stream("detector-init"))?;
    let trained = train_detector(init, &data, &cfg.train_config())?;
    let gate = detector_gate(cfg, &trained.params)?;
    Ok(DetectorRun { params: trained.params, loss_curve: trained.loss_curve, gate })
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Post {
    Nothing,
    Noise { mu: f64, sigma: f64 },
    Blur,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Split {
    Train,
    Test,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// A trained detector together with the patch datasets and the config.
#[derive(Debug, Clone, Copy)]
pub struct Lab<'a> {
    pub cfg: &'a ExperimentConfig,
    pub params: &'a DetectorParams,
    pub data: &'a Datasets,
}

impl<'a> Lab<'a> {
    pub fn new(cfg: &'a ExperimentConfig, params: &'a DetectorParams, data: &'a Datasets) -> Self {
        Self { cfg, params, data }
    }

    fn set(&self, split: Split) -> &'a [TargetImage] {
        match split {
            Split::Train => &self.data.train,
            Split::Test => &self.data.test,
        }
    }

    /// Empty report carrying the config snapshot and stream seeds.
    pub fn report(&self, name: &str) -> ExperimentReport {
        ExperimentReport {
            name: name.into(),
            n_train: self.data.train.len(),
            n_test: self.data.test.len(),
            seeds: STREAMS.iter().map(|s| (s.to_string(), self.cfg.stream(s))).collect(),
            config: self.cfg.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            ..Default::default()
        }
    }

    /// Placements used to score a patch of size `n` on image `k`. They are
    /// shared by every patch and countermeasure so rows are paired.
    pub fn eval_placements(&self, target: &TargetImage, split_name: &str, k: usize, n: usize) -> Result<Vec<Placement>> {
        let eot = EotConfig {
            transforms_per_step: self.cfg.eval_placements,
            offset_limit: self.cfg.offset_limit,
            seed: seed::derive_indexed(self.cfg.stream("eval-placement"), split_name, k as u64),
        };
        sample_placements(&eot, &target.object, n, target.image.rows(), target.image.cols())
    }

    fn post(&self, img: ImageF, post: Post, stream: &str, index: u64) -> Result<ImageF> {
        match post {
            Post::Nothing => Ok(img),
            Post::Noise { mu, sigma } => Ok(defend_noise(&img, &self.cfg.noise(mu, sigma, stream, index)?)),
            Post::Blur => defend_blur_with(&img, self.cfg.blur_sigma),
        }
    }

    /// Mean reported confidence over a split: one view per image without a
    /// patch, otherwise every evaluation placement of every image.
    fn mean(&self, split: Split, patch: Option<&Patch>, post: Post) -> Result<f64> {
        let set = self.set(split);
        let tag = match post {
            Post::Noise { mu, sigma } => format!("{}-{mu}-{sigma}-{}", split.name(), patch.is_some()),
            _ => String::new(),
        };
        let per_image: Vec<f64> = set
            .par_iter()
            .enumerate()
            .map(|(k, t)| -> Result<f64> {
                let Some(z) = patch else {
                    let img = self.post(t.image.clone(), post, &tag, k as u64)?;
                    return scene_confidence(self.params, &img, PERSON_CLASS);
                };
                let places = self.eval_placements(t, split.name(), k, z.size())?;
                let mut sum = 0.0;
                for (v, &(i, j)) in places.iter().enumerate() {
                    let mask = make_mask(i, j, z.size(), t.image.rows(), t.image.cols())?;
                    let index = (k * places.len() + v) as u64;
                    let img = self.post(apply_patch(&t.image, z, &mask)?, post, &tag, index)?;
                    sum += scene_confidence(self.params, &img, PERSON_CLASS)?;
                }
                Ok(sum / places.len() as f64)
            })
            .collect::<Result<_>>()?;
        Ok(per_image.iter().sum::<f64>() / per_image.len() as f64)
    }

    fn push(&self, report: &mut ExperimentReport, label: &str, patch: Option<&Patch>, post: Post) -> Result<()> {
        let train = self.mean(Split::Train, patch, post)?;
        let test = self.mean(Split::Test, patch, post)?;
        report.push_row(label, train, test);
        Ok(())
    }

    /// Trains one universal patch of size `n` on the training split.
    pub fn train_patch(&self, n: usize) -> Result<PatchTraining> {
        self.train_patch_with(n, self.cfg.epsilon, self.cfg.transforms, self.cfg.iterations)
    }

    fn train_patch_with(&self, n: usize, epsilon: f64, transforms: usize, iterations: usize) -> Result<PatchTraining> {
        let eot = EotConfig { transforms_per_step: transforms, ..self.cfg.eot() };
        let fgsm = crate::attack::FgsmConfig { epsilon, iterations, ..self.cfg.fgsm() };
        train_patch(self.params, &self.data.train, n, &eot, &fgsm, self.cfg.stream("patch-init"), PERSON_CLASS)
    }

    /// Clean confidences of both splits as a single-row report.
    pub fn run_clean_baseline(&self) -> Result<ExperimentReport> {
        let mut r = self.report("clean-baseline");
        self.push(&mut r, "No Patch", None, Post::Nothing)?;
        Ok(r)
    }

    /// One patch per size in `sweep_sizes`, plus a no-patch row. Notes the
    /// smallest size whose test mean falls below the reporting threshold.
    pub fn run_patch_size_sweep(&self) -> Result<(ExperimentReport, Vec<Patch>)> {
        let mut r = self.report("patch-size-sweep");
        self.push(&mut r, "No Patch", None, Post::Nothing)?;
        let mut sizes = self.cfg.sweep_sizes.clone();
        sizes.sort_unstable();
        sizes.dedup();
        let mut patches = Vec::new();
        let mut smallest = None;
        for n in sizes {
            let z = self.train_patch(n)?.patch;
            self.push(&mut r, &format!("{n}x{n}"), Some(&z), Post::Nothing)?;
            if smallest.is_none() && r.rows.last().expect("just pushed").test < CONFIDENCE_THRESHOLD {
                smallest = Some(n);
            }
            patches.push(z);
        }
        r.push_note("smallest_effective_size", smallest.map_or("none".to_string(), |n| n.to_string()));
        Ok((r, patches))
    }

    /// Clean, clean with a uniform-noise patch, and clean with the trained
    /// patch, all at the same placements.
    pub fn run_noise_patch_baseline(&self, patch: &Patch) -> Result<ExperimentReport> {
        let mut r = self.report("noise-patch-baseline");
        let noise = random_noise_patch(patch.size(), self.cfg.stream("noise-patch"))?;
        self.push(&mut r, "Original image", None, Post::Nothing)?;
        self.push(&mut r, "Image + 'Noise Patch'", Some(&noise), Post::Nothing)?;
        self.push(&mut r, "Perturbed image", Some(patch), Post::Nothing)?;
        let (clean, noisy, adv) = (r.rows[0].test, r.rows[1].test, r.rows[2].test);
        r.push_note("patch_size", patch.size());
        r.push_note("noise_patch_drop_test", clean - noisy);
        r.push_note("trained_patch_drop_test", clean - adv);
        Ok(r)
    }

    /// Additive Gaussian noise at `(noise_mu, noise_sigma)`, then perturbed
    /// images over the full `noise_grid_mu × noise_grid_sigma` grid.
    pub fn run_noise_defense(&self, patch: &Patch) -> Result<ExperimentReport> {
        let mut r = self.report("noise-defense");
        let noise = Post::Noise { mu: self.cfg.noise_mu, sigma: self.cfg.noise_sigma };
        self.push(&mut r, "Unmodified", None, Post::Nothing)?;
        self.push(&mut r, "Image + noise", None, noise)?;
        self.push(&mut r, "Perturbed image", Some(patch), Post::Nothing)?;
        self.push(&mut r, "Perturbed image + noise", Some(patch), noise)?;
        for &mu in &self.cfg.noise_grid_mu {
            for &sigma in &self.cfg.noise_grid_sigma {
                self.push(&mut r, &format!("Perturbed image + noise (mu={mu}, sigma={sigma})"), Some(patch), Post::Noise { mu, sigma })?;
            }
        }
        r.push_note("noise_mu", self.cfg.noise_mu);
        r.push_note("noise_sigma", self.cfg.noise_sigma);
        Ok(r)
    }

    pub fn run_blur_defense(&self, patch: &Patch) -> Result<ExperimentReport> {
        let mut r = self.report("blur-defense");
        self.push(&mut r, "Unmodified", None, Post::Nothing)?;
        self.push(&mut r, "Image + blur", None, Post::Blur)?;
        self.push(&mut r, "Perturbed image", Some(patch), Post::Nothing)?;
        self.push(&mut r, "Perturbed image + blur", Some(patch), Post::Blur)?;
        r.push_note("blur_sigma", self.cfg.blur_sigma);
        Ok(r)
    }

    /// Learning rate × transformation count grid at a fixed number of
    /// patched views per cell.
    pub fn run_hyperparam_sweep(&self) -> Result<ExperimentReport> {
        let mut r = self.report("hyperparameter-sweep");
        for &t in &self.cfg.sweep_transforms {
            let iterations = self.cfg.sweep_budget / t;
            let mut tests = Vec::new();
            for &eps in &self.cfg.sweep_epsilons {
                let z = self.train_patch_with(self.cfg.patch_size, eps, t, iterations)?.patch;
                self.push(&mut r, &format!("epsilon={eps} transforms={t}"), Some(&z), Post::Nothing)?;
                tests.push(r.rows.last().expect("just pushed").test);
            }
            let spread = tests.iter().cloned().fold(f64::MIN, f64::max) - tests.iter().cloned().fold(f64::MAX, f64::min);
            r.push_note(format!("epsilon_spread_transforms_{t}"), spread);
            r.push_note(format!("iterations_transforms_{t}"), iterations);
        }
        Ok(r)
    }

    /// Confidence as a function of patch center on every test image.
    pub fn run_heatmap(&self, patch: &Patch) -> Result<HeatmapRun> {
        let maps = self
            .data
            .test
            .par_iter()
            .map(|t| {
                confidence_heatmap(self.params, &t.image, patch, self.cfg.heatmap_stride, Some(&t.object), self.cfg.offset_limit, PERSON_CLASS)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(HeatmapRun { maps, objects: self.data.test.iter().map(|t| t.object).collect(), offset_limit: self.cfg.offset_limit })
    }

    /// Scores fresh clean and patched scenes, calibrates the blur-delta
    /// threshold on one split and applies it unchanged to the other.
    pub fn run_attack_detection(&self, patch: &Patch) -> Result<AttackDetectionRun> {
        let spec = self.cfg.scene()?;
        let master = self.cfg.stream("attack-detection");
        let score_split = |name: &str, count: usize| -> Result<(Vec<AttackScore>, Vec<AttackScore>, Vec<LabeledScore>)> {
            let clean_scenes = targets(&render_scenes(&spec, count, master, &format!("{name}-clean"))?)?;
            let attacked_scenes = targets(&render_scenes(&spec, count, master, &format!("{name}-attacked"))?)?;
            let clean: Vec<AttackScore> = clean_scenes
                .par_iter()
                .map(|t| attack_score(self.params, &t.image, PERSON_CLASS))
                .collect::<Result<_>>()?;
            let attacked: Vec<AttackScore> = attacked_scenes
                .par_iter()
                .enumerate()
                .map(|(k, t)| {
                    let n = patch.size();
                    let feasible = FeasibleSet::new(&t.object, n, t.image.rows(), t.image.cols(), self.cfg.offset_limit)?;
                    let mut rng = seed::rng(seed::derive_indexed(master, &format!("{name}-placement"), k as u64));
                    let (i, j) = feasible.sample(&mut rng);
                    let img = apply_patch(&t.image, patch, &make_mask(i, j, n, t.image.rows(), t.image.cols())?)?;
                    attack_score(self.params, &img, PERSON_CLASS)
                })
                .collect::<Result<_>>()?;
            let mut labeled = Vec::new();
            for (k, s) in clean.iter().enumerate() {
                labeled.push(LabeledScore { image_id: format!("{name}-clean-{k}"), score: *s, attacked: false });
            }
            for (k, s) in attacked.iter().enumerate() {
                labeled.push(LabeledScore { image_id: format!("{name}-attacked-{k}"), score: *s, attacked: true });
            }
            Ok((clean, attacked, labeled))
        };
        let (cal_clean, cal_attacked, mut scores) = score_split("calibration", self.cfg.detect_calibration)?;
        let (ev_clean, ev_attacked, ev_labeled) = score_split("evaluation", self.cfg.detect_evaluation)?;
        scores.extend(ev_labeled);
        let mut threshold = calibrate_threshold(&cal_clean, &cal_attacked)?;
        threshold.seed = Some(master);
        let confusion = Confusion::tally(&ev_clean, &ev_attacked, &threshold);
        let deltas = |s: &[AttackScore]| s.iter().map(|x| x.delta).collect::<Vec<f64>>();
        let quality = ranking_quality(&deltas(&ev_clean), &deltas(&ev_attacked))?;

        let mut r = self.report("attack-detection");
        r.n_train = cal_clean.len();
        r.n_test = ev_clean.len();
        let mean = |s: &[AttackScore], f: fn(&AttackScore) -> f64| s.iter().map(f).sum::<f64>() / s.len() as f64;
        r.push_row("Unmodified", mean(&cal_clean, |s| s.clean_conf), mean(&ev_clean, |s| s.clean_conf));
        r.push_row("Image + blur", mean(&cal_clean, |s| s.blurred_conf), mean(&ev_clean, |s| s.blurred_conf));
        r.push_row("Perturbed image", mean(&cal_attacked, |s| s.clean_conf), mean(&ev_attacked, |s| s.clean_conf));
        r.push_row("Perturbed image + blur", mean(&cal_attacked, |s| s.blurred_conf), mean(&ev_attacked, |s| s.blurred_conf));
        r.push_note("tau", threshold.tau);
        r.push_note("calibration_balanced_accuracy", threshold.balanced_accuracy);
        r.push_note("true_positive", confusion.true_positive);
        r.push_note("false_positive", confusion.false_positive);
        r.push_note("true_negative", confusion.true_negative);
        r.push_note("false_negative", confusion.false_negative);
        r.push_note("ranking_quality", quality);
        Ok(AttackDetectionRun { report: r, scores, threshold, confusion, ranking_quality: quality })
    }
}

#[derive(Debug, Clone)]
pub struct AttackDetectionRun {
    pub report: ExperimentReport,
    /// Calibration scores first, then evaluation scores.
    pub scores: Vec<LabeledScore>,
    pub threshold: DetectorThreshold,
    /// Counts on the evaluation split.
    pub confusion: Confusion,
    /// On the evaluation split.
    pub ranking_quality: f64,
}

/// Per-image heatmaps of one patch.
#[derive(Debug, Clone)]
pub struct HeatmapRun {
    pub maps: Vec<Heatmap>,
    pub objects: Vec<BoundingBox>,
    pub offset_limit: usize,
}

impl HeatmapRun {
    fn pooled(&self, pred: impl Fn(&crate::attack::HeatmapCell) -> bool) -> Vec<f64> {
        self.maps.iter().flat_map(|m| m.cells.iter()).filter(|c| pred(c)).filter_map(|c| c.confidence).collect()
    }

    /// Mean over edge-adjacent feasible centers outside the offset region,
    /// pooled over images.
    pub fn edge_mean(&self) -> Option<f64> {
        let v = self.pooled(|c| c.edge && !c.in_offset_region);
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Confidences at centers within the offset limit, pooled over images.
    pub fn offset_values(&self) -> Vec<f64> {
        self.pooled(|c| c.in_offset_region)
    }

    pub fn offset_mean(&self) -> Option<f64> {
        let v = self.offset_values();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Fraction of offset-region centers below the reporting threshold.
    pub fn offset_fraction_suppressed(&self) -> Option<f64> {
        let v = self.offset_values();
        (!v.is_empty()).then(|| v.iter().filter(|&&c| c < CONFIDENCE_THRESHOLD).count() as f64 / v.len() as f64)
    }

    /// Cell-wise mean over images; offset flags are dropped since every
    /// image has its own object.
    pub fn mean_map(&self) -> Heatmap {
        let mut mean = self.maps[0].clone();
        for (k, cell) in mean.cells.iter_mut().enumerate() {
            cell.in_offset_region = false;
            cell.confidence = cell
                .confidence
                .map(|_| self.maps.iter().filter_map(|m| m.cells[k].confidence).sum::<f64>() / self.maps.len() as f64);
        }
        mean
    }

    /// Text companion of the rendered map: geometry, object boxes, summary
    /// statistics, and the mean grid (`-` where the patch leaves the image).
    pub fn sidecar(&self) -> String {
        let m = self.mean_map();
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |x| x.to_string());
        let mut out = String::new();
        writeln!(out, "patch_size {}", m.patch_size).unwrap();
        writeln!(out, "stride {}", m.stride).unwrap();
        writeln!(out, "offset_limit {}", self.offset_limit).unwrap();
        for (k, b) in self.objects.iter().enumerate() {
            writeln!(out, "object {k} {} {} {} {}", b.center_x, b.center_y, b.width, b.height).unwrap();
        }
        writeln!(out, "edge_mean {}", opt(self.edge_mean())).unwrap();
        writeln!(out, "offset_region_mean {}", opt(self.offset_mean())).unwrap();
        writeln!(out, "offset_region_suppressed_fraction {}", opt(self.offset_fraction_suppressed())).unwrap();
        writeln!(out, "grid {} {}", m.lattice_rows, m.lattice_cols).unwrap();
        for lr in 0..m.lattice_rows {
            let line: Vec<String> = (0..m.lattice_cols)
                .map(|lc| m.cell(lr, lc).confidence.map_or("-".to_string(), |c| format!("{c:.4}")))
                .collect();
            writeln!(out, "{}", line.join(" ")).unwrap();
        }
        out
    }
}
