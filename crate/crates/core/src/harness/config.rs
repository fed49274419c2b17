//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are comma
//! separated. Unknown or repeated keys are errors.

use std::fmt::Write as _;
use std::path::Path;

use crate::attack::{EotConfig, FgsmConfig};
use crate::detector::{Architecture, Augmentation, LayerSpec, TrainConfig};
use crate::error::{Error, Result};
use crate::image::NoiseParams;
use crate::seed;

use super::scene::SceneSpec;

trait Value: Sized {
    fn parse(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

impl Value for u64 {
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for usize {
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for f64 {
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok().filter(|v: &f64| v.is_finite())
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for bool {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "true" => Some(true),
            "false" => Some(false),
            _ => None,
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl<T: Value> Value for Vec<T> {
    fn parse(s: &str) -> Option<Self> {
        s.split(',').map(|p| T::parse(p.trim())).collect::<Option<Vec<T>>>().filter(|v| !v.is_empty())
    }
    fn render(&self) -> String {
        self.iter().map(Value::render).collect::<Vec<_>>().join(",")
    }
}

macro_rules! config {
    ($( $(#[doc = $doc:literal])* $key:ident : $ty:ty = $default:expr, )*) => {
        /// Every tunable of an experiment, with defaults for the desk-scale
        /// setup.
        #[derive(Debug, Clone, PartialEq)]
        pub struct ExperimentConfig {
            $( $(#[doc = $doc])* pub $key: $ty, )*
        }

        impl Default for ExperimentConfig {
            fn default() -> Self {
                Self { $( $key: $default, )* }
            }
        }

        impl ExperimentConfig {
            /// Every key, in declaration order.
            pub const KEYS: &'static [&'static str] = &[$( stringify!($key), )*];

            fn set(&mut self, key: &str, raw: &str) -> Result<()> {
                match key {
                    $( stringify!($key) => {
                        self.$key = Value::parse(raw).ok_or_else(|| {
                            Error::Config(format!("bad value {raw:?} for {key}"))
                        })?;
                    } )*
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }

            /// `(key, value)` pairs in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$( (stringify!($key), Value::render(&self.$key)), )*]
            }
        }
    };
}

config! {
    /// Master seed; every random stream is derived from it by name.
    seed: u64 = 7,

    image_rows: usize = 96,
    image_cols: usize = 96,
    body_width_min: usize = 14,
    body_width_max: usize = 20,
    body_height_min: usize = 24,
    body_height_max: usize = 32,
    head_ratio_min: f64 = 0.3,
    head_ratio_max: f64 = 0.4,
    background_min: f64 = 70.0,
    background_max: f64 = 150.0,
    background_cell: usize = 12,
    bright_min: f64 = 195.0,
    bright_max: f64 = 245.0,
    dark_min: f64 = 10.0,
    dark_max: f64 = 35.0,
    pixel_noise: f64 = 4.0,
    distractors_min: usize = 0,
    distractors_max: usize = 2,
    margin: usize = 4,

    /// Patch experiment split.
    n_train: usize = 32,
    n_test: usize = 3,

    detector_person_scenes: usize = 1200,
    detector_background_scenes: usize = 400,
    /// Held-out scenes of each kind for the detector quality gate.
    detector_eval_scenes: usize = 60,
    global_context: bool = true,
    instance_norm: bool = true,
    epochs: usize = 20,
    learning_rate: f64 = 0.01,
    batch_size: usize = 16,
    momentum: f64 = 0.9,
    coord_weight: f64 = 5.0,
    noobj_weight: f64 = 0.5,
    objectness_target: f64 = 0.97,
    occluder_prob: f64 = 0.3,
    occluder_min: usize = 8,
    occluder_max: usize = 30,
    occluder_gap: usize = 6,
    occluder_smoothing: f64 = 1.5,
    train_blur_prob: f64 = 0.0,
    train_blur_sigma: f64 = 0.8,

    patch_size: usize = 23,
    sweep_sizes: Vec<usize> = vec![5, 12, 16, 23, 35],
    iterations: usize = 1000,
    epsilon: f64 = 2.0,
    alpha: f64 = 0.5,
    transforms: usize = 16,
    offset_limit: usize = 6,
    /// Placements per image when scoring a patch.
    eval_placements: usize = 16,

    sweep_epsilons: Vec<f64> = vec![0.5, 2.0, 8.0, 20.0],
    sweep_transforms: Vec<usize> = vec![5, 20, 100],
    /// Patched views per hyper-parameter cell (iterations × transforms).
    sweep_budget: usize = 4000,

    noise_mu: f64 = 0.0,
    noise_sigma: f64 = 10.0,
    noise_grid_mu: Vec<f64> = vec![0.0, 10.0, 25.0, 50.0],
    noise_grid_sigma: Vec<f64> = vec![1.0, 10.0, 50.0, 100.0],
    blur_sigma: f64 = 0.8,

    heatmap_stride: usize = 2,

    /// Clean and attacked scenes in each of the calibration and evaluation
    /// splits of the attack classifier.
    detect_calibration: usize = 20,
    detect_evaluation: usize = 20,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: repeated key {key:?}", n + 1)));
            }
            cfg.set(key, value.trim()).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. A missing file is an I/O error, bad content a
    /// configuration error.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Full snapshot that parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            writeln!(out, "{k} = {v}").expect("writing to a String");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.scene()?;
        self.architecture().grid()?;
        let c = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::Config(msg.into())) };
        c(self.n_train >= 1 && self.n_test >= 1, "n_train and n_test must be at least 1")?;
        c(self.detector_person_scenes >= 1, "detector_person_scenes must be at least 1")?;
        c(self.detector_eval_scenes >= 1, "detector_eval_scenes must be at least 1")?;
        c(self.batch_size >= 1 && self.learning_rate > 0.0, "batch_size and learning_rate must be positive")?;
        c((0.0..1.0).contains(&self.momentum), "momentum must lie in [0, 1)")?;
        c(self.objectness_target > 0.0 && self.objectness_target <= 1.0, "objectness_target must lie in (0, 1]")?;
        c((0.0..=1.0).contains(&self.occluder_prob) && (0.0..=1.0).contains(&self.train_blur_prob), "probabilities must lie in [0, 1]")?;
        c(self.occluder_min >= 1 && self.occluder_min <= self.occluder_max, "occluder sizes must satisfy 1 <= min <= max")?;
        c(self.occluder_smoothing >= 0.0 && self.train_blur_sigma > 0.0, "occluder_smoothing must be >= 0 and train_blur_sigma > 0")?;
        let fits = |n: usize| n >= 1 && n <= self.image_rows && n <= self.image_cols;
        c(fits(self.patch_size) && self.sweep_sizes.iter().all(|&n| fits(n)), "patch sizes must fit the image")?;
        self.fgsm().validate()?;
        self.eot().validate()?;
        c(self.eval_placements >= 1, "eval_placements must be at least 1")?;
        c(self.sweep_epsilons.iter().all(|&e| e >= 0.0), "sweep_epsilons must be non-negative")?;
        c(self.sweep_transforms.iter().all(|&t| t >= 1 && t <= self.sweep_budget), "sweep_transforms must lie in [1, sweep_budget]")?;
        c(self.noise_sigma >= 0.0 && self.noise_grid_sigma.iter().all(|&s| s >= 0.0), "noise sigmas must be non-negative")?;
        c(self.blur_sigma > 0.0, "blur_sigma must be positive")?;
        c(self.heatmap_stride >= 1, "heatmap_stride must be positive")?;
        c(self.detect_calibration >= 1 && self.detect_evaluation >= 1, "attack detection splits must be non-empty")?;
        Ok(())
    }

    /// Sub-seed of the stream `name`.
    pub fn stream(&self, name: &str) -> u64 {
        seed::derive(self.seed, name)
    }

    pub fn scene(&self) -> Result<SceneSpec> {
        let spec = SceneSpec {
            rows: self.image_rows,
            cols: self.image_cols,
            contains_person: true,
            body_width: (self.body_width_min, self.body_width_max),
            body_height: (self.body_height_min, self.body_height_max),
            head_ratio: (self.head_ratio_min, self.head_ratio_max),
            background: (self.background_min, self.background_max),
            background_cell: self.background_cell,
            bright_figure: (self.bright_min, self.bright_max),
            dark_figure: (self.dark_min, self.dark_max),
            pixel_noise: self.pixel_noise,
            distractors: (self.distractors_min, self.distractors_max),
            margin: self.margin,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn architecture(&self) -> Architecture {
        let mut arch = Architecture { input_rows: self.image_rows, input_cols: self.image_cols, global_context: self.global_context, ..Architecture::default() };
        for l in &mut arch.hidden {
            *l = LayerSpec { normalize: self.instance_norm, ..*l };
        }
        arch
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            momentum: self.momentum,
            seed: self.stream("detector-train"),
            coord_weight: self.coord_weight,
            noobj_weight: self.noobj_weight,
            objectness_target: self.objectness_target,
            augmentation: Augmentation {
                occluder_prob: self.occluder_prob,
                occluder_min: self.occluder_min,
                occluder_max: self.occluder_max,
                occluder_gap: self.occluder_gap,
                occluder_smoothing: self.occluder_smoothing,
                blur_prob: self.train_blur_prob,
                blur_sigma: self.train_blur_sigma,
            },
        }
    }

    pub fn eot(&self) -> EotConfig {
        EotConfig { transforms_per_step: self.transforms, offset_limit: self.offset_limit, seed: self.stream("eot") }
    }

    pub fn fgsm(&self) -> FgsmConfig {
        FgsmConfig::new(self.epsilon, self.alpha, self.iterations)
    }

    /// Noise for view `index` of the stream `name`.
    pub fn noise(&self, mu: f64, sigma: f64, name: &str, index: u64) -> Result<NoiseParams> {
        NoiseParams::new(mu, sigma, seed::derive_indexed(self.stream("noise"), name, index))
    }
}
