//! Input-preprocessing countermeasures and the blur-delta attack classifier.
//!
//! An image is flagged as attacked when a 3×3 Gaussian blur raises the
//! detector's confidence by more than a calibrated threshold.

use std::path::Path;

use crate::detector::{scene_confidence, DetectorParams};
use crate::error::{Error, Result};
use crate::image::{add_gaussian_noise, gaussian_blur, make_gaussian_kernel, ImageF, NoiseParams};

pub const BLUR_SIZE: usize = 3;
pub const BLUR_SIGMA: f64 = 0.8;

/// Additive Gaussian noise, clamped back to `[0, 255]`.
pub fn defend_noise(img: &ImageF, params: &NoiseParams) -> ImageF {
    let mut out = add_gaussian_noise(img, params);
    out.clamp_intensity();
    out
}

/// 3×3 Gaussian blur with the default width.
pub fn defend_blur(img: &ImageF) -> ImageF {
    defend_blur_with(img, BLUR_SIGMA).expect("default sigma is positive")
}

pub fn defend_blur_with(img: &ImageF, sigma: f64) -> Result<ImageF> {
    Ok(gaussian_blur(img, &make_gaussian_kernel(BLUR_SIZE, sigma)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackScore {
    pub clean_conf: f64,
    pub blurred_conf: f64,
    /// `blurred_conf - clean_conf`
    pub delta: f64,
}

impl AttackScore {
    pub fn new(clean_conf: f64, blurred_conf: f64) -> Self {
        Self { clean_conf, blurred_conf, delta: blurred_conf - clean_conf }
    }
}

/// Reported confidence of `img` before and after [`defend_blur`].
pub fn attack_score(params: &DetectorParams, img: &ImageF, class_id: usize) -> Result<AttackScore> {
    let clean = scene_confidence(params, img, class_id)?;
    let blurred = scene_confidence(params, &defend_blur(img), class_id)?;
    Ok(AttackScore::new(clean, blurred))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorThreshold {
    pub tau: f64,
    /// Balanced accuracy on the calibration lists.
    pub balanced_accuracy: f64,
    pub n_clean: usize,
    pub n_attacked: usize,
    /// Seed of the run that produced the calibration images, if any.
    pub seed: Option<u64>,
}

/// Mean of the true-positive and true-negative rates of the rule `delta > tau`.
pub fn balanced_accuracy(clean: &[f64], attacked: &[f64], tau: f64) -> f64 {
    let tn = clean.iter().filter(|&&d| d <= tau).count() as f64 / clean.len() as f64;
    let tp = attacked.iter().filter(|&&d| d > tau).count() as f64 / attacked.len() as f64;
    0.5 * (tn + tp)
}

/// Picks the threshold maximizing balanced accuracy among the midpoints
/// between consecutive distinct deltas and the largest delta (which flags
/// nothing), preferring the smallest on ties.
pub fn calibrate_threshold(clean: &[AttackScore], attacked: &[AttackScore]) -> Result<DetectorThreshold> {
    if clean.is_empty() || attacked.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dc: Vec<f64> = clean.iter().map(|s| s.delta).collect();
    let da: Vec<f64> = attacked.iter().map(|s| s.delta).collect();
    if dc.iter().chain(&da).any(|d| !d.is_finite()) {
        return Err(Error::Parameter("attack scores must be finite".into()));
    }
    let mut all: Vec<f64> = dc.iter().chain(&da).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let candidates = all.windows(2).map(|w| 0.5 * (w[0] + w[1])).chain(all.last().copied());
    let mut best: Option<(f64, f64)> = None;
    for tau in candidates {
        let acc = balanced_accuracy(&dc, &da, tau);
        if best.is_none_or(|(_, b)| acc > b) {
            best = Some((tau, acc));
        }
    }
    let (tau, balanced_accuracy) = best.expect("at least one candidate");
    Ok(DetectorThreshold { tau, balanced_accuracy, n_clean: clean.len(), n_attacked: attacked.len(), seed: None })
}

pub fn classify_attacked(score: &AttackScore, th: &DetectorThreshold) -> bool {
    score.delta > th.tau
}

/// Probability that a random attacked score exceeds a random clean one,
/// ties counting one half.
pub fn ranking_quality(clean: &[f64], attacked: &[f64]) -> Result<f64> {
    if clean.is_empty() || attacked.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut wins = 0.0;
    for a in attacked {
        for c in clean {
            wins += match a.total_cmp(c) {
                std::cmp::Ordering::Greater => 1.0,
                std::cmp::Ordering::Equal => 0.5,
                std::cmp::Ordering::Less => 0.0,
            };
        }
    }
    Ok(wins / (clean.len() * attacked.len()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub true_positive: usize,
    pub false_positive: usize,
    pub true_negative: usize,
    pub false_negative: usize,
}

impl Confusion {
    pub fn tally(clean: &[AttackScore], attacked: &[AttackScore], th: &DetectorThreshold) -> Self {
        let fp = clean.iter().filter(|s| classify_attacked(s, th)).count();
        let tp = attacked.iter().filter(|s| classify_attacked(s, th)).count();
        Self { true_positive: tp, false_positive: fp, true_negative: clean.len() - fp, false_negative: attacked.len() - tp }
    }

    pub fn total(&self) -> usize {
        self.true_positive + self.false_positive + self.true_negative + self.false_negative
    }
}

/// One scored image for the CSV dump.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScore {
    pub image_id: String,
    pub score: AttackScore,
    pub attacked: bool,
}

/// `image_id,clean_conf,blurred_conf,delta,label` with a header row; the
/// label is `attacked` or `clean`.
pub fn write_scores_csv(rows: &[LabeledScore], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["image_id", "clean_conf", "blurred_conf", "delta", "label"])?;
    for r in rows {
        w.write_record([
            r.image_id.clone(),
            r.score.clean_conf.to_string(),
            r.score.blurred_conf.to_string(),
            r.score.delta.to_string(),
            if r.attacked { "attacked" } else { "clean" }.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores_csv(path: impl AsRef<Path>) -> Result<Vec<LabeledScore>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |k: usize| -> Result<f64> {
            rec.get(k)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::MalformedHeader(format!("bad number in score row {:?}", rec)))
        };
        let attacked = match rec.get(4) {
            Some("attacked") => true,
            Some("clean") => false,
            _ => return Err(Error::MalformedHeader(format!("bad label in score row {:?}", rec))),
        };
        let (clean_conf, blurred_conf, delta) = (num(1)?, num(2)?, num(3)?);
        out.push(LabeledScore {
            image_id: rec.get(0).unwrap_or_default().to_string(),
            score: AttackScore { clean_conf, blurred_conf, delta },
            attacked,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::detector::{Architecture, LayerSpec};

    fn scores(deltas: &[f64]) -> Vec<AttackScore> {
        deltas.iter().map(|&d| AttackScore::new(0.5, 0.5 + d)).collect()
    }

    /// Exhaustive search over every midpoint and the top value.
    fn oracle_threshold(clean: &[f64], attacked: &[f64]) -> (f64, f64) {
        let mut all: Vec<f64> = clean.iter().chain(attacked).copied().collect();
        all.sort_by(f64::total_cmp);
        all.dedup();
        let mut cands = Vec::new();
        for a in 0..all.len() - 1 {
            cands.push((all[a] + all[a + 1]) / 2.0);
        }
        cands.push(all[all.len() - 1]);
        let mut best: Option<(f64, f64)> = None;
        for tau in cands {
            let mut tn = 0;
            for &d in clean {
                if !(d > tau) {
                    tn += 1;
                }
            }
            let mut tp = 0;
            for &d in attacked {
                if d > tau {
                    tp += 1;
                }
            }
            let acc = (tn as f64 / clean.len() as f64 + tp as f64 / attacked.len() as f64) / 2.0;
            if best.is_none_or(|(_, b)| acc > b) {
                best = Some((tau, acc));
            }
        }
        best.unwrap()
    }

    #[test]
    fn noise_with_zero_sigma_and_mean_is_identity() {
        let img = ImageF::new(2, 2, 1, vec![0.0, 10.0, 128.0, 255.0]).unwrap();
        assert_eq!(defend_noise(&img, &NoiseParams::new(0.0, 0.0, 1).unwrap()), img);
    }

    #[test]
    fn noise_output_is_clamped() {
        let img = ImageF::filled(8, 8, 1, 250.0);
        let out = defend_noise(&img, &NoiseParams::new(50.0, 100.0, 4).unwrap());
        assert!(out.pixels().iter().all(|v| (0.0..=255.0).contains(v)));
    }

    #[test]
    fn blur_keeps_constant_image() {
        let img = ImageF::filled(9, 9, 1, 77.0);
        let out = defend_blur(&img);
        assert!(out.pixels().iter().all(|v| (v - 77.0).abs() < 1e-9));
    }

    #[test]
    fn constant_image_scores_zero_delta() {
        let arch = Architecture {
            input_rows: 16,
            input_cols: 16,
            input_channels: 1,
            hidden: vec![LayerSpec::plain(3, 3, 2)],
            head_kernel: 1,
            classes: 1,
            global_context: false,
        };
        let params = DetectorParams::init(arch, 1).unwrap();
        let s = attack_score(&params, &ImageF::filled(16, 16, 1, 40.0), 0).unwrap();
        assert_eq!(s.delta, 0.0);
        assert!((0.0..=1.0).contains(&s.clean_conf) && (0.0..=1.0).contains(&s.blurred_conf));
    }

    #[test]
    fn delta_is_antisymmetric() {
        let a = AttackScore::new(0.2, 0.7);
        let b = AttackScore::new(0.7, 0.2);
        assert_eq!(a.delta, -b.delta);
    }

    #[test]
    fn separable_lists_give_perfect_accuracy() {
        let th = calibrate_threshold(&scores(&[0.0, 0.1]), &scores(&[0.6, 0.7])).unwrap();
        assert!(th.tau > 0.1 && th.tau < 0.6);
        assert_eq!(th.balanced_accuracy, 1.0);
        assert_eq!((th.n_clean, th.n_attacked), (2, 2));
    }

    #[test]
    fn identical_lists_carry_no_signal() {
        let d = [0.0, 0.1, 0.2, 0.3];
        let th = calibrate_threshold(&scores(&d), &scores(&d)).unwrap();
        assert!((th.balanced_accuracy - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_list_rejected() {
        assert!(matches!(calibrate_threshold(&[], &scores(&[0.1])), Err(Error::EmptyDataset)));
        assert!(matches!(calibrate_threshold(&scores(&[0.1]), &[]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn classification_is_strict() {
        let th = DetectorThreshold { tau: 0.2, balanced_accuracy: 1.0, n_clean: 1, n_attacked: 1, seed: None };
        assert!(!classify_attacked(&AttackScore { clean_conf: 0.0, blurred_conf: 0.2, delta: 0.2 }, &th));
        assert!(classify_attacked(&AttackScore { clean_conf: 0.0, blurred_conf: 0.21, delta: 0.21 }, &th));
        assert!(!classify_attacked(&AttackScore::new(0.6, 0.1), &th));
    }

    #[test]
    fn ranking_quality_counts_ties_half() {
        assert_eq!(ranking_quality(&[0.0, 0.1], &[0.5, 0.6]).unwrap(), 1.0);
        assert_eq!(ranking_quality(&[0.5], &[0.5]).unwrap(), 0.5);
        assert_eq!(ranking_quality(&[0.0, 0.6], &[0.5]).unwrap(), 0.5);
    }

    #[test]
    fn confusion_counts_sum_to_set_size() {
        let clean = scores(&[0.0, 0.3, 0.05]);
        let attacked = scores(&[0.5, 0.1]);
        let th = DetectorThreshold { tau: 0.2, balanced_accuracy: 0.0, n_clean: 3, n_attacked: 2, seed: None };
        let c = Confusion::tally(&clean, &attacked, &th);
        assert_eq!(c.total(), 5);
        assert_eq!((c.true_positive, c.false_positive), (1, 1));
    }

    #[test]
    fn scores_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        let rows = vec![
            LabeledScore { image_id: "test-0".into(), score: AttackScore::new(0.91, 0.88), attacked: false },
            LabeledScore { image_id: "test-0-patched".into(), score: AttackScore::new(0.1, 0.8123456789), attacked: true },
        ];
        write_scores_csv(&rows, &path).unwrap();
        assert_eq!(read_scores_csv(&path).unwrap(), rows);
    }

    proptest! {
        #[test]
        fn calibration_matches_exhaustive_search(
            clean in prop::collection::vec(-4i32..5, 1..=8),
            attacked in prop::collection::vec(-4i32..5, 1..=8),
        ) {
            // coarse grid values force plenty of ties
            let dc: Vec<f64> = clean.iter().map(|&v| f64::from(v) / 10.0).collect();
            let da: Vec<f64> = attacked.iter().map(|&v| f64::from(v) / 10.0).collect();
            let th = calibrate_threshold(&scores(&dc), &scores(&da)).unwrap();
            let dc: Vec<f64> = scores(&dc).iter().map(|s| s.delta).collect();
            let da: Vec<f64> = scores(&da).iter().map(|s| s.delta).collect();
            let (tau, acc) = oracle_threshold(&dc, &da);
            prop_assert_eq!(th.tau, tau);
            prop_assert_eq!(th.balanced_accuracy, acc);
            prop_assert!(th.balanced_accuracy >= 0.5);
        }
    }
}
