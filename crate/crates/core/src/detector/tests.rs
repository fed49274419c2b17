use super::*;
use crate::seed;
use rand::Rng;

fn tiny_arch(classes: usize) -> Architecture {
    Architecture {
        input_rows: 16,
        input_cols: 16,
        input_channels: 1,
        hidden: vec![
            LayerSpec::plain(4, 3, 2),
            LayerSpec::plain(6, 3, 2),
        ],
        head_kernel: 5,
        global_context: false,
        classes,
    }
}

// A random network whose head is not biased towards "no object", so that
// confidences and their gradients are of ordinary magnitude.
fn context_arch() -> Architecture {
    Architecture {
        hidden: vec![LayerSpec::normalized(4, 3, 2), LayerSpec::normalized(6, 3, 2)],
        global_context: true,
        ..tiny_arch(2)
    }
}

fn random_params(arch: Architecture, seed: u64) -> DetectorParams {
    let mut p = DetectorParams::init(arch, seed).unwrap();
    let mut rng = seed::rng(seed ^ 0xABCD);
    for l in &mut p.layers {
        for b in &mut l.bias {
            *b = rng.random_range(-0.3..0.3);
        }
        if !l.leaky {
            for w in &mut l.weights {
                *w *= 10.0;
            }
        }
    }
    p
}

fn random_image(rows: usize, cols: usize, seed: u64) -> ImageF {
    let mut rng = seed::rng(seed);
    ImageF::new(rows, cols, 1, (0..rows * cols).map(|_| rng.random_range(0.0..255.0)).collect()).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-12 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn grid(rows: usize, cols: usize, classes: usize) -> RawGrid {
    RawGrid { rows, cols, channels: HEAD_FIXED_CHANNELS + classes, data: vec![0.0; (HEAD_FIXED_CHANNELS + classes) * rows * cols] }
}

#[test]
fn confidence_in_unit_interval() {
    let params = DetectorParams::init(Architecture::default(), 1).unwrap();
    let img = random_image(96, 96, 2);
    let c = confidence(&params, &img, 0).unwrap();
    assert!(c > 0.0 && c < 1.0);
    let raw = forward(&params, &img).unwrap();
    for r in 0..raw.rows {
        for col in 0..raw.cols {
            let v = raw.cell_confidence(r, col, 0);
            assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn unknown_class_rejected() {
    let params = DetectorParams::init(tiny_arch(1), 1).unwrap();
    let img = random_image(16, 16, 2);
    assert!(matches!(confidence(&params, &img, 1), Err(Error::UnknownClass(1))));
    assert!(input_gradient(&params, &img, &LossSpec::confidence(3)).is_err());
}

#[test]
fn forward_is_continuous_in_pixels() {
    let params = random_params(tiny_arch(1), 5);
    let img = random_image(16, 16, 6);
    let base = forward(&params, &img).unwrap();
    for eps in [1e-2, 1e-4] {
        let mut moved = img.clone();
        moved.pixels_mut()[37] += eps;
        let out = forward(&params, &moved).unwrap();
        let diff = base.data.iter().zip(&out.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1.0 * eps, "change {diff} for eps {eps}");
    }
}

#[test]
fn input_gradient_matches_central_differences() {
    for (arch, seed) in [(tiny_arch(1), 11u64), (tiny_arch(2), 12), (context_arch(), 13)] {
        let params = random_params(arch, seed);
        let img = random_image(16, 16, seed + 100);
        let spec = LossSpec::squared_confidence(0);
        let g = input_gradient(&params, &img, &spec).unwrap();
        let h = 1e-3;
        let mut worst: f64 = 0.0;
        let mut nonzero = 0;
        for i in 0..img.pixels().len() {
            let mut plus = img.clone();
            plus.pixels_mut()[i] += h;
            let mut minus = img.clone();
            minus.pixels_mut()[i] -= h;
            let fp = spec.value(confidence(&params, &plus, 0).unwrap());
            let fm = spec.value(confidence(&params, &minus, 0).unwrap());
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = g.grad.pixels()[i];
            if analytic != 0.0 {
                nonzero += 1;
            }
            worst = worst.max(rel_err(analytic, numeric));
        }
        assert!(nonzero > 100, "only {nonzero} nonzero gradient entries");
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}

#[test]
fn gradient_is_linear_in_loss_scale() {
    let params = random_params(tiny_arch(1), 21);
    let img = random_image(16, 16, 22);
    let base = input_gradient(&params, &img, &LossSpec::squared_confidence(0)).unwrap();
    let doubled = input_gradient(&params, &img, &LossSpec::squared_confidence(0).scaled(2.0)).unwrap();
    for (a, b) in base.grad.pixels().iter().zip(doubled.grad.pixels()) {
        assert_eq!(2.0 * a, *b);
    }
    assert_eq!(doubled.loss, 2.0 * base.loss);
}

#[test]
fn gradient_vanishes_outside_receptive_field() {
    let arch = Architecture {
        input_rows: 48,
        input_cols: 48,
        input_channels: 1,
        hidden: vec![
            LayerSpec::plain(3, 3, 2),
            LayerSpec::plain(3, 3, 2),
        ],
        head_kernel: 1,
        global_context: false,
        classes: 1,
    };
    let rf = arch.receptive_field();
    let params = random_params(arch, 31);
    let img = random_image(48, 48, 32);
    let raw = forward(&params, &img).unwrap();
    let (_, (cr, cc)) = raw.max_confidence(0);
    let g = input_gradient(&params, &img, &LossSpec::squared_confidence(0)).unwrap();
    let (center_r, center_c) = (cr as f64 * 4.0, cc as f64 * 4.0);
    let mut outside = 0;
    for r in 0..48 {
        for c in 0..48 {
            if (r as f64 - center_r).abs() > rf as f64 || (c as f64 - center_c).abs() > rf as f64 {
                outside += 1;
                assert_eq!(g.grad.get(r, c, 0), 0.0);
            }
        }
    }
    assert!(outside > 0);
}

#[test]
fn parameter_gradient_matches_central_differences() {
    check_parameter_gradient(tiny_arch(2), 41);
}

#[test]
fn parameter_gradient_with_normalization_and_context() {
    check_parameter_gradient(context_arch(), 45);
}

fn check_parameter_gradient(arch: Architecture, seed: u64) {
    let params = random_params(arch, seed);
    let img = random_image(16, 16, seed + 1);
    let truth = vec![TruthBox { bbox: BoundingBox::new(6.0, 9.0, 5.0, 7.0), class_id: 1 }];
    let cfg = TrainConfig::default();
    let (_, grads) = training_loss(&params, &img, &truth, &cfg).unwrap();
    let mut rng = seed::rng(seed + 2);
    let mut worst: f64 = 0.0;
    for _ in 0..60 {
        let li = rng.random_range(0..params.layers.len());
        let use_bias = rng.random_bool(0.2);
        let len = if use_bias { params.layers[li].bias.len() } else { params.layers[li].weights.len() };
        let idx = rng.random_range(0..len);
        let get = |p: &mut DetectorParams| -> *mut f32 {
            if use_bias { &mut p.layers[li].bias[idx] } else { &mut p.layers[li].weights[idx] }
        };
        let mut plus = params.clone();
        let mut minus = params.clone();
        // Steps are taken in f32 storage; use the realized step in the quotient.
        unsafe {
            let w = *get(&mut plus);
            *get(&mut plus) = w + 1e-3;
            *get(&mut minus) = w - 1e-3;
        }
        let (wp, wm) = unsafe { (f64::from(*get(&mut plus)), f64::from(*get(&mut minus))) };
        let (fp, _) = training_loss(&plus, &img, &truth, &cfg).unwrap();
        let (fm, _) = training_loss(&minus, &img, &truth, &cfg).unwrap();
        let numeric = (fp - fm) / (wp - wm);
        let analytic = if use_bias { grads.bias[li][idx] } else { grads.weights[li][idx] };
        let e = rel_err(analytic, numeric).min((analytic - numeric).abs() / 1e-3);
        if e > 1e-3 {
            eprintln!("layer {li} bias {use_bias} idx {idx}: analytic {analytic} numeric {numeric}");
        }
        worst = worst.max(e);
    }
    assert!(worst < 1e-3, "worst error {worst}");
}

#[test]
fn low_confidence_grid_yields_no_detections() {
    let mut raw = grid(4, 4, 1);
    raw.data.iter_mut().for_each(|v| *v = -3.0);
    let spec = GridSpec { cell_rows: 4, cell_cols: 4, stride: 8, classes: 1 };
    let dets = decode_detections(&raw, &spec, 32, 32, &DetectConfig::default());
    assert!(dets.is_empty());
    assert_eq!(reported_confidence(&dets, 0), 0.0);
}

#[test]
fn single_confident_cell_yields_one_detection() {
    let mut raw = grid(4, 4, 1);
    raw.data.iter_mut().for_each(|v| *v = -5.0);
    *raw.at_mut(OBJECTNESS_CHANNEL, 2, 1) = 3.0;
    *raw.at_mut(0, 2, 1) = 0.0;
    *raw.at_mut(1, 2, 1) = 0.0;
    *raw.at_mut(2, 2, 1) = 0.0;
    *raw.at_mut(3, 2, 1) = 0.0;
    let spec = GridSpec { cell_rows: 4, cell_cols: 4, stride: 8, classes: 1 };
    let dets = decode_detections(&raw, &spec, 32, 32, &DetectConfig::default());
    assert_eq!(dets.len(), 1);
    let d = &dets[0];
    assert!((d.confidence - sigmoid(3.0)).abs() < 1e-12);
    assert_eq!((d.bbox.center_x, d.bbox.center_y), (12.0, 20.0));
    assert_eq!((d.bbox.width, d.bbox.height), (16.0, 16.0));
    assert!((d.class_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn overlapping_cells_are_suppressed() {
    let mut raw = grid(4, 4, 1);
    raw.data.iter_mut().for_each(|v| *v = -5.0);
    // two neighbouring cells predicting nearly the same large box
    for (c, conf) in [(1usize, 0.9f64), (2, 0.8)] {
        *raw.at_mut(OBJECTNESS_CHANNEL, 1, c) = (conf / (1.0 - conf)).ln();
        *raw.at_mut(0, 1, c) = if c == 1 { 2.0 } else { -2.0 };
        *raw.at_mut(2, 1, c) = 0.5;
        *raw.at_mut(3, 1, c) = 0.5;
    }
    let spec = GridSpec { cell_rows: 4, cell_cols: 4, stride: 8, classes: 1 };
    let dets = decode_detections(&raw, &spec, 32, 32, &DetectConfig::default());
    assert_eq!(dets.len(), 1);
    assert!((dets[0].confidence - 0.9).abs() < 1e-9);
}

#[test]
fn detections_respect_threshold_and_bounds() {
    let params = random_params(Architecture { input_rows: 32, input_cols: 32, ..tiny_arch(2) }, 51);
    for s in 0..10 {
        let img = random_image(32, 32, 60 + s);
        let dets = detect(&params, &img.to_u8().unwrap()).unwrap();
        for d in &dets {
            assert!(d.confidence >= CONFIDENCE_THRESHOLD && d.confidence <= 1.0);
            assert!(d.bbox.left() >= 0.0 && d.bbox.right() <= 32.0);
            assert!(d.bbox.top() >= 0.0 && d.bbox.bottom() <= 32.0);
            assert!((d.class_probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn smooth_confidence_ignores_nms_settings() {
    let params = random_params(tiny_arch(1), 61);
    let img = random_image(16, 16, 62);
    let smooth = confidence(&params, &img, 0).unwrap();
    for iou_threshold in [0.1, 0.5, 0.9] {
        let dets = detect_f(&params, &img, &DetectConfig { conf_threshold: 0.0, iou_threshold }).unwrap();
        assert_eq!(reported_confidence(&dets, 0), smooth);
    }
    let reported = scene_confidence(&params, &img, 0).unwrap();
    assert_eq!(reported, if smooth >= 0.3 { smooth } else { 0.0 });
}

#[test]
fn weights_round_trip_bit_exactly() {
    let params = random_params(Architecture::default(), 71);
    let bytes = encode_weights(&params);
    let back = decode_weights(&bytes).unwrap();
    assert_eq!(back, params);
    assert_eq!(encode_weights(&back), bytes);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("det.bin");
    save_weights(&params, &path).unwrap();
    assert_eq!(load_weights(&path).unwrap(), params);
}

#[test]
fn corrupt_weight_files_rejected() {
    let bytes = encode_weights(&random_params(tiny_arch(1), 72));
    assert!(decode_weights(&bytes[..bytes.len() - 3]).is_err());
    assert!(decode_weights(b"NOT-A-DETECTOR\nend\n").is_err());
    assert!(decode_weights(b"PATCHLAB-DETECTOR 1\nseed 1\n").is_err());
}

#[test]
fn training_requires_data() {
    let params = DetectorParams::init(tiny_arch(1), 1).unwrap();
    assert!(matches!(train_detector(params, &[], &TrainConfig::default()), Err(Error::EmptyDataset)));
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let arch = Architecture { input_rows: 32, input_cols: 32, ..tiny_arch(1) };
    let mut rng = seed::rng(81);
    let data: Vec<TrainingSample> = (0..24)
        .map(|_| {
            let mut img = ImageF::filled(32, 32, 1, 60.0);
            let (r0, c0) = (rng.random_range(2..20usize), rng.random_range(2..22usize));
            for r in r0..r0 + 10 {
                for c in c0..c0 + 6 {
                    img.set(r, c, 0, 220.0);
                }
            }
            TrainingSample {
                image: img.to_u8().unwrap(),
                truth: vec![TruthBox { bbox: BoundingBox::from_pixel_extent(r0, c0, r0 + 9, c0 + 5), class_id: 0 }],
            }
        })
        .collect();
    let cfg = TrainConfig { epochs: 8, learning_rate: 0.05, batch_size: 4, seed: 3, ..TrainConfig::default() };
    let a = train_detector(DetectorParams::init(arch.clone(), 9).unwrap(), &data, &cfg).unwrap();
    let b = train_detector(DetectorParams::init(arch, 9).unwrap(), &data, &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.loss_curve, b.loss_curve);
    assert!(a.loss_curve.last().unwrap() < &a.loss_curve[0]);
}
