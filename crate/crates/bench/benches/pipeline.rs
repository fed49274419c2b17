use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use patchlab::attack::{eot_evaluate, random_noise_patch, PlacedView};
use patchlab::defense::defend_blur;
use patchlab::detector::{forward, input_gradient, nms, Architecture, BoundingBox, Detection, DetectorParams, LossSpec};
use patchlab::harness::{render_scenes, SceneSpec, PERSON_CLASS};
use patchlab::ImageF;

fn scene() -> ImageF {
    let spec = SceneSpec::default();
    render_scenes(&spec, 1, 11, "bench").unwrap().remove(0).image.to_float()
}

fn detector() -> DetectorParams {
    DetectorParams::init(Architecture::default(), 5).unwrap()
}

fn bench_detector(c: &mut Criterion) {
    let params = detector();
    let img = scene();
    c.bench_function("forward 96x96", |b| b.iter(|| forward(&params, black_box(&img)).unwrap()));
    let loss = LossSpec::squared_confidence(PERSON_CLASS);
    c.bench_function("input gradient 96x96", |b| b.iter(|| input_gradient(&params, black_box(&img), &loss).unwrap()));
}

fn bench_blur(c: &mut Criterion) {
    let img = scene();
    c.bench_function("blur 3x3 96x96", |b| b.iter(|| defend_blur(black_box(&img))));
}

fn bench_nms(c: &mut Criterion) {
    let dets: Vec<Detection> = (0..144)
        .map(|k| {
            let (r, col) = ((k / 12) as f64, (k % 12) as f64);
            Detection {
                bbox: BoundingBox::new(8.0 * col + 4.0, 8.0 * r + 4.0, 20.0, 30.0),
                confidence: ((k * 37) % 100) as f64 / 100.0,
                class_probs: vec![1.0],
            }
        })
        .collect();
    c.bench_function("nms 144 boxes", |b| b.iter_batched(|| dets.clone(), |d| nms(&d, 0.5), BatchSize::SmallInput));
}

fn bench_eot(c: &mut Criterion) {
    let params = detector();
    let images = vec![scene()];
    let z = random_noise_patch(23, 3).unwrap();
    let views: Vec<PlacedView> = [(10, 10), (40, 20), (60, 60), (5, 70)]
        .into_iter()
        .map(|placement| PlacedView { image: 0, placement })
        .collect();
    c.bench_function("eot step 4 placements", |b| {
        b.iter(|| eot_evaluate(&params, &images, black_box(&z), &views, PERSON_CLASS).unwrap())
    });
}

criterion_group!(benches, bench_detector, bench_blur, bench_nms, bench_eot);
criterion_main!(benches);
