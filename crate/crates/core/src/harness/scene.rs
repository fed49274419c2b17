//! Synthetic scenes: a stick "person" (elliptical head over a rectangular
//! body) on a smooth value-noise background.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::detector::{BoundingBox, TrainingSample, TruthBox};
use crate::error::{Error, Result};
use crate::image::ImageF;
use crate::seed;

pub const PERSON_CLASS: usize = 0;

/// Geometry and intensity ranges of generated scenes. Ranges are inclusive.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub rows: usize,
    pub cols: usize,
    pub contains_person: bool,
    pub body_width: (usize, usize),
    pub body_height: (usize, usize),
    /// Head horizontal radius as a fraction of body width.
    pub head_ratio: (f64, f64),
    pub background: (f64, f64),
    /// Spacing of the value-noise lattice in pixels.
    pub background_cell: usize,
    pub bright_figure: (f64, f64),
    pub dark_figure: (f64, f64),
    pub pixel_noise: f64,
    /// Inclusive range of non-person shapes (headless blocks, lone discs)
    /// scattered away from the figure.
    pub distractors: (usize, usize),
    /// Minimum distance from the figure to the image border.
    pub margin: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            rows: 96,
            cols: 96,
            contains_person: true,
            body_width: (14, 20),
            body_height: (24, 32),
            head_ratio: (0.3, 0.4),
            background: (70.0, 150.0),
            background_cell: 12,
            bright_figure: (195.0, 245.0),
            dark_figure: (10.0, 35.0),
            pixel_noise: 4.0,
            distractors: (0, 2),
            margin: 4,
        }
    }
}

impl SceneSpec {
    pub fn background_only(&self) -> Self {
        Self { contains_person: false, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.rows > 0
            && self.cols > 0
            && self.body_width.0 >= 2
            && self.body_width.0 <= self.body_width.1
            && self.body_height.0 >= 2
            && self.body_height.0 <= self.body_height.1
            && self.head_ratio.0 > 0.0
            && self.head_ratio.0 <= self.head_ratio.1
            && self.background.0 <= self.background.1
            && self.background_cell > 0
            && self.pixel_noise >= 0.0
            && self.distractors.0 <= self.distractors.1;
        if !ok {
            return Err(Error::Config("inconsistent scene ranges".into()));
        }
        let max_head_ry = (self.body_width.1 as f64 * self.head_ratio.1 * 1.3).ceil() as usize;
        let tallest = self.body_height.1 + 2 * max_head_ry + 2 * self.margin;
        if tallest > self.rows || self.body_width.1 + 2 * self.margin > self.cols {
            return Err(Error::Config("figure does not fit inside the scene".into()));
        }
        Ok(())
    }
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise<R: Rng>(spec: &SceneSpec, rng: &mut R) -> Vec<f64> {
    let cell = spec.background_cell;
    let (lr, lc) = (spec.rows / cell + 2, spec.cols / cell + 2);
    let lattice: Vec<f64> = (0..lr * lc)
        .map(|_| rng.random_range(spec.background.0..=spec.background.1))
        .collect();
    let mut out = Vec::with_capacity(spec.rows * spec.cols);
    for r in 0..spec.rows {
        let (gr, fr) = (r / cell, smoothstep((r % cell) as f64 / cell as f64));
        for c in 0..spec.cols {
            let (gc, fc) = (c / cell, smoothstep((c % cell) as f64 / cell as f64));
            let at = |a: usize, b: usize| lattice[a * lc + b];
            let top = at(gr, gc) * (1.0 - fc) + at(gr, gc + 1) * fc;
            let bottom = at(gr + 1, gc) * (1.0 - fc) + at(gr + 1, gc + 1) * fc;
            out.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    out
}

fn figure_intensity<R: Rng>(spec: &SceneSpec, rng: &mut R) -> f64 {
    if rng.random_bool(0.5) {
        rng.random_range(spec.bright_figure.0..=spec.bright_figure.1)
    } else {
        rng.random_range(spec.dark_figure.0..=spec.dark_figure.1)
    }
}

enum Shape {
    Rect { top: f64, left: f64, h: f64, w: f64 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { top, left, h, w } => y >= top && y < top + h && x >= left && x < left + w,
            Shape::Ellipse { cy, cx, ry, rx } => ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0,
        }
    }
}

/// Non-person shapes in local coordinates plus their `(height, width)`:
/// a lone block, a lone disc, or a head/body pair in a wrong arrangement
/// (body too wide, head below, head beside).
fn distractor_shapes<R: Rng>(spec: &SceneSpec, rng: &mut R) -> (Vec<Shape>, usize, usize) {
    let bw = rng.random_range(spec.body_width.0..=spec.body_width.1) as f64;
    let bh = rng.random_range(spec.body_height.0..=spec.body_height.1) as f64;
    let rx = bw * rng.random_range(spec.head_ratio.0..=spec.head_ratio.1);
    let ry = rx * rng.random_range(1.1..=1.3);
    let (hd, hw) = (2.0 * ry, 2.0 * rx);
    let (shapes, h, w) = match rng.random_range(0..5) {
        0 => {
            let h = rng.random_range(spec.body_width.0..=spec.body_height.1) as f64;
            let w = rng.random_range(spec.body_width.0 / 2..=spec.body_height.1) as f64;
            (vec![Shape::Rect { top: 0.0, left: 0.0, h, w }], h, w)
        }
        1 => {
            let d = hw * rng.random_range(0.8..=1.6);
            (vec![Shape::Ellipse { cy: d / 2.0, cx: d / 2.0, ry: d / 2.0, rx: d / 2.0 }], d, d)
        }
        2 => {
            let w = bw * rng.random_range(1.8..=2.4);
            let body = Shape::Rect { top: hd, left: 0.0, h: bh, w };
            (vec![Shape::Ellipse { cy: ry, cx: w / 2.0, ry, rx }, body], hd + bh, w)
        }
        3 => {
            let body = Shape::Rect { top: 0.0, left: 0.0, h: bh, w: bw };
            (vec![body, Shape::Ellipse { cy: bh + ry, cx: bw / 2.0, ry, rx }], bh + hd, bw)
        }
        _ => {
            let body = Shape::Rect { top: 0.0, left: 0.0, h: bh, w: bw };
            (vec![body, Shape::Ellipse { cy: ry, cx: bw + rx, ry, rx }], bh.max(hd), bw + hw)
        }
    };
    (shapes, h.ceil() as usize, w.ceil() as usize)
}

/// Draws one distractor at least `DISTRACTOR_GAP` pixels away from
/// everything in `avoid` and returns its extent.
fn draw_distractor<R: Rng>(spec: &SceneSpec, px: &mut [f64], avoid: &[BoundingBox], rng: &mut R) -> Option<BoundingBox> {
    const DISTRACTOR_GAP: f64 = 4.0;
    let intensity = figure_intensity(spec, rng);
    let (shapes, h, w) = distractor_shapes(spec, rng);
    if h + 2 > spec.rows || w + 2 > spec.cols {
        return None;
    }
    for _ in 0..32 {
        let top = rng.random_range(1..=spec.rows - h - 1);
        let left = rng.random_range(1..=spec.cols - w - 1);
        let clear = avoid.iter().all(|b| {
            let dx = (b.left() - (left + w) as f64).max(left as f64 - b.right());
            let dy = (b.top() - (top + h) as f64).max(top as f64 - b.bottom());
            dx.max(dy) >= DISTRACTOR_GAP
        });
        if !clear {
            continue;
        }
        for r in top..top + h {
            for c in left..left + w {
                let (y, x) = ((r - top) as f64 + 0.5, (c - left) as f64 + 0.5);
                if shapes.iter().any(|s| s.contains(y, x)) {
                    px[r * spec.cols + c] = intensity;
                }
            }
        }
        return Some(BoundingBox::from_pixel_extent(top, left, top + h - 1, left + w - 1));
    }
    None
}

/// Renders one scene. Person scenes carry exactly one truth box, which is
/// the tight bounding box of the rasterized figure.
pub fn render_scene(spec: &SceneSpec, seed: u64) -> Result<TrainingSample> {
    spec.validate()?;
    let mut rng = seed::rng(seed);
    let mut px = value_noise(spec, &mut rng);
    let mut truth = Vec::new();
    if spec.contains_person {
        let bw = rng.random_range(spec.body_width.0..=spec.body_width.1);
        let bh = rng.random_range(spec.body_height.0..=spec.body_height.1);
        let rx = bw as f64 * rng.random_range(spec.head_ratio.0..=spec.head_ratio.1);
        let ry = rx * rng.random_range(1.1..=1.3);
        let head_h = (2.0 * ry).ceil() as usize;
        let total_h = bh + head_h;
        let m = spec.margin;
        let top = rng.random_range(m..=spec.rows - m - total_h);
        let body_left = rng.random_range(m..=spec.cols - m - bw);
        let intensity = figure_intensity(spec, &mut rng);
        let head_cx = body_left as f64 + bw as f64 / 2.0;
        let head_cy = top as f64 + ry;
        let body_top = top + head_h;
        let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
        for r in top..body_top + bh {
            for c in 0..spec.cols {
                let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
                let in_head = ((x - head_cx) / rx).powi(2) + ((y - head_cy) / ry).powi(2) <= 1.0;
                let in_body = r >= body_top && c >= body_left && c < body_left + bw;
                if in_head || in_body {
                    px[r * spec.cols + c] = intensity;
                    r0 = r0.min(r);
                    c0 = c0.min(c);
                    r1 = r1.max(r);
                    c1 = c1.max(c);
                }
            }
        }
        truth.push(TruthBox { bbox: BoundingBox::from_pixel_extent(r0, c0, r1, c1), class_id: PERSON_CLASS });
    }
    let count = rng.random_range(spec.distractors.0..=spec.distractors.1);
    let mut occupied: Vec<BoundingBox> = truth.iter().map(|t| t.bbox).collect();
    for _ in 0..count {
        if let Some(b) = draw_distractor(spec, &mut px, &occupied, &mut rng) {
            occupied.push(b);
        }
    }
    if spec.pixel_noise > 0.0 {
        let n = Normal::new(0.0, spec.pixel_noise).expect("non-negative sigma");
        px.iter_mut().for_each(|v| *v += n.sample(&mut rng));
    }
    let img = ImageF::new(spec.rows, spec.cols, 1, px)?;
    Ok(TrainingSample { image: img.to_u8()?, truth })
}

/// `count` scenes from the stream `name`, scene `k` seeded independently.
pub fn render_scenes(spec: &SceneSpec, count: usize, master: u64, name: &str) -> Result<Vec<TrainingSample>> {
    (0..count)
        .map(|k| render_scene(spec, seed::derive_indexed(master, name, k as u64)))
        .collect()
}

/// Train and test scenes drawn from disjoint seed indices.
pub fn generate_dataset(spec: &SceneSpec, n_train: usize, n_test: usize, seed: u64) -> Result<(Vec<TrainingSample>, Vec<TrainingSample>)> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::Config("dataset split sizes must be at least 1".into()));
    }
    let all = render_scenes(spec, n_train + n_test, seed, "scene")?;
    let test = all[n_train..].to_vec();
    let mut train = all;
    train.truncate(n_train);
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_deterministic_with_requested_sizes() {
        let spec = SceneSpec::default();
        let (a_train, a_test) = generate_dataset(&spec, 32, 3, 5).unwrap();
        let (b_train, b_test) = generate_dataset(&spec, 32, 3, 5).unwrap();
        assert_eq!((a_train.len(), a_test.len()), (32, 3));
        assert_eq!(a_train, b_train);
        assert_eq!(a_test, b_test);
        for t in &a_test {
            assert!(!a_train.contains(t));
        }
    }

    #[test]
    fn person_box_is_tight_and_inside() {
        let spec = SceneSpec::default();
        for s in 0..40 {
            let sample = render_scene(&spec, s).unwrap();
            assert_eq!(sample.truth.len(), 1);
            let b = sample.truth[0].bbox;
            assert!(b.left() >= 0.0 && b.top() >= 0.0 && b.right() <= 96.0 && b.bottom() <= 96.0);
            // Render again without noise to read the exact figure pixels.
            let clean = render_scene(&SceneSpec { pixel_noise: 0.0, ..spec.clone() }, s).unwrap();
            let bb = clean.truth[0].bbox;
            let img = clean.image.to_float();
            let fig = img.get(bb.center_y as usize, bb.center_x as usize, 0);
            let (l, t) = (bb.left() as usize, bb.top() as usize);
            let (r, btm) = (bb.right() as usize - 1, bb.bottom() as usize - 1);
            let row_has = |row: usize| (l..=r).any(|c| img.get(row, c, 0) == fig);
            let col_has = |col: usize| (t..=btm).any(|rr| img.get(rr, col, 0) == fig);
            assert!(row_has(t) && row_has(btm) && col_has(l) && col_has(r));
        }
    }

    #[test]
    fn background_scenes_have_no_truth() {
        let spec = SceneSpec::default().background_only();
        let (train, test) = generate_dataset(&spec, 4, 2, 1).unwrap();
        assert!(train.iter().chain(&test).all(|s| s.truth.is_empty()));
    }

    #[test]
    fn zero_split_rejected() {
        assert!(generate_dataset(&SceneSpec::default(), 0, 3, 1).is_err());
    }

    #[test]
    fn oversized_figure_rejected() {
        let spec = SceneSpec { rows: 20, ..SceneSpec::default() };
        assert!(render_scene(&spec, 0).is_err());
    }
}
