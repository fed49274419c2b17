//! Pixel rasters, Gaussian noise, and Gaussian blur.
//!
//! Pixels are stored row-major with channels interleaved. Float images keep
//! the 8-bit intensity scale `[0, 255]` rather than normalizing to `[0, 1]`.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seed;

/// An 8-bit raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image8 {
    rows: usize,
    cols: usize,
    channels: usize,
    pixels: Vec<u8>,
}

/// A real-valued raster on the 8-bit intensity scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageF {
    rows: usize,
    cols: usize,
    channels: usize,
    pixels: Vec<f64>,
}

fn check_shape(rows: usize, cols: usize, channels: usize, len: usize) -> Result<()> {
    if channels != 1 && channels != 3 {
        return Err(Error::Parameter(format!("channels must be 1 or 3, got {channels}")));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::Parameter(format!("empty image {rows}x{cols}")));
    }
    if rows * cols * channels != len {
        return Err(Error::Dimension(format!(
            "{rows}x{cols}x{channels} image needs {} values, got {len}",
            rows * cols * channels
        )));
    }
    Ok(())
}

impl Image8 {
    pub fn new(rows: usize, cols: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        check_shape(rows, cols, channels, pixels.len())?;
        Ok(Self { rows, cols, channels, pixels })
    }

    pub fn filled(rows: usize, cols: usize, channels: usize, value: u8) -> Self {
        Self::new(rows, cols, channels, vec![value; rows * cols * channels])
            .expect("valid shape")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, r: usize, c: usize, ch: usize) -> u8 {
        self.pixels[(r * self.cols + c) * self.channels + ch]
    }

    pub fn set(&mut self, r: usize, c: usize, ch: usize, v: u8) {
        self.pixels[(r * self.cols + c) * self.channels + ch] = v;
    }

    pub fn to_float(&self) -> ImageF {
        ImageF {
            rows: self.rows,
            cols: self.cols,
            channels: self.channels,
            pixels: self.pixels.iter().map(|&p| f64::from(p)).collect(),
        }
    }
}

impl ImageF {
    pub fn new(rows: usize, cols: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        check_shape(rows, cols, channels, pixels.len())?;
        if let Some(bad) = pixels.iter().find(|v| !v.is_finite()) {
            return Err(Error::CorruptImage(format!("non-finite pixel {bad}")));
        }
        Ok(Self { rows, cols, channels, pixels })
    }

    pub fn filled(rows: usize, cols: usize, channels: usize, value: f64) -> Self {
        Self::new(rows, cols, channels, vec![value; rows * cols * channels])
            .expect("valid shape")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    /// Mutable pixel access. Callers must keep values finite.
    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn get(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.pixels[(r * self.cols + c) * self.channels + ch]
    }

    pub fn set(&mut self, r: usize, c: usize, ch: usize, v: f64) {
        self.pixels[(r * self.cols + c) * self.channels + ch] = v;
    }

    pub fn same_shape(&self, other: &ImageF) -> bool {
        self.rows == other.rows && self.cols == other.cols && self.channels == other.channels
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    /// Clamps to `[0, 255]` and rounds half-up.
    pub fn to_u8(&self) -> Result<Image8> {
        let mut out = Vec::with_capacity(self.pixels.len());
        for &v in &self.pixels {
            if !v.is_finite() {
                return Err(Error::CorruptImage(format!("non-finite pixel {v}")));
            }
            out.push((v.clamp(0.0, 255.0) + 0.5).floor() as u8);
        }
        Image8::new(self.rows, self.cols, self.channels, out)
    }

    pub fn clamp_intensity(&mut self) {
        for v in &mut self.pixels {
            *v = v.clamp(0.0, 255.0);
        }
    }
}

/// Parameters of additive Gaussian noise, in intensity units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseParams {
    pub mu: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseParams {
    pub fn new(mu: f64, sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() || !mu.is_finite() {
            return Err(Error::Parameter(format!("noise needs finite mu and sigma >= 0, got mu={mu} sigma={sigma}")));
        }
        Ok(Self { mu, sigma, seed })
    }
}

/// Adds i.i.d. `Normal(mu, sigma^2)` noise to every pixel and channel.
///
/// The result is not clamped; see [`crate::defense::defend_noise`] for the
/// clamped countermeasure.
pub fn add_gaussian_noise(img: &ImageF, params: &NoiseParams) -> ImageF {
    let mut out = img.clone();
    if params.sigma == 0.0 {
        for v in &mut out.pixels {
            *v += params.mu;
        }
        return out;
    }
    let normal = Normal::new(params.mu, params.sigma).expect("sigma validated");
    let mut rng = seed::rng(params.seed);
    for v in &mut out.pixels {
        *v += normal.sample(&mut rng);
    }
    out
}

/// A normalized square blur kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurKernel {
    size: usize,
    weights: Vec<f64>,
    // 1-D factor when the kernel is the outer product of a vector with itself.
    factor: Option<Vec<f64>>,
}

impl BlurKernel {
    /// Builds a kernel from explicit weights, normalizing them to unit sum.
    pub fn from_weights(size: usize, weights: Vec<f64>) -> Result<Self> {
        if size % 2 == 0 || weights.len() != size * size {
            return Err(Error::Parameter(format!(
                "kernel must be odd-sized and square, got size {size} with {} weights",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Parameter("kernel weights must be finite and non-negative".into()));
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(Error::Parameter("kernel weights sum to zero".into()));
        }
        Ok(Self { size, weights: weights.into_iter().map(|w| w / sum).collect(), factor: None })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, r: usize, c: usize) -> f64 {
        self.weights[r * self.size + c]
    }
}

/// Gaussian kernel with `w(r, c) ∝ exp(-(r² + c²) / 2σ²)` over centered offsets.
pub fn make_gaussian_kernel(size: usize, sigma: f64) -> Result<BlurKernel> {
    if size % 2 == 0 {
        return Err(Error::Parameter(format!("kernel size must be odd, got {size}")));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Parameter(format!("kernel sigma must be positive, got {sigma}")));
    }
    let half = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    let factor: Vec<f64> = raw.iter().map(|v| v / s).collect();
    let weights = factor
        .iter()
        .flat_map(|a| factor.iter().map(move |b| a * b))
        .collect();
    Ok(BlurKernel { size, weights, factor: Some(factor) })
}

fn replicate(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Correlates every channel with `kernel`, replicating edge pixels at the border.
pub fn gaussian_blur(img: &ImageF, kernel: &BlurKernel) -> ImageF {
    match &kernel.factor {
        Some(f) => blur_separable(img, f),
        None => blur_direct(img, kernel),
    }
}

fn blur_separable(img: &ImageF, factor: &[f64]) -> ImageF {
    let (rows, cols, ch) = (img.rows, img.cols, img.channels);
    let half = (factor.len() / 2) as isize;
    let mut tmp = vec![0.0; img.pixels.len()];
    for r in 0..rows {
        for c in 0..cols {
            for k in 0..ch {
                let mut acc = 0.0;
                for (t, w) in factor.iter().enumerate() {
                    let cc = replicate(c as isize + t as isize - half, cols);
                    acc += w * img.pixels[(r * cols + cc) * ch + k];
                }
                tmp[(r * cols + c) * ch + k] = acc;
            }
        }
    }
    let mut out = vec![0.0; img.pixels.len()];
    for r in 0..rows {
        for c in 0..cols {
            for k in 0..ch {
                let mut acc = 0.0;
                for (t, w) in factor.iter().enumerate() {
                    let rr = replicate(r as isize + t as isize - half, rows);
                    acc += w * tmp[(rr * cols + c) * ch + k];
                }
                out[(r * cols + c) * ch + k] = acc;
            }
        }
    }
    ImageF { rows, cols, channels: ch, pixels: out }
}

fn blur_direct(img: &ImageF, kernel: &BlurKernel) -> ImageF {
    let (rows, cols, ch) = (img.rows, img.cols, img.channels);
    let half = (kernel.size / 2) as isize;
    let mut out = vec![0.0; img.pixels.len()];
    for r in 0..rows {
        for c in 0..cols {
            for k in 0..ch {
                let mut acc = 0.0;
                for kr in 0..kernel.size {
                    let rr = replicate(r as isize + kr as isize - half, rows);
                    for kc in 0..kernel.size {
                        let cc = replicate(c as isize + kc as isize - half, cols);
                        acc += kernel.weight(kr, kc) * img.pixels[(rr * cols + cc) * ch + k];
                    }
                }
                out[(r * cols + c) * ch + k] = acc;
            }
        }
    }
    ImageF { rows, cols, channels: ch, pixels: out }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    // Straight nested-loop correlation with clamped indices; shares no code
    // with the separable or direct paths above.
    fn oracle_blur(img: &ImageF, kernel: &BlurKernel) -> Vec<f64> {
        let k = kernel.size() as i64;
        let h = k / 2;
        let (rows, cols, chs) = (img.rows() as i64, img.cols() as i64, img.channels());
        let mut out = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                for ch in 0..chs {
                    let mut s = 0.0;
                    for dr in -h..=h {
                        for dc in -h..=h {
                            let rr = (r + dr).max(0).min(rows - 1) as usize;
                            let cc = (c + dc).max(0).min(cols - 1) as usize;
                            let w = kernel.weights()[((dr + h) * k + dc + h) as usize];
                            s += w * img.get(rr, cc, ch);
                        }
                    }
                    out.push(s);
                }
            }
        }
        out
    }

    fn random_image(rows: usize, cols: usize, channels: usize, seed: u64) -> ImageF {
        let mut rng = crate::seed::rng(seed);
        let px = (0..rows * cols * channels).map(|_| rng.random_range(0.0..255.0)).collect();
        ImageF::new(rows, cols, channels, px).unwrap()
    }

    #[test]
    fn float_conversion_is_identity() {
        let img = Image8::new(1, 3, 1, vec![0, 128, 255]).unwrap();
        assert_eq!(img.to_float().pixels(), &[0.0, 128.0, 255.0]);
        let zeros = Image8::filled(2, 2, 1, 0).to_float();
        assert!(zeros.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn to_u8_clamps_and_rounds_half_up() {
        let img = ImageF::new(1, 4, 1, vec![-3.2, 260.0, 127.5, 127.49]).unwrap();
        assert_eq!(img.to_u8().unwrap().pixels(), &[0, 255, 128, 127]);
    }

    #[test]
    fn to_u8_rejects_non_finite() {
        let mut img = ImageF::filled(1, 2, 1, 1.0);
        img.pixels_mut()[1] = f64::NAN;
        assert!(matches!(img.to_u8(), Err(Error::CorruptImage(_))));
        assert!(ImageF::new(1, 1, 1, vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn zero_sigma_noise_shifts_by_mean() {
        let img = random_image(4, 5, 1, 1);
        let shifted = add_gaussian_noise(&img, &NoiseParams::new(5.0, 0.0, 9).unwrap());
        for (a, b) in img.pixels().iter().zip(shifted.pixels()) {
            assert_eq!(*b, a + 5.0);
        }
        let same = add_gaussian_noise(&img, &NoiseParams::new(0.0, 0.0, 9).unwrap());
        assert_eq!(same, img);
    }

    #[test]
    fn noise_mean_concentrates() {
        let img = ImageF::filled(64, 64, 1, 100.0);
        let sigma = 10.0;
        let out = add_gaussian_noise(&img, &NoiseParams::new(0.0, sigma, 1234).unwrap());
        let n = out.pixels().len() as f64;
        let mean_diff = out.mean() - img.mean();
        assert!(mean_diff.abs() < 3.0 * sigma / n.sqrt(), "mean offset {mean_diff}");
    }

    #[test]
    fn noise_is_reproducible() {
        let img = random_image(8, 8, 3, 2);
        let p = NoiseParams::new(1.0, 20.0, 77).unwrap();
        let a = add_gaussian_noise(&img, &p);
        let b = add_gaussian_noise(&img, &p);
        assert!(a.pixels().iter().zip(b.pixels()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn negative_sigma_rejected() {
        assert!(NoiseParams::new(0.0, -1.0, 0).is_err());
    }

    #[test]
    fn kernel_parameters_validated() {
        assert!(make_gaussian_kernel(4, 1.0).is_err());
        assert!(make_gaussian_kernel(3, 0.0).is_err());
        assert!(make_gaussian_kernel(3, -1.0).is_err());
        assert!(BlurKernel::from_weights(2, vec![0.25; 4]).is_err());
    }

    #[test]
    fn degenerate_kernel_is_unit() {
        let k = make_gaussian_kernel(1, 0.8).unwrap();
        assert_eq!(k.weights(), &[1.0]);
    }

    #[test]
    fn center_weight_matches_formula() {
        let sigma: f64 = 0.8;
        let mut z = 0.0;
        for r in -1i32..=1 {
            for c in -1i32..=1 {
                z += (-f64::from(r * r + c * c) / (2.0 * sigma * sigma)).exp();
            }
        }
        let k = make_gaussian_kernel(3, sigma).unwrap();
        assert!((k.weight(1, 1) - 1.0 / z).abs() < 1e-12);
        let corner = (-2.0 / (2.0 * sigma * sigma)).exp() / z;
        assert!((k.weight(0, 0) - corner).abs() < 1e-12);
    }

    #[test]
    fn constant_image_is_fixed_point() {
        let img = ImageF::filled(6, 7, 1, 100.0);
        let out = gaussian_blur(&img, &make_gaussian_kernel(3, 0.8).unwrap());
        assert!(out.pixels().iter().all(|v| (v - 100.0).abs() < 1e-12));
    }

    #[test]
    fn impulse_response_is_kernel() {
        let mut img = ImageF::filled(7, 7, 1, 0.0);
        img.set(3, 3, 0, 200.0);
        let k = make_gaussian_kernel(3, 0.8).unwrap();
        let out = gaussian_blur(&img, &k);
        for dr in 0..3 {
            for dc in 0..3 {
                let got = out.get(2 + dr, 2 + dc, 0);
                assert!((got - 200.0 * k.weight(2 - dr, 2 - dc)).abs() < 1e-12);
            }
        }
        assert_eq!(out.get(0, 0, 0), 0.0);
    }

    #[test]
    fn blur_matches_oracle_8x8() {
        let img = random_image(8, 8, 1, 3);
        let k = make_gaussian_kernel(3, 0.8).unwrap();
        let got = gaussian_blur(&img, &k);
        for (a, b) in got.pixels().iter().zip(oracle_blur(&img, &k)) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn direct_path_matches_oracle() {
        let img = random_image(9, 6, 3, 4);
        let w: Vec<f64> = (0..25).map(|i| f64::from(i % 7) + 0.5).collect();
        let k = BlurKernel::from_weights(5, w).unwrap();
        assert!((k.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let got = gaussian_blur(&img, &k);
        for (a, b) in got.pixels().iter().zip(oracle_blur(&img, &k)) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn gaussian_kernel_is_normalized_and_symmetric(half in 0usize..5, sigma in 0.1f64..6.0) {
            let size = 2 * half + 1;
            let k = make_gaussian_kernel(size, sigma).unwrap();
            prop_assert!((k.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for r in 0..size {
                for c in 0..size {
                    prop_assert!(k.weight(r, c) >= 0.0);
                    prop_assert!((k.weight(r, c) - k.weight(size - 1 - r, c)).abs() < 1e-15);
                    prop_assert!((k.weight(r, c) - k.weight(r, size - 1 - c)).abs() < 1e-15);
                }
            }
        }

        #[test]
        fn blur_matches_oracle(rows in 4usize..=16, cols in 4usize..=16, channels in prop::sample::select(vec![1usize, 3]),
                               sigma in 0.3f64..3.0, seed in any::<u64>()) {
            let img = random_image(rows, cols, channels, seed);
            let k = make_gaussian_kernel(3, sigma).unwrap();
            let got = gaussian_blur(&img, &k);
            for (a, b) in got.pixels().iter().zip(oracle_blur(&img, &k)) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn blur_roughly_preserves_mean(seed in any::<u64>()) {
            let img = random_image(16, 16, 1, seed);
            let out = gaussian_blur(&img, &make_gaussian_kernel(3, 0.8).unwrap());
            prop_assert!((out.mean() - img.mean()).abs() <= 0.01 * img.mean());
        }

        #[test]
        fn u8_float_round_trip(px in prop::collection::vec(any::<u8>(), 12)) {
            let img = Image8::new(2, 2, 3, px).unwrap();
            prop_assert_eq!(img.to_float().to_u8().unwrap(), img);
        }
    }
}
