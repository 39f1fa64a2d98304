//! Intensity-only augmentations. Neither touches geometry, so label maps
//! stay aligned with the augmented images.
//!
//! * weak: additive Gaussian noise on a random subset of pixels.
//! * strong: low-frequency amplitude mixing. The content image keeps its
//!   Fourier phase while the amplitude inside a centered low-frequency
//!   square is blended toward the amplitude of a style image.

use rand::RngExt;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::Image;

pub const DEFAULT_SIGMA: f64 = 0.05;
pub const DEFAULT_PIXEL_PROB: f64 = 0.5;
pub const DEFAULT_LAMBDA: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakAugConfig {
    pub sigma: f64,
    pub pixel_prob: f64,
}

impl Default for WeakAugConfig {
    fn default() -> Self {
        WeakAugConfig {
            sigma: DEFAULT_SIGMA,
            pixel_prob: DEFAULT_PIXEL_PROB,
        }
    }
}

impl WeakAugConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!(
                "sigma must be >= 0, got {}",
                self.sigma
            )));
        }
        if !(0.0..=1.0).contains(&self.pixel_prob) {
            return Err(Error::Config(format!(
                "pixel_prob must lie in [0, 1], got {}",
                self.pixel_prob
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrongAugConfig {
    pub lambda: f64,
    /// Half-width of the mixed low-frequency square, in frequency bins.
    pub radius: usize,
}

impl StrongAugConfig {
    /// Default mixing weight with radius `min(H, W) / 8`.
    pub fn for_size(height: usize, width: usize) -> Self {
        StrongAugConfig {
            lambda: DEFAULT_LAMBDA,
            radius: height.min(width) / 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Adds Normal(0, sigma²) to each pixel with probability `pixel_prob`,
/// then clamps to [0, 1].
pub fn weak_gaussian(image: &Image, cfg: &WeakAugConfig, rng: &mut Rng) -> Result<Image> {
    cfg.validate()?;
    let normal = Normal::new(0.0, cfg.sigma).map_err(|e| Error::Config(e.to_string()))?;
    let data = image
        .data
        .iter()
        .map(|&v| {
            let hit = rng.random::<f64>() < cfg.pixel_prob;
            let v = if hit {
                v as f64 + normal.sample(rng)
            } else {
                v as f64
            };
            v.clamp(0.0, 1.0) as f32
        })
        .collect();
    Image::new(image.height, image.width, data)
}

fn fft2(buf: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    row.process(buf);
    let mut column = vec![Complex::default(); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = buf[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            buf[y * w + x] = column[y];
        }
    }
}

fn spectrum(image: &Image) -> Vec<Complex<f64>> {
    let mut buf: Vec<_> = image
        .data
        .iter()
        .map(|&v| Complex::new(v as f64, 0.0))
        .collect();
    fft2(&mut buf, image.height, image.width, false);
    buf
}

/// Signed frequency of bin `k` in a transform of length `n`.
fn signed_freq(k: usize, n: usize) -> usize {
    if k <= n / 2 {
        k
    } else {
        n - k
    }
}

/// Blends the low-frequency amplitude of `content` toward that of `style`,
/// keeping the content phase; returns the real part clamped to [0, 1].
pub fn strong_style(content: &Image, style: &Image, cfg: &StrongAugConfig) -> Result<Image> {
    cfg.validate()?;
    if (content.height, content.width) != (style.height, style.width) {
        return shape_err(format!(
            "style image {}x{} does not match content {}x{}",
            style.height, style.width, content.height, content.width
        ));
    }
    let (h, w) = (content.height, content.width);
    let mut c = spectrum(content);
    let s = spectrum(style);
    let lambda = cfg.lambda;
    for y in 0..h {
        if signed_freq(y, h) > cfg.radius {
            continue;
        }
        for x in 0..w {
            if signed_freq(x, w) > cfg.radius {
                continue;
            }
            let i = y * w + x;
            let amp = (1.0 - lambda) * c[i].norm() + lambda * s[i].norm();
            c[i] = Complex::from_polar(amp, c[i].arg());
        }
    }
    fft2(&mut c, h, w, true);
    let scale = 1.0 / (h * w) as f64;
    let data = c
        .iter()
        .map(|z| (z.re * scale).clamp(0.0, 1.0) as f32)
        .collect();
    Image::new(h, w, data)
}

/// Weak view of every image, then a strong view of each weak view using a
/// style drawn uniformly from `style_pool`.
pub fn apply_views(
    images: &[&Image],
    weak: &WeakAugConfig,
    strong: &StrongAugConfig,
    style_pool: &[&Image],
    rng: &mut Rng,
) -> Result<(Vec<Image>, Vec<Image>)> {
    if style_pool.is_empty() {
        return Err(Error::Config("style pool is empty".into()));
    }
    let mut weak_views = Vec::with_capacity(images.len());
    let mut strong_views = Vec::with_capacity(images.len());
    for im in images {
        let xw = weak_gaussian(im, weak, rng)?;
        let style = style_pool[rng.random_range(0..style_pool.len())];
        strong_views.push(strong_style(&xw, style, strong)?);
        weak_views.push(xw);
    }
    Ok((weak_views, strong_views))
}

/// Strong view of each image with styles drawn from the same batch.
pub fn strong_views_in_batch(
    images: &[&Image],
    cfg: &StrongAugConfig,
    rng: &mut Rng,
) -> Result<Vec<Image>> {
    images
        .iter()
        .map(|im| strong_style(im, images[rng.random_range(0..images.len())], cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    fn gradient_image(h: usize, w: usize) -> Image {
        let data = (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f32, (i % w) as f32);
                0.2 + 0.6 * (0.5 + 0.5 * (x * 0.4).sin() * (y * 0.3).cos())
            })
            .collect();
        Image::new(h, w, data).unwrap()
    }

    fn max_diff(a: &Image, b: &Image) -> f32 {
        a.data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f32::max)
    }

    #[test]
    fn weak_identity_cases() {
        let im = gradient_image(16, 16);
        let mut rng = stream_rng(1, Stream::AugLabeled, 0);
        let zero_sigma = WeakAugConfig {
            sigma: 0.0,
            pixel_prob: 0.5,
        };
        assert_eq!(weak_gaussian(&im, &zero_sigma, &mut rng).unwrap(), im);
        let zero_prob = WeakAugConfig {
            sigma: 0.3,
            pixel_prob: 0.0,
        };
        assert_eq!(weak_gaussian(&im, &zero_prob, &mut rng).unwrap(), im);
    }

    #[test]
    fn weak_changes_about_half_the_pixels() {
        let im = Image::filled(64, 64, 0.5);
        let cfg = WeakAugConfig {
            sigma: 0.1,
            pixel_prob: 0.5,
        };
        for seed in 0..20 {
            let out =
                weak_gaussian(&im, &cfg, &mut stream_rng(seed, Stream::AugLabeled, 0)).unwrap();
            let changed = out.data.iter().filter(|&&v| v != 0.5).count() as f64 / 4096.0;
            assert!((0.44..=0.56).contains(&changed), "seed {seed}: {changed}");
        }
    }

    #[test]
    fn weak_is_deterministic_and_bounded() {
        let im = gradient_image(32, 32);
        let cfg = WeakAugConfig {
            sigma: 0.5,
            pixel_prob: 1.0,
        };
        let a = weak_gaussian(&im, &cfg, &mut stream_rng(3, Stream::AugLabeled, 9)).unwrap();
        let b = weak_gaussian(&im, &cfg, &mut stream_rng(3, Stream::AugLabeled, 9)).unwrap();
        assert_eq!(a, b);
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!((a.height, a.width), (32, 32));
    }

    #[test]
    fn weak_rejects_bad_config() {
        let im = Image::filled(4, 4, 0.5);
        let mut rng = stream_rng(0, Stream::AugLabeled, 0);
        for cfg in [
            WeakAugConfig {
                sigma: -1.0,
                pixel_prob: 0.5,
            },
            WeakAugConfig {
                sigma: 0.1,
                pixel_prob: 1.5,
            },
        ] {
            assert!(weak_gaussian(&im, &cfg, &mut rng).is_err());
        }
    }

    #[test]
    fn strong_identity_cases() {
        let content = gradient_image(32, 32);
        let mut style = gradient_image(32, 32);
        style.data.iter_mut().for_each(|v| *v = 1.0 - *v);
        let none = StrongAugConfig {
            lambda: 0.0,
            radius: 4,
        };
        assert!(max_diff(&strong_style(&content, &style, &none).unwrap(), &content) < 1e-6);
        let full = StrongAugConfig {
            lambda: 0.8,
            radius: 16,
        };
        assert!(max_diff(&strong_style(&content, &content, &full).unwrap(), &content) < 1e-6);
    }

    #[test]
    fn strong_swaps_constant_images() {
        let c = Image::filled(16, 16, 0.3);
        let s = Image::filled(16, 16, 0.7);
        let cfg = StrongAugConfig {
            lambda: 1.0,
            radius: 8,
        };
        let out = strong_style(&c, &s, &cfg).unwrap();
        assert!(out.data.iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn strong_rejects_mismatched_extents() {
        let cfg = StrongAugConfig::for_size(8, 8);
        assert_eq!(cfg.radius, 1);
        let err = strong_style(&Image::filled(8, 8, 0.1), &Image::filled(8, 4, 0.1), &cfg);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn views_identity_and_determinism() {
        let a = gradient_image(16, 16);
        let mut b = gradient_image(16, 16);
        b.data.iter_mut().for_each(|v| *v *= 0.5);
        let batch = [&a, &b];
        let weak0 = WeakAugConfig {
            sigma: 0.0,
            pixel_prob: 0.5,
        };
        let strong0 = StrongAugConfig {
            lambda: 0.0,
            radius: 2,
        };
        let mut rng = stream_rng(5, Stream::AugUnlabeled, 0);
        let (xw, xs) = apply_views(&batch, &weak0, &strong0, &batch, &mut rng).unwrap();
        for i in 0..2 {
            assert_eq!(xw[i], *batch[i]);
            assert!(max_diff(&xs[i], batch[i]) < 1e-6);
        }

        let weak = WeakAugConfig::default();
        let strong = StrongAugConfig {
            lambda: 1.0,
            radius: 2,
        };
        let run = || {
            apply_views(
                &batch,
                &weak,
                &strong,
                &batch,
                &mut stream_rng(5, Stream::AugUnlabeled, 1),
            )
            .unwrap()
        };
        assert_eq!(run(), run());

        let empty: [&Image; 0] = [];
        assert!(apply_views(&batch, &weak, &strong, &empty, &mut rng).is_err());
    }
}
