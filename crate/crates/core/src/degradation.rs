//! Single-order synthetic degradation: blur, random-kernel downsampling,
//! additive Gaussian noise, JPEG round trip.

use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::imageops::{self, FilterType};
use image::{ImageFormat, RgbImage};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMode {
    Bicubic,
    Bilinear,
    Nearest,
}

impl ResizeMode {
    fn filter(self) -> FilterType {
        match self {
            ResizeMode::Bicubic => FilterType::CatmullRom,
            ResizeMode::Bilinear => FilterType::Triangle,
            ResizeMode::Nearest => FilterType::Nearest,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResizeProbabilities {
    pub bicubic: f64,
    pub bilinear: f64,
    pub nearest: f64,
}

impl Default for ResizeProbabilities {
    fn default() -> Self {
        ResizeProbabilities {
            bicubic: 0.5,
            bilinear: 0.3,
            nearest: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationConfig {
    pub scale: u32,
    /// Gaussian blur sigma range in HR pixels; 0 disables blurring.
    pub blur_sigma: [f64; 2],
    pub resize: ResizeProbabilities,
    /// Additive noise sigma range in 8-bit levels.
    pub noise_sigma: [f64; 2],
    pub jpeg_quality: [u8; 2],
}

impl Default for DegradationConfig {
    fn default() -> Self {
        DegradationConfig {
            scale: 4,
            blur_sigma: [0.2, 1.5],
            resize: ResizeProbabilities::default(),
            noise_sigma: [1.0, 10.0],
            jpeg_quality: [40, 95],
        }
    }
}

impl DegradationConfig {
    /// Blur-free, noise-free, bicubic-only, quality-100 pipeline.
    pub fn identity(scale: u32) -> Self {
        DegradationConfig {
            scale,
            blur_sigma: [0.0, 0.0],
            resize: ResizeProbabilities {
                bicubic: 1.0,
                bilinear: 0.0,
                nearest: 0.0,
            },
            noise_sigma: [0.0, 0.0],
            jpeg_quality: [100, 100],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, r: [f64; 2]| {
            if !(r[0] >= 0.0 && r[0] <= r[1] && r[1].is_finite()) {
                Err(Error::Config(format!("{name} range {r:?} must satisfy 0 <= lo <= hi")))
            } else {
                Ok(())
            }
        };
        range("blur_sigma", self.blur_sigma)?;
        range("noise_sigma", self.noise_sigma)?;
        let [qlo, qhi] = self.jpeg_quality;
        if qlo == 0 || qlo > qhi || qhi > 100 {
            return Err(Error::Config(format!(
                "jpeg_quality range {:?} must satisfy 1 <= lo <= hi <= 100",
                self.jpeg_quality
            )));
        }
        let p = &self.resize;
        let probs = [p.bicubic, p.bilinear, p.nearest];
        if probs.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "resize probabilities {probs:?} must be in [0, 1] and sum to 1"
            )));
        }
        if self.scale < 1 {
            return Err(Error::Config("scale must be at least 1".into()));
        }
        Ok(())
    }
}

/// The parameters drawn for one image, written to the pair manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationRecord {
    pub blur_sigma: f64,
    pub resize: ResizeMode,
    pub noise_sigma: f64,
    pub jpeg_quality: u8,
}

fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

pub fn sample_parameters(config: &DegradationConfig, rng: &mut impl Rng) -> DegradationRecord {
    let blur_sigma = uniform(rng, config.blur_sigma);
    let u: f64 = rng.random();
    let p = &config.resize;
    let resize = if u < p.bicubic {
        ResizeMode::Bicubic
    } else if u < p.bicubic + p.bilinear {
        ResizeMode::Bilinear
    } else {
        ResizeMode::Nearest
    };
    let noise_sigma = uniform(rng, config.noise_sigma);
    let [qlo, qhi] = config.jpeg_quality;
    let jpeg_quality = rng.random_range(qlo..=qhi);
    DegradationRecord {
        blur_sigma,
        resize,
        noise_sigma,
        jpeg_quality,
    }
}

/// Degrades `hr` into an LR image `scale` times smaller.
pub fn degrade(hr: &RgbImage, config: &DegradationConfig, rng: &mut impl Rng) -> Result<(RgbImage, DegradationRecord)> {
    config.validate()?;
    let (w, h) = hr.dimensions();
    let s = config.scale;
    if w % s != 0 || h % s != 0 || w == 0 || h == 0 {
        return Err(Error::Shape(format!("{w}x{h} is not divisible by scale {s}")));
    }
    let record = sample_parameters(config, rng);
    let blurred = gaussian_blur(hr, record.blur_sigma);
    let small = imageops::resize(&blurred, w / s, h / s, record.resize.filter());
    let noisy = add_gaussian_noise(&small, record.noise_sigma, rng);
    let lr = jpeg_round_trip(&noisy, record.jpeg_quality)?;
    Ok((lr, record))
}

/// Separable Gaussian blur with edge clamping; `sigma <= 0` is a no-op.
pub fn gaussian_blur(img: &RgbImage, sigma: f64) -> RgbImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (w, h) = (img.width() as i64, img.height() as i64);
    let src: Vec<f64> = img.as_raw().iter().map(|&v| v as f64).collect();
    let at = |x: i64, y: i64, c: usize| ((y * w + x) * 3) as usize + c;
    let mut tmp = vec![0f64; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                tmp[at(x, y, c)] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wk)| wk * src[at((x + k as i64 - radius).clamp(0, w - 1), y, c)])
                    .sum();
            }
        }
    }
    let mut out = vec![0u8; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wk)| wk * tmp[at(x, (y + k as i64 - radius).clamp(0, h - 1), c)])
                    .sum();
                out[at(x, y, c)] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    RgbImage::from_raw(img.width(), img.height(), out).expect("same dims")
}

pub fn add_gaussian_noise(img: &RgbImage, sigma: f64, rng: &mut impl Rng) -> RgbImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    let data = img
        .as_raw()
        .iter()
        .map(|&v| (v as f64 + normal.sample(rng)).round().clamp(0.0, 255.0) as u8)
        .collect();
    RgbImage::from_raw(img.width(), img.height(), data).expect("same dims")
}

pub fn jpeg_round_trip(img: &RgbImage, quality: u8) -> Result<RgbImage> {
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality).encode_image(img)?;
    Ok(image::load(Cursor::new(buf), ImageFormat::Jpeg)?.to_rgb8())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng;

    fn pattern(size: u32) -> RgbImage {
        RgbImage::from_fn(size, size, |x, y| {
            let v = if ((x / 8) + (y / 8)) % 2 == 0 { 200 } else { 60 };
            image::Rgb([v, ((x * 3) % 256) as u8, ((y * 5) % 256) as u8])
        })
    }

    fn mean_abs_diff(a: &RgbImage, b: &RgbImage) -> f64 {
        a.as_raw().iter().zip(b.as_raw()).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum::<f64>() / a.as_raw().len() as f64
    }

    #[test]
    fn geometry() {
        let (lr, _) = degrade(&pattern(512), &DegradationConfig::default(), &mut rng(1)).unwrap();
        assert_eq!(lr.dimensions(), (128, 128));
    }

    #[test]
    fn indivisible_dims_rejected() {
        let img = RgbImage::new(30, 32);
        assert!(matches!(degrade(&img, &DegradationConfig::default(), &mut rng(1)), Err(Error::Shape(_))));
    }

    #[test]
    fn deterministic_under_seed() {
        let hr = pattern(64);
        let a = degrade(&hr, &DegradationConfig::default(), &mut rng(5)).unwrap();
        let b = degrade(&hr, &DegradationConfig::default(), &mut rng(5)).unwrap();
        assert_eq!(a, b);
        let c = degrade(&hr, &DegradationConfig::default(), &mut rng(6)).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn identity_config_is_plain_bicubic() {
        let hr = pattern(64);
        let (lr, rec) = degrade(&hr, &DegradationConfig::identity(4), &mut rng(0)).unwrap();
        assert_eq!(rec.resize, ResizeMode::Bicubic);
        let reference = imageops::resize(&hr, 16, 16, FilterType::CatmullRom);
        assert!(mean_abs_diff(&lr, &reference) < 3.0, "{}", mean_abs_diff(&lr, &reference));
    }

    #[test]
    fn noise_increases_distance_monotonically() {
        let hr = pattern(64);
        let clean = imageops::resize(&hr, 16, 16, FilterType::CatmullRom);
        for seed in 0..4 {
            let mut last = -1.0;
            for sigma in [0.0, 5.0, 20.0] {
                let cfg = DegradationConfig {
                    noise_sigma: [sigma, sigma],
                    ..DegradationConfig::identity(4)
                };
                let (lr, _) = degrade(&hr, &cfg, &mut rng(seed)).unwrap();
                let d = mean_abs_diff(&lr, &clean);
                assert!(d > last, "seed {seed} sigma {sigma}: {d} <= {last}");
                last = d;
            }
        }
    }

    #[test]
    fn invalid_configs() {
        let mut c = DegradationConfig::default();
        c.resize.nearest = 0.5;
        assert!(c.validate().is_err());
        let c = DegradationConfig { blur_sigma: [2.0, 1.0], ..Default::default() };
        assert!(c.validate().is_err());
        let c = DegradationConfig { jpeg_quality: [0, 50], ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = RgbImage::from_pixel(9, 7, image::Rgb([10, 100, 250]));
        assert_eq!(gaussian_blur(&img, 1.3), img);
    }
}
