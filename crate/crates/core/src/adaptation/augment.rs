use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Noise std of the teacher's input.
    pub weak_sigma: f64,
    /// Student noise std, drawn uniformly from this list per sample.
    pub strong_sigmas: Vec<f64>,
    /// Contrast factor `C = 1 + 2a(u − ½)` with `u ~ U(0, 1)`.
    pub contrast_a: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            weak_sigma: 0.01,
            strong_sigmas: vec![0.2, 0.1],
            contrast_a: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn check(&self) -> Result<()> {
        if self.weak_sigma < 0.0
            || self.strong_sigmas.is_empty()
            || self.strong_sigmas.iter().any(|s| !(*s >= 0.0))
            || !(0.0..=0.5).contains(&self.contrast_a)
        {
            return Err(Error::Config("augmentation parameters out of range".into()));
        }
        Ok(())
    }
}

/// Adds `N(0, σ²)` to every value; `σ = 0` returns the input unchanged.
pub fn add_noise(img: &Image, sigma: f64, rng: &mut ChaCha8Rng) -> Image {
    let mut out = img.clone();
    if sigma > 0.0 {
        let n = Normal::new(0.0, sigma).expect("finite sigma");
        out.data.iter_mut().for_each(|v| *v += n.sample(rng));
    }
    out
}

/// Scales each channel about its mean by `factor`.
pub fn scale_contrast(img: &Image, factor: f64) -> Image {
    let mut out = img.clone();
    if factor == 1.0 {
        return out;
    }
    let c = img.channels;
    let n = (img.height * img.width) as f64;
    for ch in 0..c {
        let mean = img.data.iter().skip(ch).step_by(c).sum::<f64>() / n;
        out.data
            .iter_mut()
            .skip(ch)
            .step_by(c)
            .for_each(|v| *v = mean + factor * (*v - mean));
    }
    out
}

pub fn augment_weak(img: &Image, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Image {
    add_noise(img, cfg.weak_sigma, rng)
}

pub fn augment_strong(img: &Image, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Image {
    let sigma = cfg.strong_sigmas[rng.random_range(0..cfg.strong_sigmas.len())];
    let u: f64 = rng.random();
    let contrasted = scale_contrast(img, 1.0 + 2.0 * cfg.contrast_a * (u - 0.5));
    add_noise(&contrasted, sigma, rng)
}
