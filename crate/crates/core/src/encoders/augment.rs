use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::Image;
use crate::rng;

/// Parameters of the consistency-view augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Maximum torus shift in pixels along each axis.
    pub max_shift: usize,
    /// Noise standard deviation as a fraction of the image's own std.
    pub noise_frac: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_shift: 1,
            noise_frac: 0.05,
        }
    }
}

/// Seeded shift of up to ±1 pixel per axis, then Gaussian noise at 5% of the
/// image's standard deviation.
pub fn augment(image: &Image, seed: u64) -> Image {
    augment_with(image, &AugmentConfig::default(), seed)
}

pub fn augment_with(image: &Image, cfg: &AugmentConfig, seed: u64) -> Image {
    let mut r = rng::rng(seed);
    let m = cfg.max_shift as i64;
    let dy = r.random_range(-m..=m);
    let dx = r.random_range(-m..=m);
    let mut out = if dy == 0 && dx == 0 { image.clone() } else { image.roll(dy as isize, dx as isize) };
    let std = cfg.noise_frac * image.std();
    if std > 0.0 {
        let normal = Normal::new(0.0, std).expect("finite std");
        for v in out.data_mut() {
            *v += normal.sample(&mut r);
        }
    }
    out
}
