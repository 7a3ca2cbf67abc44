//! Weak (random horizontal flip) and strong (two random parameterized
//! operations) augmentations.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Image;

pub fn flip_horizontal(x: &Image) -> Image {
    Image::from_fn(x.height, x.width, x.channels, |y, col, c| x.get(y, x.width - 1 - col, c))
}

/// Horizontal flip with probability 0.5.
pub fn weak_augment(x: &Image, rng: &mut impl Rng) -> Image {
    if rng.random_bool(0.5) {
        flip_horizontal(x)
    } else {
        x.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrongOp {
    /// Blend toward `1 - x`.
    Invert,
    /// Rotation about the image center, bilinear, edge-clamped.
    Rotate,
    /// Scale deviations from the image mean.
    Contrast,
    /// Additive Gaussian noise.
    Noise,
    /// Square patch filled with 0.5.
    Cutout,
}

impl StrongOp {
    pub const ALL: [StrongOp; 5] = [
        StrongOp::Invert,
        StrongOp::Rotate,
        StrongOp::Contrast,
        StrongOp::Noise,
        StrongOp::Cutout,
    ];
}

/// Maximum magnitude per operation; magnitudes are drawn uniformly from
/// `[0, max]` (rotation and contrast are symmetric around identity).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrongAugConfig {
    pub ops_per_sample: usize,
    /// Blend weight toward the inverted image.
    pub invert_max: f64,
    pub rotate_max_deg: f64,
    /// Contrast factor is `1 + u` with `u` uniform in `[-max, max]`.
    pub contrast_max: f64,
    pub noise_max: f64,
    /// Cutout side as a fraction of the image side.
    pub cutout_max: f64,
}

impl Default for StrongAugConfig {
    fn default() -> Self {
        Self {
            ops_per_sample: 2,
            invert_max: 0.3,
            rotate_max_deg: 30.0,
            contrast_max: 0.5,
            noise_max: 0.1,
            cutout_max: 0.4,
        }
    }
}

impl StrongAugConfig {
    pub fn zero() -> Self {
        Self {
            ops_per_sample: 2,
            invert_max: 0.0,
            rotate_max_deg: 0.0,
            contrast_max: 0.0,
            noise_max: 0.0,
            cutout_max: 0.0,
        }
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn rotate(x: &Image, degrees: f64) -> Image {
    let (s, c) = degrees.to_radians().sin_cos();
    let cy = (x.height as f64 - 1.0) / 2.0;
    let cx = (x.width as f64 - 1.0) / 2.0;
    let clamp = |v: f64, n: usize| v.max(0.0).min(n as f64 - 1.0);
    Image::from_fn(x.height, x.width, x.channels, |y, col, ch| {
        let (dy, dx) = (y as f64 - cy, col as f64 - cx);
        let sy = clamp(cy + s * dx + c * dy, x.height);
        let sx = clamp(cx + c * dx - s * dy, x.width);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(x.height - 1), (x0 + 1).min(x.width - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        let top = x.get(y0, x0, ch) * (1.0 - fx) + x.get(y0, x1, ch) * fx;
        let bottom = x.get(y1, x0, ch) * (1.0 - fx) + x.get(y1, x1, ch) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Applies one operation with a magnitude drawn from its configured range.
pub fn apply_op(x: &Image, op: StrongOp, cfg: &StrongAugConfig, rng: &mut impl Rng) -> Image {
    match op {
        StrongOp::Invert => {
            let m = uniform(rng, 0.0, cfg.invert_max);
            if m == 0.0 {
                return x.clone();
            }
            let mut out = x.clone();
            out.data.iter_mut().for_each(|v| *v = (1.0 - m) * *v + m * (1.0 - *v));
            out
        }
        StrongOp::Rotate => {
            let deg = uniform(rng, -cfg.rotate_max_deg, cfg.rotate_max_deg);
            if deg == 0.0 {
                return x.clone();
            }
            rotate(x, deg)
        }
        StrongOp::Contrast => {
            let u = uniform(rng, -cfg.contrast_max, cfg.contrast_max);
            if u == 0.0 {
                return x.clone();
            }
            let mean = x.data.iter().sum::<f64>() / x.data.len() as f64;
            let mut out = x.clone();
            out.data.iter_mut().for_each(|v| *v = mean + (1.0 + u) * (*v - mean));
            out
        }
        StrongOp::Noise => {
            let sigma = uniform(rng, 0.0, cfg.noise_max);
            if sigma == 0.0 {
                return x.clone();
            }
            let normal = Normal::new(0.0, sigma).expect("positive sigma");
            let mut out = x.clone();
            out.data.iter_mut().for_each(|v| *v += normal.sample(rng));
            out
        }
        StrongOp::Cutout => {
            let frac = uniform(rng, 0.0, cfg.cutout_max);
            let side = (frac * x.height.min(x.width) as f64).round() as usize;
            if side == 0 {
                return x.clone();
            }
            let y0 = rng.random_range(0..=x.height - side);
            let x0 = rng.random_range(0..=x.width - side);
            let mut out = x.clone();
            for y in y0..y0 + side {
                for col in x0..x0 + side {
                    for c in 0..x.channels {
                        out.set(y, col, c, 0.5);
                    }
                }
            }
            out
        }
    }
}

/// Composes `ops_per_sample` distinct operations drawn uniformly from
/// [`StrongOp::ALL`].
pub fn strong_augment(x: &Image, cfg: &StrongAugConfig, rng: &mut impl Rng) -> Image {
    let n = cfg.ops_per_sample.min(StrongOp::ALL.len());
    let ops: Vec<StrongOp> = StrongOp::ALL.choose_multiple(rng, n).copied().collect();
    ops.into_iter().fold(x.clone(), |img, op| apply_op(&img, op, cfg, rng))
}

/// Weak and strong view of one raw sample.
#[derive(Debug, Clone)]
pub struct AugmentViews {
    pub weak: Image,
    pub strong: Image,
}

impl AugmentViews {
    pub fn new(x: &Image, cfg: &StrongAugConfig, rng: &mut impl Rng) -> Self {
        Self {
            weak: weak_augment(x, rng),
            strong: strong_augment(x, cfg, rng),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(rng: &mut ChaCha8Rng) -> Image {
        Image::from_fn(8, 8, 3, |_, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn flip_is_an_involution_preserving_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = sample(&mut rng);
        let f = flip_horizontal(&x);
        assert_eq!(flip_horizontal(&f), x);
        let mut a = x.data.clone();
        let mut b = f.data.clone();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn symmetric_input_survives_weak_augment() {
        let x = Image::from_fn(4, 6, 1, |y, col, _| (y * 10 + col.min(5 - col)) as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            assert_eq!(weak_augment(&x, &mut rng), x);
        }
    }

    #[test]
    fn zero_magnitudes_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = sample(&mut rng);
        let cfg = StrongAugConfig::zero();
        for _ in 0..20 {
            assert_eq!(strong_augment(&x, &cfg, &mut rng), x);
        }
        for op in StrongOp::ALL {
            assert_eq!(apply_op(&x, op, &cfg, &mut rng), x);
        }
    }

    #[test]
    fn every_op_pair_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = sample(&mut rng);
        let cfg = StrongAugConfig::default();
        for a in StrongOp::ALL {
            for b in StrongOp::ALL {
                let y = apply_op(&apply_op(&x, a, &cfg, &mut rng), b, &cfg, &mut rng);
                assert!(y.same_shape(&x));
                assert_eq!(y.data.len(), x.data.len());
            }
        }
    }

    #[test]
    fn rotation_by_zero_degrees_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = sample(&mut rng);
        assert!(rotate(&x, 0.0).l2_distance(&x) < 1e-12);
        let back = rotate(&rotate(&x, 90.0), -90.0);
        assert!(back.l2_distance(&x) < 1e-9);
    }
}
