use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::TrainingPair;
use crate::raster::{Image, Mask};

/// Augmentation ranges. Spatial draws are shared by both images of a pair;
/// photometric draws and noise are independent per image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub max_rotation_deg: f64,
    /// Maximum shift as a fraction of the image side.
    pub max_shift: f64,
    /// Maximum relative zoom, e.g. 0.1 for scales in `[0.9, 1.1]`.
    pub max_scale: f64,
    pub max_brightness: f64,
    pub max_contrast: f64,
    pub noise_std: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            max_rotation_deg: 10.0,
            max_shift: 0.05,
            max_scale: 0.05,
            max_brightness: 0.05,
            max_contrast: 0.05,
            noise_std: 0.01,
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        AugmentPolicy {
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            max_rotation_deg: 0.0,
            max_shift: 0.0,
            max_scale: 0.0,
            max_brightness: 0.0,
            max_contrast: 0.0,
            noise_std: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct SpatialDraw {
    hflip: bool,
    vflip: bool,
    angle: f64,
    shift: (f64, f64),
    scale: f64,
}

impl SpatialDraw {
    fn is_rigid_identity(&self) -> bool {
        self.angle == 0.0 && self.shift == (0.0, 0.0) && self.scale == 1.0
    }

    /// Output pixel -> source pixel for the rotate/shift/zoom part.
    fn inverse_map(&self, h: usize, w: usize) -> impl Fn(f64, f64) -> (f64, f64) {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let (s, c) = self.angle.sin_cos();
        let inv = 1.0 / self.scale;
        let (tx, ty) = (self.shift.0 * w as f64, self.shift.1 * h as f64);
        move |x, y| {
            let (dx, dy) = (x - cx - tx, y - cy - ty);
            (cx + inv * (c * dx + s * dy), cy + inv * (-s * dx + c * dy))
        }
    }

    fn apply_image(&self, im: &Image) -> Image {
        let mut out = im.clone();
        if self.hflip {
            out = out.flip_horizontal();
        }
        if self.vflip {
            out = out.flip_vertical();
        }
        if !self.is_rigid_identity() {
            out = out.warp(&self.inverse_map(im.height, im.width));
        }
        out
    }

    fn apply_mask(&self, m: &Mask) -> Mask {
        let mut out = m.clone();
        if self.hflip {
            out = out.flip_horizontal();
        }
        if self.vflip {
            out = out.flip_vertical();
        }
        if !self.is_rigid_identity() {
            out = out.warp_nearest(&self.inverse_map(m.height, m.width));
        }
        out
    }
}

fn symmetric(rng: &mut ChaCha8Rng, max: f64) -> f64 {
    if max > 0.0 {
        rng.random_range(-max..=max)
    } else {
        0.0
    }
}

fn photometric(im: Image, policy: &AugmentPolicy, rng: &mut ChaCha8Rng) -> Image {
    let brightness = symmetric(rng, policy.max_brightness);
    let contrast = 1.0 + symmetric(rng, policy.max_contrast);
    let mut out = im;
    if brightness != 0.0 || contrast != 1.0 {
        let mean = out.data.iter().sum::<f64>() / out.data.len() as f64;
        out.data.iter_mut().for_each(|v| *v = (*v - mean) * contrast + mean + brightness);
    }
    if policy.noise_std > 0.0 {
        let noise = Normal::new(0.0, policy.noise_std).expect("valid std");
        out.data.iter_mut().for_each(|v| *v += noise.sample(rng));
    }
    out.clamp01()
}

/// Applies one spatial draw to `x_i`, `x_j` and both masks, then independent
/// photometric jitter and noise to each image. Deterministic given `seed`.
pub fn augment_pair(pair: &TrainingPair, policy: &AugmentPolicy, seed: u64) -> TrainingPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = SpatialDraw {
        hflip: policy.hflip_prob > 0.0 && rng.random_bool(policy.hflip_prob.min(1.0)),
        vflip: policy.vflip_prob > 0.0 && rng.random_bool(policy.vflip_prob.min(1.0)),
        angle: symmetric(&mut rng, policy.max_rotation_deg).to_radians(),
        shift: (symmetric(&mut rng, policy.max_shift), symmetric(&mut rng, policy.max_shift)),
        scale: 1.0 + symmetric(&mut rng, policy.max_scale),
    };
    let x_i = photometric(draw.apply_image(&pair.x_i), policy, &mut rng);
    let x_j = photometric(draw.apply_image(&pair.x_j), policy, &mut rng);
    TrainingPair {
        x_i,
        x_j,
        mask_i: pair.mask_i.as_ref().map(|m| draw.apply_mask(m)),
        mask_j: pair.mask_j.as_ref().map(|m| draw.apply_mask(m)),
        ..pair.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::synth::{disk_mask, render_series, SeriesParams, SynthConfig};

    fn pair() -> TrainingPair {
        let cfg = SynthConfig { image_size: 24, ..SynthConfig::default() };
        let params = SeriesParams {
            center: (9.0, 13.0),
            base_radius: 3.0,
            growth_rate: 0.3,
            waves: vec![(0.05, 1.0, 2.0, 0.3)],
            background_level: 0.6,
            head_axes: None,
        };
        let (ims, masks) = render_series(&params, &[0.0, 10.0], &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        TrainingPair {
            series_id: "s".into(),
            i: 0,
            j: 1,
            x_i: ims[0].clone(),
            x_j: ims[1].clone(),
            t_i: 0.0,
            t_j: 0.5,
            mask_i: Some(masks[0].clone()),
            mask_j: Some(masks[1].clone()),
        }
    }

    #[test]
    fn identity_policy_leaves_pair_unchanged() {
        let p = pair();
        assert_eq!(augment_pair(&p, &AugmentPolicy::identity(), 42), p);
    }

    #[test]
    fn horizontal_flip_applies_to_both_and_is_involution() {
        let p = pair();
        let policy = AugmentPolicy { hflip_prob: 1.0, ..AugmentPolicy::identity() };
        let once = augment_pair(&p, &policy, 3);
        assert_eq!(once.x_i, p.x_i.flip_horizontal());
        assert_eq!(once.x_j, p.x_j.flip_horizontal());
        assert_eq!(once.mask_j, p.mask_j.as_ref().map(Mask::flip_horizontal));
        let twice = augment_pair(&once, &policy, 4);
        assert_eq!(twice, p);
    }

    #[test]
    fn spatial_transform_is_shared_within_pair() {
        // Identical inputs must stay identical when only spatial draws apply.
        let mut p = pair();
        p.x_j = p.x_i.clone();
        p.mask_j = p.mask_i.clone();
        let policy = AugmentPolicy { max_brightness: 0.0, max_contrast: 0.0, noise_std: 0.0, ..AugmentPolicy::default() };
        for seed in 0..20 {
            let a = augment_pair(&p, &policy, seed);
            assert_eq!(a.x_i, a.x_j);
            assert_eq!(a.mask_i, a.mask_j);
        }
    }

    #[test]
    fn masks_stay_binary_after_rotation() {
        let p = TrainingPair { mask_j: Some(disk_mask(24, (12.0, 12.0), 6.0)), ..pair() };
        let policy = AugmentPolicy { max_rotation_deg: 30.0, ..AugmentPolicy::identity() };
        let a = augment_pair(&p, &policy, 5);
        assert!(a.mask_j.unwrap().data.iter().all(|&v| v <= 1));
    }

    #[test]
    fn fixed_seed_is_bit_reproducible() {
        let p = pair();
        let policy = AugmentPolicy::default();
        assert_eq!(augment_pair(&p, &policy, 77), augment_pair(&p, &policy, 77));
    }

    #[test]
    fn outputs_stay_in_unit_range_over_many_draws() {
        let p = pair();
        let policy = AugmentPolicy {
            max_brightness: 0.5,
            max_contrast: 0.5,
            noise_std: 0.3,
            ..AugmentPolicy::default()
        };
        for seed in 0..1000 {
            let a = augment_pair(&p, &policy, seed);
            assert!(a.x_i.in_unit_range() && a.x_j.in_unit_range());
        }
    }
}
