use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, LongitudinalSeries, Split};
use crate::raster::{Image, Mask};
use crate::{Error, Result};

/// Parameters of the synthetic growing-lesion generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_series: usize,
    pub image_size: usize,
    pub visits_min: usize,
    pub visits_max: usize,
    /// Length of the observation window (arbitrary units, e.g. months).
    pub horizon: f64,
    /// Lesion radius in pixels at time zero.
    pub lesion_base_radius: f64,
    /// Per-series growth rate is drawn uniformly from this range
    /// (pixels per time unit).
    pub growth_rate_range: (f64, f64),
    /// Multiplicative darkening inside the lesion.
    pub lesion_contrast: f64,
    pub texture_noise_std: f64,
    pub background_structure_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_series: 40,
            image_size: 64,
            visits_min: 2,
            visits_max: 6,
            horizon: 24.0,
            lesion_base_radius: 4.0,
            growth_rate_range: (0.1, 0.6),
            lesion_contrast: 0.6,
            texture_noise_std: 0.02,
            background_structure_seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_series == 0 || self.image_size < 8 {
            return bad("num_series must be positive and image_size at least 8");
        }
        if self.visits_min < 2 || self.visits_max < self.visits_min {
            return bad("need 2 <= visits_min <= visits_max");
        }
        if !(self.horizon > 0.0) || !(self.lesion_base_radius > 0.0) {
            return bad("horizon and lesion_base_radius must be positive");
        }
        let (lo, hi) = self.growth_rate_range;
        if !(lo > 0.0) || hi < lo {
            return bad("growth rates must be positive with min <= max");
        }
        if !(0.0..=1.0).contains(&self.lesion_contrast) || self.texture_noise_std < 0.0 {
            return bad("lesion_contrast must lie in [0, 1] and noise std be non-negative");
        }
        Ok(())
    }
}

/// Everything that defines one synthetic subject.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesParams {
    pub center: (f64, f64),
    pub base_radius: f64,
    pub growth_rate: f64,
    /// `(amplitude, kx, ky, phase)` plane waves forming the background.
    pub waves: Vec<(f64, f64, f64, f64)>,
    pub background_level: f64,
    /// Semi-axes `(ax, ay)` of the elliptical head outline as fractions of
    /// the image side; `None` fills the whole frame with tissue.
    pub head_axes: Option<(f64, f64)>,
}

impl SeriesParams {
    pub fn radius_at(&self, t: f64) -> f64 {
        self.base_radius + self.growth_rate * t
    }
}

/// Disk of `radius` around `center = (x, y)`, clipped to the frame.
pub fn disk_mask(size: usize, center: (f64, f64), radius: f64) -> Mask {
    let mut data = vec![0u8; size * size];
    let r2 = radius * radius;
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 - center.0;
            let dy = y as f64 - center.1;
            if dx * dx + dy * dy <= r2 {
                data[y * size + x] = 1;
            }
        }
    }
    Mask { height: size, width: size, data }
}

fn background(params: &SeriesParams, size: usize) -> Vec<f64> {
    let mut out = vec![params.background_level; size * size];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
            let tissue = params.background_level
                + params
                    .waves
                    .iter()
                    .map(|&(a, kx, ky, ph)| a * (std::f64::consts::TAU * (kx * u + ky * v) + ph).sin())
                    .sum::<f64>();
            out[y * size + x] = match params.head_axes {
                None => tissue,
                Some((ax, ay)) => {
                    let e = ((u - 0.5) / ax).powi(2) + ((v - 0.5) / ay).powi(2);
                    // Dark outside, bright rim (skull), tissue inside.
                    if e > 1.0 {
                        0.05
                    } else if e > 0.8 {
                        0.9
                    } else {
                        tissue
                    }
                }
            };
        }
    }
    out
}

/// Renders images and ground-truth masks of one subject at `times`.
pub fn render_series(
    params: &SeriesParams,
    times: &[f64],
    config: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<Image>, Vec<Mask>) {
    let size = config.image_size;
    let bg = background(params, size);
    let noise = Normal::new(0.0, config.texture_noise_std.max(0.0)).expect("valid std");
    let mut images = Vec::with_capacity(times.len());
    let mut masks = Vec::with_capacity(times.len());
    for &t in times {
        let mask = disk_mask(size, params.center, params.radius_at(t));
        let data = bg
            .iter()
            .zip(&mask.data)
            .map(|(&b, &m)| {
                let v = if m == 1 { b * (1.0 - config.lesion_contrast) } else { b };
                let n = if config.texture_noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
                (v + n).clamp(0.0, 1.0)
            })
            .collect();
        images.push(Image { channels: 1, height: size, width: size, data });
        masks.push(mask);
    }
    (images, masks)
}

fn sample_params(config: &SynthConfig, rng: &mut ChaCha8Rng, structure: &mut ChaCha8Rng) -> SeriesParams {
    let size = config.image_size as f64;
    let center = (rng.random_range(0.3 * size..0.7 * size), rng.random_range(0.3 * size..0.7 * size));
    let (lo, hi) = config.growth_rate_range;
    let growth_rate = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let waves = (0..4)
        .map(|_| {
            (
                structure.random_range(0.02..0.07),
                structure.random_range(-3.0..3.0),
                structure.random_range(-3.0..3.0),
                structure.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    SeriesParams {
        center,
        base_radius: config.lesion_base_radius,
        growth_rate,
        waves,
        background_level: structure.random_range(0.5..0.7),
        head_axes: Some((structure.random_range(0.42..0.48), structure.random_range(0.44..0.49))),
    }
}

/// Draws `num_series` subjects with irregular visit times and growing
/// lesions. Deterministic for a given `(config, seed)`.
pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let mut series = Vec::with_capacity(config.num_series);
    for k in 0..config.num_series {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let mut structure = ChaCha8Rng::seed_from_u64(config.background_structure_seed ^ seed.rotate_left(17));
        structure.set_stream(k as u64);
        let params = sample_params(config, &mut rng, &mut structure);
        let n = rng.random_range(config.visits_min..=config.visits_max);
        let times = loop {
            let mut t: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..config.horizon)).collect();
            t.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            if t.windows(2).all(|w| w[0] < w[1]) {
                break t;
            }
        };
        let (images, masks) = render_series(&params, &times, config, &mut rng);
        series.push(LongitudinalSeries::new(format!("series_{k:03}"), images, times, Some(masks))?);
    }
    let split_assignment = series.iter().map(|s| (s.series_id.clone(), Split::Train)).collect::<BTreeMap<_, _>>();
    Ok(Dataset { series, split_assignment, time_scale: config.horizon })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig { num_series: 6, image_size: 32, ..SynthConfig::default() }
    }

    #[test]
    fn zero_growth_gives_identical_masks() {
        let cfg = small();
        let params = SeriesParams {
            center: (16.0, 16.0),
            base_radius: 5.0,
            growth_rate: 0.0,
            waves: vec![],
            background_level: 0.6,
            head_axes: None,
        };
        let (_, masks) = render_series(&params, &[0.0, 5.0, 20.0], &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(masks.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn radius_closed_form() {
        let p = SeriesParams { center: (0.0, 0.0), base_radius: 4.0, growth_rate: 0.5, waves: vec![], background_level: 0.5, head_axes: None };
        assert_eq!(p.radius_at(8.0), 8.0);
    }

    #[test]
    fn mask_area_non_decreasing_for_any_seed() {
        for seed in 0..5 {
            let ds = generate_synthetic(&small(), seed).unwrap();
            for s in &ds.series {
                let areas: Vec<usize> = s.masks.as_ref().unwrap().iter().map(Mask::area).collect();
                assert!(areas.windows(2).all(|w| w[0] <= w[1]), "{areas:?}");
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_irregular() {
        let a = generate_synthetic(&small(), 9).unwrap();
        let b = generate_synthetic(&small(), 9).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&small(), 10).unwrap();
        assert_ne!(a.series[0].images, c.series[0].images);
        for s in &a.series {
            assert!((2..=6).contains(&s.len()));
            assert!(s.times.iter().all(|&t| (0.0..24.0).contains(&t)));
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(generate_synthetic(&SynthConfig { image_size: 0, ..small() }, 0).is_err());
        assert!(generate_synthetic(&SynthConfig { num_series: 0, ..small() }, 0).is_err());
        assert!(generate_synthetic(&SynthConfig { visits_min: 1, ..small() }, 0).is_err());
        assert!(generate_synthetic(&SynthConfig { growth_rate_range: (0.0, 0.5), ..small() }, 0).is_err());
    }
}
