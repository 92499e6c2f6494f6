//! Benchmark fixtures shared by the criterion targets.

use imageflow_core::backbone::BackboneConfig;
use imageflow_core::datasets::{generate_synthetic, SynthConfig};
use imageflow_core::dynamics::DynamicsConfig;
use imageflow_core::model::{ModelConfig, Variant};
use imageflow_core::raster::{Image, Mask};

/// The one-block desk model at 64x64.
pub fn desk_model_config(variant: Variant) -> ModelConfig {
    let backbone = BackboneConfig { blocks_per_resolution: 1, ..BackboneConfig::default() };
    ModelConfig::new(variant, backbone, DynamicsConfig::default(), 0)
}

/// First two visits and masks of a default synthetic series.
pub fn sample_pair() -> (Image, Image, Mask, Mask) {
    let cfg = SynthConfig { num_series: 1, visits_min: 2, visits_max: 2, ..SynthConfig::default() };
    let s = generate_synthetic(&cfg, 0).expect("valid config").series.remove(0);
    let masks = s.masks.expect("synthetic masks");
    (s.images[0].clone(), s.images[1].clone(), masks[0].clone(), masks[1].clone())
}
