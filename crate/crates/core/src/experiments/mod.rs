//! Multi-run experiments: one-axis ablations and latent-space export.

pub mod ablation;
pub mod latents;

pub use ablation::{ablation_configs, run_ablation, AblationAxis, AblationRow, AblationTable, LAMBDA_SWEEP};
pub use latents::{export_latents, pca_2d, write_latents_csv, write_scatter_png, LatentRow};
