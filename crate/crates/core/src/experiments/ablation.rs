//! One-axis ablations: every setting is trained with the same seed and
//! scored on the same test pair list.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::datasets::{Dataset, Split};
use crate::dynamics::{Parameterization, Sharing};
use crate::evaluation::{assemble_report, eval_pairs, score_method, Metric, ModelForecaster, Segmenter, Subset};
use crate::training::{train, TrainOutcome};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    FieldParam,
    LatentScope,
    LambdaV,
    LambdaC,
    LambdaS,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 5] = [
        AblationAxis::FieldParam,
        AblationAxis::LatentScope,
        AblationAxis::LambdaV,
        AblationAxis::LambdaC,
        AblationAxis::LambdaS,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::FieldParam => "field_param",
            AblationAxis::LatentScope => "latent_scope",
            AblationAxis::LambdaV => "lambda_v",
            AblationAxis::LambdaC => "lambda_c",
            AblationAxis::LambdaS => "lambda_s",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        AblationAxis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis {s:?}")))
    }

    /// Row labels with the published reference values on the retinal
    /// dataset, columns PSNR, SSIM, MAE, MSE, DSC, HD.
    pub fn reference(self) -> &'static [(&'static str, [f64; 6])] {
        match self {
            AblationAxis::FieldParam => FIELD_PARAM_REFERENCE,
            AblationAxis::LatentScope => LATENT_SCOPE_REFERENCE,
            AblationAxis::LambdaV => LAMBDA_V_REFERENCE,
            AblationAxis::LambdaC => LAMBDA_C_REFERENCE,
            AblationAxis::LambdaS => LAMBDA_S_REFERENCE,
        }
    }
}

pub const LAMBDA_SWEEP: [f64; 5] = [0.0, 0.001, 0.01, 0.1, 1.0];

pub const FIELD_PARAM_REFERENCE: &[(&str, [f64; 6])] = &[
    ("f(z,t)", [22.42, 0.643, 0.123, 0.027, 0.872, 48.38]),
    ("f(z)", [22.63, 0.646, 0.119, 0.024, 0.874, 42.68]),
];

pub const LATENT_SCOPE_REFERENCE: &[(&str, [f64; 6])] = &[
    ("bottleneck_only", [22.33, 0.639, 0.122, 0.026, 0.850, 48.13]),
    ("all_unique_resolutions", [22.49, 0.643, 0.122, 0.025, 0.859, 43.39]),
    ("all_unique_layers", [22.63, 0.646, 0.119, 0.024, 0.874, 42.68]),
];

pub const LAMBDA_V_REFERENCE: &[(&str, [f64; 6])] = &[
    ("0", [22.63, 0.646, 0.119, 0.024, 0.874, 42.68]),
    ("0.001", [22.65, 0.658, 0.118, 0.024, 0.872, 44.27]),
    ("0.01", [22.64, 0.650, 0.120, 0.025, 0.872, 45.89]),
    ("0.1", [22.57, 0.647, 0.120, 0.025, 0.869, 50.69]),
    ("1", [22.54, 0.634, 0.124, 0.027, 0.867, 48.13]),
];

pub const LAMBDA_C_REFERENCE: &[(&str, [f64; 6])] = &[
    ("0", [22.63, 0.646, 0.119, 0.024, 0.874, 42.68]),
    ("0.001", [22.63, 0.646, 0.119, 0.025, 0.872, 46.23]),
    ("0.01", [22.65, 0.652, 0.118, 0.024, 0.875, 42.18]),
    ("0.1", [22.38, 0.651, 0.121, 0.025, 0.871, 45.30]),
    ("1", [22.25, 0.644, 0.121, 0.025, 0.868, 46.85]),
];

pub const LAMBDA_S_REFERENCE: &[(&str, [f64; 6])] = &[
    ("0", [22.63, 0.646, 0.119, 0.024, 0.874, 42.68]),
    ("0.001", [22.38, 0.649, 0.123, 0.027, 0.870, 46.91]),
    ("0.01", [22.65, 0.648, 0.119, 0.024, 0.870, 45.71]),
    ("0.1", [22.70, 0.657, 0.118, 0.024, 0.878, 47.44]),
    ("1", [22.69, 0.655, 0.118, 0.024, 0.875, 45.16]),
];

/// Run configurations for every row of `axis`. The shared base is the
/// autonomous field on every latent layer with all regularizers off; each
/// row changes only the axis under study.
pub fn ablation_configs(base: &RunConfig, axis: AblationAxis) -> Result<Vec<(String, RunConfig)>> {
    let mut common = base.clone();
    common.dynamics.parameterization = Parameterization::Position;
    common.dynamics.sharing = Sharing::PerLayer;
    common.objectives.lambda_v = 0.0;
    common.objectives.lambda_c = 0.0;
    common.objectives.lambda_s = 0.0;
    common.training.regularizers_on = true;
    let rows: Vec<(String, RunConfig)> = match axis {
        AblationAxis::FieldParam => [Parameterization::PositionAndTime, Parameterization::Position]
            .into_iter()
            .zip(FIELD_PARAM_REFERENCE)
            .map(|(p, (label, _))| {
                let mut c = common.clone();
                c.dynamics.parameterization = p;
                (label.to_string(), c)
            })
            .collect(),
        AblationAxis::LatentScope => [Sharing::BottleneckOnly, Sharing::PerResolution, Sharing::PerLayer]
            .into_iter()
            .zip(LATENT_SCOPE_REFERENCE)
            .map(|(s, (label, _))| {
                let mut c = common.clone();
                c.dynamics.sharing = s;
                (label.to_string(), c)
            })
            .collect(),
        AblationAxis::LambdaV | AblationAxis::LambdaC | AblationAxis::LambdaS => LAMBDA_SWEEP
            .into_iter()
            .zip(axis.reference())
            .map(|(lambda, (label, _))| {
                let mut c = common.clone();
                match axis {
                    AblationAxis::LambdaV => c.objectives.lambda_v = lambda,
                    AblationAxis::LambdaC => c.objectives.lambda_c = lambda,
                    _ => c.objectives.lambda_s = lambda,
                }
                (label.to_string(), c)
            })
            .collect(),
    };
    rows.into_iter().map(|(label, c)| Ok((label, c.resolved()?))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    /// Mean over all test pairs, in `Metric::ALL` order; NaN when undefined.
    pub desk: [f64; 6],
    pub reference: [f64; 6],
    pub best_epoch: usize,
    pub pair_list_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// True when every row was scored on the identical pair list.
    pub fn fair(&self) -> bool {
        self.rows.windows(2).all(|w| w[0].pair_list_hash == w[1].pair_list_hash)
    }

    /// Columns: axis, setting, source (desk or reference), the six metrics,
    /// pair_list_hash.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["axis", "setting", "source", "psnr", "ssim", "mae", "mse", "dsc", "hd", "pair_list_hash"])?;
        for row in &self.rows {
            for (source, values) in [("desk", &row.desk), ("reference", &row.reference)] {
                let mut rec = vec![self.axis.name().to_string(), row.setting.clone(), source.to_string()];
                rec.extend(values.iter().map(|v| format!("{v}")));
                rec.push(row.pair_list_hash.clone());
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Human-readable side-by-side table.
    pub fn write_text(&self, out: &mut impl std::io::Write) -> Result<()> {
        writeln!(out, "ablation {} ({} rows, pair list {})", self.axis.name(), self.rows.len(),
            self.rows.first().map_or("-", |r| r.pair_list_hash.get(..12).unwrap_or(&r.pair_list_hash)))?;
        writeln!(out, "{:<24} {:>9} {:>7} {:>7} {:>8} {:>6} {:>7} | reference", "setting", "psnr", "ssim", "mae", "mse", "dsc", "hd")?;
        for r in &self.rows {
            let d = r.desk;
            let p = r.reference;
            writeln!(
                out,
                "{:<24} {:>9.3} {:>7.3} {:>7.4} {:>8.5} {:>6.3} {:>7.2} | {:.2} {:.3} {:.3} {:.3} {:.3} {:.2}",
                r.setting, d[0], d[1], d[2], d[3], d[4], d[5], p[0], p[1], p[2], p[3], p[4], p[5]
            )?;
        }
        Ok(())
    }
}

/// Trains and scores every row of `axis` on the test split. `on_row` sees
/// each finished row with its training outcome.
pub fn run_ablation(
    base: &RunConfig,
    dataset: &Dataset,
    axis: AblationAxis,
    segmenter: &Segmenter,
    mut on_row: impl FnMut(&AblationRow, &TrainOutcome) -> Result<()>,
) -> Result<AblationTable> {
    let pairs = eval_pairs(dataset, Split::Test);
    if pairs.is_empty() {
        return Err(Error::InvalidInput("the test split has no pairs".into()));
    }
    let mut rows = Vec::new();
    for ((setting, cfg), (_, reference)) in ablation_configs(base, axis)?.into_iter().zip(axis.reference()) {
        log::info!("ablation {}: training {setting}", axis.name());
        let outcome = train(dataset, &cfg.model_config(), &cfg.training)?;
        let forecaster = ModelForecaster { name: setting.clone(), state: &outcome.best, seed: cfg.seed };
        let run = score_method(&forecaster, &pairs, segmenter, &cfg.evaluation.metrics, cfg.seed)?;
        let report = assemble_report(&pairs, &[run], segmenter)?;
        let mut desk = [f64::NAN; 6];
        for (slot, m) in desk.iter_mut().zip(Metric::ALL) {
            if let Some(row) = report.get(&setting, Subset::All, m) {
                *slot = row.mean;
            }
        }
        let row = AblationRow {
            setting,
            desk,
            reference: *reference,
            best_epoch: outcome.best_epoch,
            pair_list_hash: report.pair_list_hash.clone(),
        };
        on_row(&row, &outcome)?;
        rows.push(row);
    }
    let table = AblationTable { axis, rows };
    if !table.fair() {
        return Err(Error::InvalidInput("ablation rows were scored on different pair lists".into()));
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_structure() {
        let base = RunConfig::default().resolved().unwrap();
        let counts: Vec<usize> =
            AblationAxis::ALL.iter().map(|&a| ablation_configs(&base, a).unwrap().len()).collect();
        assert_eq!(counts, vec![2, 3, 5, 5, 5]);
        let rows = ablation_configs(&base, AblationAxis::LambdaC).unwrap();
        let lambdas: Vec<f64> = rows.iter().map(|(_, c)| c.training.loss_weights.lambda_c).collect();
        assert_eq!(lambdas, LAMBDA_SWEEP.to_vec());
        for (_, c) in &rows {
            assert_eq!((c.objectives.lambda_v, c.objectives.lambda_s), (0.0, 0.0));
            assert_eq!(c.seed, base.seed);
        }
        let fp = ablation_configs(&base, AblationAxis::FieldParam).unwrap();
        assert_eq!(fp[0].1.dynamics.parameterization, Parameterization::PositionAndTime);
        assert_eq!(fp[1].1.dynamics.parameterization, Parameterization::Position);
        assert!(AblationAxis::parse("lambda_x").is_err());
        assert_eq!(AblationAxis::parse("latent_scope").unwrap(), AblationAxis::LatentScope);
    }

    #[test]
    fn zero_rows_agree_with_best_configuration() {
        // The untouched base row appears in every table with the same values.
        let best = FIELD_PARAM_REFERENCE[1].1;
        assert_eq!(LATENT_SCOPE_REFERENCE[2].1, best);
        for axis in [AblationAxis::LambdaV, AblationAxis::LambdaC, AblationAxis::LambdaS] {
            assert_eq!(axis.reference()[0].1, best);
            let labels: Vec<f64> = axis.reference().iter().map(|(l, _)| l.parse().unwrap()).collect();
            assert_eq!(labels, LAMBDA_SWEEP.to_vec());
        }
    }
}
