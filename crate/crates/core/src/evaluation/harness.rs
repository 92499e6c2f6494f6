//! Scores forecasting methods on identical pair lists.

use crate::baselines::{cubic_spline_extrapolate, linear_extrapolate, ExtrapolationInput};
use crate::datasets::{series_pairs, Dataset, Split, TrainingPair};
use crate::model::ModelState;
use crate::raster::Image;
use crate::{Error, Result};

use super::metrics::MetricConfig;
use super::report::{build_report, pair_list_hash, score_forecast, subset_split, EvalReport, MethodRun};
use super::segmenter::Segmenter;

/// A test pair together with the visits of its series up to `x_i`.
#[derive(Clone, Debug)]
pub struct EvalPair {
    pub pair: TrainingPair,
    pub history_images: Vec<Image>,
    /// Normalized times of the history.
    pub history_times: Vec<f64>,
}

/// All pairs `i < j` of every series in `split`, ordered by series then pair.
pub fn eval_pairs(dataset: &Dataset, split: Split) -> Vec<EvalPair> {
    let mut out = Vec::new();
    for s in dataset.series_in(split) {
        for pair in series_pairs(s, dataset.time_scale) {
            let i = pair.i;
            out.push(EvalPair {
                history_images: s.images[..=i].to_vec(),
                history_times: s.times[..=i].iter().map(|t| t / dataset.time_scale).collect(),
                pair,
            });
        }
    }
    out
}

pub trait Forecaster {
    fn name(&self) -> &str;
    fn forecast(&self, p: &EvalPair, index: usize) -> Result<Image>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Extrapolation {
    Linear,
    CubicSpline,
}

impl Forecaster for Extrapolation {
    fn name(&self) -> &str {
        match self {
            Extrapolation::Linear => "linear",
            Extrapolation::CubicSpline => "cubic",
        }
    }

    /// Uses the whole history up to `x_i`; a single observation is carried
    /// forward unchanged.
    fn forecast(&self, p: &EvalPair, _index: usize) -> Result<Image> {
        if p.history_images.len() < 2 {
            return Ok(p.pair.x_i.clone());
        }
        let input =
            ExtrapolationInput { images: &p.history_images, times: &p.history_times, target_time: p.pair.t_j };
        match self {
            Extrapolation::Linear => linear_extrapolate(&input),
            Extrapolation::CubicSpline => cubic_spline_extrapolate(&input),
        }
    }
}

/// A trained model forecasting from `x_i` alone. Stochastic variants draw
/// with seed `seed + pair index`.
pub struct ModelForecaster<'a> {
    pub name: String,
    pub state: &'a ModelState,
    pub seed: u64,
}

impl Forecaster for ModelForecaster<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forecast(&self, p: &EvalPair, index: usize) -> Result<Image> {
        self.state.predict(&p.pair.x_i, p.pair.t_i, p.pair.t_j, false, self.seed.wrapping_add(index as u64))
    }
}

/// Per-pair metrics of one method on `pairs`; the truth mask is the
/// segmenter's output on `x_j`.
pub fn score_method(
    method: &dyn Forecaster,
    pairs: &[EvalPair],
    segmenter: &Segmenter,
    cfg: &MetricConfig,
    seed: u64,
) -> Result<MethodRun> {
    let mut per_pair = Vec::with_capacity(pairs.len());
    for (k, p) in pairs.iter().enumerate() {
        let forecast = method.forecast(p, k)?;
        let truth_mask = segmenter.segment(&p.pair.x_j)?;
        per_pair.push(score_forecast(&forecast, &p.pair.x_j, &truth_mask, segmenter, cfg)?);
    }
    Ok(MethodRun { method: method.name().to_string(), seed, per_pair })
}

/// Report over `runs` (any number of methods and seeds, all scored on
/// `pairs`), with growth subsets from the ground-truth masks.
pub fn assemble_report(pairs: &[EvalPair], runs: &[MethodRun], segmenter: &Segmenter) -> Result<EvalReport> {
    if runs.iter().any(|r| r.per_pair.len() != pairs.len()) {
        return Err(Error::InvalidInput("every method must be scored on the identical pair list".into()));
    }
    let plain: Vec<TrainingPair> = pairs.iter().map(|p| p.pair.clone()).collect();
    let subsets = subset_split(&plain, Some(segmenter))?;
    Ok(build_report(runs, &subsets, &pair_list_hash(&plain)))
}
