//! Growth subsets, per-pair scoring, aggregation over seeds and ranking.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{dice, hausdorff, mae, mse, psnr, ssim, MetricConfig};
use super::segmenter::Segmenter;
use crate::datasets::TrainingPair;
use crate::raster::{Image, Mask};
use crate::Result;

/// Ground-truth masks closer than this Dice score count as major growth.
pub const MAJOR_GROWTH_DICE: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    All,
    MinorGrowth,
    MajorGrowth,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::All, Subset::MinorGrowth, Subset::MajorGrowth];

    pub fn name(self) -> &'static str {
        match self {
            Subset::All => "all",
            Subset::MinorGrowth => "minor_growth",
            Subset::MajorGrowth => "major_growth",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Psnr,
    Ssim,
    Mae,
    Mse,
    Dsc,
    Hd,
}

impl Metric {
    pub const ALL: [Metric; 6] = [Metric::Psnr, Metric::Ssim, Metric::Mae, Metric::Mse, Metric::Dsc, Metric::Hd];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Psnr => "psnr",
            Metric::Ssim => "ssim",
            Metric::Mae => "mae",
            Metric::Mse => "mse",
            Metric::Dsc => "dsc",
            Metric::Hd => "hd",
        }
    }

    pub fn higher_is_better(self) -> bool {
        matches!(self, Metric::Psnr | Metric::Ssim | Metric::Dsc)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SubsetSplit {
    pub minor: Vec<usize>,
    pub major: Vec<usize>,
}

impl SubsetSplit {
    pub fn indices(&self, subset: Subset) -> Vec<usize> {
        match subset {
            Subset::All => {
                let mut all: Vec<usize> = self.minor.iter().chain(&self.major).copied().collect();
                all.sort_unstable();
                all
            }
            Subset::MinorGrowth => self.minor.clone(),
            Subset::MajorGrowth => self.major.clone(),
        }
    }
}

/// Major growth iff `DSC(mask_i, mask_j) < 0.9`. Ground-truth masks are used
/// when present; otherwise both masks come from `segmenter`.
pub fn subset_split(pairs: &[TrainingPair], segmenter: Option<&Segmenter>) -> Result<SubsetSplit> {
    let mut out = SubsetSplit::default();
    for (k, p) in pairs.iter().enumerate() {
        let d = match (&p.mask_i, &p.mask_j, segmenter) {
            (Some(a), Some(b), _) => dice(a, b)?,
            (_, _, Some(seg)) => dice(&seg.segment(&p.x_i)?, &seg.segment(&p.x_j)?)?,
            _ => {
                return Err(crate::Error::InvalidInput(format!(
                    "pair {} has no masks and no segmenter was given",
                    p.key()
                )))
            }
        };
        if d < MAJOR_GROWTH_DICE {
            out.major.push(k);
        } else {
            out.minor.push(k);
        }
    }
    Ok(out)
}

/// SHA-256 over the ordered pair keys.
pub fn pair_list_hash(pairs: &[TrainingPair]) -> String {
    let mut h = Sha256::new();
    for p in pairs {
        h.update(p.key().as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// All six metrics of one forecast. `hd` is `None` when undefined under the
/// configured empty-mask policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
    pub mse: f64,
    pub dsc: f64,
    pub hd: Option<f64>,
}

impl PairMetrics {
    pub fn get(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::Psnr => Some(self.psnr),
            Metric::Ssim => Some(self.ssim),
            Metric::Mae => Some(self.mae),
            Metric::Mse => Some(self.mse),
            Metric::Dsc => Some(self.dsc),
            Metric::Hd => self.hd,
        }
    }
}

/// Scores a forecast against the truth; masks of both come from the same
/// segmenter.
pub fn score_forecast(
    forecast: &Image,
    truth: &Image,
    truth_mask: &Mask,
    segmenter: &Segmenter,
    cfg: &MetricConfig,
) -> Result<PairMetrics> {
    let pred_mask = segmenter.segment(forecast)?;
    Ok(PairMetrics {
        psnr: psnr(forecast, truth, cfg)?,
        ssim: ssim(forecast, truth, cfg)?,
        mae: mae(forecast, truth)?,
        mse: mse(forecast, truth)?,
        dsc: dice(&pred_mask, truth_mask)?,
        hd: hausdorff(&pred_mask, truth_mask, cfg)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub subset: Subset,
    pub metric: Metric,
    pub mean: f64,
    pub std: f64,
    pub n_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    /// Mean rank over all (subset, metric) cells; 1 is best.
    pub ranks: BTreeMap<String, f64>,
    pub pair_list_hash: String,
    pub seeds: Vec<u64>,
}

/// Per-pair metrics of one method for one seed.
#[derive(Clone, Debug)]
pub struct MethodRun {
    pub method: String,
    pub seed: u64,
    pub per_pair: Vec<PairMetrics>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    (mean, (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

/// Averages each metric over the pairs of every subset per seed, then
/// reports mean and sample standard deviation across seeds. Methods keep
/// their first-appearance order.
pub fn build_report(runs: &[MethodRun], subsets: &SubsetSplit, pair_hash: &str) -> EvalReport {
    let mut methods: Vec<&str> = Vec::new();
    let mut seeds: Vec<u64> = Vec::new();
    for r in runs {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
        if !seeds.contains(&r.seed) {
            seeds.push(r.seed);
        }
    }
    let mut rows = Vec::new();
    for method in &methods {
        for subset in Subset::ALL {
            let idx = subsets.indices(subset);
            for metric in Metric::ALL {
                let mut per_seed = Vec::new();
                let mut n_pairs = 0;
                for r in runs.iter().filter(|r| r.method == *method) {
                    let vals: Vec<f64> = idx.iter().filter_map(|&k| r.per_pair[k].get(metric)).collect();
                    n_pairs = vals.len();
                    if !vals.is_empty() {
                        per_seed.push(vals.iter().sum::<f64>() / vals.len() as f64);
                    }
                }
                let (mean, std) = if per_seed.is_empty() { (f64::NAN, f64::NAN) } else { mean_std(&per_seed) };
                rows.push(ReportRow { method: method.to_string(), subset, metric, mean, std, n_pairs });
            }
        }
    }
    let mut report = EvalReport { rows, ranks: BTreeMap::new(), pair_list_hash: pair_hash.to_string(), seeds };
    report.ranks = rank_methods(&report);
    report
}

/// Ranks of `values` (1 = best) with ties sharing the mean of their ranks.
pub fn average_ranks(values: &[f64], higher_is_better: bool) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        let o = values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal);
        if higher_is_better {
            o.reverse()
        } else {
            o
        }
    });
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let r = (start + 1 + end) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = r;
        }
        start = end;
    }
    ranks
}

/// Mean rank of every method over all (subset, metric) cells in which every
/// method has a finite value.
pub fn rank_methods(report: &EvalReport) -> BTreeMap<String, f64> {
    let mut methods: Vec<&str> = Vec::new();
    for r in &report.rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let mut sums = vec![0.0; methods.len()];
    let mut cells = 0usize;
    for subset in Subset::ALL {
        for metric in Metric::ALL {
            let values: Vec<f64> = methods
                .iter()
                .map(|m| {
                    report
                        .rows
                        .iter()
                        .find(|r| r.method == *m && r.subset == subset && r.metric == metric)
                        .map_or(f64::NAN, |r| r.mean)
                })
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                continue;
            }
            for (s, r) in sums.iter_mut().zip(average_ranks(&values, metric.higher_is_better())) {
                *s += r;
            }
            cells += 1;
        }
    }
    methods
        .iter()
        .zip(sums)
        .map(|(m, s)| (m.to_string(), if cells == 0 { f64::NAN } else { s / cells as f64 }))
        .collect()
}

impl EvalReport {
    pub fn get(&self, method: &str, subset: Subset, metric: Metric) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method && r.subset == subset && r.metric == metric)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["method", "subset", "metric", "mean", "std", "n_pairs"])?;
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                r.subset.name().to_string(),
                r.metric.name().to_string(),
                format!("{}", r.mean),
                format!("{}", r.std),
                r.n_pairs.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
