//! Longitudinal image series: synthesis, series-level splitting, pair
//! enumeration, paired augmentation, and the on-disk dataset layout.

mod augment;
mod io;
mod synth;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{augment_pair, AugmentPolicy};
pub use io::{load_dataset, load_series, save_dataset, Manifest};
pub use synth::{disk_mask, generate_synthetic, render_series, SeriesParams, SynthConfig};

use crate::raster::{Image, Mask};
use crate::{Error, Result};

/// One subject's registered image sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct LongitudinalSeries {
    pub series_id: String,
    pub images: Vec<Image>,
    /// Acquisition times, strictly increasing, in the dataset's raw unit.
    pub times: Vec<f64>,
    pub masks: Option<Vec<Mask>>,
}

impl LongitudinalSeries {
    pub fn new(series_id: impl Into<String>, images: Vec<Image>, times: Vec<f64>, masks: Option<Vec<Mask>>) -> Result<Self> {
        let s = LongitudinalSeries { series_id: series_id.into(), images, times, masks };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.series_id;
        if self.images.len() < 2 {
            return Err(Error::InvalidInput(format!("series {id}: needs at least 2 visits")));
        }
        if self.images.len() != self.times.len() {
            return Err(Error::InvalidInput(format!("series {id}: {} images but {} times", self.images.len(), self.times.len())));
        }
        if let Some(m) = &self.masks {
            if m.len() != self.images.len() {
                return Err(Error::InvalidInput(format!("series {id}: mask count differs from image count")));
            }
        }
        if self.times.windows(2).any(|w| w[0] >= w[1]) || self.times.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidInput(format!("series {id}: times must be finite and strictly increasing")));
        }
        let shape = self.images[0].shape();
        if self.images.iter().any(|im| im.shape() != shape) {
            return Err(Error::InvalidInput(format!("series {id}: images differ in shape")));
        }
        if self.images.iter().any(|im| !im.in_unit_range()) {
            return Err(Error::InvalidInput(format!("series {id}: pixel values outside [0, 1]")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn mask(&self, k: usize) -> Option<&Mask> {
        self.masks.as_ref().map(|m| &m[k])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub series: Vec<LongitudinalSeries>,
    pub split_assignment: BTreeMap<String, Split>,
    /// Divisor mapping raw times to normalized times.
    pub time_scale: f64,
}

impl Dataset {
    pub fn series_in(&self, split: Split) -> impl Iterator<Item = &LongitudinalSeries> {
        self.series.iter().filter(move |s| self.split_assignment.get(&s.series_id) == Some(&split))
    }

    pub fn get(&self, series_id: &str) -> Option<&LongitudinalSeries> {
        self.series.iter().find(|s| s.series_id == series_id)
    }

    pub fn normalize_time(&self, t: f64) -> f64 {
        t / self.time_scale
    }

    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.series.first().map(|s| s.images[0].shape())
    }
}

/// Two observations `i < j` from the same series.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub series_id: String,
    pub i: usize,
    pub j: usize,
    pub x_i: Image,
    pub x_j: Image,
    /// Normalized times.
    pub t_i: f64,
    pub t_j: f64,
    pub mask_i: Option<Mask>,
    pub mask_j: Option<Mask>,
}

impl TrainingPair {
    /// Stable identifier `series:i:j`.
    pub fn key(&self) -> String {
        format!("{}:{}:{}", self.series_id, self.i, self.j)
    }
}

/// Largest-remainder apportionment of `n` items to `ratios`.
fn apportion(n: usize, ratios: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    // Stable sort keeps split order as the tie-break.
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut remaining = n - counts.iter().sum::<usize>();
    for &k in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        counts[k] += 1;
        remaining -= 1;
    }
    counts
}

/// Assigns whole series to train/val/test and rescales time so the training
/// split spans `[0, 1]`.
pub fn split_series_level(dataset: &Dataset, ratios: (f64, f64, f64), seed: u64) -> Result<Dataset> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|&x| !(x > 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("split ratios must be positive and sum to 1, got {ratios:?}")));
    }
    let n = dataset.series.len();
    if n < r.len() {
        return Err(Error::Config(format!("{n} series cannot fill {} non-empty splits", r.len())));
    }
    let mut counts = apportion(n, &r);
    while let Some(empty) = counts.iter().position(|&c| c == 0) {
        let donor = (0..counts.len()).max_by_key(|&k| (counts[k], std::cmp::Reverse(k))).expect("non-empty");
        counts[donor] -= 1;
        counts[empty] += 1;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = BTreeMap::new();
    let mut cursor = 0;
    for (split, &count) in Split::ALL.iter().zip(&counts) {
        for &idx in &order[cursor..cursor + count] {
            assignment.insert(dataset.series[idx].series_id.clone(), *split);
        }
        cursor += count;
    }
    let mut out = dataset.clone();
    out.split_assignment = assignment;
    let max_train = out.series_in(Split::Train).filter_map(|s| s.times.last().copied()).fold(f64::MIN, f64::max);
    if !(max_train > 0.0) {
        return Err(Error::InvalidInput("training split has no positive acquisition time".into()));
    }
    out.time_scale = max_train;
    Ok(out)
}

/// All ordered pairs `(i, j)`, `i < j`, within each series of `split`.
pub fn enumerate_pairs(dataset: &Dataset, split: Split) -> Vec<TrainingPair> {
    let mut pairs = Vec::new();
    for s in dataset.series_in(split) {
        pairs.extend(series_pairs(s, dataset.time_scale));
    }
    pairs
}

/// Pairs of a single series with times divided by `time_scale`.
pub fn series_pairs(series: &LongitudinalSeries, time_scale: f64) -> Vec<TrainingPair> {
    let n = series.len();
    let mut pairs = Vec::with_capacity(n * (n.saturating_sub(1)) / 2);
    for i in 0..n {
        for j in i + 1..n {
            pairs.push(TrainingPair {
                series_id: series.series_id.clone(),
                i,
                j,
                x_i: series.images[i].clone(),
                x_j: series.images[j].clone(),
                t_i: series.times[i] / time_scale,
                t_j: series.times[j] / time_scale,
                mask_i: series.mask(i).cloned(),
                mask_j: series.mask(j).cloned(),
            });
        }
    }
    pairs
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;

    fn toy_series(id: &str, times: &[f64]) -> LongitudinalSeries {
        let images = times.iter().map(|_| Image::filled(1, 4, 4, 0.5)).collect();
        LongitudinalSeries::new(id, images, times.to_vec(), None).unwrap()
    }

    fn toy_dataset(n: usize) -> Dataset {
        Dataset {
            series: (0..n).map(|k| toy_series(&format!("s{k:02}"), &[0.0, 6.0, 12.0 + k as f64])).collect(),
            split_assignment: BTreeMap::new(),
            time_scale: 1.0,
        }
    }

    #[test]
    fn series_validation() {
        assert!(LongitudinalSeries::new("a", vec![Image::filled(1, 2, 2, 0.1)], vec![0.0], None).is_err());
        let ims = vec![Image::filled(1, 2, 2, 0.1), Image::filled(1, 2, 2, 0.1)];
        assert!(LongitudinalSeries::new("a", ims.clone(), vec![1.0, 1.0], None).is_err());
        assert!(LongitudinalSeries::new("a", ims.clone(), vec![0.0, 1.0], None).is_ok());
        let bad = vec![Image::filled(1, 2, 2, 0.1), Image::filled(1, 2, 2, 1.5)];
        assert!(LongitudinalSeries::new("a", bad, vec![0.0, 1.0], None).is_err());
    }

    #[test]
    fn ten_series_split_eight_one_one() {
        let ds = split_series_level(&toy_dataset(10), (0.8, 0.1, 0.1), 3).unwrap();
        let count = |s| ds.series_in(s).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (8, 1, 1));
    }

    #[test]
    fn split_is_a_partition_and_deterministic() {
        let base = toy_dataset(13);
        let a = split_series_level(&base, (0.6, 0.2, 0.2), 11).unwrap();
        let b = split_series_level(&base, (0.6, 0.2, 0.2), 11).unwrap();
        assert_eq!(a.split_assignment, b.split_assignment);
        let sets: Vec<BTreeSet<&str>> =
            Split::ALL.iter().map(|&s| a.series_in(s).map(|x| x.series_id.as_str()).collect()).collect();
        for x in 0..3 {
            for y in x + 1..3 {
                assert!(sets[x].is_disjoint(&sets[y]));
            }
        }
        assert_eq!(sets.iter().map(|s| s.len()).sum::<usize>(), 13);
    }

    #[test]
    fn split_errors() {
        assert!(split_series_level(&toy_dataset(2), (0.8, 0.1, 0.1), 0).is_err());
        assert!(split_series_level(&toy_dataset(10), (0.8, 0.1, 0.2), 0).is_err());
        assert!(split_series_level(&toy_dataset(10), (1.0, 0.0, 0.0), 0).is_err());
        // Three series still populate all three splits.
        let ds = split_series_level(&toy_dataset(3), (0.8, 0.1, 0.1), 0).unwrap();
        assert!(Split::ALL.iter().all(|&s| ds.series_in(s).count() == 1));
    }

    #[test]
    fn time_scale_normalizes_training_split() {
        let ds = split_series_level(&toy_dataset(10), (0.8, 0.1, 0.1), 5).unwrap();
        let max = ds.series_in(Split::Train).map(|s| *s.times.last().unwrap()).fold(0.0, f64::max);
        assert_eq!(ds.time_scale, max);
        for p in enumerate_pairs(&ds, Split::Train) {
            assert!(p.t_i >= 0.0 && p.t_j <= 1.0 && p.t_i < p.t_j);
        }
    }

    #[test]
    fn pair_enumeration_counts() {
        let s = toy_series("a", &[0.0, 6.0, 12.0]);
        let pairs = series_pairs(&s, 1.0);
        let times: Vec<(f64, f64)> = pairs.iter().map(|p| (p.t_i, p.t_j)).collect();
        assert_eq!(times, vec![(0.0, 6.0), (0.0, 12.0), (6.0, 12.0)]);
        assert_eq!(series_pairs(&toy_series("b", &[0.0, 1.0]), 1.0).len(), 1);
        assert_eq!(series_pairs(&toy_series("c", &[0.0, 1.0, 2.0, 3.0, 4.0]), 1.0).len(), 10);
    }

    proptest::proptest! {
        #[test]
        fn pair_count_is_n_choose_2(n in 2usize..9) {
            let times: Vec<f64> = (0..n).map(|k| k as f64 * 1.5).collect();
            let s = toy_series("p", &times);
            let pairs = series_pairs(&s, 2.0);
            proptest::prop_assert_eq!(pairs.len(), n * (n - 1) / 2);
            proptest::prop_assert!(pairs.iter().all(|p| p.i < p.j && p.t_i < p.t_j));
        }
    }
}
