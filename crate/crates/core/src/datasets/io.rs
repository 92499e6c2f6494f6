use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, LongitudinalSeries, Split};
use crate::raster::{Image, Mask};
use crate::{Error, Result};

/// Root-level `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub series: Vec<String>,
    pub split: BTreeMap<String, Split>,
    pub time_scale: f64,
}

#[derive(Serialize, Deserialize)]
struct TimeRow {
    visit_index: usize,
    time: f64,
}

/// Writes `manifest.json` plus one directory per series holding
/// `times.csv`, `img_<k>.png` and (when present) `mask_<k>.png`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for s in &dataset.series {
        let sdir = dir.join(&s.series_id);
        fs::create_dir_all(&sdir)?;
        let mut w = csv::Writer::from_path(sdir.join("times.csv"))?;
        for (k, &t) in s.times.iter().enumerate() {
            w.serialize(TimeRow { visit_index: k, time: t })?;
        }
        w.flush()?;
        for (k, im) in s.images.iter().enumerate() {
            im.save_png(&sdir.join(format!("img_{k}.png")))?;
        }
        if let Some(masks) = &s.masks {
            for (k, m) in masks.iter().enumerate() {
                m.save_png(&sdir.join(format!("mask_{k}.png")))?;
            }
        }
    }
    let manifest = Manifest {
        series: dataset.series.iter().map(|s| s.series_id.clone()).collect(),
        split: dataset.split_assignment.clone(),
        time_scale: dataset.time_scale,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_series(dir: &Path, series_id: &str) -> Result<LongitudinalSeries> {
    let sdir = dir.join(series_id);
    let mut rows: Vec<TimeRow> = csv::Reader::from_path(sdir.join("times.csv"))?
        .deserialize()
        .collect::<std::result::Result<_, _>>()?;
    rows.sort_by_key(|r| r.visit_index);
    if rows.iter().enumerate().any(|(k, r)| r.visit_index != k) {
        return Err(Error::InvalidInput(format!("series {series_id}: visit indices must be 0..n")));
    }
    let images = (0..rows.len())
        .map(|k| Image::load_png(&sdir.join(format!("img_{k}.png"))))
        .collect::<Result<Vec<_>>>()?;
    let masks = if sdir.join("mask_0.png").exists() {
        Some((0..rows.len()).map(|k| Mask::load_png(&sdir.join(format!("mask_{k}.png")))).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    LongitudinalSeries::new(series_id, images, rows.iter().map(|r| r.time).collect(), masks)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", dir.join("manifest.json").display())))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if !(manifest.time_scale > 0.0) {
        return Err(Error::InvalidInput("manifest time_scale must be positive".into()));
    }
    let series = manifest.series.iter().map(|id| load_series(dir, id)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset { series, split_assignment: manifest.split, time_scale: manifest.time_scale })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_synthetic, split_series_level, SynthConfig};

    #[test]
    fn save_load_preserves_structure() {
        let cfg = SynthConfig { num_series: 4, image_size: 16, ..SynthConfig::default() };
        let ds = split_series_level(&generate_synthetic(&cfg, 1).unwrap(), (0.5, 0.25, 0.25), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.split_assignment, ds.split_assignment);
        assert_eq!(back.time_scale, ds.time_scale);
        for (a, b) in ds.series.iter().zip(&back.series) {
            assert_eq!(a.times, b.times);
            assert_eq!(a.masks, b.masks);
            for (x, y) in a.images.iter().zip(&b.images) {
                assert!(x.data.iter().zip(&y.data).all(|(p, q)| (p - q).abs() <= 0.5 / 255.0 + 1e-9));
            }
        }
    }
}
