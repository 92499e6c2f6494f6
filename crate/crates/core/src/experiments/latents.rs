//! Bottleneck latent export with a two-component PCA projection.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::datasets::Dataset;
use crate::model::ModelState;
use crate::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct LatentRow {
    pub series_id: String,
    pub visit: usize,
    /// Normalized acquisition time.
    pub time: f64,
    pub split: String,
    /// Spatially averaged bottleneck channels.
    pub vector: Vec<f64>,
    pub pc: [f64; 2],
}

/// Pooled bottleneck vectors (EMA weights) of every image in `dataset`,
/// with PCA coordinates over all rows.
pub fn export_latents(state: &ModelState, dataset: &Dataset) -> Result<Vec<LatentRow>> {
    let vars = state.ema_vars();
    let mut rows = Vec::new();
    for s in &dataset.series {
        let split = dataset.split_assignment.get(&s.series_id).map_or("unassigned", |sp| sp.name());
        for (k, (im, &t)) in s.images.iter().zip(&s.times).enumerate() {
            let x = state.model.image_tensor(&[im])?;
            let z = state.model.encode(&vars, &x)?;
            rows.push(LatentRow {
                series_id: s.series_id.clone(),
                visit: k,
                time: dataset.normalize_time(t),
                split: split.to_string(),
                vector: z.bottleneck().global_avg_pool().data().to_vec(),
                pc: [0.0; 2],
            });
        }
    }
    let vectors: Vec<Vec<f64>> = rows.iter().map(|r| r.vector.clone()).collect();
    for (r, pc) in rows.iter_mut().zip(pca_2d(&vectors)) {
        r.pc = pc;
    }
    Ok(rows)
}

/// Projections onto the two leading eigenvectors of the sample covariance.
/// Each eigenvector is signed so its largest-magnitude entry is positive.
/// Missing components (fewer than two dimensions) are 0.
pub fn pca_2d(vectors: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let n = vectors.len();
    if n == 0 {
        return Vec::new();
    }
    let d = vectors[0].len();
    let mut x = DMatrix::<f64>::from_fn(n, d, |i, j| vectors[i][j]);
    for j in 0..d {
        let mean = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-mean);
    }
    let cov = x.transpose() * &x / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut out = vec![[0.0; 2]; n];
    for (slot, &k) in order.iter().take(2).enumerate() {
        if eig.eigenvalues[k] <= 1e-12 * eig.eigenvalues[order[0]].max(f64::MIN_POSITIVE) {
            continue;
        }
        let mut v = eig.eigenvectors.column(k).into_owned();
        let lead = v.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(1.0);
        if lead < 0.0 {
            v.neg_mut();
        }
        let proj = &x * v;
        for (o, p) in out.iter_mut().zip(proj.iter()) {
            o[slot] = *p;
        }
    }
    out
}

/// Columns: series_id, visit, time, split, pc1, pc2, z0..z{d-1}.
pub fn write_latents_csv(rows: &[LatentRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let d = rows.first().map_or(0, |r| r.vector.len());
    let mut header: Vec<String> = ["series_id", "visit", "time", "split", "pc1", "pc2"].map(String::from).to_vec();
    header.extend((0..d).map(|k| format!("z{k}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.series_id.clone(),
            r.visit.to_string(),
            r.time.to_string(),
            r.split.clone(),
            r.pc[0].to_string(),
            r.pc[1].to_string(),
        ];
        rec.extend(r.vector.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn time_color(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    [(255.0 * t) as u8, 40, (255.0 * (1.0 - t)) as u8]
}

fn put(img: &mut image::RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, image::Rgb(c));
    }
}

fn line(img: &mut image::RgbImage, a: (f64, f64), b: (f64, f64), c: [u8; 3]) {
    let n = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for k in 0..=n {
        let s = k as f64 / n as f64;
        put(img, (a.0 + s * (b.0 - a.0)).round() as i64, (a.1 + s * (b.1 - a.1)).round() as i64, c);
    }
}

/// Scatter of the PCA coordinates coloured by normalized time (blue early,
/// red late) with arrows between consecutive visits of each series.
pub fn write_scatter_png(rows: &[LatentRow], path: &Path, size: u32) -> Result<()> {
    let mut img = image::RgbImage::from_pixel(size, size, image::Rgb([255, 255, 255]));
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for r in rows {
        for a in 0..2 {
            lo[a] = lo[a].min(r.pc[a]);
            hi[a] = hi[a].max(r.pc[a]);
        }
    }
    let margin = 0.08 * size as f64;
    let span = size as f64 - 2.0 * margin;
    let to_px = |pc: [f64; 2]| -> (f64, f64) {
        let u = |a: usize| if hi[a] > lo[a] { (pc[a] - lo[a]) / (hi[a] - lo[a]) } else { 0.5 };
        (margin + u(0) * span, size as f64 - margin - u(1) * span)
    };
    for pair in rows.windows(2) {
        if pair[0].series_id != pair[1].series_id {
            continue;
        }
        let (a, b) = (to_px(pair[0].pc), to_px(pair[1].pc));
        let grey = [150, 150, 150];
        line(&mut img, a, b, grey);
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len = (dx * dx + dy * dy).sqrt();
        if len > 1.0 {
            let (ux, uy) = (dx / len, dy / len);
            for side in [-1.0, 1.0] {
                let tip = (b.0 - 7.0 * ux + side * 4.0 * uy, b.1 - 7.0 * uy - side * 4.0 * ux);
                line(&mut img, b, tip, grey);
            }
        }
    }
    for r in rows {
        let (x, y) = to_px(r.pc);
        for dy in -2..=2 {
            for dx in -2..=2 {
                put(&mut img, x.round() as i64 + dx, y.round() as i64 + dy, time_color(r.time));
            }
        }
    }
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn zero_variance_gives_zero_coordinates() {
        let v = vec![vec![0.3, -1.0, 2.0]; 6];
        assert!(pca_2d(&v).iter().all(|p| *p == [0.0, 0.0]));
    }

    #[test]
    fn matches_svd_of_centered_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (n, d) = (rng.random_range(5..30), rng.random_range(2..8));
            let scales: Vec<f64> = (0..d).map(|k| 3.0 / (k + 1) as f64).collect();
            let v: Vec<Vec<f64>> =
                (0..n).map(|_| scales.iter().map(|s| s * rng.random_range(-1.0..1.0)).collect()).collect();
            let ours = pca_2d(&v);
            let mut x = DMatrix::from_fn(n, d, |i, j| v[i][j]);
            let means: Vec<f64> = (0..d).map(|j| x.column(j).mean()).collect();
            for j in 0..d {
                x.column_mut(j).add_scalar_mut(-means[j]);
            }
            let svd = x.clone().svd(true, true);
            let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
            idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
            for (slot, &k) in idx.iter().take(2).enumerate() {
                let dir = svd.v_t.as_ref().unwrap().row(k).transpose();
                let proj = &x * dir;
                let same: f64 = proj.iter().zip(&ours).map(|(p, o)| (p - o[slot]).abs()).fold(0.0, f64::max);
                let flip: f64 = proj.iter().zip(&ours).map(|(p, o)| (p + o[slot]).abs()).fold(0.0, f64::max);
                assert!(same.min(flip) < 1e-6, "component {slot}: {same} / {flip}");
            }
        }
    }

    #[test]
    fn rows_and_files() {
        use crate::datasets::{generate_synthetic, split_series_level, SynthConfig};
        use crate::model::tests::tiny_config;
        use crate::model::{Model, ModelState, Variant};
        let synth = SynthConfig { num_series: 3, image_size: 8, visits_min: 2, visits_max: 4, ..SynthConfig::default() };
        let data = split_series_level(&generate_synthetic(&synth, 1).unwrap(), (0.34, 0.33, 0.33), 0).unwrap();
        let state = ModelState::new(Model::new(&tiny_config(Variant::Ode)).unwrap(), Default::default());
        let rows = export_latents(&state, &data).unwrap();
        assert_eq!(rows.len(), data.series.iter().map(|s| s.len()).sum::<usize>());
        let dir = tempfile::tempdir().unwrap();
        write_latents_csv(&rows, &dir.path().join("l.csv")).unwrap();
        write_scatter_png(&rows, &dir.path().join("l.png"), 128).unwrap();
        let text = std::fs::read_to_string(dir.path().join("l.csv")).unwrap();
        assert_eq!(text.lines().count(), rows.len() + 1);
    }
}
