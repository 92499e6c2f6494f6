//! Image similarity and mask overlap metrics.

use serde::{Deserialize, Serialize};

use crate::raster::{Image, Mask};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HdEmptyPolicy {
    /// No value when exactly one mask is empty.
    Skip,
    /// The image diagonal when exactly one mask is empty.
    MaxDiagonal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub dynamic_range: f64,
    pub psnr_cap_db: f64,
    /// Side of the square uniform SSIM window.
    pub ssim_window: usize,
    pub hd_empty_policy: HdEmptyPolicy,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig { dynamic_range: 1.0, psnr_cap_db: 100.0, ssim_window: 7, hd_empty_policy: HdEmptyPolicy::Skip }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dynamic_range > 0.0) || self.ssim_window == 0 {
            return Err(Error::Config("dynamic_range and ssim_window must be positive".into()));
        }
        Ok(())
    }

    pub fn ssim_c1(&self) -> f64 {
        (0.01 * self.dynamic_range).powi(2)
    }

    pub fn ssim_c2(&self) -> f64 {
        (0.03 * self.dynamic_range).powi(2)
    }
}

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data.len() as f64)
}

pub fn mae(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data.len() as f64)
}

/// `10 log10(R^2 / MSE)`, capped when the images are identical.
pub fn psnr(a: &Image, b: &Image, config: &MetricConfig) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(config.psnr_cap_db);
    }
    Ok((10.0 * (config.dynamic_range.powi(2) / m).log10()).min(config.psnr_cap_db))
}

/// Summed-area table with a zero first row and column.
fn integral(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += plane[y * w + x];
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

fn box_sum(s: &[f64], w: usize, y: usize, x: usize, k: usize) -> f64 {
    let w1 = w + 1;
    s[(y + k) * w1 + x + k] - s[y * w1 + x + k] - s[(y + k) * w1 + x] + s[y * w1 + x]
}

/// Mean SSIM over all fully contained `k x k` windows and all channels,
/// with sample (n - 1) variances. Images smaller than the window use one
/// window covering the whole plane.
pub fn ssim(a: &Image, b: &Image, config: &MetricConfig) -> Result<f64> {
    same_shape(a, b)?;
    let (c, h, w) = a.shape();
    let k = config.ssim_window.min(h).min(w);
    let n = (k * k) as f64;
    let (c1, c2) = (config.ssim_c1(), config.ssim_c2());
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let (pa, pb) = (a.plane(ch), b.plane(ch));
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| x * y).collect();
        let (sa, sb) = (integral(pa, h, w), integral(pb, h, w));
        let (saa, sbb, sab) = (integral(&aa, h, w), integral(&bb, h, w), integral(&ab, h, w));
        for y in 0..=h - k {
            for x in 0..=w - k {
                let ma = box_sum(&sa, w, y, x, k) / n;
                let mb = box_sum(&sb, w, y, x, k) / n;
                let denom = if k * k > 1 { n - 1.0 } else { 1.0 };
                let va = (box_sum(&saa, w, y, x, k) - n * ma * ma) / denom;
                let vb = (box_sum(&sbb, w, y, x, k) - n * mb * mb) / denom;
                let cov = (box_sum(&sab, w, y, x, k) - n * ma * mb) / denom;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

fn same_mask_shape(a: &Mask, b: &Mask) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::shape((a.height, a.width), (b.height, b.width)));
    }
    Ok(())
}

/// `2|X ∩ Y| / (|X| + |Y|)`; two empty masks score 1.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    same_mask_shape(a, b)?;
    let inter = a.data.iter().zip(&b.data).filter(|(x, y)| **x != 0 && **y != 0).count();
    let total = a.area() + b.area();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// 1-D squared distance transform of a sampled function (lower envelope of
/// parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    let mut first = None;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        match first {
            None => {
                first = Some(q);
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
            }
            Some(_) => loop {
                let p = v[k];
                let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
                if s <= z[k] && k > 0 {
                    k -= 1;
                    continue;
                }
                if s <= z[k] {
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            },
        }
    }
    if first.is_none() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest foreground
/// pixel of `m`.
pub fn squared_distance_transform(m: &Mask) -> Vec<f64> {
    let (h, w) = (m.height, m.width);
    let mut grid: Vec<f64> = m.data.iter().map(|&v| if v != 0 { 0.0 } else { f64::INFINITY }).collect();
    let mut col = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        edt_1d(&col, &mut col_out);
        for y in 0..h {
            grid[y * w + x] = col_out[y];
        }
    }
    let mut row_out = vec![0.0; w];
    for y in 0..h {
        edt_1d(&grid[y * w..(y + 1) * w], &mut row_out);
        grid[y * w..(y + 1) * w].copy_from_slice(&row_out);
    }
    grid
}

fn directed(from: &Mask, to_dt: &[f64]) -> f64 {
    from.data.iter().zip(to_dt).filter(|(m, _)| **m != 0).map(|(_, d)| *d).fold(0.0, f64::max).sqrt()
}

/// Symmetric Hausdorff distance in pixels between mask foregrounds. Two
/// empty masks give 0; one empty mask follows the configured policy.
pub fn hausdorff(a: &Mask, b: &Mask, config: &MetricConfig) -> Result<Option<f64>> {
    same_mask_shape(a, b)?;
    match (a.area() == 0, b.area() == 0) {
        (true, true) => return Ok(Some(0.0)),
        (true, false) | (false, true) => {
            return Ok(match config.hd_empty_policy {
                HdEmptyPolicy::Skip => None,
                HdEmptyPolicy::MaxDiagonal => Some(((a.height.pow(2) + a.width.pow(2)) as f64).sqrt()),
            });
        }
        _ => {}
    }
    let (da, db) = (squared_distance_transform(a), squared_distance_transform(b));
    Ok(Some(directed(a, &db).max(directed(b, &da))))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Image {
        Image::new(c, h, w, (0..c * h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> Mask {
        Mask::new(h, w, (0..h * w).map(|_| u8::from(rng.random::<f64>() < p)).collect()).unwrap()
    }

    fn points(coords: &[(usize, usize)], h: usize, w: usize) -> Mask {
        let mut m = Mask::empty(h, w);
        for &(y, x) in coords {
            m.data[y * w + x] = 1;
        }
        m
    }

    fn brute_hausdorff(a: &Mask, b: &Mask) -> f64 {
        let (pa, pb) = (a.foreground(), b.foreground());
        let d = |p: (usize, usize), q: (usize, usize)| {
            ((p.0 as f64 - q.0 as f64).powi(2) + (p.1 as f64 - q.1 as f64).powi(2)).sqrt()
        };
        let one_way = |xs: &[(usize, usize)], ys: &[(usize, usize)]| {
            xs.iter().map(|&p| ys.iter().map(|&q| d(p, q)).fold(f64::INFINITY, f64::min)).fold(0.0, f64::max)
        };
        one_way(&pa, &pb).max(one_way(&pb, &pa))
    }

    /// Direct per-window evaluation with two-pass statistics.
    fn brute_ssim(a: &Image, b: &Image, k: usize) -> f64 {
        let cfg = MetricConfig::default();
        let (c1, c2) = (cfg.ssim_c1(), cfg.ssim_c2());
        let mut vals = Vec::new();
        for ch in 0..a.channels {
            for y in 0..=a.height - k {
                for x in 0..=a.width - k {
                    let mut xs = Vec::new();
                    let mut ys = Vec::new();
                    for dy in 0..k {
                        for dx in 0..k {
                            xs.push(a.at(ch, y + dy, x + dx));
                            ys.push(b.at(ch, y + dy, x + dx));
                        }
                    }
                    let n = xs.len() as f64;
                    let mx = xs.iter().sum::<f64>() / n;
                    let my = ys.iter().sum::<f64>() / n;
                    let vx = xs.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / (n - 1.0);
                    let vy = ys.iter().map(|v| (v - my).powi(2)).sum::<f64>() / (n - 1.0);
                    let cxy = xs.iter().zip(&ys).map(|(p, q)| (p - mx) * (q - my)).sum::<f64>() / (n - 1.0);
                    vals.push(((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)));
                }
            }
        }
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    #[test]
    fn closed_forms() {
        let cfg = MetricConfig::default();
        let a = Image::filled(1, 8, 8, 0.3);
        assert_eq!(psnr(&a, &a, &cfg).unwrap(), 100.0);
        assert_eq!(ssim(&a, &a, &cfg).unwrap(), 1.0);
        let b = Image::filled(1, 8, 8, 0.4);
        assert!((mae(&a, &b).unwrap() - 0.1).abs() < 1e-15);
        assert!((mse(&a, &b).unwrap() - 0.01).abs() < 1e-15);
        // MSE of exactly 0.01 gives 20 dB.
        let z = Image::filled(1, 4, 4, 0.0);
        let t = Image::filled(1, 4, 4, 0.1);
        let m = mse(&z, &t).unwrap();
        assert!((psnr(&z, &t, &cfg).unwrap() - 10.0 * (1.0 / m).log10()).abs() < 1e-12);
        let mut tenth = Image::filled(1, 2, 2, 0.0);
        tenth.data[0] = 0.2;
        assert_eq!(psnr(&Image::filled(1, 2, 2, 0.0), &tenth, &cfg).unwrap(), 20.0);
        let s = ssim(&Image::filled(1, 8, 8, 0.0), &Image::filled(1, 8, 8, 1.0), &cfg).unwrap();
        let c1 = cfg.ssim_c1();
        assert!((s - c1 / (1.0 + c1)).abs() < 1e-15);
        assert!(psnr(&a, &Image::filled(1, 4, 4, 0.0), &cfg).is_err());
    }

    #[test]
    fn mask_closed_forms() {
        let cfg = MetricConfig::default();
        let a = points(&[(0, 0)], 6, 6);
        let b = points(&[(3, 4)], 6, 6);
        assert_eq!(hausdorff(&a, &b, &cfg).unwrap(), Some(5.0));
        assert_eq!(hausdorff(&a, &a, &cfg).unwrap(), Some(0.0));
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        let e = Mask::empty(6, 6);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert_eq!(dice(&a, &e).unwrap(), 0.0);
        assert_eq!(hausdorff(&a, &e, &cfg).unwrap(), None);
        let diag = MetricConfig { hd_empty_policy: HdEmptyPolicy::MaxDiagonal, ..cfg };
        assert_eq!(hausdorff(&a, &e, &diag).unwrap(), Some(72f64.sqrt()));
        // |X| = |Y| = 100 with 50 shared pixels.
        let mut x = Mask::empty(20, 20);
        let mut y = Mask::empty(20, 20);
        x.data[..100].iter_mut().for_each(|v| *v = 1);
        y.data[50..150].iter_mut().for_each(|v| *v = 1);
        assert_eq!(dice(&x, &y).unwrap(), 0.5);
    }

    #[test]
    fn random_inputs_match_oracles() {
        let cfg = MetricConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let (h, w) = (rng.random_range(7..16), rng.random_range(7..16));
            let a = random_image(&mut rng, 1, h, w);
            let b = random_image(&mut rng, 1, h, w);
            let m = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / (h * w) as f64;
            assert!((psnr(&a, &b, &cfg).unwrap() - 10.0 * (1.0 / m).log10()).abs() < 1e-9);
            assert!((ssim(&a, &b, &cfg).unwrap() - brute_ssim(&a, &b, 7)).abs() < 1e-6);
            let p = rng.random_range(0.05..0.5);
            let ma = random_mask(&mut rng, h, w, p);
            let mb = random_mask(&mut rng, h, w, p);
            if ma.area() > 0 && mb.area() > 0 {
                assert!((hausdorff(&ma, &mb, &cfg).unwrap().unwrap() - brute_hausdorff(&ma, &mb)).abs() < 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric(seed in 0u64..10_000, p in 0.05f64..0.6) {
            let cfg = MetricConfig::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_image(&mut rng, 2, 9, 10);
            let b = random_image(&mut rng, 2, 9, 10);
            prop_assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
            prop_assert_eq!(mae(&a, &b).unwrap(), mae(&b, &a).unwrap());
            prop_assert!((ssim(&a, &b, &cfg).unwrap() - ssim(&b, &a, &cfg).unwrap()).abs() < 1e-12);
            let s = ssim(&a, &b, &cfg).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
            let ma = random_mask(&mut rng, 9, 10, p);
            let mb = random_mask(&mut rng, 9, 10, p);
            let d = dice(&ma, &mb).unwrap();
            prop_assert_eq!(d, dice(&mb, &ma).unwrap());
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert_eq!(hausdorff(&ma, &mb, &cfg).unwrap(), hausdorff(&mb, &ma, &cfg).unwrap());
        }

        #[test]
        fn psnr_decreases_with_error(e1 in 0.001f64..0.4, extra in 0.001f64..0.4) {
            let cfg = MetricConfig::default();
            let z = Image::filled(1, 4, 4, 0.0);
            let p1 = psnr(&z, &Image::filled(1, 4, 4, e1), &cfg).unwrap();
            let p2 = psnr(&z, &Image::filled(1, 4, 4, e1 + extra), &cfg).unwrap();
            prop_assert!(p2 < p1);
        }
    }
}
