//! Per-pixel temporal extrapolation baselines.
//!
//! Both methods are linear in the history values, so each reduces to a
//! weight vector over the history images that is computed once per call.

use crate::raster::Image;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct ExtrapolationInput<'a> {
    pub images: &'a [Image],
    pub times: &'a [f64],
    pub target_time: f64,
}

impl ExtrapolationInput<'_> {
    fn validate(&self) -> Result<()> {
        if self.images.len() != self.times.len() {
            return Err(Error::InvalidInput(format!(
                "{} images but {} times",
                self.images.len(),
                self.times.len()
            )));
        }
        if self.images.len() < 2 {
            return Err(Error::InvalidInput("extrapolation needs at least 2 history points".into()));
        }
        if self.times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidInput("history times must be strictly increasing".into()));
        }
        let shape = self.images[0].shape();
        if let Some(im) = self.images.iter().find(|im| im.shape() != shape) {
            return Err(Error::shape(shape, im.shape()));
        }
        Ok(())
    }
}

fn combine(images: &[Image], weights: &[f64]) -> Image {
    let mut out = Image::filled(images[0].channels, images[0].height, images[0].width, 0.0);
    for (im, &w) in images.iter().zip(weights) {
        for (o, v) in out.data.iter_mut().zip(&im.data) {
            *o += w * v;
        }
    }
    out.clamp01()
}

/// Weights of the least-squares line through `(times, y)` evaluated at `t`.
pub fn linear_weights(times: &[f64], t: f64) -> Vec<f64> {
    let n = times.len() as f64;
    let mean = times.iter().sum::<f64>() / n;
    let sxx: f64 = times.iter().map(|s| (s - mean).powi(2)).sum();
    times.iter().map(|s| 1.0 / n + (t - mean) * (s - mean) / sxx).collect()
}

/// Natural cubic spline through `(times, y)` evaluated at `t` with the
/// polynomial piece of the nearest interval (beyond the ends, the first or
/// last piece is continued).
pub fn natural_spline_eval(times: &[f64], y: &[f64], t: f64) -> f64 {
    let n = times.len();
    let h: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    // Second derivatives m[1..n-1] from the tridiagonal system, m[0] = m[n-1] = 0.
    let mut m = vec![0.0; n];
    if n > 2 {
        let k = n - 2;
        let mut diag: Vec<f64> = (0..k).map(|i| 2.0 * (h[i] + h[i + 1])).collect();
        let mut rhs: Vec<f64> =
            (0..k).map(|i| 6.0 * ((y[i + 2] - y[i + 1]) / h[i + 1] - (y[i + 1] - y[i]) / h[i])).collect();
        for i in 1..k {
            let f = h[i] / diag[i - 1];
            diag[i] -= f * h[i];
            rhs[i] -= f * rhs[i - 1];
        }
        m[k] = rhs[k - 1] / diag[k - 1];
        for i in (0..k - 1).rev() {
            m[i + 1] = (rhs[i] - h[i + 1] * m[i + 2]) / diag[i];
        }
    }
    let seg = times.windows(2).position(|w| t <= w[1]).unwrap_or(n - 2);
    let (a, b, hs) = (times[seg], times[seg + 1], h[seg]);
    m[seg] * (b - t).powi(3) / (6.0 * hs)
        + m[seg + 1] * (t - a).powi(3) / (6.0 * hs)
        + (y[seg] / hs - m[seg] * hs / 6.0) * (b - t)
        + (y[seg + 1] / hs - m[seg + 1] * hs / 6.0) * (t - a)
}

/// Weights of the Lagrange polynomial through all `times` evaluated at `t`.
fn lagrange_weights(times: &[f64], t: f64) -> Vec<f64> {
    (0..times.len())
        .map(|i| {
            (0..times.len()).filter(|&k| k != i).map(|k| (t - times[k]) / (times[i] - times[k])).product()
        })
        .collect()
}

/// Weights of the spline extrapolant: linear for 2 points, the quadratic
/// through the points for 3, and the natural cubic spline otherwise.
pub fn spline_weights(times: &[f64], t: f64) -> Vec<f64> {
    match times.len() {
        2 => linear_weights(times, t),
        3 => lagrange_weights(times, t),
        n => (0..n)
            .map(|i| {
                let mut e = vec![0.0; n];
                e[i] = 1.0;
                natural_spline_eval(times, &e, t)
            })
            .collect(),
    }
}

/// Per-pixel least-squares line over the history, clipped to `[0, 1]`.
pub fn linear_extrapolate(input: &ExtrapolationInput) -> Result<Image> {
    input.validate()?;
    Ok(combine(input.images, &linear_weights(input.times, input.target_time)))
}

/// Per-pixel natural cubic spline extrapolation, clipped to `[0, 1]`.
pub fn cubic_spline_extrapolate(input: &ExtrapolationInput) -> Result<Image> {
    input.validate()?;
    Ok(combine(input.images, &spline_weights(input.times, input.target_time)))
}

#[cfg(test)]
mod tests {
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    use super::*;

    fn px(v: f64) -> Image {
        Image::filled(1, 1, 1, v)
    }

    fn run(f: fn(&ExtrapolationInput) -> Result<Image>, vals: &[f64], times: &[f64], t: f64) -> f64 {
        let images: Vec<Image> = vals.iter().map(|&v| px(v)).collect();
        f(&ExtrapolationInput { images: &images, times, target_time: t }).unwrap().data[0]
    }

    /// Dense solve for all 4(n-1) piece coefficients of the natural spline.
    fn dense_spline(times: &[f64], y: &[f64], t: f64) -> f64 {
        let n = times.len();
        let p = n - 1;
        let mut a = DMatrix::<f64>::zeros(4 * p, 4 * p);
        let mut b = DVector::<f64>::zeros(4 * p);
        let mut row = 0;
        // Piece k: c0 + c1 s + c2 s^2 + c3 s^3 with s = t - times[k].
        for k in 0..p {
            let h = times[k + 1] - times[k];
            a[(row, 4 * k)] = 1.0;
            b[row] = y[k];
            row += 1;
            for (d, v) in [1.0, h, h * h, h * h * h].iter().enumerate() {
                a[(row, 4 * k + d)] = *v;
            }
            b[row] = y[k + 1];
            row += 1;
            if k + 1 < p {
                a[(row, 4 * k + 1)] = 1.0;
                a[(row, 4 * k + 2)] = 2.0 * h;
                a[(row, 4 * k + 3)] = 3.0 * h * h;
                a[(row, 4 * (k + 1) + 1)] = -1.0;
                row += 1;
                a[(row, 4 * k + 2)] = 2.0;
                a[(row, 4 * k + 3)] = 6.0 * h;
                a[(row, 4 * (k + 1) + 2)] = -2.0;
                row += 1;
            }
        }
        a[(row, 2)] = 2.0;
        row += 1;
        let h = times[p] - times[p - 1];
        a[(row, 4 * (p - 1) + 2)] = 2.0;
        a[(row, 4 * (p - 1) + 3)] = 6.0 * h;
        let c = a.lu().solve(&b).unwrap();
        let s = t - times[p - 1];
        let k = p - 1;
        c[4 * k] + c[4 * k + 1] * s + c[4 * k + 2] * s * s + c[4 * k + 3] * s * s * s
    }

    #[test]
    fn closed_forms() {
        assert!((run(linear_extrapolate, &[0.2, 0.4], &[0.0, 1.0], 2.0) - 0.6).abs() < 1e-12);
        assert_eq!(run(linear_extrapolate, &[0.8, 0.95], &[0.0, 1.0], 2.0), 1.0);
        assert!((run(linear_extrapolate, &[0.3, 0.3, 0.3], &[0.0, 0.5, 2.0], 5.0) - 0.3).abs() < 1e-12);
        assert!((run(cubic_spline_extrapolate, &[0.3; 5], &[0.0, 0.5, 2.0, 3.0, 4.0], 5.0) - 0.3).abs() < 1e-12);
        let single = [px(0.5)];
        assert!(linear_extrapolate(&ExtrapolationInput { images: &single, times: &[0.0], target_time: 1.0 }).is_err());
        assert!(cubic_spline_extrapolate(&ExtrapolationInput { images: &single, times: &[0.0], target_time: 1.0 }).is_err());
        let two = [px(0.1), px(0.2)];
        assert!(linear_extrapolate(&ExtrapolationInput { images: &two, times: &[1.0, 1.0], target_time: 2.0 }).is_err());
    }

    #[test]
    fn two_points_spline_is_linear() {
        for (vals, t) in [([0.1, 0.3], 2.5), ([0.9, 0.2], 1.7), ([0.5, 0.55], 4.0)] {
            let times = [0.0, 1.3];
            assert_eq!(run(cubic_spline_extrapolate, &vals, &times, t), run(linear_extrapolate, &vals, &times, t));
        }
    }

    #[test]
    fn three_points_quadratic_and_four_collinear() {
        let times = [0.0, 1.0, 3.0];
        let q = |t: f64| 0.1 + 0.05 * t + 0.02 * t * t;
        let vals: Vec<f64> = times.iter().map(|&t| q(t)).collect();
        assert!((run(cubic_spline_extrapolate, &vals, &times, 4.0) - q(4.0)).abs() < 1e-12);
        let times = [0.0, 0.7, 1.5, 2.0];
        let vals: Vec<f64> = times.iter().map(|&t| 0.1 + 0.2 * t).collect();
        let s = run(cubic_spline_extrapolate, &vals, &times, 2.5);
        let l = run(linear_extrapolate, &vals, &times, 2.5);
        assert!((s - l).abs() < 1e-8 && (s - 0.6).abs() < 1e-8);
    }

    #[test]
    fn spline_matches_dense_solver() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let mut times = vec![0.0];
            for _ in 0..4 {
                let last = *times.last().unwrap();
                times.push(last + rng.random_range(0.2..2.0));
            }
            let y: Vec<f64> = (0..5).map(|_| rng.random::<f64>()).collect();
            let t = times[4] + rng.random_range(0.0..2.0);
            let w = spline_weights(&times, t);
            let ours: f64 = w.iter().zip(&y).map(|(a, b)| a * b).sum();
            assert!((ours - dense_spline(&times, &y, t)).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn exact_on_polynomials_and_bounded(a in -1.0f64..1.0, b in -1.0f64..1.0, t in 3.0f64..6.0,
                                            gaps in prop::collection::vec(0.1f64..1.5, 3..6)) {
            let mut times = vec![0.0];
            for g in &gaps {
                times.push(times.last().unwrap() + g);
            }
            let line: Vec<f64> = times.iter().map(|s| a + b * s).collect();
            let w = linear_weights(&times, t);
            let v: f64 = w.iter().zip(&line).map(|(p, q)| p * q).sum();
            prop_assert!((v - (a + b * t)).abs() < 1e-9);
            let ws = spline_weights(&times, t);
            let v: f64 = ws.iter().zip(&line).map(|(p, q)| p * q).sum();
            prop_assert!((v - (a + b * t)).abs() < 1e-8);
            let images: Vec<Image> = line.iter().map(|&v| px(v)).collect();
            let target = times.last().unwrap() + t;
            let input = ExtrapolationInput { images: &images, times: &times, target_time: target };
            prop_assert!(linear_extrapolate(&input).unwrap().in_unit_range());
            prop_assert!(cubic_spline_extrapolate(&input).unwrap().in_unit_range());
        }
    }
}
