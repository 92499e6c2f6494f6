//! Intensity-based affine registration of series images onto an anchor.
//!
//! The mapping is optimized on a coarse-to-fine image pyramid by minimizing
//! an intensity dissimilarity (plain MSE, or a Geman-McClure robust variant
//! that downweights regions that changed between visits, such as a growing
//! lesion). Each iteration takes a
//! Levenberg-Marquardt damped step: large damping reduces it to scaled
//! gradient descent, small damping to a Gauss-Newton step.

use nalgebra::{Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use crate::datasets::LongitudinalSeries;
use crate::raster::{Image, Mask};
use crate::{Error, Result};

/// `p -> center + matrix * (p - center) + translation`, in pixels, mapping
/// moving-image coordinates onto fixed-image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub matrix: [[f64; 2]; 2],
    pub translation: [f64; 2],
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineTransform {
    pub fn identity() -> Self {
        AffineTransform { matrix: [[1.0, 0.0], [0.0, 1.0]], translation: [0.0, 0.0] }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        AffineTransform { translation: [dx, dy], ..Self::identity() }
    }

    /// Counter-clockwise in image coordinates (x right, y down).
    pub fn rotation_deg(deg: f64) -> Self {
        let (s, c) = deg.to_radians().sin_cos();
        AffineTransform { matrix: [[c, -s], [s, c]], translation: [0.0, 0.0] }
    }

    pub fn det(&self) -> f64 {
        self.matrix[0][0] * self.matrix[1][1] - self.matrix[0][1] * self.matrix[1][0]
    }

    pub fn is_invertible(&self) -> bool {
        self.det().abs() > 1e-8
    }

    pub fn rotation_angle_deg(&self) -> f64 {
        self.matrix[1][0].atan2(self.matrix[0][0]).to_degrees()
    }

    pub fn inverse(&self) -> Result<Self> {
        let d = self.det();
        if d.abs() <= 1e-8 {
            return Err(Error::InvalidInput("affine matrix is singular".into()));
        }
        let [[a, b], [c, e]] = self.matrix;
        let inv = [[e / d, -b / d], [-c / d, a / d]];
        let [tx, ty] = self.translation;
        Ok(AffineTransform {
            matrix: inv,
            translation: [-(inv[0][0] * tx + inv[0][1] * ty), -(inv[1][0] * tx + inv[1][1] * ty)],
        })
    }

    /// Maps a point given relative to `center`.
    pub fn apply(&self, center: (f64, f64), p: (f64, f64)) -> (f64, f64) {
        let (dx, dy) = (p.0 - center.0, p.1 - center.1);
        (
            center.0 + self.matrix[0][0] * dx + self.matrix[0][1] * dy + self.translation[0],
            center.1 + self.matrix[1][0] * dx + self.matrix[1][1] * dy + self.translation[1],
        )
    }

    fn source_map(&self, h: usize, w: usize) -> Result<impl Fn(f64, f64) -> (f64, f64)> {
        let inv = self.inverse()?;
        let c = center(h, w);
        Ok(move |x, y| inv.apply(c, (x, y)))
    }

    /// Resamples `image` into the fixed frame (bilinear, edge replication).
    pub fn warp_image(&self, image: &Image) -> Result<Image> {
        Ok(image.warp(&self.source_map(image.height, image.width)?))
    }

    /// Resamples a mask into the fixed frame (nearest neighbour).
    pub fn warp_mask(&self, mask: &Mask) -> Result<Mask> {
        Ok(mask.warp_nearest(&self.source_map(mask.height, mask.width)?))
    }
}

fn center(h: usize, w: usize) -> (f64, f64) {
    ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dissimilarity {
    Mse,
    /// `r^2 c^2 / (r^2 + c^2)` with scale `c` in intensity units.
    GemanMcClure { scale: f64 },
}

impl Dissimilarity {
    fn rho(self, r: f64) -> f64 {
        match self {
            Dissimilarity::Mse => r * r,
            Dissimilarity::GemanMcClure { scale } => {
                let c2 = scale * scale;
                r * r * c2 / (r * r + c2)
            }
        }
    }

    /// IRLS weight: `rho'(r) / (2r)`.
    fn weight(self, r: f64) -> f64 {
        match self {
            Dissimilarity::Mse => 1.0,
            Dissimilarity::GemanMcClure { scale } => {
                let c2 = scale * scale;
                let d = r * r + c2;
                c2 * c2 / (d * d)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub dissimilarity: Dissimilarity,
    /// Downsampling factors, coarse to fine.
    pub pyramid: Vec<usize>,
    /// Iteration budget per pyramid level.
    pub iterations: Vec<usize>,
    /// Relative loss decrease below which a level is considered converged.
    pub tolerance: f64,
    /// Consecutive rejected steps tolerated before giving up on a level.
    pub patience: usize,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            dissimilarity: Dissimilarity::GemanMcClure { scale: 0.1 },
            pyramid: vec![4, 2, 1], iterations: vec![60, 40, 30], tolerance: 1e-7, patience: 8 }
    }
}

#[derive(Clone, Debug)]
pub struct Registration {
    pub transform: AffineTransform,
    pub warped: Image,
    pub initial_loss: f64,
    pub loss: f64,
    /// Set when the finest level stopped without meeting the tolerance.
    pub warning: Option<String>,
}

/// Unitless parameters: `A = I + [[p0, p1], [p2, p3]]`, `b = (p4, p5)`, acting
/// on coordinates centered and divided by the half-extent.
type Params = Vector6<f64>;

struct Level<'a> {
    metric: Dissimilarity,
    moving: &'a Image,
    fixed: &'a Image,
    center: (f64, f64),
    scale: f64,
}

impl Level<'_> {
    fn source(&self, p: &Params, x: f64, y: f64) -> (f64, f64) {
        let (qx, qy) = ((x - self.center.0) / self.scale, (y - self.center.1) / self.scale);
        let ux = (1.0 + p[0]) * qx + p[1] * qy + p[4];
        let uy = p[2] * qx + (1.0 + p[3]) * qy + p[5];
        (self.center.0 + self.scale * ux, self.center.1 + self.scale * uy)
    }

    fn loss(&self, p: &Params) -> f64 {
        let (h, w) = (self.fixed.height, self.fixed.width);
        let mut acc = 0.0;
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = self.source(p, x as f64, y as f64);
                let r = self.moving.sample_bilinear(0, sx, sy) - self.fixed.at(0, y, x);
                acc += self.metric.rho(r);
            }
        }
        acc / (h * w) as f64
    }

    /// Loss, gradient and Gauss-Newton matrix at `p`.
    fn linearize(&self, p: &Params) -> (f64, Params, Matrix6<f64>) {
        let (h, w) = (self.fixed.height, self.fixed.width);
        let n = (h * w) as f64;
        let mut loss = 0.0;
        let mut grad = Params::zeros();
        let mut gn = Matrix6::zeros();
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = self.source(p, x as f64, y as f64);
                let r = self.moving.sample_bilinear(0, sx, sy) - self.fixed.at(0, y, x);
                let gx = 0.5 * (self.moving.sample_bilinear(0, sx + 1.0, sy) - self.moving.sample_bilinear(0, sx - 1.0, sy));
                let gy = 0.5 * (self.moving.sample_bilinear(0, sx, sy + 1.0) - self.moving.sample_bilinear(0, sx, sy - 1.0));
                let (qx, qy) = ((x as f64 - self.center.0) / self.scale, (y as f64 - self.center.1) / self.scale);
                let s = self.scale;
                let j = Params::new(gx * s * qx, gx * s * qy, gy * s * qx, gy * s * qy, gx * s, gy * s);
                let wt = self.metric.weight(r);
                loss += self.metric.rho(r);
                grad += j * (2.0 * wt * r);
                gn += j * j.transpose() * (2.0 * wt);
            }
        }
        (loss / n, grad / n, gn / n)
    }
}

/// Optimizes one pyramid level in place. Returns `(loss, converged)`.
fn solve_level(level: &Level<'_>, p: &mut Params, iterations: usize, cfg: &RegistrationConfig) -> (f64, bool) {
    let mut damping = 1e-3;
    let mut rejected = 0;
    let (mut loss, mut grad, mut gn) = level.linearize(p);
    if loss <= f64::EPSILON * f64::EPSILON {
        return (loss, true);
    }
    for _ in 0..iterations {
        let mut system = gn;
        for k in 0..6 {
            system[(k, k)] += damping * gn[(k, k)].max(1e-12);
        }
        let Some(step) = system.lu().solve(&(-grad)) else {
            damping *= 10.0;
            rejected += 1;
            if rejected > cfg.patience {
                return (loss, false);
            }
            continue;
        };
        let candidate = *p + step;
        let new_loss = level.loss(&candidate);
        if new_loss < loss {
            let improvement = (loss - new_loss) / loss.max(1e-300);
            *p = candidate;
            damping = (damping / 3.0).max(1e-9);
            rejected = 0;
            if improvement < cfg.tolerance || new_loss <= 1e-30 {
                return (new_loss, true);
            }
            (loss, grad, gn) = level.linearize(p);
        } else {
            damping *= 4.0;
            rejected += 1;
            if rejected > cfg.patience {
                // No decrease along any damped direction: stationary point.
                return (loss, damping > 1e6);
            }
        }
    }
    (loss, false)
}

/// Finds the affine transform aligning `moving` onto `fixed` and returns it
/// with the warped moving image.
pub fn register_to_anchor(moving: &Image, fixed: &Image, cfg: &RegistrationConfig) -> Result<Registration> {
    if moving.shape() != fixed.shape() {
        return Err(Error::shape(fixed.shape(), moving.shape()));
    }
    if cfg.pyramid.is_empty() || cfg.pyramid.len() != cfg.iterations.len() || cfg.pyramid.contains(&0) {
        return Err(Error::Config("pyramid and iterations must be non-empty, equal length, factors >= 1".into()));
    }
    let (m_lum, f_lum) = (moving.luminance(), fixed.luminance());
    let mut p = Params::zeros();
    let mut loss = 0.0;
    let mut converged = true;
    let mut initial_loss = None;
    for (&factor, &iters) in cfg.pyramid.iter().zip(&cfg.iterations) {
        let (m, f) = (m_lum.downsample(factor), f_lum.downsample(factor));
        let level = Level {
            metric: cfg.dissimilarity,
            moving: &m,
            fixed: &f,
            center: center(f.height, f.width),
            scale: f.height.max(f.width) as f64 / 2.0,
        };
        if factor == *cfg.pyramid.last().expect("non-empty") {
            initial_loss = Some(level.loss(&Params::zeros()));
        }
        (loss, converged) = solve_level(&level, &mut p, iters, cfg);
    }
    // Parameters act on normalized coordinates; convert the inverse map
    // (fixed -> moving) to pixels, then invert to moving -> fixed.
    let scale = fixed.height.max(fixed.width) as f64 / 2.0;
    let inverse_map = AffineTransform {
        matrix: [[1.0 + p[0], p[1]], [p[2], 1.0 + p[3]]],
        translation: [p[4] * scale, p[5] * scale],
    };
    let transform = inverse_map.inverse()?;
    let warped = transform.warp_image(moving)?;
    let warning = (!converged).then(|| "registration did not converge; returning best transform found".to_string());
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Ok(Registration { transform, warped, initial_loss: initial_loss.unwrap_or(loss), loss, warning })
}

#[derive(Clone, Debug)]
pub struct SeriesRegistration {
    pub series: LongitudinalSeries,
    /// One transform per visit; the anchor (visit 0) gets the identity.
    pub transforms: Vec<AffineTransform>,
    pub warnings: Vec<(usize, String)>,
}

/// Aligns every visit onto the first image; masks follow with
/// nearest-neighbour resampling.
pub fn register_series(series: &LongitudinalSeries, cfg: &RegistrationConfig) -> Result<SeriesRegistration> {
    if series.len() < 2 {
        return Err(Error::InvalidInput("registration needs at least two visits".into()));
    }
    let anchor = &series.images[0];
    let mut images = vec![anchor.clone()];
    let mut transforms = vec![AffineTransform::identity()];
    let mut warnings = Vec::new();
    for (k, im) in series.images.iter().enumerate().skip(1) {
        let reg = register_to_anchor(im, anchor, cfg)?;
        if let Some(w) = reg.warning {
            warnings.push((k, w));
        }
        images.push(reg.warped.clamp01());
        transforms.push(reg.transform);
    }
    let masks = match &series.masks {
        Some(ms) => Some(ms.iter().zip(&transforms).map(|(m, t)| t.warp_mask(m)).collect::<Result<Vec<_>>>()?),
        None => None,
    };
    let series = LongitudinalSeries::new(series.series_id.clone(), images, series.times.clone(), masks)?;
    Ok(SeriesRegistration { series, transforms, warnings })
}
