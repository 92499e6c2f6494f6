//! Image and mask containers, resampling, and 8/16-bit PNG I/O.

use std::path::Path;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Channel-major (`C x H x W`) image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Binary `H x W` mask stored as 0/1 bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape((channels, height, width), data.len()));
        }
        Ok(Image { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Image { channels, height, width, data: vec![value; channels * height * width] }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn clamp01(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Channel mean, used as luminance for multi-channel registration.
    pub fn luminance(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let n = self.height * self.width;
        let data = (0..n)
            .map(|i| (0..self.channels).map(|c| self.data[c * n + i]).sum::<f64>() / self.channels as f64)
            .collect();
        Image { channels: 1, height: self.height, width: self.width, data }
    }

    /// `[1, C, H, W]` constant tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.data.clone(), &[1, self.channels, self.height, self.width])
    }

    /// Stacks same-shape images into `[N, C, H, W]`.
    pub fn batch(images: &[&Image]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::InvalidInput("empty image batch".into()))?;
        let mut data = Vec::with_capacity(first.data.len() * images.len());
        for im in images {
            if im.shape() != first.shape() {
                return Err(Error::shape(first.shape(), im.shape()));
            }
            data.extend_from_slice(&im.data);
        }
        Ok(Tensor::new(data, &[images.len(), first.channels, first.height, first.width]))
    }

    /// Image `index` of an `[N, C, H, W]` tensor.
    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || index >= s[0] {
            return Err(Error::shape("[N, C, H, W] with N > index", s));
        }
        let size = s[1] * s[2] * s[3];
        Image::new(s[1], s[2], s[3], t.data()[index * size..(index + 1) * size].to_vec())
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.data[(c * self.height + y) * self.width + x] = self.at(c, y, self.width - 1 - x);
                }
            }
        }
        out
    }

    pub fn flip_vertical(&self) -> Image {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.data[(c * self.height + y) * self.width + x] = self.at(c, self.height - 1 - y, x);
                }
            }
        }
        out
    }

    /// Bilinear sample of channel `c` at fractional `(x, y)`, clamping
    /// coordinates to the frame (edge replication).
    pub fn sample_bilinear(&self, c: usize, x: f64, y: f64) -> f64 {
        let xm = (self.width - 1) as f64;
        let ym = (self.height - 1) as f64;
        let x = x.clamp(0.0, xm);
        let y = y.clamp(0.0, ym);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let top = self.at(c, y0, x0) * (1.0 - fx) + self.at(c, y0, x1) * fx;
        let bot = self.at(c, y1, x0) * (1.0 - fx) + self.at(c, y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// Resamples through `map`, which sends output pixel coordinates to
    /// source coordinates.
    pub fn warp(&self, map: &impl Fn(f64, f64) -> (f64, f64)) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let (sx, sy) = map(x as f64, y as f64);
                for c in 0..self.channels {
                    out.data[(c * self.height + y) * self.width + x] = self.sample_bilinear(c, sx, sy);
                }
            }
        }
        out
    }

    /// Box-filter downsampling by an integer factor (partial edge blocks
    /// are averaged over the pixels they contain).
    pub fn downsample(&self, factor: usize) -> Image {
        if factor <= 1 {
            return self.clone();
        }
        let h = self.height.div_ceil(factor);
        let w = self.width.div_ceil(factor);
        let mut data = vec![0.0; self.channels * h * w];
        for c in 0..self.channels {
            for oy in 0..h {
                for ox in 0..w {
                    let (mut acc, mut n) = (0.0, 0usize);
                    for y in oy * factor..((oy + 1) * factor).min(self.height) {
                        for x in ox * factor..((ox + 1) * factor).min(self.width) {
                            acc += self.at(c, y, x);
                            n += 1;
                        }
                    }
                    data[(c * h + oy) * w + ox] = acc / n as f64;
                }
            }
        }
        Image { channels: self.channels, height: h, width: w, data }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let n = self.height * self.width;
        let quantize = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        match self.channels {
            1 => {
                let buf: Vec<u8> = self.data.iter().map(|&v| quantize(v)).collect();
                image::GrayImage::from_raw(self.width as u32, self.height as u32, buf)
                    .expect("buffer size")
                    .save(path)?;
            }
            3 => {
                let buf: Vec<u8> =
                    (0..n).flat_map(|i| (0..3).map(move |c| (c, i))).map(|(c, i)| quantize(self.data[c * n + i])).collect();
                image::RgbImage::from_raw(self.width as u32, self.height as u32, buf)
                    .expect("buffer size")
                    .save(path)?;
            }
            c => return Err(Error::Unsupported(format!("PNG export of {c}-channel images"))),
        }
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        match img.color().channel_count() {
            1 | 2 => {
                let g = img.to_luma16();
                Ok(Image { channels: 1, height: h, width: w, data: g.pixels().map(|p| p.0[0] as f64 / 65535.0).collect() })
            }
            _ => {
                let rgb = img.to_rgb16();
                let n = h * w;
                let mut data = vec![0.0; 3 * n];
                for (i, p) in rgb.pixels().enumerate() {
                    for c in 0..3 {
                        data[c * n + i] = p.0[c] as f64 / 65535.0;
                    }
                }
                Ok(Image { channels: 3, height: h, width: w, data })
            }
        }
    }

    /// Writes channel 0 as a 16-bit PNG storing `round(v * scale)`.
    pub fn save_png16(&self, path: &Path, scale: f64) -> Result<()> {
        let buf: Vec<u16> = self.plane(0).iter().map(|&v| (v * scale).round().clamp(0.0, 65535.0) as u16).collect();
        image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(self.width as u32, self.height as u32, buf)
            .expect("buffer size")
            .save(path)?;
        Ok(())
    }
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape((height, width), data.len()));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidInput("mask values must be 0 or 1".into()));
        }
        Ok(Mask { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Mask { height, width, data: vec![0; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn area(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// Foreground pixel coordinates as `(row, col)`.
    pub fn foreground(&self) -> Vec<(usize, usize)> {
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (y, x)))
            .filter(|&(y, x)| self.get(y, x))
            .collect()
    }

    /// Thresholds an image channel at `threshold` (inclusive).
    pub fn from_threshold(image: &Image, threshold: f64) -> Mask {
        Mask {
            height: image.height,
            width: image.width,
            data: image.plane(0).iter().map(|&v| u8::from(v >= threshold)).collect(),
        }
    }

    pub fn to_image(&self) -> Image {
        Image { channels: 1, height: self.height, width: self.width, data: self.data.iter().map(|&v| v as f64).collect() }
    }

    pub fn flip_horizontal(&self) -> Mask {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.data[y * self.width + x] = self.data[y * self.width + self.width - 1 - x];
            }
        }
        out
    }

    pub fn flip_vertical(&self) -> Mask {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.data[y * self.width + x] = self.data[(self.height - 1 - y) * self.width + x];
            }
        }
        out
    }

    /// Nearest-neighbour resampling; keeps values binary.
    pub fn warp_nearest(&self, map: &impl Fn(f64, f64) -> (f64, f64)) -> Mask {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let (sx, sy) = map(x as f64, y as f64);
                let sx = sx.round().clamp(0.0, (self.width - 1) as f64) as usize;
                let sy = sy.round().clamp(0.0, (self.height - 1) as f64) as usize;
                out.data[y * self.width + x] = self.data[sy * self.width + sx];
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: Vec<u8> = self.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
        image::GrayImage::from_raw(self.width as u32, self.height as u32, buf).expect("buffer size").save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let g = image::open(path)?.to_luma8();
        Ok(Mask {
            height: g.height() as usize,
            width: g.width() as usize,
            data: g.pixels().map(|p| u8::from(p.0[0] >= 128)).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        Image::new(1, h, w, (0..h * w).map(|i| i as f64 / (h * w) as f64).collect()).unwrap()
    }

    #[test]
    fn flips_are_involutions() {
        let im = ramp(5, 7);
        assert_eq!(im.flip_horizontal().flip_horizontal(), im);
        assert_eq!(im.flip_vertical().flip_vertical(), im);
        assert_ne!(im.flip_horizontal(), im);
    }

    #[test]
    fn identity_warp_is_exact() {
        let im = ramp(6, 6);
        assert_eq!(im.warp(&|x, y| (x, y)), im);
    }

    #[test]
    fn png_round_trip_is_8bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let im = Image::new(1, 4, 4, (0..16).map(|i| i as f64 / 255.0).collect()).unwrap();
        let p = dir.path().join("a.png");
        im.save_png(&p).unwrap();
        let back = Image::load_png(&p).unwrap();
        for (a, b) in im.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-9);
        }
        let mask = Mask::new(2, 3, vec![0, 1, 1, 0, 0, 1]).unwrap();
        let mp = dir.path().join("m.png");
        mask.save_png(&mp).unwrap();
        assert_eq!(Mask::load_png(&mp).unwrap(), mask);
    }

    #[test]
    fn downsample_averages_blocks() {
        let im = Image::new(1, 2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(im.downsample(2).data, vec![0.5]);
    }
}
