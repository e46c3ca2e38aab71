//! Planar floating-point images and pixel-level utilities.
//!
//! An [`Image`] stores channel-major (CHW) `f64` samples, nominally in
//! [0, 1]. Resizing follows the half-pixel-center convention
//! (`src = (dst + 0.5) * src_size / dst_size - 0.5`, edges clamped), which
//! makes an exact 2:1 bilinear reduction equal to 2x2 block averaging.

use crate::data::DataError;
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Image {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w, "image buffer length mismatch");
        Image { c, h, w, data }
    }

    pub fn from_fn(c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut img = Image::zeros(c, h, w);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    img.set(ci, y, x, f(ci, y, x));
                }
            }
        }
        img
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Channel mean, collapsing to a single plane.
    pub fn grayscale(&self) -> Image {
        if self.c == 1 {
            return self.clone();
        }
        let mut out = Image::zeros(1, self.h, self.w);
        let n = (self.h * self.w) as f64;
        let _ = n;
        for y in 0..self.h {
            for x in 0..self.w {
                let mut s = 0.0;
                for c in 0..self.c {
                    s += self.get(c, y, x);
                }
                out.set(0, y, x, s / self.c as f64);
            }
        }
        out
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.data.len() as f64
    }

    /// Bilinear resize under the half-pixel-center convention.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Image {
        if out_h == self.h && out_w == self.w {
            return self.clone();
        }
        let mut out = Image::zeros(self.c, out_h, out_w);
        let sy = self.h as f64 / out_h as f64;
        let sx = self.w as f64 / out_w as f64;
        for y in 0..out_h {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.h - 1);
            let wy = fy - y0 as f64;
            for x in 0..out_w {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.w - 1);
                let wx = fx - x0 as f64;
                for c in 0..self.c {
                    let v00 = self.get(c, y0, x0);
                    let v01 = self.get(c, y0, x1);
                    let v10 = self.get(c, y1, x0);
                    let v11 = self.get(c, y1, x1);
                    let top = v00 + (v01 - v00) * wx;
                    let bot = v10 + (v11 - v10) * wx;
                    out.set(c, y, x, top + (bot - top) * wy);
                }
            }
        }
        out
    }

    /// Nearest-neighbor resize; keeps binary masks binary.
    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> Image {
        if out_h == self.h && out_w == self.w {
            return self.clone();
        }
        let mut out = Image::zeros(self.c, out_h, out_w);
        let sy = self.h as f64 / out_h as f64;
        let sx = self.w as f64 / out_w as f64;
        for y in 0..out_h {
            let yi = (((y as f64 + 0.5) * sy).floor() as usize).min(self.h - 1);
            for x in 0..out_w {
                let xi = (((x as f64 + 0.5) * sx).floor() as usize).min(self.w - 1);
                for c in 0..self.c {
                    out.set(c, y, x, self.get(c, yi, xi));
                }
            }
        }
        out
    }

    /// Quantizes one channel to 8 bits, rounding half away from zero.
    pub fn to_gray8(&self) -> Vec<u8> {
        assert_eq!(self.c, 1, "to_gray8 expects a single-channel image");
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn save_gray8(&self, path: &Path) -> Result<(), DataError> {
        let buf = self.to_gray8();
        let img = image::GrayImage::from_raw(self.w as u32, self.h as u32, buf)
            .expect("gray buffer size");
        img.save(path).map_err(|e| DataError::Encode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn save_rgb8(&self, path: &Path) -> Result<(), DataError> {
        assert_eq!(self.c, 3, "save_rgb8 expects a 3-channel image");
        let mut buf = Vec::with_capacity(self.w * self.h * 3);
        for y in 0..self.h {
            for x in 0..self.w {
                for c in 0..3 {
                    buf.push((self.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        let img = image::RgbImage::from_raw(self.w as u32, self.h as u32, buf)
            .expect("rgb buffer size");
        img.save(path).map_err(|e| DataError::Encode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

fn open(path: &Path) -> Result<image::DynamicImage, DataError> {
    image::open(path).map_err(|e| DataError::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Loads as 3-channel RGB regardless of the stored layout.
pub fn load_rgb(path: &Path) -> Result<Image, DataError> {
    let rgb = open(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut out = Image::zeros(3, h, w);
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out.set(c, y as usize, x as usize, p.0[c] as f64 / 255.0);
        }
    }
    Ok(out)
}

/// Loads preserving the stored channel count: grayscale sources stay one
/// plane, color sources become three.
pub fn load_native(path: &Path) -> Result<Image, DataError> {
    let dm = open(path)?;
    match dm {
        image::DynamicImage::ImageLuma8(_)
        | image::DynamicImage::ImageLuma16(_)
        | image::DynamicImage::ImageLumaA8(_)
        | image::DynamicImage::ImageLumaA16(_) => {
            let g = dm.to_luma8();
            let (w, h) = (g.width() as usize, g.height() as usize);
            let mut out = Image::zeros(1, h, w);
            for (x, y, p) in g.enumerate_pixels() {
                out.set(0, y as usize, x as usize, p.0[0] as f64 / 255.0);
            }
            Ok(out)
        }
        _ => {
            let rgb = dm.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let mut out = Image::zeros(3, h, w);
            for (x, y, p) in rgb.enumerate_pixels() {
                for c in 0..3 {
                    out.set(c, y as usize, x as usize, p.0[c] as f64 / 255.0);
                }
            }
            Ok(out)
        }
    }
}

/// Loads a ground-truth mask, binarized at 0.5.
pub fn load_mask(path: &Path) -> Result<Image, DataError> {
    let g = open(path)?.to_luma8();
    let (w, h) = (g.width() as usize, g.height() as usize);
    let mut out = Image::zeros(1, h, w);
    for (x, y, p) in g.enumerate_pixels() {
        let v = if p.0[0] as f64 / 255.0 >= 0.5 { 1.0 } else { 0.0 };
        out.set(0, y as usize, x as usize, v);
    }
    Ok(out)
}
