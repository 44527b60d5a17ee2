//! In-memory RGB images with values in `[0, 1]`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Height × width × 3, channel-last, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

pub const CHANNELS: usize = 3;

impl<T: Scalar> Image<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * CHANNELS {
            return Err(Error::Shape(format!(
                "{height}x{width}x{CHANNELS} image needs {} values, got {}",
                height * width * CHANNELS,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * CHANNELS],
        }
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        let scale = T::of(1.0 / 255.0);
        let data = bytes.iter().map(|&b| T::of(b as f64) * scale).collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        self.data[(y * self.width + x) * CHANNELS + c] = v;
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.max(T::zero()).min(T::one());
        }
    }

    /// Bilinear resample of the window `[y0, y0+h) × [x0, x0+w)` onto an
    /// `out_h × out_w` grid, sampling at pixel centres.
    pub fn resized_crop(&self, y0: usize, x0: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Self {
        if h == out_h && w == out_w {
            let mut out = Self::filled(out_h, out_w, T::zero());
            for y in 0..h {
                let src = ((y0 + y) * self.width + x0) * CHANNELS;
                let dst = y * out_w * CHANNELS;
                out.data[dst..dst + w * CHANNELS].copy_from_slice(&self.data[src..src + w * CHANNELS]);
            }
            return out;
        }
        let mut out = Self::filled(out_h, out_w, T::zero());
        let sy = h as f64 / out_h as f64;
        let sx = w as f64 / out_w as f64;
        for oy in 0..out_h {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y_lo = fy.floor() as usize;
            let y_hi = (y_lo + 1).min(h - 1);
            let wy = T::of(fy - y_lo as f64);
            for ox in 0..out_w {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x_lo = fx.floor() as usize;
                let x_hi = (x_lo + 1).min(w - 1);
                let wx = T::of(fx - x_lo as f64);
                for c in 0..CHANNELS {
                    let a = self.at(y0 + y_lo, x0 + x_lo, c);
                    let b = self.at(y0 + y_lo, x0 + x_hi, c);
                    let cc = self.at(y0 + y_hi, x0 + x_lo, c);
                    let d = self.at(y0 + y_hi, x0 + x_hi, c);
                    let top = a + (b - a) * wx;
                    let bot = cc + (d - cc) * wx;
                    out.set(oy, ox, c, top + (bot - top) * wy);
                }
            }
        }
        out
    }

    pub fn resized(&self, out_h: usize, out_w: usize) -> Self {
        self.resized_crop(0, 0, self.height, self.width, out_h, out_w)
    }

    pub fn hflip(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..CHANNELS {
                    out.set(y, x, c, self.at(y, self.width - 1 - x, c));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_crop_is_identity() {
        let img = Image::<f32>::new(4, 4, (0..48).map(|v| v as f32 / 48.0).collect()).unwrap();
        assert_eq!(img.resized(4, 4), img);
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let img = Image::<f64>::filled(5, 7, 0.25);
        let out = img.resized_crop(1, 2, 3, 4, 8, 8);
        assert!(out.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn double_flip_is_identity() {
        let img = Image::<f32>::new(2, 3, (0..18).map(|v| v as f32).collect()).unwrap();
        assert_eq!(img.hflip().hflip(), img);
        assert_ne!(img.hflip(), img);
    }
}
