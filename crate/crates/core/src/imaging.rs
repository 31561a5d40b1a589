//! Planar float images and 8-bit PNG I/O.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

/// Planar `[channels, height, width]` image with values nominally in
/// `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(shape_err(format!("{} values for a {channels}x{height}x{width} image", data.len())));
        }
        Ok(Image { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Image { channels, height, width, data: vec![value; channels * height * width] }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.data.clone(), &[self.channels, self.height, self.width])
    }

    /// Accepts `[c, h, w]` or `[1, c, h, w]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        match s.len() {
            3 => Image::new(s[0], s[1], s[2], t.to_vec()),
            4 if s[0] == 1 => Image::new(s[1], s[2], s[3], t.to_vec()),
            _ => Err(shape_err(format!("cannot view tensor {s:?} as an image"))),
        }
    }

    /// Copy with every value clamped to `[0, 1]`.
    pub fn clamped(&self) -> Image {
        Image { data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(), ..self.clone() }
    }

    /// Box-filter downsampling by an integer factor.
    pub fn downsample(&self, factor: usize) -> Result<Image> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(invalid(format!("cannot downsample {}x{} by {factor}", self.height, self.width)));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = Image::filled(self.channels, h, w, 0.0);
        let inv = 1.0 / (factor * factor) as f64;
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += self.at(c, y * factor + dy, x * factor + dx);
                        }
                    }
                    out.set(c, y, x, acc * inv);
                }
            }
        }
        Ok(out)
    }

    /// Downsamples to `height x width` when the ratio is an integer.
    pub fn fit_to(&self, height: usize, width: usize) -> Result<Image> {
        if (self.height, self.width) == (height, width) {
            return Ok(self.clone());
        }
        if height == 0 || self.height % height != 0 || self.height / height != self.width / width.max(1) || self.width % width != 0 {
            return Err(invalid(format!(
                "cannot resize {}x{} to {height}x{width} by an integer factor",
                self.height, self.width
            )));
        }
        self.downsample(self.height / height)
    }

    pub fn crop(&self, row0: usize, col0: usize, height: usize, width: usize) -> Result<Image> {
        if row0 + height > self.height || col0 + width > self.width {
            return Err(invalid("crop outside image"));
        }
        let mut out = Image::filled(self.channels, height, width, 0.0);
        for c in 0..self.channels {
            for y in 0..height {
                for x in 0..width {
                    out.set(c, y, x, self.at(c, row0 + y, col0 + x));
                }
            }
        }
        Ok(out)
    }

    /// Channel mean, as a single-channel image.
    pub fn grayscale(&self) -> Image {
        let n = self.height * self.width;
        let mut data = vec![0.0; n];
        for c in 0..self.channels {
            for (d, v) in data.iter_mut().zip(&self.data[c * n..(c + 1) * n]) {
                *d += v;
            }
        }
        let inv = 1.0 / self.channels as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        Image { channels: 1, height: self.height, width: self.width, data }
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an RGB or grayscale PNG; values are clamped to `[0, 1]` and
/// scaled to 8 bits.
pub fn save_png(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = (img.height as u32, img.width as u32);
    match img.channels {
        3 => {
            let buf: RgbImage = ImageBuffer::from_fn(w, h, |x, y| {
                Rgb([0, 1, 2].map(|c| to_u8(img.at(c, y as usize, x as usize))))
            });
            buf.save(path)?;
        }
        1 => {
            let buf: GrayImage = ImageBuffer::from_fn(w, h, |x, y| Luma([to_u8(img.at(0, y as usize, x as usize))]));
            buf.save(path)?;
        }
        c => return Err(invalid(format!("cannot write a {c}-channel PNG"))),
    }
    Ok(())
}

/// Reads a PNG as an RGB image in `[0, 1]`.
pub fn load_rgb(path: impl AsRef<Path>) -> Result<Image> {
    let buf = image::open(path)?.to_rgb8();
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let mut img = Image::filled(3, h, w, 0.0);
    for (x, y, p) in buf.enumerate_pixels() {
        for c in 0..3 {
            img.set(c, y as usize, x as usize, p[c] as f64 / 255.0);
        }
    }
    Ok(img)
}

/// Reads a PNG as a single-channel image in `[0, 1]`.
pub fn load_gray(path: impl AsRef<Path>) -> Result<Image> {
    let buf = image::open(path)?.to_luma8();
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let mut img = Image::filled(1, h, w, 0.0);
    for (x, y, p) in buf.enumerate_pixels() {
        img.set(0, y as usize, x as usize, p[0] as f64 / 255.0);
    }
    Ok(img)
}
