//! Raster preprocessing: resize, patch cropping, Canny edges, SSIM.

mod canny;
mod ssim;

pub use canny::canny;
pub use ssim::ssim;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

use crate::{Error, Result};

/// H×W×C raster with values in [0,1]; C is 1 or 3, interleaved row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if width < 8 || height < 8 {
            return Err(Error::Dimension(format!(
                "image dimensions {width}x{height} below the 8px minimum"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Dimension(format!("{channels} channels unsupported")));
        }
        if values.len() != width * height * channels {
            return Err(Error::Dimension("value count does not match dimensions".into()));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Parameter("image values must lie in [0,1]".into()));
        }
        Ok(ImageBuffer {
            width,
            height,
            channels,
            values,
        })
    }

    pub fn constant(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.values[(y * self.width + x) * self.channels + c]
    }

    /// ITU-R 601 luma; identity for single-channel images.
    pub fn to_luma(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.values.clone();
        }
        let mut out = Vec::with_capacity(self.width * self.height);
        for p in self.values.chunks_exact(3) {
            out.push(0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]);
        }
        out
    }

    /// Replicate a single channel to three; identity on RGB input.
    pub fn to_rgb(&self) -> ImageBuffer {
        if self.channels == 3 {
            return self.clone();
        }
        let mut values = Vec::with_capacity(self.values.len() * 3);
        for &v in &self.values {
            values.extend_from_slice(&[v, v, v]);
        }
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: 3,
            values,
        }
    }

    pub fn read_png(path: &Path) -> Result<ImageBuffer> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let values = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
        ImageBuffer::new(w, h, 3, values)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let rgb = self.to_rgb();
        let bytes: Vec<u8> = rgb
            .values
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::Image("buffer size mismatch".into()))?;
        img.save(path)?;
        Ok(())
    }
}

/// Binary edge raster, same dimensions as its source image.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap {
    pub width: usize,
    pub height: usize,
    /// strictly {0,1}
    pub values: Vec<u8>,
}

impl EdgeMap {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.values[y * self.width + x]
    }

    /// View as a 1-channel [0,1] image for the patch embedder.
    pub fn to_image(&self) -> Result<ImageBuffer> {
        ImageBuffer::new(
            self.width,
            self.height,
            1,
            self.values.iter().map(|&v| v as f64).collect(),
        )
    }

    /// 3×3 binary dilation.
    pub fn dilate(&self) -> EdgeMap {
        let (w, h) = (self.width, self.height);
        let mut out = vec![0u8; w * h];
        for y in 0..h {
            for x in 0..w {
                'probe: for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if nx >= 0
                            && ny >= 0
                            && (nx as usize) < w
                            && (ny as usize) < h
                            && self.get(nx as usize, ny as usize) == 1
                        {
                            out[y * w + x] = 1;
                            break 'probe;
                        }
                    }
                }
            }
        }
        EdgeMap {
            width: w,
            height: h,
            values: out,
        }
    }
}

/// Bilinear resize with half-pixel-center coordinates, clamped to [0,1].
pub fn resize_bilinear(img: &ImageBuffer, new_w: usize, new_h: usize) -> Result<ImageBuffer> {
    if new_w < 8 || new_h < 8 {
        return Err(Error::Dimension(format!(
            "target size {new_w}x{new_h} below the 8px minimum"
        )));
    }
    let (w, h, c) = (img.width, img.height, img.channels);
    let sx = w as f64 / new_w as f64;
    let sy = h as f64 / new_h as f64;
    let mut values = vec![0.0; new_w * new_h * c];
    for oy in 0..new_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..new_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ch in 0..c {
                let v = img.get(x0, y0, ch) * (1.0 - wx) * (1.0 - wy)
                    + img.get(x1, y0, ch) * wx * (1.0 - wy)
                    + img.get(x0, y1, ch) * (1.0 - wx) * wy
                    + img.get(x1, y1, ch) * wx * wy;
                values[(oy * new_w + ox) * c + ch] = v.clamp(0.0, 1.0);
            }
        }
    }
    ImageBuffer::new(new_w, new_h, c, values)
}

/// Crop `n` square patches at uniformly sampled top-left offsets.
pub fn crop_patches(
    img: &ImageBuffer,
    patch_size: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<ImageBuffer>> {
    if patch_size > img.width || patch_size > img.height {
        return Err(Error::Dimension(format!(
            "patch size {patch_size} exceeds image {}x{}",
            img.width, img.height
        )));
    }
    if n < 1 {
        return Err(Error::Parameter("patch count must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let x0 = rng.gen_range(0..=img.width - patch_size);
        let y0 = rng.gen_range(0..=img.height - patch_size);
        out.push(crop(img, x0, y0, patch_size, patch_size)?);
    }
    Ok(out)
}

pub fn crop(img: &ImageBuffer, x0: usize, y0: usize, w: usize, h: usize) -> Result<ImageBuffer> {
    if x0 + w > img.width || y0 + h > img.height {
        return Err(Error::Dimension("crop window out of bounds".into()));
    }
    let c = img.channels;
    let mut values = Vec::with_capacity(w * h * c);
    for y in y0..y0 + h {
        let start = (y * img.width + x0) * c;
        values.extend_from_slice(&img.values[start..start + w * c]);
    }
    ImageBuffer::new(w, h, c, values)
}
