//! Plain image buffers shared by the dataset loader, the rasterizer and the metrics.
//!
//! All buffers are row-major. Pixel `(row, col)` has its center at continuous
//! image coordinates `(u, v) = (col, row)`; the top-left pixel center is the origin.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("image file {path}: {source}")]
    Codec {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Three-channel image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl ColorImage {
    pub fn filled(width: usize, height: usize, color: [f64; 3]) -> Self {
        Self {
            width,
            height,
            data: vec![color; width * height],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> [f64; 3] {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: [f64; 3]) {
        self.data[row * self.width + col] = value;
    }

    /// Copy of the image with every pixel outside `mask` replaced by white.
    pub fn whitened(&self, mask: &Mask) -> ColorImage {
        let data = self
            .data
            .iter()
            .zip(&mask.data)
            .map(|(px, &m)| if m != 0 { *px } else { [1.0; 3] })
            .collect();
        ColorImage {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let mut out = image::RgbImage::new(self.width as u32, self.height as u32);
        for (i, px) in self.data.iter().enumerate() {
            let (x, y) = ((i % self.width) as u32, (i / self.width) as u32);
            out.put_pixel(x, y, image::Rgb(px.map(quantize)));
        }
        out
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img
            .pixels()
            .map(|p| p.0.map(|c| f64::from(c) / 255.0))
            .collect();
        Self {
            width: w as usize,
            height: h as usize,
            data,
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageIoError> {
        self.to_rgb8().save(path).map_err(|source| ImageIoError::Codec {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Binary silhouette, values strictly 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![1; width * height],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] != 0
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = u8::from(value);
    }

    /// Nearest-pixel lookup at continuous coordinates; `None` outside the image.
    #[inline]
    pub fn sample(&self, u: f64, v: f64) -> Option<bool> {
        pixel_index(u, v, self.width, self.height).map(|i| self.data[i] != 0)
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&m| m != 0).count()
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageIoError> {
        let mut out = image::GrayImage::new(self.width as u32, self.height as u32);
        for (i, &m) in self.data.iter().enumerate() {
            let (x, y) = ((i % self.width) as u32, (i / self.width) as u32);
            out.put_pixel(x, y, image::Luma([if m != 0 { 255 } else { 0 }]));
        }
        out.save(path).map_err(|source| ImageIoError::Codec {
            path: path.display().to_string(),
            source,
        })
    }
}

/// RGBA render output: RGB composited over the background, alpha = accumulated coverage.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 4]>,
}

impl RenderedImage {
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> [f64; 4] {
        self.data[row * self.width + col]
    }

    pub fn rgb(&self) -> ColorImage {
        ColorImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|p| [p[0], p[1], p[2]]).collect(),
        }
    }

    pub fn coverage(&self) -> Vec<f64> {
        self.data.iter().map(|p| p[3]).collect()
    }

    /// Coverage binarized at 0.5.
    pub fn silhouette(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|p| u8::from(p[3] >= 0.5)).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageIoError> {
        let mut out = image::RgbaImage::new(self.width as u32, self.height as u32);
        for (i, px) in self.data.iter().enumerate() {
            let (x, y) = ((i % self.width) as u32, (i / self.width) as u32);
            out.put_pixel(x, y, image::Rgba(px.map(quantize)));
        }
        out.save(path).map_err(|source| ImageIoError::Codec {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Linear index of the pixel nearest to `(u, v)`, if it lies inside a `width`×`height` image.
#[inline]
pub fn pixel_index(u: f64, v: f64, width: usize, height: usize) -> Option<usize> {
    let col = (u + 0.5).floor();
    let row = (v + 0.5).floor();
    let inside = col >= 0.0 && row >= 0.0 && col < width as f64 && row < height as f64;
    if !inside {
        return None;
    }
    Some(row as usize * width + col as usize)
}

#[inline]
pub fn quantize(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_index_uses_centered_convention() {
        assert_eq!(pixel_index(0.0, 0.0, 4, 3), Some(0));
        assert_eq!(pixel_index(-0.49, 0.49, 4, 3), Some(0));
        assert_eq!(pixel_index(-0.51, 0.0, 4, 3), None);
        assert_eq!(pixel_index(3.49, 2.49, 4, 3), Some(11));
        assert_eq!(pixel_index(3.5, 0.0, 4, 3), None);
        assert_eq!(pixel_index(f64::NAN, 0.0, 4, 3), None);
    }

    #[test]
    fn whitening_replaces_background_only() {
        let mut img = ColorImage::filled(2, 1, [0.2, 0.3, 0.4]);
        img.set(0, 1, [0.0, 0.0, 0.0]);
        let mut mask = Mask::empty(2, 1);
        mask.set(0, 0, true);
        let w = img.whitened(&mask);
        assert_eq!(w.get(0, 0), [0.2, 0.3, 0.4]);
        assert_eq!(w.get(0, 1), [1.0; 3]);
    }
}
