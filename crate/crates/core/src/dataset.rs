//! Synchronized multi-view frames on disk.
//!
//! Layout: `<root>/<camera_name>/frame_<index>.png` (8-bit RGB) and
//! `<root>/<camera_name>/mask_<index>.png` (8-bit grayscale), with the index
//! zero-padded to five digits. Mask pixels `>= 128` are foreground.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::camera::CameraRig;
use crate::imaging::{ColorImage, ImageIoError, Mask};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{path}: expected {expected_w}x{expected_h}, found {found_w}x{found_h}")]
    DimensionMismatch {
        path: PathBuf,
        expected_w: usize,
        expected_h: usize,
        found_w: usize,
        found_h: usize,
    },
    #[error("cannot decode {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Write(#[from] ImageIoError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl DatasetError {
    pub fn code(&self) -> &'static str {
        match self {
            DatasetError::MissingFile(_) => "MissingFile",
            DatasetError::DimensionMismatch { .. } => "DimensionMismatch",
            DatasetError::Decode { .. } => "DecodeError",
            DatasetError::Write(_) | DatasetError::Io(_) => "IoError",
        }
    }
}

/// One time step: an image and a mask per camera, in rig order.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSet {
    pub index: usize,
    pub images: Vec<ColorImage>,
    pub masks: Vec<Mask>,
}

pub const MASK_THRESHOLD: u8 = 128;

pub fn frame_path(root: &Path, camera: &str, index: usize) -> PathBuf {
    root.join(camera).join(format!("frame_{index:05}.png"))
}

pub fn mask_path(root: &Path, camera: &str, index: usize) -> PathBuf {
    root.join(camera).join(format!("mask_{index:05}.png"))
}

fn open(path: &Path) -> Result<image::DynamicImage, DatasetError> {
    if !path.is_file() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    image::open(path).map_err(|source| DatasetError::Decode {
        path: path.to_path_buf(),
        source,
    })
}

fn check_dims(path: &Path, w: u32, h: u32, width: usize, height: usize) -> Result<(), DatasetError> {
    if w as usize != width || h as usize != height {
        return Err(DatasetError::DimensionMismatch {
            path: path.to_path_buf(),
            expected_w: width,
            expected_h: height,
            found_w: w as usize,
            found_h: h as usize,
        });
    }
    Ok(())
}

/// Binarize an 8-bit grayscale mask at `MASK_THRESHOLD`.
pub fn binarize(gray: &image::GrayImage) -> Mask {
    let (w, h) = gray.dimensions();
    Mask {
        width: w as usize,
        height: h as usize,
        data: gray.pixels().map(|p| u8::from(p.0[0] >= MASK_THRESHOLD)).collect(),
    }
}

pub fn load_frame(root: &Path, index: usize, rig: &CameraRig) -> Result<FrameSet, DatasetError> {
    let mut images = Vec::with_capacity(rig.len());
    let mut masks = Vec::with_capacity(rig.len());
    for (name, cam) in rig.names().iter().zip(rig.cameras()) {
        let fpath = frame_path(root, name, index);
        // alpha, if present, is dropped here
        let rgb = open(&fpath)?.to_rgb8();
        check_dims(&fpath, rgb.width(), rgb.height(), cam.width, cam.height)?;
        images.push(ColorImage::from_rgb8(&rgb));

        let mpath = mask_path(root, name, index);
        let gray = open(&mpath)?.to_luma8();
        check_dims(&mpath, gray.width(), gray.height(), cam.width, cam.height)?;
        masks.push(binarize(&gray));
    }
    Ok(FrameSet { index, images, masks })
}

pub fn write_frame(root: &Path, frame: &FrameSet, rig: &CameraRig) -> Result<(), DatasetError> {
    for ((name, image), mask) in rig.names().iter().zip(&frame.images).zip(&frame.masks) {
        std::fs::create_dir_all(root.join(name))?;
        image.save_png(&frame_path(root, name, frame.index))?;
        mask.save_png(&mask_path(root, name, frame.index))?;
    }
    Ok(())
}

/// Mean `(u, v) = (col, row)` of the foreground pixels, or `None` for an empty mask.
pub fn mask_centroid(mask: &Mask) -> Option<(f64, f64)> {
    let mut sum_u = 0.0;
    let mut sum_v = 0.0;
    let mut count = 0usize;
    for row in 0..mask.height {
        let line = &mask.data[row * mask.width..(row + 1) * mask.width];
        for (col, &m) in line.iter().enumerate() {
            if m != 0 {
                sum_u += col as f64;
                sum_v += row as f64;
                count += 1;
            }
        }
    }
    (count > 0).then(|| (sum_u / count as f64, sum_v / count as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_boundary() {
        let mut gray = image::GrayImage::new(3, 1);
        gray.put_pixel(0, 0, image::Luma([127]));
        gray.put_pixel(1, 0, image::Luma([128]));
        gray.put_pixel(2, 0, image::Luma([0]));
        assert_eq!(binarize(&gray).data, vec![0, 1, 0]);
    }

    #[test]
    fn centroid_single_pixel() {
        let mut m = Mask::empty(32, 32);
        m.set(20, 10, true);
        assert_eq!(mask_centroid(&m), Some((10.0, 20.0)));
    }

    #[test]
    fn centroid_of_rectangle() {
        let mut m = Mask::empty(40, 30);
        for r in 0..10 {
            for c in 0..20 {
                m.set(r, c, true);
            }
        }
        assert_eq!(mask_centroid(&m), Some((9.5, 4.5)));
    }

    #[test]
    fn empty_mask_has_no_centroid() {
        assert_eq!(mask_centroid(&Mask::empty(5, 5)), None);
    }
}
