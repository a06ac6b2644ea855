//! Volume files.
//!
//! `<name>.bin` holds `dims[0] * dims[1] * dims[2] * 4` little-endian `f32`
//! values in (x, y, z, channel) order: x outermost, channel innermost, channels
//! `occupancy, r, g, b`. The sidecar `<name>.toml` carries the placement.

use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{CarveError, GridSpec, VoxelGrid};

pub const CHANNELS: [&str; 4] = ["occupancy", "r", "g", "b"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub base_resolution: usize,
    pub start: [usize; 3],
    pub edge: f64,
    pub center: [f64; 3],
    pub azimuth: f64,
    pub channels: Vec<String>,
}

impl VolumeHeader {
    pub fn from_spec(spec: &GridSpec) -> Self {
        Self {
            dims: spec.dims,
            base_resolution: spec.base_resolution,
            start: spec.start,
            edge: spec.edge,
            center: [spec.center.x, spec.center.y, spec.center.z],
            azimuth: spec.azimuth,
            channels: CHANNELS.iter().map(|c| c.to_string()).collect(),
        }
    }

    pub fn spec(&self) -> GridSpec {
        GridSpec {
            base_resolution: self.base_resolution,
            start: self.start,
            dims: self.dims,
            edge: self.edge,
            center: Vector3::from(self.center),
            azimuth: self.azimuth,
        }
    }
}

pub fn header_path(bin: &Path) -> PathBuf {
    bin.with_extension("toml")
}

fn file_err(path: &Path, message: impl ToString) -> CarveError {
    CarveError::VolumeFile {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

pub fn encode_volume(grid: &VoxelGrid) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(grid.occupancy.len() * 16);
    for (occ, rgb) in grid.occupancy.iter().zip(&grid.color) {
        bytes.extend_from_slice(&occ.to_le_bytes());
        for c in rgb {
            bytes.extend_from_slice(&c.to_le_bytes());
        }
    }
    bytes
}

/// Writes `<path>` and its `.toml` sidecar.
pub fn write_volume(path: &Path, grid: &VoxelGrid) -> Result<(), CarveError> {
    let header = toml::to_string(&VolumeHeader::from_spec(&grid.spec)).map_err(|e| file_err(path, e))?;
    let hpath = header_path(path);
    std::fs::write(&hpath, header).map_err(|e| file_err(&hpath, e))?;
    let mut f = std::fs::File::create(path).map_err(|e| file_err(path, e))?;
    f.write_all(&encode_volume(grid)).map_err(|e| file_err(path, e))?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<VoxelGrid, CarveError> {
    let hpath = header_path(path);
    let text = std::fs::read_to_string(&hpath).map_err(|e| file_err(&hpath, e))?;
    let header: VolumeHeader = toml::from_str(&text).map_err(|e| file_err(&hpath, e))?;
    if header.channels != CHANNELS {
        return Err(file_err(&hpath, format!("unexpected channels {:?}", header.channels)));
    }
    let spec = header.spec();
    spec.validate()?;
    let bytes = std::fs::read(path).map_err(|e| file_err(path, e))?;
    if bytes.len() != spec.len() * 16 {
        return Err(file_err(
            path,
            format!("expected {} bytes, found {}", spec.len() * 16, bytes.len()),
        ));
    }
    let mut grid = VoxelGrid::empty(spec);
    for (v, chunk) in bytes.chunks_exact(16).enumerate() {
        let f = |o: usize| f32::from_le_bytes([chunk[o], chunk[o + 1], chunk[o + 2], chunk[o + 3]]);
        grid.occupancy[v] = f(0);
        grid.color[v] = [f(4), f(8), f(12)];
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout_is_x_major_channel_minor() {
        let spec = GridSpec {
            dims: [2, 1, 2],
            ..GridSpec::cube(4, 0.5, Vector3::zeros(), 0.0)
        };
        let mut grid = VoxelGrid::empty(spec);
        // voxel (1, 0, 0) is the third record
        let idx = grid.spec.index(1, 0, 0);
        assert_eq!(idx, 2);
        grid.occupancy[idx] = 0.5;
        grid.color[idx] = [0.25, 0.5, 1.0];
        let bytes = encode_volume(&grid);
        assert_eq!(bytes.len(), 4 * 16);
        assert_eq!(&bytes[32..36], &0.5f32.to_le_bytes());
        assert_eq!(&bytes[44..48], &1.0f32.to_le_bytes());
    }

    #[test]
    fn round_trip() {
        let spec = GridSpec::cube(8, 0.125, Vector3::new(0.1, -0.2, 0.3), 1.25).truncated(&[1..5, 0..8, 2..5]);
        let mut grid = VoxelGrid::empty(spec);
        for (i, o) in grid.occupancy.iter_mut().enumerate() {
            *o = [0.0, 0.5, 1.0][i % 3];
        }
        for (i, c) in grid.color.iter_mut().enumerate() {
            *c = [i as f32 / 100.0, 0.5, 0.25];
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.bin");
        write_volume(&path, &grid).unwrap();
        assert_eq!(read_volume(&path).unwrap(), grid);
    }
}
