use std::ops::Range;

use nalgebra::{Matrix3, Vector3};

use super::CarveError;

pub const DEFAULT_RESOLUTION: usize = 112;

/// Oriented cubic lattice. The first axis follows the heading `azimuth` in the
/// horizontal plane, the third axis is world +z. A grid may be a truncated
/// window (`start`, `dims`) of the full `base_resolution`³ lattice; voxel
/// positions are always measured on the full lattice, so truncation does not
/// move voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub base_resolution: usize,
    pub start: [usize; 3],
    pub dims: [usize; 3],
    /// Voxel edge length in world units.
    pub edge: f64,
    pub center: Vector3<f64>,
    pub azimuth: f64,
}

impl GridSpec {
    pub fn cube(base_resolution: usize, edge: f64, center: Vector3<f64>, azimuth: f64) -> Self {
        Self {
            base_resolution,
            start: [0; 3],
            dims: [base_resolution; 3],
            edge,
            center,
            azimuth,
        }
    }

    pub fn validate(&self) -> Result<(), CarveError> {
        let bad = |msg: String| Err(CarveError::InvalidGrid(msg));
        if !(self.edge > 0.0 && self.edge.is_finite()) {
            return bad(format!("edge length must be positive, got {}", self.edge));
        }
        for axis in 0..3 {
            if self.dims[axis] == 0 {
                return bad(format!("axis {axis} has zero length"));
            }
            if self.start[axis] + self.dims[axis] > self.base_resolution {
                return bad(format!(
                    "axis {axis} window {}..{} exceeds base resolution {}",
                    self.start[axis],
                    self.start[axis] + self.dims[axis],
                    self.base_resolution
                ));
            }
        }
        if !self.center.iter().all(|c| c.is_finite()) || !self.azimuth.is_finite() {
            return bad("non-finite center or azimuth".into());
        }
        Ok(())
    }

    /// The same placement restricted to a sub-window of the base lattice.
    pub fn truncated(&self, ranges: &[Range<usize>; 3]) -> GridSpec {
        GridSpec {
            start: [ranges[0].start, ranges[1].start, ranges[2].start],
            dims: [ranges[0].len(), ranges[1].len(), ranges[2].len()],
            ..self.clone()
        }
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let k = index % self.dims[2];
        let j = (index / self.dims[2]) % self.dims[1];
        let i = index / (self.dims[1] * self.dims[2]);
        [i, j, k]
    }

    /// Columns are the grid axes expressed in world coordinates.
    pub fn axes(&self) -> Matrix3<f64> {
        let (s, c) = self.azimuth.sin_cos();
        Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
    }

    /// Grid-local offset of a voxel center from `center`, before rotation.
    #[inline]
    pub fn local_offset(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        let half = self.base_resolution as f64 / 2.0;
        let f = |idx: usize, axis: usize| ((self.start[axis] + idx) as f64 + 0.5 - half) * self.edge;
        Vector3::new(f(i, 0), f(j, 1), f(k, 2))
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.center + self.axes() * self.local_offset(i, j, k)
    }

    pub fn voxel_center_at(&self, index: usize) -> Vector3<f64> {
        let [i, j, k] = self.coords(index);
        self.voxel_center(i, j, k)
    }

    /// All voxel centers in linear index order.
    pub fn voxel_centers(&self) -> Vec<Vector3<f64>> {
        let axes = self.axes();
        (0..self.len())
            .map(|idx| {
                let [i, j, k] = self.coords(idx);
                self.center + axes * self.local_offset(i, j, k)
            })
            .collect()
    }

    /// Radius of the smallest sphere about `center` containing every voxel.
    pub fn bounding_radius(&self) -> f64 {
        let half = self.base_resolution as f64 / 2.0;
        let mut sq = 0.0;
        for axis in 0..3 {
            let lo = (self.start[axis] as f64 - half) * self.edge;
            let hi = ((self.start[axis] + self.dims[axis]) as f64 - half) * self.edge;
            sq += lo.abs().max(hi.abs()).powi(2);
        }
        sq.sqrt()
    }
}

/// Carved volume: occupancy in {0, 0.5, 1} and an RGB color per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub spec: GridSpec,
    pub occupancy: Vec<f32>,
    pub color: Vec<[f32; 3]>,
}

impl VoxelGrid {
    pub fn empty(spec: GridSpec) -> Self {
        let n = spec.len();
        Self {
            spec,
            occupancy: vec![0.0; n],
            color: vec![[0.0; 3]; n],
        }
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o > 0.0).count()
    }

    /// Crop to a sub-window given in base-lattice indices.
    pub fn crop(&self, ranges: &[Range<usize>; 3]) -> Result<VoxelGrid, CarveError> {
        let spec = self.spec.truncated(ranges);
        spec.validate()?;
        for axis in 0..3 {
            let lo = self.spec.start[axis];
            if ranges[axis].start < lo || ranges[axis].end > lo + self.spec.dims[axis] {
                return Err(CarveError::InvalidGrid(format!(
                    "crop window on axis {axis} lies outside the source grid"
                )));
            }
        }
        let mut out = VoxelGrid::empty(spec);
        for i in 0..out.spec.dims[0] {
            for j in 0..out.spec.dims[1] {
                for k in 0..out.spec.dims[2] {
                    let src = self.spec.index(
                        ranges[0].start - self.spec.start[0] + i,
                        ranges[1].start - self.spec.start[1] + j,
                        ranges[2].start - self.spec.start[2] + k,
                    );
                    let dst = out.spec.index(i, j, k);
                    out.occupancy[dst] = self.occupancy[src];
                    out.color[dst] = self.color[src];
                }
            }
        }
        Ok(out)
    }
}
