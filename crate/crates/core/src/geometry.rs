//! Coordinate transforms: rotation of sensor-local clouds into the global
//! orientation, height-binned bird's-eye-view projection, and integer
//! translation of feature maps between vehicle grids.
//!
//! Conventions:
//! * right-handed frame, angles counter-clockwise positive;
//! * points are row vectors, `p_world = p_local * Rx(roll) * Ry(pitch) * Rz(yaw)`;
//! * rotation only: translation between vehicles happens on feature maps;
//! * the global pixel frame is anchored at the world origin, so a pose at
//!   `x` meters sits at pixel `x * ppm`.

use std::f64::consts::PI;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::GeometryError;
use crate::scalar::Scalar;

/// Wrap an angle into `(-pi, pi]`.
pub fn normalize_angle<T: Scalar>(a: T) -> T {
    let two_pi = T::lit(2.0 * PI);
    let pi = T::lit(PI);
    if a > -pi && a <= pi {
        return a;
    }
    let r = a - two_pi * ((a - pi) / two_pi).ceil();
    // Rounding can land exactly on -pi.
    if r <= -pi {
        r + two_pi
    } else {
        r
    }
}

/// Sensor/vehicle pose in the global frame. Meters and radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl Pose {
    /// Ground-vehicle pose: roll = pitch = 0, sensor at ground level.
    pub fn planar(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, z: 0.0, roll: 0.0, pitch: 0.0, yaw: normalize_angle(yaw) }
    }

    pub fn normalized(self) -> Self {
        Self {
            roll: normalize_angle(self.roll),
            pitch: normalize_angle(self.pitch),
            yaw: normalize_angle(self.yaw),
            ..self
        }
    }

    /// Position in the global pixel frame at `ppm` pixels per meter.
    pub fn pixel_position(&self, ppm: f64) -> (f64, f64) {
        (self.x * ppm, self.y * ppm)
    }
}

/// Sensor-local 3D points.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud<T> {
    pub points: Vec<[T; 3]>,
}

impl<T: Scalar> PointCloud<T> {
    pub fn new(points: Vec<[T; 3]>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> PointCloud<U> {
        PointCloud {
            points: self
                .points
                .iter()
                .map(|p| p.map(|v| U::lit(v.as_f64())))
                .collect(),
        }
    }
}

type Mat3 = [[f64; 3]; 3];

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Row-vector rotation about +x.
pub fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, s], [0.0, -s, c]]
}

/// Row-vector rotation about +y.
pub fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]]
}

/// Row-vector rotation about +z. `[1, 0, 0] * rot_z(pi/2) = [0, 1, 0]`.
pub fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Composed local-to-global rotation `Rx(roll) Ry(pitch) Rz(yaw)`.
pub fn rotation_matrix(pose: &Pose) -> Mat3 {
    mat_mul(&mat_mul(&rot_x(pose.roll), &rot_y(pose.pitch)), &rot_z(pose.yaw))
}

/// Rotate a sensor-local cloud into the global orientation. No translation.
pub fn rotate_to_global<T: Scalar>(cloud: &PointCloud<T>, pose: &Pose) -> PointCloud<T> {
    let m = rotation_matrix(pose).map(|row| row.map(T::lit));
    let points = cloud
        .points
        .iter()
        .map(|p| {
            let mut out = [T::zero(); 3];
            for (j, o) in out.iter_mut().enumerate() {
                *o = p[0] * m[0][j] + p[1] * m[1][j] + p[2] * m[2][j];
            }
            out
        })
        .collect();
    PointCloud { points }
}

/// Square BEV raster centred on the sensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevGrid {
    /// Half-width of the covered square, meters.
    pub extent_m: f64,
    /// Pixels per side (H = W).
    pub size: usize,
    /// Upper edges of the first two height bins; bins are `[-inf, e0)`,
    /// `[e0, e1)`, `[e1, inf)`.
    pub bin_edges: [f64; 2],
    /// Per-cell count that saturates to 1.0. `None` keeps raw counts.
    pub n_max: Option<f64>,
}

impl BevGrid {
    pub const CHANNELS: usize = 3;

    pub fn new(extent_m: f64, size: usize) -> Result<Self, GeometryError> {
        let grid = Self { extent_m, size, bin_edges: [2.0, 4.0], n_max: Some(32.0) };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.extent_m > 0.0 && self.extent_m.is_finite()) {
            return Err(GeometryError::InvalidGrid(format!("extent {}", self.extent_m)));
        }
        if self.size == 0 {
            return Err(GeometryError::InvalidGrid("zero size".into()));
        }
        if !(self.bin_edges[0] < self.bin_edges[1]) {
            return Err(GeometryError::InvalidGrid(format!("bin edges {:?}", self.bin_edges)));
        }
        if let Some(n) = self.n_max {
            if !(n > 0.0) {
                return Err(GeometryError::InvalidGrid(format!("n_max {n}")));
            }
        }
        Ok(())
    }

    /// Pixels per meter.
    pub fn resolution(&self) -> f64 {
        self.size as f64 / (2.0 * self.extent_m)
    }

    /// Pixel `(col, row)` for a planar position, `None` outside the extent.
    pub fn pixel_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let res = self.resolution();
        let col = ((x + self.extent_m) * res).floor();
        let row = ((y + self.extent_m) * res).floor();
        let n = self.size as f64;
        if col >= 0.0 && col < n && row >= 0.0 && row < n {
            Some((col as usize, row as usize))
        } else {
            None
        }
    }

    pub fn height_bin(&self, z: f64) -> usize {
        if z < self.bin_edges[0] {
            0
        } else if z < self.bin_edges[1] {
            1
        } else {
            2
        }
    }
}

/// Height-binned density image, stored channel-major `[bin][row][col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BevImage<T> {
    pub grid: BevGrid,
    pub data: Vec<T>,
}

impl<T: Scalar> BevImage<T> {
    pub fn zeros(grid: BevGrid) -> Self {
        Self { grid, data: vec![T::zero(); BevGrid::CHANNELS * grid.size * grid.size] }
    }

    pub fn get(&self, bin: usize, row: usize, col: usize) -> T {
        let n = self.grid.size;
        self.data[(bin * n + row) * n + col]
    }
}

/// Project a rotation-aligned cloud onto the BEV grid.
pub fn project_bev<T: Scalar>(cloud: &PointCloud<T>, grid: &BevGrid) -> BevImage<T> {
    let n = grid.size;
    let mut img = BevImage::zeros(*grid);
    for p in &cloud.points {
        if let Some((col, row)) = grid.pixel_of(p[0].as_f64(), p[1].as_f64()) {
            let bin = grid.height_bin(p[2].as_f64());
            img.data[(bin * n + row) * n + col] += T::one();
        }
    }
    if let Some(n_max) = grid.n_max {
        let inv = T::lit(1.0 / n_max);
        for v in &mut img.data {
            *v = Float::min(*v * inv, T::one());
        }
    }
    img
}

/// `C x H_f x W_f` activation grid produced by a feature extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Downsampling factor from BEV pixels to feature cells.
    pub stride: usize,
    pub data: Vec<T>,
    pub origin: Pose,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn zeros(channels: usize, height: usize, width: usize, stride: usize, origin: Pose) -> Self {
        Self {
            channels,
            height,
            width,
            stride,
            data: vec![T::zero(); channels * height * width],
            origin,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> T {
        self.data[(c * self.height + row) * self.width + col]
    }
}

/// Cell offset `(dx, dy)` of the coop grid relative to the ego grid:
/// `floor(x_e / s) - floor(x_c / s)` on global pixel positions.
pub fn cell_offset(ego: &Pose, coop: &Pose, ppm: f64, stride: usize) -> (i64, i64) {
    let s = stride as f64;
    let (xe, ye) = ego.pixel_position(ppm);
    let (xc, yc) = coop.pixel_position(ppm);
    let dx = (xe / s).floor() - (xc / s).floor();
    let dy = (ye / s).floor() - (yc / s).floor();
    (dx as i64, dy as i64)
}

/// `out(x, y) = f(x + dx, y + dy)`, zero where the source falls outside.
pub fn shift_featuremap<T: Scalar>(f: &FeatureMap<T>, dx: i64, dy: i64) -> FeatureMap<T> {
    let mut out = FeatureMap::zeros(f.channels, f.height, f.width, f.stride, f.origin);
    shift_into(&f.data, &mut out.data, f.channels, f.height, f.width, dx, dy);
    out
}

pub(crate) fn shift_into<T: Scalar>(
    src: &[T],
    dst: &mut [T],
    channels: usize,
    height: usize,
    width: usize,
    dx: i64,
    dy: i64,
) {
    let (h, w) = (height as i64, width as i64);
    if dx.abs() >= w || dy.abs() >= h {
        return;
    }
    let x0 = (-dx).max(0);
    let x1 = (w - dx).min(w);
    let y0 = (-dy).max(0);
    let y1 = (h - dy).min(h);
    let span = (x1 - x0) as usize;
    for c in 0..channels {
        let base = c * height * width;
        for y in y0..y1 {
            let d = base + y as usize * width + x0 as usize;
            let s = base + (y + dy) as usize * width + (x0 + dx) as usize;
            dst[d..d + span].copy_from_slice(&src[s..s + span]);
        }
    }
}

/// Coop feature map re-expressed on the ego grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedMap<T> {
    pub map: FeatureMap<T>,
    pub offset: (i64, i64),
    /// False when the shift leaves no overlapping cells (map is all zero).
    pub overlap: bool,
}

/// Translate a received feature map into the ego vehicle's grid.
pub fn translate_featuremap<T: Scalar>(
    f: &FeatureMap<T>,
    ego: &Pose,
    coop: &Pose,
    ppm: f64,
) -> AlignedMap<T> {
    let (dx, dy) = cell_offset(ego, coop, ppm, f.stride);
    let overlap = dx.unsigned_abs() < f.width as u64 && dy.unsigned_abs() < f.height as u64;
    let mut map = shift_featuremap(f, dx, dy);
    map.origin = *ego;
    AlignedMap { map, offset: (dx, dy), overlap }
}
