//! `FSCD` dataset files.
//!
//! Layout (little-endian):
//! ```text
//! header:  "FSCD" | version u16 | range f64 | azimuth_step f64 | noise f64
//!          | n_elev u16 | n_elev x f64 | record count u32
//! record:  seed u64 | ego pose 6 x f64 | coop pose 6 x f64 | occluded i32
//!          | n_targets u32 | n_targets x (cx, cy, w, l, yaw, height) f64
//!          | n_obstacles u32 | n_obstacles x 6 f64
//!          | ego point count u32 | ego points 3 x f32
//!          | coop point count u32 | coop points 3 x f32
//! ```
//! Poses are `(x, y, z, roll, pitch, yaw)`.

use std::fs;
use std::path::Path;

use super::{LidarSpec, Scene, VehicleBox};
use crate::detect_eval::OrientedBox;
use crate::error::DatasetError;
use crate::geometry::{PointCloud, Pose};

pub const DATASET_MAGIC: &[u8; 4] = b"FSCD";
pub const DATASET_VERSION: u16 = 1;
/// Header bytes excluding the elevation list.
pub const HEADER_FIXED_SIZE: usize = 4 + 2 + 8 * 3 + 2 + 4;

/// One frame: the scene (which carries the labels) and both sweeps.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub scene: Scene,
    pub ego_cloud: PointCloud<f32>,
    pub coop_cloud: PointCloud<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub lidar: LidarSpec,
    pub samples: Vec<Sample>,
}

/// Encoded size of one record.
pub fn record_size(sample: &Sample) -> usize {
    let s = &sample.scene;
    8 + 2 * 48 + 4 + 4 + 48 * s.targets.len() + 4 + 48 * s.static_obstacles.len()
        + 4 + 12 * sample.ego_cloud.len() + 4 + 12 * sample.coop_cloud.len()
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_pose(buf: &mut Vec<u8>, p: &Pose) {
    for v in [p.x, p.y, p.z, p.roll, p.pitch, p.yaw] {
        put_f64(buf, v);
    }
}

fn put_boxes(buf: &mut Vec<u8>, boxes: &[VehicleBox]) {
    buf.extend_from_slice(&(boxes.len() as u32).to_le_bytes());
    for b in boxes {
        let f = &b.footprint;
        for v in [f.cx, f.cy, f.w, f.l, f.yaw, b.height] {
            put_f64(buf, v);
        }
    }
}

fn put_cloud(buf: &mut Vec<u8>, c: &PointCloud<f32>) {
    buf.extend_from_slice(&(c.len() as u32).to_le_bytes());
    for p in &c.points {
        for v in p {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    put_f64(&mut buf, ds.lidar.range_m);
    put_f64(&mut buf, ds.lidar.azimuth_step);
    put_f64(&mut buf, ds.lidar.noise_sigma);
    buf.extend_from_slice(&(ds.lidar.elevation_samples.len() as u16).to_le_bytes());
    for &h in &ds.lidar.elevation_samples {
        put_f64(&mut buf, h);
    }
    buf.extend_from_slice(&(ds.samples.len() as u32).to_le_bytes());
    for s in &ds.samples {
        let sc = &s.scene;
        buf.extend_from_slice(&sc.seed.to_le_bytes());
        put_pose(&mut buf, &sc.ego_pose);
        put_pose(&mut buf, &sc.coop_pose);
        let occ = sc.occluded_target.map_or(-1, |i| i as i32);
        buf.extend_from_slice(&occ.to_le_bytes());
        put_boxes(&mut buf, &sc.targets);
        put_boxes(&mut buf, &sc.static_obstacles);
        put_cloud(&mut buf, &s.ego_cloud);
        put_cloud(&mut buf, &s.coop_cloud);
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: impl Into<String>) -> DatasetError {
        DatasetError::Parse { offset: self.pos, reason: reason.into() }
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N], DatasetError> {
        if self.buf.len() - self.pos < N {
            return Err(self.err(format!("unexpected end of data, wanted {N} bytes")));
        }
        let out: [u8; N] = self.buf[self.pos..self.pos + N].try_into().unwrap();
        self.pos += N;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, DatasetError> {
        Ok(u16::from_le_bytes(self.take()?))
    }

    fn u32(&mut self) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn i32(&mut self) -> Result<i32, DatasetError> {
        Ok(i32::from_le_bytes(self.take()?))
    }

    fn u64(&mut self) -> Result<u64, DatasetError> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64, DatasetError> {
        Ok(f64::from_le_bytes(self.take()?))
    }

    fn f32(&mut self) -> Result<f32, DatasetError> {
        Ok(f32::from_le_bytes(self.take()?))
    }

    /// Count prefix, checked against the bytes left so corrupt counts fail
    /// instead of allocating.
    fn count(&mut self, elem_size: usize) -> Result<usize, DatasetError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(elem_size) > self.buf.len() - self.pos {
            return Err(self.err(format!("count {n} exceeds remaining data")));
        }
        Ok(n)
    }

    fn pose(&mut self) -> Result<Pose, DatasetError> {
        Ok(Pose { x: self.f64()?, y: self.f64()?, z: self.f64()?, roll: self.f64()?, pitch: self.f64()?, yaw: self.f64()? })
    }

    fn boxes(&mut self) -> Result<Vec<VehicleBox>, DatasetError> {
        let n = self.count(48)?;
        (0..n)
            .map(|_| {
                let at = self.pos;
                let (cx, cy, w, l, yaw, height) = (self.f64()?, self.f64()?, self.f64()?, self.f64()?, self.f64()?, self.f64()?);
                if !(w > 0.0 && l > 0.0 && height > 0.0) {
                    return Err(DatasetError::Parse { offset: at, reason: "box with non-positive size".into() });
                }
                // Raw fields, no re-normalization, to keep round trips exact.
                Ok(VehicleBox { footprint: OrientedBox { cx, cy, w, l, yaw }, height })
            })
            .collect()
    }

    fn cloud(&mut self) -> Result<PointCloud<f32>, DatasetError> {
        let n = self.count(12)?;
        let mut points = Vec::with_capacity(n);
        for _ in 0..n {
            points.push([self.f32()?, self.f32()?, self.f32()?]);
        }
        Ok(PointCloud::new(points))
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset, DatasetError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take::<4>()? != *DATASET_MAGIC {
        return Err(DatasetError::Parse { offset: 0, reason: "bad magic".into() });
    }
    let version = r.u16()?;
    if version != DATASET_VERSION {
        return Err(DatasetError::Parse { offset: 4, reason: format!("unsupported version {version}") });
    }
    let (range_m, azimuth_step, noise_sigma) = (r.f64()?, r.f64()?, r.f64()?);
    let n_elev = r.u16()? as usize;
    let elevation_samples = (0..n_elev).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
    let lidar = LidarSpec { range_m, azimuth_step, elevation_samples, noise_sigma };
    let n = r.count(8 + 96 + 4 + 4 + 4 + 4 + 4)?;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let seed = r.u64()?;
        let ego_pose = r.pose()?;
        let coop_pose = r.pose()?;
        let occ_at = r.pos;
        let occ = r.i32()?;
        let targets = r.boxes()?;
        let occluded_target = match occ {
            -1 => None,
            i if i >= 0 && (i as usize) < targets.len() => Some(i as usize),
            i => return Err(DatasetError::Parse { offset: occ_at, reason: format!("occluded index {i} out of range") }),
        };
        let static_obstacles = r.boxes()?;
        let ego_cloud = r.cloud()?;
        let coop_cloud = r.cloud()?;
        samples.push(Sample {
            scene: Scene { ego_pose, coop_pose, targets, static_obstacles, seed, occluded_target },
            ego_cloud,
            coop_cloud,
        });
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes after last record"));
    }
    Ok(Dataset { lidar, samples })
}

pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    fs::write(path, encode_dataset(ds))?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    decode_dataset(&fs::read(path)?)
}
