//! Synthetic two-vehicle scenes and a 2.5D occlusion-aware LIDAR.
//!
//! Rays are cast in the ground plane against box footprints; every planar
//! hit is replicated at the configured elevation samples up to the struck
//! box's height.

mod dataset;

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use dataset::{read_dataset, record_size, write_dataset, decode_dataset, encode_dataset, Dataset, Sample, DATASET_MAGIC, DATASET_VERSION, HEADER_FIXED_SIZE};

use crate::detect_eval::{intersection_area, OrientedBox};
use crate::error::SceneError;
use crate::geometry::{rotation_matrix, PointCloud, Pose};

pub const CAR_HEIGHT: f64 = 1.6;

/// A box-shaped body standing on the ground.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleBox {
    pub footprint: OrientedBox<f64>,
    pub height: f64,
}

impl VehicleBox {
    pub fn new(footprint: OrientedBox<f64>, height: f64) -> Self {
        debug_assert!(footprint.w > 0.0 && footprint.l > 0.0 && height > 0.0 && height <= 4.0);
        Self { footprint, height }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub ego_pose: Pose,
    pub coop_pose: Pose,
    pub targets: Vec<VehicleBox>,
    pub static_obstacles: Vec<VehicleBox>,
    pub seed: u64,
    /// Index into `targets` of the target placed behind an obstacle as seen
    /// from the ego sensor.
    pub occluded_target: Option<usize>,
}

impl Scene {
    /// All boxes the LIDAR can hit: targets first, then obstacles.
    pub fn bodies(&self) -> impl Iterator<Item = (BodyId, &VehicleBox)> {
        self.targets
            .iter()
            .enumerate()
            .map(|(i, b)| (BodyId::Target(i), b))
            .chain(self.static_obstacles.iter().enumerate().map(|(i, b)| (BodyId::Obstacle(i), b)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BodyId {
    Target(usize),
    Obstacle(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidarSpec {
    pub range_m: f64,
    pub azimuth_step: f64,
    /// Heights above ground at which rays sample surfaces.
    pub elevation_samples: Vec<f64>,
    pub noise_sigma: f64,
}

impl LidarSpec {
    /// Default sensor for a given range: azimuth step sized so a 1.8 m wide
    /// car at full range still subtends at least three rays.
    pub fn for_range(range_m: f64) -> Self {
        Self {
            range_m,
            azimuth_step: 1.8 / (3.0 * range_m) * 0.9,
            elevation_samples: vec![0.2, 0.6, 1.0, 1.4, 2.2, 2.8, 3.4],
            noise_sigma: 0.02,
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::InvalidParams(m.to_string()));
        if !(self.range_m > 0.0) {
            return bad("range_m must be positive");
        }
        if !(self.azimuth_step > 0.0) {
            return bad("azimuth_step must be positive");
        }
        if self.elevation_samples.is_empty() || self.elevation_samples.iter().any(|h| !(0.0..4.0).contains(h)) {
            return bad("elevation samples must be non-empty and within [0, 4)");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative");
        }
        Ok(())
    }

    pub fn ray_count(&self) -> usize {
        (2.0 * PI / self.azimuth_step).ceil() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneParams {
    /// Half-width of the square world, meters.
    pub world_extent: f64,
    /// Inclusive bounds on target count.
    pub targets: (usize, usize),
    /// Inclusive bounds on obstacle count.
    pub obstacles: (usize, usize),
    /// Targets and obstacles are placed within this radius of the ego sensor.
    pub placement_radius: f64,
    /// Bounds on ego-to-coop distance.
    pub coop_distance: (f64, f64),
    /// Free radius kept around both sensors.
    pub sensor_clearance: f64,
    /// Minimum gap between any two bodies.
    pub min_gap: f64,
    /// Footprint scale applied to obstacles.
    pub obstacle_scale: f64,
    /// Bounds on the distance from an occluder's far side to the centre of
    /// the target hidden behind it.
    pub occluder_gap: (f64, f64),
    pub max_attempts: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            world_extent: 200.0,
            targets: (4, 8),
            obstacles: (3, 6),
            placement_radius: 24.0,
            coop_distance: (6.0, 16.0),
            sensor_clearance: 3.0,
            min_gap: 0.5,
            obstacle_scale: 1.0,
            occluder_gap: (2.0, 6.0),
            max_attempts: 400,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::InvalidParams(m.to_string()));
        if !(self.world_extent > 0.0) {
            return bad("world extent must be positive");
        }
        if self.targets.0 < 1 || self.targets.0 > self.targets.1 {
            return bad("target count range must be non-empty and start at >= 1");
        }
        if self.obstacles.0 > self.obstacles.1 {
            return bad("obstacle count range is empty");
        }
        if !(self.placement_radius > 0.0) || self.world_extent <= self.placement_radius + 1.0 {
            return bad("placement radius must be positive and fit inside the world");
        }
        if !(self.coop_distance.0 > 0.0 && self.coop_distance.0 <= self.coop_distance.1 && self.coop_distance.1 < self.placement_radius) {
            return bad("coop distance range must be positive and inside the placement radius");
        }
        if !(self.obstacle_scale > 0.0) {
            return bad("obstacle scale must be positive");
        }
        if !(self.occluder_gap.0 >= 0.0 && self.occluder_gap.0 < self.occluder_gap.1) {
            return bad("occluder gap range must be non-negative and non-empty");
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive");
        }
        Ok(())
    }
}

fn road_yaw(rng: &mut ChaCha8Rng) -> f64 {
    let base = if rng.random_bool(0.5) { 0.0 } else { FRAC_PI_2 };
    base + rng.random_range(-0.15..0.15)
}

fn random_car(rng: &mut ChaCha8Rng, cx: f64, cy: f64) -> VehicleBox {
    let w = rng.random_range(1.7..2.0);
    let l = rng.random_range(4.0..4.8);
    VehicleBox::new(OrientedBox::new(cx, cy, w, l, road_yaw(rng)), CAR_HEIGHT)
}

fn random_obstacle(rng: &mut ChaCha8Rng, cx: f64, cy: f64, scale: f64) -> VehicleBox {
    if rng.random_bool(0.5) {
        // truck / bus
        let w = rng.random_range(2.4..2.6) * scale;
        let l = rng.random_range(6.0..10.0) * scale;
        let h = rng.random_range(2.5..3.5);
        VehicleBox::new(OrientedBox::new(cx, cy, w, l, road_yaw(rng)), h)
    } else {
        // building block or wall
        let w = rng.random_range(3.0..7.0) * scale;
        let l = rng.random_range(4.0..10.0) * scale;
        let h = rng.random_range(3.0..3.9);
        let yaw = if rng.random_bool(0.5) { 0.0 } else { FRAC_PI_2 };
        VehicleBox::new(OrientedBox::new(cx, cy, w, l, yaw), h)
    }
}

fn inflated(b: &OrientedBox<f64>, margin: f64) -> OrientedBox<f64> {
    OrientedBox { w: b.w + 2.0 * margin, l: b.l + 2.0 * margin, ..*b }
}

fn fits(candidate: &VehicleBox, placed: &[VehicleBox], sensors: &[(f64, f64)], params: &SceneParams, ego: &Pose) -> bool {
    let fp = &candidate.footprint;
    let ext = params.world_extent;
    if fp.corners().iter().any(|c| c[0].abs() >= ext || c[1].abs() >= ext) {
        return false;
    }
    let reach = 0.5 * (fp.w * fp.w + fp.l * fp.l).sqrt();
    if ((fp.cx - ego.x).powi(2) + (fp.cy - ego.y).powi(2)).sqrt() > params.placement_radius {
        return false;
    }
    for &(sx, sy) in sensors {
        if ((fp.cx - sx).powi(2) + (fp.cy - sy).powi(2)).sqrt() < reach + params.sensor_clearance {
            return false;
        }
    }
    let grown = inflated(fp, params.min_gap * 0.5);
    placed
        .iter()
        .all(|other| intersection_area(&grown, &inflated(&other.footprint, params.min_gap * 0.5)) == 0.0)
}

/// Does the segment `p -> q` cross the footprint of `b`?
pub fn segment_hits_box(p: (f64, f64), q: (f64, f64), b: &OrientedBox<f64>) -> bool {
    // Slab test in the box frame over t in [0, 1].
    let (s, c) = b.yaw.sin_cos();
    let to_local = |x: f64, y: f64| {
        let (dx, dy) = (x - b.cx, y - b.cy);
        (dx * c + dy * s, -dx * s + dy * c)
    };
    let (p0, p1) = to_local(p.0, p.1);
    let (q0, q1) = to_local(q.0, q.1);
    let (d0, d1) = (q0 - p0, q1 - p1);
    let mut t0: f64 = 0.0;
    let mut t1: f64 = 1.0;
    for (o, d, half) in [(p0, d0, b.l * 0.5), (p1, d1, b.w * 0.5)] {
        if d.abs() < 1e-15 {
            if o.abs() > half {
                return false;
            }
            continue;
        }
        let a = (-half - o) / d;
        let bb = (half - o) / d;
        t0 = t0.max(a.min(bb));
        t1 = t1.min(a.max(bb));
        if t0 > t1 {
            return false;
        }
    }
    true
}

/// Generate a scene deterministically from `seed`.
///
/// When at least one obstacle is placed, one target is put behind an obstacle
/// on the line of sight from the ego sensor and recorded in
/// [`Scene::occluded_target`].
pub fn generate_scene(params: &SceneParams, seed: u64) -> Result<Scene, SceneError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let margin = params.placement_radius + 1.0;
    let ext = params.world_extent - margin;
    let ego = Pose::planar(rng.random_range(-ext..ext), rng.random_range(-ext..ext), rng.random_range(-PI..PI));
    let coop = {
        let a = rng.random_range(-PI..PI);
        let d = rng.random_range(params.coop_distance.0..=params.coop_distance.1);
        Pose::planar(ego.x + d * a.cos(), ego.y + d * a.sin(), rng.random_range(-PI..PI))
    };
    let sensors = [(ego.x, ego.y), (coop.x, coop.y)];
    let n_targets = rng.random_range(params.targets.0..=params.targets.1);
    let n_obstacles = rng.random_range(params.obstacles.0..=params.obstacles.1);

    let random_spot = |rng: &mut ChaCha8Rng| {
        let r = params.placement_radius * rng.random::<f64>().sqrt();
        let a = rng.random_range(-PI..PI);
        (ego.x + r * a.cos(), ego.y + r * a.sin())
    };

    let mut placed: Vec<VehicleBox> = Vec::new();
    let mut obstacles = Vec::with_capacity(n_obstacles);
    for _ in 0..n_obstacles {
        let mut ok = false;
        for _ in 0..params.max_attempts {
            let (x, y) = random_spot(&mut rng);
            let cand = random_obstacle(&mut rng, x, y, params.obstacle_scale);
            if fits(&cand, &placed, &sensors, params, &ego) {
                placed.push(cand);
                obstacles.push(cand);
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(SceneError::Infeasible { what: "obstacle", attempts: params.max_attempts });
        }
    }

    let mut targets = Vec::with_capacity(n_targets);
    let mut occluded_target = None;
    if !obstacles.is_empty() {
        let mut ok = false;
        for _ in 0..params.max_attempts {
            let ob = &obstacles[rng.random_range(0..obstacles.len())].footprint;
            let (dx, dy) = (ob.cx - ego.x, ob.cy - ego.y);
            let dist = (dx * dx + dy * dy).sqrt();
            let (ux, uy) = (dx / dist, dy / dist);
            let behind = dist + 0.5 * (ob.w * ob.w + ob.l * ob.l).sqrt() + rng.random_range(params.occluder_gap.0..params.occluder_gap.1);
            let lateral = rng.random_range(-1.0..1.0);
            let (x, y) = (ego.x + ux * behind - uy * lateral, ego.y + uy * behind + ux * lateral);
            let cand = random_car(&mut rng, x, y);
            let blocked = obstacles.iter().any(|o| segment_hits_box((ego.x, ego.y), (x, y), &o.footprint));
            if blocked && fits(&cand, &placed, &sensors, params, &ego) {
                placed.push(cand);
                targets.push(cand);
                occluded_target = Some(0);
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(SceneError::Infeasible { what: "occluded target", attempts: params.max_attempts });
        }
    }
    while targets.len() < n_targets {
        let mut ok = false;
        for _ in 0..params.max_attempts {
            let (x, y) = random_spot(&mut rng);
            let cand = random_car(&mut rng, x, y);
            if fits(&cand, &placed, &sensors, params, &ego) {
                placed.push(cand);
                targets.push(cand);
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(SceneError::Infeasible { what: "target", attempts: params.max_attempts });
        }
    }

    Ok(Scene {
        ego_pose: ego,
        coop_pose: coop,
        targets,
        static_obstacles: obstacles,
        seed,
        occluded_target,
    })
}

/// Distance along a unit ray from `(ox, oy)` to the boundary of `b`, if hit
/// from outside (`t > 0`).
pub fn ray_box_distance(ox: f64, oy: f64, dir: (f64, f64), b: &OrientedBox<f64>) -> Option<f64> {
    let (s, c) = b.yaw.sin_cos();
    let (rx, ry) = (ox - b.cx, oy - b.cy);
    let (p0, p1) = (rx * c + ry * s, -rx * s + ry * c);
    let (d0, d1) = (dir.0 * c + dir.1 * s, -dir.0 * s + dir.1 * c);
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for (o, d, half) in [(p0, d0, b.l * 0.5), (p1, d1, b.w * 0.5)] {
        if d.abs() < 1e-15 {
            if o.abs() > half {
                return None;
            }
            continue;
        }
        let a = (-half - o) / d;
        let bb = (half - o) / d;
        t_near = t_near.max(a.min(bb));
        t_far = t_far.min(a.max(bb));
    }
    (t_near <= t_far && t_near > 0.0).then_some(t_near)
}

/// Nearest planar hit of one ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub body: BodyId,
    pub distance: f64,
    pub x: f64,
    pub y: f64,
    pub height: f64,
}

/// Planar ray casting from `sensor` over the full azimuth sweep. One entry
/// per ray; `None` when nothing is hit within range.
pub fn cast_rays(scene: &Scene, sensor: &Pose, spec: &LidarSpec) -> Vec<Option<RayHit>> {
    let bodies: Vec<(BodyId, &VehicleBox)> = scene
        .bodies()
        .filter(|(_, b)| {
            let fp = &b.footprint;
            let d = ((fp.cx - sensor.x).powi(2) + (fp.cy - sensor.y).powi(2)).sqrt();
            d - 0.5 * (fp.w * fp.w + fp.l * fp.l).sqrt() <= spec.range_m
        })
        .collect();
    (0..spec.ray_count())
        .map(|k| {
            let theta = sensor.yaw + k as f64 * spec.azimuth_step;
            let dir = (theta.cos(), theta.sin());
            let mut best: Option<RayHit> = None;
            for (id, b) in &bodies {
                if let Some(t) = ray_box_distance(sensor.x, sensor.y, dir, &b.footprint) {
                    if t <= spec.range_m && best.is_none_or(|h| t < h.distance) {
                        best = Some(RayHit {
                            body: *id,
                            distance: t,
                            x: sensor.x + t * dir.0,
                            y: sensor.y + t * dir.1,
                            height: b.height,
                        });
                    }
                }
            }
            best
        })
        .collect()
}

/// Simulated sweep with the body each point came from.
pub fn simulate_lidar_labeled(scene: &Scene, sensor: &Pose, spec: &LidarSpec, seed: u64) -> (PointCloud<f64>, Vec<BodyId>) {
    let m = rotation_matrix(sensor);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).expect("valid sigma"));
    let clamp = 3.0 * spec.noise_sigma;
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for hit in cast_rays(scene, sensor, spec).into_iter().flatten() {
        let (gx, gy) = (hit.x - sensor.x, hit.y - sensor.y);
        for &h in &spec.elevation_samples {
            if h > hit.height {
                continue;
            }
            let gz = h - sensor.z;
            if (gx * gx + gy * gy + gz * gz).sqrt() > spec.range_m {
                continue;
            }
            // local = global * M^T for row vectors
            let g = [gx, gy, gz];
            let mut p = [0.0; 3];
            for (i, v) in p.iter_mut().enumerate() {
                *v = g[0] * m[i][0] + g[1] * m[i][1] + g[2] * m[i][2];
            }
            if let Some(n) = &noise {
                for v in &mut p {
                    *v += n.sample(&mut rng).clamp(-clamp, clamp);
                }
            }
            points.push(p);
            labels.push(hit.body);
        }
    }
    (PointCloud::new(points), labels)
}

/// Sensor-local point cloud of one sweep.
pub fn simulate_lidar(scene: &Scene, sensor: &Pose, spec: &LidarSpec, seed: u64) -> PointCloud<f64> {
    simulate_lidar_labeled(scene, sensor, spec, seed).0
}

/// Points returned from each target for a sweep.
pub fn target_hit_counts(scene: &Scene, sensor: &Pose, spec: &LidarSpec) -> Vec<usize> {
    let mut counts = vec![0; scene.targets.len()];
    let quiet = LidarSpec { noise_sigma: 0.0, ..spec.clone() };
    let (_, labels) = simulate_lidar_labeled(scene, sensor, &quiet, 0);
    for l in labels {
        if let BodyId::Target(i) = l {
            counts[i] += 1;
        }
    }
    counts
}
