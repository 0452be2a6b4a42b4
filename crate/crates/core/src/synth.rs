//! Synthetic box rooms with analytically rendered RGB-D frames.
//!
//! A room has a floor, four walls (no ceiling is rendered), and boxes of two
//! classes standing on the floor. The scene cloud is sampled only where some
//! camera of the unperturbed path sees the surface, the way a reconstructed
//! scan would be. Degradations perturb the recorded frames afterwards.

use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CameraIntrinsics, Point3, PointCloud, RgbdFrame, RigidPose, SceneBundle, NO_LABEL};
use crate::views::{compute_coverage, DEFAULT_MATCH_RADIUS};

pub const FLOOR: u32 = 0;
pub const WALL: u32 = 1;
pub const BOX_A: u32 = 2;
pub const BOX_B: u32 = 3;
pub const CLASS_COUNT: usize = 4;
pub const CLASS_NAMES: [&str; CLASS_COUNT] = ["floor", "wall", "box-a", "box-b"];

const CLASS_COLORS: [[f64; 3]; CLASS_COUNT] = [
    [0.55, 0.45, 0.35],
    [0.85, 0.85, 0.80],
    [0.80, 0.20, 0.20],
    [0.20, 0.30, 0.80],
];
const OCCLUDER_COLOR: [f64; 3] = [0.15, 0.15, 0.15];
/// Hit marker for occluders; never stored as a label.
const OCCLUDER: u32 = NO_LABEL - 1;
const WALL_CLEARANCE: f64 = 0.45;
const BOX_GAP: f64 = 0.4;
/// Direction of the calibration offset in camera coordinates (unnormalized).
const MISMATCH_DIRECTION: [f64; 3] = [1.0, 1.0, 2.0];

// independent random streams
const STREAM_LAYOUT: u64 = 1;
const STREAM_POINTS: u64 = 2;
const STREAM_PIXELS: u64 = 3;
const STREAM_JITTER: u64 = 4;
const STREAM_DROP: u64 = 5;
const STREAM_OCCLUDERS: u64 = 6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraSpec {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self {
            width: 160,
            height: 120,
            focal: 120.0,
        }
    }
}

/// A camera position with heading (yaw, about +z) and downward pitch, degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPlacement {
    pub position: [f64; 3],
    pub yaw_deg: f64,
    pub pitch_deg: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Degradation {
    /// Rigid calibration error between depth sensor and scan, meters.
    pub mismatch_offset: f64,
    /// Copies of every camera placement, each slightly jittered.
    pub overlap_factor: usize,
    /// Thin pillars that appear in the images only.
    pub occluder_count: usize,
    /// Fraction of frames removed after rendering.
    pub view_drop: f64,
}

impl Default for Degradation {
    fn default() -> Self {
        Self {
            mismatch_offset: 0.0,
            overlap_factor: 1,
            occluder_count: 0,
            view_drop: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub seed: u64,
    /// Room extent along x, y, z in meters.
    pub room: [f64; 3],
    /// Boxes alternate between the two box classes.
    pub object_count: usize,
    pub points_per_scene: usize,
    pub camera: CameraSpec,
    /// Number of cameras on the default path; ignored if `camera_path` is set.
    pub camera_count: usize,
    pub camera_path: Vec<CameraPlacement>,
    pub color_noise: f64,
    pub degradation: Degradation,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            room: [3.0, 3.0, 2.4],
            object_count: 3,
            points_per_scene: 25_000,
            camera: CameraSpec::default(),
            camera_count: 12,
            camera_path: Vec::new(),
            color_noise: 0.03,
            degradation: Degradation::default(),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.room.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::invalid(format!("room dimensions must be positive, got {:?}", self.room)));
        }
        if self.object_count == 0 {
            return Err(Error::invalid("scene needs at least one object"));
        }
        if self.points_per_scene == 0 {
            return Err(Error::invalid("points_per_scene must be positive"));
        }
        if self.camera.width == 0 || self.camera.height == 0 || !(self.camera.focal > 0.0) {
            return Err(Error::invalid("camera size and focal length must be positive"));
        }
        if self.camera_path.is_empty() && self.camera_count == 0 {
            return Err(Error::invalid("scene needs at least one camera"));
        }
        let d = &self.degradation;
        if !(d.mismatch_offset.is_finite() && d.mismatch_offset >= 0.0) {
            return Err(Error::invalid("mismatch_offset must be non-negative"));
        }
        if d.overlap_factor == 0 {
            return Err(Error::invalid("overlap_factor must be at least 1"));
        }
        if !(0.0..1.0).contains(&d.view_drop) {
            return Err(Error::invalid(format!("view_drop must lie in [0, 1), got {}", d.view_drop)));
        }
        if !(self.color_noise.is_finite() && self.color_noise >= 0.0) {
            return Err(Error::invalid("color_noise must be non-negative"));
        }
        Ok(())
    }
}

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub lo: Point3,
    pub hi: Point3,
}

impl Aabb {
    /// Entry distance of a ray starting outside the box.
    fn ray_entry(&self, origin: &Point3, dir: &Vector3<f64>) -> Option<f64> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for d in 0..3 {
            if dir[d] == 0.0 {
                if origin[d] < self.lo[d] || origin[d] > self.hi[d] {
                    return None;
                }
                continue;
            }
            let a = (self.lo[d] - origin[d]) / dir[d];
            let b = (self.hi[d] - origin[d]) / dir[d];
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        (t0 <= t1 && t0 > 0.0).then_some(t0)
    }

    fn contains_xy(&self, x: f64, y: f64) -> bool {
        x >= self.lo.x && x <= self.hi.x && y >= self.lo.y && y <= self.hi.y
    }
}

/// Geometry of a generated room.
#[derive(Clone, Debug, PartialEq)]
pub struct RoomLayout {
    pub room: [f64; 3],
    pub boxes: Vec<(Aabb, u32)>,
    pub occluders: Vec<Aabb>,
}

/// What a ray hit: distance along the ray and class (`NO_LABEL` for the
/// ceiling, `OCCLUDER` for occluders).
#[derive(Clone, Copy, Debug, PartialEq)]
struct Hit {
    t: f64,
    label: u32,
}

impl RoomLayout {
    fn cast(&self, origin: &Point3, dir: &Vector3<f64>, with_occluders: bool) -> Option<Hit> {
        // exit from the room interior
        let mut best: Option<Hit> = None;
        let mut consider = |t: f64, label: u32| {
            if t > 0.0 && best.map_or(true, |b| t < b.t) {
                best = Some(Hit { t, label });
            }
        };
        for d in 0..3 {
            if dir[d] == 0.0 {
                continue;
            }
            let bound = if dir[d] > 0.0 { self.room[d] } else { 0.0 };
            let t = (bound - origin[d]) / dir[d];
            let label = match (d, dir[d] > 0.0) {
                (2, true) => NO_LABEL, // ceiling: not rendered
                (2, false) => FLOOR,
                _ => WALL,
            };
            consider(t, label);
        }
        for (b, label) in &self.boxes {
            if let Some(t) = b.ray_entry(origin, dir) {
                consider(t, *label);
            }
        }
        if with_occluders {
            for b in &self.occluders {
                if let Some(t) = b.ray_entry(origin, dir) {
                    consider(t, OCCLUDER);
                }
            }
        }
        best
    }

    /// Unsigned distance from `p` to the nearest labeled surface.
    pub fn surface_distance(&self, p: &Point3) -> f64 {
        let [x, y, _] = self.room;
        let mut d = p.z.abs().min(p.x.abs()).min((p.x - x).abs()).min(p.y.abs()).min((p.y - y).abs());
        for (b, _) in &self.boxes {
            let dx = (b.lo.x - p.x).max(p.x - b.hi.x).max(0.0);
            let dy = (b.lo.y - p.y).max(p.y - b.hi.y).max(0.0);
            let dz = (b.lo.z - p.z).max(p.z - b.hi.z).max(0.0);
            let outside = (dx * dx + dy * dy + dz * dz).sqrt();
            let inside = if outside == 0.0 {
                (0..3)
                    .map(|k| (p[k] - b.lo[k]).min(b.hi[k] - p[k]))
                    .fold(f64::INFINITY, f64::min)
            } else {
                outside
            };
            d = d.min(inside);
        }
        d
    }
}

/// Camera-to-world pose for a placement. Camera axes: x right, y down, z forward.
pub fn placement_pose(p: &CameraPlacement) -> RigidPose {
    let (yaw, pitch) = (p.yaw_deg.to_radians(), p.pitch_deg.to_radians());
    let forward = Vector3::new(pitch.cos() * yaw.cos(), pitch.cos() * yaw.sin(), -pitch.sin());
    let right = forward.cross(&Vector3::z()).normalize();
    let down = forward.cross(&right);
    let rotation = Matrix3::from_columns(&[right, down, forward]);
    RigidPose::new(rotation, Vector3::from(p.position)).expect("orthonormal by construction")
}

/// Cameras alternating between an outer ring looking inward and an inner
/// ring looking outward.
pub fn default_camera_path(room: [f64; 3], count: usize) -> Vec<CameraPlacement> {
    let (cx, cy) = (room[0] / 2.0, room[1] / 2.0);
    let height = (room[2] * 0.7).min(1.6);
    (0..count)
        .map(|i| {
            let theta = std::f64::consts::TAU * i as f64 / count as f64;
            let (s, c) = theta.sin_cos();
            if i % 2 == 0 {
                let r = 0.4 * room[0].min(room[1]);
                CameraPlacement {
                    position: [cx + r * c, cy + r * s, height],
                    yaw_deg: theta.to_degrees() + 180.0,
                    pitch_deg: 30.0,
                }
            } else {
                let r = 0.1 * room[0].min(room[1]);
                CameraPlacement {
                    position: [cx + r * c, cy + r * s, height],
                    yaw_deg: theta.to_degrees(),
                    pitch_deg: 35.0,
                }
            }
        })
        .collect()
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn place_boxes(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<(Aabb, u32)>> {
    let [rx, ry, rz] = spec.room;
    let mut boxes: Vec<(Aabb, u32)> = Vec::new();
    for i in 0..spec.object_count {
        let label = if i % 2 == 0 { BOX_A } else { BOX_B };
        let mut placed = false;
        for _ in 0..1000 {
            let sx = rng.gen_range(0.4..0.7);
            let sy = rng.gen_range(0.4..0.7);
            let sz = rng.gen_range(0.3..0.8f64).min(rz * 0.5);
            let free_x = rx - 2.0 * WALL_CLEARANCE - sx;
            let free_y = ry - 2.0 * WALL_CLEARANCE - sy;
            if free_x <= 0.0 || free_y <= 0.0 {
                break;
            }
            let x0 = WALL_CLEARANCE + rng.gen_range(0.0..free_x);
            let y0 = WALL_CLEARANCE + rng.gen_range(0.0..free_y);
            let candidate = Aabb {
                lo: Point3::new(x0, y0, 0.0),
                hi: Point3::new(x0 + sx, y0 + sy, sz),
            };
            let clear = boxes.iter().all(|(b, _)| {
                candidate.lo.x > b.hi.x + BOX_GAP
                    || b.lo.x > candidate.hi.x + BOX_GAP
                    || candidate.lo.y > b.hi.y + BOX_GAP
                    || b.lo.y > candidate.hi.y + BOX_GAP
            });
            if clear {
                boxes.push((candidate, label));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::invalid(format!(
                "cannot fit {} boxes into a {rx}x{ry} room",
                spec.object_count
            )));
        }
    }
    Ok(boxes)
}

fn place_occluders(spec: &SceneSpec, cameras: &[CameraPlacement], rng: &mut ChaCha8Rng) -> Vec<Aabb> {
    let [rx, ry, rz] = spec.room;
    let mut out = Vec::with_capacity(spec.degradation.occluder_count);
    let mut attempts = 0;
    while out.len() < spec.degradation.occluder_count && attempts < 10_000 {
        attempts += 1;
        let x = rng.gen_range(0.2..rx - 0.2);
        let y = rng.gen_range(0.2..ry - 0.2);
        let far = cameras.iter().all(|c| {
            let dx = c.position[0] - x;
            let dy = c.position[1] - y;
            (dx * dx + dy * dy).sqrt() > 0.4
        });
        if far {
            let h = rng.gen_range(0.8..(rz * 0.9).max(0.9));
            out.push(Aabb {
                lo: Point3::new(x - 0.06, y - 0.06, 0.0),
                hi: Point3::new(x + 0.06, y + 0.06, h),
            });
        }
    }
    out
}

fn render(
    layout: &RoomLayout,
    frame_id: u32,
    k: &CameraIntrinsics,
    pose: &RigidPose,
    with_occluders: bool,
    noise: Option<(&mut ChaCha8Rng, f64)>,
) -> Result<RgbdFrame> {
    let n = k.pixel_count();
    let mut depth = vec![0.0; n];
    let mut color = vec![[0.0; 3]; n];
    let mut labels = vec![NO_LABEL; n];
    let origin = Point3::from(*pose.translation());
    let mut noise = noise;
    for v in 0..k.height {
        for u in 0..k.width {
            let i = v * k.width + u;
            let d_cam = Vector3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
            let dir = pose.rotation() * d_cam;
            let hit = layout.cast(&origin, &dir, with_occluders);
            let jitter = match noise.as_mut() {
                Some((rng, amp)) if *amp > 0.0 => {
                    [rng.gen_range(-*amp..*amp), rng.gen_range(-*amp..*amp), rng.gen_range(-*amp..*amp)]
                }
                _ => [0.0; 3],
            };
            let Some(hit) = hit else { continue };
            if hit.label == NO_LABEL {
                continue;
            }
            depth[i] = hit.t;
            let base = if hit.label == OCCLUDER {
                OCCLUDER_COLOR
            } else {
                labels[i] = hit.label;
                CLASS_COLORS[hit.label as usize]
            };
            color[i] = [0, 1, 2].map(|c| (base[c] + jitter[c]).clamp(0.0, 1.0));
        }
    }
    RgbdFrame::new(frame_id, *k, pose.clone(), depth, color)?.with_labels(labels)
}

/// Picks a surface point with probability proportional to area.
fn sample_surface_point(layout: &RoomLayout, rng: &mut ChaCha8Rng) -> (Point3, u32) {
    let [rx, ry, rz] = layout.room;
    let mut faces: Vec<(f64, usize)> = vec![(rx * ry, 0), (rx * rz, 1), (rx * rz, 2), (ry * rz, 3), (ry * rz, 4)];
    for (k, (b, _)) in layout.boxes.iter().enumerate() {
        let s = b.hi - b.lo;
        faces.push((s.x * s.y + 2.0 * s.x * s.z + 2.0 * s.y * s.z, 5 + k));
    }
    let total: f64 = faces.iter().map(|f| f.0).sum();
    let mut pick = rng.gen_range(0.0..total);
    let mut face = faces.last().expect("room faces").1;
    for (area, id) in &faces {
        if pick < *area {
            face = *id;
            break;
        }
        pick -= area;
    }
    let (a, b) = (rng.gen::<f64>(), rng.gen::<f64>());
    match face {
        0 => (Point3::new(a * rx, b * ry, 0.0), FLOOR),
        1 => (Point3::new(a * rx, 0.0, b * rz), WALL),
        2 => (Point3::new(a * rx, ry, b * rz), WALL),
        3 => (Point3::new(0.0, a * ry, b * rz), WALL),
        4 => (Point3::new(rx, a * ry, b * rz), WALL),
        _ => {
            let (bx, label) = layout.boxes[face - 5];
            let s = bx.hi - bx.lo;
            let areas = [s.x * s.y, s.x * s.z, s.x * s.z, s.y * s.z, s.y * s.z];
            let mut r = rng.gen_range(0.0..areas.iter().sum::<f64>());
            let mut side = 4;
            for (k, area) in areas.iter().enumerate() {
                if r < *area {
                    side = k;
                    break;
                }
                r -= area;
            }
            let p = match side {
                0 => Point3::new(bx.lo.x + a * s.x, bx.lo.y + b * s.y, bx.hi.z),
                1 => Point3::new(bx.lo.x + a * s.x, bx.lo.y, bx.lo.z + b * s.z),
                2 => Point3::new(bx.lo.x + a * s.x, bx.hi.y, bx.lo.z + b * s.z),
                3 => Point3::new(bx.lo.x, bx.lo.y + a * s.y, bx.lo.z + b * s.z),
                _ => Point3::new(bx.hi.x, bx.lo.y + a * s.y, bx.lo.z + b * s.z),
            };
            (p, label)
        }
    }
}

/// Frames kept out of `n` when a fraction `view_drop` is removed.
pub fn kept_frame_count(n: usize, view_drop: f64) -> usize {
    // the small slack keeps e.g. (1 - 0.8) * 5 from rounding up to 2
    ((1.0 - view_drop) * n as f64 - 1e-9).ceil().max(0.0) as usize
}

/// Generates the scene and also returns its analytic layout.
pub fn generate_scene_with_layout(spec: &SceneSpec) -> Result<(SceneBundle, RoomLayout)> {
    spec.validate()?;
    let mut layout_rng = stream(spec.seed, STREAM_LAYOUT);
    let boxes = place_boxes(spec, &mut layout_rng)?;
    let base_path = if spec.camera_path.is_empty() {
        default_camera_path(spec.room, spec.camera_count)
    } else {
        spec.camera_path.clone()
    };
    let mut jitter_rng = stream(spec.seed, STREAM_JITTER);
    let mut path = Vec::with_capacity(base_path.len() * spec.degradation.overlap_factor);
    for placement in &base_path {
        path.push(*placement);
        for _ in 1..spec.degradation.overlap_factor {
            let mut p = *placement;
            for c in &mut p.position {
                *c += jitter_rng.gen_range(-0.05..0.05);
            }
            p.yaw_deg += jitter_rng.gen_range(-3.0..3.0);
            p.pitch_deg += jitter_rng.gen_range(-2.0..2.0);
            path.push(p);
        }
    }
    let occluders = place_occluders(spec, &path, &mut stream(spec.seed, STREAM_OCCLUDERS));
    let layout = RoomLayout {
        room: spec.room,
        boxes,
        occluders,
    };

    let cam = spec.camera;
    let k = CameraIntrinsics::new(
        cam.focal,
        cam.focal,
        (cam.width as f64 - 1.0) / 2.0,
        (cam.height as f64 - 1.0) / 2.0,
        cam.width,
        cam.height,
    )?;
    let poses: Vec<RigidPose> = path.iter().map(placement_pose).collect();

    // scan: surface samples visible from the unperturbed, unoccluded path
    let clean: Vec<RgbdFrame> = poses
        .iter()
        .enumerate()
        .map(|(i, pose)| render(&layout, i as u32, &k, pose, false, None))
        .collect::<Result<_>>()?;
    let mut point_rng = stream(spec.seed, STREAM_POINTS);
    let mut points = Vec::with_capacity(spec.points_per_scene);
    let mut labels = Vec::with_capacity(spec.points_per_scene);
    let max_attempts = spec.points_per_scene.saturating_mul(200).max(10_000);
    let mut attempts = 0;
    while points.len() < spec.points_per_scene {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::invalid("cameras see too little of the room to sample the scan"));
        }
        let (p, label) = sample_surface_point(&layout, &mut point_rng);
        if label == FLOOR && layout.boxes.iter().any(|(b, _)| b.contains_xy(p.x, p.y)) {
            continue;
        }
        let single = PointCloud::from_points(vec![p])?;
        let seen = clean
            .iter()
            .any(|f| compute_coverage(f, &single, DEFAULT_MATCH_RADIUS).map_or(false, |m| m.covered[0]));
        if seen {
            points.push(p);
            labels.push(label);
        }
    }
    let cloud = PointCloud::new(points, Some(labels), None)?;

    // recorded frames: occluders, color noise, calibration offset, dropped views
    let offset = Vector3::from(MISMATCH_DIRECTION).normalize() * spec.degradation.mismatch_offset;
    let mut pixel_rng = stream(spec.seed, STREAM_PIXELS);
    let mut frames = Vec::with_capacity(poses.len());
    for (i, pose) in poses.iter().enumerate() {
        let mut frame = render(&layout, i as u32, &k, pose, true, Some((&mut pixel_rng, spec.color_noise)))?;
        let shifted = pose.translation() + pose.rotation() * offset;
        frame.pose = RigidPose::new(*pose.rotation(), shifted)?;
        frames.push(frame);
    }
    let keep = kept_frame_count(frames.len(), spec.degradation.view_drop);
    if keep < frames.len() {
        let mut drop_rng = stream(spec.seed, STREAM_DROP);
        let mut chosen = sample(&mut drop_rng, frames.len(), keep).into_vec();
        chosen.sort_unstable();
        frames = chosen.into_iter().map(|i| frames[i].clone()).collect();
    }
    Ok((SceneBundle::new(cloud, frames, CLASS_COUNT)?, layout))
}

pub fn generate_scene(spec: &SceneSpec) -> Result<SceneBundle> {
    Ok(generate_scene_with_layout(spec)?.0)
}
