//! Labeled synthetic LiDAR sequences for desk-scale experiments.
//!
//! Every primitive is sampled once in world coordinates; each frame then
//! expresses the world in the sensor frame of a moving ego pose. Static points
//! therefore line up exactly after [`align_to_frame`](crate::geometry::align_to_frame).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::RigidPose;
use crate::kitti_io::{RawScan, ScanPoint};

pub const GROUND: u16 = 0;
pub const STATIC_OBJECT: u16 = 1;
pub const MOVING_OBJECT: u16 = 2;
pub const CLASS_NAMES: [&str; 3] = ["ground", "static-object", "moving-object"];

/// One scan with per-point train ids and its sensor-to-world pose.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudFrame {
    pub scan: RawScan,
    pub labels: Vec<u16>,
    pub pose: RigidPose,
}

/// Flat square of regularly spaced points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneSpec {
    pub center: [f64; 2],
    pub half_extent: f64,
    pub spacing: f64,
    pub z: f64,
    pub intensity: f64,
    pub label: u16,
}

/// Axis-aligned box filled with uniformly sampled points, translating by
/// `velocity` every frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxSpec {
    /// Center at frame 0, world coordinates.
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub velocity: [f64; 3],
    pub points: usize,
    pub intensity: f64,
    pub label: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub frames: usize,
    /// Ego translation per frame, world coordinates.
    pub ego_velocity: [f64; 3],
    /// Ego heading change per frame, radians.
    pub ego_yaw_rate: f64,
    pub planes: Vec<PlaneSpec>,
    pub boxes: Vec<BoxSpec>,
}

fn plane_points(p: &PlaneSpec) -> Vec<[f64; 3]> {
    let steps = (2.0 * p.half_extent / p.spacing).floor() as i64;
    let mut out = Vec::new();
    for a in 0..=steps {
        for b in 0..=steps {
            out.push([
                p.center[0] - p.half_extent + a as f64 * p.spacing,
                p.center[1] - p.half_extent + b as f64 * p.spacing,
                p.z,
            ]);
        }
    }
    out
}

fn box_offsets(b: &BoxSpec, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    (0..b.points)
        .map(|_| {
            let mut o = [0.0; 3];
            for (c, s) in o.iter_mut().zip(b.size) {
                *c = rng.random_range(-0.5..0.5) * s;
            }
            o
        })
        .collect()
}

fn ego_pose(spec: &SyntheticSpec, t: usize) -> RigidPose {
    let f = t as f64;
    RigidPose::from_yaw(
        spec.ego_yaw_rate * f,
        [
            spec.ego_velocity[0] * f,
            spec.ego_velocity[1] * f,
            spec.ego_velocity[2] * f,
        ],
    )
}

/// Renders `spec` into sensor-frame scans. Deterministic per `seed`.
pub fn make_synthetic_sequence(spec: &SyntheticSpec, seed: u64) -> Result<Vec<PointCloudFrame>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offsets: Vec<Vec<[f64; 3]>> = spec.boxes.iter().map(|b| box_offsets(b, &mut rng)).collect();
    render(spec, &offsets)
}

fn render(spec: &SyntheticSpec, offsets: &[Vec<[f64; 3]>]) -> Result<Vec<PointCloudFrame>> {
    if spec.planes.iter().any(|p| !(p.spacing > 0.0 && p.half_extent >= 0.0)) {
        return Err(Error::Config("plane spacing must be positive".into()));
    }
    let planes: Vec<Vec<[f64; 3]>> = spec.planes.iter().map(plane_points).collect();
    let frames = (0..spec.frames)
        .map(|t| {
            let pose = ego_pose(spec, t);
            let to_sensor = pose.inverse();
            let mut points = Vec::new();
            let mut labels = Vec::new();
            let mut push = |w: [f64; 3], intensity: f64, label: u16| {
                let [x, y, z] = to_sensor.transform_point(w);
                points.push(ScanPoint { x, y, z, intensity });
                labels.push(label);
            };
            for (p, pts) in spec.planes.iter().zip(&planes) {
                for &w in pts {
                    push(w, p.intensity, p.label);
                }
            }
            for (b, offs) in spec.boxes.iter().zip(offsets) {
                let f = t as f64;
                for o in offs {
                    let w = [
                        b.center[0] + b.velocity[0] * f + o[0],
                        b.center[1] + b.velocity[1] * f + o[1],
                        b.center[2] + b.velocity[2] * f + o[2],
                    ];
                    push(w, b.intensity, b.label);
                }
            }
            PointCloudFrame {
                scan: RawScan { points },
                labels,
                pose,
            }
        })
        .collect();
    Ok(frames)
}

/// Generator parameters for scenes whose object classes can only be told
/// apart from their motion history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionSceneSpec {
    pub frames: usize,
    /// Ego speed along its x axis, meters per frame.
    pub ego_speed: f64,
    /// Object speed, meters per frame, random heading.
    pub object_speed: f64,
    pub objects_per_scene: usize,
    pub points_per_object: usize,
    pub object_size: [f64; 3],
    /// Objects are placed at ranges in `[min_range, max_range)` in the last frame.
    pub min_range: f64,
    pub max_range: f64,
    pub ground_half_extent: f64,
    pub ground_spacing: f64,
    pub ground_z: f64,
}

impl Default for MotionSceneSpec {
    fn default() -> Self {
        Self {
            frames: 3,
            ego_speed: 1.0,
            object_speed: 2.0,
            objects_per_scene: 4,
            points_per_object: 60,
            object_size: [1.6, 1.6, 1.4],
            min_range: 4.0,
            max_range: 14.0,
            ground_half_extent: 20.0,
            ground_spacing: 0.5,
            ground_z: -1.5,
        }
    }
}

const GROUND_INTENSITY: f64 = 0.2;
const OBJECT_INTENSITY: f64 = 0.8;

/// `2 · pairs` sequences. Sequences come in twins whose last frames are
/// bit-identical point for point, while every object that is static in one
/// twin is moving in the other. A single-frame classifier therefore cannot
/// separate the two object classes.
pub fn motion_ambiguous_scenes(spec: &MotionSceneSpec, pairs: usize, seed: u64) -> Result<Vec<Vec<PointCloudFrame>>> {
    if spec.frames == 0 || spec.objects_per_scene == 0 || spec.max_range <= spec.min_range {
        return Err(Error::Config(
            "motion scene needs frames, objects and a range interval".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let last = (spec.frames - 1) as f64;
    let ego = [spec.ego_speed, 0.0, 0.0];
    let ego_last = [ego[0] * last, 0.0, 0.0];
    let mut out = Vec::with_capacity(2 * pairs);
    for _ in 0..pairs {
        let mut finals = Vec::new();
        let mut headings = Vec::new();
        for _ in 0..spec.objects_per_scene {
            let r = rng.random_range(spec.min_range..spec.max_range);
            let a = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let z = spec.ground_z + 0.5 + spec.object_size[2] / 2.0;
            finals.push([ego_last[0] + r * a.cos(), r * a.sin(), z]);
            headings.push(rng.random_range(-std::f64::consts::PI..std::f64::consts::PI));
        }
        let template = BoxSpec {
            center: [0.0; 3],
            size: spec.object_size,
            velocity: [0.0; 3],
            points: spec.points_per_object,
            intensity: OBJECT_INTENSITY,
            label: STATIC_OBJECT,
        };
        let offsets: Vec<Vec<[f64; 3]>> = finals.iter().map(|_| box_offsets(&template, &mut rng)).collect();
        for twin in 0..2 {
            let boxes = finals
                .iter()
                .zip(&headings)
                .enumerate()
                .map(|(o, (c, h))| {
                    let moving = (o + twin) % 2 == 1;
                    let v = [spec.object_speed * h.cos(), spec.object_speed * h.sin(), 0.0];
                    let start = [c[0] - v[0] * last, c[1] - v[1] * last, c[2]];
                    // the exact expression the renderer evaluates in the last frame
                    let end: [f64; 3] = std::array::from_fn(|i| start[i] + v[i] * last);
                    let (center, velocity) = if moving { (start, v) } else { (end, [0.0; 3]) };
                    BoxSpec {
                        center,
                        velocity,
                        label: if moving { MOVING_OBJECT } else { STATIC_OBJECT },
                        ..template
                    }
                })
                .collect();
            let scene = SyntheticSpec {
                frames: spec.frames,
                ego_velocity: ego,
                ego_yaw_rate: 0.0,
                planes: vec![PlaneSpec {
                    center: [ego_last[0], 0.0],
                    half_extent: spec.ground_half_extent,
                    spacing: spec.ground_spacing,
                    z: spec.ground_z,
                    intensity: GROUND_INTENSITY,
                    label: GROUND,
                }],
                boxes,
            };
            out.push(render(&scene, &offsets)?);
        }
    }
    Ok(out)
}
