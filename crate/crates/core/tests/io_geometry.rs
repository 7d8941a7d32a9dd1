mod common;

use std::f64::consts::FRAC_PI_2;

use common::rng;
use rand::Rng;
use stela::geometry::{align_to_frame, from_cylindrical, to_cylindrical, RigidPose};
use stela::kitti_io::{
    build_tiny_subset, camera_to_lidar_poses, decode_labels, decode_scan, encode_labels, encode_scan, read_labels,
    read_poses, read_scan, write_sequence, LabelArray, RawScan, ScanPoint, SequenceManifest,
};
use stela::synthetic::{make_synthetic_sequence, PlaneSpec, SyntheticSpec};

type M4 = [[f64; 4]; 4];

fn mat(p: &RigidPose) -> M4 {
    let (r, t) = (p.rotation(), p.translation());
    let mut m = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = r[(i, j)];
        }
        m[i][3] = t[i];
    }
    m[3][3] = 1.0;
    m
}

fn mul(a: &M4, b: &M4) -> M4 {
    let mut c = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            for k in 0..4 {
                c[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    c
}

/// Inverse of a rigid 4×4 by Gauss-Jordan elimination.
fn inv(a: &M4) -> M4 {
    let mut m = *a;
    let mut r = [[0.0; 4]; 4];
    for (i, row) in r.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for col in 0..4 {
        let piv = (col..4)
            .max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))
            .unwrap();
        m.swap(col, piv);
        r.swap(col, piv);
        let d = m[col][col];
        for j in 0..4 {
            m[col][j] /= d;
            r[col][j] /= d;
        }
        for row in 0..4 {
            if row != col {
                let f = m[row][col];
                for j in 0..4 {
                    m[row][j] -= f * m[col][j];
                    r[row][j] -= f * r[col][j];
                }
            }
        }
    }
    r
}

fn apply(m: &M4, p: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        *o = m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2] + m[i][3];
    }
    out
}

fn max_diff(a: &M4, b: &M4) -> f64 {
    (0..16)
        .map(|i| (a[i / 4][i % 4] - b[i / 4][i % 4]).abs())
        .fold(0.0, f64::max)
}

fn random_pose(r: &mut impl Rng) -> RigidPose {
    let yaw = RigidPose::from_yaw(r.random_range(-3.0..3.0), [0.0; 3]);
    let (a, b) = (r.random_range(-1.0..1.0f64), r.random_range(-1.0..1.0f64));
    let (sa, ca) = a.sin_cos();
    let (sb, cb) = b.sin_cos();
    let rx = nalgebra::Matrix3::new(1.0, 0.0, 0.0, 0.0, ca, -sa, 0.0, sa, ca);
    let ry = nalgebra::Matrix3::new(cb, 0.0, sb, 0.0, 1.0, 0.0, -sb, 0.0, cb);
    let t = nalgebra::Vector3::new(
        r.random_range(-5.0..5.0),
        r.random_range(-5.0..5.0),
        r.random_range(-5.0..5.0),
    );
    RigidPose::new(yaw.rotation() * rx * ry, t).unwrap()
}

#[test]
fn camera_pose_conjugation_matches_matrix_products() {
    let cam = RigidPose::from_translation(0.0, 0.0, 2.0);
    let tr = RigidPose::from_yaw(FRAC_PI_2, [0.0; 3]);
    let lidar = camera_to_lidar_poses(&[cam], &tr)[0];
    let oracle = mul(&mul(&inv(&mat(&tr)), &mat(&cam)), &mat(&tr));
    assert!(max_diff(&mat(&lidar), &oracle) < 1e-12);

    let mut r = rng(1);
    for _ in 0..50 {
        let (cam, tr) = (random_pose(&mut r), random_pose(&mut r));
        let lidar = camera_to_lidar_poses(&[cam], &tr)[0];
        let oracle = mul(&mul(&inv(&mat(&tr)), &mat(&cam)), &mat(&tr));
        assert!(max_diff(&mat(&lidar), &oracle) < 1e-9);
    }
}

#[test]
fn align_matches_matrix_products() {
    let src = RigidPose::from_yaw(FRAC_PI_2, [2.0, 0.0, 0.0]);
    let dst = RigidPose::from_translation(0.0, 1.0, 0.0);
    let scan = RawScan {
        points: vec![ScanPoint {
            x: 1.0,
            y: 1.0,
            z: 0.0,
            intensity: 0.3,
        }],
    };
    let out = align_to_frame(&scan, &src, &dst);
    let expect = apply(&mul(&inv(&mat(&dst)), &mat(&src)), [1.0, 1.0, 0.0]);
    let got = out.points[0].xyz();
    for i in 0..3 {
        assert!((got[i] - expect[i]).abs() < 1e-12);
    }
    assert_eq!(out.points[0].intensity, 0.3);
}

#[test]
fn composition_and_isometry_invariants() {
    let mut r = rng(2);
    for _ in 0..100 {
        let (a, b, c) = (random_pose(&mut r), random_pose(&mut r), random_pose(&mut r));
        let lhs = mat(&a.compose(&b).compose(&c));
        let rhs = mat(&a.compose(&b.compose(&c)));
        assert!(max_diff(&lhs, &rhs) < 1e-9);
        assert!(max_diff(&mat(&a.compose(&a.inverse())), &mat(&RigidPose::identity())) < 1e-9);
        assert!(max_diff(&mat(&a.compose(&b)), &mul(&mat(&a), &mat(&b))) < 1e-9);
        let p: [f64; 3] = [
            r.random_range(-9.0..9.0),
            r.random_range(-9.0..9.0),
            r.random_range(-9.0..9.0),
        ];
        let q: [f64; 3] = [
            r.random_range(-9.0..9.0),
            r.random_range(-9.0..9.0),
            r.random_range(-9.0..9.0),
        ];
        let d =
            |u: [f64; 3], v: [f64; 3]| ((u[0] - v[0]).powi(2) + (u[1] - v[1]).powi(2) + (u[2] - v[2]).powi(2)).sqrt();
        assert!((d(p, q) - d(a.transform_point(p), a.transform_point(q))).abs() < 1e-9);
    }
}

#[test]
fn static_scene_frames_coincide_after_alignment() {
    let spec = SyntheticSpec {
        frames: 3,
        ego_velocity: [1.0, 0.3, 0.0],
        ego_yaw_rate: 0.1,
        planes: vec![PlaneSpec {
            center: [5.0, 0.0],
            half_extent: 4.0,
            spacing: 0.5,
            z: -1.5,
            intensity: 0.2,
            label: 0,
        }],
        boxes: vec![],
    };
    let frames = make_synthetic_sequence(&spec, 4).unwrap();
    let last = frames.last().unwrap();
    for f in &frames {
        let aligned = align_to_frame(&f.scan, &f.pose, &last.pose);
        assert_eq!(aligned.len(), last.scan.len());
        for (a, b) in aligned.points.iter().zip(&last.scan.points) {
            for i in 0..3 {
                assert!((a.xyz()[i] - b.xyz()[i]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn cylindrical_round_trip() {
    let c = to_cylindrical([3.0, 4.0, 0.0]);
    assert_eq!(c.rho, 5.0);
    assert_eq!(c.theta, 4.0f64.atan2(3.0));
    let mut r = rng(3);
    for _ in 0..1000 {
        let p = [
            r.random_range(-50.0..50.0),
            r.random_range(-50.0..50.0),
            r.random_range(-4.0..2.0),
        ];
        let q = from_cylindrical(to_cylindrical(p));
        for i in 0..3 {
            assert!((p[i] - q[i]).abs() < 1e-12);
        }
    }
}

fn random_scan(r: &mut impl Rng, n: usize) -> RawScan {
    RawScan {
        points: (0..n)
            .map(|_| ScanPoint {
                x: r.random_range(-50.0f32..50.0) as f64,
                y: r.random_range(-50.0f32..50.0) as f64,
                z: r.random_range(-3.0f32..3.0) as f64,
                intensity: r.random_range(0.0f32..1.0) as f64,
            })
            .collect(),
    }
}

fn random_labels(r: &mut impl Rng, n: usize) -> LabelArray {
    LabelArray {
        semantic: (0..n).map(|_| r.random()).collect(),
        instance: (0..n).map(|_| r.random()).collect(),
    }
}

#[test]
fn codecs_are_byte_exact() {
    let mut r = rng(4);
    for _ in 0..100 {
        let n = r.random_range(0..300);
        // arbitrary finite bit patterns, subnormals and signed zeros included
        let bytes: Vec<u8> = std::iter::repeat_with(|| f32::from_bits(r.random()))
            .filter(|v| v.is_finite())
            .take(n * 4)
            .flat_map(f32::to_le_bytes)
            .collect();
        assert_eq!(encode_scan(&decode_scan(&bytes).unwrap()), bytes);
        let lbytes: Vec<u8> = (0..n * 4).map(|_| r.random()).collect();
        assert_eq!(encode_labels(&decode_labels(&lbytes, n).unwrap()), lbytes);
        let labels = random_labels(&mut r, n);
        assert_eq!(decode_labels(&encode_labels(&labels), n).unwrap(), labels);
    }
}

#[test]
fn written_sequence_is_discovered_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(5);
    let scans: Vec<RawScan> = (0..25).map(|i| random_scan(&mut r, 10 + i)).collect();
    let labels: Vec<LabelArray> = scans.iter().map(|s| random_labels(&mut r, s.len())).collect();
    let poses: Vec<RigidPose> = (0..25).map(|_| random_pose(&mut r)).collect();
    let seq = write_sequence(dir.path(), "03", &scans, &labels, &poses).unwrap();
    let m = SequenceManifest::discover(dir.path(), "03").unwrap();
    assert_eq!(m.len(), 25);
    for i in 0..25 {
        assert_eq!(read_scan(&m.scan_paths[i]).unwrap(), scans[i]);
        assert_eq!(read_labels(&m.label_paths[i], scans[i].len()).unwrap(), labels[i]);
        assert!(max_diff(&mat(&m.poses[i]), &mat(&poses[i])) < 1e-12);
    }
    let direct = read_poses(seq.join("poses.txt"), seq.join("calib.txt")).unwrap();
    assert_eq!(direct, m.poses);

    let tiny = build_tiny_subset(&m, 10).unwrap();
    assert_eq!(tiny.frame_ids, vec![0, 10, 20]);
    assert_eq!(tiny.poses, vec![m.poses[0], m.poses[10], m.poses[20]]);
    assert_eq!(tiny.scan_paths[2], m.scan_paths[20]);
    tiny.validate().unwrap();
    assert_eq!(build_tiny_subset(&m, 1).unwrap(), m);
    let empty = build_tiny_subset(&m, 7).map(|mut e| {
        e.frame_ids.clear();
        e.scan_paths.clear();
        e.label_paths.clear();
        e.poses.clear();
        e
    });
    let empty = empty.unwrap();
    assert!(build_tiny_subset(&empty, 3).unwrap().is_empty());
}
