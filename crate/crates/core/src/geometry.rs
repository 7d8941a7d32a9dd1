//! Rigid transforms, frame alignment and the Cartesian to cylindrical map.
//!
//! Everything here runs in `f64`. Past scans are aligned into the current
//! sensor frame in Cartesian space, before any cylindrical binning happens.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};
use crate::kitti_io::{RawScan, ScanPoint};

/// Tolerance used when validating `RᵀR = I` and `det R = 1`.
pub const ORTHONORMAL_TOL: f64 = 1e-9;

/// A proper rigid motion `p ↦ R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidPose {
    /// Builds a pose, rejecting rotations that are not orthonormal with
    /// positive determinant within [`ORTHONORMAL_TOL`].
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::MalformedPose("non-finite pose entry".into()));
        }
        let ortho_err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det_err = (rotation.determinant() - 1.0).abs();
        if ortho_err > ORTHONORMAL_TOL || det_err > ORTHONORMAL_TOL {
            return Err(Error::MalformedPose(format!(
                "rotation not in SO(3): |RᵀR - I| = {ortho_err:.3e}, |det - 1| = {det_err:.3e}"
            )));
        }
        Ok(Self { rotation, translation })
    }

    /// Projects a nearly orthonormal matrix onto SO(3) (polar factor via SVD)
    /// before building the pose. Text pose files carry only a handful of
    /// significant digits, so their rotations miss the strict tolerance.
    /// Inputs further than `max_deviation` from orthonormal are rejected.
    pub fn from_approx(rotation: Matrix3<f64>, translation: Vector3<f64>, max_deviation: f64) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::MalformedPose("non-finite pose entry".into()));
        }
        let ortho_err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if ortho_err > max_deviation {
            return Err(Error::MalformedPose(format!(
                "rotation too far from orthonormal ({ortho_err:.3e} > {max_deviation:.3e})"
            )));
        }
        let svd = rotation.svd(true, true);
        let (u, v_t) = match (svd.u, svd.v_t) {
            (Some(u), Some(v_t)) => (u, v_t),
            _ => return Err(Error::MalformedPose("SVD failed".into())),
        };
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            return Err(Error::MalformedPose("rotation is a reflection".into()));
        }
        // one Newton polish step keeps the result at machine precision
        r = 0.5 * (r + r.transpose().try_inverse().unwrap_or(r));
        Self::new(r, translation)
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::new(x, y, z),
        }
    }

    /// Rotation by `angle` radians about +z, followed by translation `t`.
    pub fn from_yaw(angle: f64, t: [f64; 3]) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            rotation: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            translation: Vector3::from(t),
        }
    }

    /// Parses a row-major 3×4 `[R | t]`.
    pub fn from_row_major_3x4(m: &[f64; 12]) -> Result<Self> {
        let r = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        Self::new(r, Vector3::new(m[3], m[7], m[11]))
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &RigidPose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.rotation * Vector3::from(p) + self.translation;
        [q.x, q.y, q.z]
    }
}

/// Maps every point of `scan` from the sensor frame described by `pose_src`
/// into the frame of `pose_dst`, i.e. applies `pose_dst⁻¹ · pose_src`.
pub fn align_to_frame(scan: &RawScan, pose_src: &RigidPose, pose_dst: &RigidPose) -> RawScan {
    let rel = pose_dst.inverse().compose(pose_src);
    let points = scan
        .points
        .iter()
        .map(|p| {
            let [x, y, z] = rel.transform_point([p.x, p.y, p.z]);
            ScanPoint {
                x,
                y,
                z,
                intensity: p.intensity,
            }
        })
        .collect();
    RawScan { points }
}

/// A point in (range, azimuth, height) coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CylCoord {
    pub rho: f64,
    /// Azimuth in `[-π, π)`.
    pub theta: f64,
    pub z: f64,
}

pub fn to_cylindrical(p: [f64; 3]) -> CylCoord {
    let [x, y, z] = p;
    let rho = x.hypot(y);
    let mut theta = if rho == 0.0 { 0.0 } else { y.atan2(x) };
    // atan2 yields (-π, π]; fold the seam onto -π.
    if theta >= PI {
        theta = -PI;
    }
    CylCoord { rho, theta, z }
}

pub fn from_cylindrical(c: CylCoord) -> [f64; 3] {
    let (s, co) = c.theta.sin_cos();
    [c.rho * co, c.rho * s, c.z]
}

/// The six per-point encoder inputs, in order `(x, y, z, rho, theta, intensity)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointFeature(pub [f64; 6]);

impl PointFeature {
    pub const WIDTH: usize = 6;

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn build_point_features(point: [f64; 3], cyl: CylCoord, intensity: f64) -> PointFeature {
    PointFeature([point[0], point[1], point[2], cyl.rho, cyl.theta, intensity])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scan(points: &[[f64; 3]]) -> RawScan {
        RawScan {
            points: points
                .iter()
                .map(|p| ScanPoint {
                    x: p[0],
                    y: p[1],
                    z: p[2],
                    intensity: 0.25,
                })
                .collect(),
        }
    }

    #[test]
    fn rejects_non_orthonormal() {
        let r = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(RigidPose::new(r, Vector3::zeros()).is_err());
        let reflect = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(RigidPose::new(reflect, Vector3::zeros()).is_err());
    }

    #[test]
    fn approx_pose_is_projected() {
        let r = Matrix3::new(1.0, 1e-6, 0.0, -1e-6, 1.0, 2e-7, 0.0, 0.0, 1.0);
        let p = RigidPose::from_approx(r, Vector3::zeros(), 1e-3).unwrap();
        let err = (p.rotation().transpose() * p.rotation() - Matrix3::identity())
            .abs()
            .max();
        assert!(err < 1e-12);
        assert!(RigidPose::from_approx(r * 2.0, Vector3::zeros(), 1e-3).is_err());
    }

    #[test]
    fn align_identity_relative_pose() {
        let s = scan(&[[1.0, 2.0, 3.0], [-4.0, 0.5, 0.0]]);
        let p = RigidPose::from_yaw(0.3, [1.0, -2.0, 0.5]);
        assert_eq!(align_to_frame(&s, &p, &p).points.len(), 2);
        for (a, b) in align_to_frame(&s, &p, &p).points.iter().zip(&s.points) {
            assert_abs_diff_eq!(a.x, b.x, epsilon = 1e-12);
            assert_abs_diff_eq!(a.y, b.y, epsilon = 1e-12);
            assert_abs_diff_eq!(a.z, b.z, epsilon = 1e-12);
            assert_eq!(a.intensity, b.intensity);
        }
    }

    #[test]
    fn align_pure_translation() {
        let s = scan(&[[0.0, 0.0, 0.0]]);
        let out = align_to_frame(&s, &RigidPose::from_translation(1.0, 0.0, 0.0), &RigidPose::identity());
        let p = out.points[0];
        assert_eq!([p.x, p.y, p.z], [1.0, 0.0, 0.0]);
    }

    #[test]
    fn align_matches_homogeneous_product() {
        // src: 90° about z then +2 in x; dst: +1 in y. Point (1,1,0).
        let src = RigidPose::from_yaw(std::f64::consts::FRAC_PI_2, [2.0, 0.0, 0.0]);
        let dst = RigidPose::from_translation(0.0, 1.0, 0.0);
        // Explicit 4×4 matrices written out by hand.
        let m_src = [
            [0.0, -1.0, 0.0, 2.0],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let m_dst_inv = [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, -1.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let p = [1.0, 1.0, 0.0, 1.0];
        let mut tmp = [0.0; 4];
        for i in 0..4 {
            for j in 0..4 {
                tmp[i] += m_src[i][j] * p[j];
            }
        }
        let mut expected = [0.0; 4];
        for i in 0..4 {
            for j in 0..4 {
                expected[i] += m_dst_inv[i][j] * tmp[j];
            }
        }
        // (1,1,0) -> rot (-1,1,0) -> +2x (1,1,0) -> -1y (1,0,0)
        assert_abs_diff_eq!(expected[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(expected[1], 0.0, epsilon = 1e-15);
        let out = align_to_frame(&scan(&[[1.0, 1.0, 0.0]]), &src, &dst).points[0];
        assert_abs_diff_eq!(out.x, expected[0], epsilon = 1e-12);
        assert_abs_diff_eq!(out.y, expected[1], epsilon = 1e-12);
        assert_abs_diff_eq!(out.z, expected[2], epsilon = 1e-12);
    }

    #[test]
    fn cylindrical_examples() {
        assert_eq!(
            to_cylindrical([1.0, 0.0, 0.0]),
            CylCoord {
                rho: 1.0,
                theta: 0.0,
                z: 0.0
            }
        );
        let c = to_cylindrical([0.0, 2.0, 5.0]);
        assert_eq!(c.rho, 2.0);
        assert_abs_diff_eq!(c.theta, std::f64::consts::FRAC_PI_2, epsilon = 1e-15);
        assert_eq!(c.z, 5.0);
        let c = to_cylindrical([3.0, 4.0, 0.0]);
        assert_eq!(c.rho, 5.0);
        assert_eq!(c.theta, 4f64.atan2(3.0));
        let back = from_cylindrical(c);
        assert!((back[0] - 3.0).abs() < 1e-12 && (back[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn cylindrical_origin_and_seam() {
        let c = to_cylindrical([0.0, 0.0, -1.5]);
        assert_eq!((c.rho, c.theta, c.z), (0.0, 0.0, -1.5));
        assert_eq!(to_cylindrical([-1.0, 0.0, 0.0]).theta, -PI);
        assert_eq!(to_cylindrical([-1.0, -0.0, 0.0]).theta, -PI);
    }

    #[test]
    fn point_feature_layout() {
        let p = [1.0, 0.0, 0.0];
        assert_eq!(
            build_point_features(p, to_cylindrical(p), 0.5).0,
            [1.0, 0.0, 0.0, 1.0, 0.0, 0.5]
        );
        let o = [0.0; 3];
        assert_eq!(build_point_features(o, to_cylindrical(o), 0.0).0, [0.0; 6]);
        let p = [3.0, 4.0, 2.0];
        assert_eq!(
            build_point_features(p, to_cylindrical(p), 0.7).0,
            [3.0, 4.0, 2.0, 5.0, 4f64.atan2(3.0), 0.7]
        );
    }
}
