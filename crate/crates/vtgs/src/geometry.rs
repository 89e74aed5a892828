//! Pinhole camera model and SE(3) poses (camera-to-world, quaternion + translation).

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Divisor converting stored integer depth units to meters.
    pub depth_scale: f64,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        depth_scale: f64,
    ) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::InvalidInput("focal lengths must be positive".into()));
        }
        if cx <= 0.0 || cx >= width as f64 || cy <= 0.0 || cy >= height as f64 {
            return Err(Error::InvalidInput(
                "principal point must lie inside the image".into(),
            ));
        }
        if depth_scale <= 0.0 {
            return Err(Error::InvalidInput("depth_scale must be positive".into()));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            depth_scale,
        })
    }

    /// Mean focal length, used for the isotropic screen footprint and the
    /// depth-proportional radius initialization.
    #[inline]
    pub fn f_mean(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }
}

/// Camera-to-world rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Builds a pose from raw quaternion components (w, x, y, z), normalizing.
    pub fn from_parts(qw: f64, qx: f64, qy: f64, qz: f64, t: Vector3<f64>) -> Self {
        Self {
            rotation: UnitQuaternion::from_quaternion(Quaternion::new(qw, qx, qy, qz)),
            translation: t,
        }
    }

    /// Flat 7-parameter view: [qw, qx, qy, qz, tx, ty, tz].
    pub fn to_params(&self) -> [f64; 7] {
        let q = self.rotation.quaternion();
        [
            q.w,
            q.i,
            q.j,
            q.k,
            self.translation.x,
            self.translation.y,
            self.translation.z,
        ]
    }

    pub fn from_params(p: &[f64; 7]) -> Self {
        Self::from_parts(p[0], p[1], p[2], p[3], Vector3::new(p[4], p[5], p[6]))
    }

    #[inline]
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Camera-space point to world-space.
    #[inline]
    pub fn transform(&self, p_cam: Vector3<f64>) -> Vector3<f64> {
        self.rotation * p_cam + self.translation
    }

    /// World-space point to camera-space.
    #[inline]
    pub fn inverse_transform(&self, p_world: Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * (p_world - self.translation)
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: UnitQuaternion::from_quaternion(
                (self.rotation * other.rotation).into_inner(),
            ),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv_rot = self.rotation.inverse();
        Pose {
            rotation: inv_rot,
            translation: -(inv_rot * self.translation),
        }
    }

    /// Rotation angle (radians) and translation distance to another pose.
    pub fn error_to(&self, other: &Pose) -> (f64, f64) {
        let rel = self.inverse().compose(other);
        (rel.rotation.angle(), rel.translation.norm())
    }
}

/// Result of projecting a world point into a camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub z_cam: f64,
}

impl Projection {
    #[inline]
    pub fn behind_camera(&self) -> bool {
        self.z_cam <= 0.0
    }

    pub fn in_bounds(&self, intr: &CameraIntrinsics) -> bool {
        !self.behind_camera()
            && self.u >= 0.0
            && self.v >= 0.0
            && self.u <= (intr.width - 1) as f64
            && self.v <= (intr.height - 1) as f64
    }
}

/// Lifts a depth pixel to a camera-space point.
#[inline]
pub fn pixel_to_cam(u: f64, v: f64, depth: f64, intr: &CameraIntrinsics) -> Vector3<f64> {
    Vector3::new(
        (u - intr.cx) * depth / intr.fx,
        (v - intr.cy) * depth / intr.fy,
        depth,
    )
}

/// Back-projects a depth pixel to a world point through a camera-to-world pose.
pub fn back_project(
    pixel: (f64, f64),
    depth: f64,
    intr: &CameraIntrinsics,
    pose: &Pose,
) -> Result<Vector3<f64>> {
    if depth <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "back_project requires positive depth, got {depth}"
        )));
    }
    Ok(pose.transform(pixel_to_cam(pixel.0, pixel.1, depth, intr)))
}

/// Projects a world point into a camera. Behind-camera results are flagged
/// through `Projection::behind_camera`, not errors.
pub fn project(point: Vector3<f64>, intr: &CameraIntrinsics, pose: &Pose) -> Projection {
    let p = pose.inverse_transform(point);
    Projection {
        u: intr.fx * p.x / p.z + intr.cx,
        v: intr.fy * p.y / p.z + intr.cy,
        z_cam: p.z,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480, 5000.0).unwrap()
    }

    #[test]
    fn principal_ray_back_projection() {
        let k = intr();
        let p = back_project((k.cx, k.cy), 1.0, &k, &Pose::identity()).unwrap();
        assert_relative_eq!(p, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-12);
    }

    #[test]
    fn off_axis_back_projection() {
        let k = intr();
        let p = back_project((k.cx + k.fx, k.cy), 2.0, &k, &Pose::identity()).unwrap();
        assert_relative_eq!(p, Vector3::new(2.0, 0.0, 2.0), epsilon = 1e-12);
    }

    #[test]
    fn back_projection_applies_pose() {
        let k = intr();
        let pose = Pose::new(UnitQuaternion::identity(), Vector3::new(0.0, 0.0, 5.0));
        let p = back_project((k.cx, k.cy), 1.0, &k, &pose).unwrap();
        assert_relative_eq!(p, Vector3::new(0.0, 0.0, 6.0), epsilon = 1e-12);
    }

    #[test]
    fn non_positive_depth_rejected() {
        let k = intr();
        assert!(back_project((1.0, 1.0), 0.0, &k, &Pose::identity()).is_err());
        assert!(back_project((1.0, 1.0), -0.5, &k, &Pose::identity()).is_err());
    }

    #[test]
    fn project_principal_axis() {
        let k = intr();
        let pr = project(Vector3::new(0.0, 0.0, 1.0), &k, &Pose::identity());
        assert_relative_eq!(pr.u, k.cx, epsilon = 1e-12);
        assert_relative_eq!(pr.v, k.cy, epsilon = 1e-12);
        assert_relative_eq!(pr.z_cam, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn behind_camera_is_flagged() {
        let k = intr();
        let pr = project(Vector3::new(0.0, 0.0, -1.0), &k, &Pose::identity());
        assert!(pr.behind_camera());
    }

    #[test]
    fn compose_with_identity() {
        let p = Pose::from_parts(0.9, 0.1, -0.2, 0.3, Vector3::new(1.0, 2.0, 3.0));
        let c = p.compose(&Pose::identity());
        assert_relative_eq!(c.translation, p.translation, epsilon = 1e-12);
        assert!(c.rotation.angle_to(&p.rotation) < 1e-12);
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let p = Pose::from_parts(0.9, 0.1, -0.2, 0.3, Vector3::new(1.0, 2.0, 3.0));
        let c = p.compose(&p.inverse());
        assert!(c.translation.norm() < 1e-9);
        assert!(c.rotation.angle() < 1e-9);
    }

    #[test]
    fn two_quarter_turns_make_a_half_turn() {
        let quarter = Pose::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2),
            Vector3::zeros(),
        );
        let half = quarter.compose(&quarter);
        let expected = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 2.0 * FRAC_PI_2);
        assert!(half.rotation.angle_to(&expected) < 1e-9);
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (
            -1.0..1.0f64,
            -1.0..1.0f64,
            -1.0..1.0f64,
            0.1..1.0f64,
            -5.0..5.0f64,
            -5.0..5.0f64,
            -5.0..5.0f64,
        )
            .prop_map(|(x, y, z, w, tx, ty, tz)| {
                Pose::from_parts(w, x, y, z, Vector3::new(tx, ty, tz))
            })
    }

    proptest! {
        #[test]
        fn project_back_project_roundtrip(
            pose in arb_pose(),
            u in 0.0..639.0f64,
            v in 0.0..479.0f64,
            d in 0.05..10.0f64,
        ) {
            let k = intr();
            let world = back_project((u, v), d, &k, &pose).unwrap();
            let pr = project(world, &k, &pose);
            prop_assert!((pr.u - u).abs() < 1e-9 * (1.0 + u.abs()));
            prop_assert!((pr.v - v).abs() < 1e-9 * (1.0 + v.abs()));
            prop_assert!((pr.z_cam - d).abs() < 1e-9 * (1.0 + d));
        }

        #[test]
        fn composition_associative(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            prop_assert!((left.translation - right.translation).norm() < 1e-9);
            prop_assert!(left.rotation.angle_to(&right.rotation) < 1e-9);
        }

        #[test]
        fn quaternion_stays_unit(a in arb_pose(), b in arb_pose()) {
            let c = a.compose(&b);
            prop_assert!((c.rotation.quaternion().norm() - 1.0).abs() < 1e-9);
        }
    }
}
