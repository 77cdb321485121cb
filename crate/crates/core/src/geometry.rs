//! Cameras, rigid poses, rays and ray/box intersection.
//!
//! Conventions: right-handed frames, camera +z looks into the scene, +x to
//! the right and +y down in the image; image origin is the top-left corner
//! and pixel `(u, v)` has its center at `(u + 0.5, v + 0.5)`. A camera pose
//! maps camera coordinates into world coordinates, and an object pose maps
//! object-local coordinates into world coordinates.

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square pixels, principal point in the image center.
    pub fn from_fov(width: u32, height: u32, horizontal_fov_rad: f64) -> Result<Self> {
        if !(horizontal_fov_rad > 0.0 && horizontal_fov_rad < std::f64::consts::PI) {
            return Err(Error::Domain(format!(
                "field of view {horizontal_fov_rad} rad is outside (0, pi)"
            )));
        }
        let f = 0.5 * width as f64 / (0.5 * horizontal_fov_rad).tan();
        Self::new(f, f, 0.5 * width as f64, 0.5 * height as f64, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("invalid camera intrinsics {self:?}")))
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Projects a camera-frame point to continuous pixel coordinates.
    pub fn project(&self, p_cam: &Vec3) -> Option<(f64, f64)> {
        if p_cam.z <= 0.0 {
            return None;
        }
        Some((
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidPose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Matrix3::identity())
            .abs()
            .max();
        if err > ORTHONORMAL_TOL || rotation.determinant() <= 0.0 {
            return Err(Error::Domain(format!(
                "rotation is not a proper orthonormal matrix (orthogonality error {err:.3e})"
            )));
        }
        if !translation.iter().all(|x| x.is_finite()) {
            return Err(Error::Domain("translation is not finite".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64, translation: Vec3) -> Self {
        let rot = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        Self {
            rotation: *rot.matrix(),
            translation,
        }
    }

    /// Quaternion in (w, x, y, z) order; normalized on the way in.
    pub fn from_quat_wxyz(q: [f64; 4], translation: Vec3) -> Result<Self> {
        let norm = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 1e-12) {
            return Err(Error::Domain(format!("degenerate quaternion {q:?}")));
        }
        let uq = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
        Self::new(*uq.to_rotation_matrix().matrix(), translation)
    }

    pub fn quat_wxyz(&self) -> [f64; 4] {
        let rot = Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let mut out = [q.w, q.i, q.j, q.k];
        // canonical hemisphere keeps serialized poses stable
        if out[0] < 0.0 {
            out.iter_mut().for_each(|c| *c = -*c);
        }
        out
    }

    /// Camera pose at `eye` looking at `target`, with world `up` mapping to image -y.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::Domain("look_at eye and target coincide".into()));
        }
        let z = forward.normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-9 {
            return Err(Error::Domain(
                "look_at up vector is parallel to the view axis".into(),
            ));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_columns(&[x, y, z]);
        Self::new(rotation, eye)
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn inverse_transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.tr_mul(&(p - self.translation))
    }

    pub fn inverse_transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation.tr_mul(v)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidPose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

pub fn world_to_object(point: &Vec3, pose: &RigidPose) -> Vec3 {
    pose.inverse_transform_point(point)
}

pub fn object_to_world(point: &Vec3, pose: &RigidPose) -> Vec3 {
    pose.transform_point(point)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    direction: Vec3,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3) -> Result<Self> {
        let n = direction.norm();
        if !(n.is_finite() && n > 1e-12) {
            return Err(Error::Domain(format!(
                "degenerate ray direction {direction:?}"
            )));
        }
        Ok(Self {
            origin,
            direction: direction / n,
        })
    }

    pub fn direction(&self) -> &Vec3 {
        &self.direction
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisAlignedBox {
    pub min_corner: [f64; 3],
    pub max_corner: [f64; 3],
}

impl AxisAlignedBox {
    pub fn new(min_corner: [f64; 3], max_corner: [f64; 3]) -> Result<Self> {
        let b = Self {
            min_corner,
            max_corner,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn centered(half_extent: [f64; 3]) -> Result<Self> {
        Self::new(half_extent.map(|h| -h), half_extent)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0..3).all(|a| {
            self.min_corner[a].is_finite()
                && self.max_corner[a].is_finite()
                && self.min_corner[a] < self.max_corner[a]
        });
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("invalid box {self:?}")))
        }
    }

    pub fn min(&self) -> Vec3 {
        Vec3::from(self.min_corner)
    }

    pub fn max(&self) -> Vec3 {
        Vec3::from(self.max_corner)
    }

    pub fn extent(&self) -> Vec3 {
        self.max() - self.min()
    }

    pub fn center(&self) -> Vec3 {
        (self.min() + self.max()) * 0.5
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min_corner[a] && p[a] <= self.max_corner[a])
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let (lo, hi) = (self.min_corner, self.max_corner);
        std::array::from_fn(|i| {
            Vec3::new(
                if i & 1 == 0 { lo[0] } else { hi[0] },
                if i & 2 == 0 { lo[1] } else { hi[1] },
                if i & 4 == 0 { lo[2] } else { hi[2] },
            )
        })
    }
}

/// Ray through the center of pixel `(u, v)`, expressed in world coordinates.
pub fn ray_for_pixel(
    intrinsics: &CameraIntrinsics,
    camera_pose: &RigidPose,
    u: u32,
    v: u32,
) -> Result<Ray> {
    if u >= intrinsics.width || v >= intrinsics.height {
        return Err(Error::Domain(format!(
            "pixel ({u}, {v}) outside {}x{} image",
            intrinsics.width, intrinsics.height
        )));
    }
    let d_cam = Vec3::new(
        (u as f64 + 0.5 - intrinsics.cx) / intrinsics.fx,
        (v as f64 + 0.5 - intrinsics.cy) / intrinsics.fy,
        1.0,
    );
    Ray::new(
        camera_pose.translation,
        camera_pose.transform_vector(&d_cam),
    )
}

/// Parametric interval `(t_enter, t_exit)` of the ray inside the posed box,
/// clipped to `t >= 0`. `None` when the ray misses.
pub fn intersect_ray_box(
    ray: &Ray,
    bbox: &AxisAlignedBox,
    box_pose: &RigidPose,
) -> Option<(f64, f64)> {
    let o = box_pose.inverse_transform_point(&ray.origin);
    let d = box_pose.inverse_transform_vector(ray.direction());
    let mut t0 = 0.0_f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        let (lo, hi) = (bbox.min_corner[a], bbox.max_corner[a]);
        if d[a].abs() < 1e-300 {
            if o[a] < lo || o[a] > hi {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[a];
        let (mut ta, mut tb) = ((lo - o[a]) * inv, (hi - o[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 > t1 {
            return None;
        }
    }
    Some((t0, t1))
}

/// Serialized camera: intrinsics plus a camera-to-world pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub pose: RigidPose,
}

impl Camera {
    pub fn ray(&self, u: u32, v: u32) -> Result<Ray> {
        ray_for_pixel(&self.intrinsics, &self.pose, u, v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseJson {
    pub quat_wxyz: [f64; 4],
    pub t: [f64; 3],
}

impl From<&RigidPose> for PoseJson {
    fn from(p: &RigidPose) -> Self {
        Self {
            quat_wxyz: p.quat_wxyz(),
            t: p.translation.into(),
        }
    }
}

impl TryFrom<&PoseJson> for RigidPose {
    type Error = Error;

    fn try_from(p: &PoseJson) -> Result<Self> {
        RigidPose::from_quat_wxyz(p.quat_wxyz, Vec3::from(p.t))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraJson {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub pose: PoseJson,
}

impl From<&Camera> for CameraJson {
    fn from(c: &Camera) -> Self {
        let k = &c.intrinsics;
        Self {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
            pose: (&c.pose).into(),
        }
    }
}

impl TryFrom<&CameraJson> for Camera {
    type Error = Error;

    fn try_from(c: &CameraJson) -> Result<Self> {
        Ok(Camera {
            intrinsics: CameraIntrinsics::new(c.fx, c.fy, c.cx, c.cy, c.width, c.height)?,
            pose: (&c.pose).try_into()?,
        })
    }
}

impl Serialize for Camera {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        CameraJson::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Camera {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let json = CameraJson::deserialize(d)?;
        Camera::try_from(&json).map_err(serde::de::Error::custom)
    }
}

impl Serialize for RigidPose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PoseJson::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for RigidPose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let json = PoseJson::deserialize(d)?;
        RigidPose::try_from(&json).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, SQRT_2};

    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 120.0, 32.0, 24.0, 64, 48).unwrap()
    }

    #[test]
    fn principal_point_ray_is_optical_axis() {
        // pixel (31, 23) has center (31.5, 23.5); use a principal point on a center
        let k = CameraIntrinsics::new(100.0, 100.0, 31.5, 23.5, 64, 48).unwrap();
        let r = ray_for_pixel(&k, &RigidPose::identity(), 31, 23).unwrap();
        assert_abs_diff_eq!(*r.direction(), Vec3::new(0.0, 0.0, 1.0), epsilon = 1e-12);
    }

    #[test]
    fn one_focal_length_right_is_45_degrees() {
        let k = CameraIntrinsics::new(10.0, 10.0, 5.5, 5.5, 32, 32).unwrap();
        // u + 0.5 = cx + fx
        let r = ray_for_pixel(&k, &RigidPose::identity(), 15, 5).unwrap();
        let expected = Vec3::new(1.0, 0.0, 1.0) / SQRT_2;
        assert_abs_diff_eq!(*r.direction(), expected, epsilon = 1e-12);
    }

    #[test]
    fn rotated_camera_rotates_optical_axis() {
        let k = CameraIntrinsics::new(100.0, 100.0, 31.5, 23.5, 64, 48).unwrap();
        let pose = RigidPose::from_axis_angle(Vec3::y(), FRAC_PI_2, Vec3::zeros());
        let r = ray_for_pixel(&k, &pose, 31, 23).unwrap();
        // R_y(90deg) * (0,0,1) = (sin 90, 0, cos 90) = (1, 0, 0)
        assert_abs_diff_eq!(*r.direction(), Vec3::new(1.0, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn out_of_bounds_pixel_is_domain_error() {
        assert!(matches!(
            ray_for_pixel(&k(), &RigidPose::identity(), 64, 0),
            Err(Error::Domain(_))
        ));
        assert!(ray_for_pixel(&k(), &RigidPose::identity(), 0, 48).is_err());
    }

    #[test]
    fn invalid_intrinsics_rejected() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 1.0, 0.0, 4, 4).is_err());
    }

    #[test]
    fn axis_aligned_slab_hit_and_miss() {
        let unit = AxisAlignedBox::centered([0.5; 3]).unwrap();
        let ray = Ray::new(Vec3::new(0.0, 0.0, -2.0), Vec3::z()).unwrap();
        let (t0, t1) = intersect_ray_box(&ray, &unit, &RigidPose::identity()).unwrap();
        assert_abs_diff_eq!(t0, 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(t1, 2.5, epsilon = 1e-12);

        let miss = Ray::new(Vec3::new(5.0, 0.0, -2.0), Vec3::z()).unwrap();
        assert!(intersect_ray_box(&miss, &unit, &RigidPose::identity()).is_none());
    }

    #[test]
    fn rotated_box_chord_is_diagonal() {
        let side = 0.8;
        let b = AxisAlignedBox::centered([side / 2.0; 3]).unwrap();
        let pose = RigidPose::from_axis_angle(Vec3::z(), FRAC_PI_4, Vec3::zeros());
        let ray = Ray::new(Vec3::new(-3.0, 0.0, 0.0), Vec3::x()).unwrap();
        let (t0, t1) = intersect_ray_box(&ray, &b, &pose).unwrap();
        assert_abs_diff_eq!(t1 - t0, SQRT_2 * side, epsilon = 1e-12);
    }

    #[test]
    fn origin_inside_box_clips_to_zero() {
        let b = AxisAlignedBox::centered([1.0; 3]).unwrap();
        let ray = Ray::new(Vec3::zeros(), Vec3::x()).unwrap();
        let (t0, t1) = intersect_ray_box(&ray, &b, &RigidPose::identity()).unwrap();
        assert_eq!(t0, 0.0);
        assert_abs_diff_eq!(t1, 1.0, epsilon = 1e-12);
        // box entirely behind the origin
        let behind = Ray::new(Vec3::new(0.0, 0.0, 5.0), Vec3::z()).unwrap();
        assert!(intersect_ray_box(&behind, &b, &RigidPose::identity()).is_none());
    }

    #[test]
    fn world_to_object_examples() {
        let p = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(world_to_object(&p, &RigidPose::identity()), p);
        let t = RigidPose::from_translation(Vec3::new(0.5, -1.0, 2.0));
        assert_abs_diff_eq!(
            world_to_object(&p, &t),
            Vec3::new(0.5, 3.0, 1.0),
            epsilon = 1e-15
        );
        let rz = RigidPose::from_axis_angle(Vec3::z(), FRAC_PI_2, Vec3::zeros());
        // R_z(90)^T (1,0,0) = (0,-1,0)
        assert_abs_diff_eq!(
            world_to_object(&Vec3::x(), &rz),
            Vec3::new(0.0, -1.0, 0.0),
            epsilon = 1e-15
        );
    }

    #[test]
    fn non_orthonormal_rotation_rejected() {
        let m = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(RigidPose::new(m, Vec3::zeros()).is_err());
        let reflect = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(RigidPose::new(reflect, Vec3::zeros()).is_err());
    }

    #[test]
    fn camera_json_roundtrip() {
        let cam = Camera {
            intrinsics: k(),
            pose: RigidPose::look_at(Vec3::new(1.0, -2.0, 1.5), Vec3::zeros(), Vec3::z()).unwrap(),
        };
        let s = serde_json::to_string(&cam).unwrap();
        assert!(s.contains("quat_wxyz"));
        let back: Camera = serde_json::from_str(&s).unwrap();
        assert_abs_diff_eq!(back.pose.rotation, cam.pose.rotation, epsilon = 1e-12);
        assert_eq!(back.intrinsics, cam.intrinsics);
    }

    #[test]
    fn look_at_points_optical_axis_at_target() {
        let eye = Vec3::new(0.3, -1.0, 0.8);
        let pose = RigidPose::look_at(eye, Vec3::zeros(), Vec3::z()).unwrap();
        let axis = pose.transform_vector(&Vec3::z());
        assert_abs_diff_eq!(axis, -eye.normalize(), epsilon = 1e-12);
        // world up projects to image up (negative camera y)
        assert!(pose.inverse_transform_vector(&Vec3::z()).y < 0.0);
    }

    fn arb_pose() -> impl Strategy<Value = RigidPose> {
        (
            prop::array::uniform3(-1.0..1.0f64),
            -3.0..3.0f64,
            prop::array::uniform3(-10.0..10.0f64),
        )
            .prop_filter("axis nonzero", |(a, _, _)| Vec3::from(*a).norm() > 1e-3)
            .prop_map(|(a, ang, t)| RigidPose::from_axis_angle(Vec3::from(a), ang, Vec3::from(t)))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn object_world_roundtrip(pose in arb_pose(), p in prop::array::uniform3(-10.0..10.0f64)) {
            let p = Vec3::from(p);
            let back = world_to_object(&object_to_world(&p, &pose), &pose);
            prop_assert!((back - p).norm() < 1e-9);
            let id = pose.compose(&pose.inverse());
            prop_assert!((id.rotation - Matrix3::identity()).abs().max() < 1e-6);
            prop_assert!(id.translation.norm() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn ray_reprojects_to_pixel_center(u in 0u32..64, v in 0u32..48, t in 0.01..50.0f64, pose in arb_pose()) {
            let k = k();
            let ray = ray_for_pixel(&k, &pose, u, v).unwrap();
            let p_cam = pose.inverse_transform_point(&ray.at(t));
            let (pu, pv) = k.project(&p_cam).unwrap();
            prop_assert!((pu - (u as f64 + 0.5)).abs() < 1e-6);
            prop_assert!((pv - (v as f64 + 0.5)).abs() < 1e-6);
        }

        #[test]
        fn intersection_brackets_box(
            pose in arb_pose(),
            o in prop::array::uniform3(-4.0..4.0f64),
            d in prop::array::uniform3(-1.0..1.0f64),
            half in prop::array::uniform3(0.1..2.0f64),
        ) {
            let d = Vec3::from(d);
            prop_assume!(d.norm() > 1e-3);
            let b = AxisAlignedBox::centered(half).unwrap();
            let ray = Ray::new(pose.transform_point(&Vec3::from(o)), d).unwrap();
            if let Some((t0, t1)) = intersect_ray_box(&ray, &b, &pose) {
                prop_assert!(0.0 <= t0 && t0 <= t1);
                let eps = 1e-6 * b.diagonal();
                let local = |t: f64| pose.inverse_transform_point(&ray.at(t));
                let mid = 0.5 * (t0 + t1);
                if t1 - t0 > 4.0 * eps {
                    prop_assert!(b.contains(&local(t0 + eps)));
                    prop_assert!(b.contains(&local(t1 - eps)));
                    prop_assert!(b.contains(&local(mid)));
                }
                if t0 > eps {
                    prop_assert!(!b.contains(&local(t0 - eps)));
                }
                prop_assert!(!b.contains(&local(t1 + eps)));
            }
        }
    }
}
