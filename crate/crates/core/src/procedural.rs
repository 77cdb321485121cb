//! Procedural object and background volumes built from signed distance functions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AxisAlignedBox, Vec3};
use crate::volume::{GridDims, ObjectVolume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { radius: f64 },
    Cuboid { half_extent: [f64; 3] },
    Cylinder { radius: f64, half_height: f64 },
}

impl Shape {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Shape::Sphere { radius } => radius > 0.0,
            Shape::Cuboid { half_extent } => half_extent.iter().all(|&h| h > 0.0),
            Shape::Cylinder {
                radius,
                half_height,
            } => radius > 0.0 && half_height > 0.0,
        };
        let finite = match *self {
            Shape::Sphere { radius } => radius.is_finite(),
            Shape::Cuboid { half_extent } => half_extent.iter().all(|h| h.is_finite()),
            Shape::Cylinder {
                radius,
                half_height,
            } => radius.is_finite() && half_height.is_finite(),
        };
        if ok && finite {
            Ok(())
        } else {
            Err(Error::Domain(format!("invalid shape parameters: {self:?}")))
        }
    }

    /// Half extent of the tight axis-aligned box around the shape.
    pub fn half_extent(&self) -> [f64; 3] {
        match *self {
            Shape::Sphere { radius } => [radius; 3],
            Shape::Cuboid { half_extent } => half_extent,
            Shape::Cylinder {
                radius,
                half_height,
            } => [radius, radius, half_height],
        }
    }

    /// Signed distance, negative inside.
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        match *self {
            Shape::Sphere { radius } => p.norm() - radius,
            Shape::Cuboid { half_extent } => {
                let q = Vec3::new(
                    p.x.abs() - half_extent[0],
                    p.y.abs() - half_extent[1],
                    p.z.abs() - half_extent[2],
                );
                let outside = Vec3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
                outside + q.x.max(q.y).max(q.z).min(0.0)
            }
            Shape::Cylinder {
                radius,
                half_height,
            } => {
                let dr = (p.x * p.x + p.y * p.y).sqrt() - radius;
                let dz = p.z.abs() - half_height;
                let outside = (dr.max(0.0).powi(2) + dz.max(0.0).powi(2)).sqrt();
                outside + dr.max(dz).min(0.0)
            }
        }
    }

    /// Enclosed volume.
    pub fn volume(&self) -> f64 {
        match *self {
            Shape::Sphere { radius } => 4.0 / 3.0 * std::f64::consts::PI * radius.powi(3),
            Shape::Cuboid { half_extent } => 8.0 * half_extent.iter().product::<f64>(),
            Shape::Cylinder {
                radius,
                half_height,
            } => std::f64::consts::PI * radius * radius * 2.0 * half_height,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProceduralObject {
    pub shape: Shape,
    pub color: [f64; 3],
    /// Interior density in 1/m.
    pub density: f64,
}

impl ProceduralObject {
    pub fn new(shape: Shape, color: [f64; 3], density: f64) -> Result<Self> {
        shape.validate()?;
        if !(density.is_finite() && density >= 0.0)
            || !color.iter().all(|c| (0.0..=1.0).contains(c))
        {
            return Err(Error::Domain(
                "density must be ≥ 0 and colors in [0, 1]".into(),
            ));
        }
        Ok(Self {
            shape,
            color,
            density,
        })
    }

    /// Voxelize on an `n³` grid whose bounds pad the shape by two voxels.
    pub fn voxelize(&self, n: usize) -> Result<ObjectVolume> {
        if n < 2 {
            return Err(Error::Domain("resolution must be at least 2".into()));
        }
        let h = self.shape.half_extent();
        let largest = h.iter().cloned().fold(0.0, f64::max);
        let pad = 4.0 * largest / (n as f64 - 4.0).max(1.0);
        let bounds = AxisAlignedBox::centered([h[0] + pad, h[1] + pad, h[2] + pad])?;
        let voxel = 2.0 * (largest + pad) / n as f64;
        let shape = self.shape;
        let (density, color) = (self.density, self.color);
        ObjectVolume::from_fn(GridDims::cube(n), bounds, move |p| {
            let sd = shape.signed_distance(p);
            let coverage = (0.5 - sd / voxel).clamp(0.0, 1.0);
            let logit = (-4.0 * sd / voxel).clamp(-12.0, 12.0);
            (density * coverage, color, logit)
        })
    }
}

/// Flat floor slab whose top face lies at `z = 0`, with a two-tone checker texture.
pub fn floor_volume(
    half_size: f64,
    thickness: f64,
    resolution: usize,
    density: f64,
) -> Result<ObjectVolume> {
    if !(half_size > 0.0 && thickness > 0.0 && resolution >= 2 && density >= 0.0) {
        return Err(Error::Domain("invalid floor parameters".into()));
    }
    let bounds = AxisAlignedBox::new(
        [-half_size, -half_size, -thickness],
        [half_size, half_size, 0.0],
    )?;
    let depth = ((resolution as f64 * thickness / (2.0 * half_size)).ceil() as usize).max(2);
    let cell = 2.0 * half_size / 8.0;
    ObjectVolume::from_fn(
        GridDims::new(depth, resolution, resolution),
        bounds,
        move |p| {
            let checker = ((p.x / cell).floor() + (p.y / cell).floor()).rem_euclid(2.0) < 0.5;
            let rgb = if checker {
                [0.62, 0.6, 0.55]
            } else {
                [0.42, 0.4, 0.38]
            };
            (density, rgb, 12.0)
        },
    )
}

/// Default background used by generation when none is supplied.
pub fn default_floor() -> ObjectVolume {
    floor_volume(1.5, 0.1, 32, 400.0).expect("valid constant parameters")
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;
    use crate::fitting::sigmoid;

    #[test]
    fn signed_distances() {
        let s = Shape::Sphere { radius: 0.5 };
        assert_abs_diff_eq!(s.signed_distance(&Vec3::new(1.0, 0.0, 0.0)), 0.5);
        assert_abs_diff_eq!(s.signed_distance(&Vec3::zeros()), -0.5);
        let b = Shape::Cuboid {
            half_extent: [1.0, 2.0, 3.0],
        };
        assert_abs_diff_eq!(b.signed_distance(&Vec3::new(2.0, 0.0, 0.0)), 1.0);
        assert_abs_diff_eq!(b.signed_distance(&Vec3::new(0.0, 0.0, 0.0)), -1.0);
        assert_abs_diff_eq!(b.signed_distance(&Vec3::new(4.0, 6.0, 0.0)), 5.0);
        let c = Shape::Cylinder {
            radius: 1.0,
            half_height: 1.0,
        };
        assert_abs_diff_eq!(c.signed_distance(&Vec3::new(0.0, 0.0, 3.0)), 2.0);
        assert_abs_diff_eq!(c.signed_distance(&Vec3::new(0.0, 0.5, 0.0)), -0.5);
    }

    #[test]
    fn voxelized_sphere_has_expected_occupancy_and_density() {
        let obj =
            ProceduralObject::new(Shape::Sphere { radius: 0.3 }, [0.8, 0.2, 0.1], 50.0).unwrap();
        let v = obj.voxelize(16).unwrap();
        let center = v.sample_trilinear(&Vec3::zeros());
        assert_abs_diff_eq!(center.density, 50.0, epsilon = 1e-4);
        assert_abs_diff_eq!(center.radiance[0], 0.8, epsilon = 1e-6);
        let corner = v.bounds().max() * 0.999;
        assert_eq!(v.sample_trilinear(&corner).density, 0.0);
        let inside = v
            .occupancy_logit()
            .iter()
            .filter(|&&l| sigmoid(l as f64) > 0.5)
            .count();
        assert!(inside > 0 && inside < v.dims().len());
    }

    #[test]
    fn floor_top_is_at_zero() {
        let f = default_floor();
        assert_abs_diff_eq!(f.bounds().max()[2], 0.0);
        assert!(f.sample_trilinear(&Vec3::new(0.1, 0.2, -0.05)).density > 100.0);
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(ProceduralObject::new(Shape::Sphere { radius: -1.0 }, [0.5; 3], 1.0).is_err());
        assert!(
            ProceduralObject::new(Shape::Sphere { radius: 1.0 }, [1.5, 0.0, 0.0], 1.0).is_err()
        );
        assert!(floor_volume(0.0, 0.1, 8, 1.0).is_err());
    }
}
