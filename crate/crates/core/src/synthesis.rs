//! Scene generation: sample objects from a volume library, drop them into a
//! bin, settle them with a position-based box-proxy solver, and place cameras.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{Matrix3, Rotation3, Unit, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compositor::mix_seed;
use crate::error::{Error, Result};
use crate::geometry::{AxisAlignedBox, Camera, CameraIntrinsics, RigidPose, Vec3};
use crate::meshing::{TriangleMesh, extract_object_mesh, mesh_aabb};
use crate::scene::Scene;
use crate::volume::ObjectVolume;

pub const FLOOR_TOLERANCE: f64 = 1e-3;
pub const PAIR_TOLERANCE: f64 = 1e-2;
pub const CONTACT_TOLERANCE: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct LibraryEntry {
    pub name: String,
    pub volume: Arc<ObjectVolume>,
    pub mesh: TriangleMesh,
    pub provenance: String,
    /// Collision proxy in the object frame (mesh AABB).
    pub proxy: AxisAlignedBox,
}

#[derive(Debug, Clone, Default)]
pub struct VolumeLibrary {
    pub entries: Vec<LibraryEntry>,
}

impl VolumeLibrary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Extract the mesh (occupancy iso 0.5, density fallback 1.0) and add the entry.
    pub fn add(
        &mut self,
        name: impl Into<String>,
        volume: ObjectVolume,
        provenance: impl Into<String>,
    ) -> Result<()> {
        let name = name.into();
        let mesh = extract_object_mesh(&volume, 0.5, 1.0)?;
        if mesh.is_empty() {
            return Err(Error::Placement {
                object: name,
                message: "volume has no surface to mesh".into(),
            });
        }
        let proxy = mesh_aabb(&mesh)?;
        self.entries.push(LibraryEntry {
            name,
            volume: Arc::new(volume),
            mesh,
            provenance: provenance.into(),
            proxy,
        });
        Ok(())
    }

    /// Every `*.covv` file in `dir`, in file-name order.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "covv"))
            .collect();
        paths.sort();
        let mut lib = Self::new();
        for p in paths {
            let name = p
                .file_stem()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            lib.add(name, ObjectVolume::load(&p)?, p.display().to_string())?;
        }
        if lib.entries.is_empty() {
            return Err(Error::Domain(format!(
                "no .covv volumes in {}",
                dir.display()
            )));
        }
        Ok(lib)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraSampling {
    pub count: usize,
    pub width: u32,
    pub height: u32,
    pub horizontal_fov_deg: f64,
    pub radius: [f64; 2],
    pub elevation_deg: [f64; 2],
    pub azimuth_deg: [f64; 2],
    pub look_at_jitter: f64,
}

impl Default for CameraSampling {
    fn default() -> Self {
        Self {
            count: 2,
            width: 64,
            height: 64,
            horizontal_fov_deg: 50.0,
            radius: [1.6, 2.2],
            elevation_deg: [30.0, 65.0],
            azimuth_deg: [0.0, 360.0],
            look_at_jitter: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub num_scenes: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Bin footprint in x/y; `min_corner[2]` is the floor height.
    pub bin: AxisAlignedBox,
    pub cameras: CameraSampling,
    pub settle_steps: usize,
    pub full_rotation: bool,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            num_scenes: 1,
            objects_min: 1,
            objects_max: 4,
            bin: AxisAlignedBox {
                min_corner: [-0.5, -0.5, 0.0],
                max_corner: [0.5, 0.5, 1.0],
            },
            cameras: CameraSampling::default(),
            settle_steps: 1000,
            full_rotation: false,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        self.bin.validate()?;
        let c = &self.cameras;
        let bad = if self.objects_min > self.objects_max {
            Some("objects_min exceeds objects_max")
        } else if self.settle_steps == 0 {
            Some("settle_steps must be at least 1")
        } else if c.count == 0 || c.width == 0 || c.height == 0 {
            Some("camera count and image size must be positive")
        } else if !(c.radius[0] > 0.0 && c.radius[0] <= c.radius[1]) {
            Some("camera radius range must be positive and ordered")
        } else if !(c.elevation_deg[0] <= c.elevation_deg[1]
            && c.elevation_deg[0] > 0.0
            && c.elevation_deg[1] < 90.0)
        {
            Some("camera elevation range must be ordered within (0, 90) degrees")
        } else if c.azimuth_deg[0] > c.azimuth_deg[1] {
            Some("camera azimuth range must be ordered")
        } else if !(c.look_at_jitter >= 0.0) {
            Some("look_at_jitter must be ≥ 0")
        } else if !(c.horizontal_fov_deg > 0.0 && c.horizontal_fov_deg < 180.0) {
            Some("horizontal_fov_deg must lie in (0, 180)")
        } else {
            None
        };
        match bad {
            Some(m) => Err(Error::Domain(m.into())),
            None => Ok(()),
        }
    }

    pub fn floor(&self) -> f64 {
        self.bin.min_corner[2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacedObject {
    pub library_index: usize,
    pub pose: RigidPose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComposedScene {
    pub index: usize,
    pub objects: Vec<PlacedObject>,
    pub cameras: Vec<Camera>,
    pub settle_steps: usize,
    pub converged: bool,
    /// Names of objects dropped because they could not be placed.
    pub skipped: Vec<String>,
}

impl ComposedScene {
    /// Renderable scene; object ids follow placement order starting at 1.
    pub fn to_scene(
        &self,
        library: &VolumeLibrary,
        background: Option<Arc<ObjectVolume>>,
    ) -> Scene {
        let mut scene = Scene::new();
        if let Some(bg) = background {
            scene = scene.with_background(bg);
        }
        for o in &self.objects {
            scene.add_object(Arc::clone(&library.entries[o.library_index].volume), o.pose);
        }
        scene
    }

    pub fn bodies(&self, library: &VolumeLibrary) -> Vec<Body> {
        self.objects
            .iter()
            .map(|o| Body {
                proxy: library.entries[o.library_index].proxy,
                pose: o.pose,
            })
            .collect()
    }
}

/// A settling body: object-frame box proxy plus object-to-world pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Body {
    pub proxy: AxisAlignedBox,
    pub pose: RigidPose,
}

/// World-space oriented box.
#[derive(Debug, Clone, Copy)]
struct Obb {
    center: Vec3,
    axes: [Vec3; 3],
    half: [f64; 3],
}

impl Obb {
    fn of(body: &Body) -> Self {
        let r = &body.pose.rotation;
        let e = body.proxy.extent();
        Obb {
            center: body.pose.transform_point(&body.proxy.center()),
            axes: [r.column(0).into(), r.column(1).into(), r.column(2).into()],
            half: [e.x / 2.0, e.y / 2.0, e.z / 2.0],
        }
    }

    fn radius_along(&self, axis: &Vec3) -> f64 {
        (0..3)
            .map(|i| self.half[i] * self.axes[i].dot(axis).abs())
            .sum()
    }

    fn lowest_z(&self) -> f64 {
        self.center.z - self.radius_along(&Vec3::z())
    }

    fn highest_z(&self) -> f64 {
        self.center.z + self.radius_along(&Vec3::z())
    }
}

/// Separating-axis test. Returns the smallest overlap (negative when separated:
/// then it is minus the largest gap) and the unit axis pointing from `a` to `b`.
fn sat(a: &Obb, b: &Obb) -> (f64, Vec3) {
    let d = b.center - a.center;
    let mut best = (f64::INFINITY, Vec3::z());
    let mut worst_gap = f64::NEG_INFINITY;
    let mut consider = |axis: Vec3| {
        let n = axis.norm();
        if n < 1e-9 {
            return;
        }
        let axis = axis / n;
        let dist = d.dot(&axis);
        let overlap = a.radius_along(&axis) + b.radius_along(&axis) - dist.abs();
        if overlap < 0.0 {
            worst_gap = worst_gap.max(-overlap);
        }
        if overlap < best.0 {
            best = (overlap, if dist < 0.0 { -axis } else { axis });
        }
    };
    // world z first so ties between stacked boxes resolve vertically
    consider(Vec3::z());
    for i in 0..3 {
        consider(a.axes[i]);
        consider(b.axes[i]);
    }
    for i in 0..3 {
        for j in 0..3 {
            consider(a.axes[i].cross(&b.axes[j]));
        }
    }
    if worst_gap > f64::NEG_INFINITY {
        (-worst_gap, best.1)
    } else {
        best
    }
}

/// Penetration depth between two bodies (0 when separated).
pub fn penetration(a: &Body, b: &Body) -> f64 {
    sat(&Obb::of(a), &Obb::of(b)).0.max(0.0)
}

/// Lower bound on the distance between two bodies (0 when touching or overlapping).
pub fn separation(a: &Body, b: &Body) -> f64 {
    (-sat(&Obb::of(a), &Obb::of(b)).0).max(0.0)
}

/// World-space axis-aligned bounds of a body's proxy.
pub fn world_aabb(body: &Body) -> AxisAlignedBox {
    let obb = Obb::of(body);
    let r = [
        obb.radius_along(&Vec3::x()),
        obb.radius_along(&Vec3::y()),
        obb.radius_along(&Vec3::z()),
    ];
    AxisAlignedBox {
        min_corner: [
            obb.center.x - r[0],
            obb.center.y - r[1],
            obb.center.z - r[2],
        ],
        max_corner: [
            obb.center.x + r[0],
            obb.center.y + r[1],
            obb.center.z + r[2],
        ],
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SettleConfig {
    pub floor: f64,
    pub steps: usize,
    pub dt: f64,
    pub gravity: f64,
    pub iterations: usize,
    pub tolerance: f64,
    /// Fraction of the remaining tilt removed per step.
    pub rotation_relaxation: f64,
}

impl SettleConfig {
    pub fn new(floor: f64, steps: usize) -> Self {
        Self {
            floor,
            steps,
            dt: 0.005,
            gravity: 9.81,
            iterations: 12,
            tolerance: 1e-4,
            rotation_relaxation: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SettleResult {
    pub poses: Vec<RigidPose>,
    pub steps: usize,
    /// False when `steps` ran out before motion stopped; poses are the last state.
    pub converged: bool,
}

pub fn settle(bodies: &[Body], floor: f64, steps: usize) -> Result<SettleResult> {
    settle_with(bodies, &SettleConfig::new(floor, steps))
}

/// Rotation taking the body axis closest to vertical `fraction` of the way to vertical.
fn uprighting(rotation: &Matrix3<f64>, fraction: f64) -> (Matrix3<f64>, f64) {
    let (k, _) = (0..3)
        .map(|i| (i, rotation[(2, i)].abs()))
        .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
    let axis: Vec3 = rotation.column(k).into();
    let target = if axis.z >= 0.0 { Vec3::z() } else { -Vec3::z() };
    let angle = axis.dot(&target).clamp(-1.0, 1.0).acos();
    let cross = axis.cross(&target);
    if angle < 1e-12 || cross.norm() < 1e-15 {
        return (Matrix3::identity(), 0.0);
    }
    let step = Rotation3::from_axis_angle(&Unit::new_normalize(cross), angle * fraction);
    (*step.matrix(), angle)
}

fn set_center(body: &mut Body, center: Vec3) {
    body.pose.translation = center - body.pose.rotation * body.proxy.center();
}

fn center(body: &Body) -> Vec3 {
    body.pose.transform_point(&body.proxy.center())
}

fn project_constraints(bodies: &mut [Body], floor: f64) -> f64 {
    let mut max_pen: f64 = 0.0;
    for i in 0..bodies.len() {
        for j in i + 1..bodies.len() {
            let (a, b) = (Obb::of(&bodies[i]), Obb::of(&bodies[j]));
            let (pen, n) = sat(&a, &b);
            if pen > 0.0 {
                max_pen = max_pen.max(pen);
                // the upper body takes more of the correction so stacks do not sink into the floor
                let share_b = if n.z.abs() > 0.5 {
                    if n.z > 0.0 { 0.8 } else { 0.2 }
                } else {
                    0.5
                };
                set_center(&mut bodies[i], a.center - n * pen * (1.0 - share_b));
                set_center(&mut bodies[j], b.center + n * pen * share_b);
            }
        }
    }
    for b in bodies.iter_mut() {
        let low = Obb::of(b).lowest_z();
        if low < floor {
            max_pen = max_pen.max(floor - low);
            let c = center(b);
            set_center(b, c + Vec3::new(0.0, 0.0, floor - low));
        }
    }
    max_pen
}

/// Position-based settling under gravity with box proxies. Horizontal
/// velocity is discarded each step (full friction); tilted bodies are relaxed
/// toward the nearest face-down orientation.
pub fn settle_with(bodies: &[Body], cfg: &SettleConfig) -> Result<SettleResult> {
    if cfg.steps == 0 {
        return Err(Error::Domain("settle needs at least one step".into()));
    }
    for b in bodies {
        b.proxy.validate()?;
    }
    let mut state: Vec<Body> = bodies.to_vec();
    let mut vz = vec![0.0; state.len()];
    let mut converged = state.is_empty();
    let mut steps = 0;
    while !converged && steps < cfg.steps {
        steps += 1;
        let before: Vec<Vec3> = state.iter().map(center).collect();
        let mut max_tilt: f64 = 0.0;
        for (b, v) in state.iter_mut().zip(&mut vz) {
            *v -= cfg.gravity * cfg.dt;
            let c = center(b);
            let (q, tilt) = uprighting(&b.pose.rotation, cfg.rotation_relaxation);
            max_tilt = max_tilt.max(tilt);
            b.pose.rotation = q * b.pose.rotation;
            set_center(b, c + Vec3::new(0.0, 0.0, *v * cfg.dt));
        }
        for _ in 0..cfg.iterations {
            if project_constraints(&mut state, cfg.floor) == 0.0 {
                break;
            }
        }
        let mut max_disp: f64 = 0.0;
        for ((b, v), c0) in state.iter().zip(&mut vz).zip(&before) {
            let d = center(b) - c0;
            *v = d.z / cfg.dt;
            max_disp = max_disp.max(d.norm());
        }
        converged = max_disp < cfg.tolerance && max_tilt < 1e-4;
    }
    // final cleanup so the reported state satisfies the contact bounds
    for _ in 0..2000 {
        if project_constraints(&mut state, cfg.floor) < 1e-6 {
            break;
        }
    }
    if !converged {
        log::warn!("settling did not converge within {} steps", cfg.steps);
    }
    Ok(SettleResult {
        poses: state.iter().map(|b| b.pose).collect(),
        steps,
        converged,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plausibility {
    pub max_floor_penetration: f64,
    pub max_pair_penetration: f64,
    /// Indices of bodies touching neither the floor nor another body.
    pub floating: Vec<usize>,
}

impl Plausibility {
    pub fn is_plausible(&self) -> bool {
        self.max_floor_penetration <= FLOOR_TOLERANCE
            && self.max_pair_penetration < PAIR_TOLERANCE
            && self.floating.is_empty()
    }
}

pub fn plausibility(bodies: &[Body], floor: f64) -> Plausibility {
    let obbs: Vec<Obb> = bodies.iter().map(Obb::of).collect();
    let mut max_floor: f64 = 0.0;
    let mut max_pair: f64 = 0.0;
    let mut floating = Vec::new();
    for (i, a) in obbs.iter().enumerate() {
        let low = a.lowest_z();
        max_floor = max_floor.max(floor - low);
        let mut supported = low - floor < CONTACT_TOLERANCE;
        for (j, b) in obbs.iter().enumerate() {
            if i == j {
                continue;
            }
            let s = sat(a, b).0;
            if j > i {
                max_pair = max_pair.max(s);
            }
            // support must come from a body that is not entirely above this one
            if -s < CONTACT_TOLERANCE && b.lowest_z() < low + 1e-9 {
                supported = true;
            }
        }
        if !supported {
            floating.push(i);
        }
    }
    Plausibility {
        max_floor_penetration: max_floor.max(0.0),
        max_pair_penetration: max_pair.max(0.0),
        floating,
    }
}

fn uniform_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let tau = std::f64::consts::TAU;
    let q = nalgebra::Quaternion::new(
        u1.sqrt() * (tau * u3).cos(),
        (1.0 - u1).sqrt() * (tau * u2).sin(),
        (1.0 - u1).sqrt() * (tau * u2).cos(),
        u1.sqrt() * (tau * u3).sin(),
    );
    *UnitQuaternion::from_quaternion(q)
        .to_rotation_matrix()
        .matrix()
}

/// Uniform x/y inside the bin inset by the proxy's half extent, bottom resting
/// `drop_gap` above `stack_height`, uniform yaw (or full rotation).
pub fn sample_initial_pose(
    bin: &AxisAlignedBox,
    proxy: &AxisAlignedBox,
    name: &str,
    stack_height: f64,
    full_rotation: bool,
    rng: &mut impl Rng,
) -> Result<RigidPose> {
    let slack = |rot: &Matrix3<f64>| {
        let body = Body {
            proxy: *proxy,
            pose: RigidPose {
                rotation: *rot,
                translation: Vec3::zeros(),
            },
        };
        let w = world_aabb(&body);
        let e = w.extent();
        (bin.extent().x - e.x, bin.extent().y - e.y, w)
    };
    let (sx, sy, _) = slack(&Matrix3::identity());
    if sx < -1e-9 || sy < -1e-9 {
        return Err(Error::Placement {
            object: name.into(),
            message: format!(
                "footprint {:.3}x{:.3} exceeds bin {:.3}x{:.3}",
                proxy.extent().x,
                proxy.extent().y,
                bin.extent().x,
                bin.extent().y
            ),
        });
    }
    let mut rotation = if full_rotation {
        uniform_rotation(rng)
    } else {
        let yaw = rng.random_range(0.0..std::f64::consts::TAU);
        *Rotation3::from_axis_angle(&Vec3::z_axis(), yaw).matrix()
    };
    let (sx, sy, _) = slack(&rotation);
    if sx < 0.0 || sy < 0.0 {
        rotation = Matrix3::identity();
    }
    let (sx, sy, w) = slack(&rotation);
    let pick = |rng: &mut dyn rand::RngCore, lo: f64, s: f64| {
        if s > 0.0 {
            lo + rng.random_range(0.0..=s)
        } else {
            lo
        }
    };
    let min_x = pick(rng, bin.min_corner[0], sx.max(0.0));
    let min_y = pick(rng, bin.min_corner[1], sy.max(0.0));
    let min_z = stack_height + 0.01;
    // w is the world box of the proxy with zero translation
    let translation = Vec3::new(
        min_x - w.min_corner[0],
        min_y - w.min_corner[1],
        min_z - w.min_corner[2],
    );
    RigidPose::new(rotation, translation)
}

fn sample_camera(bin: &AxisAlignedBox, c: &CameraSampling, rng: &mut impl Rng) -> Result<Camera> {
    let range = |rng: &mut dyn rand::RngCore, r: [f64; 2]| {
        if r[1] > r[0] {
            rng.random_range(r[0]..r[1])
        } else {
            r[0]
        }
    };
    let radius = range(rng, c.radius);
    let elev = range(rng, c.elevation_deg).to_radians();
    let azim = range(rng, c.azimuth_deg).to_radians();
    let j = c.look_at_jitter;
    let jitter = if j > 0.0 {
        Vec3::new(
            rng.random_range(-j..j),
            rng.random_range(-j..j),
            rng.random_range(-j..j),
        )
    } else {
        Vec3::zeros()
    };
    let mid = bin.center();
    let target = Vec3::new(mid.x, mid.y, bin.min_corner[2] + 0.1) + jitter;
    let eye =
        target + radius * Vec3::new(elev.cos() * azim.cos(), elev.cos() * azim.sin(), elev.sin());
    Ok(Camera {
        intrinsics: CameraIntrinsics::from_fov(
            c.width,
            c.height,
            c.horizontal_fov_deg.to_radians(),
        )?,
        pose: RigidPose::look_at(eye, target, Vec3::z())?,
    })
}

fn generate_one(
    library: &VolumeLibrary,
    cfg: &GenerationConfig,
    index: usize,
) -> Result<ComposedScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, index as u64));
    let cameras = (0..cfg.cameras.count)
        .map(|_| sample_camera(&cfg.bin, &cfg.cameras, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let k = rng.random_range(cfg.objects_min..=cfg.objects_max);
    let mut bodies = Vec::with_capacity(k);
    let mut indices = Vec::with_capacity(k);
    let mut skipped = Vec::new();
    let mut stack = cfg.floor();
    for _ in 0..k {
        let li = rng.random_range(0..library.len());
        let entry = &library.entries[li];
        match sample_initial_pose(
            &cfg.bin,
            &entry.proxy,
            &entry.name,
            stack,
            cfg.full_rotation,
            &mut rng,
        ) {
            Ok(pose) => {
                let body = Body {
                    proxy: entry.proxy,
                    pose,
                };
                stack = stack.max(Obb::of(&body).highest_z());
                bodies.push(body);
                indices.push(li);
            }
            Err(e) => {
                log::warn!("scene {index}: skipping object: {e}");
                skipped.push(entry.name.clone());
            }
        }
    }
    let settled = settle(&bodies, cfg.floor(), cfg.settle_steps)?;
    Ok(ComposedScene {
        index,
        objects: indices
            .into_iter()
            .zip(settled.poses)
            .map(|(library_index, pose)| PlacedObject {
                library_index,
                pose,
            })
            .collect(),
        cameras,
        settle_steps: settled.steps,
        converged: settled.converged,
        skipped,
    })
}

/// Compose `cfg.num_scenes` settled scenes; scene `i` depends only on
/// `(library, cfg, i)`, so results are independent of thread scheduling.
pub fn generate(library: &VolumeLibrary, cfg: &GenerationConfig) -> Result<Vec<ComposedScene>> {
    cfg.validate()?;
    if library.is_empty() {
        return Err(Error::Domain("volume library is empty".into()));
    }
    (0..cfg.num_scenes)
        .into_par_iter()
        .map(|i| generate_one(library, cfg, i))
        .collect()
}
