//! Acceptance suite: one PASS/FAIL line per criterion.

use std::panic::{AssertUnwindSafe, catch_unwind};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use covren_core::compositor::{
    RenderConfig, Source, composite, gather_ray, render_ray, render_scene,
};
use covren_core::dataset::{read_pfm, validate_dataset, write_pfm};
use covren_core::fitting::{
    CHANNELS, FitConfig, LatentVolume, LossWeights, OccupancySupervision, RayTargets, TrainView,
    decode_scene, fit, ray_loss_and_gradients,
};
use covren_core::geometry::{
    AxisAlignedBox, Camera, CameraIntrinsics, Ray, RigidPose, Vec3, intersect_ray_box,
};
use covren_core::meshing::{marching_cubes, mesh_volume};
use covren_core::metrics::{RgbImage, psnr, ssim};
use covren_core::procedural::{ProceduralObject, Shape};
use covren_core::scene::Scene;
use covren_core::synthesis::{GenerationConfig, VolumeLibrary, generate, plausibility};
use covren_core::volume::{GridDims, ObjectVolume};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, detail: String) -> Outcome {
    if cond { Ok(detail) } else { Err(detail) }
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

fn random_pose(rng: &mut ChaCha8Rng, spread: f64) -> RigidPose {
    let t = Vec3::new(
        rng.random_range(-spread..spread),
        rng.random_range(-spread..spread),
        rng.random_range(-spread..spread),
    );
    RigidPose::from_axis_angle(
        random_unit(rng),
        rng.random_range(0.0..std::f64::consts::PI),
        t,
    )
}

fn ray_towards(rng: &mut ChaCha8Rng, radius: f64, spread: f64) -> Ray {
    let origin = random_unit(rng) * radius;
    let target = Vec3::new(
        rng.random_range(-spread..spread),
        rng.random_range(-spread..spread),
        rng.random_range(-spread..spread),
    );
    Ray::new(origin, target - origin).unwrap()
}

fn latent_mut(scene: &mut Scene<LatentVolume>, source: Source) -> &mut LatentVolume {
    match source {
        Source::Background => Arc::make_mut(&mut scene.background.as_mut().unwrap().1),
        Source::Object(i) => Arc::make_mut(&mut scene.objects[i].volume),
    }
}

fn random_latent(rng: &mut ChaCha8Rng, half: f64) -> LatentVolume {
    let bounds = AxisAlignedBox::centered([half; 3]).unwrap();
    let mut v = LatentVolume::fresh(GridDims::cube(8), bounds, 1.0, 0.5).unwrap();
    let n = v.dims().len();
    for ch in 0..CHANNELS {
        for i in 0..n {
            let x = if ch == 0 {
                rng.random_range(-3.0..2.5)
            } else {
                rng.random_range(-2.0..2.0)
            };
            v.set_param(ch, i, x);
        }
    }
    v
}

/// Analytic ray-loss gradients against central differences.
fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let h = 1e-3;
    let (mut cases, mut compared, mut failures) = (0, 0, 0);
    let mut worst_rel: f64 = 0.0;
    while cases < 64 {
        let mut scene = Scene::new();
        if rng.random_bool(0.3) {
            scene = scene.with_background(Arc::new(random_latent(&mut rng, 0.8)));
        }
        for _ in 0..rng.random_range(1..=3) {
            let v = random_latent(&mut rng, 0.25);
            scene.add_object(Arc::new(v), random_pose(&mut rng, 0.2));
        }
        let ray = ray_towards(&mut rng, 2.0, 0.15);
        let ids = scene.object_ids();
        let targets = RayTargets {
            color: [0; 3].map(|_| rng.random_range(0.0..1.0)),
            depth: Some(rng.random_range(1.5..2.5)),
            modal: ids
                .iter()
                .map(|&id| (id, rng.random_range(0.0..1.0)))
                .collect(),
            amodal: ids
                .iter()
                .map(|&id| (id, rng.random_range(0.0..1.0)))
                .collect(),
        };
        let weights = LossWeights {
            depth_opacity_threshold: 0.0,
            ..Default::default()
        };
        let config = RenderConfig {
            samples_per_object: 16,
            samples_background: 16,
            stratified: true,
            ..Default::default()
        };
        let depth_scale = rng.random_range(0.7..1.0);
        let seed: u64 = rng.random();
        let eval = |s: &Scene<LatentVolume>| {
            ray_loss_and_gradients(s, &ray, depth_scale, &targets, &weights, &config, seed)
        };
        let grads = eval(&scene).merged_gradients();
        if grads.is_empty() {
            continue;
        }
        cases += 1;
        let picks: Vec<_> = if grads.len() <= 32 {
            grads
        } else {
            (0..32)
                .map(|_| grads[rng.random_range(0..grads.len())])
                .collect()
        };
        for g in picks {
            let (ch, voxel) = (g.channel as usize, g.voxel as usize);
            let x0 = latent_mut(&mut scene, g.source).param(ch, voxel);
            let mut plus = scene.clone();
            latent_mut(&mut plus, g.source).set_param(ch, voxel, x0 + h);
            let mut minus = scene.clone();
            latent_mut(&mut minus, g.source).set_param(ch, voxel, x0 - h);
            let fd = (eval(&plus).loss.total - eval(&minus).loss.total) / (2.0 * h);
            let err = (g.value - fd).abs();
            let rel = err / g.value.abs().max(fd.abs());
            compared += 1;
            if g.value.abs().max(fd.abs()) > 1e-6 {
                worst_rel = worst_rel.max(rel);
            }
            if err >= 1e-6 && rel >= 1e-3 {
                failures += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        failures == 0 && elapsed < Duration::from_secs(30),
        format!(
            "{cases} cases, {compared} partials, {failures} failures, worst rel {worst_rel:.2e}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn random_procedural_scene(rng: &mut ChaCha8Rng) -> Scene {
    let mut scene = Scene::new();
    for _ in 0..rng.random_range(2..=5) {
        let shape = match rng.random_range(0..3) {
            0 => Shape::Sphere {
                radius: rng.random_range(0.08..0.2),
            },
            1 => Shape::Cuboid {
                half_extent: [0; 3].map(|_| rng.random_range(0.05..0.18)),
            },
            _ => Shape::Cylinder {
                radius: rng.random_range(0.05..0.15),
                half_height: rng.random_range(0.05..0.2),
            },
        };
        let color = [0; 3].map(|_| rng.random_range(0.0..1.0));
        let density = rng.random_range(5.0..80.0);
        let v = ProceduralObject::new(shape, color, density)
            .unwrap()
            .voxelize(12)
            .unwrap();
        scene.add_object(Arc::new(v), random_pose(rng, 0.25));
    }
    scene
}

/// Partition of unity, monotone transmittance, modal <= amodal, permutation invariance.
fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let config = RenderConfig {
        samples_per_object: 32,
        stratified: true,
        ..Default::default()
    };
    let (mut pixels, mut hit) = (0, 0);
    let (mut partition_err, mut modal_excess, mut perm_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut monotone = true;
    for s in 0..20 {
        let scene = random_procedural_scene(&mut rng);
        for _ in 0..50 {
            let ray = ray_towards(&mut rng, 2.0, 0.3);
            let seed: u64 = rng.random();
            let batch = gather_ray(&scene, &ray, &config, seed);
            let r = composite(&batch).unwrap();
            pixels += 1;
            if r.total_opacity > 0.0 {
                hit += 1;
            }
            let mut optical = 0.0f64;
            let mut last_t = 1.0;
            for e in &batch.entries {
                let t = (-optical).exp();
                monotone &= t <= last_t;
                last_t = t;
                optical += e.delta * e.density;
            }
            let residual = (-optical).exp();
            let modal_sum: f64 = r.per_owner.iter().map(|w| w.modal).sum();
            partition_err = partition_err
                .max((modal_sum + residual - 1.0).abs())
                .max((r.total_opacity - modal_sum).abs());
            for w in &r.per_owner {
                modal_excess = modal_excess.max(w.modal - w.amodal);
            }
        }
        let cam = Camera {
            intrinsics: CameraIntrinsics::from_fov(24, 24, 0.9).unwrap(),
            pose: RigidPose::look_at(random_unit(&mut rng) * 2.0, Vec3::zeros(), Vec3::z())
                .or_else(|_| RigidPose::look_at(Vec3::new(2.0, 0.0, 0.1), Vec3::zeros(), Vec3::z()))
                .unwrap(),
        };
        let a = render_scene(&scene, &cam, &config);
        let mut shuffled = scene.clone();
        shuffled.objects.reverse();
        let k = shuffled.objects.len();
        shuffled.objects.swap(0, k / 2);
        let b = render_scene(&shuffled, &cam, &config);
        let diff = |x: &[f32], y: &[f32]| {
            x.iter()
                .zip(y)
                .map(|(p, q)| (p - q).abs() as f64)
                .fold(0.0, f64::max)
        };
        perm_err = perm_err
            .max(diff(&a.rgb, &b.rgb))
            .max(diff(&a.depth, &b.depth))
            .max(diff(&a.opacity, &b.opacity));
        for i in 0..a.object_ids.len() {
            perm_err = perm_err
                .max(diff(&a.modal_masks[i], &b.modal_masks[i]))
                .max(diff(&a.amodal_masks[i], &b.amodal_masks[i]));
        }
        assert_eq!(a.object_ids, b.object_ids, "scene {s}");
    }
    let elapsed = start.elapsed();
    check(
        partition_err <= 1e-9
            && monotone
            && modal_excess <= 1e-12
            && perm_err <= 1e-6
            && hit >= pixels / 2
            && elapsed < Duration::from_secs(60),
        format!(
            "{pixels} pixels ({hit} hit), partition err {partition_err:.1e}, monotone {monotone}, \
             max modal-amodal {modal_excess:.1e}, permutation err {perm_err:.1e}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

/// Chord opacity through a uniform cube against the closed form.
fn criterion_3() -> Outcome {
    let sigma = 2.0;
    let half = 0.5;
    let bounds = AxisAlignedBox::centered([half; 3]).unwrap();
    let v = ObjectVolume::from_fn(GridDims::cube(8), bounds, |_| (sigma, [0.5; 3], 0.0)).unwrap();
    let mut scene = Scene::new();
    scene.add_object(Arc::new(v), RigidPose::identity());
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut worst64, mut worst_ratio): (f64, f64) = (0.0, 0.0);
    for _ in 0..16 {
        let ray = ray_towards(&mut rng, 3.0, 0.2);
        let (t0, t1) = intersect_ray_box(&ray, &bounds, &RigidPose::identity()).unwrap();
        let expected = 1.0 - (-sigma * (t1 - t0)).exp();
        let err = |n| {
            let cfg = RenderConfig {
                samples_per_object: n,
                ..Default::default()
            };
            let r = render_ray(&scene, &ray, &cfg, 0);
            (r.total_opacity - expected).abs() / expected
        };
        let (e64, e128) = (err(64), err(128));
        worst64 = worst64.max(e64);
        worst_ratio = worst_ratio.max(e128 / e64);
    }
    check(
        worst64 < 0.02 && worst_ratio <= 0.5,
        format!(
            "16 chords, worst rel err at N=64 {worst64:.2e}, worst err(128)/err(64) {worst_ratio:.3}"
        ),
    )
}

fn slab(z0: f64, z1: f64, half_xy: f64, color: [f64; 3]) -> (ObjectVolume, RigidPose) {
    let c = 0.5 * (z0 + z1);
    let bounds = AxisAlignedBox::centered([half_xy, half_xy, 0.5 * (z1 - z0)]).unwrap();
    let v = ObjectVolume::from_fn(GridDims::new(4, 16, 16), bounds, |_| (1e4, color, 6.0)).unwrap();
    (v, RigidPose::from_translation(Vec3::new(0.0, 0.0, c)))
}

/// Camera-z depth of an opaque plane, and occlusion of modal vs amodal weight.
fn criterion_4() -> Outcome {
    let cam = Camera {
        intrinsics: CameraIntrinsics::from_fov(48, 36, 1.0).unwrap(),
        pose: RigidPose::look_at(Vec3::zeros(), Vec3::new(0.0, 0.0, 1.0), Vec3::y()).unwrap(),
    };
    let cfg = RenderConfig::default();
    let mut scene = Scene::new();
    let (v, pose) = slab(1.0, 1.05, 2.0, [0.7; 3]);
    scene.add_object(Arc::new(v), pose);
    let out = render_scene(&scene, &cam, &cfg);
    let good = out
        .depth
        .iter()
        .filter(|&&d| ((d as f64) - 1.0).abs() <= 0.01)
        .count();
    let frac = good as f64 / out.depth.len() as f64;

    let (front, fp) = slab(1.0, 1.05, 0.3, [1.0, 0.0, 0.0]);
    let (back, bp) = slab(1.5, 1.55, 0.3, [0.0, 0.0, 1.0]);
    let mut occ = Scene::new();
    occ.add_object(Arc::new(front), fp);
    let back_id = occ.add_object(Arc::new(back), bp);
    let r = render_ray(&occ, &cam.ray(24, 18).unwrap(), &cfg, 0);
    let (modal, amodal) = (r.modal(back_id), r.amodal(back_id));
    check(
        frac >= 0.95 && modal < 0.01 && amodal > 0.9,
        format!(
            "{:.1}% of pixels within 1%, occluded modal {modal:.2e}, amodal {amodal:.4}",
            100.0 * frac
        ),
    )
}

/// Fit fresh latents to renders of a two-object scene and score a held-out view.
fn criterion_5() -> Outcome {
    let start = Instant::now();
    let objects = [
        (0.25, [0.85, 0.25, 0.15], Vec3::new(-0.2, 0.0, 0.0)),
        (0.2, [0.15, 0.45, 0.9], Vec3::new(0.25, 0.1, 0.05)),
    ];
    let mut gt = Scene::new();
    for (r, c, t) in objects {
        let v = ProceduralObject::new(Shape::Sphere { radius: r }, c, 40.0)
            .unwrap()
            .voxelize(32)
            .unwrap();
        gt.add_object(Arc::new(v), RigidPose::from_translation(t));
    }
    let k = CameraIntrinsics::from_fov(64, 64, 0.9).unwrap();
    let camera = |azimuth: f64, elevation: f64| {
        let eye = Vec3::new(
            2.0 * elevation.cos() * azimuth.cos(),
            2.0 * elevation.cos() * azimuth.sin(),
            2.0 * elevation.sin(),
        );
        Camera {
            intrinsics: k,
            pose: RigidPose::look_at(eye, Vec3::zeros(), Vec3::z()).unwrap(),
        }
    };
    let render_cfg = RenderConfig::default();
    let views: Vec<TrainView> = (0..8)
        .map(|i| {
            let el = if i % 2 == 0 { 0.3 } else { 0.7 };
            let cam = camera(i as f64 * std::f64::consts::TAU / 8.0, el);
            let out = render_scene(&gt, &cam, &render_cfg);
            let mut v = TrainView::new(cam, out.rgb.clone());
            v.depth = Some(out.depth.clone());
            v.modal_masks = out
                .object_ids
                .iter()
                .copied()
                .zip(out.modal_masks.clone())
                .collect();
            v.amodal_masks = out
                .object_ids
                .iter()
                .copied()
                .zip(out.amodal_masks.clone())
                .collect();
            v
        })
        .collect();

    let mut latent = Scene::new();
    for o in &gt.objects {
        let fresh = LatentVolume::fresh(GridDims::cube(32), *o.volume.bounds(), 0.5, 0.5).unwrap();
        latent.add_object(Arc::new(fresh), o.pose);
    }
    let mut cfg = FitConfig {
        iterations: 2000,
        rays_per_iteration: 1024,
        ..Default::default()
    };
    cfg.optimizer.learning_rate = 0.05;
    let (fitted, report) = fit(latent, &views, &cfg, &OccupancySupervision::default()).unwrap();

    let held_out = camera(0.4, 0.5);
    let truth = render_scene(&gt, &held_out, &render_cfg);
    let pred = render_scene(&decode_scene(&fitted), &held_out, &render_cfg);
    let a = RgbImage::from_f32(64, 64, &pred.rgb).unwrap();
    let b = RgbImage::from_f32(64, 64, &truth.rgb).unwrap();
    let (p, s) = (psnr(&a, &b).unwrap(), ssim(&a, &b).unwrap());
    let last = report.curve.last().map_or(f64::NAN, |r| r.total);
    check(
        p > 28.0 && s > 0.85,
        format!(
            "held-out PSNR {p:.2} dB, SSIM {s:.4}, final loss {last:.3e}, {:.0}s",
            start.elapsed().as_secs_f64()
        ),
    )
}

/// Marching Cubes volume of a voxelized sphere and its convergence.
fn criterion_6() -> Outcome {
    let exact = 4.0 / 3.0 * std::f64::consts::PI * 0.3f64.powi(3);
    let sphere = ProceduralObject::new(Shape::Sphere { radius: 0.3 }, [0.5; 3], 50.0).unwrap();
    let measure = |n| {
        let mesh = marching_cubes(&sphere.voxelize(n).unwrap(), 0.5).unwrap();
        let mv = mesh_volume(&mesh);
        (mesh.is_watertight(), (mv.volume - exact).abs() / exact)
    };
    let (tight64, e64) = measure(64);
    let (_, e32) = measure(32);
    check(
        tight64 && e64 < 0.05 && e64 <= 0.5 * e32,
        format!("watertight {tight64}, rel err 64^3 {e64:.2e}, 32^3 {e32:.2e} (exact {exact:.5})"),
    )
}

fn procedural_library() -> VolumeLibrary {
    let mut lib = VolumeLibrary::new();
    let shapes = [
        (
            Shape::Cuboid {
                half_extent: [0.08, 0.06, 0.05],
            },
            [0.8, 0.2, 0.2],
        ),
        (Shape::Sphere { radius: 0.07 }, [0.2, 0.7, 0.3]),
        (
            Shape::Cylinder {
                radius: 0.05,
                half_height: 0.09,
            },
            [0.2, 0.3, 0.8],
        ),
        (
            Shape::Cuboid {
                half_extent: [0.12, 0.04, 0.03],
            },
            [0.9, 0.8, 0.2],
        ),
        (Shape::Sphere { radius: 0.05 }, [0.6, 0.2, 0.7]),
        (
            Shape::Cylinder {
                radius: 0.08,
                half_height: 0.04,
            },
            [0.3, 0.8, 0.8],
        ),
    ];
    for (i, (s, c)) in shapes.into_iter().enumerate() {
        let v = ProceduralObject::new(s, c, 60.0)
            .unwrap()
            .voxelize(12)
            .unwrap();
        lib.add(format!("shape{i}"), v, "procedural").unwrap();
    }
    lib
}

/// Settled scenes are physically plausible and regenerate identically.
fn criterion_7() -> Outcome {
    let lib = procedural_library();
    let cfg = GenerationConfig {
        num_scenes: 100,
        objects_min: 3,
        objects_max: 8,
        full_rotation: true,
        seed: 77,
        ..Default::default()
    };
    let scenes = generate(&lib, &cfg).unwrap();
    let again = generate(&lib, &cfg).unwrap();
    let identical = format!("{scenes:?}") == format!("{again:?}");
    let (mut floor, mut pair, mut floating, mut implausible) = (0, 0, 0, 0);
    let (mut worst_floor, mut worst_pair): (f64, f64) = (0.0, 0.0);
    let mut counts = (usize::MAX, 0);
    for s in &scenes {
        let p = plausibility(&s.bodies(&lib), cfg.floor());
        floor += (p.max_floor_penetration > 1e-3) as usize;
        pair += (p.max_pair_penetration > 1e-2) as usize;
        floating += p.floating.len();
        implausible += (!p.is_plausible()) as usize;
        worst_floor = worst_floor.max(p.max_floor_penetration);
        worst_pair = worst_pair.max(p.max_pair_penetration);
        let k = s.objects.len() + s.skipped.len();
        counts = (counts.0.min(k), counts.1.max(k));
    }
    check(
        scenes.len() == 100
            && floor == 0
            && pair == 0
            && floating == 0
            && implausible == 0
            && identical
            && counts.0 >= 3
            && counts.1 <= 8,
        format!(
            "{} scenes, K in [{}, {}], floor violations {floor} (worst {worst_floor:.1e}), pair violations {pair} \
             (worst {worst_pair:.1e}), floating {floating}, byte-identical {identical}",
            scenes.len(),
            counts.0,
            counts.1
        ),
    )
}

/// Generated dataset validates clean; depth PFM round-trips bit-exactly.
fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let lib = dir.path().join("lib");
    std::fs::create_dir_all(&lib).unwrap();
    for (i, entry) in procedural_library().entries.iter().enumerate() {
        entry
            .volume
            .save(lib.join(format!("shape{i}.covv")))
            .unwrap();
    }
    let root = dir.path().join("dataset");
    let s = |p: &Path| p.to_str().unwrap().to_owned();
    let out = Command::new(env!("CARGO_BIN_EXE_covren"))
        .args([
            "generate",
            "--library",
            &s(&lib),
            "--out",
            &s(&root),
            "--num-scenes",
            "20",
            "--seed",
            "8",
        ])
        .args([
            "--objects-min",
            "3",
            "--objects-max",
            "6",
            "--width",
            "48",
            "--height",
            "48",
        ])
        .args(["--samples-per-object", "32", "--samples-background", "32"])
        .output()
        .unwrap();
    if !out.status.success() {
        return Err(format!(
            "generate failed: {}",
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    let report = validate_dataset(&root);

    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let (w, h) = (37, 23);
    let mut data: Vec<f32> = (0..w * h)
        .map(|_| f32::from_bits(rng.random::<u32>() & 0x7f7f_ffff))
        .collect();
    data[..6].copy_from_slice(&[
        0.0,
        -0.0,
        f32::INFINITY,
        f32::MIN_POSITIVE / 4.0,
        f32::MAX,
        1.0,
    ]);
    let pfm = dir.path().join("depth.pfm");
    write_pfm(&pfm, w, h, &data).unwrap();
    let (rw, rh, back) = read_pfm(&pfm).unwrap();
    let exact = (rw, rh) == (w, h)
        && back
            .iter()
            .zip(&data)
            .all(|(a, b)| a.to_bits() == b.to_bits());
    check(
        report.is_clean() && report.scenes == 20 && report.agreement() >= 0.99 && exact,
        format!(
            "{} scenes, {} views, {} findings, owner agreement {:.4} over {} opaque pixels, PFM bit-exact {exact}",
            report.scenes,
            report.views,
            report.findings.len(),
            report.agreement(),
            report.opaque_pixels
        ),
    )
}

/// PSNR and SSIM closed forms and symmetry.
fn criterion_9() -> Outcome {
    let (w, h) = (32, 24);
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let base: Vec<f64> = (0..w * h * 3).map(|_| rng.random_range(0.2..0.8)).collect();
    let a = RgbImage::new(w, h, base.clone()).unwrap();
    let b = RgbImage::new(w, h, base.iter().map(|x| x + 0.1).collect()).unwrap();
    let c = RgbImage::new(
        w,
        h,
        (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect(),
    )
    .unwrap();
    let uniform = psnr(&a, &b).unwrap();
    let gray = psnr(&RgbImage::filled(w, h, 0.5), &RgbImage::filled(w, h, 0.6)).unwrap();
    let same = ssim(&c, &c).unwrap();
    let sym_psnr = psnr(&a, &c).unwrap() == psnr(&c, &a).unwrap();
    let sym_ssim = ssim(&a, &c).unwrap() == ssim(&c, &a).unwrap();
    check(
        (uniform - 20.0).abs() < 1e-9
            && (gray - 20.0).abs() < 1e-9
            && psnr(&c, &c).unwrap() == f64::INFINITY
            && (same - 1.0).abs() < 1e-12
            && sym_psnr
            && sym_ssim,
        format!(
            "uniform 0.1 error {uniform:.12} dB, SSIM(x, x) {same:.12}, symmetric psnr {sym_psnr} ssim {sym_ssim}"
        ),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient oracle", criterion_1),
        ("compositing identities", criterion_2),
        ("Beer-Lambert oracle", criterion_3),
        ("depth oracle", criterion_4),
        ("round-trip inverse rendering", criterion_5),
        ("marching cubes oracle", criterion_6),
        ("settling plausibility sweep", criterion_7),
        ("dataset coherence", criterion_8),
        ("metrics sanity", criterion_9),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(d) => println!("PASS criterion {n} ({name}): {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}): {d}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
