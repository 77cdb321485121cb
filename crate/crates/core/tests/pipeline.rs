use std::sync::Arc;

use covren_core::Error;
use covren_core::compositor::{RenderConfig, RenderOutput, render_scene};
use covren_core::dataset::{
    RecordObject, RecordView, read_manifest, validate_dataset, write_scene_record,
};
use covren_core::fitting::{
    FitConfig, LatentVolume, OccupancySupervision, TrainView, fit, occupancy_targets_for_volume,
    sigmoid,
};
use covren_core::geometry::{Camera, CameraIntrinsics, RigidPose, Vec3};
use covren_core::meshing::{extract_object_mesh, marching_cubes, mesh_volume};
use covren_core::procedural::{ProceduralObject, Shape};
use covren_core::scene::Scene;
use covren_core::volume::{GridDims, ObjectVolume};

fn ball() -> ObjectVolume {
    ProceduralObject::new(Shape::Sphere { radius: 0.25 }, [0.8, 0.3, 0.2], 40.0)
        .unwrap()
        .voxelize(12)
        .unwrap()
}

fn cameras() -> Vec<Camera> {
    let k = CameraIntrinsics::from_fov(16, 16, 0.9).unwrap();
    (0..4)
        .map(|i| {
            let a = i as f64 * std::f64::consts::FRAC_PI_2;
            Camera {
                intrinsics: k,
                pose: RigidPose::look_at(
                    Vec3::new(1.8 * a.cos(), 1.8 * a.sin(), 0.6),
                    Vec3::zeros(),
                    Vec3::z(),
                )
                .unwrap(),
            }
        })
        .collect()
}

fn views(gt: &Scene) -> Vec<TrainView> {
    let cfg = RenderConfig {
        samples_per_object: 32,
        ..Default::default()
    };
    cameras()
        .into_iter()
        .map(|c| {
            let out = render_scene(gt, &c, &cfg);
            let mut v = TrainView::new(c, out.rgb);
            v.depth = Some(out.depth);
            v
        })
        .collect()
}

fn setup() -> (Scene, Scene<LatentVolume>, FitConfig) {
    let gt_volume = ball();
    let mut gt = Scene::new();
    gt.add_object(Arc::new(gt_volume.clone()), RigidPose::identity());
    let mut latent = Scene::new();
    let fresh = LatentVolume::fresh(GridDims::cube(12), *gt_volume.bounds(), 0.5, 0.5).unwrap();
    latent.add_object(Arc::new(fresh), RigidPose::identity());
    let mut cfg = FitConfig {
        iterations: 60,
        rays_per_iteration: 128,
        ..Default::default()
    };
    cfg.optimizer.learning_rate = 0.1;
    cfg.render.samples_per_object = 16;
    (gt, latent, cfg)
}

#[test]
fn fitting_descends() {
    let (gt, latent, cfg) = setup();
    let (_, report) = fit(latent, &views(&gt), &cfg, &OccupancySupervision::default()).unwrap();
    let mean = |r: &[_]| {
        r.iter()
            .map(|x: &covren_core::fitting::LossRecord| x.total)
            .sum::<f64>()
            / r.len() as f64
    };
    let (head, tail) = (mean(&report.curve[..10]), mean(&report.curve[50..]));
    assert!(tail < 0.5 * head, "loss {head} -> {tail}");
}

#[test]
fn fitting_is_independent_of_thread_count() {
    let (gt, latent, mut cfg) = setup();
    cfg.iterations = 10;
    let train = views(&gt);
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| {
            fit(
                latent.clone(),
                &train,
                &cfg,
                &OccupancySupervision::default(),
            )
            .unwrap()
        })
    };
    let (a, ra) = run(1);
    let (b, rb) = run(4);
    assert_eq!(a.objects[0].volume.params(), b.objects[0].volume.params());
    assert_eq!(ra.to_csv(), rb.to_csv());
}

#[test]
fn supervised_occupancy_converges_to_labels() {
    let (gt, latent, mut cfg) = setup();
    cfg.weights.occupancy = 1.0;
    let labels = occupancy_targets_for_volume(&gt.objects[0].volume, 20.0).unwrap();
    let supervision = OccupancySupervision {
        background: None,
        objects: vec![Some(labels.clone())],
    };
    let (fitted, _) = fit(latent, &views(&gt), &cfg, &supervision).unwrap();
    let logits = fitted.objects[0].volume.occupancy_logits();
    let agree = logits
        .iter()
        .zip(&labels)
        .filter(|(x, l)| (sigmoid(**x) > 0.5) == l.unwrap())
        .count();
    assert!(
        agree as f64 >= 0.95 * labels.len() as f64,
        "{agree}/{}",
        labels.len()
    );
}

#[test]
fn sphere_mesh_is_closed_outward_and_on_the_surface() {
    let v = ProceduralObject::new(Shape::Sphere { radius: 0.3 }, [0.5; 3], 50.0)
        .unwrap()
        .voxelize(32)
        .unwrap();
    let mesh = marching_cubes(&v, 0.5).unwrap();
    assert!(mesh.is_watertight());
    let mv = mesh_volume(&mesh);
    assert!(mv.reliable && mv.volume > 0.0);
    let voxel = v.bounds().extent().x / 32.0;
    for p in &mesh.vertices {
        assert!((p.norm() - 0.3).abs() < 0.5 * voxel, "{p:?}");
    }
}

#[test]
fn failed_record_write_leaves_no_partial_scene() {
    let dir = tempfile::tempdir().unwrap();
    let volume = ball();
    let mesh = extract_object_mesh(&volume, 0.5, 1.0).unwrap();
    let mut scene = Scene::new();
    scene.add_object(Arc::new(volume.clone()), RigidPose::identity());
    let camera = cameras().remove(0);
    let render = render_scene(&scene, &camera, &RenderConfig::default());
    let objects = [RecordObject {
        id: 1,
        name: "ball",
        pose: RigidPose::identity(),
        volume: &volume,
        mesh: &mesh,
    }];
    let good = [RecordView {
        camera: &camera,
        render: &render,
    }];
    write_scene_record(dir.path(), "000000", &objects, &good, None, false).unwrap();

    let broken = RenderOutput {
        rgb: render.rgb[..render.rgb.len() - 3].to_vec(),
        ..render.clone()
    };
    let bad = [RecordView {
        camera: &camera,
        render: &broken,
    }];
    let err = write_scene_record(dir.path(), "000001", &objects, &bad, None, false).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");
    assert!(!dir.path().join("scenes/000001").exists());

    // an I/O failure midway through the write removes the partial scene
    std::fs::create_dir_all(dir.path().join("volumes/cube.covv")).unwrap();
    let blocked = [RecordObject {
        name: "cube",
        ..objects[0]
    }];
    let err = write_scene_record(dir.path(), "000001", &blocked, &good, None, false).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
    assert!(!dir.path().join("scenes/000001").exists());
    let manifest = read_manifest(dir.path()).unwrap();
    assert_eq!(manifest.len(), 1);
    assert_eq!(manifest[0].scene_id, "000000");
    assert!(validate_dataset(dir.path()).is_clean());
}
