//! `covren` command-line driver.

use std::collections::HashMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::compositor::{RenderConfig, mix_seed, render_scene};
use crate::dataset::{
    RecordObject, RecordView, load_rgb_png, load_scene_record, read_manifest, validate_dataset,
    write_scene_record,
};
use crate::error::{Error, Result};
use crate::fitting::{
    FitConfig, LatentVolume, OccupancySupervision, TrainView, fit, latent_scene_from,
};
use crate::geometry::Camera;
use crate::meshing::{TriangleMesh, export_obj, extract_object_mesh};
use crate::metrics::{RgbImage, psnr, ssim};
use crate::procedural::default_floor;
use crate::scene::{ObjectId, Scene, SceneFile, SceneObjectJson, load_scene_file};
use crate::synthesis::{ComposedScene, GenerationConfig, VolumeLibrary, generate};
use crate::volume::{GridDims, ObjectVolume};

#[derive(Debug, Parser)]
#[command(
    name = "covren",
    version,
    about = "Object-composable volume rendering toolkit"
)]
struct Cli {
    /// Seed for every random choice (sampling, generation, jitter).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// JSON file with "generation", "render" and "fit" sections; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the volumes of a scene to posed views (a dataset directory).
    Fit(FitArgs),
    /// Extract an OBJ mesh from a volume.
    Mesh(MeshArgs),
    /// Generate settled scenes from a volume library and write scene JSON files.
    Compose(ComposeArgs),
    /// Render a scene file's cameras into a dataset record.
    Render(RenderArgs),
    /// Compose, render and write a dataset in one go.
    Generate(GenerateArgs),
    /// PSNR and SSIM between two PNG images.
    Eval(EvalArgs),
    /// Check a dataset directory for consistency.
    Validate(ValidateArgs),
}

#[derive(Debug, Args, Default)]
struct RenderFlags {
    #[arg(long)]
    samples_per_object: Option<usize>,
    #[arg(long)]
    samples_background: Option<usize>,
    #[arg(long)]
    t_far: Option<f64>,
    /// Jitter sample positions within their strata.
    #[arg(long)]
    stratified: bool,
}

#[derive(Debug, Args, Default)]
struct GenerationFlags {
    #[arg(long)]
    num_scenes: Option<usize>,
    #[arg(long)]
    objects_min: Option<usize>,
    #[arg(long)]
    objects_max: Option<usize>,
    #[arg(long)]
    settle_steps: Option<usize>,
    #[arg(long)]
    cameras: Option<usize>,
    #[arg(long)]
    width: Option<u32>,
    #[arg(long)]
    height: Option<u32>,
    /// Sample full 3D orientations instead of yaw only.
    #[arg(long)]
    full_rotation: bool,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    views: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    rays_per_iter: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Start from uniform latents at this grid resolution instead of the scene's volumes.
    #[arg(long)]
    fresh: Option<usize>,
    #[command(flatten)]
    render: RenderFlags,
}

#[derive(Debug, Args)]
struct MeshArgs {
    #[arg(long)]
    volume: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    iso: f64,
    /// Density level used when the occupancy field is empty.
    #[arg(long, default_value_t = 1.0)]
    density_threshold: f64,
}

#[derive(Debug, Args)]
struct ComposeArgs {
    #[arg(long)]
    library: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    background: Option<PathBuf>,
    #[command(flatten)]
    generation: GenerationFlags,
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "000000")]
    scene_id: String,
    #[arg(long)]
    overwrite: bool,
    #[command(flatten)]
    render: RenderFlags,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    library: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    background: Option<PathBuf>,
    #[arg(long)]
    overwrite: bool,
    #[command(flatten)]
    generation: GenerationFlags,
    #[command(flatten)]
    render: RenderFlags,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[arg(long)]
    root: PathBuf,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    generation: Option<GenerationConfig>,
    render: Option<RenderConfig>,
    fit: Option<FitConfig>,
}

struct Globals {
    seed: Option<u64>,
    file: ConfigFile,
}

impl Globals {
    fn render(&self, flags: &RenderFlags) -> Result<RenderConfig> {
        let mut c = self.file.render.unwrap_or_default();
        apply_render_flags(&mut c, flags);
        if let Some(s) = self.seed {
            c.seed = s;
        }
        c.validate()?;
        Ok(c)
    }

    fn generation(&self, flags: &GenerationFlags) -> Result<GenerationConfig> {
        let mut c = self.file.generation.clone().unwrap_or_default();
        let f = flags;
        set(&mut c.num_scenes, f.num_scenes);
        set(&mut c.objects_min, f.objects_min);
        set(&mut c.objects_max, f.objects_max);
        set(&mut c.settle_steps, f.settle_steps);
        set(&mut c.cameras.count, f.cameras);
        set(&mut c.cameras.width, f.width);
        set(&mut c.cameras.height, f.height);
        c.full_rotation |= f.full_rotation;
        set(&mut c.seed, self.seed);
        c.validate()?;
        Ok(c)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn apply_render_flags(c: &mut RenderConfig, f: &RenderFlags) {
    set(&mut c.samples_per_object, f.samples_per_object);
    set(&mut c.samples_background, f.samples_background);
    set(&mut c.t_far, f.t_far);
    c.stratified |= f.stratified;
}

fn require_file(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::MissingFile(p.to_path_buf()))
    }
}

fn require_dir(p: &Path) -> Result<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(Error::MissingFile(p.to_path_buf()))
    }
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn read_config(path: &Path) -> Result<ConfigFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Parse `argv` (including the program name), run, and return the exit code:
/// 0 success, 1 domain error, 2 usage error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => read_config(p)?,
        None => ConfigFile::default(),
    };
    let globals = Globals {
        seed: cli.seed,
        file,
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Domain("--threads must be at least 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| Error::Domain(format!("thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Fit(a) => cmd_fit(&globals, a),
        Command::Mesh(a) => cmd_mesh(a),
        Command::Compose(a) => cmd_compose(&globals, a),
        Command::Render(a) => cmd_render(&globals, a),
        Command::Generate(a) => cmd_generate(&globals, a),
        Command::Eval(a) => cmd_eval(a),
        Command::Validate(a) => cmd_validate(a),
    })
}

fn cmd_fit(g: &Globals, a: FitArgs) -> Result<()> {
    require_file(&a.scene)?;
    require_dir(&a.views)?;
    create_dir(&a.out)?;
    let mut cfg = g.file.fit.clone().unwrap_or_default();
    set(&mut cfg.iterations, a.iters);
    set(&mut cfg.rays_per_iteration, a.rays_per_iter);
    set(&mut cfg.optimizer.learning_rate, a.lr);
    apply_render_flags(&mut cfg.render, &a.render);
    if let Some(s) = g.seed {
        cfg.seed = s;
        cfg.render.seed = s;
    }
    cfg.validate()?;

    let (_, scene) = load_scene_file(&a.scene)?;
    let ids = scene.object_ids();
    let mut views = Vec::new();
    for entry in read_manifest(&a.views)? {
        let record = load_scene_record(&a.views, &entry)?;
        for v in record.views {
            let mut tv = TrainView::new(v.camera, v.rgb);
            tv.depth = Some(v.depth);
            tv.modal_masks = v
                .modal
                .into_iter()
                .filter(|(id, _)| ids.contains(id))
                .collect();
            tv.amodal_masks = v
                .amodal
                .into_iter()
                .filter(|(id, _)| ids.contains(id))
                .collect();
            views.push(tv);
        }
    }
    if views.is_empty() {
        return Err(Error::Domain(format!("no views in {}", a.views.display())));
    }
    let latent = match a.fresh {
        None => latent_scene_from(&scene),
        Some(n) => fresh_latents(&scene, n)?,
    };
    let (fitted, report) = fit(latent, &views, &cfg, &OccupancySupervision::default())?;
    let mut file = SceneFile {
        background: None,
        objects: Vec::new(),
        cameras: views.iter().map(|v| v.camera).collect(),
    };
    if let Some((_, bg)) = &fitted.background {
        bg.decode().save(a.out.join("background.covv"))?;
        file.background = Some("background.covv".into());
    }
    for o in &fitted.objects {
        let name = format!("object_{}.covv", o.id);
        o.volume.decode().save(a.out.join(&name))?;
        file.objects.push(SceneObjectJson {
            volume: name,
            pose: (&o.pose).into(),
            id: Some(o.id),
        });
    }
    file.write(a.out.join("scene.json"))?;
    let csv = a.out.join("loss.csv");
    std::fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    if let Some(last) = report.curve.last() {
        println!(
            "{}",
            serde_json::json!({"iterations": report.curve.len(), "final_loss": last.total})
        );
    }
    Ok(())
}

fn fresh_latents(scene: &Scene, n: usize) -> Result<Scene<LatentVolume>> {
    if n < 2 {
        return Err(Error::Domain(
            "--fresh resolution must be at least 2".into(),
        ));
    }
    let make = |v: &ObjectVolume| {
        LatentVolume::fresh(GridDims::cube(n), *v.bounds(), 0.5, 0.5).map(Arc::new)
    };
    let mut out = Scene::new();
    if let Some((pose, bg)) = &scene.background {
        out.background = Some((*pose, make(bg)?));
    }
    for o in &scene.objects {
        out.objects.push(crate::scene::SceneObject {
            id: o.id,
            pose: o.pose,
            volume: make(&o.volume)?,
        });
    }
    Ok(out)
}

fn cmd_mesh(a: MeshArgs) -> Result<()> {
    require_file(&a.volume)?;
    let v = ObjectVolume::load(&a.volume)?;
    let mesh = extract_object_mesh(&v, a.iso, a.density_threshold)?;
    export_obj(&mesh, &a.out)?;
    println!(
        "{}",
        serde_json::json!({"vertices": mesh.vertices.len(), "triangles": mesh.triangles.len(), "watertight": mesh.is_watertight()})
    );
    Ok(())
}

fn load_background(path: &Option<PathBuf>) -> Result<Arc<ObjectVolume>> {
    match path {
        Some(p) => {
            require_file(p)?;
            Ok(Arc::new(ObjectVolume::load(p)?))
        }
        None => Ok(Arc::new(default_floor())),
    }
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(p).map_err(|e| Error::io(p, e))
}

fn cmd_compose(g: &Globals, a: ComposeArgs) -> Result<()> {
    require_dir(&a.library)?;
    if let Some(b) = &a.background {
        require_file(b)?;
    }
    let cfg = g.generation(&a.generation)?;
    create_dir(&a.out)?;
    let library = VolumeLibrary::load_dir(&a.library)?;
    let background = match &a.background {
        Some(b) => absolute(b)?.display().to_string(),
        None => {
            let p = a.out.join("background.covv");
            default_floor().save(&p)?;
            "background.covv".to_string()
        }
    };
    let scenes = generate(&library, &cfg)?;
    for s in &scenes {
        let file = SceneFile {
            background: Some(background.clone()),
            objects: s
                .objects
                .iter()
                .enumerate()
                .map(|(i, o)| {
                    Ok(SceneObjectJson {
                        volume: absolute(Path::new(&library.entries[o.library_index].provenance))?
                            .display()
                            .to_string(),
                        pose: (&o.pose).into(),
                        id: Some(i as ObjectId + 1),
                    })
                })
                .collect::<Result<Vec<_>>>()?,
            cameras: s.cameras.clone(),
        };
        file.write(a.out.join(format!("scene_{:06}.json", s.index)))?;
        log::info!("composed scene {}/{}", s.index + 1, scenes.len());
    }
    println!("{}", serde_json::json!({"scenes": scenes.len()}));
    Ok(())
}

/// Names for record objects: volume file stem, made unique per distinct volume.
fn object_names(file: &SceneFile) -> Vec<String> {
    let mut by_path: HashMap<&str, String> = HashMap::new();
    let mut used: HashMap<String, usize> = HashMap::new();
    file.objects
        .iter()
        .map(|o| {
            if let Some(n) = by_path.get(o.volume.as_str()) {
                return n.clone();
            }
            let stem: String = Path::new(&o.volume)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "object".into())
                .chars()
                .map(|c| {
                    if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                        c
                    } else {
                        '_'
                    }
                })
                .collect();
            let stem = if stem == "background" || stem.is_empty() {
                format!("obj_{stem}")
            } else {
                stem
            };
            let count = used.entry(stem.clone()).or_insert(0);
            *count += 1;
            let name = if *count == 1 {
                stem
            } else {
                format!("{stem}_{count}")
            };
            by_path.insert(&o.volume, name.clone());
            name
        })
        .collect()
}

fn write_rendered(
    out: &Path,
    scene_id: &str,
    scene: &Scene,
    names: &[String],
    meshes: &[TriangleMesh],
    cameras: &[Camera],
    cfg: &RenderConfig,
    overwrite: bool,
) -> Result<()> {
    let renders: Vec<_> = cameras
        .iter()
        .map(|c| render_scene(scene, c, cfg))
        .collect();
    let mut order: Vec<usize> = (0..scene.objects.len()).collect();
    order.sort_by_key(|&i| scene.objects[i].id);
    let objects: Vec<RecordObject> = order
        .iter()
        .map(|&i| RecordObject {
            id: scene.objects[i].id,
            name: &names[i],
            pose: scene.objects[i].pose,
            volume: &scene.objects[i].volume,
            mesh: &meshes[i],
        })
        .collect();
    let views: Vec<RecordView> = cameras
        .iter()
        .zip(&renders)
        .map(|(camera, render)| RecordView { camera, render })
        .collect();
    let bg = scene.background.as_ref().map(|(_, v)| v.as_ref());
    write_scene_record(out, scene_id, &objects, &views, bg, overwrite)?;
    Ok(())
}

fn cmd_render(g: &Globals, a: RenderArgs) -> Result<()> {
    require_file(&a.scene)?;
    let cfg = g.render(&a.render)?;
    create_dir(&a.out)?;
    let (file, scene) = load_scene_file(&a.scene)?;
    if file.cameras.is_empty() {
        return Err(Error::Domain(format!(
            "{} has no cameras",
            a.scene.display()
        )));
    }
    let names = object_names(&file);
    let meshes = scene
        .objects
        .iter()
        .map(|o| extract_object_mesh(&o.volume, 0.5, 1.0))
        .collect::<Result<Vec<_>>>()?;
    write_rendered(
        &a.out,
        &a.scene_id,
        &scene,
        &names,
        &meshes,
        &file.cameras,
        &cfg,
        a.overwrite,
    )?;
    println!(
        "{}",
        serde_json::json!({"scene_id": a.scene_id, "views": file.cameras.len()})
    );
    Ok(())
}

fn cmd_generate(g: &Globals, a: GenerateArgs) -> Result<()> {
    require_dir(&a.library)?;
    let gen_cfg = g.generation(&a.generation)?;
    let render_cfg = g.render(&a.render)?;
    let background = load_background(&a.background)?;
    create_dir(&a.out)?;
    let library = VolumeLibrary::load_dir(&a.library)?;
    let scenes = generate(&library, &gen_cfg)?;
    let total = scenes.len();
    for s in &scenes {
        write_composed(&a.out, s, &library, &background, &render_cfg, a.overwrite)?;
        log::info!("scene {}/{total} written", s.index + 1);
    }
    println!(
        "{}",
        serde_json::json!({"scenes": total, "out": a.out.display().to_string()})
    );
    Ok(())
}

fn write_composed(
    out: &Path,
    s: &ComposedScene,
    library: &VolumeLibrary,
    background: &Arc<ObjectVolume>,
    cfg: &RenderConfig,
    overwrite: bool,
) -> Result<()> {
    let scene = s.to_scene(library, Some(Arc::clone(background)));
    let names: Vec<String> = s
        .objects
        .iter()
        .map(|o| library.entries[o.library_index].name.clone())
        .collect();
    let meshes: Vec<TriangleMesh> = s
        .objects
        .iter()
        .map(|o| library.entries[o.library_index].mesh.clone())
        .collect();
    let cfg = RenderConfig {
        seed: mix_seed(cfg.seed, s.index as u64),
        ..*cfg
    };
    write_rendered(
        out,
        &format!("{:06}", s.index),
        &scene,
        &names,
        &meshes,
        &s.cameras,
        &cfg,
        overwrite,
    )
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    require_file(&a.pred)?;
    require_file(&a.gt)?;
    let (pw, ph, p) = load_rgb_png(&a.pred)?;
    let (gw, gh, t) = load_rgb_png(&a.gt)?;
    let pred = RgbImage::from_f32(pw as usize, ph as usize, &p)?;
    let gt = RgbImage::from_f32(gw as usize, gh as usize, &t)?;
    let p = psnr(&pred, &gt)?;
    let s = ssim(&pred, &gt)?;
    let psnr_json = if p.is_infinite() {
        serde_json::json!("+inf")
    } else {
        serde_json::json!(p)
    };
    println!("{}", serde_json::json!({"psnr": psnr_json, "ssim": s}));
    Ok(())
}

fn cmd_validate(a: ValidateArgs) -> Result<()> {
    let report = validate_dataset(&a.root);
    println!(
        "{}",
        serde_json::json!({
            "scenes": report.scenes,
            "views": report.views,
            "agreement": report.agreement(),
            "findings": report.findings,
        })
    );
    if report.is_clean() {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "{} finding(s) in {}",
            report.findings.len(),
            a.root.display()
        )))
    }
}
