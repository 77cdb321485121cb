//! Dataset layout: rendered supervision written as PNG/PFM files plus a
//! JSON-lines manifest, and the matching reader and validator.
//!
//! ```text
//! root/manifest.jsonl
//! root/scenes/<id>/scene.json
//! root/scenes/<id>/cam<k>/{rgb.png, depth.pfm, depth_preview.png, opacity.png,
//!                          owner.png, camera.json, modal_<obj>.png, amodal_<obj>.png}
//! root/meshes/<name>.obj
//! root/volumes/<name>.covv
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, ImageFormat, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::compositor::RenderOutput;
use crate::error::{Error, Result};
use crate::geometry::{Camera, PoseJson, RigidPose};
use crate::meshing::{TriangleMesh, export_obj, read_obj};
use crate::scene::{ObjectId, SceneFile, SceneObjectJson};
use crate::volume::ObjectVolume;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.jsonl";
/// Owner-map value for pixels where no sample terminated.
pub const NO_OWNER: u16 = u16::MAX;
/// Opacity above which a pixel counts as opaque for coherence checks.
pub const OPAQUE_THRESHOLD: f32 = 0.5;
pub const MIN_AGREEMENT: f64 = 0.99;
const BACKGROUND_NAME: &str = "background";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestObject {
    pub id: ObjectId,
    pub name: String,
    pub pose: PoseJson,
    pub mesh: String,
    pub volume: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestCamera {
    pub camera: String,
    pub rgb: String,
    pub depth: String,
    pub depth_preview: String,
    pub opacity: String,
    pub owner: String,
    pub modal: BTreeMap<ObjectId, String>,
    pub amodal: BTreeMap<ObjectId, String>,
}

impl ManifestCamera {
    pub fn files(&self) -> Vec<&str> {
        let mut v = vec![
            self.camera.as_str(),
            &self.rgb,
            &self.depth,
            &self.depth_preview,
            &self.opacity,
            &self.owner,
        ];
        v.extend(self.modal.values().map(String::as_str));
        v.extend(self.amodal.values().map(String::as_str));
        v
    }
}

/// One manifest line. Paths are relative to the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub format: u32,
    pub scene_id: String,
    pub scene: String,
    pub objects: Vec<ManifestObject>,
    pub cameras: Vec<ManifestCamera>,
}

impl ManifestEntry {
    pub fn files(&self) -> Vec<&str> {
        let mut v = vec![self.scene.as_str()];
        for o in &self.objects {
            v.push(&o.mesh);
            v.push(&o.volume);
        }
        for c in &self.cameras {
            v.extend(c.files());
        }
        v
    }
}

fn safe_name(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
        && s != "."
        && s != ".."
}

fn safe_rel_path(s: &str) -> bool {
    !s.is_empty() && !s.starts_with('/') && s.split('/').all(safe_name)
}

/// Structural checks beyond what deserialization enforces.
pub fn validate_entry(e: &ManifestEntry) -> Result<()> {
    let fail = |m: String| Err(Error::Schema(format!("scene {:?}: {m}", e.scene_id)));
    if e.format != FORMAT_VERSION {
        return fail(format!(
            "unsupported format {} (expected {FORMAT_VERSION})",
            e.format
        ));
    }
    if !safe_name(&e.scene_id) {
        return fail("scene_id must be a non-empty [A-Za-z0-9._-] name".into());
    }
    let mut ids = BTreeSet::new();
    for o in &e.objects {
        if o.id == 0 || !ids.insert(o.id) {
            return fail(format!("object id {} is zero or repeated", o.id));
        }
        if !safe_name(&o.name) {
            return fail(format!("object name {:?} is not a safe file name", o.name));
        }
        RigidPose::try_from(&o.pose)
            .map_err(|err| Error::Schema(format!("object {}: {err}", o.id)))?;
    }
    if e.cameras.is_empty() {
        return fail("no cameras".into());
    }
    for (k, c) in e.cameras.iter().enumerate() {
        let modal: BTreeSet<_> = c.modal.keys().copied().collect();
        let amodal: BTreeSet<_> = c.amodal.keys().copied().collect();
        if modal != ids || amodal != ids {
            return fail(format!(
                "camera {k} mask ids {modal:?}/{amodal:?} differ from object ids {ids:?}"
            ));
        }
    }
    if let Some(p) = e.files().into_iter().find(|p| !safe_rel_path(p)) {
        return fail(format!("path {p:?} is not a plain relative path"));
    }
    Ok(())
}

/// Parse one manifest line; `line` is 1-based and only used for errors.
pub fn parse_manifest_line(path: &Path, line: usize, text: &str) -> Result<ManifestEntry> {
    let entry: ManifestEntry = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    })?;
    validate_entry(&entry)?;
    Ok(entry)
}

/// All manifest entries, sorted by scene id. A missing manifest reads as empty.
pub fn read_manifest(root: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = root.as_ref().join(MANIFEST);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut entries = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_manifest_line(&path, i + 1, l))
        .collect::<Result<Vec<_>>>()?;
    entries.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
    Ok(entries)
}

// ---------------------------------------------------------------- PFM

/// Single-channel little-endian PFM (scale -1.0), rows stored bottom-to-top.
pub fn write_pfm(path: impl AsRef<Path>, width: u32, height: u32, data: &[f32]) -> Result<()> {
    let path = path.as_ref();
    if data.len() != width as usize * height as usize {
        return Err(Error::Contract(format!(
            "{} values for a {width}x{height} PFM",
            data.len()
        )));
    }
    let mut bytes = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    bytes.reserve(4 * data.len());
    for row in (0..height as usize).rev() {
        for &v in &data[row * width as usize..(row + 1) * width as usize] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<(u32, u32, Vec<f32>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::CorruptImage {
        path: path.to_path_buf(),
        message: m.to_string(),
    };
    // header: four whitespace-separated tokens followed by a single whitespace byte
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if tokens[0] != "Pf" {
        return Err(bad(&format!(
            "expected single-channel 'Pf', found {:?}",
            tokens[0]
        )));
    }
    let width: u32 = tokens[1].parse().map_err(|_| bad("bad width"))?;
    let height: u32 = tokens[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = tokens[3].parse().map_err(|_| bad("bad scale"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(bad("scale must be nonzero"));
    }
    let n = width as usize * height as usize;
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != 4 * n {
        return Err(bad(&format!(
            "expected {} data bytes, found {}",
            4 * n,
            body.len()
        )));
    }
    let mut data = vec![0f32; n];
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if scale < 0.0 {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (row, col) = (i / width as usize, i % width as usize);
        data[(height as usize - 1 - row) * width as usize + col] = v;
    }
    Ok((width, height, data))
}

// ---------------------------------------------------------------- PNG helpers

fn quantize8(x: f32) -> u8 {
    (x as f64 * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Depth preview value in millimeters, saturating at 65.535 m.
pub fn depth_to_mm(d: f32) -> u16 {
    if !d.is_finite() || d <= 0.0 {
        return 0;
    }
    (d as f64 * 1000.0).round().min(65535.0) as u16
}

fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::CorruptImage {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

fn save_gray8(path: &Path, w: u32, h: u32, data: &[f32]) -> Result<()> {
    let px: Vec<u8> = data.iter().map(|&x| quantize8(x)).collect();
    ImageBuffer::<Luma<u8>, _>::from_raw(w, h, px)
        .expect("buffer sized")
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

fn save_gray16(path: &Path, w: u32, h: u32, px: Vec<u16>) -> Result<()> {
    ImageBuffer::<Luma<u16>, _>::from_raw(w, h, px)
        .expect("buffer sized")
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

fn save_rgb8(path: &Path, w: u32, h: u32, data: &[f32]) -> Result<()> {
    let px: Vec<u8> = data.iter().map(|&x| quantize8(x)).collect();
    ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, px)
        .expect("buffer sized")
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

fn open_png(path: &Path) -> Result<image::DynamicImage> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    reader
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))
}

fn expect_size(path: &Path, img: &image::DynamicImage, w: u32, h: u32) -> Result<()> {
    if img.width() != w || img.height() != h {
        return Err(Error::CorruptImage {
            path: path.to_path_buf(),
            message: format!(
                "size {}x{} does not match camera {w}x{h}",
                img.width(),
                img.height()
            ),
        });
    }
    Ok(())
}

fn wrong_type(path: &Path, want: &str, img: &image::DynamicImage) -> Error {
    Error::CorruptImage {
        path: path.to_path_buf(),
        message: format!("expected {want}, found {:?}", img.color()),
    }
}

/// 8-bit RGB PNG as interleaved values in [0, 1].
pub fn load_rgb_png(path: impl AsRef<Path>) -> Result<(u32, u32, Vec<f32>)> {
    let path = path.as_ref();
    let img = open_png(path)?;
    match &img {
        image::DynamicImage::ImageRgb8(b) => Ok((
            b.width(),
            b.height(),
            b.as_raw().iter().map(|&x| x as f32 / 255.0).collect(),
        )),
        image::DynamicImage::ImageRgba8(_) | image::DynamicImage::ImageLuma8(_) => {
            let b = img.to_rgb8();
            Ok((
                b.width(),
                b.height(),
                b.as_raw().iter().map(|&x| x as f32 / 255.0).collect(),
            ))
        }
        _ => Err(wrong_type(path, "8-bit RGB", &img)),
    }
}

pub fn save_rgb_png(path: impl AsRef<Path>, width: u32, height: u32, rgb: &[f32]) -> Result<()> {
    if rgb.len() != 3 * width as usize * height as usize {
        return Err(Error::Contract(
            "RGB buffer size does not match image size".into(),
        ));
    }
    save_rgb8(path.as_ref(), width, height, rgb)
}

fn load_gray8(path: &Path, w: u32, h: u32) -> Result<Vec<f32>> {
    let img = open_png(path)?;
    expect_size(path, &img, w, h)?;
    match img {
        image::DynamicImage::ImageLuma8(b) => {
            Ok(b.into_raw().into_iter().map(|x| x as f32 / 255.0).collect())
        }
        other => Err(wrong_type(path, "8-bit grayscale", &other)),
    }
}

fn load_gray16(path: &Path, w: u32, h: u32) -> Result<Vec<u16>> {
    let img = open_png(path)?;
    expect_size(path, &img, w, h)?;
    match img {
        image::DynamicImage::ImageLuma16(b) => Ok(b.into_raw()),
        other => Err(wrong_type(path, "16-bit grayscale", &other)),
    }
}

// ---------------------------------------------------------------- writing

/// An object instance in a scene record.
#[derive(Debug, Clone, Copy)]
pub struct RecordObject<'a> {
    pub id: ObjectId,
    pub name: &'a str,
    pub pose: RigidPose,
    pub volume: &'a ObjectVolume,
    pub mesh: &'a TriangleMesh,
}

#[derive(Debug, Clone, Copy)]
pub struct RecordView<'a> {
    pub camera: &'a Camera,
    pub render: &'a RenderOutput,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn remove_manifest_entry(root: &Path, scene_id: &str) -> Result<()> {
    let path = root.join(MANIFEST);
    let Ok(text) = fs::read_to_string(&path) else {
        return Ok(());
    };
    let kept: String = text
        .lines()
        .filter(|l| {
            serde_json::from_str::<serde_json::Value>(l)
                .ok()
                .and_then(|v| {
                    v.get("scene_id")
                        .and_then(|s| s.as_str())
                        .map(|s| s != scene_id)
                })
                .unwrap_or(true)
        })
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(&path, kept).map_err(|e| Error::io(path, e))
}

fn check_view(view: &RecordView, ids: &[ObjectId]) -> Result<()> {
    let r = view.render;
    let k = &view.camera.intrinsics;
    let (w, h) = (r.width, r.height);
    if (k.width, k.height) != (w, h) || r.object_ids != ids {
        return Err(Error::Contract(format!(
            "render {w}x{h} with ids {:?} does not match camera {}x{} and scene ids {ids:?}",
            r.object_ids, k.width, k.height
        )));
    }
    let n = r.pixel_count();
    let sized = r.rgb.len() == 3 * n
        && r.depth.len() == n
        && r.opacity.len() == n
        && r.depth_owner.len() == n
        && r.modal_masks.len() == ids.len()
        && r.amodal_masks.len() == ids.len()
        && r.modal_masks
            .iter()
            .chain(&r.amodal_masks)
            .all(|m| m.len() == n);
    if !sized {
        return Err(Error::Contract(format!(
            "render buffers do not match {w}x{h} pixels"
        )));
    }
    Ok(())
}

fn write_view(
    root: &Path,
    rel_dir: &str,
    view: &RecordView,
    ids: &[ObjectId],
) -> Result<ManifestCamera> {
    let r = view.render;
    let (w, h) = (r.width, r.height);
    create_dir(&root.join(rel_dir))?;
    let rel = |f: &str| format!("{rel_dir}/{f}");
    let cam = ManifestCamera {
        camera: rel("camera.json"),
        rgb: rel("rgb.png"),
        depth: rel("depth.pfm"),
        depth_preview: rel("depth_preview.png"),
        opacity: rel("opacity.png"),
        owner: rel("owner.png"),
        modal: ids
            .iter()
            .map(|&id| (id, rel(&format!("modal_{id}.png"))))
            .collect(),
        amodal: ids
            .iter()
            .map(|&id| (id, rel(&format!("amodal_{id}.png"))))
            .collect(),
    };
    write_json(&root.join(&cam.camera), view.camera)?;
    save_rgb8(&root.join(&cam.rgb), w, h, &r.rgb)?;
    write_pfm(root.join(&cam.depth), w, h, &r.depth)?;
    save_gray16(
        &root.join(&cam.depth_preview),
        w,
        h,
        r.depth.iter().map(|&d| depth_to_mm(d)).collect(),
    )?;
    save_gray8(&root.join(&cam.opacity), w, h, &r.opacity)?;
    let owner = r
        .depth_owner
        .iter()
        .map(|o| o.map_or(NO_OWNER, |id| id.min(NO_OWNER as u32 - 1) as u16))
        .collect();
    save_gray16(&root.join(&cam.owner), w, h, owner)?;
    for (slot, id) in ids.iter().enumerate() {
        save_gray8(&root.join(&cam.modal[id]), w, h, &r.modal_masks[slot])?;
        save_gray8(&root.join(&cam.amodal[id]), w, h, &r.amodal_masks[slot])?;
    }
    Ok(cam)
}

fn write_record_files(
    root: &Path,
    scene_id: &str,
    objects: &[RecordObject],
    views: &[RecordView],
    background: Option<&ObjectVolume>,
) -> Result<ManifestEntry> {
    let scene_dir = format!("scenes/{scene_id}");
    create_dir(&root.join(&scene_dir))?;
    create_dir(&root.join("meshes"))?;
    create_dir(&root.join("volumes"))?;
    let mut manifest_objects = Vec::with_capacity(objects.len());
    let mut written = BTreeSet::new();
    for o in objects {
        let mesh = format!("meshes/{}.obj", o.name);
        let volume = format!("volumes/{}.covv", o.name);
        if written.insert(o.name) {
            export_obj(o.mesh, root.join(&mesh))?;
            o.volume.save(root.join(&volume))?;
        }
        manifest_objects.push(ManifestObject {
            id: o.id,
            name: o.name.to_string(),
            pose: (&o.pose).into(),
            mesh,
            volume,
        });
    }
    if let Some(bg) = background {
        bg.save(root.join(format!("volumes/{BACKGROUND_NAME}.covv")))?;
    }
    let cameras: Vec<Camera> = views.iter().map(|v| *v.camera).collect();
    let scene_file = SceneFile {
        background: background.map(|_| format!("../../volumes/{BACKGROUND_NAME}.covv")),
        objects: objects
            .iter()
            .map(|o| SceneObjectJson {
                volume: format!("../../volumes/{}.covv", o.name),
                pose: (&o.pose).into(),
                id: Some(o.id),
            })
            .collect(),
        cameras,
    };
    let scene = format!("{scene_dir}/scene.json");
    scene_file.write(root.join(&scene))?;
    let ids: Vec<ObjectId> = objects.iter().map(|o| o.id).collect();
    let cameras = views
        .iter()
        .enumerate()
        .map(|(k, v)| write_view(root, &format!("{scene_dir}/cam{k}"), v, &ids))
        .collect::<Result<Vec<_>>>()?;
    Ok(ManifestEntry {
        format: FORMAT_VERSION,
        scene_id: scene_id.to_string(),
        scene,
        objects: manifest_objects,
        cameras,
    })
}

/// Write one scene's files and append its manifest line. Objects must be in
/// ascending id order, matching the render's mask order. On failure the
/// scene directory is removed. An existing scene is an error unless
/// `overwrite` is set.
pub fn write_scene_record(
    root: impl AsRef<Path>,
    scene_id: &str,
    objects: &[RecordObject],
    views: &[RecordView],
    background: Option<&ObjectVolume>,
    overwrite: bool,
) -> Result<ManifestEntry> {
    let root = root.as_ref();
    if !safe_name(scene_id) {
        return Err(Error::Domain(format!(
            "scene id {scene_id:?} is not a safe file name"
        )));
    }
    if views.is_empty() {
        return Err(Error::Domain(
            "a scene record needs at least one view".into(),
        ));
    }
    if !objects.windows(2).all(|p| p[0].id < p[1].id) {
        return Err(Error::Contract(
            "record objects must have ascending unique ids".into(),
        ));
    }
    if let Some(o) = objects
        .iter()
        .find(|o| !safe_name(o.name) || o.name == BACKGROUND_NAME)
    {
        return Err(Error::Domain(format!(
            "object name {:?} is reserved or not a safe file name",
            o.name
        )));
    }
    let ids: Vec<ObjectId> = objects.iter().map(|o| o.id).collect();
    for v in views {
        check_view(v, &ids)?;
    }
    let scene_dir = root.join("scenes").join(scene_id);
    if scene_dir.exists() {
        if !overwrite {
            return Err(Error::SceneExists(scene_id.to_string()));
        }
        fs::remove_dir_all(&scene_dir).map_err(|e| Error::io(&scene_dir, e))?;
        remove_manifest_entry(root, scene_id)?;
    }
    let entry = match write_record_files(root, scene_id, objects, views, background) {
        Ok(e) => e,
        Err(e) => {
            let _ = fs::remove_dir_all(&scene_dir);
            return Err(e);
        }
    };
    validate_entry(&entry)?;
    let manifest = root.join(MANIFEST);
    let line = serde_json::to_string(&entry).expect("serializable") + "\n";
    fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&manifest)
        .and_then(|mut f| f.write_all(line.as_bytes()))
        .map_err(|e| Error::io(&manifest, e))?;
    Ok(entry)
}

// ---------------------------------------------------------------- reading

#[derive(Debug, Clone, PartialEq)]
pub struct ViewRecord {
    pub camera: Camera,
    pub width: u32,
    pub height: u32,
    pub rgb: Vec<f32>,
    pub depth: Vec<f32>,
    pub depth_preview_mm: Vec<u16>,
    pub opacity: Vec<f32>,
    pub owner: Vec<Option<ObjectId>>,
    pub modal: BTreeMap<ObjectId, Vec<f32>>,
    pub amodal: BTreeMap<ObjectId, Vec<f32>>,
}

impl ViewRecord {
    /// Pixels with opacity above the threshold and a known owner, and how many
    /// of them have the owner as the highest modal weight (background included).
    pub fn owner_agreement(&self) -> (usize, usize) {
        let mut opaque = 0;
        let mut agree = 0;
        for i in 0..self.opacity.len() {
            let Some(owner) = self.owner[i] else { continue };
            if self.opacity[i] <= OPAQUE_THRESHOLD {
                continue;
            }
            opaque += 1;
            let objects: f32 = self.modal.values().map(|m| m[i]).sum();
            let score = |id: ObjectId| {
                if id == crate::scene::BACKGROUND {
                    (self.opacity[i] - objects).max(0.0)
                } else {
                    self.modal.get(&id).map_or(-1.0, |m| m[i])
                }
            };
            let best = self
                .modal
                .values()
                .map(|m| m[i])
                .fold(score(crate::scene::BACKGROUND), f32::max);
            if score(owner) >= best {
                agree += 1;
            }
        }
        (opaque, agree)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub entry: ManifestEntry,
    pub views: Vec<ViewRecord>,
}

fn load_view(root: &Path, c: &ManifestCamera) -> Result<ViewRecord> {
    let cam_path = root.join(&c.camera);
    let text = fs::read_to_string(&cam_path).map_err(|e| Error::io(&cam_path, e))?;
    let camera: Camera = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: cam_path.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let (w, h) = (camera.intrinsics.width, camera.intrinsics.height);
    let rgb_path = root.join(&c.rgb);
    let (rw, rh, rgb) = load_rgb_png(&rgb_path)?;
    if (rw, rh) != (w, h) {
        return Err(Error::CorruptImage {
            path: rgb_path,
            message: format!("size {rw}x{rh} does not match camera {w}x{h}"),
        });
    }
    let depth_path = root.join(&c.depth);
    let (dw, dh, depth) = read_pfm(&depth_path)?;
    if (dw, dh) != (w, h) {
        return Err(Error::CorruptImage {
            path: depth_path,
            message: format!("size {dw}x{dh} does not match camera {w}x{h}"),
        });
    }
    let owner = load_gray16(&root.join(&c.owner), w, h)?
        .into_iter()
        .map(|x| (x != NO_OWNER).then_some(x as ObjectId))
        .collect();
    let masks = |m: &BTreeMap<ObjectId, String>| -> Result<BTreeMap<ObjectId, Vec<f32>>> {
        m.iter()
            .map(|(&id, p)| Ok((id, load_gray8(&root.join(p), w, h)?)))
            .collect()
    };
    Ok(ViewRecord {
        camera,
        width: w,
        height: h,
        rgb,
        depth,
        depth_preview_mm: load_gray16(&root.join(&c.depth_preview), w, h)?,
        opacity: load_gray8(&root.join(&c.opacity), w, h)?,
        owner,
        modal: masks(&c.modal)?,
        amodal: masks(&c.amodal)?,
    })
}

/// Decode every view of a manifest entry.
pub fn load_scene_record(root: impl AsRef<Path>, entry: &ManifestEntry) -> Result<SceneRecord> {
    let root = root.as_ref();
    validate_entry(entry)?;
    let views = entry
        .cameras
        .iter()
        .map(|c| load_view(root, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneRecord {
        entry: entry.clone(),
        views,
    })
}

// ---------------------------------------------------------------- validation

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetReport {
    pub scenes: usize,
    pub views: usize,
    pub opaque_pixels: usize,
    pub agreeing_pixels: usize,
    pub findings: Vec<String>,
}

impl DatasetReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn agreement(&self) -> f64 {
        if self.opaque_pixels == 0 {
            1.0
        } else {
            self.agreeing_pixels as f64 / self.opaque_pixels as f64
        }
    }
}

/// Check manifest syntax and schema, file presence and decodability, mask-id
/// consistency, and modal-argmax vs depth-owner agreement.
pub fn validate_dataset(root: impl AsRef<Path>) -> DatasetReport {
    let root = root.as_ref();
    let mut report = DatasetReport::default();
    let manifest = root.join(MANIFEST);
    let text = match fs::read_to_string(&manifest) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => {
            report.findings.push(Error::io(&manifest, e).to_string());
            return report;
        }
    };
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_manifest_line(&manifest, i + 1, line) {
            Ok(e) => entries.push(e),
            Err(e) => report.findings.push(e.to_string()),
        }
    }
    if entries.is_empty() && report.findings.is_empty() {
        report.findings.push(format!(
            "empty dataset: no manifest entries under {}",
            root.display()
        ));
        return report;
    }
    entries.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
    let mut seen = BTreeSet::new();
    for e in &entries {
        if !seen.insert(e.scene_id.clone()) {
            report
                .findings
                .push(format!("scene {} appears more than once", e.scene_id));
        }
    }
    for e in &entries {
        report.scenes += 1;
        let mut missing = BTreeSet::new();
        for f in e.files() {
            if !root.join(f).is_file() && missing.insert(f.to_string()) {
                report
                    .findings
                    .push(Error::MissingFile(root.join(f)).to_string());
            }
        }
        for o in &e.objects {
            if !missing.contains(&o.mesh)
                && let Err(err) = read_obj(root.join(&o.mesh))
            {
                report.findings.push(err.to_string());
            }
            if !missing.contains(&o.volume)
                && let Err(err) = ObjectVolume::load(root.join(&o.volume))
            {
                report.findings.push(err.to_string());
            }
        }
        for c in &e.cameras {
            report.views += 1;
            if c.files().iter().any(|f| missing.contains(*f)) {
                continue;
            }
            match load_view(root, c) {
                Ok(v) => {
                    let (opaque, agree) = v.owner_agreement();
                    report.opaque_pixels += opaque;
                    report.agreeing_pixels += agree;
                }
                Err(err) => report.findings.push(err.to_string()),
            }
        }
    }
    if report.agreement() < MIN_AGREEMENT {
        report.findings.push(format!(
            "modal argmax agrees with the depth owner on {:.2}% of opaque pixels (need {:.0}%)",
            100.0 * report.agreement(),
            100.0 * MIN_AGREEMENT
        ));
    }
    report
}

/// Paths of a record relative to `root`, absolute.
pub fn record_paths(root: &Path, entry: &ManifestEntry) -> Vec<PathBuf> {
    entry.files().into_iter().map(|f| root.join(f)).collect()
}
