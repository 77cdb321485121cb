//! C ABI for covren-core.
//!
//! Every fallible function returns a [`CovrenStatus`]; on failure a message is
//! available from [`covren_last_error_message`] on the same thread. Handles are
//! opaque and must be released with the matching `*_free` function. Output
//! buffers are caller-allocated and their lengths are checked.

use std::cell::RefCell;
use std::ffi::{CStr, CString, c_char};
use std::panic::{AssertUnwindSafe, catch_unwind};
use std::path::PathBuf;

use covren_core::Error;
use covren_core::compositor::{RenderConfig, render_scene};
use covren_core::geometry::{Camera, Vec3};
use covren_core::meshing::{TriangleMesh, export_obj, extract_object_mesh};
use covren_core::metrics::{RgbImage, psnr, ssim};
use covren_core::scene::{Scene, load_scene_file};
use covren_core::volume::ObjectVolume;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovrenStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Domain = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Object volume handle.
pub struct CovrenVolume {
    inner: ObjectVolume,
}

/// Scene handle: posed volumes plus the cameras of the scene file.
pub struct CovrenScene {
    scene: Scene,
    cameras: Vec<Camera>,
}

/// Triangle mesh handle.
pub struct CovrenMesh {
    inner: TriangleMesh,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

struct Failure(CovrenStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } | Error::MissingFile(_) | Error::SceneExists(_) => CovrenStatus::Io,
            Error::Format { .. }
            | Error::CorruptImage { .. }
            | Error::Parse { .. }
            | Error::Schema(_) => CovrenStatus::Format,
            Error::Contract(_) => CovrenStatus::InvalidArgument,
            Error::Domain(_) | Error::Placement { .. } => CovrenStatus::Domain,
        };
        Failure(status, e.to_string())
    }
}

fn fail<T>(status: CovrenStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

/// Run `f`, converting errors and panics into a status plus last-error message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CovrenStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            CovrenStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            CovrenStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return fail(CovrenStatus::NullPointer, "path is null");
    }
    // SAFETY: caller passes a nul-terminated string.
    let s = unsafe { CStr::from_ptr(p) };
    match s.to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => fail(CovrenStatus::InvalidArgument, "path is not valid UTF-8"),
    }
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    // SAFETY: non-null handles come from this library and are live per the API contract.
    unsafe { p.as_ref() }.map_or_else(
        || fail(CovrenStatus::NullPointer, format!("{what} is null")),
        Ok,
    )
}

unsafe fn out_slice<'a, T>(
    p: *mut T,
    len: usize,
    need: usize,
    what: &str,
) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return fail(CovrenStatus::NullPointer, format!("{what} is null"));
    }
    if len < need {
        return fail(
            CovrenStatus::BufferTooSmall,
            format!("{what} holds {len} values, need {need}"),
        );
    }
    // SAFETY: caller guarantees `p` points to `len` writable values.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, need) })
}

unsafe fn in_slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return fail(CovrenStatus::NullPointer, format!("{what} is null"));
    }
    // SAFETY: caller guarantees `p` points to `len` readable values.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

unsafe fn write_out<T>(p: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        return fail(CovrenStatus::NullPointer, format!("{what} is null"));
    }
    // SAFETY: checked non-null; caller guarantees it is writable.
    unsafe { p.write(value) };
    Ok(())
}

unsafe fn write_handle<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return fail(CovrenStatus::NullPointer, "out is null");
    }
    // SAFETY: checked non-null; caller guarantees it is writable.
    unsafe { out.write(Box::into_raw(Box::new(value))) };
    Ok(())
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next covren call on this thread.
#[unsafe(no_mangle)]
pub extern "C" fn covren_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn covren_volume_load(
    path: *const c_char,
    out: *mut *mut CovrenVolume,
) -> CovrenStatus {
    guard(|| {
        let path = unsafe { path_arg(path)? };
        let inner = ObjectVolume::load(&path)?;
        unsafe { write_handle(out, CovrenVolume { inner }) }
    })
}

/// # Safety
/// `volume` must be a live handle; `path` a nul-terminated string.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn covren_volume_save(
    volume: *const CovrenVolume,
    path: *const c_char,
) -> CovrenStatus {
    guard(|| {
        let v = unsafe { handle(volume, "volume")? };
        let path = unsafe { path_arg(path)? };
        v.inner.save(&path)?;
        Ok(())
    })
}

/// Grid size as depth, height, width.
///
/// # Safety
/// `volume` must be a live handle; outputs must be writable.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn covren_volume_dims(
    volume: *const CovrenVolume,
    d: *mut usize,
    h: *mut usize,
    w: *mut usize,
) -> CovrenStatus {
    guard(|| {
        let dims = unsafe { handle(volume, "volume")? }.inner.dims();
        unsafe {
            write_out(d, dims.d, "d")?;
            write_out(h, dims.h, "h")?;
            write_out(w, dims.w, "w")
        }
    })
}

/// Trilinear sample at an object-frame point; zero outside the bounds.
///
/// # Safety
/// `volume` must be a live handle; `point` must hold 3 values and `rgb` room for 3.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn covren_volume_sample(
    volume: *const CovrenVolume,
    point: *const f64,
    density: *mut f64,
    rgb: *mut f64,
) -> CovrenStatus {
    guard(|| {
        let v = unsafe { handle(volume, "volume")? };
        let p = unsafe { in_slice(point, 3, "point")? };
        let rgb = unsafe { out_slice(rgb, 3, 3, "rgb")? };
        let s = v.inner.sample_trilinear(&Vec3::new(p[0], p[1], p[2]));
        rgb.copy_from_slice(&s.radiance);
        unsafe { write_out(density, s.density, "density") }
    })
}

/// # Safety
/// `volume` must be null or a handle not yet freed.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn covren_volume_free(volume: *mut CovrenVolume) {
    if !volume.is_null() {
        // SAFETY: created by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(volume) });
    }
}

/// Load a scene JSON file and its volumes.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn covren_scene_load(
    path: *const c_char,
    out: *mut *mut CovrenScene,
) -> CovrenStatus {
    guard(|| {
        let path = unsafe { path_arg(path)? };
        let (file, scene) = load_scene_file(&path)?;
        unsafe {
            write_handle(
                out,
                CovrenScene {
                    scene,
                    cameras: file.cameras,
                },
            )
        }
    })
}

/// # Safety
/// `scene` must be a live handle; outputs must be writable.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn covren_scene_counts(
    scene: *const CovrenScene,
    objects: *mut usize,
    cameras: *mut usize,
) -> CovrenStatus {
    guard(|| {
        let s = unsafe { handle(scene, "scene")? };
        unsafe {
            write_out(objects, s.scene.objects.len(), "objects")?;
            write_out(cameras, s.cameras.len(), "cameras")
        }
    })
}

/// Image size of camera `camera`.
///
/// # Safety
/// `scene` must be a live handle; outputs must be writable.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn covren_scene_camera_size(
    scene: *const CovrenScene,
    camera: usize,
    width: *mut u32,
    height: *mut u32,
) -> CovrenStatus {
    guard(|| {
        let s = unsafe { handle(scene, "scene")? };
        let Some(c) = s.cameras.get(camera) else {
            return fail(
                CovrenStatus::InvalidArgument,
                format!("camera {camera} out of range"),
            );
        };
        unsafe {
            write_out(width, c.intrinsics.width, "width")?;
            write_out(height, c.intrinsics.height, "height")
        }
    })
}

/// Render camera `camera` into caller buffers: interleaved RGB (3·w·h),
/// camera-z depth (w·h) and opacity (w·h). `opacity` may be null.
///
/// # Safety
/// `scene` must be a live handle; buffers must hold the stated lengths.
#[unsafe(no_mangle)]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn covren_scene_render(
    scene: *const CovrenScene,
    camera: usize,
    samples_per_object: usize,
    seed: u64,
    rgb: *mut f32,
    rgb_len: usize,
    depth: *mut f32,
    depth_len: usize,
    opacity: *mut f32,
    opacity_len: usize,
) -> CovrenStatus {
    guard(|| {
        let s = unsafe { handle(scene, "scene")? };
        let Some(cam) = s.cameras.get(camera) else {
            return fail(
                CovrenStatus::InvalidArgument,
                format!("camera {camera} out of range"),
            );
        };
        let n = cam.intrinsics.pixel_count();
        let rgb = unsafe { out_slice(rgb, rgb_len, 3 * n, "rgb")? };
        let depth = unsafe { out_slice(depth, depth_len, n, "depth")? };
        let opacity = if opacity.is_null() {
            None
        } else {
            Some(unsafe { out_slice(opacity, opacity_len, n, "opacity")? })
        };
        let cfg = RenderConfig {
            samples_per_object,
            samples_background: samples_per_object,
            seed,
            ..RenderConfig::default()
        };
        cfg.validate()?;
        let out = render_scene(&s.scene, cam, &cfg);
        rgb.copy_from_slice(&out.rgb);
        depth.copy_from_slice(&out.depth);
        if let Some(o) = opacity {
            o.copy_from_slice(&out.opacity);
        }
        Ok(())
    })
}

/// # Safety
/// `scene` must be null or a handle not yet freed.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn covren_scene_free(scene: *mut CovrenScene) {
    if !scene.is_null() {
        // SAFETY: created by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(scene) });
    }
}

unsafe fn image_pair(
    a: *const f32,
    b: *const f32,
    width: usize,
    height: usize,
) -> Result<(RgbImage, RgbImage), Failure> {
    let n = 3 * width * height;
    let a = unsafe { in_slice(a, n, "prediction")? };
    let b = unsafe { in_slice(b, n, "reference")? };
    Ok((
        RgbImage::from_f32(width, height, a)?,
        RgbImage::from_f32(width, height, b)?,
    ))
}

/// PSNR of two interleaved RGB images in [0, 1]; +infinity when identical.
///
/// # Safety
/// `prediction` and `reference` must each hold 3·width·height values.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn covren_psnr(
    prediction: *const f32,
    reference: *const f32,
    width: usize,
    height: usize,
    out: *mut f64,
) -> CovrenStatus {
    guard(|| {
        let (a, b) = unsafe { image_pair(prediction, reference, width, height)? };
        unsafe { write_out(out, psnr(&a, &b)?, "out") }
    })
}

/// SSIM (11×11 Gaussian window, σ = 1.5) of two interleaved RGB images.
///
/// # Safety
/// `prediction` and `reference` must each hold 3·width·height values.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn covren_ssim(
    prediction: *const f32,
    reference: *const f32,
    width: usize,
    height: usize,
    out: *mut f64,
) -> CovrenStatus {
    guard(|| {
        let (a, b) = unsafe { image_pair(prediction, reference, width, height)? };
        unsafe { write_out(out, ssim(&a, &b)?, "out") }
    })
}

/// Occupancy isosurface (density fallback 1.0) of a volume.
///
/// # Safety
/// `volume` must be a live handle; `out` must be writable.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn covren_mesh_extract(
    volume: *const CovrenVolume,
    iso: f64,
    out: *mut *mut CovrenMesh,
) -> CovrenStatus {
    guard(|| {
        let v = unsafe { handle(volume, "volume")? };
        let inner = extract_object_mesh(&v.inner, iso, 1.0)?;
        unsafe { write_handle(out, CovrenMesh { inner }) }
    })
}

/// # Safety
/// `mesh` must be a live handle; outputs must be writable.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn covren_mesh_counts(
    mesh: *const CovrenMesh,
    vertices: *mut usize,
    triangles: *mut usize,
) -> CovrenStatus {
    guard(|| {
        let m = unsafe { handle(mesh, "mesh")? };
        unsafe {
            write_out(vertices, m.inner.vertices.len(), "vertices")?;
            write_out(triangles, m.inner.triangles.len(), "triangles")
        }
    })
}

/// Copy vertex positions (3 per vertex) and triangle indices (3 per triangle).
///
/// # Safety
/// `mesh` must be a live handle; buffers must hold the stated lengths.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn covren_mesh_copy(
    mesh: *const CovrenMesh,
    vertices: *mut f64,
    vertices_len: usize,
    triangles: *mut u32,
    triangles_len: usize,
) -> CovrenStatus {
    guard(|| {
        let m = &unsafe { handle(mesh, "mesh")? }.inner;
        let v = unsafe { out_slice(vertices, vertices_len, 3 * m.vertices.len(), "vertices")? };
        let t = unsafe { out_slice(triangles, triangles_len, 3 * m.triangles.len(), "triangles")? };
        for (dst, p) in v.chunks_exact_mut(3).zip(&m.vertices) {
            dst.copy_from_slice(p.as_slice());
        }
        for (dst, tri) in t.chunks_exact_mut(3).zip(&m.triangles) {
            dst.copy_from_slice(tri);
        }
        Ok(())
    })
}

/// # Safety
/// `mesh` must be a live handle; `path` a nul-terminated string.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn covren_mesh_write_obj(
    mesh: *const CovrenMesh,
    path: *const c_char,
) -> CovrenStatus {
    guard(|| {
        let m = unsafe { handle(mesh, "mesh")? };
        let path = unsafe { path_arg(path)? };
        export_obj(&m.inner, &path)?;
        Ok(())
    })
}

/// # Safety
/// `mesh` must be null or a handle not yet freed.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn covren_mesh_free(mesh: *mut CovrenMesh) {
    if !mesh.is_null() {
        // SAFETY: created by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(mesh) });
    }
}
