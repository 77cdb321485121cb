//! Merged-sample volume compositing: color, expected ray distance, and
//! occlusion-aware (modal) and occlusion-free (amodal) instance weights.
//!
//! Every owner (the background or an object) contributes a sorted sequence
//! of samples along the ray. Each sample's interval length is measured
//! within its owner's own sequence: the gap to the owner's next sample, or
//! to the end of the owner's ray interval for its last sample. Samples from
//! all owners are then merged by `(t, owner)` and accumulated front to back,
//! so overlapping volumes add their extinction and nearer owners attenuate
//! farther ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, Ray, RigidPose, intersect_ray_box};
use crate::scene::{BACKGROUND, ObjectId, Scene};
use crate::volume::{Field, VolumeSample};

const DEGENERATE_INTERVAL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Jitter {
    /// Midpoints of equal sub-intervals.
    #[default]
    Midpoint,
    /// One uniform draw inside each sub-interval.
    Stratified,
}

/// `n` ascending sample distances inside `[t_enter, t_exit]`.
pub fn sample_ts<R: Rng + ?Sized>(
    t_enter: f64,
    t_exit: f64,
    n: usize,
    jitter: Jitter,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(t_enter >= 0.0 && t_exit >= t_enter && t_exit.is_finite()) {
        return Err(Error::Domain(format!(
            "sample interval [{t_enter}, {t_exit}] is invalid"
        )));
    }
    if n == 0 {
        return Err(Error::Domain("sample count must be >= 1".into()));
    }
    let len = t_exit - t_enter;
    if len < DEGENERATE_INTERVAL {
        return Ok(vec![t_enter + 0.5 * len]);
    }
    let h = len / n as f64;
    Ok((0..n)
        .map(|i| {
            let u = match jitter {
                Jitter::Midpoint => 0.5,
                Jitter::Stratified => loop {
                    let u: f64 = rng.random();
                    if u > 0.0 {
                        break u;
                    }
                },
            };
            t_enter + (i as f64 + u) * h
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaySample {
    pub t: f64,
    /// Interval length this sample stands for within its owner's sequence.
    pub delta: f64,
    pub owner: ObjectId,
    pub density: f64,
    pub radiance: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RaySampleBatch {
    pub entries: Vec<RaySample>,
    pub t_far: f64,
}

impl RaySampleBatch {
    pub fn new(t_far: f64) -> Self {
        Self {
            entries: Vec::new(),
            t_far,
        }
    }

    /// Builds a batch from `(t, owner, sample)` triples. Intervals are derived
    /// per owner, with each owner's last sample extending to `t_far`.
    pub fn from_samples(samples: &[(f64, ObjectId, VolumeSample)], t_far: f64) -> Self {
        let mut owners: Vec<ObjectId> = samples.iter().map(|s| s.1).collect();
        owners.sort_unstable();
        owners.dedup();
        let mut batch = Self::new(t_far);
        for owner in owners {
            let mut own: Vec<_> = samples.iter().filter(|s| s.1 == owner).collect();
            own.sort_by(|a, b| a.0.total_cmp(&b.0));
            let ts: Vec<f64> = own.iter().map(|s| s.0).collect();
            let vs: Vec<VolumeSample> = own.iter().map(|s| s.2).collect();
            batch.push_sequence(owner, &ts, &vs, t_far);
        }
        batch.sort();
        batch
    }

    /// Appends one owner's ascending samples; `t_end` closes the last interval.
    pub fn push_sequence(
        &mut self,
        owner: ObjectId,
        ts: &[f64],
        samples: &[VolumeSample],
        t_end: f64,
    ) {
        debug_assert_eq!(ts.len(), samples.len());
        for (j, (&t, s)) in ts.iter().zip(samples).enumerate() {
            let next = ts.get(j + 1).copied().unwrap_or(t_end);
            self.entries.push(RaySample {
                t,
                delta: (next - t).max(0.0),
                owner,
                density: s.density,
                radiance: s.radiance,
            });
        }
    }

    /// Stable merge order: ascending `t`, ties broken by owner id.
    pub fn sort(&mut self) {
        self.entries
            .sort_by(|a, b| a.t.total_cmp(&b.t).then(a.owner.cmp(&b.owner)));
    }

    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            if !(e.t >= 0.0 && e.t.is_finite()) {
                return Err(Error::Contract(format!(
                    "sample {i} has invalid t = {}",
                    e.t
                )));
            }
            if !(e.density >= 0.0 && e.density.is_finite() && e.delta >= 0.0 && e.delta.is_finite())
            {
                return Err(Error::Contract(format!(
                    "sample {i} has invalid density {} or interval {}",
                    e.density, e.delta
                )));
            }
        }
        for (i, pair) in self.entries.windows(2).enumerate() {
            let (a, b) = (&pair[0], &pair[1]);
            if a.t > b.t || (a.t == b.t && a.owner > b.owner) {
                return Err(Error::Contract(format!(
                    "batch is not sorted at entries {i}..{} (t {} then {})",
                    i + 1,
                    a.t,
                    b.t
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OwnerWeights {
    pub owner: ObjectId,
    /// Probability the ray terminates inside this owner, given everything else.
    pub modal: f64,
    /// Probability the ray would terminate inside this owner if it were alone.
    pub amodal: f64,
    /// `1 - prod(1 - alpha)` over the owner's samples.
    pub accumulated_alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CompositeResult {
    pub color: [f64; 3],
    /// Expected distance travelled along the ray (not normalized by opacity).
    pub depth: f64,
    pub total_opacity: f64,
    /// Sorted by owner id; includes the background when it has samples.
    pub per_owner: Vec<OwnerWeights>,
    /// Owner of the sample where accumulated termination probability first
    /// reaches half of the total opacity.
    pub depth_owner: Option<ObjectId>,
}

impl CompositeResult {
    pub fn weights(&self, owner: ObjectId) -> Option<&OwnerWeights> {
        self.per_owner.iter().find(|w| w.owner == owner)
    }

    pub fn modal(&self, owner: ObjectId) -> f64 {
        self.weights(owner).map_or(0.0, |w| w.modal)
    }

    pub fn amodal(&self, owner: ObjectId) -> f64 {
        self.weights(owner).map_or(0.0, |w| w.amodal)
    }
}

/// Per-sample quantities shared by the forward and backward passes.
struct Accumulated {
    /// e^{-delta * sigma}
    survive: Vec<f64>,
    alpha: Vec<f64>,
    /// merged-scene transmittance before each sample
    trans: Vec<f64>,
    /// owner-only transmittance before each sample
    own_trans: Vec<f64>,
    /// index of each sample's owner in `owners`
    slot: Vec<usize>,
    owners: Vec<ObjectId>,
}

fn accumulate(batch: &RaySampleBatch) -> Accumulated {
    let n = batch.entries.len();
    let mut owners: Vec<ObjectId> = batch.entries.iter().map(|e| e.owner).collect();
    owners.sort_unstable();
    owners.dedup();
    let mut acc = Accumulated {
        survive: Vec::with_capacity(n),
        alpha: Vec::with_capacity(n),
        trans: Vec::with_capacity(n),
        own_trans: Vec::with_capacity(n),
        slot: Vec::with_capacity(n),
        owners,
    };
    let mut optical = 0.0f64;
    let mut own_optical = vec![0.0f64; acc.owners.len()];
    for e in &batch.entries {
        let k = acc.owners.binary_search(&e.owner).expect("owner listed");
        let tau = e.delta * e.density;
        acc.trans.push((-optical).exp());
        acc.own_trans.push((-own_optical[k]).exp());
        acc.survive.push((-tau).exp());
        acc.alpha.push(-(-tau).exp_m1());
        acc.slot.push(k);
        optical += tau;
        own_optical[k] += tau;
    }
    acc
}

/// Evaluates color, expected distance, and modal/amodal weights for a sorted batch.
pub fn composite(batch: &RaySampleBatch) -> Result<CompositeResult> {
    batch.validate()?;
    let acc = accumulate(batch);
    let mut out = CompositeResult {
        per_owner: acc
            .owners
            .iter()
            .map(|&owner| OwnerWeights {
                owner,
                modal: 0.0,
                amodal: 0.0,
                accumulated_alpha: 0.0,
            })
            .collect(),
        ..Default::default()
    };
    let mut own_survive = vec![1.0; acc.owners.len()];
    for (i, e) in batch.entries.iter().enumerate() {
        let w = acc.trans[i] * acc.alpha[i];
        for c in 0..3 {
            out.color[c] += w * e.radiance[c];
        }
        out.depth += w * e.t;
        out.total_opacity += w;
        let k = acc.slot[i];
        out.per_owner[k].modal += w;
        out.per_owner[k].amodal += acc.own_trans[i] * acc.alpha[i];
        own_survive[k] *= acc.survive[i];
    }
    // sums of alpha * T telescope to <= 1 but can round one ulp past it
    out.total_opacity = out.total_opacity.min(1.0);
    for (k, w) in out.per_owner.iter_mut().enumerate() {
        w.modal = w.modal.min(1.0);
        w.amodal = w.amodal.min(1.0);
        w.accumulated_alpha = 1.0 - own_survive[k];
    }
    if out.total_opacity > 0.0 {
        let half = 0.5 * out.total_opacity;
        let mut running = 0.0;
        for (i, e) in batch.entries.iter().enumerate() {
            running += acc.trans[i] * acc.alpha[i];
            if running >= half {
                out.depth_owner = Some(e.owner);
                break;
            }
        }
    }
    Ok(out)
}

/// Upstream derivatives of a scalar loss with respect to composite outputs.
#[derive(Debug, Clone, Default)]
pub struct CompositeAdjoint {
    pub color: [f64; 3],
    /// With respect to the expected ray distance.
    pub depth: f64,
    pub modal: Vec<(ObjectId, f64)>,
    pub amodal: Vec<(ObjectId, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SampleGradient {
    pub density: f64,
    pub radiance: [f64; 3],
}

/// Exact derivatives of the adjoint-weighted outputs with respect to every
/// sample's density and radiance, in batch order.
pub fn composite_backward(
    batch: &RaySampleBatch,
    adjoint: &CompositeAdjoint,
) -> Result<Vec<SampleGradient>> {
    batch.validate()?;
    let acc = accumulate(batch);
    let n = batch.entries.len();
    let per_owner = |list: &[(ObjectId, f64)]| -> Vec<f64> {
        acc.owners
            .iter()
            .map(|o| list.iter().filter(|(id, _)| id == o).map(|(_, g)| g).sum())
            .collect()
    };
    let g_modal = per_owner(&adjoint.modal);
    let g_amodal = per_owner(&adjoint.amodal);

    // d/dw_i of the merged outputs, and d/dwbar_i of the amodal outputs
    let a: Vec<f64> = batch
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            (0..3)
                .map(|c| adjoint.color[c] * e.radiance[c])
                .sum::<f64>()
                + adjoint.depth * e.t
                + g_modal[acc.slot[i]]
        })
        .collect();

    let mut grads = vec![SampleGradient::default(); n];
    // w_i = T_i alpha_i; dw_i/dtau_m = -w_i for i > m, T_m e^{-tau_m} for i = m
    let mut suffix = 0.0;
    let mut own_suffix = vec![0.0; acc.owners.len()];
    for i in (0..n).rev() {
        let e = &batch.entries[i];
        let k = acc.slot[i];
        let w = acc.trans[i] * acc.alpha[i];
        let w_own = acc.own_trans[i] * acc.alpha[i];
        let b = g_amodal[k];
        let d_tau = a[i] * acc.trans[i] * acc.survive[i] - suffix
            + b * acc.own_trans[i] * acc.survive[i]
            - own_suffix[k];
        suffix += a[i] * w;
        own_suffix[k] += b * w_own;
        grads[i] = SampleGradient {
            density: d_tau * e.delta,
            radiance: [0, 1, 2].map(|c| adjoint.color[c] * w),
        };
    }
    Ok(grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DepthMode {
    /// Camera-frame z of the expected termination point.
    #[default]
    CameraZ,
    /// Expected distance along the ray.
    RayDistance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub samples_per_object: usize,
    pub samples_background: usize,
    pub t_far: f64,
    pub stratified: bool,
    pub seed: u64,
    pub depth_mode: DepthMode,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            samples_per_object: 64,
            samples_background: 64,
            t_far: 10.0,
            stratified: false,
            seed: 0,
            depth_mode: DepthMode::CameraZ,
        }
    }
}

impl RenderConfig {
    pub fn jitter(&self) -> Jitter {
        if self.stratified {
            Jitter::Stratified
        } else {
            Jitter::Midpoint
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_far > 0.0 && self.t_far.is_finite()) {
            return Err(Error::Domain(format!(
                "t_far must be positive, got {}",
                self.t_far
            )));
        }
        if self.samples_per_object == 0 {
            return Err(Error::Domain("samples_per_object must be >= 1".into()));
        }
        Ok(())
    }
}

/// Which volume a ray segment samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Background,
    Object(usize),
}

/// Sample distances one owner contributes along a ray.
#[derive(Debug, Clone)]
pub struct Segment {
    pub source: Source,
    pub owner: ObjectId,
    pub pose: RigidPose,
    pub ts: Vec<f64>,
    pub t_end: f64,
}

/// Deterministic 64-bit mixer (splitmix64 finalizer).
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Lays out per-owner sample distances for one ray. Each owner draws from
/// its own stream keyed by `(ray_seed, owner id)`, so object order never
/// changes the samples.
pub fn plan_ray<V: Field>(
    scene: &Scene<V>,
    ray: &Ray,
    config: &RenderConfig,
    ray_seed: u64,
) -> Vec<Segment> {
    let mut segments = Vec::with_capacity(scene.objects.len() + 1);
    let mut push = |source, owner, pose: &RigidPose, bounds, n: usize| {
        if n == 0 {
            return;
        }
        let Some((t0, t1)) = intersect_ray_box(ray, bounds, pose) else {
            return;
        };
        let t1 = t1.min(config.t_far);
        if t0 >= t1 {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(ray_seed, owner as u64));
        let ts = sample_ts(t0, t1, n, config.jitter(), &mut rng).expect("valid interval");
        segments.push(Segment {
            source,
            owner,
            pose: *pose,
            ts,
            t_end: t1,
        });
    };
    if let Some((pose, bg)) = &scene.background {
        push(
            Source::Background,
            BACKGROUND,
            pose,
            bg.bounds(),
            config.samples_background,
        );
    }
    for (i, o) in scene.objects.iter().enumerate() {
        push(
            Source::Object(i),
            o.id,
            &o.pose,
            o.volume.bounds(),
            config.samples_per_object,
        );
    }
    segments
}

/// Builds the merged sample batch for a ray.
pub fn gather_ray<V: Field>(
    scene: &Scene<V>,
    ray: &Ray,
    config: &RenderConfig,
    ray_seed: u64,
) -> RaySampleBatch {
    let mut batch = RaySampleBatch::new(config.t_far);
    for seg in plan_ray(scene, ray, config, ray_seed) {
        let field: &V = match seg.source {
            Source::Background => &scene.background.as_ref().expect("planned").1,
            Source::Object(i) => &scene.objects[i].volume,
        };
        let samples: Vec<VolumeSample> = seg
            .ts
            .iter()
            .map(|&t| field.sample(&seg.pose.inverse_transform_point(&ray.at(t))))
            .collect();
        batch.push_sequence(seg.owner, &seg.ts, &samples, seg.t_end);
    }
    batch.sort();
    batch
}

pub fn render_ray<V: Field>(
    scene: &Scene<V>,
    ray: &Ray,
    config: &RenderConfig,
    ray_seed: u64,
) -> CompositeResult {
    composite(&gather_ray(scene, ray, config, ray_seed)).expect("gathered batches are sorted")
}

/// Seed for pixel `(u, v)` of an image rendered with `seed`.
pub fn pixel_seed(seed: u64, width: u32, u: u32, v: u32) -> u64 {
    mix_seed(seed, v as u64 * width as u64 + u as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: u32,
    pub height: u32,
    /// Interleaved RGB, row-major.
    pub rgb: Vec<f32>,
    pub depth: Vec<f32>,
    pub opacity: Vec<f32>,
    /// Ascending object ids; masks are aligned with this list.
    pub object_ids: Vec<ObjectId>,
    pub modal_masks: Vec<Vec<f32>>,
    pub amodal_masks: Vec<Vec<f32>>,
    pub depth_owner: Vec<Option<ObjectId>>,
}

impl RenderOutput {
    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn mask_index(&self, id: ObjectId) -> Option<usize> {
        self.object_ids.binary_search(&id).ok()
    }
}

/// Renders every pixel of `camera`. Pixels are independent, so the result
/// does not depend on the thread count.
pub fn render_scene<V: Field>(
    scene: &Scene<V>,
    camera: &Camera,
    config: &RenderConfig,
) -> RenderOutput {
    let k = camera.intrinsics;
    let (w, h) = (k.width, k.height);
    let ids = scene.object_ids();
    let pixels: Vec<(CompositeResult, f64)> = (0..h)
        .into_par_iter()
        .flat_map_iter(|v| {
            (0..w).map(move |u| {
                let ray = camera.ray(u, v).expect("pixel in range");
                let r = render_ray(scene, &ray, config, pixel_seed(config.seed, w, u, v));
                let dz = camera.pose.inverse_transform_vector(ray.direction()).z;
                (r, dz)
            })
        })
        .collect();
    let n = pixels.len();
    let mut out = RenderOutput {
        width: w,
        height: h,
        rgb: Vec::with_capacity(3 * n),
        depth: Vec::with_capacity(n),
        opacity: Vec::with_capacity(n),
        modal_masks: vec![Vec::with_capacity(n); ids.len()],
        amodal_masks: vec![Vec::with_capacity(n); ids.len()],
        object_ids: ids,
        depth_owner: Vec::with_capacity(n),
    };
    for (r, dz) in &pixels {
        out.rgb.extend(r.color.iter().map(|&c| c as f32));
        let depth = match config.depth_mode {
            DepthMode::CameraZ => r.depth * dz,
            DepthMode::RayDistance => r.depth,
        };
        out.depth.push(depth as f32);
        out.opacity.push(r.total_opacity as f32);
        out.depth_owner.push(r.depth_owner);
        for (slot, id) in out.object_ids.iter().enumerate() {
            out.modal_masks[slot].push(r.modal(*id) as f32);
            out.amodal_masks[slot].push(r.amodal(*id) as f32);
        }
    }
    out
}
