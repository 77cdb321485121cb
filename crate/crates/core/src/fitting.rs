//! Fitting voxel volumes to posed images by gradient descent.
//!
//! Each volume is optimized through unconstrained latents: density is
//! `softplus(latent)`, radiance is `sigmoid(latent)`, and occupancy is kept
//! as a logit. Gradients of the color (squared error), depth (L1) and mask
//! (cross-entropy) losses are propagated analytically through the merged
//! compositing and the trilinear stencils; occupancy is trained with a
//! per-voxel binary cross-entropy. Updates use Adam.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compositor::{
    CompositeAdjoint, RaySample, RaySampleBatch, RenderConfig, Source, composite,
    composite_backward, plan_ray,
};
use crate::error::{Error, Result};
use crate::geometry::{AxisAlignedBox, Camera, Ray, Vec3};
use crate::scene::{ObjectId, Scene, SceneObject};
use crate::volume::{Field, GridDims, ObjectVolume, Stencil, VolumeSample};

/// Latent channels per voxel: density, red, green, blue, occupancy.
pub const CHANNELS: usize = 5;
pub const CH_DENSITY: usize = 0;
pub const CH_OCCUPANCY: usize = 4;

const MASK_CLAMP: f64 = 1e-6;
/// Rays per gradient chunk; chunk layout is fixed so sums are reproducible.
const GRADIENT_CHUNKS: usize = 8;

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 { x } else { x.exp().ln_1p() }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn inverse_softplus(y: f64) -> f64 {
    let y = y.max(1e-6);
    if y > 30.0 { y } else { y.exp_m1().ln() }
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-4, 1.0 - 1e-4);
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, PartialEq)]
struct AdamMoments {
    first: Vec<f64>,
    second: Vec<f64>,
}

impl AdamMoments {
    fn zeros(n: usize) -> Self {
        Self {
            first: vec![0.0; n],
            second: vec![0.0; n],
        }
    }
}

/// Shadow parameters of one volume plus optimizer state.
///
/// Parameter layout: `[density latents | red | green | blue | occupancy logits]`,
/// each block `dims.len()` long.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVolume {
    dims: GridDims,
    bounds: AxisAlignedBox,
    params: Vec<f64>,
    // decoded density then radiance (4 blocks), refreshed after each update
    decoded: Vec<f64>,
    moments: AdamMoments,
    steps: u64,
}

impl LatentVolume {
    /// Uniform initialization: the given density and gray-level color everywhere.
    pub fn fresh(dims: GridDims, bounds: AxisAlignedBox, density: f64, color: f64) -> Result<Self> {
        let template = ObjectVolume::zeros(dims, bounds)?;
        let n = dims.len();
        let mut params = vec![0.0; CHANNELS * n];
        params[..n].fill(inverse_softplus(density));
        params[n..4 * n].fill(logit(color));
        Ok(Self::from_params(dims, *template.bounds(), params))
    }

    pub fn from_volume(volume: &ObjectVolume) -> Self {
        let dims = volume.dims();
        let n = dims.len();
        let mut params = vec![0.0; CHANNELS * n];
        for i in 0..n {
            params[i] = inverse_softplus(volume.density()[i] as f64);
            for c in 0..3 {
                params[(1 + c) * n + i] = logit(volume.radiance()[c * n + i] as f64);
            }
            params[4 * n + i] = volume.occupancy_logit()[i] as f64;
        }
        Self::from_params(dims, *volume.bounds(), params)
    }

    fn from_params(dims: GridDims, bounds: AxisAlignedBox, params: Vec<f64>) -> Self {
        let n = dims.len();
        let mut v = Self {
            dims,
            bounds,
            params,
            decoded: vec![0.0; 4 * n],
            moments: AdamMoments::zeros(CHANNELS * n),
            steps: 0,
        };
        v.refresh();
        v
    }

    fn refresh(&mut self) {
        let n = self.dims.len();
        let (params, decoded) = (&self.params, &mut self.decoded);
        decoded[..n]
            .par_iter_mut()
            .zip(&params[..n])
            .for_each(|(d, &p)| *d = softplus(p));
        decoded[n..]
            .par_iter_mut()
            .zip(&params[n..4 * n])
            .for_each(|(d, &p)| *d = sigmoid(p));
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param(&self, channel: usize, voxel: usize) -> f64 {
        self.params[channel * self.dims.len() + voxel]
    }

    pub fn set_param(&mut self, channel: usize, voxel: usize, value: f64) {
        let n = self.dims.len();
        self.params[channel * n + voxel] = value;
        if channel == CH_DENSITY {
            self.decoded[voxel] = softplus(value);
        } else if channel < CH_OCCUPANCY {
            self.decoded[channel * n + voxel] = sigmoid(value);
        }
    }

    pub fn occupancy_logits(&self) -> &[f64] {
        &self.params[4 * self.dims.len()..]
    }

    pub fn decoded_density(&self) -> &[f64] {
        &self.decoded[..self.dims.len()]
    }

    pub fn sample_with_stencil(&self, local_point: &Vec3) -> (VolumeSample, Stencil) {
        let st = Stencil::locate(self.dims, &self.bounds, local_point);
        if st.is_empty() {
            return (VolumeSample::default(), st);
        }
        let n = self.dims.len();
        let s = VolumeSample {
            density: st.apply(|i| self.decoded[i]),
            radiance: [1, 2, 3].map(|c| st.apply(|i| self.decoded[c * n + i])),
        };
        (s, st)
    }

    /// Decoded volume; satisfies the volume invariants by construction.
    pub fn decode(&self) -> ObjectVolume {
        let n = self.dims.len();
        let to32 = |s: &[f64]| s.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        let mut radiance = to32(&self.decoded[n..]);
        // sigmoid can round to exactly 1.0 in f32, which is still in range
        radiance.iter_mut().for_each(|c| *c = c.clamp(0.0, 1.0));
        ObjectVolume::from_arrays(
            self.dims,
            self.bounds,
            to32(&self.decoded[..n]),
            radiance,
            to32(self.occupancy_logits()),
        )
        .expect("decoded latents are always valid")
    }

    /// One Adam step on every parameter. `grad` uses the parameter layout.
    pub fn adam_step(&mut self, grad: &[f64], opt: &AdamSettings) {
        assert_eq!(grad.len(), self.params.len());
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - opt.beta1.powi(t);
        let bc2 = 1.0 - opt.beta2.powi(t);
        let lr = opt.learning_rate;
        self.params
            .par_iter_mut()
            .zip(self.moments.first.par_iter_mut())
            .zip(self.moments.second.par_iter_mut())
            .zip(grad.par_iter())
            .for_each(|(((p, m), v), &g)| {
                *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
                *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + opt.epsilon);
            });
        self.refresh();
    }
}

impl Field for LatentVolume {
    fn bounds(&self) -> &AxisAlignedBox {
        &self.bounds
    }

    fn sample(&self, local_point: &Vec3) -> VolumeSample {
        self.sample_with_stencil(local_point).0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamSettings {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub color: f64,
    pub depth: f64,
    pub mask: f64,
    pub occupancy: f64,
    /// Depth is supervised only where the current render is at least this opaque.
    pub depth_opacity_threshold: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            color: 1.0,
            depth: 0.1,
            mask: 0.1,
            occupancy: 0.01,
            depth_opacity_threshold: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub iterations: usize,
    pub rays_per_iteration: usize,
    #[serde(flatten)]
    pub optimizer: AdamSettings,
    pub weights: LossWeights,
    pub render: RenderConfig,
    pub freeze_background: bool,
    /// Self-supervise occupancy from the current density where no labels are given.
    pub occupancy_density_threshold: Option<f64>,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            rays_per_iteration: 1024,
            optimizer: AdamSettings::default(),
            weights: LossWeights::default(),
            render: RenderConfig {
                stratified: true,
                ..RenderConfig::default()
            },
            freeze_background: false,
            occupancy_density_threshold: None,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0) {
            return Err(Error::Domain("learning_rate must be > 0".into()));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return Err(Error::Domain("beta1 and beta2 must lie in [0, 1)".into()));
        }
        let w = &self.weights;
        if [w.color, w.depth, w.mask, w.occupancy]
            .iter()
            .any(|x| !(*x >= 0.0))
        {
            return Err(Error::Domain("loss weights must be >= 0".into()));
        }
        if self.rays_per_iteration == 0 {
            return Err(Error::Domain("rays_per_iteration must be >= 1".into()));
        }
        self.render.validate()
    }
}

/// A posed training image with optional depth (camera z, NaN = unsupervised)
/// and per-object masks.
#[derive(Debug, Clone)]
pub struct TrainView {
    pub camera: Camera,
    pub rgb: Vec<f32>,
    pub depth: Option<Vec<f32>>,
    pub modal_masks: Vec<(ObjectId, Vec<f32>)>,
    pub amodal_masks: Vec<(ObjectId, Vec<f32>)>,
}

impl TrainView {
    pub fn new(camera: Camera, rgb: Vec<f32>) -> Self {
        Self {
            camera,
            rgb,
            depth: None,
            modal_masks: Vec::new(),
            amodal_masks: Vec::new(),
        }
    }

    pub fn validate(&self, object_ids: &[ObjectId]) -> Result<()> {
        let n = self.camera.intrinsics.pixel_count();
        let bad = |what: &str, len: usize, want: usize| {
            Error::Contract(format!("view {what} has {len} values, expected {want}"))
        };
        if self.rgb.len() != 3 * n {
            return Err(bad("rgb", self.rgb.len(), 3 * n));
        }
        if let Some(d) = &self.depth
            && d.len() != n
        {
            return Err(bad("depth", d.len(), n));
        }
        for (id, m) in self.modal_masks.iter().chain(&self.amodal_masks) {
            if !object_ids.contains(id) {
                return Err(Error::Contract(format!("mask for unknown object id {id}")));
            }
            if m.len() != n {
                return Err(bad("mask", m.len(), n));
            }
        }
        Ok(())
    }

    pub fn targets(&self, u: u32, v: u32) -> RayTargets {
        let w = self.camera.intrinsics.width as usize;
        let p = v as usize * w + u as usize;
        let pick = |masks: &[(ObjectId, Vec<f32>)]| {
            masks.iter().map(|(id, m)| (*id, m[p] as f64)).collect()
        };
        RayTargets {
            color: [0, 1, 2].map(|c| self.rgb[3 * p + c] as f64),
            depth: self.depth.as_ref().map(|d| d[p] as f64),
            modal: pick(&self.modal_masks),
            amodal: pick(&self.amodal_masks),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RayTargets {
    pub color: [f64; 3],
    /// Camera-frame z; non-finite means unsupervised.
    pub depth: Option<f64>,
    pub modal: Vec<(ObjectId, f64)>,
    pub amodal: Vec<(ObjectId, f64)>,
}

/// Derivative of a scalar loss with respect to one latent parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentGradient {
    pub source: Source,
    pub voxel: u32,
    pub channel: u8,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub total: f64,
    pub color: f64,
    pub depth: f64,
    pub mask: f64,
    pub occupancy: f64,
}

impl std::ops::AddAssign for LossParts {
    fn add_assign(&mut self, o: Self) {
        self.total += o.total;
        self.color += o.color;
        self.depth += o.depth;
        self.mask += o.mask;
        self.occupancy += o.occupancy;
    }
}

#[derive(Debug, Clone, Default)]
pub struct RayLoss {
    pub loss: LossParts,
    /// One entry per (sample, stencil corner, channel); keys may repeat.
    pub gradients: Vec<LatentGradient>,
    /// Terms skipped because their targets were not finite.
    pub skipped: Vec<&'static str>,
}

impl RayLoss {
    /// Gradients summed per (source, voxel, channel).
    pub fn merged_gradients(&self) -> Vec<LatentGradient> {
        let mut g = self.gradients.clone();
        g.sort_by_key(|x| (source_key(x.source), x.voxel, x.channel));
        let mut out: Vec<LatentGradient> = Vec::new();
        for x in g {
            match out.last_mut() {
                Some(last)
                    if last.source == x.source
                        && last.voxel == x.voxel
                        && last.channel == x.channel =>
                {
                    last.value += x.value
                }
                _ => out.push(x),
            }
        }
        out
    }
}

fn source_key(s: Source) -> usize {
    match s {
        Source::Background => 0,
        Source::Object(i) => i + 1,
    }
}

fn latent_of(scene: &Scene<LatentVolume>, source: Source) -> &LatentVolume {
    match source {
        Source::Background => &scene.background.as_ref().expect("background planned").1,
        Source::Object(i) => &scene.objects[i].volume,
    }
}

struct TracedRay {
    batch: RaySampleBatch,
    sources: Vec<Source>,
    stencils: Vec<Stencil>,
}

fn trace(
    scene: &Scene<LatentVolume>,
    ray: &Ray,
    config: &RenderConfig,
    ray_seed: u64,
) -> TracedRay {
    let mut rows: Vec<(RaySample, Source, Stencil)> = Vec::new();
    for seg in plan_ray(scene, ray, config, ray_seed) {
        let latent = latent_of(scene, seg.source);
        let (samples, stencils): (Vec<VolumeSample>, Vec<Stencil>) = seg
            .ts
            .iter()
            .map(|&t| latent.sample_with_stencil(&seg.pose.inverse_transform_point(&ray.at(t))))
            .unzip();
        let mut tmp = RaySampleBatch::new(config.t_far);
        tmp.push_sequence(seg.owner, &seg.ts, &samples, seg.t_end);
        rows.extend(
            tmp.entries
                .into_iter()
                .zip(stencils)
                .map(|(e, st)| (e, seg.source, st)),
        );
    }
    rows.sort_by(|a, b| a.0.t.total_cmp(&b.0.t).then(a.0.owner.cmp(&b.0.owner)));
    let mut traced = TracedRay {
        batch: RaySampleBatch::new(config.t_far),
        sources: Vec::with_capacity(rows.len()),
        stencils: Vec::with_capacity(rows.len()),
    };
    for (e, s, st) in rows {
        traced.batch.entries.push(e);
        traced.sources.push(s);
        traced.stencils.push(st);
    }
    traced
}

fn mask_ce(pred: f64, target: f64) -> (f64, f64) {
    let clamped = pred.clamp(MASK_CLAMP, 1.0 - MASK_CLAMP);
    let loss = -(target * clamped.ln() + (1.0 - target) * (1.0 - clamped).ln());
    let grad = if clamped == pred {
        -(target / clamped) + (1.0 - target) / (1.0 - clamped)
    } else {
        0.0
    };
    (loss, grad)
}

/// Loss of one ray against its targets and its exact gradient with respect
/// to every latent the ray's stencils touch.
///
/// `depth_scale` converts expected ray distance into the depth target's
/// units (the ray direction's camera-frame z for camera-z depth maps).
pub fn ray_loss_and_gradients(
    scene: &Scene<LatentVolume>,
    ray: &Ray,
    depth_scale: f64,
    targets: &RayTargets,
    weights: &LossWeights,
    config: &RenderConfig,
    ray_seed: u64,
) -> RayLoss {
    let traced = trace(scene, ray, config, ray_seed);
    let r = composite(&traced.batch).expect("traced batches are sorted");
    let mut out = RayLoss::default();
    let mut adjoint = CompositeAdjoint::default();

    if targets.color.iter().all(|c| c.is_finite()) {
        for c in 0..3 {
            let diff = r.color[c] - targets.color[c];
            out.loss.color += weights.color * diff * diff;
            adjoint.color[c] = 2.0 * weights.color * diff;
        }
    } else {
        out.skipped.push("color");
    }
    match targets.depth {
        Some(d) if d.is_finite() => {
            if weights.depth > 0.0 && r.total_opacity > weights.depth_opacity_threshold {
                let diff = r.depth * depth_scale - d;
                out.loss.depth = weights.depth * diff.abs();
                adjoint.depth = weights.depth * diff.signum() * depth_scale;
            }
        }
        Some(_) => out.skipped.push("depth"),
        None => {}
    }
    let mut mask_term = |list: &[(ObjectId, f64)],
                         pred: &dyn Fn(ObjectId) -> f64,
                         adj: &mut Vec<(ObjectId, f64)>| {
        for &(id, m) in list {
            if !(m.is_finite() && (0.0..=1.0).contains(&m)) {
                out.skipped.push("mask");
                continue;
            }
            let (l, g) = mask_ce(pred(id), m);
            out.loss.mask += weights.mask * l;
            adj.push((id, weights.mask * g));
        }
    };
    mask_term(&targets.modal, &|id| r.modal(id), &mut adjoint.modal);
    mask_term(&targets.amodal, &|id| r.amodal(id), &mut adjoint.amodal);
    out.loss.total = out.loss.color + out.loss.depth + out.loss.mask;

    let sample_grads = composite_backward(&traced.batch, &adjoint).expect("sorted");
    for (i, g) in sample_grads.iter().enumerate() {
        let st = &traced.stencils[i];
        if st.is_empty() {
            continue;
        }
        let latent = latent_of(scene, traced.sources[i]);
        let n = latent.dims.len();
        for (&voxel, &w) in st.indices.iter().zip(&st.weights) {
            if w == 0.0 {
                continue;
            }
            let v = voxel as usize;
            let mut push = |channel: usize, value: f64| {
                if value != 0.0 {
                    out.gradients.push(LatentGradient {
                        source: traced.sources[i],
                        voxel,
                        channel: channel as u8,
                        value,
                    });
                }
            };
            // d softplus = sigmoid; d sigmoid = s (1 - s)
            push(CH_DENSITY, g.density * w * sigmoid(latent.params[v]));
            for c in 0..3 {
                let s = latent.decoded[(1 + c) * n + v];
                push(1 + c, g.radiance[c] * w * s * (1.0 - s));
            }
        }
    }
    out
}

/// Per-voxel occupancy label: `Some(true/false)`, or `None` for unlabeled.
pub type OccupancyLabels = Vec<Option<bool>>;

/// Label 1 where density exceeds `threshold`, else 0.
pub fn occupancy_targets_from_density(density: &[f64], threshold: f64) -> Result<OccupancyLabels> {
    if !(threshold > 0.0) {
        return Err(Error::Domain(format!(
            "density threshold must be > 0, got {threshold}"
        )));
    }
    Ok(density.iter().map(|&d| Some(d > threshold)).collect())
}

pub fn occupancy_targets_for_volume(
    volume: &ObjectVolume,
    threshold: f64,
) -> Result<OccupancyLabels> {
    let d: Vec<f64> = volume.density().iter().map(|&x| x as f64).collect();
    occupancy_targets_from_density(&d, threshold)
}

/// Mean binary cross-entropy of the occupancy logits over labeled voxels,
/// and its gradient with respect to each logit: `(sigmoid(logit) - label) / count`.
pub fn occupancy_loss_and_gradients(
    latent: &LatentVolume,
    labels: &[Option<bool>],
) -> Result<(f64, Vec<f64>)> {
    let logits = latent.occupancy_logits();
    if labels.len() != logits.len() {
        return Err(Error::Contract(format!(
            "occupancy labels have {} entries, grid has {}",
            labels.len(),
            logits.len()
        )));
    }
    let count = labels.iter().filter(|l| l.is_some()).count();
    let mut grads = vec![0.0; logits.len()];
    if count == 0 {
        return Ok((0.0, grads));
    }
    let scale = 1.0 / count as f64;
    let mut loss = 0.0;
    for ((&x, label), g) in logits.iter().zip(labels).zip(grads.iter_mut()) {
        if let Some(label) = label {
            let y = if *label { 1.0 } else { 0.0 };
            // softplus(x) - y x == -[y ln s + (1-y) ln(1-s)]
            loss += softplus(x) - y * x;
            *g = (sigmoid(x) - y) * scale;
        }
    }
    Ok((loss * scale, grads))
}

/// Turns a scene of decoded volumes into one with fresh latents per object
/// (each object gets its own parameters, even if volumes were shared).
pub fn latent_scene_from(scene: &Scene) -> Scene<LatentVolume> {
    Scene {
        objects: scene
            .objects
            .iter()
            .map(|o| SceneObject {
                id: o.id,
                pose: o.pose,
                volume: Arc::new(LatentVolume::from_volume(&o.volume)),
            })
            .collect(),
        background: scene
            .background
            .as_ref()
            .map(|(p, v)| (*p, Arc::new(LatentVolume::from_volume(v)))),
    }
}

pub fn decode_scene(scene: &Scene<LatentVolume>) -> Scene {
    Scene {
        objects: scene
            .objects
            .iter()
            .map(|o| SceneObject {
                id: o.id,
                pose: o.pose,
                volume: Arc::new(o.volume.decode()),
            })
            .collect(),
        background: scene
            .background
            .as_ref()
            .map(|(p, v)| (*p, Arc::new(v.decode()))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub total: f64,
    pub color: f64,
    pub depth: f64,
    pub mask: f64,
    pub occupancy: f64,
}

#[derive(Debug, Clone, Default)]
pub struct FitReport {
    pub curve: Vec<LossRecord>,
    /// Number of ray terms skipped for non-finite targets.
    pub skipped_terms: usize,
}

impl FitReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,total,color,depth,mask,occupancy\n");
        for r in &self.curve {
            s += &format!(
                "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}\n",
                r.iteration, r.total, r.color, r.depth, r.mask, r.occupancy
            );
        }
        s
    }
}

/// External occupancy labels per volume; `None` falls back to the config.
#[derive(Debug, Clone, Default)]
pub struct OccupancySupervision {
    pub background: Option<OccupancyLabels>,
    pub objects: Vec<Option<OccupancyLabels>>,
}

struct Draw {
    view: usize,
    u: u32,
    v: u32,
    seed: u64,
}

/// Optimizes every latent in `scene` against `views`.
pub fn fit(
    mut scene: Scene<LatentVolume>,
    views: &[TrainView],
    config: &FitConfig,
    occupancy: &OccupancySupervision,
) -> Result<(Scene<LatentVolume>, FitReport)> {
    if views.is_empty() {
        return Err(Error::Contract("fit needs at least one view".into()));
    }
    config.validate()?;
    scene.validate()?;
    let ids = scene.object_ids();
    for v in views {
        v.validate(&ids)?;
    }

    let sources: Vec<Source> = scene
        .background
        .iter()
        .filter(|_| !config.freeze_background)
        .map(|_| Source::Background)
        .chain((0..scene.objects.len()).map(Source::Object))
        .collect();
    let slot_of = |s: Source| -> Option<usize> { sources.iter().position(|x| *x == s) };
    let sizes: Vec<usize> = sources
        .iter()
        .map(|&s| latent_of(&scene, s).params.len())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = FitReport::default();
    let mut chunk_grads: Vec<Vec<Vec<f64>>> = (0..GRADIENT_CHUNKS)
        .map(|_| sizes.iter().map(|&n| vec![0.0; n]).collect())
        .collect();
    let mut totals: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    let rays = config.rays_per_iteration;
    let inv_rays = 1.0 / rays as f64;

    for iteration in 0..config.iterations {
        let draws: Vec<Draw> = (0..rays)
            .map(|_| {
                let view = rng.random_range(0..views.len());
                let k = &views[view].camera.intrinsics;
                Draw {
                    view,
                    u: rng.random_range(0..k.width),
                    v: rng.random_range(0..k.height),
                    seed: rng.random(),
                }
            })
            .collect();
        let per_chunk = rays.div_ceil(GRADIENT_CHUNKS);
        let scene_ref = &scene;
        let chunk_results: Vec<(LossParts, usize)> = chunk_grads
            .par_iter_mut()
            .enumerate()
            .map(|(c, bufs)| {
                bufs.iter_mut().for_each(|b| b.fill(0.0));
                let mut parts = LossParts::default();
                let mut skipped = 0;
                let lo = (c * per_chunk).min(rays);
                let hi = ((c + 1) * per_chunk).min(rays);
                for d in &draws[lo..hi] {
                    let view = &views[d.view];
                    let ray = view.camera.ray(d.u, d.v).expect("drawn in range");
                    let dz = view.camera.pose.inverse_transform_vector(ray.direction()).z;
                    let targets = view.targets(d.u, d.v);
                    let rl = ray_loss_and_gradients(
                        scene_ref,
                        &ray,
                        dz,
                        &targets,
                        &config.weights,
                        &config.render,
                        d.seed,
                    );
                    parts += rl.loss;
                    skipped += rl.skipped.len();
                    for g in &rl.gradients {
                        if let Some(slot) = slot_of(g.source) {
                            let n = sizes[slot] / CHANNELS;
                            bufs[slot][g.channel as usize * n + g.voxel as usize] +=
                                g.value * inv_rays;
                        }
                    }
                }
                (parts, skipped)
            })
            .collect();

        let mut parts = LossParts::default();
        for (p, s) in &chunk_results {
            parts += *p;
            report.skipped_terms += s;
        }
        for field in [
            &mut parts.total,
            &mut parts.color,
            &mut parts.depth,
            &mut parts.mask,
        ] {
            *field *= inv_rays;
        }
        for (slot, total) in totals.iter_mut().enumerate() {
            let chunks = &chunk_grads;
            total.par_iter_mut().enumerate().for_each(|(j, t)| {
                *t = chunks.iter().map(|c| c[slot][j]).sum();
            });
        }

        if config.weights.occupancy > 0.0 {
            for (slot, &source) in sources.iter().enumerate() {
                let latent = latent_of(&scene, source);
                let labels = match source {
                    Source::Background => occupancy.background.clone(),
                    Source::Object(i) => occupancy.objects.get(i).cloned().flatten(),
                };
                let labels = match (labels, config.occupancy_density_threshold) {
                    (Some(l), _) => l,
                    (None, Some(th)) => {
                        occupancy_targets_from_density(latent.decoded_density(), th)?
                    }
                    (None, None) => continue,
                };
                let (loss, grads) = occupancy_loss_and_gradients(latent, &labels)?;
                parts.occupancy += config.weights.occupancy * loss;
                let n = sizes[slot] / CHANNELS;
                for (j, g) in grads.iter().enumerate() {
                    totals[slot][CH_OCCUPANCY * n + j] += config.weights.occupancy * g;
                }
            }
            parts.total += parts.occupancy;
        }

        for (slot, &source) in sources.iter().enumerate() {
            let latent = match source {
                Source::Background => &mut scene.background.as_mut().expect("listed").1,
                Source::Object(i) => &mut scene.objects[i].volume,
            };
            Arc::make_mut(latent).adam_step(&totals[slot], &config.optimizer);
        }
        report.curve.push(LossRecord {
            iteration,
            total: parts.total,
            color: parts.color,
            depth: parts.depth,
            mask: parts.mask,
            occupancy: parts.occupancy,
        });
        if iteration % 100 == 0 {
            log::debug!("iteration {iteration}: loss {:.6}", parts.total);
        }
    }
    Ok((scene, report))
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;
    use crate::geometry::{CameraIntrinsics, RigidPose};

    fn single_voxel_scene(density: f64) -> Scene<LatentVolume> {
        let b = AxisAlignedBox::centered([0.5; 3]).unwrap();
        let v = LatentVolume::fresh(GridDims::cube(2), b, density, 0.3).unwrap();
        let mut s = Scene::new();
        s.add_object(Arc::new(v), RigidPose::identity());
        s
    }

    #[test]
    fn activations() {
        assert_abs_diff_eq!(softplus(0.0), std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(softplus(inverse_softplus(3.7)), 3.7, epsilon = 1e-12);
        assert_abs_diff_eq!(sigmoid(logit(0.25)), 0.25, epsilon = 1e-12);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }

    #[test]
    fn transparent_scene_with_black_target_is_optimal() {
        let mut s = single_voxel_scene(1e-6);
        let v = Arc::get_mut(&mut s.objects[0].volume).unwrap();
        for i in 0..8 {
            v.set_param(CH_DENSITY, i, -800.0);
        }
        let ray = Ray::new(Vec3::new(0.0, 0.0, -2.0), Vec3::z()).unwrap();
        let rl = ray_loss_and_gradients(
            &s,
            &ray,
            1.0,
            &RayTargets::default(),
            &LossWeights::default(),
            &RenderConfig::default(),
            0,
        );
        assert_eq!(rl.loss.total, 0.0);
        assert!(rl.gradients.iter().all(|g| g.value == 0.0));
    }

    #[test]
    fn occupancy_closed_forms() {
        let b = AxisAlignedBox::centered([0.5; 3]).unwrap();
        let mut v = LatentVolume::fresh(GridDims::cube(2), b, 1.0, 0.5).unwrap();
        let (loss, grads) = occupancy_loss_and_gradients(&v, &[Some(true); 8]).unwrap();
        assert_abs_diff_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(grads[3], -0.5 / 8.0, epsilon = 1e-15);

        for i in 0..8 {
            v.set_param(CH_OCCUPANCY, i, 20.0);
        }
        let (loss, _) = occupancy_loss_and_gradients(&v, &[Some(true); 8]).unwrap();
        assert!(loss <= 1e-8);

        assert!(matches!(
            occupancy_loss_and_gradients(&v, &[Some(true); 7]),
            Err(Error::Contract(_))
        ));
        let (loss, grads) = occupancy_loss_and_gradients(&v, &[None; 8]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn occupancy_targets_threshold() {
        assert!(
            occupancy_targets_from_density(&[0.0; 4], 1.0)
                .unwrap()
                .iter()
                .all(|l| *l == Some(false))
        );
        assert!(
            occupancy_targets_from_density(&[10.0; 4], 1.0)
                .unwrap()
                .iter()
                .all(|l| *l == Some(true))
        );
        assert!(occupancy_targets_from_density(&[1.0], 0.0).is_err());
    }

    #[test]
    fn non_finite_targets_are_skipped() {
        let s = single_voxel_scene(2.0);
        let ray = Ray::new(Vec3::new(0.0, 0.0, -2.0), Vec3::z()).unwrap();
        let t = RayTargets {
            color: [0.2; 3],
            depth: Some(f64::NAN),
            modal: vec![(1, f64::INFINITY)],
            amodal: vec![],
        };
        let rl = ray_loss_and_gradients(
            &s,
            &ray,
            1.0,
            &t,
            &LossWeights::default(),
            &RenderConfig::default(),
            0,
        );
        assert_eq!(rl.skipped, vec!["depth", "mask"]);
        assert!(rl.loss.total.is_finite() && rl.loss.color > 0.0);
    }

    #[test]
    fn decoded_volume_is_valid_after_wild_updates() {
        let b = AxisAlignedBox::centered([0.5; 3]).unwrap();
        let mut v = LatentVolume::fresh(GridDims::cube(3), b, 1.0, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let opt = AdamSettings {
            learning_rate: 50.0,
            ..Default::default()
        };
        for _ in 0..20 {
            let g: Vec<f64> = (0..v.params.len())
                .map(|_| rng.random_range(-1e3..1e3))
                .collect();
            v.adam_step(&g, &opt);
        }
        v.decode().validate().unwrap();
    }

    #[test]
    fn fit_requires_views() {
        let s = single_voxel_scene(1.0);
        assert!(matches!(
            fit(
                s,
                &[],
                &FitConfig::default(),
                &OccupancySupervision::default()
            ),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn view_mask_ids_must_exist() {
        let cam = Camera {
            intrinsics: CameraIntrinsics::from_fov(2, 2, 1.0).unwrap(),
            pose: RigidPose::identity(),
        };
        let mut v = TrainView::new(cam, vec![0.0; 12]);
        v.modal_masks.push((9, vec![0.0; 4]));
        assert!(v.validate(&[1]).is_err());
        v.modal_masks[0].0 = 1;
        v.validate(&[1]).unwrap();
    }
}
