//! Explicit voxel volumes: density, RGB radiance and occupancy logits on a
//! regular grid spanning an object-local box.
//!
//! Voxel `(z, y, x)` has its center at `min + (index + 0.5) / dims * extent`
//! along each axis. Queries between the outermost voxel centers and the box
//! faces clamp to the edge voxels; queries outside the box are empty space.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AxisAlignedBox, Vec3};

pub const COVV_MAGIC: &[u8; 4] = b"COVV";
pub const COVV_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 3 * 4 + 6 * 8;

/// Grid size as `(depth, height, width)` = voxel counts along `(z, y, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridDims {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl GridDims {
    pub fn new(d: usize, h: usize, w: usize) -> Self {
        Self { d, h, w }
    }

    pub fn cube(n: usize) -> Self {
        Self::new(n, n, n)
    }

    pub fn len(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Linear index, z-major.
    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.h + y) * self.w + x
    }

    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let x = idx % self.w;
        let y = (idx / self.w) % self.h;
        (idx / (self.w * self.h), y, x)
    }

    /// Counts along (x, y, z).
    pub fn xyz(&self) -> [usize; 3] {
        [self.w, self.h, self.d]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VolumeSample {
    pub density: f64,
    pub radiance: [f64; 3],
}

/// Trilinear interpolation stencil: eight voxel indices and their weights.
/// Outside the box every weight is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    pub indices: [u32; 8],
    pub weights: [f64; 8],
}

impl Stencil {
    pub const EMPTY: Stencil = Stencil {
        indices: [0; 8],
        weights: [0.0; 8],
    };

    pub fn is_empty(&self) -> bool {
        self.weights.iter().all(|&w| w == 0.0)
    }

    pub fn apply(&self, values: impl Fn(usize) -> f64) -> f64 {
        self.indices
            .iter()
            .zip(&self.weights)
            .filter(|(_, w)| **w != 0.0)
            .map(|(&i, &w)| w * values(i as usize))
            .sum()
    }

    /// Stencil for `local_point` on a grid of `dims` spanning `bounds`.
    pub fn locate(dims: GridDims, bounds: &AxisAlignedBox, local_point: &Vec3) -> Stencil {
        if !bounds.contains(local_point) {
            return Stencil::EMPTY;
        }
        let counts = dims.xyz();
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let n = counts[a];
            let extent = bounds.max_corner[a] - bounds.min_corner[a];
            let c = (local_point[a] - bounds.min_corner[a]) / extent * n as f64 - 0.5;
            let c = c.clamp(0.0, (n - 1) as f64);
            let i0 = (c.floor() as usize).min(n - 1);
            lo[a] = i0;
            hi[a] = (i0 + 1).min(n - 1);
            frac[a] = c - i0 as f64;
        }
        let mut st = Stencil::EMPTY;
        for corner in 0..8 {
            let pick = |a: usize| corner >> a & 1 == 1;
            let x = if pick(0) { hi[0] } else { lo[0] };
            let y = if pick(1) { hi[1] } else { lo[1] };
            let z = if pick(2) { hi[2] } else { lo[2] };
            let w = (0..3)
                .map(|a| if pick(a) { frac[a] } else { 1.0 - frac[a] })
                .product::<f64>();
            st.indices[corner] = dims.index(z, y, x) as u32;
            st.weights[corner] = w;
        }
        st
    }
}

/// Anything that can be queried for density and radiance in its own frame.
pub trait Field: Send + Sync {
    fn bounds(&self) -> &AxisAlignedBox;
    fn sample(&self, local_point: &Vec3) -> VolumeSample;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectVolume {
    dims: GridDims,
    bounds: AxisAlignedBox,
    density: Vec<f32>,
    /// Channel-major: all red, then all green, then all blue.
    radiance: Vec<f32>,
    occupancy_logit: Vec<f32>,
}

impl ObjectVolume {
    /// Empty space: zero density, black, occupancy logit 0.
    pub fn zeros(dims: GridDims, bounds: AxisAlignedBox) -> Result<Self> {
        check_dims(dims)?;
        bounds.validate()?;
        let n = dims.len();
        Ok(Self {
            dims,
            bounds,
            density: vec![0.0; n],
            radiance: vec![0.0; 3 * n],
            occupancy_logit: vec![0.0; n],
        })
    }

    pub fn from_arrays(
        dims: GridDims,
        bounds: AxisAlignedBox,
        density: Vec<f32>,
        radiance: Vec<f32>,
        occupancy_logit: Vec<f32>,
    ) -> Result<Self> {
        check_dims(dims)?;
        bounds.validate()?;
        let n = dims.len();
        if density.len() != n || radiance.len() != 3 * n || occupancy_logit.len() != n {
            return Err(Error::Contract(format!(
                "array lengths ({}, {}, {}) do not match grid of {n} voxels",
                density.len(),
                radiance.len(),
                occupancy_logit.len()
            )));
        }
        let v = Self {
            dims,
            bounds,
            density,
            radiance,
            occupancy_logit,
        };
        v.validate()?;
        Ok(v)
    }

    /// Fills every voxel from a function of its center (object-local).
    /// Returns (density, rgb, occupancy_logit); values are clamped into range.
    pub fn from_fn(
        dims: GridDims,
        bounds: AxisAlignedBox,
        f: impl Fn(&Vec3) -> (f64, [f64; 3], f64),
    ) -> Result<Self> {
        let mut v = Self::zeros(dims, bounds)?;
        for idx in 0..dims.len() {
            let (s, c, o) = f(&v.voxel_center(idx));
            v.set_voxel(idx, s, c, o);
        }
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self
            .density
            .iter()
            .position(|d| !(d.is_finite() && *d >= 0.0))
        {
            return Err(Error::Domain(format!(
                "density at voxel {i} is {} (must be finite and >= 0)",
                self.density[i]
            )));
        }
        if let Some(i) = self.radiance.iter().position(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Domain(format!(
                "radiance component {i} is {} (must lie in [0, 1])",
                self.radiance[i]
            )));
        }
        if let Some(i) = self.occupancy_logit.iter().position(|o| o.is_nan()) {
            return Err(Error::Domain(format!(
                "occupancy logit at voxel {i} is NaN"
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn bounds(&self) -> &AxisAlignedBox {
        &self.bounds
    }

    pub fn density(&self) -> &[f32] {
        &self.density
    }

    pub fn radiance(&self) -> &[f32] {
        &self.radiance
    }

    pub fn occupancy_logit(&self) -> &[f32] {
        &self.occupancy_logit
    }

    pub fn max_density(&self) -> f64 {
        self.density.iter().fold(0.0f32, |m, &d| m.max(d)) as f64
    }

    pub fn voxel_radiance(&self, idx: usize) -> [f64; 3] {
        let n = self.dims.len();
        [
            self.radiance[idx] as f64,
            self.radiance[n + idx] as f64,
            self.radiance[2 * n + idx] as f64,
        ]
    }

    /// Writes one voxel, clamping density to >= 0 and radiance to [0, 1].
    pub fn set_voxel(&mut self, idx: usize, density: f64, rgb: [f64; 3], occupancy_logit: f64) {
        let n = self.dims.len();
        self.density[idx] = density.max(0.0) as f32;
        for (c, v) in rgb.iter().enumerate() {
            self.radiance[c * n + idx] = v.clamp(0.0, 1.0) as f32;
        }
        self.occupancy_logit[idx] = occupancy_logit as f32;
    }

    pub fn set_occupancy_logits(&mut self, logits: &[f32]) -> Result<()> {
        if logits.len() != self.dims.len() {
            return Err(Error::Contract("occupancy length mismatch".into()));
        }
        self.occupancy_logit.copy_from_slice(logits);
        Ok(())
    }

    pub fn voxel_center(&self, idx: usize) -> Vec3 {
        let (z, y, x) = self.dims.coords(idx);
        let ijk = [x, y, z];
        let counts = self.dims.xyz();
        Vec3::from_fn(|a, _| {
            let lo = self.bounds.min_corner[a];
            let hi = self.bounds.max_corner[a];
            lo + (ijk[a] as f64 + 0.5) / counts[a] as f64 * (hi - lo)
        })
    }

    pub fn sample_trilinear(&self, local_point: &Vec3) -> VolumeSample {
        self.sample_trilinear_with_weights(local_point).0
    }

    pub fn sample_trilinear_with_weights(&self, local_point: &Vec3) -> (VolumeSample, Stencil) {
        let st = Stencil::locate(self.dims, &self.bounds, local_point);
        if st.is_empty() {
            return (VolumeSample::default(), st);
        }
        let n = self.dims.len();
        let sample = VolumeSample {
            density: st.apply(|i| self.density[i] as f64),
            radiance: [0, 1, 2].map(|c| st.apply(|i| self.radiance[c * n + i] as f64)),
        };
        (sample, st)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        w.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|msg| Error::format(path, msg))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.dims.len();
        let mut out = Vec::with_capacity(HEADER_LEN + 20 * n);
        out.extend_from_slice(COVV_MAGIC);
        out.extend_from_slice(&COVV_VERSION.to_le_bytes());
        for v in [self.dims.d, self.dims.h, self.dims.w] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in self.bounds.min_corner.iter().chain(&self.bounds.max_corner) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for arr in [&self.density, &self.radiance, &self.occupancy_logit] {
            for v in arr.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 4 {
            return Err(format!("file too short for magic ({} bytes)", bytes.len()));
        }
        if &bytes[..4] != COVV_MAGIC {
            return Err(format!(
                "bad magic {:?}, expected \"COVV\"",
                String::from_utf8_lossy(&bytes[..4])
            ));
        }
        if bytes.len() < HEADER_LEN {
            return Err(format!(
                "truncated header ({} of {HEADER_LEN} bytes)",
                bytes.len()
            ));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(4);
        if version != COVV_VERSION {
            return Err(format!(
                "unsupported version {version}, expected {COVV_VERSION}"
            ));
        }
        let (d, h, w) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
        let n = d
            .checked_mul(h)
            .and_then(|x| x.checked_mul(w))
            .ok_or_else(|| format!("dimension overflow {d}x{h}x{w}"))?;
        let payload = n
            .checked_mul(20)
            .ok_or_else(|| format!("dimension overflow {d}x{h}x{w}"))?;
        let expected = HEADER_LEN
            .checked_add(payload)
            .ok_or_else(|| format!("dimension overflow {d}x{h}x{w}"))?;
        if bytes.len() != expected {
            return Err(format!(
                "payload length {} does not match {d}x{h}x{w} grid ({expected} bytes expected)",
                bytes.len()
            ));
        }
        let mut corners = [0.0; 6];
        for (i, c) in corners.iter_mut().enumerate() {
            *c = f64_at(20 + 8 * i);
        }
        let bounds = AxisAlignedBox {
            min_corner: [corners[0], corners[1], corners[2]],
            max_corner: [corners[3], corners[4], corners[5]],
        };
        let floats = |start: usize, count: usize| -> Vec<f32> {
            bytes[start..start + 4 * count]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        let density = floats(HEADER_LEN, n);
        let radiance = floats(HEADER_LEN + 4 * n, 3 * n);
        let occupancy = floats(HEADER_LEN + 16 * n, n);
        Self::from_arrays(GridDims::new(d, h, w), bounds, density, radiance, occupancy)
            .map_err(|e| e.to_string())
    }
}

impl Field for ObjectVolume {
    fn bounds(&self) -> &AxisAlignedBox {
        &self.bounds
    }

    fn sample(&self, local_point: &Vec3) -> VolumeSample {
        self.sample_trilinear(local_point)
    }
}

fn check_dims(dims: GridDims) -> Result<()> {
    if dims.d < 2 || dims.h < 2 || dims.w < 2 {
        return Err(Error::Domain(format!(
            "grid {}x{}x{} must have at least 2 voxels per axis",
            dims.d, dims.h, dims.w
        )));
    }
    if dims.d.max(dims.h).max(dims.w) > u32::MAX as usize || dims.len() > u32::MAX as usize {
        return Err(Error::Domain("grid too large for u32 voxel indices".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_volume(n: usize, seed: u64) -> ObjectVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bounds = AxisAlignedBox::new([-0.5, -0.3, -0.2], [0.5, 0.4, 0.6]).unwrap();
        let mut v = ObjectVolume::zeros(GridDims::cube(n), bounds).unwrap();
        for i in 0..v.dims().len() {
            v.set_voxel(
                i,
                rng.random_range(0.0..10.0),
                [rng.random(), rng.random(), rng.random()],
                rng.random_range(-5.0..5.0),
            );
        }
        v
    }

    #[test]
    fn voxel_center_returns_stored_values() {
        let v = random_volume(5, 1);
        for idx in [0, 17, 62, 124] {
            let (s, st) = v.sample_trilinear_with_weights(&v.voxel_center(idx));
            assert_abs_diff_eq!(s.density, v.density()[idx] as f64, epsilon = 1e-6);
            assert_abs_diff_eq!(s.radiance[1], v.voxel_radiance(idx)[1], epsilon = 1e-6);
            let ones = st
                .weights
                .iter()
                .filter(|w| (**w - 1.0).abs() < 1e-9)
                .count();
            let zeros = st.weights.iter().filter(|w| w.abs() < 1e-9).count();
            assert_eq!((ones, zeros), (1, 7));
        }
    }

    #[test]
    fn midpoint_is_mean_of_neighbours() {
        let v = random_volume(4, 2);
        let a = v.dims().index(1, 2, 1);
        let b = v.dims().index(1, 2, 2);
        let mid = (v.voxel_center(a) + v.voxel_center(b)) * 0.5;
        let s = v.sample_trilinear(&mid);
        let expected = 0.5 * (v.density()[a] as f64 + v.density()[b] as f64);
        assert_abs_diff_eq!(s.density, expected, epsilon = 1e-6);
    }

    #[test]
    fn outside_box_is_empty() {
        let v = random_volume(4, 3);
        let s = v.sample_trilinear(&Vec3::new(0.0, 0.0, 0.61));
        assert_eq!(s, VolumeSample::default());
        let (_, st) = v.sample_trilinear_with_weights(&Vec3::new(-0.51, 0.0, 0.0));
        assert!(st.is_empty());
    }

    #[test]
    fn two_cubed_box_center_weights_are_uniform() {
        let v = random_volume(2, 4);
        let (_, st) = v.sample_trilinear_with_weights(&v.bounds().center());
        for w in st.weights {
            assert_abs_diff_eq!(w, 0.125, epsilon = 1e-12);
        }
    }

    #[test]
    fn boundary_half_voxel_clamps_to_edge() {
        let v = random_volume(3, 5);
        let c = v.voxel_center(0);
        // between the min corner and the first voxel center
        let p = (c + v.bounds().min()) * 0.5;
        let s = v.sample_trilinear(&p);
        assert_abs_diff_eq!(s.density, v.density()[0] as f64, epsilon = 1e-6);
    }

    #[test]
    fn rejects_invalid_contents() {
        let b = AxisAlignedBox::centered([1.0; 3]).unwrap();
        assert!(ObjectVolume::zeros(GridDims::new(1, 4, 4), b).is_err());
        let dims = GridDims::cube(2);
        let bad_density = vec![-1.0; 8];
        assert!(
            ObjectVolume::from_arrays(dims, b, bad_density, vec![0.0; 24], vec![0.0; 8]).is_err()
        );
        let bad_rgb = vec![1.5; 24];
        assert!(ObjectVolume::from_arrays(dims, b, vec![0.0; 8], bad_rgb, vec![0.0; 8]).is_err());
        assert!(
            ObjectVolume::from_arrays(dims, b, vec![0.0; 7], vec![0.0; 24], vec![0.0; 8]).is_err()
        );
    }

    #[test]
    fn save_load_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.covv");
        let v = random_volume(8, 6);
        v.save(&path).unwrap();
        let back = ObjectVolume::load(&path).unwrap();
        assert_eq!(back.dims(), v.dims());
        assert_eq!(back.bounds(), v.bounds());
        let bits = |a: &[f32]| a.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.density()), bits(v.density()));
        assert_eq!(bits(back.radiance()), bits(v.radiance()));
        assert_eq!(bits(back.occupancy_logit()), bits(v.occupancy_logit()));
    }

    #[test]
    fn header_layout() {
        let v = random_volume(2, 7);
        let bytes = v.to_bytes();
        assert_eq!(&bytes[..4], b"COVV");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(bytes.len(), 68 + 20 * 8);
        let density0 = f32::from_le_bytes(bytes[68..72].try_into().unwrap());
        assert_eq!(density0.to_bits(), v.density()[0].to_bits());
    }

    #[test]
    fn truncated_and_bad_magic_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let v = random_volume(3, 8);
        let bytes = v.to_bytes();

        let p = dir.path().join("trunc.covv");
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(ObjectVolume::load(&p), Err(Error::Format { .. })));
        std::fs::write(&p, &bytes[..30]).unwrap();
        assert!(matches!(ObjectVolume::load(&p), Err(Error::Format { .. })));

        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"NOPE");
        let p = dir.path().join("magic.covv");
        std::fs::write(&p, &bad).unwrap();
        let msg = ObjectVolume::load(&p).unwrap_err().to_string();
        assert!(msg.contains("magic") && msg.contains("NOPE"), "{msg}");

        let mut huge = bytes.clone();
        huge[8..20].copy_from_slice(&[0xff; 12]);
        std::fs::write(&p, &huge).unwrap();
        assert!(
            ObjectVolume::load(&p)
                .unwrap_err()
                .to_string()
                .contains("overflow")
        );

        let mut ver = bytes;
        ver[4] = 2;
        std::fs::write(&p, &ver).unwrap();
        assert!(
            ObjectVolume::load(&p)
                .unwrap_err()
                .to_string()
                .contains("version")
        );
    }

    #[test]
    fn missing_file_is_reported() {
        assert!(matches!(
            ObjectVolume::load("/nonexistent/x.covv"),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn trilinear_continuity() {
        let v = random_volume(8, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let diag = v.bounds().diagonal();
        let tol = 1e-4 * v.max_density();
        for _ in 0..1000 {
            let p = Vec3::from_fn(|a, _| {
                rng.random_range(v.bounds().min_corner[a] + 1e-3..v.bounds().max_corner[a] - 1e-3)
            });
            let dir = Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
            let q = p + dir * (1e-6 * diag);
            let (a, b) = (v.sample_trilinear(&p), v.sample_trilinear(&q));
            assert!((a.density - b.density).abs() <= tol);
        }
    }

    proptest! {
        #[test]
        fn weights_sum_to_one_and_values_bounded(
            seed in 0u64..1000,
            p in prop::array::uniform3(0.0..1.0f64),
        ) {
            let v = random_volume(4, seed);
            let b = v.bounds();
            let p = Vec3::from_fn(|a, _| b.min_corner[a] + p[a] * (b.max_corner[a] - b.min_corner[a]));
            let (s, st) = v.sample_trilinear_with_weights(&p);
            let sum: f64 = st.weights.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            let vals: Vec<f64> = st.indices.iter().map(|&i| v.density()[i as usize] as f64).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(s.density >= lo - 1e-9 && s.density <= hi + 1e-9);
        }

        #[test]
        fn exterior_is_transparent(p in prop::array::uniform3(-3.0..3.0f64)) {
            let v = random_volume(3, 11);
            let p = Vec3::from(p);
            prop_assume!(!v.bounds().contains(&p));
            prop_assert_eq!(v.sample_trilinear(&p).density, 0.0);
        }
    }
}
