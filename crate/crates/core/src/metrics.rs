//! Image quality metrics: PSNR and SSIM.

use crate::error::{Error, Result};

/// Interleaved RGB image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::Contract(format!(
                "{} values for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_f32(width: usize, height: usize, data: &[f32]) -> Result<Self> {
        Self::new(width, height, data.iter().map(|&x| x as f64).collect())
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; 3 * width * height],
        }
    }

    fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }
}

fn check_shapes(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.width != b.width || a.height != b.height || a.data.len() != b.data.len() {
        return Err(Error::Contract(format!(
            "image shapes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

pub fn mse(prediction: &RgbImage, reference: &RgbImage) -> Result<f64> {
    check_shapes(prediction, reference)?;
    let n = prediction.data.len().max(1) as f64;
    Ok(prediction
        .data
        .iter()
        .zip(&reference.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// `10 log10(1 / MSE)`; identical images give `f64::INFINITY`.
pub fn psnr(prediction: &RgbImage, reference: &RgbImage) -> Result<f64> {
    let m = mse(prediction, reference)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * m.log10())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|x| x / s).collect()
}

/// Separable "valid" filtering: output is (w - k + 1) x (h - k + 1).
fn filter_valid(img: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_channel(a: &[f64], b: &[f64], w: usize, h: usize, cfg: &SsimConfig) -> f64 {
    let k = gaussian_kernel(cfg.window, cfg.sigma);
    let c1 = (cfg.k1 * 1.0).powi(2);
    let c2 = (cfg.k2 * 1.0).powi(2);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = filter_valid(a, w, h, &k);
    let mu_b = filter_valid(b, w, h, &k);
    let e_aa = filter_valid(&prod(a, a), w, h, &k);
    let e_bb = filter_valid(&prod(b, b), w, h, &k);
    let e_ab = filter_valid(&prod(a, b), w, h, &k);
    let n = mu_a.len();
    (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = (e_aa[i] - ma * ma).max(0.0);
            let vb = (e_bb[i] - mb * mb).max(0.0);
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum::<f64>()
        / n as f64
}

/// Mean local SSIM over every fully-covered window, averaged over channels.
pub fn ssim_with(prediction: &RgbImage, reference: &RgbImage, cfg: &SsimConfig) -> Result<f64> {
    check_shapes(prediction, reference)?;
    if prediction.width < cfg.window || prediction.height < cfg.window {
        return Err(Error::Domain(format!(
            "image {}x{} is smaller than the {}x{} SSIM window",
            prediction.width, prediction.height, cfg.window, cfg.window
        )));
    }
    let (w, h) = (prediction.width, prediction.height);
    let total: f64 = (0..3)
        .map(|c| ssim_channel(&prediction.channel(c), &reference.channel(c), w, h, cfg))
        .sum();
    Ok((total / 3.0).clamp(-1.0, 1.0))
}

pub fn ssim(prediction: &RgbImage, reference: &RgbImage) -> Result<f64> {
    ssim_with(prediction, reference, &SsimConfig::default())
}

/// Per-image metrics averaged over a set of pairs.
pub fn mean_metrics(pairs: &[(RgbImage, RgbImage)]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::Domain("no image pairs".into()));
    }
    let mut p = 0.0;
    let mut s = 0.0;
    for (a, b) in pairs {
        p += psnr(a, b)?;
        s += ssim(a, b)?;
    }
    Ok((p / pairs.len() as f64, s / pairs.len() as f64))
}
