//! Pixel-level image quality metrics: PSNR and SSIM.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// PSNR is capped here so identical images stay finite in reports.
pub const PSNR_CAP: f32 = 99.0;

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f32 = 1.5;
pub const SSIM_K1: f32 = 0.01;
pub const SSIM_K2: f32 = 0.03;

/// Peak signal-to-noise ratio in dB for images in `[0,1]` (L = 1):
/// `10 * log10(1 / MSE)`, capped at 99 dB.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f32> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "psnr",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut acc = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = (*x - *y) as f64;
        acc += d * d;
    }
    let mse = acc / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP as f64) as f32)
}

fn gaussian_window(size: usize, sigma: f32) -> Vec<f32> {
    let c = (size as f32 - 1.0) / 2.0;
    let mut w: Vec<f32> = (0..size * size)
        .map(|i| {
            let y = (i / size) as f32 - c;
            let x = (i % size) as f32 - c;
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f32 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Mean SSIM over a sliding Gaussian window (valid positions only), with the
/// standard stabilizers `C1 = (k1 L)^2`, `C2 = (k2 L)^2`, `L = 1`.
pub fn ssim(a: &Tensor, b: &Tensor, window: usize, k1: f32, k2: f32) -> Result<f32> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let [h, w] = a.shape() else {
        return Err(Error::invalid("ssim: images must be [h,w]"));
    };
    let (h, w) = (*h, *w);
    if window == 0 || window % 2 == 0 || window > h.min(w) {
        return Err(Error::invalid(format!(
            "ssim: window {window} must be odd and <= min(h,w) = {}",
            h.min(w)
        )));
    }
    let win = gaussian_window(window, SSIM_SIGMA);
    let c1 = k1 * k1; // (k1 * L)^2 with L = 1
    let c2 = k2 * k2;

    let xa = a.data();
    let xb = b.data();
    let mut total = 0.0f64;
    let mut count = 0usize;
    for oy in 0..=(h - window) {
        for ox in 0..=(w - window) {
            let mut mu_a = 0.0f32;
            let mut mu_b = 0.0f32;
            let mut aa = 0.0f32;
            let mut bb = 0.0f32;
            let mut ab = 0.0f32;
            for ky in 0..window {
                for kx in 0..window {
                    let g = win[ky * window + kx];
                    let va = xa[(oy + ky) * w + ox + kx];
                    let vb = xb[(oy + ky) * w + ox + kx];
                    mu_a += g * va;
                    mu_b += g * vb;
                    aa += g * va * va;
                    bb += g * vb * vb;
                    ab += g * va * vb;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            total += (num / den) as f64;
            count += 1;
        }
    }
    Ok((total / count as f64) as f32)
}

pub fn ssim_default(a: &Tensor, b: &Tensor) -> Result<f32> {
    ssim(a, b, SSIM_WINDOW, SSIM_K1, SSIM_K2)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Per-sample PSNR/SSIM plus aggregates, emitted as tab-separated lines:
/// one `id<TAB>psnr<TAB>ssim` per sample, then `MEAN` and `STD` rows.
#[derive(Default, Clone)]
pub struct MetricReport {
    pub entries: Vec<(String, f32, f32)>,
}

impl MetricReport {
    pub fn push(&mut self, id: impl Into<String>, psnr: f32, ssim: f32) {
        self.entries.push((id.into(), psnr, ssim));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn mean_psnr(&self) -> f32 {
        mean(self.entries.iter().map(|e| e.1))
    }

    pub fn mean_ssim(&self) -> f32 {
        mean(self.entries.iter().map(|e| e.2))
    }

    /// Sample block plus MEAN/STD rows (population standard deviation).
    pub fn emit(&self) -> String {
        let mut out = String::new();
        for (id, p, s) in &self.entries {
            out.push_str(&format!("{id}\t{p:.4}\t{s:.6}\n"));
        }
        let (mp, ms) = (self.mean_psnr(), self.mean_ssim());
        let sp = std_dev(self.entries.iter().map(|e| e.1), mp);
        let ss = std_dev(self.entries.iter().map(|e| e.2), ms);
        out.push_str(&format!("MEAN\t{mp:.4}\t{ms:.6}\n"));
        out.push_str(&format!("STD\t{sp:.4}\t{ss:.6}\n"));
        out
    }
}

fn mean(values: impl Iterator<Item = f32>) -> f32 {
    let (mut sum, mut n) = (0.0f64, 0usize);
    for v in values {
        sum += v as f64;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        (sum / n as f64) as f32
    }
}

fn std_dev(values: impl Iterator<Item = f32>, mean: f32) -> f32 {
    let (mut sum, mut n) = (0.0f64, 0usize);
    for v in values {
        let d = (v - mean) as f64;
        sum += d * d;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        ((sum / n as f64).sqrt()) as f32
    }
}
