//! PSNR and single-scale SSIM.
//!
//! Color images use joint PSNR over all channels and SSIM on the BT.601 luma.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` when the inputs are equal.
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_err!("psnr shape mismatch {:?} vs {:?}", a.shape(), b.shape()));
    }
    if !(peak > 0.0) {
        return Err(Error::Config(format!("psnr peak must be positive, got {peak}")));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable 'valid' Gaussian filtering of an h×w plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let n = SSIM_WINDOW;
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..n).map(|i| plane[y * w + x + i] * k[i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..n).map(|i| rows[(y + i) * wo + x] * k[i]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, peak: f64) -> f64 {
    let k = gaussian_window();
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let e_aa = filter_valid(&aa, h, w, &k);
    let e_bb = filter_valid(&bb, h, w, &k);
    let e_ab = filter_valid(&ab, h, w, &k);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / mu_a.len() as f64
}

/// Luma (BT.601) or the single channel of one N×C×H×W batch item.
fn gray_plane<T: Real>(t: &Tensor<T>, n: usize) -> Result<Vec<f64>> {
    let (_, c, h, w) = t.dims4()?;
    let hw = h * w;
    let base = n * c * hw;
    let d = t.data();
    match c {
        1 => Ok(d[base..base + hw].iter().map(|v| v.as_f64()).collect()),
        3 => Ok((0..hw)
            .map(|i| {
                0.299 * d[base + i].as_f64() + 0.587 * d[base + hw + i].as_f64() + 0.114 * d[base + 2 * hw + i].as_f64()
            })
            .collect()),
        _ => Err(shape_err!("ssim supports 1 or 3 channels, got {c}")),
    }
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5) and valid borders,
/// averaged over batch items.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_err!("ssim shape mismatch {:?} vs {:?}", a.shape(), b.shape()));
    }
    let (n, _, h, w) = a.dims4()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(shape_err!("image {h}×{w} smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} SSIM window"));
    }
    let mut total = 0.0;
    for item in 0..n {
        let pa = gray_plane(a, item)?;
        let pb = gray_plane(b, item)?;
        total += ssim_plane(&pa, &pb, h, w, peak);
    }
    Ok(total / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub name: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Per-image scores and their arithmetic means.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub images: Vec<ImageScore>,
}

impl MetricReport {
    pub fn push(&mut self, name: impl Into<String>, psnr_db: f64, ssim: f64) {
        self.images.push(ImageScore { name: name.into(), psnr_db, ssim });
    }

    pub fn mean_psnr(&self) -> f64 {
        self.images.iter().map(|s| s.psnr_db).sum::<f64>() / self.images.len() as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.images.iter().map(|s| s.ssim).sum::<f64>() / self.images.len() as f64
    }

    /// `file,psnr_db,ssim` rows with four decimals, a trailing `mean` row, LF endings.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("file,psnr_db,ssim\n");
        for img in &self.images {
            s.push_str(&format!("{},{},{:.4}\n", img.name, fmt_db(img.psnr_db), img.ssim));
        }
        if !self.images.is_empty() {
            s.push_str(&format!("mean,{},{:.4}\n", fmt_db(self.mean_psnr()), self.mean_ssim()));
        }
        s
    }
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}
