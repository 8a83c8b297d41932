//! Seeded corruption generators: additive white Gaussian noise, the
//! signal-dependent heteroscedastic model, and a blockwise DCT quantizer that
//! reproduces baseline JPEG pixel loss.

use std::f64::consts::PI;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{config_err, Result};
use crate::tensor::{Real, Tensor};

/// Deterministic generator: ChaCha8 keyed by `seed` on stream `stream_id`.
/// Gaussian variates come from the Box–Muller transform, two per pair of
/// uniforms, the second cached for the next call.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

/// Serializable snapshot of an [`Rng`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
    pub spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self { inner, spare: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 ∈ (0, 1] keeps the logarithm finite
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * PI * u2).sin_cos();
        self.spare = Some(r * s);
        r * c
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.inner.get_seed(),
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos(),
            spare: self.spare,
        }
    }

    pub fn from_state(state: &RngState) -> Self {
        let mut inner = ChaCha8Rng::from_seed(state.seed);
        inner.set_stream(state.stream);
        inner.set_word_pos(state.word_pos);
        Self { inner, spare: state.spare }
    }
}

/// `image + sigma·z`, z ~ N(0,1) i.i.d. per element.
pub fn add_awgn<T: Real>(image: &Tensor<T>, sigma: f64, rng: &mut Rng) -> Result<Tensor<T>> {
    if !(sigma >= 0.0) {
        return Err(config_err!("noise sigma must be non-negative, got {sigma}"));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    Ok(image.map(|v| T::lit(v.as_f64() + sigma * rng.gaussian())))
}

/// Signal-dependent noise on a [0,1] image: variance `L·σs² + σc²` at level L.
pub fn add_hetero_gaussian<T: Real>(image: &Tensor<T>, sigma_s: f64, sigma_c: f64, rng: &mut Rng) -> Result<Tensor<T>> {
    if !(sigma_s >= 0.0 && sigma_c >= 0.0) {
        return Err(config_err!("heteroscedastic parameters must be non-negative, got ({sigma_s}, {sigma_c})"));
    }
    let (s2, c2) = (sigma_s * sigma_s, sigma_c * sigma_c);
    Ok(image.map(|v| {
        let level = v.as_f64();
        let var = (level * s2 + c2).max(0.0);
        if var == 0.0 {
            v
        } else {
            T::lit(level + var.sqrt() * rng.gaussian())
        }
    }))
}

/// Baseline luminance quantization table, row-major in spatial-frequency order.
pub const LUMA_QUANT: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Percentage scale applied to the base table for quality `q`.
pub fn quality_scale(q: u8) -> Result<u32> {
    if !(1..=100).contains(&q) {
        return Err(config_err!("JPEG quality must be in 1..=100, got {q}"));
    }
    let q = q as u32;
    Ok(if q < 50 { 5000 / q } else { 200 - 2 * q })
}

pub fn quant_table(q: u8) -> Result<[u16; 64]> {
    let scale = quality_scale(q)?;
    let mut table = [0u16; 64];
    for (dst, &base) in table.iter_mut().zip(&LUMA_QUANT) {
        *dst = ((base as u32 * scale + 50) / 100).clamp(1, 255) as u16;
    }
    Ok(table)
}

/// Compress-decompress a grayscale N×1×H×W image in [0,255] at quality `q`.
pub fn jpeg_degrade<T: Real>(image: &Tensor<T>, q: u8) -> Result<Tensor<T>> {
    jpeg_degrade_with_table(image, &quant_table(q)?)
}

/// As [`jpeg_degrade`] with an explicit quantization table.
pub fn jpeg_degrade_with_table<T: Real>(image: &Tensor<T>, table: &[u16; 64]) -> Result<Tensor<T>> {
    let (n, c, h, w) = image.dims4()?;
    if c != 1 {
        return Err(crate::error::shape_err!("JPEG degradation is grayscale only, got {c} channels"));
    }
    let (hp, wp) = (h.div_ceil(8) * 8, w.div_ceil(8) * 8);
    let basis = dct_basis();
    let mut out = Vec::with_capacity(image.numel());
    for item in 0..n {
        let plane = &image.data()[item * h * w..(item + 1) * h * w];
        // edge replication up to a multiple of 8
        let mut padded = vec![0.0f64; hp * wp];
        for y in 0..hp {
            for x in 0..wp {
                padded[y * wp + x] = plane[y.min(h - 1) * w + x.min(w - 1)].as_f64();
            }
        }
        let mut block = [0.0f64; 64];
        for by in (0..hp).step_by(8) {
            for bx in (0..wp).step_by(8) {
                for y in 0..8 {
                    for x in 0..8 {
                        block[y * 8 + x] = padded[(by + y) * wp + bx + x] - 128.0;
                    }
                }
                let mut coef = dct8x8(&block, &basis);
                for (cv, &qv) in coef.iter_mut().zip(table) {
                    *cv = (*cv / qv as f64).round() * qv as f64;
                }
                let rec = idct8x8(&coef, &basis);
                for y in 0..8 {
                    for x in 0..8 {
                        padded[(by + y) * wp + bx + x] = (rec[y * 8 + x] + 128.0).round().clamp(0.0, 255.0);
                    }
                }
            }
        }
        for y in 0..h {
            out.extend(padded[y * wp..y * wp + w].iter().map(|&v| T::lit(v)));
        }
    }
    Tensor::new(image.shape(), out)
}

/// `basis[u][x] = C(u)/2 · cos((2x+1)uπ/16)`, orthonormal 8-point DCT-II rows.
fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    for (u, row) in b.iter_mut().enumerate() {
        let cu = if u == 0 { (0.5f64).sqrt() } else { 1.0 };
        for (x, v) in row.iter_mut().enumerate() {
            *v = 0.5 * cu * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos();
        }
    }
    b
}

fn dct8x8(block: &[f64; 64], b: &[[f64; 8]; 8]) -> [f64; 64] {
    let mut tmp = [0.0; 64];
    // rows: tmp[y][u] = Σx block[y][x]·b[u][x]
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|x| block[y * 8 + x] * b[u][x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for v in 0..8 {
        for u in 0..8 {
            out[v * 8 + u] = (0..8).map(|y| tmp[y * 8 + u] * b[v][y]).sum();
        }
    }
    out
}

fn idct8x8(coef: &[f64; 64], b: &[[f64; 8]; 8]) -> [f64; 64] {
    let mut tmp = [0.0; 64];
    for v in 0..8 {
        for x in 0..8 {
            tmp[v * 8 + x] = (0..8).map(|u| coef[v * 8 + u] * b[u][x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|v| tmp[v * 8 + x] * b[v][y]).sum();
        }
    }
    out
}

/// Which corruption to apply, with exactly the parameters that kind needs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Degradation {
    /// Standard deviation on the 0–255 scale.
    Awgn { sigma: f64 },
    /// Signal-dependent and stationary deviations on the 0–1 scale.
    Hetero { sigma_s: f64, sigma_c: f64 },
    Jpeg { quality: u8 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationSpec {
    pub kind: Degradation,
    pub seed: u64,
    /// Clamp the corrupted image to [0,255].
    pub clip: bool,
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            Degradation::Awgn { sigma } if !(sigma >= 0.0) => Err(config_err!("negative sigma {sigma}")),
            Degradation::Hetero { sigma_s, sigma_c } if !(sigma_s >= 0.0 && sigma_c >= 0.0) => {
                Err(config_err!("negative heteroscedastic parameters ({sigma_s}, {sigma_c})"))
            }
            Degradation::Jpeg { quality } => quality_scale(quality).map(|_| ()),
            _ => Ok(()),
        }
    }

    /// Corrupt an image on the 0–255 scale.
    pub fn apply<T: Real>(&self, image: &Tensor<T>, rng: &mut Rng) -> Result<Tensor<T>> {
        self.apply_kind(self.kind, image, rng)
    }

    pub fn apply_kind<T: Real>(&self, kind: Degradation, image: &Tensor<T>, rng: &mut Rng) -> Result<Tensor<T>> {
        let out = match kind {
            Degradation::Awgn { sigma } => add_awgn(image, sigma, rng)?,
            Degradation::Hetero { sigma_s, sigma_c } => {
                let unit = image.map(|v| v / T::lit(255.0));
                add_hetero_gaussian(&unit, sigma_s, sigma_c, rng)?.map(|v| v * T::lit(255.0))
            }
            Degradation::Jpeg { quality } => jpeg_degrade(image, quality)?,
        };
        Ok(if self.clip { out.map(|v| v.max(T::zero()).min(T::lit(255.0))) } else { out })
    }
}
