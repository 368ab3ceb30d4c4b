//! Robustness perturbations: baseline JPEG round trip and separable Gaussian blur.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Standard JPEG luminance quantization table (quality 50), row-major.
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

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Perturbation {
    Jpeg { quality: u8 },
    Blur { sigma: f64 },
}

impl Perturbation {
    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        match *self {
            Perturbation::Jpeg { quality } => jpeg(image, quality),
            Perturbation::Blur { sigma } => gaussian_blur(image, sigma),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Perturbation::Jpeg { quality } => format!("jpeg_q{quality}"),
            Perturbation::Blur { sigma } => format!("blur_s{sigma}"),
        }
    }
}

/// Quality-scaled quantization table with the usual IJG scaling rule.
pub fn quant_table(quality: u8) -> Result<[f64; 64]> {
    if !(1..=100).contains(&quality) {
        return Err(Error::InvalidArgument(format!("JPEG quality {quality} outside 1..=100")));
    }
    let q = quality as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0.0; 64];
    for (o, &base) in out.iter_mut().zip(&LUMA_QUANT) {
        *o = ((base as u32 * scale + 50) / 100).clamp(1, 255) as f64;
    }
    Ok(out)
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut c = [[0.0; 8]; 8];
    for (u, row) in c.iter_mut().enumerate() {
        let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    c
}

/// Orthonormal 8×8 DCT-II of a block.
pub fn dct8(block: &[f64; 64]) -> [f64; 64] {
    let c = dct_basis();
    let mut tmp = [0.0; 64];
    for u in 0..8 {
        for y in 0..8 {
            tmp[u * 8 + y] = (0..8).map(|x| c[u][x] * block[x * 8 + y]).sum();
        }
    }
    let mut out = [0.0; 64];
    for u in 0..8 {
        for v in 0..8 {
            out[u * 8 + v] = (0..8).map(|y| c[v][y] * tmp[u * 8 + y]).sum();
        }
    }
    out
}

/// Inverse of [`dct8`].
pub fn idct8(coef: &[f64; 64]) -> [f64; 64] {
    let c = dct_basis();
    let mut tmp = [0.0; 64];
    for x in 0..8 {
        for v in 0..8 {
            tmp[x * 8 + v] = (0..8).map(|u| c[u][x] * coef[u * 8 + v]).sum();
        }
    }
    let mut out = [0.0; 64];
    for x in 0..8 {
        for y in 0..8 {
            out[x * 8 + y] = (0..8).map(|v| c[v][y] * tmp[x * 8 + v]).sum();
        }
    }
    out
}

fn planes(image: &Tensor) -> Result<(usize, usize, usize)> {
    match image.shape() {
        [h, w] => Ok((1, *h, *w)),
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::Shape(format!("expected [H, W] or [C, H, W], got {s:?}"))),
    }
}

/// Rounds to an 8-bit level. The DCT leaves ~1e-13 of roundoff, so values
/// are snapped to a 1e-6 grid first and exact half-level ties round away
/// from zero as in exact arithmetic.
fn to_level(v: f64) -> f64 {
    ((v * 1e6).round() / 1e6).round().clamp(0.0, 255.0)
}

/// JPEG-style round trip on each channel: 8-bit levels, level shift,
/// block DCT, quantize and dequantize with the scaled luminance table,
/// inverse DCT, and rounding back to 8-bit levels. Partial edge blocks are
/// padded by edge replication.
pub fn jpeg(image: &Tensor, quality: u8) -> Result<Tensor> {
    let (c, h, w) = planes(image)?;
    if h < 8 || w < 8 {
        return Err(Error::InvalidArgument(format!("image {h}x{w} is smaller than one 8x8 block")));
    }
    let table = quant_table(quality)?;
    let mut out = image.clone();
    for ch in 0..c {
        let src = image.data()[ch * h * w..(ch + 1) * h * w].to_vec();
        let level = |y: usize, x: usize| (src[y.min(h - 1) * w + x.min(w - 1)] * 255.0).round().clamp(0.0, 255.0);
        let dst = &mut out.data_mut()[ch * h * w..(ch + 1) * h * w];
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let mut block = [0.0; 64];
                for y in 0..8 {
                    for x in 0..8 {
                        block[y * 8 + x] = level(by + y, bx + x) - 128.0;
                    }
                }
                let mut coef = dct8(&block);
                for (cv, q) in coef.iter_mut().zip(&table) {
                    *cv = (*cv / q).round() * q;
                }
                let rec = idct8(&coef);
                for y in 0..8.min(h - by) {
                    for x in 0..8.min(w - bx) {
                        dst[(by + y) * w + bx + x] = to_level(rec[y * 8 + x] + 128.0) / 255.0;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Normalized 1-D Gaussian taps with radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("blur sigma must be positive, got {sigma}")));
    }
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / z).collect())
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as usize
}

/// Separable Gaussian blur with reflected borders.
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Result<Tensor> {
    let (c, h, w) = planes(image)?;
    let k = gaussian_kernel(sigma)?;
    let r = (k.len() / 2) as i64;
    let mut out = image.clone();
    let mut tmp = vec![0.0; h * w];
    for ch in 0..c {
        let src = &image.data()[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = k.iter().enumerate().map(|(i, kv)| kv * src[y * w + reflect(x as i64 + i as i64 - r, w)]).sum();
            }
        }
        let dst = &mut out.data_mut()[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = k.iter().enumerate().map(|(i, kv)| kv * tmp[reflect(y as i64 + i as i64 - r, h) * w + x]).sum();
            }
        }
    }
    Ok(out)
}

/// The standard robustness grid: JPEG quality 90/70/60 and blur σ 1/2/4.
pub fn standard_grid() -> Vec<Perturbation> {
    vec![
        Perturbation::Jpeg { quality: 90 },
        Perturbation::Jpeg { quality: 70 },
        Perturbation::Jpeg { quality: 60 },
        Perturbation::Blur { sigma: 1.0 },
        Perturbation::Blur { sigma: 2.0 },
        Perturbation::Blur { sigma: 4.0 },
    ]
}
