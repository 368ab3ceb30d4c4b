//! Discrete Fourier transforms for 1-D buffers and 2-D images.
//!
//! Power-of-two lengths use an iterative radix-2 decimation-in-time
//! transform; every other length goes through Bluestein's chirp-z
//! identity on a padded power-of-two buffer. Transforms are unnormalized
//! in the forward direction and scaled by `1/N` in the inverse direction.

use std::f64::consts::PI;

use num_complex::Complex64;

use super::Tensor;
use crate::error::{Error, Result};

/// In-place forward (`inverse == false`) or inverse DFT of any length.
pub fn fft_inplace(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        radix2(buf, inverse);
    } else {
        bluestein(buf, inverse);
    }
    if inverse {
        let scale = 1.0 / n as f64;
        for v in buf.iter_mut() {
            *v *= scale;
        }
    }
}

fn twiddle(k: usize, len: usize, inverse: bool) -> Complex64 {
    let sign = if inverse { 1.0 } else { -1.0 };
    let angle = sign * 2.0 * PI * k as f64 / len as f64;
    Complex64::new(angle.cos(), angle.sin())
}

fn radix2(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let tw: Vec<Complex64> = (0..half).map(|k| twiddle(k, len, inverse)).collect();
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let e = buf[start + k];
                let o = buf[start + k + half] * tw[k];
                buf[start + k] = e + o;
                buf[start + k + half] = e - o;
            }
        }
        len <<= 1;
    }
}

fn bluestein(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    let m = (2 * n - 1).next_power_of_two();
    let sign = if inverse { 1.0 } else { -1.0 };
    // chirp[k] = exp(sign * i*pi*k^2/n); k^2 reduced mod 2n keeps the angle small
    let chirp: Vec<Complex64> = (0..n)
        .map(|k| {
            let k2 = (k * k) % (2 * n);
            let angle = sign * PI * k2 as f64 / n as f64;
            Complex64::new(angle.cos(), angle.sin())
        })
        .collect();
    let mut a = vec![Complex64::new(0.0, 0.0); m];
    for k in 0..n {
        a[k] = buf[k] * chirp[k];
    }
    let mut b = vec![Complex64::new(0.0, 0.0); m];
    b[0] = chirp[0].conj();
    for k in 1..n {
        b[k] = chirp[k].conj();
        b[m - k] = chirp[k].conj();
    }
    radix2(&mut a, false);
    radix2(&mut b, false);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    radix2(&mut a, true);
    let scale = 1.0 / m as f64;
    for k in 0..n {
        buf[k] = a[k] * scale * chirp[k];
    }
}

/// Complex `H×W` grid stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub rows: usize,
    pub cols: usize,
    pub bins: Vec<Complex64>,
}

impl Spectrum {
    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        self.bins[r * self.cols + c]
    }

    /// `[H, W, 2]` tensor of (re, im) pairs.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.bins.iter().flat_map(|c| [c.re, c.im]).collect();
        Tensor::new(vec![self.rows, self.cols, 2], data).expect("spectrum shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [h, w, 2] => Ok(Self {
                rows: *h,
                cols: *w,
                bins: t
                    .data()
                    .chunks_exact(2)
                    .map(|p| Complex64::new(p[0], p[1]))
                    .collect(),
            }),
            s => Err(Error::Shape(format!("expected [H, W, 2] spectrum, got {s:?}"))),
        }
    }

    /// Sum of squared magnitudes.
    pub fn energy(&self) -> f64 {
        self.bins.iter().map(|c| c.norm_sqr()).sum()
    }
}

fn transform_2d(bins: &mut [Complex64], rows: usize, cols: usize, inverse: bool) {
    for r in 0..rows {
        fft_inplace(&mut bins[r * cols..(r + 1) * cols], inverse);
    }
    let mut column = vec![Complex64::new(0.0, 0.0); rows];
    for c in 0..cols {
        for r in 0..rows {
            column[r] = bins[r * cols + c];
        }
        fft_inplace(&mut column, inverse);
        for r in 0..rows {
            bins[r * cols + c] = column[r];
        }
    }
}

fn check_image(image: &Tensor) -> Result<(usize, usize)> {
    let (h, w) = image
        .dims2()
        .map_err(|_| Error::Shape(format!("fft2d needs a 2-D image, got {:?}", image.shape())))?;
    if h < 2 || w < 2 {
        return Err(Error::Shape(format!("fft2d needs H, W >= 2, got {h}x{w}")));
    }
    Ok((h, w))
}

/// Unnormalized forward 2-D DFT with the DC bin at `(0, 0)`.
pub fn fft2d(image: &Tensor) -> Result<Spectrum> {
    let (h, w) = check_image(image)?;
    let mut bins: Vec<Complex64> = image.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform_2d(&mut bins, h, w, false);
    Ok(Spectrum {
        rows: h,
        cols: w,
        bins,
    })
}

/// `fft2d` returned in the `[H, W, 2]` tensor layout.
pub fn fft2d_tensor(image: &Tensor) -> Result<Tensor> {
    Ok(fft2d(image)?.to_tensor())
}

/// Inverse 2-D DFT, returning complex bins.
pub fn ifft2d(spectrum: &Spectrum) -> Spectrum {
    let mut bins = spectrum.bins.clone();
    transform_2d(&mut bins, spectrum.rows, spectrum.cols, true);
    Spectrum {
        rows: spectrum.rows,
        cols: spectrum.cols,
        bins,
    }
}

/// Real part of the inverse transform as an `[H, W]` tensor.
pub fn ifft2d_real(spectrum: &Spectrum) -> Tensor {
    let out = ifft2d(spectrum);
    Tensor::new(
        vec![out.rows, out.cols],
        out.bins.iter().map(|c| c.re).collect(),
    )
    .expect("ifft shape")
}
