//! Low-level forensic feature extraction.
//!
//! The spectral branch band-passes the luma channel through a bank of radial
//! high-pass filters, rescales each band by a robust per-image noise level,
//! runs the stacked responses through a two-layer conv backbone and squashes
//! a 1×1 projection into an anomaly map in `[0, 1]`.
//! The pixel branch is pluggable: a small conv stack, or feature maps loaded
//! from disk.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::numerics::{fft2d, ifft2d_real, load_tensor, NodeId, ParamId, ParamStore, Tape, Tensor};

const KERNEL: usize = 3;

/// Radial high-pass masks over an `H×W` spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank {
    cutoffs: Vec<f64>,
    rows: usize,
    cols: usize,
    masks: Vec<Vec<f64>>,
}

/// Normalized radial frequency of bin `(u, v)`; 1.0 is the Nyquist frequency on either axis.
pub fn radial_frequency(u: usize, v: usize, rows: usize, cols: usize) -> f64 {
    let fu = u.min(rows - u) as f64 / (rows as f64 / 2.0);
    let fv = v.min(cols - v) as f64 / (cols as f64 / 2.0);
    (fu * fu + fv * fv).sqrt()
}

impl FilterBank {
    pub fn new(cutoffs: &[f64], rows: usize, cols: usize) -> Result<Self> {
        if cutoffs.is_empty() || cutoffs.iter().any(|&r| !(r > 0.0 && r < 1.0)) {
            return Err(Error::InvalidArgument(format!("cutoffs must lie in (0, 1): {cutoffs:?}")));
        }
        if rows < 2 || cols < 2 {
            return Err(Error::Shape(format!("filter bank grid {rows}x{cols} too small")));
        }
        let masks = cutoffs
            .iter()
            .map(|&r| {
                (0..rows * cols)
                    .map(|i| if radial_frequency(i / cols, i % cols, rows, cols) > r { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        Ok(Self {
            cutoffs: cutoffs.to_vec(),
            rows,
            cols,
            masks,
        })
    }

    pub fn len(&self) -> usize {
        self.cutoffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cutoffs.is_empty()
    }

    pub fn cutoffs(&self) -> &[f64] {
        &self.cutoffs
    }

    /// Binary mask of filter `i` in spectrum layout.
    pub fn mask(&self, i: usize) -> &[f64] {
        &self.masks[i]
    }

    /// Spatial responses of every filter, stacked as `[F, H, W]`.
    pub fn band_responses(&self, gray: &Tensor) -> Result<Tensor> {
        let (h, w) = gray.dims2()?;
        if (h, w) != (self.rows, self.cols) {
            return Err(Error::Shape(format!("image {h}x{w} vs filter bank {}x{}", self.rows, self.cols)));
        }
        let spectrum = fft2d(gray)?;
        let mut data = Vec::with_capacity(self.len() * h * w);
        for mask in &self.masks {
            let mut filtered = spectrum.clone();
            for (b, m) in filtered.bins.iter_mut().zip(mask) {
                if *m == 0.0 {
                    *b = num_complex::Complex64::new(0.0, 0.0);
                }
            }
            data.extend(ifft2d_real(&filtered).into_data());
        }
        Tensor::new(vec![self.len(), h, w], data)
    }

    /// Spatial-domain energy passed by filter `i` (via Parseval on the spectrum).
    pub fn band_energy(&self, gray: &Tensor, i: usize) -> Result<f64> {
        let spectrum = fft2d(gray)?;
        let n = (self.rows * self.cols) as f64;
        Ok(spectrum
            .bins
            .iter()
            .zip(&self.masks[i])
            .filter(|(_, &m)| m != 0.0)
            .map(|(b, _)| b.norm_sqr())
            .sum::<f64>()
            / n)
    }
}

/// Converts `[3, H, W]` RGB (or `[1, H, W]` / `[H, W]`) to an `[H, W]` luma image.
pub fn to_luma(image: &Tensor) -> Result<Tensor> {
    match image.shape() {
        [_, _] => Ok(image.clone()),
        [1, h, w] => image.clone().reshape(&[*h, *w]),
        [3, h, w] => {
            let (r, g, b) = (image.plane(0), image.plane(1), image.plane(2));
            let data = (0..h * w).map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i]).collect();
            Tensor::new(vec![*h, *w], data)
        }
        s => Err(Error::Shape(format!("expected [H, W], [1, H, W] or [3, H, W] image, got {s:?}"))),
    }
}

/// Image as `[C, H, W]`.
pub fn as_channels(image: &Tensor) -> Result<Tensor> {
    match image.shape() {
        [h, w] => image.clone().reshape(&[1, *h, *w]),
        [_, _, _] => Ok(image.clone()),
        s => Err(Error::Shape(format!("expected 2-D or 3-D image, got {s:?}"))),
    }
}

fn check_min_size(image: &Tensor) -> Result<()> {
    let s = image.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h < 8 || w < 8 {
        return Err(Error::Shape(format!("encoders need images of at least 8x8, got {h}x{w}")));
    }
    Ok(())
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

#[derive(Clone, Debug)]
pub struct SpectralFeatures {
    pub fmap: Tensor,
    pub anomaly: Tensor,
}

#[derive(Clone, Debug)]
pub struct PixelFeatures {
    pub fmap: Tensor,
}

/// `E|gelu(z)| + E|gelu(-z)|`-scale amplitude of unit Gaussian texture, `1/√π`.
const DEFICIT_BIAS: f64 = 0.5641895835477563;

/// Scales each band of `[F, H, W]` by `gain / σ̂`, where `σ̂ = median|x| / 0.6745`
/// is a robust per-image noise level; all-zero bands stay zero.
pub fn normalize_bands(bands: &Tensor, gain: f64) -> Result<Tensor> {
    let (f, h, w) = bands.dims3()?;
    let n = h * w;
    let mut out = bands.data().to_vec();
    for band in out.chunks_mut(n).take(f) {
        let mut mags: Vec<f64> = band.iter().map(|v| v.abs()).collect();
        mags.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 { mags[n / 2] } else { 0.5 * (mags[n / 2 - 1] + mags[n / 2]) };
        let sigma = median / 0.6745;
        let scale = if sigma > 1e-12 { gain / sigma } else { gain };
        band.iter_mut().for_each(|v| *v *= scale);
    }
    Tensor::new(vec![f, h, w], out)
}

/// Parameter handles of the spectral branch.
#[derive(Clone, Debug)]
pub struct SpectralEncoder {
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
    pub channels: usize,
    pub band_gain: f64,
}

impl SpectralEncoder {
    /// Registers parameters with a forensic prior, since the branch is
    /// frozen by default. With `F` bands, channels `0..2F` start as
    /// half-wave rectifiers (`+band`, then `-band`) followed by a 3×3 box,
    /// i.e. local band amplitude. Any further channels are texture-deficit
    /// detectors: `gelu(1/√π - amplitude)` on the highest bands first, which
    /// fire where high-band content is missing. The anomaly head weights the
    /// top band's surplus and deficit channels, so both excess and missing
    /// high-frequency content raise the anomaly map. Small random terms keep
    /// every weight non-degenerate.
    pub fn init(store: &mut ParamStore, bands: usize, cfg: &EncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.spectral_channels;
        let taps = KERNEL * KERNEL;
        let jitter = 0.01;
        let mut w1 = uniform(&mut rng, &[c, bands, KERNEL, KERNEL], -jitter, jitter);
        let mut w2 = uniform(&mut rng, &[c, c, KERNEL, KERNEL], -jitter / taps as f64, jitter / taps as f64);
        let mut b2 = Tensor::zeros(&[c]);
        let mut head = uniform(&mut rng, &[1, c, 1, 1], 0.0, jitter);
        let rectifier = |band: usize, negative: bool| band + if negative { bands } else { 0 };
        for ch in 0..c {
            if ch < 2 * bands {
                let (band, sign) = (ch % bands, if ch < bands { 1.0 } else { -1.0 });
                w1.data_mut()[(ch * bands + band) * taps + taps / 2] += sign;
                for t in 0..taps {
                    w2.data_mut()[(ch * c + ch) * taps + t] += 1.0 / taps as f64;
                }
                head.data_mut()[ch] += if band == bands - 1 { 1.0 } else { 0.05 };
            } else {
                let band = bands - 1 - (ch - 2 * bands) % bands;
                w1.data_mut()[(ch * bands + band) * taps + taps / 2] += 1.0;
                for src in [rectifier(band, false), rectifier(band, true)].into_iter().filter(|&s| s < c) {
                    for t in 0..taps {
                        w2.data_mut()[(ch * c + src) * taps + t] -= 1.0 / taps as f64;
                    }
                }
                b2.data_mut()[ch] = DEFICIT_BIAS;
                head.data_mut()[ch] += if band == bands - 1 { 2.0 } else { 0.5 };
            }
        }
        Self {
            conv1_w: store.add("spectral.conv1.w", w1),
            conv1_b: store.add("spectral.conv1.b", Tensor::zeros(&[c])),
            conv2_w: store.add("spectral.conv2.w", w2),
            conv2_b: store.add("spectral.conv2.b", b2),
            head_w: store.add("spectral.head.w", head),
            head_b: store.add("spectral.head.b", Tensor::scalar(-1.0)),
            channels: c,
            band_gain: cfg.band_gain,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.conv1_w, self.conv1_b, self.conv2_w, self.conv2_b, self.head_w, self.head_b]
    }

    /// Records the backbone on `tape`; returns `(fmap [C,H,W], anomaly [1,H,W])`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, bands: &Tensor) -> Result<(NodeId, NodeId)> {
        let x = tape.constant(normalize_bands(bands, self.band_gain)?)?;
        let (w1, b1) = (tape.param(store, self.conv1_w)?, tape.param(store, self.conv1_b)?);
        let h = tape.conv2d(x, w1, b1)?;
        let h = tape.gelu(h)?;
        let (w2, b2) = (tape.param(store, self.conv2_w)?, tape.param(store, self.conv2_b)?);
        let h = tape.conv2d(h, w2, b2)?;
        let fmap = tape.gelu(h)?;
        let (hw, hb) = (tape.param(store, self.head_w)?, tape.param(store, self.head_b)?);
        let logits = tape.conv2d(fmap, hw, hb)?;
        let anomaly = tape.sigmoid(logits)?;
        Ok((fmap, anomaly))
    }

    /// Full spectral encoding of an image.
    pub fn encode(&self, image: &Tensor, bank: &FilterBank, store: &ParamStore) -> Result<SpectralFeatures> {
        check_min_size(image)?;
        let bands = bank.band_responses(&to_luma(image)?)?;
        let mut tape = Tape::new();
        let (fmap, anomaly) = self.forward(&mut tape, store, &bands)?;
        let (_, h, w) = tape.value(anomaly).dims3()?;
        Ok(SpectralFeatures {
            fmap: tape.value(fmap).clone(),
            anomaly: tape.value(anomaly).clone().reshape(&[h, w])?,
        })
    }
}

/// Source of pixel-level feature maps.
pub trait PixelExtractor: Send + Sync {
    fn channels(&self) -> usize;

    /// Trainable parameters (empty for fixed extractors).
    fn param_ids(&self) -> Vec<ParamId>;

    /// Records the `[C, H, W]` feature map on `tape`.
    fn forward(&self, tape: &mut Tape, store: &ParamStore, sample_id: &str, image: &Tensor) -> Result<NodeId>;

    fn extract(&self, store: &ParamStore, sample_id: &str, image: &Tensor) -> Result<PixelFeatures> {
        check_min_size(image)?;
        let mut tape = Tape::new();
        let node = self.forward(&mut tape, store, sample_id, image)?;
        Ok(PixelFeatures {
            fmap: tape.value(node).clone(),
        })
    }
}

/// Three-layer conv stack over the raw image.
#[derive(Clone, Debug)]
pub struct ConvPixelExtractor {
    pub layers: Vec<(ParamId, ParamId)>,
    pub channels: usize,
}

impl ConvPixelExtractor {
    pub fn init(store: &mut ParamStore, in_channels: usize, cfg: &EncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.pixel_channels;
        let mut layers = Vec::new();
        let mut cin = in_channels;
        for i in 0..3 {
            let a = (6.0 / (cin * KERNEL * KERNEL) as f64).sqrt();
            let w = store.add(format!("pixel.conv{}.w", i + 1), uniform(&mut rng, &[c, cin, KERNEL, KERNEL], -a, a));
            let b = store.add(format!("pixel.conv{}.b", i + 1), Tensor::zeros(&[c]));
            layers.push((w, b));
            cin = c;
        }
        Self { layers, channels: c }
    }
}

impl PixelExtractor for ConvPixelExtractor {
    fn channels(&self) -> usize {
        self.channels
    }

    fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, _sample_id: &str, image: &Tensor) -> Result<NodeId> {
        let mut x = tape.constant(as_channels(image)?)?;
        for &(w, b) in &self.layers {
            let (wn, bn) = (tape.param(store, w)?, tape.param(store, b)?);
            let h = tape.conv2d(x, wn, bn)?;
            x = tape.gelu(h)?;
        }
        Ok(x)
    }
}

/// Loads `<dir>/<sample_id>.pgt` feature maps produced by an external backbone.
#[derive(Clone, Debug)]
pub struct PrecomputedPixelFeatures {
    pub dir: PathBuf,
    pub channels: usize,
}

impl PrecomputedPixelFeatures {
    pub fn new(dir: impl AsRef<Path>, channels: usize) -> Self {
        Self {
            dir: dir.as_ref().to_path_buf(),
            channels,
        }
    }
}

impl PixelExtractor for PrecomputedPixelFeatures {
    fn channels(&self) -> usize {
        self.channels
    }

    fn param_ids(&self) -> Vec<ParamId> {
        Vec::new()
    }

    fn forward(&self, tape: &mut Tape, _store: &ParamStore, sample_id: &str, image: &Tensor) -> Result<NodeId> {
        let path = self.dir.join(format!("{sample_id}.pgt"));
        let fmap = load_tensor(&path)?;
        let (c, h, w) = fmap.dims3()?;
        let s = image.shape();
        if c != self.channels || (h, w) != (s[s.len() - 2], s[s.len() - 1]) {
            return Err(Error::format(&path, format!("feature map [{c}, {h}, {w}] does not match image {s:?} / {} channels", self.channels)));
        }
        tape.constant(fmap)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, GradCheckConfig};
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::PI;

    fn cfg() -> EncoderConfig {
        EncoderConfig::default()
    }

    /// Direct DFT sum of |X|^2 over bins above the cutoff, divided by N.
    fn oracle_band_energy(img: &Tensor, cutoff: f64) -> f64 {
        let (h, w) = img.dims2().unwrap();
        let mut total = 0.0;
        for u in 0..h {
            for v in 0..w {
                if radial_frequency(u, v, h, w) <= cutoff {
                    continue;
                }
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let a = -2.0 * PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                        re += img.get2(y, x) * a.cos();
                        im += img.get2(y, x) * a.sin();
                    }
                }
                total += re * re + im * im;
            }
        }
        total / (h * w) as f64
    }

    fn dyadic_image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![h, w], (0..h * w).map(|_| rng.random_range(0..256) as f64 / 256.0).collect()).unwrap()
    }

    #[test]
    fn filters_are_nested_binary_and_drop_dc() {
        let bank = FilterBank::new(&[0.25, 0.5, 0.75], 16, 12).unwrap();
        for i in 0..bank.len() {
            assert_eq!(bank.mask(i)[0], 0.0);
            assert!(bank.mask(i).iter().all(|&m| m == 0.0 || m == 1.0));
        }
        for i in 1..bank.len() {
            for (lo, hi) in bank.mask(i - 1).iter().zip(bank.mask(i)) {
                assert!(lo >= hi, "mask({}) must contain mask({})", i - 1, i);
            }
        }
    }

    #[test]
    fn constant_image_yields_zero_bands_and_uniform_anomaly() {
        let mut store = ParamStore::new();
        let enc = SpectralEncoder::init(&mut store, 3, &cfg(), 1);
        let bank = FilterBank::new(&cfg().cutoffs, 16, 16).unwrap();
        let img = Tensor::full(&[3, 16, 16], 0.4);
        let bands = bank.band_responses(&to_luma(&img).unwrap()).unwrap();
        assert!(bands.data().iter().all(|&v| v == 0.0));
        let feats = enc.encode(&img, &bank, &store).unwrap();
        let first = feats.anomaly.data()[0];
        assert!(feats.anomaly.data().iter().all(|&a| a == first));
    }

    #[test]
    fn smooth_shading_has_negligible_band_energy_above_half_nyquist() {
        let n = 32;
        let mut img = Tensor::zeros(&[n, n]);
        for y in 0..n {
            for x in 0..n {
                let (fy, fx) = (y as f64 / n as f64, x as f64 / n as f64);
                img.data_mut()[y * n + x] = 0.5 + 0.3 * (2.0 * PI * fx).cos() + 0.2 * (2.0 * PI * (fy + 2.0 * fx)).sin();
            }
        }
        let bank = FilterBank::new(&[0.5], n, n).unwrap();
        let energy = bank.band_energy(&img, 0).unwrap();
        let oracle = oracle_band_energy(&img, 0.5);
        assert!((energy - oracle).abs() < 1e-9);
        assert!(energy < 1e-6 * img.sum_sq(), "band energy {energy}");
        let resp = bank.band_responses(&img).unwrap();
        assert!(resp.sum_sq() < 1e-6 * img.sum_sq());
    }

    #[test]
    fn checkerboard_region_raises_anomaly_inside() {
        let n = 32;
        let mut img = dyadic_image(n, n, 5).map(|v| 0.45 + 0.02 * v);
        let inside = |y: usize, x: usize| (8..20).contains(&y) && (10..24).contains(&x);
        for y in 0..n {
            for x in 0..n {
                if inside(y, x) {
                    img.data_mut()[y * n + x] += if (x + y) % 2 == 0 { 0.15 } else { -0.15 };
                }
            }
        }
        // the checkerboard sits at the corner frequency, above every cutoff
        let bank = FilterBank::new(&cfg().cutoffs, n, n).unwrap();
        let board_energy_in_band = oracle_band_energy(&img, 0.75);
        assert!(board_energy_in_band > 0.5 * 0.15 * 0.15 * (12 * 14) as f64);
        let mut store = ParamStore::new();
        let enc = SpectralEncoder::init(&mut store, bank.len(), &cfg(), 3);
        let feats = enc.encode(&img, &bank, &store).unwrap();
        let (mut sin, mut nin, mut sout, mut nout) = (0.0, 0, 0.0, 0);
        for y in 0..n {
            for x in 0..n {
                let a = feats.anomaly.get2(y, x);
                assert!((0.0..=1.0).contains(&a));
                if inside(y, x) {
                    sin += a;
                    nin += 1;
                } else {
                    sout += a;
                    nout += 1;
                }
            }
        }
        assert!(sin / nin as f64 > sout / nout as f64);
    }

    #[test]
    fn smoothed_patch_in_white_texture_raises_anomaly_inside() {
        let n = 32;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut img = Tensor::new(vec![n, n], (0..n * n).map(|_| 0.5 + rng.random_range(-0.1..0.1)).collect()).unwrap();
        let inside = |y: usize, x: usize| (10..22).contains(&y) && (8..20).contains(&x);
        let src = img.clone();
        for y in 0..n {
            for x in 0..n {
                if inside(y, x) {
                    let mut s = 0.0;
                    for dy in 0..3 {
                        for dx in 0..3 {
                            s += src.get2(y + dy - 1, x + dx - 1);
                        }
                    }
                    img.data_mut()[y * n + x] = s / 9.0;
                }
            }
        }
        let bank = FilterBank::new(&cfg().cutoffs, n, n).unwrap();
        let mut store = ParamStore::new();
        let enc = SpectralEncoder::init(&mut store, bank.len(), &cfg(), 3);
        let feats = enc.encode(&img, &bank, &store).unwrap();
        let (mut sin, mut nin, mut sout, mut nout) = (0.0, 0, 0.0, 0);
        for y in 0..n {
            for x in 0..n {
                // skip the one-pixel rim where the box straddles both regions
                let near = (9..23).contains(&y) && (7..21).contains(&x);
                let a = feats.anomaly.get2(y, x);
                if inside(y, x) && (11..21).contains(&y) && (9..19).contains(&x) {
                    sin += a;
                    nin += 1;
                } else if !near {
                    sout += a;
                    nout += 1;
                }
            }
        }
        assert!(sin / nin as f64 > sout / nout as f64 + 0.05, "{} vs {}", sin / nin as f64, sout / nout as f64);
    }

    #[test]
    fn normalized_bands_have_unit_robust_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let raw = Tensor::new(vec![2, 5, 5], (0..50).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let out = normalize_bands(&raw, 2.0).unwrap();
        for band in out.data().chunks(25) {
            let mut m: Vec<f64> = band.iter().map(|v| v.abs()).collect();
            m.sort_by(f64::total_cmp);
            assert!((m[12] - 2.0 * 0.6745).abs() < 1e-12);
        }
        let zero = normalize_bands(&Tensor::zeros(&[1, 3, 3]), 1.0).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_2d_and_tiny_inputs_are_shape_errors() {
        let mut store = ParamStore::new();
        let enc = SpectralEncoder::init(&mut store, 3, &cfg(), 1);
        let bank = FilterBank::new(&cfg().cutoffs, 4, 4).unwrap();
        assert!(enc.encode(&Tensor::zeros(&[3, 4, 4]), &bank, &store).is_err());
        assert!(to_luma(&Tensor::zeros(&[2, 8, 8])).is_err());
    }

    #[test]
    fn pixel_stack_zero_image_and_determinism() {
        let mut store = ParamStore::new();
        let px = ConvPixelExtractor::init(&mut store, 3, &cfg(), 2);
        let zero = px.extract(&store, "a", &Tensor::zeros(&[3, 8, 8])).unwrap();
        assert!(zero.fmap.data().iter().all(|&v| v == 0.0));
        assert_eq!(zero.fmap.shape(), &[8, 8, 8]);
        let img = Tensor::new(vec![3, 8, 8], (0..192).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let a = px.extract(&store, "a", &img).unwrap();
        let b = px.extract(&store, "a", &img).unwrap();
        assert!(a.fmap.data().iter().zip(b.fmap.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn precomputed_features_load_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        let fmap = Tensor::full(&[4, 8, 8], 0.5);
        crate::numerics::save_tensor(&dir.path().join("s1.pgt"), &fmap).unwrap();
        let px = PrecomputedPixelFeatures::new(dir.path(), 4);
        let store = ParamStore::new();
        let out = px.extract(&store, "s1", &Tensor::zeros(&[3, 8, 8])).unwrap();
        assert_eq!(out.fmap, fmap);
        assert!(px.extract(&store, "s1", &Tensor::zeros(&[3, 16, 16])).is_err());
        assert!(px.extract(&store, "missing", &Tensor::zeros(&[3, 8, 8])).is_err());
    }

    #[test]
    fn conv_stacks_pass_gradient_check() {
        let mut store = ParamStore::new();
        let small = EncoderConfig {
            spectral_channels: 3,
            pixel_channels: 3,
            ..cfg()
        };
        let px = ConvPixelExtractor::init(&mut store, 3, &small, 2);
        let enc = SpectralEncoder::init(&mut store, 3, &small, 4);
        let img = Tensor::new(vec![3, 8, 8], (0..192).map(|i| ((i * 37) % 11) as f64 / 11.0).collect()).unwrap();
        let bank = FilterBank::new(&small.cutoffs, 8, 8).unwrap();
        let bands = bank.band_responses(&to_luma(&img).unwrap()).unwrap();
        let mut ids = px.param_ids();
        ids.extend(enc.param_ids());
        let report = grad_check(
            &store,
            &ids,
            |t, s| {
                let p = px.forward(t, s, "x", &img)?;
                let (f, a) = enc.forward(t, s, &bands)?;
                let pa = t.concat(&[p, f])?;
                t.concat(&[pa, a])
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:#?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn band_responses_ignore_added_constant(seed in any::<u64>(), c in -64i32..64) {
            let bank = FilterBank::new(&[0.25, 0.5, 0.75], 16, 16).unwrap();
            let img = dyadic_image(16, 16, seed);
            let shifted = img.map(|v| v + c as f64 / 4.0);
            let a = bank.band_responses(&img).unwrap();
            let b = bank.band_responses(&shifted).unwrap();
            prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits() || x == y));
        }

        #[test]
        fn band_energy_decreases_with_cutoff(seed in any::<u64>()) {
            let bank = FilterBank::new(&[0.1, 0.3, 0.5, 0.7, 0.9], 16, 8).unwrap();
            let img = dyadic_image(16, 8, seed);
            let e: Vec<f64> = (0..bank.len()).map(|i| bank.band_energy(&img, i).unwrap()).collect();
            for w in e.windows(2) {
                prop_assert!(w[0] >= w[1]);
            }
        }

        #[test]
        fn circular_shift_commutes_with_band_pass(seed in any::<u64>(), dy in 0usize..16, dx in 0usize..16) {
            let n = 16;
            let bank = FilterBank::new(&[0.25, 0.5, 0.75], n, n).unwrap();
            let img = dyadic_image(n, n, seed);
            let mut shifted = Tensor::zeros(&[n, n]);
            for y in 0..n {
                for x in 0..n {
                    shifted.data_mut()[((y + dy) % n) * n + (x + dx) % n] = img.get2(y, x);
                }
            }
            let a = bank.band_responses(&img).unwrap();
            let b = bank.band_responses(&shifted).unwrap();
            for f in 0..bank.len() {
                for y in 0..n {
                    for x in 0..n {
                        let va = a.data()[f * n * n + y * n + x];
                        let vb = b.data()[f * n * n + ((y + dy) % n) * n + (x + dx) % n];
                        prop_assert!((va - vb).abs() <= 1e-9);
                    }
                }
            }
        }
    }
}
