//! Synthetic faces with planted part-localized artifacts, split into a
//! training set and five evaluation levels.
//!
//! Every face carries fine sensor-like texture. Artifacts are confined to the
//! mask of the part they are planted in: additive high-frequency noise, a
//! blurred patch that wipes the texture out, or a seam (brightness step plus
//! a dark one-pixel line through the part).

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::perturb::{gaussian_blur, Perturbation};
use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::evidence::{PartId, PartMaskSet, NUM_PARTS};
use crate::numerics::{load_tensor, save_tensor, Tensor};
use crate::transcript::{read_jsonl, write_jsonl, Label};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ArtifactKind {
    HighFreqNoise,
    BlurPatch,
    BoundarySeam,
}

impl ArtifactKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ArtifactKind::HighFreqNoise => "HIGH_FREQ_NOISE",
            ArtifactKind::BlurPatch => "BLUR_PATCH",
            ArtifactKind::BoundarySeam => "BOUNDARY_SEAM",
        }
    }
}

/// One planted artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub part: PartId,
    pub kind: ArtifactKind,
    /// Noise std, blur sigma or seam step height, depending on `kind`.
    pub strength: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug)]
pub struct SynthSample {
    pub id: String,
    pub image: Tensor,
    pub masks: PartMaskSet,
    pub label: Label,
    pub artifacts: Vec<Artifact>,
    pub split: Split,
    /// Evaluation level `1..=5`; `None` for training samples.
    pub level: Option<u8>,
    /// Perturbation applied after planting (level 5 only).
    pub perturbation: Option<Perturbation>,
}

impl SynthSample {
    pub fn artifact_parts(&self) -> Vec<PartId> {
        let mut parts: Vec<PartId> = self.artifacts.iter().map(|a| a.part).collect();
        parts.sort();
        parts.dedup();
        parts
    }

    pub fn source(&self) -> String {
        let mut s = match self.artifacts.first() {
            None => "synth/real".to_string(),
            Some(a) => format!("synth/{}", a.kind.as_str().to_lowercase()),
        };
        if let Some(p) = self.perturbation {
            s.push('+');
            s.push_str(&p.name());
        }
        s
    }
}

pub const LEVEL_NAMES: [&str; 5] = ["In-Distribution", "Cross-Architecture", "Cross-Model", "Cross-Task", "In-the-Wild"];

pub fn level_name(level: u8) -> Result<&'static str> {
    LEVEL_NAMES
        .get((level as usize).wrapping_sub(1))
        .copied()
        .ok_or_else(|| Error::InvalidArgument(format!("level {level} outside 1..=5")))
}

/// Training and evaluation samples generated from one seed.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<SynthSample>,
    /// `levels[i]` holds level `i + 1`.
    pub levels: Vec<Vec<SynthSample>>,
}

impl Dataset {
    pub fn level(&self, level: u8) -> &[SynthSample] {
        &self.levels[level as usize - 1]
    }

    pub fn all(&self) -> impl Iterator<Item = &SynthSample> {
        self.train.iter().chain(self.levels.iter().flatten())
    }
}

/// SplitMix64 finalizer, used to derive independent per-sample streams.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    mix64(mix64(seed ^ mix64(stream)) ^ index)
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    fn r2(&self, y: f64, x: f64) -> f64 {
        ((y - self.cy) / self.ry).powi(2) + ((x - self.cx) / self.rx).powi(2)
    }
}

/// Face layout in pixel units.
#[derive(Clone, Debug)]
struct Layout {
    face: Ellipse,
    hair: Option<Ellipse>,
    /// Eyes, eyebrows, nose, mouth in `PartId` order.
    features: [Ellipse; 6],
}

fn sample_layout(rng: &mut ChaCha8Rng, size: usize, hair_absent_prob: f64) -> Layout {
    let s = size as f64 / 64.0;
    let j = |rng: &mut ChaCha8Rng, a: f64| rng.random_range(-a..a) * s;
    let cy = 34.0 * s + j(rng, 1.5);
    let cx = 32.0 * s + j(rng, 1.5);
    let scale = rng.random_range(0.92..1.06);
    let face = Ellipse { cy, cx, ry: 23.0 * s * scale, rx: 18.5 * s * scale };
    let eye_dx = 7.0 * s * scale + j(rng, 0.5);
    let eye_y = cy - 7.5 * s * scale + j(rng, 0.6);
    let brow_y = eye_y - 5.0 * s * scale + j(rng, 0.4);
    let el = |cy, cx, ry: f64, rx: f64| Ellipse { cy, cx, ry: ry * s * scale, rx: rx * s * scale };
    let features = [
        // The subject's left eye appears on the viewer's right.
        el(eye_y, cx + eye_dx, 2.6, 4.2),
        el(eye_y, cx - eye_dx, 2.6, 4.2),
        el(brow_y, cx + eye_dx, 1.4, 5.0),
        el(brow_y, cx - eye_dx, 1.4, 5.0),
        el(cy + 2.0 * s * scale + j(rng, 0.5), cx, 5.0, 2.8),
        el(cy + 11.5 * s * scale + j(rng, 0.5), cx, 2.4, 6.5),
    ];
    let hair = (rng.random::<f64>() >= hair_absent_prob).then(|| Ellipse {
        cy: cy - 2.0 * s,
        cx,
        ry: face.ry * 1.14,
        rx: face.rx * 1.2,
    });
    Layout { face, hair, features }
}

fn build_masks(layout: &Layout, size: usize) -> Result<PartMaskSet> {
    let n = size * size;
    let mut masks = vec![vec![0.0; n]; NUM_PARTS];
    let face = layout.face;
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let i = y * size + x;
            for (k, e) in layout.features.iter().enumerate() {
                if e.r2(fy, fx) <= 1.0 {
                    masks[k][i] = 1.0;
                }
            }
            let r2 = face.r2(fy, fx);
            let hair_here = layout.hair.is_some_and(|h| h.r2(fy, fx) <= 1.0 && fy < face.cy - 0.45 * face.ry && (r2 > 1.0 || fy < face.cy - 0.78 * face.ry));
            if hair_here {
                masks[PartId::Hair.index()][i] = 1.0;
            } else if (0.8 * 0.8..=1.0).contains(&r2) && fy > face.cy - 0.5 * face.ry {
                masks[PartId::FaceContour.index()][i] = 1.0;
            }
        }
    }
    PartMaskSet::new(masks.into_iter().map(|m| Tensor::new(vec![size, size], m).unwrap()).collect())
}

fn render(layout: &Layout, masks: &PartMaskSet, size: usize, texture: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = size * size;
    let mut img = vec![0.0; 3 * n];
    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.85));
    let bg_tilt = rng.random_range(-0.15..0.15);
    let tone = rng.random_range(0.55..0.85);
    let skin = [tone, tone * rng.random_range(0.72..0.82), tone * rng.random_range(0.58..0.7)];
    let hair_level = rng.random_range(0.08..0.35);
    let hair_col = [hair_level, hair_level * 0.85, hair_level * 0.7];
    let brow = rng.random_range(0.12..0.3);
    let iris = rng.random_range(0.1..0.35);
    let lips = [rng.random_range(0.6..0.8), rng.random_range(0.25..0.4), rng.random_range(0.28..0.4)];
    let light = rng.random_range(-0.3..0.3);
    let face = layout.face;
    let mval = |p: PartId, i: usize| masks.mask(p).data()[i] == 1.0;
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let i = y * size + x;
            let t = fy / size as f64;
            let mut px: [f64; 3] = std::array::from_fn(|c| bg[c] * (1.0 + bg_tilt * (t - 0.5)));
            let r2 = face.r2(fy, fx);
            if r2 <= 1.0 {
                let shade = 1.0 - 0.22 * r2 + 0.08 * light * (fx - face.cx) / face.rx;
                px = std::array::from_fn(|c| skin[c] * shade);
            }
            if mval(PartId::Hair, i) {
                px = hair_col;
            }
            if mval(PartId::LeftEyebrow, i) || mval(PartId::RightEyebrow, i) {
                px = [brow; 3];
            }
            for part in [PartId::LeftEye, PartId::RightEye] {
                if mval(part, i) {
                    let e = layout.features[part.index()];
                    let d = ((fy - e.cy).powi(2) + (fx - e.cx).powi(2)).sqrt();
                    px = if d < 0.55 * e.ry * 1.6 { [iris; 3] } else { [0.8, 0.78, 0.76] };
                }
            }
            if mval(PartId::Nose, i) {
                let e = layout.features[PartId::Nose.index()];
                let k = 0.93 - 0.1 * ((fy - e.cy) / e.ry).max(0.0);
                px = std::array::from_fn(|c| px[c] * k);
            }
            if mval(PartId::Mouth, i) {
                px = std::array::from_fn(|c| lips[c] * tone);
            }
            for c in 0..3 {
                img[c * n + i] = px[c];
            }
        }
    }
    // Optics: soften geometry so clean faces carry little energy near Nyquist.
    let mut img = gaussian_blur(&Tensor::new(vec![3, size, size], img).unwrap(), 1.2).unwrap().into_data();
    // Sensor-like texture, mostly luminance with a little chroma.
    let normal = Normal::new(0.0, 1.0).unwrap();
    for i in 0..n {
        let lum = texture * normal.sample(rng);
        for c in 0..3 {
            img[c * n + i] += lum + 0.25 * texture * normal.sample(rng);
        }
    }
    Tensor::new(vec![3, size, size], img).unwrap()
}

fn plant(image: &mut Tensor, masks: &PartMaskSet, art: &Artifact, rng: &mut ChaCha8Rng) -> Result<()> {
    let (h, w) = masks.dims();
    let n = h * w;
    let mask = masks.mask(art.part).data().to_vec();
    match art.kind {
        ArtifactKind::HighFreqNoise => {
            let normal = Normal::new(0.0, art.strength).unwrap();
            let data = image.data_mut();
            for (i, &m) in mask.iter().enumerate() {
                if m == 1.0 {
                    for c in 0..3 {
                        data[c * n + i] += normal.sample(rng);
                    }
                }
            }
        }
        ArtifactKind::BlurPatch => {
            let blurred = gaussian_blur(image, art.strength)?;
            let data = image.data_mut();
            for (i, &m) in mask.iter().enumerate() {
                if m == 1.0 {
                    for c in 0..3 {
                        data[c * n + i] = blurred.data()[c * n + i];
                    }
                }
            }
        }
        ArtifactKind::BoundarySeam => {
            let idx: Vec<usize> = (0..n).filter(|&i| mask[i] == 1.0).collect();
            let cy = idx.iter().map(|&i| (i / w) as f64).sum::<f64>() / idx.len() as f64;
            let cx = idx.iter().map(|&i| (i % w) as f64).sum::<f64>() / idx.len() as f64;
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let (ny, nx) = (theta.sin(), theta.cos());
            let data = image.data_mut();
            for &i in &idx {
                let d = ((i / w) as f64 - cy) * ny + ((i % w) as f64 - cx) * nx;
                let delta = if d.abs() < 0.5 {
                    -art.strength
                } else if d > 0.0 {
                    0.5 * art.strength
                } else {
                    0.0
                };
                for c in 0..3 {
                    data[c * n + i] += delta;
                }
            }
        }
    }
    Ok(())
}

/// Artifact distribution of one split or level.
#[derive(Clone, Debug)]
struct ArtifactRegime {
    kinds: Vec<(ArtifactKind, Vec<(f64, f64)>)>,
    /// Parts eligible for planting; all present parts when empty.
    parts: Vec<PartId>,
    max_parts: usize,
    perturb: bool,
}

fn regime(level: Option<u8>) -> ArtifactRegime {
    use ArtifactKind::*;
    let training = vec![(HighFreqNoise, vec![(0.1, 0.16)]), (BlurPatch, vec![(1.5, 2.5)])];
    match level {
        None | Some(1) => ArtifactRegime { kinds: training, parts: vec![], max_parts: 2, perturb: false },
        Some(2) => ArtifactRegime {
            kinds: vec![(HighFreqNoise, vec![(0.07, 0.1), (0.16, 0.22)]), (BlurPatch, vec![(1.1, 1.5), (2.5, 3.5)])],
            parts: vec![],
            max_parts: 2,
            perturb: false,
        },
        Some(3) => ArtifactRegime { kinds: vec![(BoundarySeam, vec![(0.15, 0.3)])], parts: vec![], max_parts: 2, perturb: false },
        Some(4) => ArtifactRegime {
            kinds: training,
            parts: vec![PartId::LeftEye, PartId::RightEye, PartId::LeftEyebrow, PartId::RightEyebrow, PartId::Nose, PartId::Mouth],
            max_parts: 1,
            perturb: false,
        },
        _ => ArtifactRegime { kinds: vec![(BoundarySeam, vec![(0.15, 0.3)])], parts: vec![], max_parts: 2, perturb: true },
    }
}

/// Renders one sample; `fake` decides whether artifacts are planted.
pub fn make_sample(cfg: &DataConfig, seed: u64, id: String, split: Split, level: Option<u8>, fake: bool) -> Result<SynthSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = cfg.image_size;
    let layout = sample_layout(&mut rng, size, cfg.hair_absent_prob);
    let masks = build_masks(&layout, size)?;
    let mut image = render(&layout, &masks, size, cfg.texture_amplitude, &mut rng);
    let reg = regime(level);
    let mut artifacts = Vec::new();
    if fake {
        let mut eligible: Vec<PartId> = PartId::ALL
            .into_iter()
            .filter(|&p| masks.present(p) && (reg.parts.is_empty() || reg.parts.contains(&p)))
            .collect();
        let count = rng.random_range(1..=reg.max_parts.min(eligible.len()));
        for _ in 0..count {
            let part = eligible.remove(rng.random_range(0..eligible.len()));
            let (kind, ranges) = &reg.kinds[rng.random_range(0..reg.kinds.len())];
            let (lo, hi) = ranges[rng.random_range(0..ranges.len())];
            artifacts.push(Artifact { part, kind: *kind, strength: rng.random_range(lo..hi) });
        }
        artifacts.sort_by_key(|a| a.part);
        for a in &artifacts {
            plant(&mut image, &masks, a, &mut rng)?;
        }
    }
    let mut perturbation = None;
    if reg.perturb {
        let p = if rng.random::<bool>() {
            Perturbation::Jpeg { quality: rng.random_range(75..=95) }
        } else {
            Perturbation::Blur { sigma: rng.random_range(0.4..0.7) }
        };
        image = p.apply(&image.map(|v| v.clamp(0.0, 1.0)))?;
        perturbation = Some(p);
    }
    let image = image.map(|v| v.clamp(0.0, 1.0));
    Ok(SynthSample {
        id,
        image,
        masks,
        label: if fake { Label::Fake } else { Label::Real },
        artifacts,
        split,
        level,
        perturbation,
    })
}

const TRAIN_STREAM: u64 = 0x7472_6169_6e;

/// Balanced training set and five balanced evaluation levels.
pub fn gen_dataset(cfg: &DataConfig, seed: u64) -> Result<Dataset> {
    let train = (0..cfg.train_samples)
        .map(|i| make_sample(cfg, derive_seed(seed, TRAIN_STREAM, i as u64), format!("train-{i:05}"), Split::Train, None, i % 2 == 1))
        .collect::<Result<Vec<_>>>()?;
    let levels = (1..=5u8)
        .map(|level| {
            (0..cfg.test_per_level)
                .map(|i| make_sample(cfg, derive_seed(seed, level as u64, i as u64), format!("l{level}-{i:04}"), Split::Test, Some(level), i % 2 == 1))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { train, levels })
}

/// One manifest row. `path` is the image file relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub label: Label,
    pub level: Option<u8>,
    pub source: String,
    pub split: Split,
    pub masks: String,
    #[serde(default)]
    pub artifacts: Vec<Artifact>,
    #[serde(default)]
    pub perturbation: Option<Perturbation>,
}

impl ManifestEntry {
    pub fn from_sample(s: &SynthSample) -> Self {
        Self {
            id: s.id.clone(),
            path: format!("images/{}.pgt", s.id),
            label: s.label,
            level: s.level,
            source: s.source(),
            split: s.split,
            masks: format!("masks/{}", s.id),
            artifacts: s.artifacts.clone(),
            perturbation: s.perturbation,
        }
    }
}

pub fn manifest_name(level: Option<u8>) -> String {
    match level {
        None => "train.jsonl".into(),
        Some(l) => format!("level{l}.jsonl"),
    }
}

/// Writes images, masks and one manifest per split/level under `root`.
pub fn save_dataset(root: &Path, ds: &Dataset) -> Result<()> {
    std::fs::create_dir_all(root.join("images"))?;
    std::fs::create_dir_all(root.join("manifests"))?;
    let groups = std::iter::once((None, &ds.train)).chain(ds.levels.iter().enumerate().map(|(i, l)| (Some(i as u8 + 1), l)));
    for (level, samples) in groups {
        let mut rows = Vec::with_capacity(samples.len());
        for s in samples {
            let entry = ManifestEntry::from_sample(s);
            save_tensor(&root.join(&entry.path), &s.image)?;
            s.masks.save(&root.join(&entry.masks))?;
            rows.push(entry);
        }
        write_jsonl(&root.join("manifests").join(manifest_name(level)), &rows)?;
    }
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    read_jsonl(path)
}

/// Reads the image and masks referenced by `entry`.
pub fn load_sample(root: &Path, entry: &ManifestEntry) -> Result<SynthSample> {
    let image = load_tensor(&root.join(&entry.path))?;
    let masks = PartMaskSet::load(&root.join(&entry.masks))?;
    let (h, w) = masks.dims();
    if image.shape() != [3, h, w] {
        return Err(Error::format(root.join(&entry.path), format!("image shape {:?} does not match masks {h}x{w}", image.shape())));
    }
    Ok(SynthSample {
        id: entry.id.clone(),
        image,
        masks,
        label: entry.label,
        artifacts: entry.artifacts.clone(),
        split: entry.split,
        level: entry.level,
        perturbation: entry.perturbation,
    })
}

/// Dataset root for a manifest stored at `<root>/manifests/<name>`.
pub fn dataset_root(manifest: &Path) -> PathBuf {
    manifest.parent().and_then(Path::parent).map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

/// Loads every split and level written by [`save_dataset`].
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let load = |level: Option<u8>| -> Result<Vec<SynthSample>> {
        load_manifest(&root.join("manifests").join(manifest_name(level)))?
            .iter()
            .map(|e| load_sample(root, e))
            .collect()
    };
    Ok(Dataset {
        train: load(None)?,
        levels: (1..=5).map(|l| load(Some(l))).collect::<Result<Vec<_>>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{to_luma, FilterBank};
    use std::collections::HashSet;

    fn small() -> DataConfig {
        DataConfig { train_samples: 20, test_per_level: 10, ..DataConfig::default() }
    }

    /// High-band energy inside a mask: the luma image is high-passed with a
    /// direct (separable) DFT, and squared responses are summed over mask pixels.
    fn masked_band_energy(img: &Tensor, mask: &Tensor, cutoff: f64) -> f64 {
        use num_complex::Complex64 as C;
        let luma = to_luma(img).unwrap();
        let (h, w) = luma.dims2().unwrap();
        let dft = |x: &[C], n: usize, sign: f64| -> Vec<C> {
            (0..n)
                .map(|k| (0..n).map(|j| x[j] * C::from_polar(1.0, sign * 2.0 * std::f64::consts::PI * (k * j) as f64 / n as f64)).sum())
                .collect()
        };
        let mut grid: Vec<C> = luma.data().iter().map(|&v| C::new(v, 0.0)).collect();
        let pass = |grid: &mut Vec<C>, sign: f64| {
            for y in 0..h {
                let row = dft(&grid[y * w..(y + 1) * w], w, sign);
                grid[y * w..(y + 1) * w].copy_from_slice(&row);
            }
            for x in 0..w {
                let col: Vec<C> = (0..h).map(|y| grid[y * w + x]).collect();
                for (y, v) in dft(&col, h, sign).into_iter().enumerate() {
                    grid[y * w + x] = v;
                }
            }
        };
        pass(&mut grid, -1.0);
        for u in 0..h {
            for v in 0..w {
                if crate::encoders::radial_frequency(u, v, h, w) <= cutoff {
                    grid[u * w + v] = C::new(0.0, 0.0);
                }
            }
        }
        pass(&mut grid, 1.0);
        grid.iter().zip(mask.data()).map(|(r, m)| m * (r.re / (h * w) as f64).powi(2)).sum()
    }

    #[test]
    fn noise_artifact_raises_band_energy_over_matched_real() {
        let cfg = DataConfig { image_size: 32, ..DataConfig::default() };
        let mut checked = 0;
        for i in 0..40u64 {
            let fake = make_sample(&cfg, i, "f".into(), Split::Train, Some(1), true).unwrap();
            let real = make_sample(&cfg, i, "r".into(), Split::Train, Some(1), false).unwrap();
            for a in fake.artifacts.iter().filter(|a| a.kind == ArtifactKind::HighFreqNoise) {
                let m = fake.masks.mask(a.part);
                let ef = masked_band_energy(&fake.image, m, 0.5);
                let er = masked_band_energy(&real.image, m, 0.5);
                assert!(ef > er, "sample {i} part {}: {ef} <= {er}", a.part);
                checked += 1;
            }
            if checked >= 4 {
                break;
            }
        }
        assert!(checked >= 4);
        // The direct high-pass agrees with the FFT filter bank.
        let s = make_sample(&cfg, 3, "x".into(), Split::Train, None, false).unwrap();
        let bank = FilterBank::new(&[0.5], 32, 32).unwrap();
        let resp = bank.band_responses(&to_luma(&s.image).unwrap()).unwrap();
        let mask = s.masks.mask(PartId::Nose);
        let fast: f64 = resp.data().iter().zip(mask.data()).map(|(r, m)| m * r * r).sum();
        assert!((fast - masked_band_energy(&s.image, mask, 0.5)).abs() < 1e-9);
    }

    #[test]
    fn artifacts_stay_inside_their_masks() {
        let cfg = DataConfig::default();
        for level in [None, Some(2), Some(3), Some(4)] {
            for i in 0..6u64 {
                let fake = make_sample(&cfg, 100 + i, "f".into(), Split::Test, level, true).unwrap();
                let real = make_sample(&cfg, 100 + i, "r".into(), Split::Test, level, false).unwrap();
                assert!(!fake.artifacts.is_empty() && real.artifacts.is_empty());
                let n = 64 * 64;
                for px in 0..n {
                    let inside = fake.artifacts.iter().any(|a| fake.masks.mask(a.part).data()[px] == 1.0);
                    if !inside {
                        for c in 0..3 {
                            assert_eq!(fake.image.data()[c * n + px], real.image.data()[c * n + px]);
                        }
                    }
                }
                if level == Some(4) {
                    assert_eq!(fake.artifacts.len(), 1);
                    assert!(!matches!(fake.artifacts[0].part, PartId::FaceContour | PartId::Hair));
                }
            }
        }
    }

    #[test]
    fn counts_are_balanced_and_ids_unique() {
        let cfg = small();
        let ds = gen_dataset(&cfg, 5).unwrap();
        assert_eq!(ds.train.len(), 20);
        assert_eq!(ds.train.iter().filter(|s| s.label == Label::Fake).count(), 10);
        for l in 1..=5 {
            let lv = ds.level(l);
            assert_eq!(lv.len(), 10);
            assert_eq!(lv.iter().filter(|s| s.label == Label::Fake).count(), 5);
            assert!(lv.iter().all(|s| s.level == Some(l) && s.split == Split::Test));
            assert_eq!(lv.iter().all(|s| s.perturbation.is_some()), l == 5);
        }
        let ids: HashSet<&str> = ds.all().map(|s| s.id.as_str()).collect();
        assert_eq!(ids.len(), 70);
        assert!(ds.level(3).iter().flat_map(|s| &s.artifacts).all(|a| a.kind == ArtifactKind::BoundarySeam));
        assert!(ds.train.iter().flat_map(|s| &s.artifacts).all(|a| a.kind != ArtifactKind::BoundarySeam));
    }

    #[test]
    fn masks_are_plausible() {
        let cfg = DataConfig { hair_absent_prob: 0.0, ..DataConfig::default() };
        let s = make_sample(&cfg, 1, "x".into(), Split::Train, None, false).unwrap();
        for p in PartId::ALL {
            assert!(s.masks.count(p) >= 15, "{p} has {} pixels", s.masks.count(p));
        }
        let cfg = DataConfig { hair_absent_prob: 1.0, ..DataConfig::default() };
        let s = make_sample(&cfg, 1, "x".into(), Split::Train, None, false).unwrap();
        assert!(!s.masks.present(PartId::Hair));
    }

    #[test]
    fn same_seed_same_bytes_and_files_round_trip() {
        let cfg = small();
        let a = gen_dataset(&cfg, 11).unwrap();
        let b = gen_dataset(&cfg, 11).unwrap();
        for (x, y) in a.all().zip(b.all()) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.masks, y.masks);
        }
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &a).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        for (x, y) in a.all().zip(back.all()) {
            assert_eq!((&x.id, &x.image, &x.masks, x.label), (&y.id, &y.image, &y.masks, y.label));
            assert_eq!(x.artifacts, y.artifacts);
        }
        let first = std::fs::read(dir.path().join("manifests/level3.jsonl")).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        save_dataset(dir2.path(), &b).unwrap();
        assert_eq!(first, std::fs::read(dir2.path().join("manifests/level3.jsonl")).unwrap());
        assert_eq!(level_name(4).unwrap(), "Cross-Task");
        assert!(level_name(0).is_err() && level_name(6).is_err());
    }
}
