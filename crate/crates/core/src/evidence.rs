//! Part-level evidence: mask-guided pooling, per-part embeddings and
//! anomaly scores, and the softmax-weighted global summary.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::EvidenceConfig;
use crate::error::{Error, Result};
use crate::numerics::{load_tensor, save_tensor, tensor, NodeId, ParamId, ParamStore, Tape, Tensor};

pub const NUM_PARTS: usize = 8;

/// Anatomical facial region. Integer codes `0..8` follow declaration order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PartId {
    LeftEye,
    RightEye,
    LeftEyebrow,
    RightEyebrow,
    Nose,
    Mouth,
    FaceContour,
    Hair,
}

impl PartId {
    pub const ALL: [PartId; NUM_PARTS] = [
        PartId::LeftEye,
        PartId::RightEye,
        PartId::LeftEyebrow,
        PartId::RightEyebrow,
        PartId::Nose,
        PartId::Mouth,
        PartId::FaceContour,
        PartId::Hair,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PartId::LeftEye => "LEFT_EYE",
            PartId::RightEye => "RIGHT_EYE",
            PartId::LeftEyebrow => "LEFT_EYEBROW",
            PartId::RightEyebrow => "RIGHT_EYEBROW",
            PartId::Nose => "NOSE",
            PartId::Mouth => "MOUTH",
            PartId::FaceContour => "FACE_CONTOUR",
            PartId::Hair => "HAIR",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.as_str() == s)
    }
}

impl fmt::Display for PartId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Eight binary masks over the image grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PartMaskSet {
    masks: Vec<Tensor>,
    counts: [usize; NUM_PARTS],
}

#[derive(Serialize, Deserialize)]
struct MaskManifest {
    height: usize,
    width: usize,
    present: Vec<PartId>,
}

impl PartMaskSet {
    /// Masks in `PartId` order; values must be 0 or 1.
    pub fn new(masks: Vec<Tensor>) -> Result<Self> {
        if masks.len() != NUM_PARTS {
            return Err(Error::Shape(format!("expected {NUM_PARTS} masks, got {}", masks.len())));
        }
        let shape = masks[0].shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("masks must be [H, W], got {shape:?}")));
        }
        let mut counts = [0; NUM_PARTS];
        for (k, m) in masks.iter().enumerate() {
            if m.shape() != shape.as_slice() {
                return Err(Error::Shape(format!("mask {k} has shape {:?}, expected {shape:?}", m.shape())));
            }
            if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::InvalidArgument(format!("mask {} is not binary", PartId::ALL[k])));
            }
            counts[k] = m.data().iter().filter(|&&v| v == 1.0).count();
        }
        Ok(Self { masks, counts })
    }

    pub fn mask(&self, part: PartId) -> &Tensor {
        &self.masks[part.index()]
    }

    pub fn count(&self, part: PartId) -> usize {
        self.counts[part.index()]
    }

    pub fn present(&self, part: PartId) -> bool {
        self.counts[part.index()] > 0
    }

    pub fn dims(&self) -> (usize, usize) {
        let s = self.masks[0].shape();
        (s[0], s[1])
    }

    /// Writes `mask_<PART>.pgt` per part plus `parts.json` listing present parts.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for part in PartId::ALL {
            save_tensor(&dir.join(format!("mask_{part}.pgt")), self.mask(part))?;
        }
        let (height, width) = self.dims();
        let manifest = MaskManifest {
            height,
            width,
            present: PartId::ALL.into_iter().filter(|&p| self.present(p)).collect(),
        };
        std::fs::write(dir.join("parts.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("parts.json");
        let manifest: MaskManifest = serde_json::from_slice(&std::fs::read(&manifest_path)?)?;
        let masks = PartId::ALL
            .iter()
            .map(|p| load_tensor(&dir.join(format!("mask_{p}.pgt"))))
            .collect::<Result<Vec<_>>>()?;
        let set = Self::new(masks)?;
        if set.dims() != (manifest.height, manifest.width) {
            return Err(Error::format(&manifest_path, "mask dimensions disagree with manifest"));
        }
        for p in PartId::ALL {
            if set.present(p) != manifest.present.contains(&p) {
                return Err(Error::format(&manifest_path, format!("presence of {p} disagrees with mask file")));
            }
        }
        Ok(set)
    }
}

/// Per-channel mean of `fmap [C, H, W]` over mask pixels; `None` for an empty mask.
pub fn masked_avg_pool(fmap: &Tensor, mask: &Tensor) -> Result<Option<Vec<f64>>> {
    let (c, h, w) = fmap.dims3()?;
    if mask.shape() != [h, w] {
        return Err(Error::Shape(format!("mask {:?} for feature map {h}x{w}", mask.shape())));
    }
    let count = mask.data().iter().filter(|&&m| m != 0.0).count();
    if count == 0 {
        return Ok(None);
    }
    Ok(Some(
        (0..c)
            .map(|ch| {
                fmap.plane(ch)
                    .iter()
                    .zip(mask.data())
                    .filter(|(_, &m)| m != 0.0)
                    .map(|(v, _)| v)
                    .sum::<f64>()
                    / count as f64
            })
            .collect(),
    ))
}

/// Mean anomaly over the mask; exactly 0 for an empty mask.
pub fn part_score(anomaly: &Tensor, mask: &Tensor) -> Result<f64> {
    let (h, w) = anomaly.dims2()?;
    let as3 = anomaly.clone().reshape(&[1, h, w])?;
    Ok(masked_avg_pool(&as3, mask)?.map_or(0.0, |v| v[0]))
}

/// Softmax weights over part scores and the weighted sum of part embeddings.
pub fn aggregate_global(embeddings: &[Vec<f64>], scores: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if embeddings.len() != scores.len() || embeddings.is_empty() {
        return Err(Error::Shape(format!("{} embeddings vs {} scores", embeddings.len(), scores.len())));
    }
    let d = embeddings[0].len();
    let weights = tensor::softmax(scores);
    let mut global = vec![0.0; d];
    for (e, w) in embeddings.iter().zip(&weights) {
        for (g, v) in global.iter_mut().zip(e) {
            *g += w * v;
        }
    }
    Ok((weights, global))
}

/// Pooled branch features and anomaly scores for one image, fixed once encoders are frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledFeatures {
    /// `[freq; pixel]` per part, `None` when the part mask is empty.
    pub pooled: Vec<Option<Vec<f64>>>,
    pub scores: [f64; NUM_PARTS],
}

/// Evidence for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct EvidenceBundle {
    /// Part embeddings in `PartId` order.
    pub parts: Vec<Vec<f64>>,
    pub scores: [f64; NUM_PARTS],
    pub weights: [f64; NUM_PARTS],
    pub global: Vec<f64>,
    pub present: [bool; NUM_PARTS],
}

impl EvidenceBundle {
    pub fn part(&self, p: PartId) -> &[f64] {
        &self.parts[p.index()]
    }

    pub fn dim(&self) -> usize {
        self.global.len()
    }

    /// Bundle with every embedding zeroed.
    pub fn zeroed(&self) -> Self {
        let d = self.dim();
        Self {
            parts: vec![vec![0.0; d]; NUM_PARTS],
            global: vec![0.0; d],
            ..self.clone()
        }
    }
}

/// Tape nodes carrying evidence into the policy: parts `[8, D]` and global `[1, D]`.
#[derive(Clone, Copy, Debug)]
pub struct EvidenceNodes {
    pub parts: NodeId,
    pub global: NodeId,
}

impl EvidenceNodes {
    pub fn from_bundle(tape: &mut Tape, bundle: &EvidenceBundle) -> Result<Self> {
        let d = bundle.dim();
        let flat: Vec<f64> = bundle.parts.iter().flatten().copied().collect();
        Ok(Self {
            parts: tape.constant(Tensor::new(vec![NUM_PARTS, d], flat)?)?,
            global: tape.constant(Tensor::new(vec![1, d], bundle.global.clone())?)?,
        })
    }

    pub fn to_bundle(&self, tape: &Tape, scores: [f64; NUM_PARTS], weights: [f64; NUM_PARTS], present: [bool; NUM_PARTS]) -> EvidenceBundle {
        let parts = tape.value(self.parts);
        EvidenceBundle {
            parts: (0..NUM_PARTS).map(|k| parts.row(k).to_vec()).collect(),
            scores,
            weights,
            global: tape.value(self.global).data().to_vec(),
            present,
        }
    }
}

#[derive(Clone, Debug)]
struct Mlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

const INPUT_STD_FLOOR: f64 = 1e-6;

/// Parameters of the part-embedding MLP and the shared default vector.
#[derive(Clone, Debug)]
pub struct EvidenceParams {
    mlps: Vec<Mlp>,
    pub default_vector: ParamId,
    /// Fixed input standardization `(x - shift) * scale`, fitted once on
    /// training features and never updated by the optimizer.
    pub input_shift: ParamId,
    pub input_scale: ParamId,
    pub input_dim: usize,
    pub dim: usize,
}

impl EvidenceParams {
    pub fn init(store: &mut ParamStore, input_dim: usize, cfg: &EvidenceConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_mlps = if cfg.per_part_mlp { NUM_PARTS } else { 1 };
        let mut mlps = Vec::new();
        for m in 0..n_mlps {
            let prefix = if cfg.per_part_mlp {
                format!("evidence.mlp.{}", PartId::ALL[m])
            } else {
                "evidence.mlp".to_string()
            };
            let a1 = (3.0 / input_dim as f64).sqrt();
            let a2 = (3.0 / cfg.hidden as f64).sqrt();
            let mut u = |shape: &[usize], a: f64| {
                Tensor::new(shape.to_vec(), (0..shape.iter().product()).map(|_| rng.random_range(-a..a)).collect()).unwrap()
            };
            let w1 = u(&[input_dim, cfg.hidden], a1);
            let w2 = u(&[cfg.hidden, cfg.dim], a2);
            mlps.push(Mlp {
                w1: store.add(format!("{prefix}.w1"), w1),
                b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[cfg.hidden])),
                w2: store.add(format!("{prefix}.w2"), w2),
                b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[cfg.dim])),
            });
        }
        let default_vector = store.add("evidence.default", Tensor::zeros(&[cfg.dim]));
        let input_shift = store.add("evidence.input.shift", Tensor::zeros(&[input_dim]));
        let input_scale = store.add("evidence.input.scale", Tensor::full(&[input_dim], 1.0));
        Self {
            mlps,
            default_vector,
            input_shift,
            input_scale,
            input_dim,
            dim: cfg.dim,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.mlps.iter().flat_map(|m| [m.w1, m.b1, m.w2, m.b2]).collect();
        ids.push(self.default_vector);
        ids
    }

    fn mlp_for(&self, part: PartId) -> &Mlp {
        if self.mlps.len() == 1 {
            &self.mlps[0]
        } else {
            &self.mlps[part.index()]
        }
    }

    /// Sets the input standardization to the per-dimension mean and inverse
    /// standard deviation of every present part in `feats`.
    pub fn fit_input_norm(&self, store: &mut ParamStore, feats: &[PooledFeatures]) -> Result<()> {
        let rows: Vec<&Vec<f64>> = feats.iter().flat_map(|f| f.pooled.iter().flatten()).collect();
        if rows.is_empty() {
            return Err(Error::InvalidArgument("no pooled features to fit the input standardization".into()));
        }
        let n = rows.len() as f64;
        let d = self.input_dim;
        if let Some(r) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::Shape(format!("pooled vector of {} values, MLP expects {d}", r.len())));
        }
        let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..d)
            .map(|j| {
                let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                1.0 / var.sqrt().max(INPUT_STD_FLOOR)
            })
            .collect();
        *store.get_mut(self.input_shift) = Tensor::from_vec(mean);
        *store.get_mut(self.input_scale) = Tensor::from_vec(scale);
        Ok(())
    }

    /// `MLP([freq; pixel])` on rows of `x [n, input_dim]`, all through one MLP.
    fn mlp_rows(&self, tape: &mut Tape, store: &ParamStore, mlp: &Mlp, x: NodeId) -> Result<NodeId> {
        let rows = tape.value(x).shape()[0];
        let shift = tape.constant(store.get(self.input_shift).map(|v| -v))?;
        let x = tape.add_row(x, shift)?;
        let scale = store.get(self.input_scale).data();
        let tiled = tape.constant(Tensor::new(vec![rows, self.input_dim], scale.iter().copied().cycle().take(rows * self.input_dim).collect())?)?;
        let x = tape.mul(x, tiled)?;
        let w1 = tape.param(store, mlp.w1)?;
        let b1 = tape.param(store, mlp.b1)?;
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.gelu(h)?;
        let w2 = tape.param(store, mlp.w2)?;
        let b2 = tape.param(store, mlp.b2)?;
        let o = tape.matmul(h, w2)?;
        tape.add_row(o, b2)
    }

    /// Embeds one pooled `[freq; pixel]` vector.
    pub fn embed_part(&self, tape: &mut Tape, store: &ParamStore, part: PartId, pooled: NodeId) -> Result<NodeId> {
        let n = tape.value(pooled).len();
        if n != self.input_dim {
            return Err(Error::Shape(format!("pooled vector of {n} values, MLP expects {}", self.input_dim)));
        }
        let x = tape.reshape(pooled, &[1, n])?;
        self.mlp_rows(tape, store, self.mlp_for(part), x)
    }

    /// Builds part embeddings `[8, D]` and the global summary `[1, D]`.
    ///
    /// `pooled[k]` is `None` for absent parts, which take the default vector.
    /// `scores` is the `[8]` node of per-part anomaly scores (0 for absent parts).
    pub fn build(&self, tape: &mut Tape, store: &ParamStore, pooled: &[Option<NodeId>], scores: NodeId) -> Result<EvidenceNodes> {
        if pooled.len() != NUM_PARTS {
            return Err(Error::Shape(format!("expected {NUM_PARTS} pooled entries")));
        }
        let default = tape.param(store, self.default_vector)?;
        let mut rows: Vec<NodeId> = Vec::with_capacity(NUM_PARTS + 1);
        let mut index = [0usize; NUM_PARTS];
        if self.mlps.len() == 1 {
            let present: Vec<NodeId> = pooled.iter().flatten().copied().collect();
            if !present.is_empty() {
                let x = tape.concat(&present)?;
                let x = tape.reshape(x, &[present.len(), self.input_dim])?;
                rows.push(self.mlp_rows(tape, store, &self.mlps[0], x)?);
            }
            let mut next = 0;
            for (k, p) in pooled.iter().enumerate() {
                if p.is_some() {
                    index[k] = next;
                    next += 1;
                } else {
                    index[k] = present.len();
                }
            }
        } else {
            let mut next = 0;
            for (k, p) in pooled.iter().enumerate() {
                if let Some(p) = p {
                    rows.push(self.embed_part(tape, store, PartId::ALL[k], *p)?);
                    index[k] = next;
                    next += 1;
                }
            }
            for (k, p) in pooled.iter().enumerate() {
                if p.is_none() {
                    index[k] = next;
                }
            }
        }
        rows.push(default);
        let stacked = tape.concat(&rows)?;
        let n_rows = tape.value(stacked).len() / self.dim;
        let stacked = tape.reshape(stacked, &[n_rows, self.dim])?;
        let parts = tape.gather(stacked, &index)?;
        let weights = tape.softmax(scores)?;
        let weights = tape.reshape(weights, &[1, NUM_PARTS])?;
        let global = tape.matmul(weights, parts)?;
        Ok(EvidenceNodes { parts, global })
    }

    /// Evidence bundle from precomputed pooled features.
    pub fn bundle(&self, store: &ParamStore, feats: &PooledFeatures) -> Result<EvidenceBundle> {
        let mut tape = Tape::new();
        let pooled = feats
            .pooled
            .iter()
            .map(|p| p.as_ref().map(|v| tape.constant(Tensor::from_vec(v.clone()))).transpose())
            .collect::<Result<Vec<_>>>()?;
        let scores = tape.constant(Tensor::from_vec(feats.scores.to_vec()))?;
        let nodes = self.build(&mut tape, store, &pooled, scores)?;
        let weights = tensor::softmax(&feats.scores);
        let present = std::array::from_fn(|k| feats.pooled[k].is_some());
        Ok(nodes.to_bundle(&tape, feats.scores, weights.try_into().unwrap(), present))
    }
}

/// Pools frequency and pixel maps per part and scores each part on the anomaly map.
pub fn pool_features(freq: Option<&Tensor>, pixel: Option<&Tensor>, anomaly: Option<&Tensor>, masks: &PartMaskSet, freq_channels: usize, pixel_channels: usize) -> Result<PooledFeatures> {
    let mut pooled = Vec::with_capacity(NUM_PARTS);
    let mut scores = [0.0; NUM_PARTS];
    for part in PartId::ALL {
        let mask = masks.mask(part);
        if !masks.present(part) {
            pooled.push(None);
            continue;
        }
        let mut v = match freq {
            Some(f) => masked_avg_pool(f, mask)?.expect("non-empty mask"),
            None => vec![0.0; freq_channels],
        };
        match pixel {
            Some(p) => v.extend(masked_avg_pool(p, mask)?.expect("non-empty mask")),
            None => v.extend(std::iter::repeat_n(0.0, pixel_channels)),
        }
        pooled.push(Some(v));
        if let Some(a) = anomaly {
            scores[part.index()] = part_score(a, mask)?;
        }
    }
    Ok(PooledFeatures { pooled, scores })
}
