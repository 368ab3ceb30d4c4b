//! The full forensic reasoner: encoders, part evidence and the policy under
//! one parameter store, plus checkpoint files with stage lineage.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::encoders::{ConvPixelExtractor, FilterBank, PixelExtractor, PrecomputedPixelFeatures, SpectralEncoder};
use crate::error::{Error, Result};
use crate::evalbench::synth::{derive_seed, SynthSample};
use crate::evidence::{pool_features, EvidenceBundle, EvidenceNodes, EvidenceParams, PartMaskSet, PartId, PooledFeatures, NUM_PARTS};
use crate::numerics::io::{encode_tensor, read_tensor};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor};
use crate::reasoner::{generate, Generation, InjectionMode, Policy, SamplingConfig};
use crate::transcript::{TokenId, Vocab};

pub struct ForensicModel {
    pub config: RunConfig,
    pub store: ParamStore,
    pub vocab: Vocab,
    pub bank: FilterBank,
    pub spectral: SpectralEncoder,
    pub pixel: Box<dyn PixelExtractor>,
    pub evidence: EvidenceParams,
    pub policy: Policy,
}

impl std::fmt::Debug for ForensicModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ForensicModel").field("params", &self.store.len()).finish_non_exhaustive()
    }
}

impl Clone for ForensicModel {
    fn clone(&self) -> Self {
        let mut m = Self::new(&self.config).expect("config already validated");
        m.store = self.store.clone();
        m
    }
}

impl ForensicModel {
    /// Fresh model; every component draws from its own stream of `config.seed`.
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let enc = &config.encoders;
        let size = config.data.image_size;
        let mut store = ParamStore::new();
        let vocab = Vocab::new();
        let bank = FilterBank::new(&enc.cutoffs, size, size)?;
        let spectral = SpectralEncoder::init(&mut store, bank.len(), enc, derive_seed(seed, 0x5e, 1));
        let pixel: Box<dyn PixelExtractor> = match &enc.pixel_features_dir {
            Some(dir) => Box::new(PrecomputedPixelFeatures::new(dir, enc.pixel_channels)),
            None => Box::new(ConvPixelExtractor::init(&mut store, 3, enc, derive_seed(seed, 0x5e, 2))),
        };
        let evidence = EvidenceParams::init(&mut store, enc.spectral_channels + enc.pixel_channels, &config.evidence, derive_seed(seed, 0x5e, 3));
        let policy = Policy::init(&mut store, vocab.len(), config.evidence.dim, &config.model, derive_seed(seed, 0x5e, 4));
        Ok(Self {
            config: config.clone(),
            store,
            vocab,
            bank,
            spectral,
            pixel,
            evidence,
            policy,
        })
    }

    pub fn mode(&self) -> InjectionMode {
        InjectionMode { enabled: true, stage_gate: self.config.model.stage_gate }
    }

    /// Parameters updated by training. Encoder branches join only when
    /// `train_encoders` is set and the branch is not frozen.
    pub fn trainable(&self, train_encoders: bool) -> Vec<ParamId> {
        let enc = &self.config.encoders;
        let mut ids = Vec::new();
        if train_encoders && enc.use_spectral && !enc.freeze_spectral {
            ids.extend(self.spectral.param_ids());
        }
        if train_encoders && enc.use_pixel && !enc.freeze_pixel {
            ids.extend(self.pixel.param_ids());
        }
        ids.extend(self.evidence.param_ids());
        ids.extend(self.policy.param_ids());
        ids
    }

    /// True when some encoder parameters are trained and features must be
    /// recomputed on the tape.
    pub fn encoders_on_tape(&self, train_encoders: bool) -> bool {
        let enc = &self.config.encoders;
        train_encoders && ((enc.use_spectral && !enc.freeze_spectral) || (enc.use_pixel && !enc.freeze_pixel))
    }

    fn check_image(&self, image: &Tensor, masks: &PartMaskSet) -> Result<()> {
        let size = self.config.data.image_size;
        if image.shape() != [3, size, size] || masks.dims() != (size, size) {
            return Err(Error::Shape(format!("model expects [3, {size}, {size}] images, got {:?} with {:?} masks", image.shape(), masks.dims())));
        }
        Ok(())
    }

    /// Pooled encoder features and anomaly scores for one image.
    pub fn features(&self, id: &str, image: &Tensor, masks: &PartMaskSet) -> Result<PooledFeatures> {
        self.check_image(image, masks)?;
        let enc = &self.config.encoders;
        let spec = enc.use_spectral.then(|| self.spectral.encode(image, &self.bank, &self.store)).transpose()?;
        let pix = enc.use_pixel.then(|| self.pixel.extract(&self.store, id, image)).transpose()?;
        pool_features(
            spec.as_ref().map(|s| &s.fmap),
            pix.as_ref().map(|p| &p.fmap),
            spec.as_ref().map(|s| &s.anomaly),
            masks,
            enc.spectral_channels,
            enc.pixel_channels,
        )
    }

    pub fn sample_features(&self, s: &SynthSample) -> Result<PooledFeatures> {
        self.features(&s.id, &s.image, &s.masks)
    }

    /// Fits the evidence MLP's input standardization on training features.
    pub fn fit_input_norm(&mut self, feats: &[PooledFeatures]) -> Result<()> {
        self.evidence.fit_input_norm(&mut self.store, feats)
    }

    /// Evidence bundle for decoding; all-zero under the zero-evidence ablation.
    pub fn bundle(&self, feats: &PooledFeatures) -> Result<EvidenceBundle> {
        let b = self.evidence.bundle(&self.store, feats)?;
        Ok(if self.config.model.zero_evidence { b.zeroed() } else { b })
    }

    /// Evidence nodes on `tape` from precomputed (frozen-encoder) features.
    pub fn evidence_nodes(&self, tape: &mut Tape, store: &ParamStore, feats: &PooledFeatures) -> Result<EvidenceNodes> {
        if self.config.model.zero_evidence {
            return EvidenceNodes::from_bundle(tape, &self.bundle(feats)?);
        }
        let pooled = feats
            .pooled
            .iter()
            .map(|p| p.as_ref().map(|v| tape.constant(Tensor::from_vec(v.clone()))).transpose())
            .collect::<Result<Vec<_>>>()?;
        let scores = tape.constant(Tensor::from_vec(feats.scores.to_vec()))?;
        self.evidence.build(tape, store, &pooled, scores)
    }

    /// Evidence nodes with the encoders recorded on `tape`, so gradients
    /// reach unfrozen encoder parameters.
    pub fn evidence_nodes_on_tape(&self, tape: &mut Tape, store: &ParamStore, id: &str, image: &Tensor, masks: &PartMaskSet) -> Result<EvidenceNodes> {
        self.check_image(image, masks)?;
        if self.config.model.zero_evidence {
            let feats = self.features(id, image, masks)?;
            return self.evidence_nodes(tape, store, &feats);
        }
        let enc = &self.config.encoders;
        let (fmap, anomaly) = if enc.use_spectral {
            let bands = self.bank.band_responses(&crate::encoders::to_luma(image)?)?;
            let (f, a) = self.spectral.forward(tape, store, &bands)?;
            (Some(f), Some(a))
        } else {
            (None, None)
        };
        let pix = enc.use_pixel.then(|| self.pixel.forward(tape, store, id, image)).transpose()?;
        let mut pooled = Vec::with_capacity(NUM_PARTS);
        let mut scores = Vec::with_capacity(NUM_PARTS);
        for part in PartId::ALL {
            let mask = masks.mask(part);
            if !masks.present(part) {
                pooled.push(None);
                scores.push(tape.constant(Tensor::from_vec(vec![0.0]))?);
                continue;
            }
            let f = match fmap {
                Some(f) => tape.masked_mean(f, mask)?.expect("non-empty mask"),
                None => tape.constant(Tensor::zeros(&[enc.spectral_channels]))?,
            };
            let p = match pix {
                Some(p) => tape.masked_mean(p, mask)?.expect("non-empty mask"),
                None => tape.constant(Tensor::zeros(&[enc.pixel_channels]))?,
            };
            pooled.push(Some(tape.concat(&[f, p])?));
            scores.push(match anomaly {
                Some(a) => tape.masked_mean(a, mask)?.expect("non-empty mask"),
                None => tape.constant(Tensor::from_vec(vec![0.0]))?,
            });
        }
        let scores = tape.concat(&scores)?;
        self.evidence.build(tape, store, &pooled, scores)
    }

    /// Samples or greedily decodes one response for a bundle.
    pub fn generate(&self, bundle: &EvidenceBundle, cfg: &SamplingConfig) -> Result<Generation> {
        generate(&self.policy, &self.store, &self.vocab, &self.vocab.prompt(), Some(bundle), self.mode(), cfg)
    }

    pub fn prompt(&self) -> Vec<TokenId> {
        self.vocab.prompt()
    }
}

/// Pipeline stage that produced a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStage {
    Init,
    Sft,
    SelfTrain,
    Grpo,
}

impl TrainStage {
    /// Stage whose checkpoint must initialize this one.
    pub fn parent(self) -> Option<TrainStage> {
        match self {
            TrainStage::Init => None,
            TrainStage::Sft => Some(TrainStage::Init),
            TrainStage::SelfTrain => Some(TrainStage::Sft),
            TrainStage::Grpo => Some(TrainStage::SelfTrain),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: u32,
    pub stage: TrainStage,
    /// Hash of the checkpoint this one was trained from.
    pub parent_hash: Option<String>,
    pub parent_stage: Option<TrainStage>,
    pub vocab_hash: String,
    pub config: RunConfig,
    pub params: Vec<ParamMeta>,
}

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"PGRCKPT1";
const FORMAT_VERSION: u32 = 1;

/// A loaded checkpoint.
#[derive(Debug)]
pub struct Checkpoint {
    pub model: ForensicModel,
    pub header: CheckpointHeader,
    /// SHA-256 of the file bytes.
    pub hash: String,
}

impl Checkpoint {
    /// Fails unless this checkpoint can initialize `stage`.
    pub fn require_parent_of(&self, stage: TrainStage) -> Result<()> {
        match stage.parent() {
            Some(p) if p == self.header.stage => Ok(()),
            Some(p) => Err(Error::Lineage(format!("{stage:?} must start from a {p:?} checkpoint, got {:?}", self.header.stage))),
            None => Err(Error::Lineage(format!("{stage:?} has no parent stage"))),
        }
    }

    pub fn lineage(&self) -> Lineage {
        Lineage { stage: self.header.stage, hash: self.hash.clone() }
    }
}

/// Identity of a parent checkpoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lineage {
    pub stage: TrainStage,
    pub hash: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serializes the model: magic, `u64` header length, JSON header, then every
/// parameter as a tensor record in header order.
pub fn encode_checkpoint(model: &ForensicModel, stage: TrainStage, parent: Option<&Lineage>) -> Result<Vec<u8>> {
    if let (Some(expected), Some(p)) = (stage.parent(), parent) {
        if p.stage != expected {
            return Err(Error::Lineage(format!("{stage:?} checkpoint cannot descend from {:?}", p.stage)));
        }
    }
    let header = CheckpointHeader {
        format: FORMAT_VERSION,
        stage,
        parent_hash: parent.map(|p| p.hash.clone()),
        parent_stage: parent.map(|p| p.stage),
        vocab_hash: model.vocab.hash(),
        config: model.config.clone(),
        params: model.store.iter().map(|(_, name, t)| ParamMeta { name: name.to_string(), shape: t.shape().to_vec() }).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, t) in model.store.iter() {
        out.extend_from_slice(&encode_tensor(t));
    }
    Ok(out)
}

/// Writes a checkpoint and returns its hash.
pub fn save_checkpoint(path: &Path, model: &ForensicModel, stage: TrainStage, parent: Option<&Lineage>) -> Result<String> {
    let bytes = encode_checkpoint(model, stage, parent)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn decode_checkpoint(bytes: &[u8], origin: &Path) -> Result<Checkpoint> {
    let bad = |d: String| Error::format(origin, d);
    if bytes.len() < 16 || bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
    if header.format != FORMAT_VERSION {
        return Err(bad(format!("unsupported format {}", header.format)));
    }
    let mut model = ForensicModel::new(&header.config)?;
    if header.vocab_hash != model.vocab.hash() {
        return Err(bad("vocabulary hash mismatch".into()));
    }
    if header.params.len() != model.store.len() {
        return Err(bad(format!("{} parameters stored, model has {}", header.params.len(), model.store.len())));
    }
    let mut reader = &bytes[16 + len..];
    for meta in &header.params {
        let id = model.store.id(&meta.name).ok_or_else(|| bad(format!("unknown parameter {}", meta.name)))?;
        let t = read_tensor(&mut reader, origin)?;
        if t.shape() != meta.shape.as_slice() || t.shape() != model.store.get(id).shape() {
            return Err(bad(format!("parameter {} has shape {:?}, expected {:?}", meta.name, t.shape(), model.store.get(id).shape())));
        }
        *model.store.get_mut(id) = t;
    }
    let mut rest = Vec::new();
    reader.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes", rest.len())));
    }
    Ok(Checkpoint { model, header, hash: sha256_hex(bytes) })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?, path)
}
