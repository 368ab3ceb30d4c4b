//! Signal-semantic annotation: rank parts by anomaly score, collect part
//! descriptions from several perception clients, keep the majority claims
//! and synthesize a five-stage teacher transcript.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::AnnotationConfig;
use crate::error::{Error, Result};
use crate::evalbench::synth::{derive_seed, Artifact, ArtifactKind};
use crate::evidence::{EvidenceBundle, PartId, NUM_PARTS};
use crate::transcript::{parse, validate_format, Label, TokenId, TranscriptSpec, Vocab};

/// Part-level claim phrases shared by the mock clients.
pub const NOISE_CLAIM: &str = "grainy speckled texture";
pub const BLUR_CLAIM: &str = "blurred oversmoothed texture";
pub const SEAM_CLAIM: &str = "jagged seam along edge";
pub const CLEAN_CLAIM: &str = "natural consistent texture";
/// Plausible-sounding alternatives used for hallucinated descriptions.
pub const DISTRACTOR_CLAIMS: &[&str] = &["smooth regular shading", "faint edge transition", "warped outline shape"];
/// Part-evidence text for an ROI without a surviving claim.
pub const INCONCLUSIVE: &str = "inconclusive no clear detail";

/// Ranks present parts by anomaly score (descending, ties by part order) and
/// keeps the first `k`.
pub fn select_rois(bundle: &EvidenceBundle, k: usize) -> Result<Vec<PartId>> {
    if !(1..=NUM_PARTS).contains(&k) {
        return Err(Error::InvalidArgument(format!("k must be in 1..={NUM_PARTS}, got {k}")));
    }
    let mut parts: Vec<PartId> = PartId::ALL.into_iter().filter(|p| bundle.present[p.index()]).collect();
    parts.sort_by(|a, b| bundle.scores[b.index()].total_cmp(&bundle.scores[a.index()]).then(a.cmp(b)));
    parts.truncate(k);
    Ok(parts)
}

/// Lowercases and collapses whitespace.
pub fn normalize_claim(s: &str) -> String {
    s.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ClientError {
    #[error("client unavailable: {0}")]
    Unavailable(String),
}

/// What a perception client may look at.
#[derive(Clone, Debug)]
pub struct AnnotationInput {
    pub id: String,
    pub label: Label,
    /// Ground-truth planted artifacts (used by the mock clients only).
    pub artifacts: Vec<Artifact>,
}

pub trait PerceptionClient: Send + Sync {
    fn name(&self) -> String;

    /// One description per ROI part; parts outside `rois` must not appear.
    fn describe(&self, input: &AnnotationInput, rois: &[PartId]) -> Result<BTreeMap<PartId, String>, ClientError>;
}

/// Deterministic describer driven by planted-artifact metadata. Each artifact
/// is noticed with a probability that grows with its strength; with
/// `hallucination_rate` a part gets a random wrong description instead.
#[derive(Clone, Debug)]
pub struct MockPerceptionClient {
    pub index: u64,
    pub seed: u64,
    pub hallucination_rate: f64,
}

fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Probability that a describer notices an artifact.
pub fn perceive_probability(a: &Artifact) -> f64 {
    let reference = match a.kind {
        ArtifactKind::HighFreqNoise => 0.1,
        ArtifactKind::BlurPatch => 1.5,
        ArtifactKind::BoundarySeam => 0.15,
    };
    (a.strength / reference).powi(2).min(0.95)
}

pub fn claim_for(kind: ArtifactKind) -> &'static str {
    match kind {
        ArtifactKind::HighFreqNoise => NOISE_CLAIM,
        ArtifactKind::BlurPatch => BLUR_CLAIM,
        ArtifactKind::BoundarySeam => SEAM_CLAIM,
    }
}

impl PerceptionClient for MockPerceptionClient {
    fn name(&self) -> String {
        format!("mock-{}", self.index)
    }

    fn describe(&self, input: &AnnotationInput, rois: &[PartId]) -> Result<BTreeMap<PartId, String>, ClientError> {
        let mut out = BTreeMap::new();
        for &part in rois {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed ^ stable_hash(&input.id), self.index, part.index() as u64));
            let truth = match input.artifacts.iter().find(|a| a.part == part) {
                Some(a) if rng.random::<f64>() < perceive_probability(a) => claim_for(a.kind),
                _ => CLEAN_CLAIM,
            };
            let claim = if rng.random::<f64>() < self.hallucination_rate {
                let pool: Vec<&str> = [NOISE_CLAIM, BLUR_CLAIM, SEAM_CLAIM, CLEAN_CLAIM]
                    .into_iter()
                    .chain(DISTRACTOR_CLAIMS.iter().copied())
                    .filter(|c| *c != truth)
                    .collect();
                pool[rng.random_range(0..pool.len())]
            } else {
                truth
            };
            out.insert(part, claim.to_string());
        }
        Ok(out)
    }
}

/// Keeps, per part, the claim asserted by strictly more than half the clients.
pub fn consensus_filter(descriptions: &[BTreeMap<PartId, String>]) -> Result<BTreeMap<PartId, String>> {
    if descriptions.len() < 2 {
        return Err(Error::InvalidArgument("consensus needs at least 2 clients".into()));
    }
    let mut votes: BTreeMap<PartId, BTreeMap<String, usize>> = BTreeMap::new();
    for d in descriptions {
        for (&part, claim) in d {
            *votes.entry(part).or_default().entry(normalize_claim(claim)).or_default() += 1;
        }
    }
    let n = descriptions.len();
    Ok(votes
        .into_iter()
        .filter_map(|(part, counts)| counts.into_iter().find(|(_, c)| 2 * c > n).map(|(claim, _)| (part, claim)))
        .collect())
}

/// True when a claim asserts a manipulation.
pub fn is_anomalous_claim(claim: &str) -> bool {
    [NOISE_CLAIM, BLUR_CLAIM, SEAM_CLAIM].contains(&claim)
}

#[derive(Clone, Debug)]
pub struct SynthesisInput<'a> {
    pub rois: &'a [PartId],
    pub claims: &'a BTreeMap<PartId, String>,
    pub scores: [f64; NUM_PARTS],
    pub label: Label,
}

pub trait Synthesizer: Send + Sync {
    /// A transcript, or `Ok(None)` when no consistent reasoning exists.
    fn synthesize(&self, vocab: &Vocab, input: &SynthesisInput) -> Result<Option<TranscriptSpec>, ClientError>;
}

/// Template synthesizer. Planning lists the ROIs; each ROI's evidence is its
/// surviving claim or an inconclusive note. Claims that contradict the label
/// (an anomaly on a REAL face, or nothing but clean claims on a FAKE one)
/// leave no consistent reasoning and yield `None`.
#[derive(Clone, Copy, Debug, Default)]
pub struct TemplateSynthesizer;

fn words(vocab: &Vocab, text: &str) -> Vec<TokenId> {
    text.split_whitespace().map(|w| vocab.word(w)).collect()
}

impl Synthesizer for TemplateSynthesizer {
    fn synthesize(&self, vocab: &Vocab, input: &SynthesisInput) -> Result<Option<TranscriptSpec>, ClientError> {
        let anomalous: Vec<PartId> = input.claims.iter().filter(|(_, c)| is_anomalous_claim(c)).map(|(&p, _)| p).collect();
        let consistent = match input.label {
            Label::Fake => !anomalous.is_empty(),
            Label::Real => anomalous.is_empty() && !input.claims.is_empty(),
        };
        if input.claims.is_empty() || !consistent {
            return Ok(None);
        }
        let mut planned = input.rois.to_vec();
        planned.sort();
        let parts = planned
            .iter()
            .map(|p| (*p, words(vocab, input.claims.get(p).map(String::as_str).unwrap_or(INCONCLUSIVE))))
            .collect();
        let (global, conclusion) = match input.label {
            Label::Fake => ("localized irregular high frequency energy", "examined evidence confirms manipulated region"),
            Label::Real => ("consistent spectral energy across face", "examination reveals natural camera capture"),
        };
        Ok(Some(TranscriptSpec {
            global: words(vocab, global),
            planned,
            parts,
            conclusion: words(vocab, conclusion),
            answer: input.label,
        }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AnnotationStatus {
    Annotated,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiScore {
    pub part: PartId,
    pub score: f64,
}

/// One line of the annotation output (a transcript record plus annotation fields).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: String,
    pub label: Label,
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub rois: Vec<RoiScore>,
    pub claims: BTreeMap<PartId, String>,
    pub status: AnnotationStatus,
    pub reason: Option<String>,
}

impl AnnotationRecord {
    fn failed(id: &str, label: Label, rois: Vec<RoiScore>, claims: BTreeMap<PartId, String>, reason: impl Into<String>) -> Self {
        Self {
            id: id.to_string(),
            label,
            tokens: Vec::new(),
            text: String::new(),
            rois,
            claims,
            status: AnnotationStatus::Failed,
            reason: Some(reason.into()),
        }
    }
}

/// Runs the clients and the synthesizer for one sample.
pub fn annotate(
    vocab: &Vocab,
    input: &AnnotationInput,
    bundle: &EvidenceBundle,
    clients: &[Box<dyn PerceptionClient>],
    synthesizer: &dyn Synthesizer,
    k: usize,
) -> Result<AnnotationRecord> {
    let rois = select_rois(bundle, k)?;
    let roi_scores: Vec<RoiScore> = rois.iter().map(|&p| RoiScore { part: p, score: bundle.scores[p.index()] }).collect();
    let mut descriptions = Vec::with_capacity(clients.len());
    for c in clients {
        let d = c.describe(input, &rois).map_err(|e| Error::InvalidArgument(format!("{}: {e}", c.name())))?;
        if let Some(p) = d.keys().find(|p| !rois.contains(p)) {
            return Err(Error::InvalidArgument(format!("{} described {p}, which is not an ROI", c.name())));
        }
        descriptions.push(d);
    }
    let claims = consensus_filter(&descriptions)?;
    if claims.is_empty() {
        return Ok(AnnotationRecord::failed(&input.id, input.label, roi_scores, claims, "no claim reached consensus"));
    }
    let spec = synthesizer
        .synthesize(vocab, &SynthesisInput { rois: &rois, claims: &claims, scores: bundle.scores, label: input.label })
        .map_err(|e| Error::InvalidArgument(format!("synthesizer: {e}")))?;
    let Some(spec) = spec else {
        return Ok(AnnotationRecord::failed(&input.id, input.label, roi_scores, claims, "claims contradict the label"));
    };
    let tokens = spec.serialize(vocab);
    let report = validate_format(vocab, &parse(vocab, &tokens));
    if !report.ok {
        return Ok(AnnotationRecord::failed(&input.id, input.label, roi_scores, claims, format!("template output invalid: {}", report.diagnostics.join("; "))));
    }
    Ok(AnnotationRecord {
        id: input.id.clone(),
        label: input.label,
        text: vocab.decode(&tokens),
        tokens,
        rois: roi_scores,
        claims,
        status: AnnotationStatus::Annotated,
        reason: None,
    })
}

/// Mock perception clients configured from `cfg`.
pub fn mock_clients(cfg: &AnnotationConfig, seed: u64) -> Vec<Box<dyn PerceptionClient>> {
    (0..cfg.clients as u64)
        .map(|i| Box::new(MockPerceptionClient { index: i, seed, hallucination_rate: cfg.hallucination_rate }) as Box<dyn PerceptionClient>)
        .collect()
}

/// Ids to reject, one JSON string per line (or objects with an `id` field).
pub fn load_review_file(path: &Path) -> Result<HashSet<String>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        let id = match &v {
            serde_json::Value::String(s) => s.clone(),
            serde_json::Value::Object(m) => m.get("id").and_then(|x| x.as_str()).map(str::to_string).ok_or_else(|| Error::format(path, format!("line {}: missing id", i + 1)))?,
            _ => return Err(Error::format(path, format!("line {}: expected an id", i + 1))),
        };
        out.insert(id);
    }
    Ok(out)
}

/// Applies expert review: rejected ANNOTATED records become FAILED.
pub fn apply_review(records: &mut [AnnotationRecord], rejected: &HashSet<String>) {
    for r in records.iter_mut().filter(|r| rejected.contains(&r.id) && r.status == AnnotationStatus::Annotated) {
        r.status = AnnotationStatus::Failed;
        r.reason = Some("rejected by review".into());
        r.tokens.clear();
        r.text.clear();
    }
}

/// Splits records into annotated (D1) and failed (D2) ids.
pub fn partition(records: &[AnnotationRecord]) -> (Vec<String>, Vec<String>) {
    let (d1, d2): (Vec<_>, Vec<_>) = records.iter().partition(|r| r.status == AnnotationStatus::Annotated);
    (d1.into_iter().map(|r| r.id.clone()).collect(), d2.into_iter().map(|r| r.id.clone()).collect())
}

/// Part sets of an annotated record: planned and examined.
pub fn record_parts(vocab: &Vocab, r: &AnnotationRecord) -> (BTreeSet<PartId>, BTreeSet<PartId>) {
    let t = parse(vocab, &r.tokens);
    (t.planned.clone(), t.examined_parts())
}
