//! Evidence-only judges: a keyword mock and an offline replay of recorded verdicts.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::transcript::Label;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Real,
    Fake,
    Abstain,
}

impl Verdict {
    pub fn label(self) -> Option<Label> {
        match self {
            Verdict::Real => Some(Label::Real),
            Verdict::Fake => Some(Label::Fake),
            Verdict::Abstain => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum JudgeError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("no recorded verdict for evidence hash {0}")]
    NotRecorded(String),
    #[error("bad judge response: {0}")]
    BadResponse(String),
}

impl JudgeError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, JudgeError::Transport(_))
    }
}

/// Request body sent to an external judge.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub evidence_text: String,
}

/// Response body from an external judge.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeResponse {
    pub verdict: Label,
}

impl JudgeResponse {
    pub fn parse(body: &str) -> Result<Verdict, JudgeError> {
        let r: JudgeResponse = serde_json::from_str(body).map_err(|e| JudgeError::BadResponse(e.to_string()))?;
        Ok(match r.verdict {
            Label::Real => Verdict::Real,
            Label::Fake => Verdict::Fake,
        })
    }
}

/// Predicts a label from evidence text alone.
pub trait JudgeClient: Send + Sync {
    fn verdict(&self, evidence_text: &str) -> Result<Verdict, JudgeError>;
}

pub const ANOMALY_KEYWORDS: &[&str] = &[
    "anomaly", "artifact", "irregular", "noise", "seam", "blur", "blurred", "smeared", "jagged",
    "discontinuity", "inconsistent", "unnatural", "synthetic", "manipulated", "spliced", "warped",
    "aliasing", "ringing", "grainy", "speckled", "mismatch", "tampered", "distorted", "oversmoothed",
    "abnormal", "spurious", "forged",
];

pub const CLEAN_KEYWORDS: &[&str] = &[
    "natural", "consistent", "clean", "coherent", "regular", "plausible", "intact", "normal",
    "genuine", "continuous", "organic", "faithful",
];

/// Keyword judge: FAKE on two or more anomaly keywords, otherwise REAL on two
/// or more clean keywords, otherwise ABSTAIN.
#[derive(Clone, Copy, Debug, Default)]
pub struct MockJudge;

impl MockJudge {
    pub fn judge(text: &str) -> Verdict {
        let (mut bad, mut good) = (0, 0);
        for w in text.split_whitespace() {
            if ANOMALY_KEYWORDS.contains(&w) {
                bad += 1;
            } else if CLEAN_KEYWORDS.contains(&w) {
                good += 1;
            }
        }
        if bad >= 2 {
            Verdict::Fake
        } else if good >= 2 {
            Verdict::Real
        } else {
            Verdict::Abstain
        }
    }
}

impl JudgeClient for MockJudge {
    fn verdict(&self, evidence_text: &str) -> Result<Verdict, JudgeError> {
        Ok(Self::judge(evidence_text))
    }
}

pub fn evidence_hash(evidence_text: &str) -> String {
    hex::encode(Sha256::digest(evidence_text.as_bytes()))
}

/// One recorded verdict, keyed by the SHA-256 of the evidence text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordedVerdict {
    pub hash: String,
    pub verdict: Verdict,
}

/// Deterministic offline judge backed by recorded verdicts.
#[derive(Clone, Debug, Default)]
pub struct ReplayJudge {
    table: HashMap<String, Verdict>,
}

impl ReplayJudge {
    pub fn from_records(records: impl IntoIterator<Item = RecordedVerdict>) -> Self {
        Self { table: records.into_iter().map(|r| (r.hash, r.verdict)).collect() }
    }

    pub fn load(path: &Path) -> crate::Result<Self> {
        Ok(Self::from_records(crate::transcript::read_jsonl::<RecordedVerdict>(path)?))
    }

    /// Queries `inner` once per distinct text and returns the records in input order.
    pub fn record(inner: &dyn JudgeClient, texts: &[String]) -> Result<Vec<RecordedVerdict>, JudgeError> {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        for t in texts {
            let hash = evidence_hash(t);
            if seen.insert(hash.clone()) {
                out.push(RecordedVerdict { hash, verdict: inner.verdict(t)? });
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl JudgeClient for ReplayJudge {
    fn verdict(&self, evidence_text: &str) -> Result<Verdict, JudgeError> {
        let h = evidence_hash(evidence_text);
        self.table.get(&h).copied().ok_or(JudgeError::NotRecorded(h))
    }
}
