//! Transcript rewards: accuracy, format, part grounding, evidence consistency
//! and their weighted total.

mod judge;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use judge::{
    evidence_hash, JudgeClient, JudgeError, JudgeRequest, JudgeResponse, MockJudge, RecordedVerdict, ReplayJudge, Verdict,
    ANOMALY_KEYWORDS, CLEAN_KEYWORDS,
};

use crate::config::RewardConfig;
use crate::evidence::PartId;
use crate::transcript::{validate_format, Label, Transcript, Vocab};

/// 1 iff the parsed answer equals the label.
pub fn r_acc(t: &Transcript, label: Label) -> f64 {
    if t.answer.label() == Some(label) {
        1.0
    } else {
        0.0
    }
}

/// 1 iff the transcript passes the strict format check.
pub fn r_fmt(vocab: &Vocab, t: &Transcript) -> f64 {
    if validate_format(vocab, t).ok {
        1.0
    } else {
        0.0
    }
}

/// F1 between planned and examined part sets; 0 when both are empty.
pub fn f1(planned: &BTreeSet<PartId>, examined: &BTreeSet<PartId>) -> f64 {
    // harmonic mean of tp/|examined| and tp/|planned|, reduced to one division
    let tp = planned.intersection(examined).count();
    if tp == 0 {
        return 0.0;
    }
    (2 * tp) as f64 / (planned.len() + examined.len()) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartReward {
    pub f1: f64,
    pub existence_rate: f64,
    pub quantity_penalty: f64,
    pub value: f64,
}

/// Part-grounding reward; `present(p)` says whether part `p` has a non-empty mask.
pub fn r_part(planned: &BTreeSet<PartId>, examined: &BTreeSet<PartId>, present: impl Fn(PartId) -> bool, cfg: &RewardConfig) -> PartReward {
    let f1 = f1(planned, examined);
    let existence_rate = if planned.is_empty() {
        0.0
    } else {
        planned.iter().filter(|&&p| present(p)).count() as f64 / planned.len() as f64
    };
    let quantity_penalty = cfg.quantity_slope * planned.len().saturating_sub(cfg.quantity_free) as f64;
    let value = (cfg.f1_weight * f1 + cfg.existence_weight * existence_rate - quantity_penalty).clamp(0.0, 1.0);
    PartReward { f1, existence_rate, quantity_penalty, value }
}

/// 1 iff the answer is correct and an evidence-only judge agrees with it.
///
/// The judge sees global evidence, planning and part evidence; it is not
/// consulted when the answer is wrong or malformed, since the product is 0.
pub fn r_cons(vocab: &Vocab, t: &Transcript, label: Label, judge: &dyn JudgeClient) -> Result<f64, JudgeError> {
    let Some(pred) = t.answer.label() else {
        return Ok(0.0);
    };
    if pred != label {
        return Ok(0.0);
    }
    Ok(cons_indicator(judge.verdict(&t.evidence_text(vocab))?, pred, label))
}

/// `I(verdict = ŷ) · I(ŷ = y)`; an abstaining judge never agrees.
pub fn cons_indicator(verdict: Verdict, pred: Label, label: Label) -> f64 {
    if verdict.label() == Some(pred) && pred == label {
        1.0
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_acc: f64,
    pub r_fmt: f64,
    pub r_part: PartReward,
    pub r_cons: f64,
    pub total: f64,
}

pub fn aggregate(r_acc: f64, r_part: PartReward, r_cons: f64, r_fmt: f64, cfg: &RewardConfig) -> RewardBreakdown {
    let total = r_acc + cfg.lambda_part * r_part.value + cfg.lambda_cons * r_cons + cfg.lambda_fmt * r_fmt;
    RewardBreakdown { r_acc, r_fmt, r_part, r_cons, total }
}

/// Full reward for one transcript.
pub fn score(
    vocab: &Vocab,
    t: &Transcript,
    label: Label,
    present: impl Fn(PartId) -> bool,
    judge: &dyn JudgeClient,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown, JudgeError> {
    let cons = r_cons(vocab, t, label, judge)?;
    Ok(aggregate(r_acc(t, label), r_part(&t.planned, &t.examined_parts(), present, cfg), cons, r_fmt(vocab, t), cfg))
}
