//! Stage-2 candidate generation and filtering.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::TrainItem;
use crate::config::RewardConfig;
use crate::error::{Error, Result};
use crate::evalbench::synth::derive_seed;
use crate::model::ForensicModel;
use crate::reasoner::SamplingConfig;
use crate::rewards::{score, JudgeClient, RewardBreakdown};
use crate::transcript::{validate_format, TokenId};

const CANDIDATE_STREAM: u64 = 0x2e1;

/// Best valid, correct candidate kept for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetainedSample {
    pub id: String,
    pub tokens: Vec<TokenId>,
    pub reward: RewardBreakdown,
    /// Index of the winning candidate.
    pub candidate: usize,
    /// Candidates passing both filters.
    pub passing: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RejectionOutcome {
    pub d3: Vec<RetainedSample>,
    pub d4: Vec<String>,
}

impl RejectionOutcome {
    /// Moves reviewer-rejected trajectories from D3 into D4.
    pub fn apply_review(&mut self, rejected: &BTreeSet<String>) {
        let (keep, drop): (Vec<_>, Vec<_>) = std::mem::take(&mut self.d3).into_iter().partition(|r| !rejected.contains(&r.id));
        self.d3 = keep;
        self.d4.extend(drop.into_iter().map(|r| r.id));
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RejectionParams {
    pub candidates: usize,
    pub temperature: f64,
    pub max_len: usize,
}

/// Samples `candidates` responses per item and keeps the highest-reward one
/// that is well formed and correct (ties go to the earliest candidate).
pub fn rejection_sample(
    model: &ForensicModel,
    items: &[TrainItem],
    params: &RejectionParams,
    judge: &dyn JudgeClient,
    rewards: &RewardConfig,
    seed: u64,
) -> Result<RejectionOutcome> {
    if params.candidates == 0 {
        return Err(Error::InvalidArgument("rejection sampling needs at least one candidate".into()));
    }
    let mut out = RejectionOutcome::default();
    for (i, item) in items.iter().enumerate() {
        let bundle = model.bundle(&item.feats)?;
        let item_seed = derive_seed(seed, CANDIDATE_STREAM, i as u64);
        let mut best: Option<RetainedSample> = None;
        let mut passing = 0;
        for c in 0..params.candidates {
            let cfg = SamplingConfig::sampled(params.temperature, params.max_len, derive_seed(item_seed, 0, c as u64));
            let g = model.generate(&bundle, &cfg)?;
            let t = &g.transcript;
            if !validate_format(&model.vocab, t).ok {
                continue;
            }
            let r = score(&model.vocab, t, item.label, |p| item.is_present(p), judge, rewards)?;
            if r.r_acc != 1.0 {
                continue;
            }
            passing += 1;
            if best.as_ref().is_none_or(|b| r.total > b.reward.total) {
                best = Some(RetainedSample { id: item.id.clone(), tokens: t.tokens.clone(), reward: r, candidate: c, passing: 0 });
            }
        }
        match best {
            Some(mut b) => {
                b.passing = passing;
                out.d3.push(b);
            }
            None => out.d4.push(item.id.clone()),
        }
    }
    Ok(out)
}
