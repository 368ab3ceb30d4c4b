//! Supervised fine-tuning, rejection-sampling self-training and GRPO.

pub mod grpo;
pub mod optim;
pub mod rejection;
pub mod sft;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalbench::synth::SynthSample;
use crate::evidence::{EvidenceBundle, EvidenceNodes, PartId, PartMaskSet, PooledFeatures, NUM_PARTS};
use crate::model::ForensicModel;
use crate::numerics::{ParamStore, Tape, Tensor};
use crate::transcript::Label;

pub use grpo::{compute_advantages, grpo_step, run_grpo, GrpoGroup, GrpoMetrics, GrpoState};
pub use optim::{make_optimizer, Adam, Optimizer, Sgd};
pub use rejection::{rejection_sample, RejectionOutcome, RejectionParams, RetainedSample};
pub use sft::{run_sft, SftExample, SftParams, SftReport, SftStep};

/// One labelled image with encoder features cached.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub id: String,
    pub label: Label,
    pub feats: PooledFeatures,
    /// Image and masks, kept only when encoder parameters are trained.
    pub raw: Option<(Tensor, PartMaskSet)>,
}

impl TrainItem {
    pub fn from_sample(model: &ForensicModel, s: &SynthSample, keep_raw: bool) -> Result<Self> {
        Ok(Self {
            id: s.id.clone(),
            label: s.label,
            feats: model.sample_features(s)?,
            raw: keep_raw.then(|| (s.image.clone(), s.masks.clone())),
        })
    }

    pub fn present(&self) -> [bool; NUM_PARTS] {
        std::array::from_fn(|k| self.feats.pooled[k].is_some())
    }

    pub fn is_present(&self, p: PartId) -> bool {
        self.feats.pooled[p.index()].is_some()
    }

    /// Evidence on `tape`, through the encoders when `on_tape` is set.
    pub fn evidence(&self, model: &ForensicModel, tape: &mut Tape, store: &ParamStore, on_tape: bool) -> Result<EvidenceNodes> {
        match (&self.raw, on_tape) {
            (Some((image, masks)), true) => model.evidence_nodes_on_tape(tape, store, &self.id, image, masks),
            (None, true) => Err(Error::InvalidArgument(format!("item {} has no raw image for encoder training", self.id))),
            _ => model.evidence_nodes(tape, store, &self.feats),
        }
    }

    /// Bundle under an arbitrary parameter store (e.g. a frozen reference).
    pub fn bundle(&self, model: &ForensicModel, store: &ParamStore) -> Result<EvidenceBundle> {
        let b = model.evidence.bundle(store, &self.feats)?;
        Ok(if model.config.model.zero_evidence { b.zeroed() } else { b })
    }
}

/// Caches features for a set of samples.
pub fn build_items(model: &ForensicModel, samples: &[&SynthSample], keep_raw: bool) -> Result<Vec<TrainItem>> {
    samples.iter().map(|s| TrainItem::from_sample(model, s, keep_raw)).collect()
}

/// Sample-id partition across the pipeline stages.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplits {
    pub d1: Vec<String>,
    pub d2: Vec<String>,
    pub d3: Vec<String>,
    pub d4: Vec<String>,
}

impl DatasetSplits {
    /// Checks disjointness and `D2 = D3 ⊎ D4`.
    pub fn check(&self) -> Result<()> {
        let set = |v: &[String]| v.iter().cloned().collect::<BTreeSet<_>>();
        let (d1, d2, d3, d4) = (set(&self.d1), set(&self.d2), set(&self.d3), set(&self.d4));
        if d1.len() != self.d1.len() || d2.len() != self.d2.len() || d3.len() != self.d3.len() || d4.len() != self.d4.len() {
            return Err(Error::InvalidArgument("duplicate id inside a split".into()));
        }
        if !d1.is_disjoint(&d2) {
            return Err(Error::InvalidArgument("D1 and D2 overlap".into()));
        }
        if !d3.is_disjoint(&d4) || d3.union(&d4).cloned().collect::<BTreeSet<_>>() != d2 {
            return Err(Error::InvalidArgument("D3 and D4 do not partition D2".into()));
        }
        Ok(())
    }
}
