//! Group-relative policy optimization against a frozen reference.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{make_optimizer, Optimizer};
use super::TrainItem;
use crate::config::{GrpoConfig, RewardConfig};
use crate::error::{Error, Result};
use crate::evalbench::synth::derive_seed;
use crate::model::ForensicModel;
use crate::numerics::tape::{is_clipped, kl_k3};
use crate::numerics::{Gradients, ParamStore, SurrogateTerms, Tape};
use crate::reasoner::{sequence_logprob, Generation, SamplingConfig};
use crate::rewards::{score, JudgeClient, RewardBreakdown};

pub const ADV_EPS: f64 = 1e-8;
const ROLLOUT_STREAM: u64 = 0x6e0;
const ORDER_STREAM: u64 = 0x6e1;

/// `(R_i - mean) / (std + 1e-8)` with the population standard deviation.
pub fn compute_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidArgument(format!("group of {} rewards; need at least 2", rewards.len())));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite { op: "compute_advantages".into() });
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / (std + ADV_EPS)).collect())
}

/// Rollouts for one query with everything the surrogate needs.
#[derive(Clone, Debug)]
pub struct GrpoGroup {
    pub item: usize,
    pub rollouts: Vec<Generation>,
    pub rewards: Vec<RewardBreakdown>,
    pub advantages: Vec<f64>,
    /// Sampler log-probabilities of each response token.
    pub old_logp: Vec<Vec<f64>>,
    pub ref_logp: Vec<Vec<f64>>,
}

/// One JSONL metrics row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrpoMetrics {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub clip_frac: f64,
    pub r_part_mean: f64,
    pub r_cons_mean: f64,
    pub r_acc_mean: f64,
    pub r_fmt_mean: f64,
    pub groups: usize,
    pub deferred: usize,
}

/// Samples a group and scores it; judge failures surface as `Error::Judge`.
pub fn rollout_group(
    model: &ForensicModel,
    ref_store: &ParamStore,
    items: &[TrainItem],
    item: usize,
    cfg: &GrpoConfig,
    rewards_cfg: &RewardConfig,
    judge: &dyn JudgeClient,
    seed: u64,
) -> Result<GrpoGroup> {
    let it = &items[item];
    let bundle = model.bundle(&it.feats)?;
    let ref_bundle = it.bundle(model, ref_store)?;
    let mut group = GrpoGroup { item, rollouts: Vec::new(), rewards: Vec::new(), advantages: Vec::new(), old_logp: Vec::new(), ref_logp: Vec::new() };
    for g in 0..cfg.group {
        let sc = SamplingConfig::sampled(cfg.temperature, cfg.max_len, derive_seed(seed, 0, g as u64));
        let gen = model.generate(&bundle, &sc)?;
        let r = score(&model.vocab, &gen.transcript, it.label, |p| it.is_present(p), judge, rewards_cfg)?;
        let (_, ref_lp) = sequence_logprob(&model.policy, ref_store, &model.vocab, &gen.transcript.tokens, gen.prompt_len, Some(&ref_bundle), model.mode())?;
        group.old_logp.push(gen.logprobs.clone());
        group.ref_logp.push(ref_lp);
        group.rewards.push(r);
        group.rollouts.push(gen);
    }
    group.advantages = compute_advantages(&group.rewards.iter().map(|r| r.total).collect::<Vec<_>>())?;
    Ok(group)
}

/// Surrogate gradient over a batch of groups, each rollout weighted
/// `1/(|o_i| G B)` per token. Returns the gradient, KL sum, clipped count
/// and token count.
pub fn surrogate_gradients(model: &ForensicModel, items: &[TrainItem], groups: &[GrpoGroup], cfg: &GrpoConfig) -> Result<(Gradients, f64, usize, usize)> {
    let on_tape = model.encoders_on_tape(cfg.train_encoders);
    let mut grads = Gradients::zeros_like(&model.store);
    let (mut kl, mut clipped, mut tokens) = (0.0, 0, 0);
    let b = groups.len() as f64;
    for grp in groups {
        let it = &items[grp.item];
        let gsize = grp.rollouts.len() as f64;
        for (i, gen) in grp.rollouts.iter().enumerate() {
            let n = gen.logprobs.len();
            let mut tape = Tape::new();
            let ev = it.evidence(model, &mut tape, &model.store, on_tape)?;
            let lp = model.policy.token_logprobs(&mut tape, &model.store, &model.vocab, &gen.transcript.tokens, gen.prompt_len, Some(ev), model.mode())?;
            let terms = SurrogateTerms {
                old_logp: grp.old_logp[i].clone(),
                ref_logp: grp.ref_logp[i].clone(),
                advantage: vec![grp.advantages[i]; n],
                weight: vec![1.0 / (n as f64 * gsize * b); n],
                clip: cfg.clip,
                beta: cfg.beta,
            };
            let cur = tape.value(lp).data().to_vec();
            for t in 0..n {
                kl += kl_k3(cur[t], terms.ref_logp[t]);
                clipped += is_clipped(cur[t], terms.old_logp[t], terms.advantage[t], cfg.clip) as usize;
            }
            tokens += n;
            let loss = tape.grpo_surrogate(lp, terms)?;
            grads.add_assign(&tape.backward(loss, &model.store)?);
        }
    }
    Ok((grads, kl, clipped, tokens))
}

/// Optimizer and data-order state carried across steps.
pub struct GrpoState {
    pub optimizer: Box<dyn Optimizer>,
    pub step: usize,
    pub seed: u64,
    /// Items deferred by judge failures; served before fresh ones.
    pub deferred: VecDeque<usize>,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
}

impl GrpoState {
    pub fn new(cfg: &GrpoConfig, n_items: usize, seed: u64) -> Result<Self> {
        if n_items == 0 {
            return Err(Error::InvalidArgument("GRPO needs at least one query".into()));
        }
        Ok(Self {
            optimizer: make_optimizer(cfg.optimizer, cfg.lr)?,
            step: 0,
            seed,
            deferred: VecDeque::new(),
            order: (0..n_items).collect(),
            cursor: n_items,
            epoch: 0,
        })
    }

    /// Next `batch` query indices: deferred ones first, then a reshuffled
    /// pass over all items.
    pub fn next_batch(&mut self, batch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if let Some(i) = self.deferred.pop_front() {
                out.push(i);
                continue;
            }
            if self.cursor >= self.order.len() {
                self.order.sort_unstable();
                self.order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.seed, ORDER_STREAM, self.epoch)));
                self.epoch += 1;
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// One batch: rollouts, rewards, advantages and a single optimizer step per
/// inner epoch. Queries whose judge call fails are deferred, not dropped.
pub fn grpo_step(
    model: &mut ForensicModel,
    ref_store: &ParamStore,
    items: &[TrainItem],
    batch: &[usize],
    state: &mut GrpoState,
    cfg: &GrpoConfig,
    rewards_cfg: &RewardConfig,
    judge: &dyn JudgeClient,
) -> Result<GrpoMetrics> {
    let step = state.step;
    let mut groups = Vec::with_capacity(batch.len());
    let mut deferred = 0;
    for (q, &item) in batch.iter().enumerate() {
        let seed = derive_seed(state.seed, ROLLOUT_STREAM, ((step as u64) << 20) | q as u64);
        match rollout_group(model, ref_store, items, item, cfg, rewards_cfg, judge, seed) {
            Ok(g) => groups.push(g),
            Err(Error::Judge(_)) => {
                state.deferred.push_back(item);
                deferred += 1;
            }
            Err(e) => return Err(e),
        }
    }
    let all: Vec<&RewardBreakdown> = groups.iter().flat_map(|g| &g.rewards).collect();
    let mean = |f: &dyn Fn(&RewardBreakdown) -> f64| if all.is_empty() { 0.0 } else { all.iter().map(|r| f(r)).sum::<f64>() / all.len() as f64 };
    let mut metrics = GrpoMetrics {
        step,
        mean_reward: mean(&|r| r.total),
        mean_kl: 0.0,
        clip_frac: 0.0,
        r_part_mean: mean(&|r| r.r_part.value),
        r_cons_mean: mean(&|r| r.r_cons),
        r_acc_mean: mean(&|r| r.r_acc),
        r_fmt_mean: mean(&|r| r.r_fmt),
        groups: groups.len(),
        deferred,
    };
    if !groups.is_empty() {
        let trainable = model.trainable(cfg.train_encoders);
        for epoch in 0..cfg.inner_epochs.max(1) {
            let (grads, kl, clipped, tokens) = surrogate_gradients(model, items, &groups, cfg)?;
            if !grads.is_finite() {
                return Err(Error::Diverged { step, detail: format!("non-finite GRPO gradient (inner epoch {epoch})") });
            }
            if epoch == 0 {
                metrics.mean_kl = kl / tokens as f64;
            }
            metrics.clip_frac = clipped as f64 / tokens as f64;
            state.optimizer.step(&mut model.store, &trainable, &grads)?;
        }
    }
    if !(metrics.mean_reward.is_finite() && metrics.mean_kl.is_finite()) {
        return Err(Error::Diverged { step, detail: format!("metrics {metrics:?}") });
    }
    state.step += 1;
    Ok(metrics)
}

/// Runs `cfg.steps` GRPO steps over `items`.
pub fn run_grpo(
    model: &mut ForensicModel,
    ref_store: &ParamStore,
    items: &[TrainItem],
    cfg: &GrpoConfig,
    rewards_cfg: &RewardConfig,
    judge: &dyn JudgeClient,
    seed: u64,
    on_step: &mut dyn FnMut(&GrpoMetrics),
) -> Result<Vec<GrpoMetrics>> {
    let mut state = GrpoState::new(cfg, items.len(), seed)?;
    let mut out = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let batch = state.next_batch(cfg.batch);
        let m = grpo_step(model, ref_store, items, &batch, &mut state, cfg, rewards_cfg, judge)?;
        on_step(&m);
        out.push(m);
    }
    Ok(out)
}
