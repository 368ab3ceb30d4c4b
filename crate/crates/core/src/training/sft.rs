//! Teacher-forced cross-entropy on response tokens.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::make_optimizer;
use super::TrainItem;
use crate::config::{OptimizerKind, SelfTrainConfig, SftConfig};
use crate::error::{Error, Result};
use crate::evalbench::synth::derive_seed;
use crate::model::ForensicModel;
use crate::numerics::{Gradients, NodeId, ParamStore, Tape};
use crate::transcript::{parse, validate_format, TokenId};

const SHUFFLE_STREAM: u64 = 0x5f7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SftParams {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub optimizer: OptimizerKind,
    pub train_encoders: bool,
}

impl From<&SftConfig> for SftParams {
    fn from(c: &SftConfig) -> Self {
        Self { epochs: c.epochs, lr: c.lr, batch: c.batch, optimizer: c.optimizer, train_encoders: c.train_encoders }
    }
}

impl From<&SelfTrainConfig> for SftParams {
    fn from(c: &SelfTrainConfig) -> Self {
        Self { epochs: c.epochs, lr: c.lr, batch: c.batch, optimizer: c.optimizer, train_encoders: false }
    }
}

/// Full token sequence (prompt included) for the item at `item`.
#[derive(Clone, Debug, PartialEq)]
pub struct SftExample {
    pub item: usize,
    pub tokens: Vec<TokenId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftStep {
    pub step: usize,
    pub epoch: usize,
    /// Mean per-token loss over the batch.
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SftReport {
    pub steps: Vec<SftStep>,
    /// Mean step loss per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Mean negative log-likelihood of the response tokens of one example.
pub fn example_loss(model: &ForensicModel, store: &ParamStore, tape: &mut Tape, item: &TrainItem, tokens: &[TokenId], on_tape: bool) -> Result<NodeId> {
    let start = model.vocab.prompt().len();
    let ev = item.evidence(model, tape, store, on_tape)?;
    let lp = model.policy.token_logprobs(tape, store, &model.vocab, tokens, start, Some(ev), model.mode())?;
    let n = tokens.len() - start;
    tape.weighted_sum(lp, &vec![-1.0 / n as f64; n])
}

/// Mean example loss under the current parameters.
pub fn mean_loss(model: &ForensicModel, items: &[TrainItem], examples: &[SftExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("no examples".into()));
    }
    let mut total = 0.0;
    for ex in examples {
        let mut tape = Tape::new();
        let loss = example_loss(model, &model.store, &mut tape, &items[ex.item], &ex.tokens, false)?;
        total += tape.value(loss).data()[0];
    }
    Ok(total / examples.len() as f64)
}

fn check_examples(model: &ForensicModel, items: &[TrainItem], examples: &[SftExample]) -> Result<()> {
    for ex in examples {
        let item = items.get(ex.item).ok_or_else(|| Error::InvalidArgument(format!("example refers to missing item {}", ex.item)))?;
        if !validate_format(&model.vocab, &parse(&model.vocab, &ex.tokens)).ok {
            return Err(Error::InvalidArgument(format!("training transcript for {} is malformed", item.id)));
        }
    }
    Ok(())
}

/// Minimizes response-token cross-entropy; `on_step` sees every logged step.
pub fn run_sft(
    model: &mut ForensicModel,
    items: &[TrainItem],
    examples: &[SftExample],
    params: &SftParams,
    seed: u64,
    on_step: &mut dyn FnMut(&SftStep),
) -> Result<SftReport> {
    if params.batch == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    check_examples(model, items, examples)?;
    let trainable = model.trainable(params.train_encoders);
    let on_tape = model.encoders_on_tape(params.train_encoders);
    let mut opt = make_optimizer(params.optimizer, params.lr)?;
    let mut report = SftReport::default();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0;
    for epoch in 0..params.epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, SHUFFLE_STREAM, epoch as u64)));
        let mut epoch_total = 0.0;
        let mut epoch_steps = 0;
        for chunk in order.chunks(params.batch) {
            let mut grads = Gradients::zeros_like(&model.store);
            let mut batch_loss = 0.0;
            for &i in chunk {
                let ex = &examples[i];
                let item = &items[ex.item];
                let mut tape = Tape::new();
                let loss = example_loss(model, &model.store, &mut tape, item, &ex.tokens, on_tape)?;
                let value = tape.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(Error::Diverged { step, detail: format!("loss {value} on {} (epoch {epoch})", item.id) });
                }
                batch_loss += value;
                grads.add_assign(&tape.backward(loss, &model.store)?);
            }
            let n = chunk.len() as f64;
            grads.scale(1.0 / n);
            if !grads.is_finite() {
                return Err(Error::Diverged { step, detail: "non-finite gradient".into() });
            }
            opt.step(&mut model.store, &trainable, &grads)?;
            let entry = SftStep { step, epoch, loss: batch_loss / n };
            on_step(&entry);
            epoch_total += entry.loss;
            epoch_steps += 1;
            report.steps.push(entry);
            step += 1;
        }
        report.epoch_loss.push(if epoch_steps > 0 { epoch_total / epoch_steps as f64 } else { f64::NAN });
    }
    Ok(report)
}
