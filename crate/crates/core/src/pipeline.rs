//! Stage drivers: annotation, supervised fine-tuning, rejection-sampling
//! self-training and GRPO, chained through checkpoint lineage.

use std::collections::{BTreeSet, HashMap, HashSet};

use crate::annotation::{annotate, apply_review, mock_clients, partition, AnnotationInput, AnnotationRecord, AnnotationStatus, TemplateSynthesizer};
use crate::error::{Error, Result};
use crate::evalbench::evaluate::{predict_features, EvalReport};
use crate::evalbench::synth::{derive_seed, SynthSample};
use crate::model::{encode_checkpoint, sha256_hex, ForensicModel, Lineage, TrainStage};
use crate::config::RunConfig;
use crate::rewards::JudgeClient;
use crate::training::{
    build_items, rejection_sample, run_grpo, run_sft, DatasetSplits, GrpoMetrics, RejectionOutcome, RejectionParams, SftExample, SftParams, SftReport, SftStep, TrainItem,
};

const STAGE_STREAM: u64 = 0x57a6e;

/// Annotation records with the D1/D2 partition.
#[derive(Clone, Debug)]
pub struct Annotated {
    pub records: Vec<AnnotationRecord>,
    pub d1: Vec<String>,
    pub d2: Vec<String>,
}

/// Annotates every training sample with the mock clients of `model.config`.
/// `items[i]` must hold the features of `samples[i]`.
pub fn annotate_samples(model: &ForensicModel, samples: &[&SynthSample], items: &[TrainItem], review: Option<&HashSet<String>>) -> Result<Annotated> {
    check_aligned(samples, items)?;
    let cfg = &model.config;
    let clients = mock_clients(&cfg.annotation, cfg.seed);
    let mut records = Vec::with_capacity(samples.len());
    for (s, it) in samples.iter().zip(items) {
        let bundle = model.bundle(&it.feats)?;
        let input = AnnotationInput { id: s.id.clone(), label: s.label, artifacts: s.artifacts.clone() };
        records.push(annotate(&model.vocab, &input, &bundle, &clients, &TemplateSynthesizer, cfg.annotation.k_roi)?);
    }
    if let Some(rejected) = review {
        apply_review(&mut records, rejected);
    }
    let (d1, d2) = partition(&records);
    Ok(Annotated { records, d1, d2 })
}

fn check_aligned(samples: &[&SynthSample], items: &[TrainItem]) -> Result<()> {
    if samples.len() != items.len() || samples.iter().zip(items).any(|(s, i)| s.id != i.id) {
        return Err(Error::InvalidArgument("samples and cached features are not aligned".into()));
    }
    Ok(())
}

fn index_of(items: &[TrainItem]) -> HashMap<&str, usize> {
    items.iter().enumerate().map(|(i, it)| (it.id.as_str(), i)).collect()
}

/// SFT examples for every annotated record.
pub fn sft_examples(records: &[AnnotationRecord], items: &[TrainItem]) -> Result<Vec<SftExample>> {
    let index = index_of(items);
    records
        .iter()
        .filter(|r| r.status == AnnotationStatus::Annotated)
        .map(|r| {
            let item = *index.get(r.id.as_str()).ok_or_else(|| Error::InvalidArgument(format!("annotation {} has no training sample", r.id)))?;
            Ok(SftExample { item, tokens: r.tokens.clone() })
        })
        .collect()
}

/// Stage 1: fits the evidence input standardization on the training
/// features, then fine-tunes on D1.
pub fn stage1(model: &mut ForensicModel, items: &[TrainItem], records: &[AnnotationRecord], on_step: &mut dyn FnMut(&SftStep)) -> Result<SftReport> {
    let examples = sft_examples(records, items)?;
    if examples.is_empty() {
        return Err(Error::InvalidArgument("D1 is empty; nothing to fine-tune on".into()));
    }
    model.fit_input_norm(&items.iter().map(|i| i.feats.clone()).collect::<Vec<_>>())?;
    let params = SftParams::from(&model.config.sft);
    let seed = derive_seed(model.config.seed, STAGE_STREAM, 1);
    run_sft(model, items, &examples, &params, seed, on_step)
}

#[derive(Clone, Debug)]
pub struct Stage2Output {
    pub rejection: RejectionOutcome,
    pub report: SftReport,
}

/// Stage 2: rejection sampling over D2, optional expert review of the kept
/// trajectories, then one fine-tuning pass over D3.
pub fn stage2(
    model: &mut ForensicModel,
    items: &[TrainItem],
    d2: &[String],
    judge: &dyn JudgeClient,
    review: Option<&BTreeSet<String>>,
    on_step: &mut dyn FnMut(&SftStep),
) -> Result<Stage2Output> {
    let index = index_of(items);
    let hard = d2
        .iter()
        .map(|id| index.get(id.as_str()).map(|&i| items[i].clone()).ok_or_else(|| Error::InvalidArgument(format!("D2 id {id} has no training sample"))))
        .collect::<Result<Vec<_>>>()?;
    let st = model.config.self_train.clone();
    let params = RejectionParams { candidates: st.candidates, temperature: st.temperature, max_len: st.max_len };
    let mut rejection = rejection_sample(model, &hard, &params, judge, &model.config.rewards, derive_seed(model.config.seed, STAGE_STREAM, 2))?;
    if let Some(r) = review {
        rejection.apply_review(r);
    }
    let examples = rejection
        .d3
        .iter()
        .map(|r| SftExample { item: index[r.id.as_str()], tokens: r.tokens.clone() })
        .collect::<Vec<_>>();
    let report = if examples.is_empty() {
        SftReport::default()
    } else {
        run_sft(model, items, &examples, &SftParams::from(&st), derive_seed(model.config.seed, STAGE_STREAM, 3), on_step)?
    };
    Ok(Stage2Output { rejection, report })
}

/// Stage 3: GRPO against a frozen copy of the current policy. Queries are
/// drawn from the whole training pool.
pub fn stage3(model: &mut ForensicModel, items: &[TrainItem], judge: &dyn JudgeClient, on_step: &mut dyn FnMut(&GrpoMetrics)) -> Result<Vec<GrpoMetrics>> {
    let ref_store = model.store.clone();
    let cfg = model.config.grpo.clone();
    let rewards = model.config.rewards.clone();
    let seed = derive_seed(model.config.seed, STAGE_STREAM, 4);
    run_grpo(model, &ref_store, items, &cfg, &rewards, judge, seed, on_step)
}

/// Serialized checkpoint with its hash.
#[derive(Clone, Debug)]
pub struct StageCheckpoint {
    pub stage: TrainStage,
    pub bytes: Vec<u8>,
    pub hash: String,
}

impl StageCheckpoint {
    pub fn new(model: &ForensicModel, stage: TrainStage, parent: Option<&StageCheckpoint>) -> Result<Self> {
        let lineage = parent.map(|p| Lineage { stage: p.stage, hash: p.hash.clone() });
        let bytes = encode_checkpoint(model, stage, lineage.as_ref())?;
        Ok(Self { stage, hash: sha256_hex(&bytes), bytes })
    }
}

/// Everything a full in-memory run produces.
#[derive(Debug)]
pub struct PipelineRun {
    pub model: ForensicModel,
    pub annotated: Annotated,
    pub splits: DatasetSplits,
    pub stage1: SftReport,
    pub stage2: Stage2Output,
    pub grpo: Vec<GrpoMetrics>,
    /// Init, Stage 1, Stage 2 and Stage 3 checkpoints, each naming its parent.
    pub checkpoints: Vec<StageCheckpoint>,
}

/// Runs annotation and all three stages. `items`, when given, must be the
/// cached features of `samples` under a model built from `cfg` (encoder
/// weights depend only on the seed and encoder settings).
pub fn run_pipeline(cfg: &RunConfig, samples: &[&SynthSample], items: Option<Vec<TrainItem>>, judge: &dyn JudgeClient) -> Result<PipelineRun> {
    let mut model = ForensicModel::new(cfg)?;
    let items = match items {
        Some(i) => i,
        None => build_items(&model, samples, false)?,
    };
    let annotated = annotate_samples(&model, samples, &items, None)?;
    let init = StageCheckpoint::new(&model, TrainStage::Init, None)?;
    let stage1 = stage1(&mut model, &items, &annotated.records, &mut |_| {})?;
    let sft = StageCheckpoint::new(&model, TrainStage::Sft, Some(&init))?;
    let stage2 = stage2(&mut model, &items, &annotated.d2, judge, None, &mut |_| {})?;
    let st = StageCheckpoint::new(&model, TrainStage::SelfTrain, Some(&sft))?;
    let grpo = stage3(&mut model, &items, judge, &mut |_| {})?;
    let rl = StageCheckpoint::new(&model, TrainStage::Grpo, Some(&st))?;
    let splits = DatasetSplits {
        d1: annotated.d1.clone(),
        d2: annotated.d2.clone(),
        d3: stage2.rejection.d3.iter().map(|r| r.id.clone()).collect(),
        d4: stage2.rejection.d4.clone(),
    };
    splits.check()?;
    Ok(PipelineRun { model, annotated, splits, stage1, stage2, grpo, checkpoints: vec![init, sft, st, rl] })
}

/// Greedy evaluation of cached test features, one entry per level.
pub fn evaluate_levels(model: &ForensicModel, name: &str, levels: &[(u8, &[TrainItem])]) -> Result<EvalReport> {
    let max_len = model.config.grpo.max_len;
    let per_level = levels
        .iter()
        .map(|(l, items)| Ok((*l, items.iter().map(|it| predict_features(model, &it.id, it.label, &it.feats, max_len)).collect::<Result<Vec<_>>>()?)))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::new(name, &per_level)
}

/// Mean total reward over the first and last `window` GRPO steps.
pub fn reward_windows(metrics: &[GrpoMetrics], window: usize) -> Option<(f64, f64)> {
    if window == 0 || metrics.len() < window {
        return None;
    }
    let mean = |m: &[GrpoMetrics]| m.iter().map(|x| x.mean_reward).sum::<f64>() / m.len() as f64;
    Some((mean(&metrics[..window]), mean(&metrics[metrics.len() - window..])))
}
