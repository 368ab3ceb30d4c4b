//! `pgr`: data generation, annotation, the three training stages,
//! evaluation, reward scoring and ELO bookkeeping.

mod config;
mod error;

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use pgr_core::annotation::{load_review_file, AnnotationRecord};
use pgr_core::config::{OptimizerKind, RunConfig};
use pgr_core::evalbench::evaluate::{predict_samples, robustness_row, EvalReport, RobustnessReport};
use pgr_core::evalbench::perturb::standard_grid;
use pgr_core::evalbench::synth::{gen_dataset, load_dataset, save_dataset, Dataset};
use pgr_core::evalbench::{EloTable, Game};
use pgr_core::model::{load_checkpoint, save_checkpoint, Checkpoint, ForensicModel, TrainStage};
use pgr_core::pipeline::{annotate_samples, stage1, stage2, stage3};
use pgr_core::rewards::{score, JudgeClient, MockJudge, ReplayJudge, RewardBreakdown};
use pgr_core::training::{build_items, DatasetSplits, TrainItem};
use pgr_core::transcript::{parse, read_jsonl, write_jsonl, Label, TranscriptRecord};

use crate::config::{check_compatible, resolve, Common};
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "pgr", version, about = "Part-grounded forensic reasoning pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic train set and the five evaluation levels.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        train_samples: Option<usize>,
        #[arg(long)]
        test_per_level: Option<usize>,
        #[arg(long)]
        image_size: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Build the initial model and annotate every training sample (D1/D2).
    Annotate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        /// Ids rejected by expert review, one per line.
        #[arg(long)]
        review: Option<PathBuf>,
        #[arg(long)]
        k_roi: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Stage 1: supervised fine-tuning on D1.
    Sft {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long, value_parser = parse_optimizer)]
        optimizer: Option<OptimizerKind>,
        #[command(flatten)]
        common: Common,
    },
    /// Stage 2: rejection sampling on D2, then fine-tuning on D3.
    SelfTrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        candidates: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Ids of retained trajectories rejected by expert review.
        #[arg(long)]
        review: Option<PathBuf>,
        /// `mock` or `replay:<verdicts.jsonl>`.
        #[arg(long, default_value = "mock")]
        judge: String,
        #[command(flatten)]
        common: Common,
    },
    /// Stage 3: GRPO against the Stage 2 policy.
    Grpo {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        group: Option<usize>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        clip: Option<f64>,
        #[arg(long, default_value = "mock")]
        judge: String,
        #[command(flatten)]
        common: Common,
    },
    /// Greedy evaluation per level; writes the report JSON.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated levels.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        levels: Vec<u8>,
        #[arg(long, default_value = "model")]
        name: String,
    },
    /// Accuracy under JPEG quality 90/70/60 and Gaussian blur σ 1/2/4.
    PerturbEval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        levels: Vec<u8>,
        #[arg(long, default_value = "model")]
        name: String,
    },
    /// Reward breakdown for external transcripts.
    Score {
        #[arg(long)]
        transcripts: PathBuf,
        /// Dataset directory holding the part masks.
        #[arg(long)]
        masks: PathBuf,
        #[arg(long, default_value = "mock")]
        judge: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Replay a game log into an ELO table.
    Elo {
        #[arg(long)]
        games: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_optimizer(s: &str) -> std::result::Result<OptimizerKind, String> {
    match s {
        "sgd" => Ok(OptimizerKind::Sgd),
        "adam" => Ok(OptimizerKind::Adam),
        _ => Err(format!("unknown optimizer {s:?} (sgd, adam)")),
    }
}

fn make_judge(spec: &str) -> Result<Box<dyn JudgeClient>> {
    match spec.split_once(':') {
        None if spec == "mock" => Ok(Box::new(MockJudge)),
        Some(("replay", path)) => Ok(Box::new(ReplayJudge::load(Path::new(path))?)),
        _ => Err(CliError::validation(format!("unknown judge {spec:?}; use mock or replay:<file>"))),
    }
}

fn require_dir(p: &Path, what: &str) -> Result<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(CliError::validation(format!("{what} {} is not a directory", p.display())))
    }
}

fn load_data(dir: &Path) -> Result<Dataset> {
    require_dir(dir, "dataset")?;
    Ok(load_dataset(dir)?)
}

fn train_items(model: &ForensicModel, data: &Dataset) -> Result<Vec<TrainItem>> {
    let samples: Vec<_> = data.train.iter().collect();
    Ok(build_items(model, &samples, false)?)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

/// Resolved config written next to a command's outputs.
fn config_path(dir: &Path, command: &str) -> PathBuf {
    dir.join(format!("{command}.config.toml"))
}

fn out_dir(file: &Path) -> PathBuf {
    file.parent().filter(|d| !d.as_os_str().is_empty()).map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

/// Loads the checkpoint a stage starts from and applies the resolved config.
fn resume(run: &Path, parent_file: &str, stage: TrainStage, cfg: &RunConfig) -> Result<Checkpoint> {
    let path = run.join(parent_file);
    if !path.exists() {
        return Err(CliError::validation(format!("{} not found; run the previous stage first", path.display())));
    }
    let mut ck = load_checkpoint(&path)?;
    ck.require_parent_of(stage)?;
    check_compatible(cfg, &ck.model.config)?;
    ck.model.config = cfg.clone();
    Ok(ck)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, train_samples, test_per_level, image_size, common } => {
            let cfg = resolve(&[], &common, |c| {
                train_samples.map(|v| c.data.train_samples = v);
                test_per_level.map(|v| c.data.test_per_level = v);
                image_size.map(|v| c.data.image_size = v);
            })?;
            let ds = gen_dataset(&cfg.data, cfg.seed)?;
            save_dataset(&out, &ds)?;
            cfg.save(&out.join("config.toml"))?;
            println!("wrote {} train and {} test samples to {}", ds.train.len(), ds.levels.iter().map(Vec::len).sum::<usize>(), out.display());
        }
        Command::Annotate { data, run, review, k_roi, common } => {
            let cfg = resolve(&[data.join("config.toml")], &common, |c| {
                k_roi.map(|v| c.annotation.k_roi = v);
            })?;
            let ds = load_data(&data)?;
            let rejected = review.as_deref().map(load_review_file).transpose()?;
            let model = ForensicModel::new(&cfg)?;
            let items = train_items(&model, &ds)?;
            let samples: Vec<_> = ds.train.iter().collect();
            let ann = annotate_samples(&model, &samples, &items, rejected.as_ref())?;
            std::fs::create_dir_all(&run)?;
            cfg.save(&run.join("config.toml"))?;
            cfg.save(&config_path(&run, "annotate"))?;
            write_jsonl(&run.join("annotations.jsonl"), &ann.records)?;
            write_json(&run.join("splits.json"), &DatasetSplits { d1: ann.d1.clone(), d2: ann.d2.clone(), ..DatasetSplits::default() })?;
            save_checkpoint(&run.join("init.ckpt"), &model, TrainStage::Init, None)?;
            println!("annotated {}: D1 {} D2 {}", ann.records.len(), ann.d1.len(), ann.d2.len());
        }
        Command::Sft { data, run, epochs, lr, batch, optimizer, common } => {
            let cfg = resolve(&[run.join("config.toml")], &common, |c| {
                epochs.map(|v| c.sft.epochs = v);
                lr.map(|v| c.sft.lr = v);
                batch.map(|v| c.sft.batch = v);
                optimizer.map(|v| c.sft.optimizer = v);
            })?;
            let ck = resume(&run, "init.ckpt", TrainStage::Sft, &cfg)?;
            let lineage = ck.lineage();
            let mut model = ck.model;
            let ds = load_data(&data)?;
            let records: Vec<AnnotationRecord> = read_jsonl(&run.join("annotations.jsonl"))?;
            let items = train_items(&model, &ds)?;
            let mut log = Vec::new();
            let report = stage1(&mut model, &items, &records, &mut |s| log.push(s.clone()))?;
            write_jsonl(&run.join("sft_log.jsonl"), &log)?;
            cfg.save(&config_path(&run, "sft"))?;
            let hash = save_checkpoint(&run.join("sft.ckpt"), &model, TrainStage::Sft, Some(&lineage))?;
            println!("sft: {} steps, epoch loss {:?}, checkpoint {hash}", report.steps.len(), report.epoch_loss);
        }
        Command::SelfTrain { data, run, candidates, epochs, lr, review, judge, common } => {
            let cfg = resolve(&[run.join("config.toml")], &common, |c| {
                candidates.map(|v| c.self_train.candidates = v);
                epochs.map(|v| c.self_train.epochs = v);
                lr.map(|v| c.self_train.lr = v);
            })?;
            let judge = make_judge(&judge)?;
            let ck = resume(&run, "sft.ckpt", TrainStage::SelfTrain, &cfg)?;
            let lineage = ck.lineage();
            let mut model = ck.model;
            let ds = load_data(&data)?;
            let mut splits: DatasetSplits = read_json(&run.join("splits.json"))?;
            let rejected: Option<BTreeSet<String>> = review.as_deref().map(load_review_file).transpose()?.map(|s| s.into_iter().collect());
            let items = train_items(&model, &ds)?;
            let mut log = Vec::new();
            let out = stage2(&mut model, &items, &splits.d2, judge.as_ref(), rejected.as_ref(), &mut |s| log.push(s.clone()))?;
            splits.d3 = out.rejection.d3.iter().map(|r| r.id.clone()).collect();
            splits.d4 = out.rejection.d4.clone();
            splits.check()?;
            write_json(&run.join("splits.json"), &splits)?;
            write_jsonl(&run.join("d3.jsonl"), &out.rejection.d3)?;
            write_jsonl(&run.join("self_train_log.jsonl"), &log)?;
            cfg.save(&config_path(&run, "self-train"))?;
            let hash = save_checkpoint(&run.join("self_train.ckpt"), &model, TrainStage::SelfTrain, Some(&lineage))?;
            println!("self-train: D3 {} D4 {}, checkpoint {hash}", splits.d3.len(), splits.d4.len());
        }
        Command::Grpo { data, run, steps, lr, batch, group, beta, clip, judge, common } => {
            let cfg = resolve(&[run.join("config.toml")], &common, |c| {
                steps.map(|v| c.grpo.steps = v);
                lr.map(|v| c.grpo.lr = v);
                batch.map(|v| c.grpo.batch = v);
                group.map(|v| c.grpo.group = v);
                beta.map(|v| c.grpo.beta = v);
                clip.map(|v| c.grpo.clip = v);
            })?;
            let judge = make_judge(&judge)?;
            let ck = resume(&run, "self_train.ckpt", TrainStage::Grpo, &cfg)?;
            let lineage = ck.lineage();
            let mut model = ck.model;
            let ds = load_data(&data)?;
            let items = train_items(&model, &ds)?;
            let metrics = stage3(&mut model, &items, judge.as_ref(), &mut |m| {
                if m.step % 25 == 0 {
                    eprintln!("step {} reward {:.3} kl {:.4} clip {:.3}", m.step, m.mean_reward, m.mean_kl, m.clip_frac);
                }
            })?;
            write_jsonl(&run.join("grpo_metrics.jsonl"), &metrics)?;
            cfg.save(&config_path(&run, "grpo"))?;
            let hash = save_checkpoint(&run.join("grpo.ckpt"), &model, TrainStage::Grpo, Some(&lineage))?;
            println!("grpo: {} steps, checkpoint {hash}", metrics.len());
        }
        Command::Eval { data, ckpt, out, levels, name } => {
            let model = load_checkpoint(&ckpt)?.model;
            let ds = load_data(&data)?;
            let max_len = model.config.grpo.max_len;
            let per_level = levels
                .iter()
                .map(|&l| {
                    check_level(l)?;
                    Ok((l, predict_samples(&model, ds.level(l), None, max_len)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let report = EvalReport::new(name, &per_level)?;
            write_json(&out, &report)?;
            model.config.save(&config_path(&out_dir(&out), "eval"))?;
            for l in &report.levels {
                println!("L{} {:<20} acc {:.3} malformed {}", l.level, l.name, l.metrics.accuracy, l.metrics.malformed);
            }
            println!("overall acc {:.3}", report.overall.accuracy);
        }
        Command::PerturbEval { data, ckpt, out, levels, name } => {
            let model = load_checkpoint(&ckpt)?.model;
            let ds = load_data(&data)?;
            let mut samples = Vec::new();
            for &l in &levels {
                check_level(l)?;
                samples.extend(ds.level(l).iter().cloned());
            }
            let row = robustness_row(&model, &name, &samples, &standard_grid(), model.config.grpo.max_len)?;
            let report = RobustnessReport { rows: vec![row] };
            write_json(&out, &report)?;
            model.config.save(&config_path(&out_dir(&out), "perturb-eval"))?;
            print!("{}", report.to_markdown());
        }
        Command::Score { transcripts, masks, judge, out, common } => {
            let cfg = resolve(&[], &common, |_| {})?;
            let judge = make_judge(&judge)?;
            let ds = load_data(&masks)?;
            let by_id: HashMap<&str, &pgr_core::evalbench::SynthSample> = ds.all().map(|s| (s.id.as_str(), s)).collect();
            let records: Vec<TranscriptRecord> = read_jsonl(&transcripts)?;
            let vocab = pgr_core::transcript::Vocab::new();
            let mut rows = Vec::with_capacity(records.len());
            for r in &records {
                r.check(&vocab)?;
                let s = by_id.get(r.id.as_str()).ok_or_else(|| CliError::validation(format!("transcript {} has no sample in {}", r.id, masks.display())))?;
                let t = parse(&vocab, &r.tokens);
                let reward = score(&vocab, &t, r.label, |p| s.masks.present(p), judge.as_ref(), &cfg.rewards).map_err(pgr_core::Error::from)?;
                rows.push(ScoreRow { id: r.id.clone(), label: r.label, reward });
            }
            write_jsonl(&out, &rows)?;
            cfg.save(&config_path(&out_dir(&out), "score"))?;
            println!("scored {} transcripts", rows.len());
        }
        Command::Elo { games, out } => {
            let games: Vec<Game> = read_jsonl(&games)?;
            let table = EloTable::play_all(&games)?;
            write_json(&out, &table)?;
            for (name, r) in &table.ratings {
                println!("{name} {r:.1}");
            }
        }
    }
    Ok(())
}

fn check_level(l: u8) -> Result<()> {
    if (1..=5).contains(&l) {
        Ok(())
    } else {
        Err(CliError::validation(format!("level {l} outside 1..=5")))
    }
}

#[derive(Serialize)]
struct ScoreRow {
    id: String,
    label: Label,
    #[serde(flatten)]
    reward: RewardBreakdown,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
