//! Greedy-decoding evaluation: per-level accuracy, per-class precision and
//! recall, and the perturbation sweep.

use serde::{Deserialize, Serialize};

use super::perturb::Perturbation;
use super::synth::{level_name, SynthSample};
use crate::error::{Error, Result};
use crate::evidence::PooledFeatures;
use crate::model::ForensicModel;
use crate::reasoner::SamplingConfig;
use crate::transcript::{validate_format, Answer, Label};

/// Decoded answer for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub label: Label,
    pub answer: Answer,
    /// Transcript passed the strict format check.
    pub well_formed: bool,
}

impl Prediction {
    pub fn correct(&self) -> bool {
        self.answer.label() == Some(self.label)
    }
}

/// Counts by true label (rows) and answer (columns).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub real_as_real: usize,
    pub real_as_fake: usize,
    pub real_malformed: usize,
    pub fake_as_real: usize,
    pub fake_as_fake: usize,
    pub fake_malformed: usize,
}

impl Confusion {
    pub fn add(&mut self, label: Label, answer: Answer) {
        let cell = match (label, answer) {
            (Label::Real, Answer::Real) => &mut self.real_as_real,
            (Label::Real, Answer::Fake) => &mut self.real_as_fake,
            (Label::Real, Answer::Malformed) => &mut self.real_malformed,
            (Label::Fake, Answer::Real) => &mut self.fake_as_real,
            (Label::Fake, Answer::Fake) => &mut self.fake_as_fake,
            (Label::Fake, Answer::Malformed) => &mut self.fake_malformed,
        };
        *cell += 1;
    }

    fn hits(&self, c: Label) -> usize {
        match c {
            Label::Real => self.real_as_real,
            Label::Fake => self.fake_as_fake,
        }
    }

    fn predicted(&self, c: Label) -> usize {
        match c {
            Label::Real => self.real_as_real + self.fake_as_real,
            Label::Fake => self.real_as_fake + self.fake_as_fake,
        }
    }

    fn support(&self, c: Label) -> usize {
        match c {
            Label::Real => self.real_as_real + self.real_as_fake + self.real_malformed,
            Label::Fake => self.fake_as_real + self.fake_as_fake + self.fake_malformed,
        }
    }

    /// `None` when the class was never predicted.
    pub fn precision(&self, c: Label) -> Option<f64> {
        let p = self.predicted(c);
        (p > 0).then(|| self.hits(c) as f64 / p as f64)
    }

    /// `None` when the class has no samples. Malformed answers count as misses.
    pub fn recall(&self, c: Label) -> Option<f64> {
        let s = self.support(c);
        (s > 0).then(|| self.hits(c) as f64 / s as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub correct: usize,
    /// Mean answer accuracy; MALFORMED answers score 0.
    pub accuracy: f64,
    /// Answers that could not be parsed.
    pub malformed: usize,
    /// Transcripts failing the strict format check (any answer).
    pub format_invalid: usize,
    pub real: ClassMetrics,
    pub fake: ClassMetrics,
    pub confusion: Confusion,
}

impl Metrics {
    pub fn from_predictions(preds: &[Prediction]) -> Result<Self> {
        if preds.is_empty() {
            return Err(Error::InvalidArgument("no predictions to summarize".into()));
        }
        let mut confusion = Confusion::default();
        for p in preds {
            confusion.add(p.label, p.answer);
        }
        let correct = preds.iter().filter(|p| p.correct()).count();
        let class = |c| ClassMetrics { precision: confusion.precision(c), recall: confusion.recall(c), support: confusion.support(c) };
        Ok(Self {
            n: preds.len(),
            correct,
            accuracy: correct as f64 / preds.len() as f64,
            malformed: preds.iter().filter(|p| p.answer == Answer::Malformed).count(),
            format_invalid: preds.iter().filter(|p| !p.well_formed).count(),
            real: class(Label::Real),
            fake: class(Label::Fake),
            confusion,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub level: u8,
    pub name: String,
    #[serde(flatten)]
    pub metrics: Metrics,
}

/// Evaluation JSON written by `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub levels: Vec<LevelReport>,
    pub overall: Metrics,
}

impl EvalReport {
    /// Builds the report from per-level predictions.
    pub fn new(model: impl Into<String>, per_level: &[(u8, Vec<Prediction>)]) -> Result<Self> {
        let levels = per_level
            .iter()
            .map(|(l, p)| Ok(LevelReport { level: *l, name: level_name(*l)?.to_string(), metrics: Metrics::from_predictions(p)? }))
            .collect::<Result<Vec<_>>>()?;
        let all: Vec<Prediction> = per_level.iter().flat_map(|(_, p)| p.iter().cloned()).collect();
        Ok(Self { model: model.into(), levels, overall: Metrics::from_predictions(&all)? })
    }

    pub fn level(&self, level: u8) -> Option<&LevelReport> {
        self.levels.iter().find(|r| r.level == level)
    }
}

/// Greedy decode from precomputed features.
pub fn predict_features(model: &ForensicModel, id: &str, label: Label, feats: &PooledFeatures, max_len: usize) -> Result<Prediction> {
    let bundle = model.bundle(feats)?;
    let g = model.generate(&bundle, &SamplingConfig::greedy(max_len))?;
    Ok(Prediction {
        id: id.to_string(),
        label,
        answer: g.transcript.answer,
        well_formed: validate_format(&model.vocab, &g.transcript).ok,
    })
}

/// Greedy decode of every sample, optionally after a perturbation.
pub fn predict_samples(model: &ForensicModel, samples: &[SynthSample], perturbation: Option<Perturbation>, max_len: usize) -> Result<Vec<Prediction>> {
    samples
        .iter()
        .map(|s| {
            let feats = match perturbation {
                None => model.sample_features(s)?,
                Some(p) => model.features(&s.id, &p.apply(&s.image)?, &s.masks)?,
            };
            predict_features(model, &s.id, s.label, &feats, max_len)
        })
        .collect()
}

/// Accuracy under one robustness condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub condition: Perturbation,
    pub name: String,
    pub accuracy: f64,
    pub malformed: usize,
}

/// One method's row: unperturbed accuracy, then JPEG and blur columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub method: String,
    pub n: usize,
    pub orig: f64,
    pub jpeg: Vec<ConditionResult>,
    pub blur: Vec<ConditionResult>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub rows: Vec<RobustnessRow>,
}

impl RobustnessReport {
    /// Markdown table with one column per condition, in row order.
    pub fn to_markdown(&self) -> String {
        let Some(first) = self.rows.first() else {
            return String::new();
        };
        let cols: Vec<&str> = first.jpeg.iter().chain(&first.blur).map(|c| c.name.as_str()).collect();
        let mut out = format!("| method | orig | {} |\n|---|---|{}\n", cols.join(" | "), "---|".repeat(cols.len()));
        for r in &self.rows {
            let cells: Vec<String> = r.jpeg.iter().chain(&r.blur).map(|c| format!("{:.1}", 100.0 * c.accuracy)).collect();
            out.push_str(&format!("| {} | {:.1} | {} |\n", r.method, 100.0 * r.orig, cells.join(" | ")));
        }
        out
    }
}

/// Evaluates `samples` clean and under each perturbation in `grid`.
pub fn robustness_row(model: &ForensicModel, method: &str, samples: &[SynthSample], grid: &[Perturbation], max_len: usize) -> Result<RobustnessRow> {
    let orig = Metrics::from_predictions(&predict_samples(model, samples, None, max_len)?)?;
    let mut row = RobustnessRow { method: method.to_string(), n: samples.len(), orig: orig.accuracy, jpeg: Vec::new(), blur: Vec::new() };
    for &p in grid {
        let m = Metrics::from_predictions(&predict_samples(model, samples, Some(p), max_len)?)?;
        let cell = ConditionResult { condition: p, name: p.name(), accuracy: m.accuracy, malformed: m.malformed };
        match p {
            Perturbation::Jpeg { .. } => row.jpeg.push(cell),
            Perturbation::Blur { .. } => row.blur.push(cell),
        }
    }
    Ok(row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pred(label: Label, answer: Answer) -> Prediction {
        Prediction { id: String::new(), label, answer, well_formed: answer != Answer::Malformed }
    }

    fn balanced(answer_for: impl Fn(Label) -> Answer) -> Vec<Prediction> {
        (0..10).map(|i| if i % 2 == 0 { Label::Real } else { Label::Fake }).map(|l| pred(l, answer_for(l))).collect()
    }

    #[test]
    fn constant_real_on_balanced_set_scores_half() {
        let m = Metrics::from_predictions(&balanced(|_| Answer::Real)).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.real.recall, Some(1.0));
        assert_eq!(m.real.precision, Some(0.5));
        assert_eq!(m.fake.precision, None);
        assert_eq!(m.fake.recall, Some(0.0));
    }

    #[test]
    fn oracle_scores_one_and_malformed_counts_as_wrong() {
        let m = Metrics::from_predictions(&balanced(Answer::from)).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!((m.malformed, m.format_invalid), (0, 0));
        let m = Metrics::from_predictions(&balanced(|_| Answer::Malformed)).unwrap();
        assert_eq!((m.accuracy, m.malformed, m.format_invalid), (0.0, 10, 10));
        assert_eq!(m.real.precision, None);
        assert!(Metrics::from_predictions(&[]).is_err());
    }

    const ANSWERS: [Answer; 3] = [Answer::Real, Answer::Fake, Answer::Malformed];

    proptest! {
        #[test]
        fn precision_recall_match_enumeration(cases in prop::collection::vec((any::<bool>(), 0usize..3), 1..80)) {
            let preds: Vec<Prediction> = cases
                .iter()
                .map(|&(fake, a)| pred(if fake { Label::Fake } else { Label::Real }, ANSWERS[a]))
                .collect();
            let m = Metrics::from_predictions(&preds).unwrap();
            for (c, cm) in [(Label::Real, &m.real), (Label::Fake, &m.fake)] {
                let mut tp = 0;
                let mut predicted = 0;
                let mut support = 0;
                for p in &preds {
                    let said = p.answer.label() == Some(c);
                    tp += (said && p.label == c) as usize;
                    predicted += said as usize;
                    support += (p.label == c) as usize;
                }
                prop_assert_eq!(cm.support, support);
                prop_assert_eq!(cm.precision, if predicted == 0 { None } else { Some(tp as f64 / predicted as f64) });
                prop_assert_eq!(cm.recall, if support == 0 { None } else { Some(tp as f64 / support as f64) });
            }
            let hits = preds.iter().filter(|p| p.answer.label() == Some(p.label)).count();
            prop_assert_eq!(m.accuracy, hits as f64 / preds.len() as f64);
        }
    }

    #[test]
    fn report_groups_levels_and_pools_overall() {
        let l1 = balanced(Answer::from);
        let l3 = balanced(|_| Answer::Fake);
        let r = EvalReport::new("m", &[(1, l1), (3, l3)]).unwrap();
        assert_eq!(r.level(1).unwrap().name, "In-Distribution");
        assert_eq!(r.level(3).unwrap().metrics.accuracy, 0.5);
        assert_eq!(r.overall.n, 20);
        assert_eq!(r.overall.accuracy, 0.75);
        assert!(EvalReport::new("m", &[(6, balanced(Answer::from))]).is_err());
        let back: EvalReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn robustness_markdown_has_one_column_per_condition() {
        let cell = |p: Perturbation, a| ConditionResult { condition: p, name: p.name(), accuracy: a, malformed: 0 };
        let grid = super::super::perturb::standard_grid();
        let row = RobustnessRow {
            method: "full".into(),
            n: 4,
            orig: 1.0,
            jpeg: grid[..3].iter().map(|&p| cell(p, 0.75)).collect(),
            blur: grid[3..].iter().map(|&p| cell(p, 0.5)).collect(),
        };
        let md = RobustnessReport { rows: vec![row] }.to_markdown();
        let lines: Vec<&str> = md.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "| method | orig | jpeg_q90 | jpeg_q70 | jpeg_q60 | blur_s1 | blur_s2 | blur_s4 |");
        assert_eq!(lines[2], "| full | 100.0 | 75.0 | 75.0 | 75.0 | 50.0 | 50.0 | 50.0 |");
    }

    fn validator(schema: &str) -> jsonschema::Validator {
        jsonschema::validator_for(&serde_json::from_str(schema).unwrap()).unwrap()
    }

    #[test]
    fn reports_validate_against_pinned_schemas() {
        let eval = validator(include_str!("../../schemas/eval_report.schema.json"));
        let r = EvalReport::new("m", &[(1, balanced(Answer::from)), (5, balanced(|_| Answer::Real))]).unwrap();
        let mut v = serde_json::to_value(&r).unwrap();
        assert!(eval.is_valid(&v), "{:?}", eval.iter_errors(&v).map(|e| e.to_string()).collect::<Vec<_>>());
        v["levels"][0]["extra"] = serde_json::json!(1);
        assert!(!eval.is_valid(&v));
        let mut v = serde_json::to_value(&r).unwrap();
        v["overall"].as_object_mut().unwrap().remove("malformed");
        assert!(!eval.is_valid(&v));

        let rob = validator(include_str!("../../schemas/robustness_report.schema.json"));
        let grid = super::super::perturb::standard_grid();
        let cell = |p: Perturbation| ConditionResult { condition: p, name: p.name(), accuracy: 0.5, malformed: 0 };
        let row = RobustnessRow { method: "full".into(), n: 2, orig: 1.0, jpeg: grid[..3].iter().map(|&p| cell(p)).collect(), blur: grid[3..].iter().map(|&p| cell(p)).collect() };
        let mut v = serde_json::to_value(RobustnessReport { rows: vec![row] }).unwrap();
        assert!(rob.is_valid(&v), "{:?}", rob.iter_errors(&v).map(|e| e.to_string()).collect::<Vec<_>>());
        v["rows"][0]["jpeg"][0]["condition"]["kind"] = serde_json::json!("blur");
        assert!(!rob.is_valid(&v));
    }
}
