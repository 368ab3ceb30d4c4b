//! Five-stage transcript grammar: vocabulary, total parser, per-token stage
//! labels and the strict format check.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evidence::{PartId, NUM_PARTS};

pub type TokenId = u32;

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const EVIDENCE_SUMMARY: TokenId = 2;
const PART_BASE: TokenId = 3;
const TAG_BASE: TokenId = PART_BASE + NUM_PARTS as TokenId;
pub const REAL_TOKEN: TokenId = TAG_BASE + 10;
pub const FAKE_TOKEN: TokenId = REAL_TOKEN + 1;
const WORD_BASE: TokenId = FAKE_TOKEN + 1;

/// Closed word list. Order fixes token ids; append only.
const WORDS: &[&str] = &[
    // prompt
    "inspect", "face", "image", "is", "this", "authentic", "question",
    // anomaly lexicon
    "anomaly", "artifact", "irregular", "noise", "seam", "blur", "blurred", "smeared", "jagged",
    "discontinuity", "inconsistent", "unnatural", "synthetic", "manipulated", "spliced", "warped",
    "aliasing", "ringing", "grainy", "speckled", "mismatch", "tampered", "distorted", "oversmoothed",
    "suspicious", "abnormal", "spurious", "forged",
    // clean lexicon
    "natural", "consistent", "clean", "coherent", "smooth", "regular", "plausible", "intact",
    "uniform", "normal", "genuine", "continuous", "organic", "sharp", "faithful",
    // signal and structure
    "frequency", "spectral", "band", "high", "low", "mid", "energy", "texture", "pattern", "edge",
    "boundary", "region", "detail", "signal", "statistics", "response", "periodic", "grid",
    "fine", "coarse", "local", "global", "map", "peak", "level", "contrast", "gradient",
    "transition", "structure", "shading", "lighting", "color", "tone", "skin", "pore", "strand",
    "outline", "symmetry", "alignment", "shape", "surface", "margin", "patch", "area",
    // qualifiers
    "strong", "weak", "slight", "clear", "faint", "elevated", "reduced", "missing", "excess",
    "visible", "subtle", "marked", "localized", "widespread", "across", "within", "along",
    "around", "near", "at", "in", "on", "of", "the", "a", "with", "without", "no", "and", "but",
    "not", "some", "overall", "entire", "partial", "isolated", "repeated", "single", "multiple",
    // reasoning
    "evidence", "supports", "indicates", "suggests", "shows", "reveals", "confirms", "contradicts",
    "overrides", "initial", "impression", "examination", "parts", "examined", "planned", "check",
    "verdict", "likely", "unlikely", "therefore", "hence", "despite", "after", "before",
    "conclusion", "inconclusive", "uncertain", "found", "none", "detected", "observed", "compared",
    "expected", "real", "fake", "generated", "camera", "photo", "capture", "sensor",
    // anatomy words usable in free text
    "eye", "eyes", "eyebrow", "eyebrows", "nose", "mouth", "lips", "teeth", "contour", "jaw",
    "cheek", "forehead", "hair", "hairline", "chin", "left", "right", "upper", "lower",
];

/// Structural tags in stage order.
const TAGS: [(&str, &str); 5] = [
    ("<global_evidence>", "</global_evidence>"),
    ("<planning>", "</planning>"),
    ("<part_evidence>", "</part_evidence>"),
    ("<conclusion>", "</conclusion>"),
    ("<answer>", "</answer>"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Stage {
    Prompt,
    Global,
    Planning,
    PartEvidence,
    Conclusion,
    Answer,
}

impl Stage {
    /// Stages that have an opening/closing tag pair, in the required order.
    pub const BLOCKS: [Stage; 5] = [Stage::Global, Stage::Planning, Stage::PartEvidence, Stage::Conclusion, Stage::Answer];

    fn block_index(self) -> Option<usize> {
        Self::BLOCKS.iter().position(|&s| s == self)
    }

    fn name(self) -> &'static str {
        match self {
            Stage::Prompt => "prompt",
            Stage::Global => "global_evidence",
            Stage::Planning => "planning",
            Stage::PartEvidence => "part_evidence",
            Stage::Conclusion => "conclusion",
            Stage::Answer => "answer",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn token(self) -> TokenId {
        match self {
            Label::Real => REAL_TOKEN,
            Label::Fake => FAKE_TOKEN,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Real => "REAL",
            Label::Fake => "FAKE",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Answer {
    Real,
    Fake,
    Malformed,
}

impl Answer {
    pub fn label(self) -> Option<Label> {
        match self {
            Answer::Real => Some(Label::Real),
            Answer::Fake => Some(Label::Fake),
            Answer::Malformed => None,
        }
    }
}

impl From<Label> for Answer {
    fn from(l: Label) -> Self {
        match l {
            Label::Real => Answer::Real,
            Label::Fake => Answer::Fake,
        }
    }
}

/// What a token id denotes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Bos,
    Eos,
    EvidenceSummary,
    Part(PartId),
    Open(Stage),
    Close(Stage),
    AnswerLiteral(Label),
    Word,
    Unknown,
}

/// Token vocabulary with fixed ids.
#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut tokens: Vec<String> = vec!["<bos>".into(), "<eos>".into(), "<EVIDENCE_SUMMARY>".into()];
        tokens.extend(PartId::ALL.iter().map(|p| format!("<P_{p}>")));
        for (open, close) in TAGS {
            tokens.push(open.into());
            tokens.push(close.into());
        }
        tokens.push("REAL".into());
        tokens.push("FAKE".into());
        tokens.extend(WORDS.iter().map(|w| w.to_string()));
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as TokenId)).collect();
        debug_assert_eq!(tokens.len(), WORD_BASE as usize + WORDS.len());
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Id of a known word; panics on words outside the closed list.
    pub fn word(&self, w: &str) -> TokenId {
        match self.id(w) {
            Some(id) if id >= WORD_BASE => id,
            _ => panic!("`{w}` is not a vocabulary word"),
        }
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn part_token(p: PartId) -> TokenId {
        PART_BASE + p.index() as TokenId
    }

    pub fn open_tag(s: Stage) -> TokenId {
        TAG_BASE + 2 * s.block_index().expect("block stage") as TokenId
    }

    pub fn close_tag(s: Stage) -> TokenId {
        Self::open_tag(s) + 1
    }

    pub fn kind(&self, id: TokenId) -> TokenKind {
        match id {
            BOS => TokenKind::Bos,
            EOS => TokenKind::Eos,
            EVIDENCE_SUMMARY => TokenKind::EvidenceSummary,
            REAL_TOKEN => TokenKind::AnswerLiteral(Label::Real),
            FAKE_TOKEN => TokenKind::AnswerLiteral(Label::Fake),
            _ if (PART_BASE..TAG_BASE).contains(&id) => TokenKind::Part(PartId::ALL[(id - PART_BASE) as usize]),
            _ if (TAG_BASE..REAL_TOKEN).contains(&id) => {
                let k = (id - TAG_BASE) as usize;
                let stage = Stage::BLOCKS[k / 2];
                if k % 2 == 0 {
                    TokenKind::Open(stage)
                } else {
                    TokenKind::Close(stage)
                }
            }
            _ if (id as usize) < self.tokens.len() => TokenKind::Word,
            _ => TokenKind::Unknown,
        }
    }

    pub fn is_word(&self, id: TokenId) -> bool {
        self.kind(id) == TokenKind::Word
    }

    pub fn part_of(&self, id: TokenId) -> Option<PartId> {
        match self.kind(id) {
            TokenKind::Part(p) => Some(p),
            _ => None,
        }
    }

    /// Whitespace-separated text to ids.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|t| self.id(t).ok_or_else(|| Error::InvalidArgument(format!("unknown token `{t}`"))))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.token(i).map_or_else(|| format!("<unk:{i}>"), str::to_string))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// SHA-256 over the newline-joined token strings.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// `<bos> inspect face image <EVIDENCE_SUMMARY>`.
    pub fn prompt(&self) -> Vec<TokenId> {
        vec![BOS, self.word("inspect"), self.word("face"), self.word("image"), EVIDENCE_SUMMARY]
    }
}

/// One examined part inside the part-evidence block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartSpan {
    pub part: PartId,
    /// Position of the part token.
    pub position: usize,
    /// Positions of the word tokens that follow it.
    pub words: std::ops::Range<usize>,
}

impl PartSpan {
    pub fn substantive(&self) -> bool {
        !self.words.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Block {
    stage: Stage,
    open: usize,
    close: Option<usize>,
    nested: bool,
}

/// Parsed token sequence. Parsing is total; malformation is recorded as data.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transcript {
    pub tokens: Vec<TokenId>,
    pub stage_labels: Vec<Stage>,
    pub planned: BTreeSet<PartId>,
    pub examined: Vec<PartSpan>,
    pub answer: Answer,
    pub diagnostics: Vec<String>,
    blocks: Vec<Block>,
}

/// Tracks the open-tag stack while scanning left to right.
#[derive(Clone, Debug, Default)]
pub struct StageTracker {
    stack: Vec<(Stage, usize)>,
}

impl StageTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stage of the innermost open block, or `Prompt`.
    pub fn current(&self) -> Stage {
        self.stack.last().map_or(Stage::Prompt, |s| s.0)
    }

    /// Consumes one token and returns its stage label.
    pub fn push(&mut self, vocab: &Vocab, id: TokenId, position: usize) -> Stage {
        self.step(vocab, id, position, &mut |_| {}).0
    }

    fn step(&mut self, vocab: &Vocab, id: TokenId, position: usize, diag: &mut dyn FnMut(String)) -> (Stage, StackEvent) {
        match vocab.kind(id) {
            TokenKind::Open(s) => {
                let nested = !self.stack.is_empty();
                if nested {
                    diag(format!("{} opened inside {} at {position}", s.name(), self.current().name()));
                }
                self.stack.push((s, position));
                (s, StackEvent::Opened { nested })
            }
            TokenKind::Close(s) => {
                if let Some(depth) = self.stack.iter().rposition(|e| e.0 == s) {
                    if depth + 1 != self.stack.len() {
                        diag(format!("{} closed over unclosed {} at {position}", s.name(), self.current().name()));
                    }
                    let closed: Vec<(Stage, usize)> = self.stack.drain(depth..).collect();
                    (s, StackEvent::Closed(closed))
                } else {
                    diag(format!("unmatched close of {} at {position}", s.name()));
                    (self.current(), StackEvent::None)
                }
            }
            _ => (self.current(), StackEvent::None),
        }
    }
}

enum StackEvent {
    None,
    Opened { nested: bool },
    /// Popped entries, innermost last; the first one is the tag being closed.
    Closed(Vec<(Stage, usize)>),
}

/// Parses any token sequence.
pub fn parse(vocab: &Vocab, tokens: &[TokenId]) -> Transcript {
    let mut diagnostics = Vec::new();
    let mut tracker = StageTracker::new();
    let mut labels = Vec::with_capacity(tokens.len());
    let mut blocks: Vec<Block> = Vec::new();
    let mut open_blocks: Vec<usize> = Vec::new();
    for (pos, &id) in tokens.iter().enumerate() {
        let (stage, ev) = tracker.step(vocab, id, pos, &mut |d| diagnostics.push(d));
        labels.push(stage);
        match ev {
            StackEvent::Opened { nested } => {
                open_blocks.push(blocks.len());
                blocks.push(Block { stage, open: pos, close: None, nested });
            }
            StackEvent::Closed(popped) => {
                for (i, _) in popped.iter().enumerate().rev() {
                    let b = open_blocks.pop().expect("stack and block list agree");
                    if i == 0 {
                        blocks[b].close = Some(pos);
                    }
                }
            }
            StackEvent::None => {}
        }
        if vocab.kind(id) == TokenKind::Unknown {
            diagnostics.push(format!("unknown token id {id} at {pos}"));
        }
    }
    for &b in &open_blocks {
        diagnostics.push(format!("unclosed {}", blocks[b].stage.name()));
    }

    let planned = tokens
        .iter()
        .zip(&labels)
        .filter(|(_, &s)| s == Stage::Planning)
        .filter_map(|(&t, _)| vocab.part_of(t))
        .collect();

    let mut examined = Vec::new();
    let mut pos = 0;
    while pos < tokens.len() {
        if labels[pos] == Stage::PartEvidence {
            if let Some(part) = vocab.part_of(tokens[pos]) {
                let start = pos + 1;
                let mut end = start;
                while end < tokens.len() && labels[end] == Stage::PartEvidence && vocab.is_word(tokens[end]) {
                    end += 1;
                }
                if end == start {
                    diagnostics.push(format!("unsubstantive {part} at {pos}"));
                }
                examined.push(PartSpan { part, position: pos, words: start..end });
                pos = end;
                continue;
            }
        }
        pos += 1;
    }

    let answer = parse_answer(vocab, tokens, &blocks, &mut diagnostics);
    Transcript { tokens: tokens.to_vec(), stage_labels: labels, planned, examined, answer, diagnostics, blocks }
}

fn parse_answer(vocab: &Vocab, tokens: &[TokenId], blocks: &[Block], diagnostics: &mut Vec<String>) -> Answer {
    let answers: Vec<&Block> = blocks.iter().filter(|b| b.stage == Stage::Answer).collect();
    let block = match answers.as_slice() {
        [] => {
            diagnostics.push("missing answer".into());
            return Answer::Malformed;
        }
        [b] => *b,
        _ => {
            diagnostics.push("duplicate answer".into());
            return Answer::Malformed;
        }
    };
    let Some(close) = block.close else {
        diagnostics.push("unclosed answer".into());
        return Answer::Malformed;
    };
    match &tokens[block.open + 1..close] {
        [t] => match vocab.kind(*t) {
            TokenKind::AnswerLiteral(Label::Real) => Answer::Real,
            TokenKind::AnswerLiteral(Label::Fake) => Answer::Fake,
            _ => {
                diagnostics.push("answer is not REAL or FAKE".into());
                Answer::Malformed
            }
        },
        _ => {
            diagnostics.push("answer must hold exactly one literal".into());
            Answer::Malformed
        }
    }
}

impl Transcript {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn examined_parts(&self) -> BTreeSet<PartId> {
        self.examined.iter().map(|s| s.part).collect()
    }

    pub fn unsubstantive_parts(&self) -> BTreeSet<PartId> {
        self.examined.iter().filter(|s| !s.substantive()).map(|s| s.part).collect()
    }

    /// Token ids carried by blocks of the given stage, tags excluded.
    pub fn stage_content(&self, stage: Stage) -> Vec<TokenId> {
        let mut out = Vec::new();
        for b in self.blocks.iter().filter(|b| b.stage == stage) {
            let end = b.close.unwrap_or(self.tokens.len());
            out.extend((b.open + 1..end).filter(|&i| self.stage_labels[i] == stage).map(|i| self.tokens[i]));
        }
        out
    }

    /// Text of the global, planning and part-evidence stages, with tags.
    pub fn evidence_text(&self, vocab: &Vocab) -> String {
        let ids: Vec<TokenId> = self
            .tokens
            .iter()
            .zip(&self.stage_labels)
            .filter(|(_, s)| matches!(s, Stage::Global | Stage::Planning | Stage::PartEvidence))
            .map(|(&t, _)| t)
            .collect();
        vocab.decode(&ids)
    }
}

/// Stage label of `position`, computed from the prefix only.
pub fn stage_of(vocab: &Vocab, transcript: &Transcript, position: usize) -> Result<Stage> {
    if position >= transcript.len() {
        return Err(Error::OutOfRange { position, len: transcript.len() });
    }
    let mut tracker = StageTracker::new();
    let mut stage = Stage::Prompt;
    for (i, &t) in transcript.tokens[..=position].iter().enumerate() {
        stage = tracker.push(vocab, t, i);
    }
    Ok(stage)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FormatReport {
    pub ok: bool,
    pub diagnostics: Vec<String>,
}

/// Strict check: each stage once, in order, closed, non-nested and non-empty;
/// planning holds only part tokens; part evidence starts with a part token;
/// the answer is one literal; only `<eos>` may follow `</answer>`.
pub fn validate_format(vocab: &Vocab, t: &Transcript) -> FormatReport {
    let mut diags = Vec::new();
    let mut expected = 0usize;
    let mut last_close: Option<usize> = None;
    for b in &t.blocks {
        let idx = b.stage.block_index().expect("blocks are tagged stages");
        if b.nested {
            diags.push(format!("{} is nested", b.stage.name()));
        }
        if idx != expected {
            diags.push(if idx < expected {
                format!("{} repeated or out of order", b.stage.name())
            } else {
                format!("{} appears before {}", b.stage.name(), Stage::BLOCKS[expected].name())
            });
            expected = expected.max(idx + 1);
            continue;
        }
        expected += 1;
        let Some(close) = b.close else {
            diags.push(format!("unclosed {}", b.stage.name()));
            continue;
        };
        let gap_start = last_close.map_or(0, |c| c + 1);
        let stray = t.tokens[gap_start.min(b.open)..b.open]
            .iter()
            .enumerate()
            .any(|(i, &tok)| last_close.is_some() || !is_prompt_token(vocab, tok, gap_start + i));
        if stray {
            diags.push(format!("stray tokens before {}", b.stage.name()));
        }
        last_close = Some(close);
        let content = &t.tokens[b.open + 1..close];
        if content.is_empty() {
            diags.push(format!("empty {}", b.stage.name()));
            continue;
        }
        match b.stage {
            Stage::Planning if content.iter().any(|&c| vocab.part_of(c).is_none()) => {
                diags.push("planning holds non-part tokens".into());
            }
            Stage::PartEvidence if vocab.part_of(content[0]).is_none() => {
                diags.push("part evidence does not start with a part token".into());
            }
            Stage::Global | Stage::Conclusion | Stage::PartEvidence
                if content.iter().any(|&c| !matches!(vocab.kind(c), TokenKind::Word | TokenKind::Part(_))) =>
            {
                diags.push(format!("{} holds structural tokens", b.stage.name()));
            }
            _ => {}
        }
    }
    if expected < Stage::BLOCKS.len() {
        for s in &Stage::BLOCKS[expected..] {
            diags.push(format!("missing {}", s.name()));
        }
    }
    if t.answer == Answer::Malformed {
        diags.push("answer malformed".into());
    }
    if let Some(c) = last_close {
        match &t.tokens[c + 1..] {
            [] | [EOS] => {}
            _ => diags.push("tokens after answer".into()),
        }
    }
    if t.tokens.iter().any(|&x| vocab.kind(x) == TokenKind::Unknown) {
        diags.push("unknown token ids".into());
    }
    FormatReport { ok: diags.is_empty(), diagnostics: diags }
}

fn is_prompt_token(vocab: &Vocab, tok: TokenId, pos: usize) -> bool {
    match vocab.kind(tok) {
        TokenKind::Bos => pos == 0,
        TokenKind::Word | TokenKind::EvidenceSummary => true,
        _ => false,
    }
}

/// Structured content of a well-formed transcript.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptSpec {
    pub global: Vec<TokenId>,
    pub planned: Vec<PartId>,
    pub parts: Vec<(PartId, Vec<TokenId>)>,
    pub conclusion: Vec<TokenId>,
    pub answer: Label,
}

impl TranscriptSpec {
    /// Response tokens (no prompt), ending with `<eos>`.
    pub fn response(&self) -> Vec<TokenId> {
        let mut out = vec![Vocab::open_tag(Stage::Global)];
        out.extend(&self.global);
        out.push(Vocab::close_tag(Stage::Global));
        out.push(Vocab::open_tag(Stage::Planning));
        out.extend(self.planned.iter().map(|&p| Vocab::part_token(p)));
        out.push(Vocab::close_tag(Stage::Planning));
        out.push(Vocab::open_tag(Stage::PartEvidence));
        for (p, words) in &self.parts {
            out.push(Vocab::part_token(*p));
            out.extend(words);
        }
        out.push(Vocab::close_tag(Stage::PartEvidence));
        out.push(Vocab::open_tag(Stage::Conclusion));
        out.extend(&self.conclusion);
        out.push(Vocab::close_tag(Stage::Conclusion));
        out.push(Vocab::open_tag(Stage::Answer));
        out.push(self.answer.token());
        out.push(Vocab::close_tag(Stage::Answer));
        out.push(EOS);
        out
    }

    pub fn serialize(&self, vocab: &Vocab) -> Vec<TokenId> {
        let mut out = vocab.prompt();
        out.extend(self.response());
        out
    }

    /// Recovers the `TranscriptSpec` from a transcript that passes `validate_format`.
    pub fn from_transcript(vocab: &Vocab, t: &Transcript) -> Option<Self> {
        if !validate_format(vocab, t).ok {
            return None;
        }
        let parts = t
            .examined
            .iter()
            .map(|s| (s.part, t.tokens[s.words.clone()].to_vec()))
            .collect();
        Some(Self {
            global: t.stage_content(Stage::Global),
            planned: t.stage_content(Stage::Planning).iter().filter_map(|&x| vocab.part_of(x)).collect(),
            parts,
            conclusion: t.stage_content(Stage::Conclusion),
            answer: t.answer.label()?,
        })
    }
}

/// One line of a transcript JSONL file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub id: String,
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub label: Label,
    pub split: String,
}

impl TranscriptRecord {
    pub fn new(vocab: &Vocab, id: impl Into<String>, tokens: Vec<TokenId>, label: Label, split: impl Into<String>) -> Self {
        Self { id: id.into(), text: vocab.decode(&tokens), tokens, label, split: split.into() }
    }

    /// Errors if `text` and `tokens` disagree.
    pub fn check(&self, vocab: &Vocab) -> Result<()> {
        if vocab.encode(&self.text)? != self.tokens {
            return Err(Error::InvalidArgument(format!("record {}: text and tokens disagree", self.id)));
        }
        Ok(())
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}
