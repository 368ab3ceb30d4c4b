//! Causal transformer policy over the transcript vocabulary with residual
//! evidence injection: the summary token receives `α·proj(e_g)` and part
//! tokens inside the part-evidence stage receive `γ·proj(e_k)`.

mod decode;

pub use decode::{generate, sequence_logprob, Decoder, Generation, SamplingConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::evidence::{EvidenceBundle, EvidenceNodes, PartId};
use crate::numerics::{NodeId, ParamId, ParamStore, Tape, Tensor};
use crate::transcript::{Stage, StageTracker, TokenId, Vocab, EVIDENCE_SUMMARY};

pub const LN_EPS: f64 = 1e-5;

/// Evidence added to one position's embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Injection {
    None,
    Global,
    Part(PartId),
}

/// Decides injections position by position from the prefix alone.
#[derive(Clone, Debug)]
pub struct Gate {
    tracker: StageTracker,
    stage_gate: bool,
    position: usize,
}

impl Gate {
    pub fn new(stage_gate: bool) -> Self {
        Self { tracker: StageTracker::new(), stage_gate, position: 0 }
    }

    /// Consumes the token at the next position and reports its injection.
    pub fn next(&mut self, vocab: &Vocab, token: TokenId) -> Injection {
        let stage = self.tracker.push(vocab, token, self.position);
        self.position += 1;
        if token == EVIDENCE_SUMMARY {
            return Injection::Global;
        }
        match vocab.part_of(token) {
            Some(p) if stage == Stage::PartEvidence => Injection::Part(p),
            Some(p) if !self.stage_gate && stage == Stage::Planning => Injection::Part(p),
            _ => Injection::None,
        }
    }
}

/// Injection decisions for every position of `tokens`.
pub fn injections(vocab: &Vocab, tokens: &[TokenId], stage_gate: bool) -> Vec<Injection> {
    let mut gate = Gate::new(stage_gate);
    tokens.iter().map(|&t| gate.next(vocab, t)).collect()
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub w_qkv: ParamId,
    pub b_qkv: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w_fc1: ParamId,
    pub b_fc1: ParamId,
    pub w_fc2: ParamId,
    pub b_fc2: ParamId,
}

/// Parameter handles and shape of the policy.
#[derive(Clone, Debug)]
pub struct Policy {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<BlockParams>,
    pub lnf_g: ParamId,
    pub lnf_b: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
    pub alpha: ParamId,
    pub gamma: ParamId,
    pub ev_proj: ParamId,
    pub d_model: usize,
    pub heads: usize,
    pub context: usize,
    pub vocab_size: usize,
    pub stage_gate: bool,
}

/// Switches for the injection paths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InjectionMode {
    /// False removes the injection machinery entirely.
    pub enabled: bool,
    pub stage_gate: bool,
}

impl Policy {
    pub fn init(store: &mut ParamStore, vocab_size: usize, evidence_dim: usize, cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let normal = |rng: &mut ChaCha8Rng, shape: &[usize], std: f64| {
            let dist = Normal::new(0.0, std).expect("finite std");
            Tensor::new(shape.to_vec(), (0..shape.iter().product()).map(|_| dist.sample(rng)).collect()).unwrap()
        };
        let s = cfg.init_scale;
        // residual-branch outputs start smaller so depth does not inflate the stream
        let s_res = s / (2.0 * cfg.layers as f64).sqrt();
        let tok_emb = store.add("policy.tok_emb", normal(&mut rng, &[vocab_size, d], s));
        let pos_emb = store.add("policy.pos_emb", normal(&mut rng, &[cfg.context, d], s));
        let mut blocks = Vec::new();
        for l in 0..cfg.layers {
            let p = format!("policy.block{l}");
            let h = d * cfg.mlp_ratio;
            blocks.push(BlockParams {
                ln1_g: store.add(format!("{p}.ln1.g"), Tensor::full(&[d], 1.0)),
                ln1_b: store.add(format!("{p}.ln1.b"), Tensor::zeros(&[d])),
                w_qkv: store.add(format!("{p}.attn.w_qkv"), normal(&mut rng, &[d, 3 * d], s)),
                b_qkv: store.add(format!("{p}.attn.b_qkv"), Tensor::zeros(&[3 * d])),
                w_o: store.add(format!("{p}.attn.w_o"), normal(&mut rng, &[d, d], s_res)),
                b_o: store.add(format!("{p}.attn.b_o"), Tensor::zeros(&[d])),
                ln2_g: store.add(format!("{p}.ln2.g"), Tensor::full(&[d], 1.0)),
                ln2_b: store.add(format!("{p}.ln2.b"), Tensor::zeros(&[d])),
                w_fc1: store.add(format!("{p}.mlp.w_fc1"), normal(&mut rng, &[d, h], s)),
                b_fc1: store.add(format!("{p}.mlp.b_fc1"), Tensor::zeros(&[h])),
                w_fc2: store.add(format!("{p}.mlp.w_fc2"), normal(&mut rng, &[h, d], s_res)),
                b_fc2: store.add(format!("{p}.mlp.b_fc2"), Tensor::zeros(&[d])),
            });
        }
        let lnf_g = store.add("policy.lnf.g", Tensor::full(&[d], 1.0));
        let lnf_b = store.add("policy.lnf.b", Tensor::zeros(&[d]));
        let w_out = store.add("policy.w_out", normal(&mut rng, &[d, vocab_size], s));
        let b_out = store.add("policy.b_out", Tensor::zeros(&[vocab_size]));
        let alpha = store.add("policy.alpha", Tensor::scalar(0.0));
        let gamma = store.add("policy.gamma", Tensor::scalar(0.0));
        let ev_proj = store.add("policy.ev_proj", normal(&mut rng, &[evidence_dim, d], 1.0 / (evidence_dim as f64).sqrt()));
        Self {
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
            w_out,
            b_out,
            alpha,
            gamma,
            ev_proj,
            d_model: d,
            heads: cfg.heads,
            context: cfg.context,
            vocab_size,
            stage_gate: cfg.stage_gate,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.tok_emb, self.pos_emb];
        for b in &self.blocks {
            ids.extend([b.ln1_g, b.ln1_b, b.w_qkv, b.b_qkv, b.w_o, b.b_o, b.ln2_g, b.ln2_b, b.w_fc1, b.b_fc1, b.w_fc2, b.b_fc2]);
        }
        ids.extend([self.lnf_g, self.lnf_b, self.w_out, self.b_out, self.alpha, self.gamma, self.ev_proj]);
        ids
    }

    pub fn mode(&self) -> InjectionMode {
        InjectionMode { enabled: true, stage_gate: self.stage_gate }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len == 0 {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        if len > self.context {
            return Err(Error::ContextOverflow { len, limit: self.context });
        }
        Ok(())
    }

    /// Input embeddings `[T, D_m]` with evidence injected per `mode`.
    pub fn embed(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        vocab: &Vocab,
        tokens: &[TokenId],
        evidence: Option<EvidenceNodes>,
        mode: InjectionMode,
    ) -> Result<NodeId> {
        self.check_len(tokens.len())?;
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::InvalidArgument(format!("token id {bad} outside vocabulary of {}", self.vocab_size)));
        }
        let table = tape.param(store, self.tok_emb)?;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let h = tape.gather(table, &ids)?;
        let pos_table = tape.param(store, self.pos_emb)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pos = tape.gather(pos_table, &positions)?;
        let mut x = tape.add(h, pos)?;
        if !mode.enabled {
            return Ok(x);
        }
        let inj = injections(vocab, tokens, mode.stage_gate);
        let global_rows: Vec<usize> = (0..inj.len()).filter(|&i| inj[i] == Injection::Global).collect();
        let part_rows: Vec<(usize, usize)> = inj
            .iter()
            .enumerate()
            .filter_map(|(i, j)| match j {
                Injection::Part(p) => Some((i, p.index())),
                _ => None,
            })
            .collect();
        if global_rows.is_empty() && part_rows.is_empty() {
            return Ok(x);
        }
        let Some(ev) = evidence else {
            let position = global_rows.first().copied().unwrap_or_else(|| part_rows[0].0);
            return Err(Error::MissingBundle { position });
        };
        let proj = tape.param(store, self.ev_proj)?;
        if !global_rows.is_empty() {
            let alpha = tape.param(store, self.alpha)?;
            let g = tape.matmul(ev.global, proj)?;
            let g = tape.scale(g, alpha)?;
            let rows = tape.gather(g, &vec![0; global_rows.len()])?;
            x = tape.scatter_add_rows(x, rows, &global_rows)?;
        }
        if !part_rows.is_empty() {
            let gamma = tape.param(store, self.gamma)?;
            let p = tape.matmul(ev.parts, proj)?;
            let p = tape.scale(p, gamma)?;
            let idx: Vec<usize> = part_rows.iter().map(|r| r.1).collect();
            let rows = tape.gather(p, &idx)?;
            let at: Vec<usize> = part_rows.iter().map(|r| r.0).collect();
            x = tape.scatter_add_rows(x, rows, &at)?;
        }
        Ok(x)
    }

    /// Logits `[T, V]` for every position.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        vocab: &Vocab,
        tokens: &[TokenId],
        evidence: Option<EvidenceNodes>,
        mode: InjectionMode,
    ) -> Result<NodeId> {
        let mut x = self.embed(tape, store, vocab, tokens, evidence, mode)?;
        for b in &self.blocks {
            let (g, bb) = (tape.param(store, b.ln1_g)?, tape.param(store, b.ln1_b)?);
            let h = tape.layer_norm(x, g, bb, LN_EPS)?;
            let (w, bias) = (tape.param(store, b.w_qkv)?, tape.param(store, b.b_qkv)?);
            let qkv = tape.matmul(h, w)?;
            let qkv = tape.add_row(qkv, bias)?;
            let a = tape.causal_attention(qkv, self.heads)?;
            let (w, bias) = (tape.param(store, b.w_o)?, tape.param(store, b.b_o)?);
            let o = tape.matmul(a, w)?;
            let o = tape.add_row(o, bias)?;
            x = tape.add(x, o)?;
            let (g, bb) = (tape.param(store, b.ln2_g)?, tape.param(store, b.ln2_b)?);
            let h = tape.layer_norm(x, g, bb, LN_EPS)?;
            let (w, bias) = (tape.param(store, b.w_fc1)?, tape.param(store, b.b_fc1)?);
            let f = tape.matmul(h, w)?;
            let f = tape.add_row(f, bias)?;
            let f = tape.gelu(f)?;
            let (w, bias) = (tape.param(store, b.w_fc2)?, tape.param(store, b.b_fc2)?);
            let f = tape.matmul(f, w)?;
            let f = tape.add_row(f, bias)?;
            x = tape.add(x, f)?;
        }
        let (g, bb) = (tape.param(store, self.lnf_g)?, tape.param(store, self.lnf_b)?);
        let x = tape.layer_norm(x, g, bb, LN_EPS)?;
        let (w, bias) = (tape.param(store, self.w_out)?, tape.param(store, self.b_out)?);
        let logits = tape.matmul(x, w)?;
        tape.add_row(logits, bias)
    }

    /// Per-token log-probabilities `[T - start]` of `tokens[start..]` under
    /// teacher forcing.
    pub fn token_logprobs(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        vocab: &Vocab,
        tokens: &[TokenId],
        start: usize,
        evidence: Option<EvidenceNodes>,
        mode: InjectionMode,
    ) -> Result<NodeId> {
        if start == 0 || start >= tokens.len() {
            return Err(Error::InvalidArgument(format!("scored span starts at {start} of {}", tokens.len())));
        }
        let logits = self.forward(tape, store, vocab, &tokens[..tokens.len() - 1], evidence, mode)?;
        let rows: Vec<usize> = (start - 1..tokens.len() - 1).collect();
        let picked = tape.gather(logits, &rows)?;
        let targets: Vec<usize> = tokens[start..].iter().map(|&t| t as usize).collect();
        tape.log_softmax_pick(picked, &targets)
    }

    /// Plain logits for a full sequence with a fixed evidence bundle.
    pub fn logits(&self, store: &ParamStore, vocab: &Vocab, tokens: &[TokenId], bundle: Option<&EvidenceBundle>, mode: InjectionMode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let ev = bundle.map(|b| EvidenceNodes::from_bundle(&mut tape, b)).transpose()?;
        let out = self.forward(&mut tape, store, vocab, tokens, ev, mode)?;
        Ok(tape.value(out).clone())
    }
}
