//! Tape-free incremental decoding with cached keys and values. Every kernel
//! mirrors the tape forward pass operation for operation, so logits agree
//! bit for bit with `Policy::forward`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Gate, Injection, InjectionMode, Policy, LN_EPS};
use crate::error::{Error, Result};
use crate::evidence::{EvidenceBundle, NUM_PARTS};
use crate::numerics::tensor::{dot, gelu, log_softmax, matmul_acc};
use crate::numerics::ParamStore;
use crate::transcript::{parse, TokenId, Transcript, Vocab, EOS};

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    (0..n).map(|c| (x[c] - mean) * inv * g[c] + b[c]).collect()
}

fn linear(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut out = vec![0.0; n];
    matmul_acc(x, w, &mut out, 1, x.len(), n);
    for (o, bv) in out.iter_mut().zip(b) {
        *o += bv;
    }
    out
}

/// Incremental decoder state for one sequence.
pub struct Decoder<'a> {
    policy: &'a Policy,
    store: &'a ParamStore,
    vocab: &'a Vocab,
    enabled: bool,
    global: Option<Vec<f64>>,
    parts: Option<Vec<Vec<f64>>>,
    gate: Gate,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
    /// Injection applied at each consumed position.
    pub injection_log: Vec<Injection>,
}

impl<'a> Decoder<'a> {
    pub fn new(policy: &'a Policy, store: &'a ParamStore, vocab: &'a Vocab, bundle: Option<&EvidenceBundle>, mode: InjectionMode) -> Self {
        let d = policy.d_model;
        let (global, parts) = match bundle {
            Some(b) if mode.enabled => {
                let proj = store.get(policy.ev_proj).data();
                let dim = b.dim();
                let alpha = store.get(policy.alpha).data()[0];
                let gamma = store.get(policy.gamma).data()[0];
                let project = |e: &[f64], s: f64| {
                    let mut out = vec![0.0; d];
                    matmul_acc(e, proj, &mut out, 1, dim, d);
                    out.into_iter().map(|v| s * v).collect::<Vec<f64>>()
                };
                let parts = (0..NUM_PARTS).map(|k| project(&b.parts[k], gamma)).collect();
                (Some(project(&b.global, alpha)), Some(parts))
            }
            _ => (None, None),
        };
        Self {
            policy,
            store,
            vocab,
            enabled: mode.enabled,
            global,
            parts,
            gate: Gate::new(mode.stage_gate),
            keys: vec![Vec::new(); policy.blocks.len()],
            values: vec![Vec::new(); policy.blocks.len()],
            len: 0,
            injection_log: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Consumes one token and returns the next-token logits.
    pub fn step(&mut self, token: TokenId) -> Result<Vec<f64>> {
        let p = self.policy;
        let s = self.store;
        let d = p.d_model;
        let pos = self.len;
        if pos >= p.context {
            return Err(Error::ContextOverflow { len: pos + 1, limit: p.context });
        }
        if token as usize >= p.vocab_size {
            return Err(Error::InvalidArgument(format!("token id {token} outside vocabulary of {}", p.vocab_size)));
        }
        let tok = s.get(p.tok_emb).row(token as usize);
        let pe = s.get(p.pos_emb).row(pos);
        let mut x: Vec<f64> = tok.iter().zip(pe).map(|(a, b)| a + b).collect();

        let inj = if self.enabled { self.gate.next(self.vocab, token) } else { Injection::None };
        let add: Option<&[f64]> = match inj {
            Injection::None => None,
            Injection::Global => Some(self.global.as_deref().ok_or(Error::MissingBundle { position: pos })?),
            Injection::Part(part) => Some(&self.parts.as_ref().ok_or(Error::MissingBundle { position: pos })?[part.index()]),
        };
        if let Some(a) = add {
            for (xv, av) in x.iter_mut().zip(a) {
                *xv += av;
            }
        }
        self.injection_log.push(inj);

        for (l, b) in p.blocks.iter().enumerate() {
            let h = layer_norm(&x, s.get(b.ln1_g).data(), s.get(b.ln1_b).data());
            let qkv = linear(&h, s.get(b.w_qkv).data(), s.get(b.b_qkv).data());
            self.keys[l].extend_from_slice(&qkv[d..2 * d]);
            self.values[l].extend_from_slice(&qkv[2 * d..]);
            let heads = p.heads;
            let hd = d / heads;
            let scale = 1.0 / (hd as f64).sqrt();
            let mut att = vec![0.0; d];
            let mut scores = vec![0.0; pos + 1];
            for hh in 0..heads {
                let off = hh * hd;
                let q = &qkv[off..off + hd];
                let mut mx = f64::NEG_INFINITY;
                for (j, sc) in scores.iter_mut().enumerate() {
                    let k = &self.keys[l][j * d + off..j * d + off + hd];
                    *sc = dot(q, k) * scale;
                    mx = mx.max(*sc);
                }
                let mut z = 0.0;
                for sc in scores.iter_mut() {
                    *sc = (*sc - mx).exp();
                    z += *sc;
                }
                let orow = &mut att[off..off + hd];
                for (j, sc) in scores.iter().enumerate() {
                    let pj = sc / z;
                    let v = &self.values[l][j * d + off..j * d + off + hd];
                    for (o, vv) in orow.iter_mut().zip(v) {
                        *o += pj * vv;
                    }
                }
            }
            let o = linear(&att, s.get(b.w_o).data(), s.get(b.b_o).data());
            for (xv, ov) in x.iter_mut().zip(&o) {
                *xv += ov;
            }
            let h = layer_norm(&x, s.get(b.ln2_g).data(), s.get(b.ln2_b).data());
            let f: Vec<f64> = linear(&h, s.get(b.w_fc1).data(), s.get(b.b_fc1).data()).into_iter().map(gelu).collect();
            let f = linear(&f, s.get(b.w_fc2).data(), s.get(b.b_fc2).data());
            for (xv, fv) in x.iter_mut().zip(&f) {
                *xv += fv;
            }
        }
        let x = layer_norm(&x, s.get(p.lnf_g).data(), s.get(p.lnf_b).data());
        self.len += 1;
        Ok(linear(&x, s.get(p.w_out).data(), s.get(p.b_out).data()))
    }

    /// Records the gate decision for a token without running the network;
    /// used for the final sampled token, which is never fed back.
    fn note(&mut self, token: TokenId) {
        let inj = if self.enabled { self.gate.next(self.vocab, token) } else { Injection::None };
        self.injection_log.push(inj);
    }

    /// Number of part-evidence injections so far.
    pub fn part_injections(&self) -> usize {
        self.injection_log.iter().filter(|i| matches!(i, Injection::Part(_))).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingConfig {
    pub temperature: f64,
    /// Argmax decoding; `temperature` is ignored.
    pub greedy: bool,
    /// Maximum number of generated tokens.
    pub max_len: usize,
    pub seed: u64,
}

impl SamplingConfig {
    pub fn greedy(max_len: usize) -> Self {
        Self { temperature: 1.0, greedy: true, max_len, seed: 0 }
    }

    pub fn sampled(temperature: f64, max_len: usize, seed: u64) -> Self {
        Self { temperature, greedy: false, max_len, seed }
    }
}

#[derive(Clone, Debug)]
pub struct Generation {
    pub transcript: Transcript,
    /// Untempered log-probability of each generated token.
    pub logprobs: Vec<f64>,
    pub prompt_len: usize,
    /// Injection decision at every position of the final sequence.
    pub injection_log: Vec<Injection>,
}

impl Generation {
    pub fn response(&self) -> &[TokenId] {
        &self.transcript.tokens[self.prompt_len..]
    }

    pub fn logprob(&self) -> f64 {
        self.logprobs.iter().sum()
    }

    pub fn part_injections(&self) -> usize {
        self.injection_log.iter().filter(|i| matches!(i, Injection::Part(_))).count()
    }
}

fn sample(logits: &[f64], cfg: &SamplingConfig, rng: &mut ChaCha8Rng) -> usize {
    if cfg.greedy {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let scaled: Vec<f64> = logits.iter().map(|v| v / cfg.temperature).collect();
    let probs = crate::numerics::tensor::softmax(&scaled);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Samples a response after `prompt`. Stops at `<eos>`, after `max_len`
/// tokens, or at the context limit.
pub fn generate(
    policy: &Policy,
    store: &ParamStore,
    vocab: &Vocab,
    prompt: &[TokenId],
    bundle: Option<&EvidenceBundle>,
    mode: InjectionMode,
    cfg: &SamplingConfig,
) -> Result<Generation> {
    if !cfg.greedy && !(cfg.temperature > 0.0 && cfg.temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {}", cfg.temperature)));
    }
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("empty prompt".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dec = Decoder::new(policy, store, vocab, bundle, mode);
    let mut tokens = prompt.to_vec();
    let mut logits = Vec::new();
    for &t in prompt {
        logits = dec.step(t)?;
    }
    let mut logprobs = Vec::new();
    while logprobs.len() < cfg.max_len {
        let next = sample(&logits, cfg, &mut rng);
        logprobs.push(log_softmax(&logits)[next]);
        tokens.push(next as TokenId);
        if next as TokenId == EOS || logprobs.len() == cfg.max_len || tokens.len() >= policy.context {
            dec.note(next as TokenId);
            break;
        }
        logits = dec.step(next as TokenId)?;
    }
    Ok(Generation {
        transcript: parse(vocab, &tokens),
        logprobs,
        prompt_len: prompt.len(),
        injection_log: dec.injection_log,
    })
}

/// Teacher-forced log-probabilities of `tokens[start..]`, without a tape.
pub fn sequence_logprob(
    policy: &Policy,
    store: &ParamStore,
    vocab: &Vocab,
    tokens: &[TokenId],
    start: usize,
    bundle: Option<&EvidenceBundle>,
    mode: InjectionMode,
) -> Result<(f64, Vec<f64>)> {
    if start == 0 || start >= tokens.len() {
        return Err(Error::InvalidArgument(format!("scored span starts at {start} of {}", tokens.len())));
    }
    let mut dec = Decoder::new(policy, store, vocab, bundle, mode);
    let mut out = Vec::with_capacity(tokens.len() - start);
    for (i, &t) in tokens[..tokens.len() - 1].iter().enumerate() {
        let logits = dec.step(t)?;
        if i + 1 >= start {
            out.push(log_softmax(&logits)[tokens[i + 1] as usize]);
        }
    }
    Ok((out.iter().sum(), out))
}
