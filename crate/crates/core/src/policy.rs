//! Reasoning policy: a small pre-LN causal transformer over the closed
//! vocabulary, conditioned on a modality token, per-finding image slots and
//! the question. Training runs on the tape; decoding uses an incremental
//! key/value cache built from the same kernels, so both paths agree bit for bit.

use std::path::Path;

use neuralcore::{
    attend_row, layer_norm_row, load_checkpoint, log_softmax_row, matmul, save_checkpoint, Graph, NodeId, ParamSet,
    Real, Tensor,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GenError, Result};
use crate::seeding::rng_for;
use crate::world::vocab::{BOS, EOS, IMG, PAD};
use crate::world::{tok, vocab, Provenance, Question, SynthImage, Token, VqaTriplet, GRID};

pub const N_SLOTS: usize = 6;
pub const SLOT_DIM: usize = 26;
pub const QUESTION_LEN: usize = 8;
/// Modality token, image slots, padded question and BOS.
pub const VQA_PREFIX_LEN: usize = 1 + N_SLOTS + QUESTION_LEN + 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub vocab: usize,
    pub eos: u16,
    pub prefix_len: usize,
    pub max_answer: usize,
    pub d_embed: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
}

impl PolicyConfig {
    pub fn vqa() -> Self {
        PolicyConfig {
            vocab: vocab().len(),
            eos: EOS.0,
            prefix_len: VQA_PREFIX_LEN,
            max_answer: 24,
            d_embed: 32,
            d_model: 64,
            heads: 2,
            layers: 2,
            d_ff: 128,
        }
    }

    pub fn max_positions(&self) -> usize {
        self.prefix_len + self.max_answer
    }

    pub fn descriptor(&self) -> String {
        format!(
            "policy v{} eos{} p{} a{} e{} d{} h{} l{} f{}",
            self.vocab, self.eos, self.prefix_len, self.max_answer, self.d_embed, self.d_model, self.heads, self.layers, self.d_ff
        )
    }

    pub fn parse_descriptor(s: &str) -> Result<Self> {
        let bad = || GenError::Integrity(format!("unrecognized policy descriptor {s:?}"));
        let mut parts = s.split_whitespace();
        if parts.next() != Some("policy") {
            return Err(bad());
        }
        let mut field = |prefix: &str| -> Result<usize> {
            parts.next().and_then(|p| p.strip_prefix(prefix)).and_then(|v| v.parse().ok()).ok_or_else(bad)
        };
        Ok(PolicyConfig {
            vocab: field("v")?,
            eos: field("eos")? as u16,
            prefix_len: field("p")?,
            max_answer: field("a")?,
            d_embed: field("e")?,
            d_model: field("d")?,
            heads: field("h")?,
            layers: field("l")?,
            d_ff: field("f")?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(GenError::Config("d_model must divide into heads".into()));
        }
        if (self.eos as usize) >= self.vocab || self.prefix_len == 0 || self.max_answer == 0 {
            return Err(GenError::Config("policy vocabulary, prefix and answer cap must be consistent".into()));
        }
        Ok(())
    }
}

/// Conditioning prefix: tokens plus optional slot features per position.
#[derive(Clone, Debug, PartialEq)]
pub struct Context {
    pub tokens: Vec<Token>,
    pub slots: Vec<Option<[f32; SLOT_DIM]>>,
}

pub fn slot_features(image: &SynthImage) -> Vec<Option<[f32; SLOT_DIM]>> {
    (0..N_SLOTS)
        .map(|i| {
            let f = image.findings.get(i)?;
            let mut x = [0f32; SLOT_DIM];
            x[0] = 1.0;
            x[1 + f.shape as usize] = 1.0;
            x[5 + f.intensity as usize] = 1.0;
            x[8 + f.size as usize] = 1.0;
            x[10 + f.row as usize] = 1.0;
            x[10 + GRID + f.col as usize] = 1.0;
            Some(x)
        })
        .collect()
}

impl Context {
    pub fn vqa(image: &SynthImage, question: &Question) -> Result<Self> {
        if question.tokens.len() > QUESTION_LEN {
            return Err(GenError::Data(format!("question of {} tokens exceeds {QUESTION_LEN}", question.tokens.len())));
        }
        let mut tokens = vec![tok(image.modality.word())];
        tokens.extend([IMG; N_SLOTS]);
        tokens.extend(&question.tokens);
        tokens.resize(1 + N_SLOTS + QUESTION_LEN, PAD);
        tokens.push(BOS);
        let mut slots = vec![None];
        slots.extend(slot_features(image));
        slots.resize(tokens.len(), None);
        Ok(Context { tokens, slots })
    }

    pub fn of(t: &VqaTriplet) -> Result<Self> {
        Context::vqa(&t.image, &t.question)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNet {
    pub cfg: PolicyConfig,
    pub params: ParamSet<f32>,
}

/// Indices of parameters in registration order.
struct Idx {
    tok: usize,
    w_in: usize,
    w_img: usize,
    pos: usize,
    layers: Vec<[usize; 8]>,
    head: usize,
    head_b: usize,
}

fn idx(cfg: &PolicyConfig) -> Idx {
    let layers = (0..cfg.layers).map(|l| std::array::from_fn(|j| 4 + l * 8 + j)).collect();
    let after = 4 + cfg.layers * 8;
    Idx { tok: 0, w_in: 1, w_img: 2, pos: 3, layers, head: after, head_b: after + 1 }
}

impl PolicyNet {
    pub fn new(cfg: PolicyConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(seed, &[0x706f6c]);
        let mut p = ParamSet::new();
        let glorot = |a: usize, b: usize| (6.0 / (a + b) as f64).sqrt();
        let (v, e, d, f) = (cfg.vocab, cfg.d_embed, cfg.d_model, cfg.d_ff);
        p.insert_uniform("tok", &[v, e], 3f64.sqrt(), &mut rng);
        p.insert_uniform("w_in", &[e, d], glorot(e, d), &mut rng);
        p.insert_uniform("w_img", &[SLOT_DIM, d], glorot(SLOT_DIM, d), &mut rng);
        p.insert_uniform("pos", &[cfg.max_positions(), d], 0.5, &mut rng);
        for l in 0..cfg.layers {
            for w in ["wq", "wk", "wv", "wo"] {
                p.insert_uniform(format!("l{l}.{w}"), &[d, d], glorot(d, d), &mut rng);
            }
            p.insert_uniform(format!("l{l}.w1"), &[d, f], glorot(d, f), &mut rng);
            p.insert_zeros(format!("l{l}.b1"), &[f]);
            p.insert_uniform(format!("l{l}.w2"), &[f, d], glorot(f, d), &mut rng);
            p.insert_zeros(format!("l{l}.b2"), &[d]);
        }
        p.insert_uniform("head", &[d, v], glorot(d, v), &mut rng);
        p.insert_zeros("head_b", &[v]);
        Ok(PolicyNet { cfg, params: p })
    }

    pub fn eos(&self) -> Token {
        Token(self.cfg.eos)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(save_checkpoint(path, &self.cfg.descriptor(), &self.params)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        let cfg = PolicyConfig::parse_descriptor(&ck.arch)?;
        let fresh = PolicyNet::new(cfg.clone(), 0)?;
        if fresh.params.names() != ck.params.names() {
            return Err(GenError::Integrity("policy checkpoint parameters do not match its descriptor".into()));
        }
        Ok(PolicyNet { cfg, params: ck.params })
    }

    fn check_len(&self, ctx: &Context, answer_len: usize) -> Result<()> {
        if ctx.tokens.len() != self.cfg.prefix_len || ctx.slots.len() != ctx.tokens.len() {
            return Err(GenError::Data(format!("context of {} tokens, expected {}", ctx.tokens.len(), self.cfg.prefix_len)));
        }
        if answer_len > self.cfg.max_answer {
            return Err(GenError::Data(format!("answer of {answer_len} tokens exceeds cap {}", self.cfg.max_answer)));
        }
        if let Some(t) = ctx.tokens.iter().find(|t| t.index() >= self.cfg.vocab) {
            return Err(GenError::Data(format!("token id {} outside the policy vocabulary", t.0)));
        }
        Ok(())
    }
}

/// One training sequence: context plus the full answer to be predicted.
pub struct SeqExample<'a> {
    pub ctx: &'a Context,
    pub answer: &'a [Token],
}

/// Taped forward over a padded batch. Returns logits `[n, V]` for every
/// answer position, stacked sequence by sequence, plus the target tokens in
/// the same order.
pub fn batch_logits<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    cfg: &PolicyConfig,
    batch: &[SeqExample<'_>],
) -> Result<(NodeId, Vec<usize>)> {
    let p = cfg.prefix_len;
    let longest = batch.iter().map(|s| s.answer.len()).max().unwrap_or(0);
    if longest == 0 {
        return Err(GenError::Data("batch holds no answer tokens".into()));
    }
    if longest > cfg.max_answer {
        return Err(GenError::Data(format!("answer of {longest} tokens exceeds cap {}", cfg.max_answer)));
    }
    // The last answer token is only ever a target.
    let seq = p + longest - 1;
    let b = batch.len();
    let d = cfg.d_model;
    let mut toks = Vec::with_capacity(b * seq);
    let mut slot_data = vec![T::zero(); b * seq * SLOT_DIM];
    let mut positions = Vec::with_capacity(b * seq);
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (bi, s) in batch.iter().enumerate() {
        if s.ctx.tokens.len() != p {
            return Err(GenError::Data(format!("context of {} tokens, expected {p}", s.ctx.tokens.len())));
        }
        for i in 0..seq {
            let t = if i < p { s.ctx.tokens[i] } else { s.answer.get(i - p).copied().unwrap_or(PAD) };
            if t.index() >= cfg.vocab {
                return Err(GenError::Data(format!("token id {} outside the policy vocabulary", t.0)));
            }
            toks.push(t.index());
            positions.push(i);
            if let Some(Some(f)) = s.ctx.slots.get(i) {
                let off = (bi * seq + i) * SLOT_DIM;
                for (dst, &x) in slot_data[off..off + SLOT_DIM].iter_mut().zip(f) {
                    *dst = T::of_f64(x as f64);
                }
            }
        }
        for (j, &t) in s.answer.iter().enumerate() {
            rows.push(bi * seq + p - 1 + j);
            targets.push(t.index());
        }
    }
    let ix = idx(cfg);
    let tok_w = g.param_at(params, ix.tok);
    let emb = g.gather_rows(tok_w, &toks);
    let w_in = g.param_at(params, ix.w_in);
    let mut x = g.matmul(emb, w_in);
    let slots = g.constant(Tensor::new(vec![b * seq, SLOT_DIM], slot_data)?);
    let w_img = g.param_at(params, ix.w_img);
    let sp = g.matmul(slots, w_img);
    x = g.add(x, sp);
    let pos_w = g.param_at(params, ix.pos);
    let pos = g.gather_rows(pos_w, &positions);
    x = g.add(x, pos);
    for l in &ix.layers {
        let [wq, wk, wv, wo, w1, b1, w2, b2] = l.map(|i| g.param_at(params, i));
        let a = g.layer_norm(x);
        let q = g.matmul(a, wq);
        let k = g.matmul(a, wk);
        let v = g.matmul(a, wv);
        let att = g.causal_attention(q, k, v, b, seq, cfg.heads);
        let o = g.matmul(att, wo);
        x = g.add(x, o);
        let a2 = g.layer_norm(x);
        let h = g.matmul(a2, w1);
        let h = g.add_row(h, b1);
        let h = g.tanh(h);
        let h = g.matmul(h, w2);
        let h = g.add_row(h, b2);
        x = g.add(x, h);
    }
    debug_assert_eq!(g.value(x).cols(), d);
    let picked = g.gather_rows(x, &rows);
    let nrm = g.layer_norm(picked);
    let head = g.param_at(params, ix.head);
    let head_b = g.param_at(params, ix.head_b);
    let logits = g.matmul(nrm, head);
    Ok((g.add_row(logits, head_b), targets))
}

pub fn batch_log_probs<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    cfg: &PolicyConfig,
    batch: &[SeqExample<'_>],
) -> Result<(NodeId, Vec<usize>)> {
    let (logits, targets) = batch_logits(g, params, cfg, batch)?;
    Ok((g.log_softmax(logits), targets))
}

/// Per-token log-probabilities of the answers, as a vector node.
pub fn batch_token_logprobs<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    cfg: &PolicyConfig,
    batch: &[SeqExample<'_>],
) -> Result<NodeId> {
    let (lp, targets) = batch_log_probs(g, params, cfg, batch)?;
    Ok(g.pick_cols(lp, &targets))
}

/// Mean next-token negative log-likelihood over every answer token.
pub fn nll_loss<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    cfg: &PolicyConfig,
    batch: &[SeqExample<'_>],
) -> Result<NodeId> {
    let picked = batch_token_logprobs(g, params, cfg, batch)?;
    let m = g.mean(picked);
    Ok(g.scale(m, -1.0))
}

/// Incremental decoder holding per-layer key/value rows.
#[derive(Clone)]
pub struct Decoder<'a> {
    net: &'a PolicyNet,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
    last: Vec<f32>,
}

fn row_mul(x: &[f32], w: &Tensor<f32>) -> Vec<f32> {
    matmul(x, w.data(), 1, x.len(), w.cols())
}

fn add_in(x: &mut [f32], y: &[f32]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

impl<'a> Decoder<'a> {
    pub fn new(net: &'a PolicyNet, ctx: &Context) -> Result<Self> {
        net.check_len(ctx, 0)?;
        let mut dec = Decoder {
            net,
            keys: vec![Vec::new(); net.cfg.layers],
            values: vec![Vec::new(); net.cfg.layers],
            len: 0,
            last: Vec::new(),
        };
        for (t, s) in ctx.tokens.iter().zip(&ctx.slots) {
            dec.push(*t, s.as_ref())?;
        }
        Ok(dec)
    }

    pub fn position(&self) -> usize {
        self.len
    }

    fn push(&mut self, t: Token, slot: Option<&[f32; SLOT_DIM]>) -> Result<()> {
        let cfg = &self.net.cfg;
        if self.len >= cfg.max_positions() {
            return Err(GenError::Data("decoder context overflow".into()));
        }
        if t.index() >= cfg.vocab {
            return Err(GenError::Data(format!("token id {} outside the policy vocabulary", t.0)));
        }
        let p = &self.net.params;
        let ix = idx(cfg);
        let d = cfg.d_model;
        let e = cfg.d_embed;
        let emb = &p.value(ix.tok).data()[t.index() * e..(t.index() + 1) * e];
        let mut x = row_mul(emb, p.value(ix.w_in));
        let zeros = [0f32; SLOT_DIM];
        add_in(&mut x, &row_mul(slot.unwrap_or(&zeros), p.value(ix.w_img)));
        add_in(&mut x, &p.value(ix.pos).data()[self.len * d..(self.len + 1) * d]);
        let dh = d / cfg.heads;
        let scale = f32::of_f64(1.0 / (dh as f64).sqrt());
        let mut a = vec![0f32; d];
        let mut probs = vec![0f32; self.len + 1];
        let mut head_out = vec![0f32; dh];
        for (l, w) in ix.layers.iter().enumerate() {
            layer_norm_row(&x, &mut a);
            let q = row_mul(&a, p.value(w[0]));
            self.keys[l].extend(row_mul(&a, p.value(w[1])));
            self.values[l].extend(row_mul(&a, p.value(w[2])));
            let mut att = vec![0f32; d];
            for h in 0..cfg.heads {
                let col = h * dh;
                attend_row(&q[col..col + dh], &self.keys[l], &self.values[l], d, col, self.len + 1, scale, &mut probs, &mut head_out);
                att[col..col + dh].copy_from_slice(&head_out);
            }
            add_in(&mut x, &row_mul(&att, p.value(w[3])));
            layer_norm_row(&x, &mut a);
            let mut hdn = row_mul(&a, p.value(w[4]));
            add_in(&mut hdn, p.value(w[5]).data());
            hdn.iter_mut().for_each(|v| *v = v.tanh());
            let mut out = row_mul(&hdn, p.value(w[6]));
            add_in(&mut out, p.value(w[7]).data());
            add_in(&mut x, &out);
        }
        self.len += 1;
        self.last = x;
        Ok(())
    }

    /// Feeds an answer token.
    pub fn feed(&mut self, t: Token) -> Result<()> {
        self.push(t, None)
    }

    /// Log-probabilities of the next token.
    pub fn next_log_probs(&self) -> Vec<f32> {
        let p = &self.net.params;
        let ix = idx(&self.net.cfg);
        let mut a = vec![0f32; self.last.len()];
        layer_norm_row(&self.last, &mut a);
        let mut logits = row_mul(&a, p.value(ix.head));
        add_in(&mut logits, p.value(ix.head_b).data());
        let mut out = vec![0f32; logits.len()];
        log_softmax_row(&logits, &mut out);
        out
    }

    /// Raw logits of the next token.
    pub fn next_logits(&self) -> Vec<f32> {
        let p = &self.net.params;
        let ix = idx(&self.net.cfg);
        let mut a = vec![0f32; self.last.len()];
        layer_norm_row(&self.last, &mut a);
        let mut logits = row_mul(&a, p.value(ix.head));
        add_in(&mut logits, p.value(ix.head_b).data());
        logits
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Decode {
    Greedy,
    Sample { temperature: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Completion {
    pub tokens: Vec<Token>,
    /// Untempered log-probability of each emitted token.
    pub logprobs: Vec<f32>,
    pub terminated: bool,
}

impl Completion {
    pub fn logprob(&self) -> f64 {
        self.logprobs.iter().map(|&x| x as f64).sum()
    }
}

fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_index<R: Rng>(logp: &[f32], temperature: f64, rng: &mut R) -> usize {
    let scaled: Vec<f64> = logp.iter().map(|&l| l as f64 / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    crate::world::image::draw(&w, rng)
}

/// Continues decoding from `dec` until EOS or the length cap.
pub fn complete<R: Rng>(mut dec: Decoder<'_>, mode: Decode, rng: &mut R) -> Result<Completion> {
    let cap = dec.net.cfg.max_answer;
    let eos = dec.net.eos();
    let mut out = Completion { tokens: Vec::new(), logprobs: Vec::new(), terminated: false };
    while out.tokens.len() < cap {
        let lp = dec.next_log_probs();
        let i = match mode {
            Decode::Greedy => argmax(&lp),
            Decode::Sample { temperature } => {
                if !(temperature > 0.0) {
                    return Err(GenError::Config("sampling temperature must be positive".into()));
                }
                sample_index(&lp, temperature, rng)
            }
        };
        let t = Token(i as u16);
        out.tokens.push(t);
        out.logprobs.push(lp[i]);
        if t == eos {
            out.terminated = true;
            break;
        }
        if out.tokens.len() < cap {
            dec.feed(t)?;
        }
    }
    Ok(out)
}

pub fn sample_answer(net: &PolicyNet, ctx: &Context, mode: Decode, seed: u64) -> Result<Completion> {
    let dec = Decoder::new(net, ctx)?;
    complete(dec, mode, &mut rng_for(seed, &[0x736d70]))
}

/// Greedy answer for a triplet's image and question.
pub fn greedy_answer(net: &PolicyNet, image: &SynthImage, question: &Question) -> Result<Vec<Token>> {
    Ok(sample_answer(net, &Context::vqa(image, question)?, Decode::Greedy, 0)?.tokens)
}

/// Sum of per-token conditional log-probabilities of `answer`.
pub fn sequence_logprob(net: &PolicyNet, ctx: &Context, answer: &[Token]) -> Result<f64> {
    net.check_len(ctx, answer.len())?;
    let mut dec = Decoder::new(net, ctx)?;
    let mut total = 0f64;
    for (j, &t) in answer.iter().enumerate() {
        if t.index() >= net.cfg.vocab {
            return Err(GenError::Data(format!("token id {} outside the policy vocabulary", t.0)));
        }
        total += dec.next_log_probs()[t.index()] as f64;
        if j + 1 < answer.len() {
            dec.feed(t)?;
        }
    }
    Ok(total)
}

/// Logits `[len(prefix) + 1, V]` for each answer position given a prefix,
/// computed on the tape.
pub fn forward_logits(net: &PolicyNet, ctx: &Context, prefix: &[Token]) -> Result<Tensor<f32>> {
    net.check_len(ctx, prefix.len() + 1)?;
    let mut answer = prefix.to_vec();
    answer.push(PAD);
    let mut g = Graph::for_params(&net.params);
    let (logits, _) = batch_logits(&mut g, &net.params, &net.cfg, &[SeqExample { ctx, answer: &answer }])?;
    Ok(g.value(logits).clone())
}

pub fn completion_triplet(src: &VqaTriplet, c: &Completion) -> VqaTriplet {
    VqaTriplet {
        image: src.image.clone(),
        question: src.question.clone(),
        answer: c.tokens.clone(),
        provenance: Provenance::Policy,
        strategy: None,
    }
}
