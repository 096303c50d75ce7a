//! Reward-filtered supervised fine-tuning and group-relative policy optimization.

use neuralcore::{AdamConfig, Graph, NodeId, ParamSet, Real, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{GenError, Result};
use crate::policy::{
    batch_token_logprobs, complete, completion_triplet, nll_loss, Completion, Context, Decode, Decoder, PolicyConfig,
    PolicyNet, SeqExample,
};
use crate::rewardmodel::RewardNet;
use crate::seeding::rng_for;
use crate::world::{extract, format_answer, oracle_value, Token, VqaTriplet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Stop after this many optimizer steps regardless of epochs.
    pub max_steps: Option<usize>,
    pub clip_norm: Option<f64>,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig { epochs: 30, batch: 32, lr: 2e-3, seed: 0, max_steps: None, clip_norm: Some(1.0) }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || !(self.lr > 0.0) {
            return Err(GenError::Config("SFT epochs, batch and lr must be positive".into()));
        }
        Ok(())
    }
}

pub(crate) fn apply_grads<T: Real>(
    params: &mut ParamSet<T>,
    mut grads: neuralcore::Grads<T>,
    lr: f64,
    clip: Option<f64>,
) -> Result<()> {
    if let Some(c) = clip {
        grads.clip_global_norm(c);
    }
    params.adam_step(&grads, &AdamConfig::with_lr(lr))?;
    Ok(())
}

/// Next-token training on the answers; returns the mean batch loss of each epoch.
pub fn run_sft(net: &mut PolicyNet, data: &[VqaTriplet], cfg: &SftConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(GenError::Config("SFT data is empty".into()));
    }
    let ctxs: Vec<Context> = data.iter().map(Context::of).collect::<Result<_>>()?;
    let mut rng = rng_for(cfg.seed, &[0x736674]);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::new();
    let mut steps = 0usize;
    'outer: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                if n > 0 {
                    trace.push(sum / n as f64);
                }
                break 'outer;
            }
            let batch: Vec<SeqExample> =
                chunk.iter().map(|&i| SeqExample { ctx: &ctxs[i], answer: &data[i].answer }).collect();
            let mut g = Graph::for_params(&net.params);
            let loss = nll_loss(&mut g, &net.params, &net.cfg, &batch)?;
            let lv = g.value(loss).item() as f64;
            if !lv.is_finite() {
                return Err(GenError::Training(format!("SFT loss became {lv}")));
            }
            let grads = g.backward(loss)?;
            apply_grads(&mut net.params, grads, cfg.lr, cfg.clip_norm)?;
            sum += lv;
            n += 1;
            steps += 1;
        }
        trace.push(sum / n.max(1) as f64);
    }
    Ok(trace)
}

/// Loss node of a batch, exposed for gradient checks.
pub fn sft_loss<T: Real>(g: &mut Graph<T>, params: &ParamSet<T>, net: &PolicyNet, batch: &[SeqExample<'_>]) -> Result<NodeId> {
    nll_loss(g, params, &net.cfg, batch)
}

/// Eq. 3 composition: `alpha · rm_score + beta · matched`.
pub fn composite_reward(rm_score: f64, matched: bool, alpha: f64, beta: f64) -> f64 {
    alpha * rm_score + beta * if matched { 1.0 } else { 0.0 }
}

/// Whether both answers extract to the same valid value.
pub fn extract_match(answer: &[Token], oracle: &[Token]) -> bool {
    matches!((extract(answer), extract(oracle)), (Some(a), Some(b)) if a == b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    Std,
    MeanOnly,
}

/// Group-relative advantages with population standard deviation. Groups
/// whose spread is below `eps` get all-zero advantages; otherwise the spread
/// divides exactly, so standardized groups have unit deviation.
pub fn group_advantages(rewards: &[f64], eps: f64, mode: AdvantageMode) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std < eps {
        return vec![0.0; rewards.len()];
    }
    match mode {
        AdvantageMode::Std => rewards.iter().map(|r| (r - mean) / std).collect(),
        AdvantageMode::MeanOnly => rewards.iter().map(|r| r - mean).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub group: usize,
    pub clip: f64,
    pub kl_coef: f64,
    pub alpha: f64,
    pub beta: f64,
    pub temperature: f64,
    pub steps: usize,
    pub prompts_per_step: usize,
    pub lr: f64,
    pub seed: u64,
    pub adv_eps: f64,
    pub advantage_mode: AdvantageMode,
    pub clip_norm: Option<f64>,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group: 8,
            clip: 0.2,
            kl_coef: 0.04,
            alpha: 0.8,
            beta: 0.2,
            temperature: 1.0,
            steps: 100,
            prompts_per_step: 8,
            lr: 1e-4,
            seed: 0,
            adv_eps: 1e-6,
            advantage_mode: AdvantageMode::Std,
            clip_norm: Some(1.0),
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group < 2 {
            return Err(GenError::Config("GRPO group size must be at least 2".into()));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(GenError::Config("clip ratio must lie in (0, 1)".into()));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.kl_coef < 0.0 {
            return Err(GenError::Config("alpha, beta and the KL coefficient must be non-negative".into()));
        }
        if !(self.temperature > 0.0) || !(self.lr > 0.0) || self.prompts_per_step == 0 {
            return Err(GenError::Config("temperature, lr and prompts per step must be positive".into()));
        }
        Ok(())
    }
}

/// Scores a group of completions for one prompt.
pub trait RewardFn {
    fn rewards(&self, prompt: usize, completions: &[Completion]) -> Result<Vec<f64>>;
}

/// Composite reward over VQA prompts using a reward model and the oracle.
pub struct CompositeReward<'a> {
    pub rm: &'a RewardNet,
    pub prompts: &'a [VqaTriplet],
    pub alpha: f64,
    pub beta: f64,
}

impl RewardFn for CompositeReward<'_> {
    fn rewards(&self, prompt: usize, completions: &[Completion]) -> Result<Vec<f64>> {
        let src = &self.prompts[prompt];
        let oracle = format_answer(&[], oracle_value(&src.image, &src.question));
        let triplets: Vec<VqaTriplet> = completions.iter().map(|c| completion_triplet(src, c)).collect();
        let scores = self.rm.score_all(&triplets)?;
        Ok(scores
            .iter()
            .zip(completions)
            .map(|(&s, c)| composite_reward(s, extract_match(&c.tokens, &oracle), self.alpha, self.beta))
            .collect())
    }
}

/// G sampled completions for one prompt with everything the loss needs.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupRollout {
    pub prompt: usize,
    pub completions: Vec<Completion>,
    pub ref_logprobs: Vec<Vec<f32>>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// Per-token log-probabilities of `answer` under `net`.
pub fn token_logprobs(net: &PolicyNet, ctx: &Context, answer: &[Token]) -> Result<Vec<f32>> {
    let mut dec = Decoder::new(net, ctx)?;
    let mut out = Vec::with_capacity(answer.len());
    for (j, &t) in answer.iter().enumerate() {
        out.push(dec.next_log_probs()[t.index()]);
        if j + 1 < answer.len() {
            dec.feed(t)?;
        }
    }
    Ok(out)
}

pub fn rollout_group(
    net: &PolicyNet,
    reference: &PolicyNet,
    reward: &dyn RewardFn,
    prompt: usize,
    ctx: &Context,
    cfg: &GrpoConfig,
    seed: u64,
) -> Result<GroupRollout> {
    let dec = Decoder::new(net, ctx)?;
    let mode = Decode::Sample { temperature: cfg.temperature };
    let completions = (0..cfg.group)
        .map(|i| complete(dec.clone(), mode, &mut rng_for(seed, &[prompt as u64, i as u64])))
        .collect::<Result<Vec<_>>>()?;
    let ref_logprobs =
        completions.iter().map(|c| token_logprobs(reference, ctx, &c.tokens)).collect::<Result<Vec<_>>>()?;
    let rewards = reward.rewards(prompt, &completions)?;
    let advantages = group_advantages(&rewards, cfg.adv_eps, cfg.advantage_mode);
    Ok(GroupRollout { prompt, completions, ref_logprobs, rewards, advantages })
}

/// Clipped surrogate plus KL penalty, averaged over tokens within each
/// completion and then over completions.
pub fn grpo_loss<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    policy: &PolicyConfig,
    ctxs: &[Context],
    rollouts: &[GroupRollout],
    cfg: &GrpoConfig,
) -> Result<GrpoLossParts> {
    let mut batch = Vec::new();
    let (mut old, mut adv, mut refq, mut weight) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let n_completions: usize = rollouts.iter().map(|r| r.completions.len()).sum();
    for r in rollouts {
        for ((c, a), q) in r.completions.iter().zip(&r.advantages).zip(&r.ref_logprobs) {
            batch.push(SeqExample { ctx: &ctxs[r.prompt], answer: &c.tokens });
            let w = 1.0 / (n_completions as f64 * c.tokens.len() as f64);
            for (&lp, &ql) in c.logprobs.iter().zip(q) {
                old.push(T::of_f64(lp as f64));
                adv.push(T::of_f64(*a));
                refq.push(T::of_f64(ql as f64));
                weight.push(T::of_f64(w));
            }
        }
    }
    let p = batch_token_logprobs(g, params, policy, &batch)?;
    let ratio_ok = g.value(p).data().iter().zip(&old).all(|(&l, &o)| (l - o).exp().is_finite());
    if !ratio_ok {
        return Err(GenError::Training("non-finite probability ratio".into()));
    }
    let n = old.len();
    let surr = g.clipped_surrogate(p, &old, &adv, cfg.clip);
    let q = g.constant(Tensor::new(vec![n], refq)?);
    let diff = g.sub(q, p);
    let e = g.exp(diff);
    let kl = g.sub(e, diff);
    let kl = g.add_scalar(kl, -1.0);
    let w = g.constant(Tensor::new(vec![n], weight)?);
    let ws = g.mul(surr, w);
    let surr_mean = g.sum(ws);
    let wk = g.mul(kl, w);
    let kl_mean = g.sum(wk);
    let neg = g.scale(surr_mean, -1.0);
    let pen = g.scale(kl_mean, cfg.kl_coef);
    let loss = g.add(neg, pen);
    Ok(GrpoLossParts { loss, kl: kl_mean, per_token_kl: kl, surrogate: surr })
}

pub struct GrpoLossParts {
    pub loss: NodeId,
    pub kl: NodeId,
    pub per_token_kl: NodeId,
    pub surrogate: NodeId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrpoStep {
    pub step: usize,
    pub mean_reward: f64,
    pub loss: f64,
    pub kl: f64,
}

/// Bandit over a three-token vocabulary: one prompt token, single-token
/// answers, fixed reward per answer token.
pub struct ToyBandit {
    pub payoff: [f64; 3],
}

impl ToyBandit {
    pub fn policy_config() -> PolicyConfig {
        PolicyConfig { vocab: 3, eos: 0, prefix_len: 1, max_answer: 1, d_embed: 4, d_model: 8, heads: 2, layers: 1, d_ff: 8 }
    }

    pub fn context() -> Context {
        Context { tokens: vec![Token(0)], slots: vec![None] }
    }

    /// Answer with the highest payoff, by enumeration.
    pub fn optimal(&self) -> Token {
        let best = (0..3).max_by(|&a, &b| self.payoff[a].total_cmp(&self.payoff[b])).unwrap_or(0);
        Token(best as u16)
    }

    /// Expected payoff of the current policy, by enumeration.
    pub fn expected(&self, net: &PolicyNet) -> Result<f64> {
        let lp = Decoder::new(net, &ToyBandit::context())?.next_log_probs();
        Ok(lp.iter().zip(&self.payoff).map(|(&l, p)| (l as f64).exp() * p).sum())
    }
}

impl RewardFn for ToyBandit {
    fn rewards(&self, _prompt: usize, completions: &[Completion]) -> Result<Vec<f64>> {
        Ok(completions.iter().map(|c| c.tokens.first().map_or(0.0, |t| self.payoff[t.index()])).collect())
    }
}

/// Runs GRPO from `net` against a frozen `reference`; returns one row per step.
pub fn run_grpo(
    net: &mut PolicyNet,
    reference: &PolicyNet,
    reward: &dyn RewardFn,
    ctxs: &[Context],
    cfg: &GrpoConfig,
) -> Result<Vec<GrpoStep>> {
    cfg.validate()?;
    if ctxs.is_empty() {
        return Err(GenError::Config("GRPO needs at least one prompt".into()));
    }
    let mut order: Vec<usize> = (0..ctxs.len()).collect();
    let mut rng = rng_for(cfg.seed, &[0x677270]);
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rollouts = Vec::with_capacity(cfg.prompts_per_step);
        for k in 0..cfg.prompts_per_step {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let prompt = order[cursor];
            cursor += 1;
            let seed = crate::seeding::derive_seed(cfg.seed, &[0x726f6c, step as u64, k as u64]);
            rollouts.push(rollout_group(net, reference, reward, prompt, &ctxs[prompt], cfg, seed)?);
        }
        let mean_reward = rollouts.iter().flat_map(|r| &r.rewards).sum::<f64>()
            / (rollouts.len() * cfg.group) as f64;
        let mut g = Graph::for_params(&net.params);
        let parts = grpo_loss(&mut g, &net.params, &net.cfg, ctxs, &rollouts, cfg)?;
        let loss = g.value(parts.loss).item() as f64;
        if !loss.is_finite() {
            return Err(GenError::Training(format!("GRPO loss became {loss}")));
        }
        let kl = g.value(parts.kl).item() as f64;
        let grads = g.backward(parts.loss)?;
        apply_grads(&mut net.params, grads, cfg.lr, cfg.clip_norm)?;
        trace.push(GrpoStep { step, mean_reward, loss, kl });
    }
    Ok(trace)
}
