//! Reward model: sparse triplet features, a tanh MLP regressor squashed into
//! (−6, 10), MSE training and continual adaptation with replay.

use std::path::Path;

use neuralcore::{
    load_checkpoint, matmul, mlp_forward, save_checkpoint, Activation, AdamConfig, Graph, LayerSpec, ParamSet, Tensor,
};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GenError, Result};
use crate::gradecorpus::GradedExample;
use crate::seeding::rng_for;
use crate::world::vocab::{ANS, END_ANS};
use crate::world::{extract, has_rationale, oracle_value, vocab, VqaTriplet, GRID};

pub const CELL_STATES: usize = 25;
pub const MAX_ANSWER_LEN: usize = 24;
pub const SCORE_MIN: f64 = -6.0;
pub const SCORE_MAX: f64 = 10.0;
const PREFIX: &str = "rm";

/// grid_cells × cell_states + 2 × vocab + 3.
pub fn feature_dim() -> usize {
    GRID * GRID * CELL_STATES + 2 * vocab().len() + 3
}

/// Non-zero feature entries as (index, value) pairs.
pub fn featurize_sparse(t: &VqaTriplet) -> Result<Vec<(usize, f32)>> {
    let v = vocab().len();
    let grid = GRID * GRID * CELL_STATES;
    let mut out = Vec::with_capacity(GRID * GRID + 32);
    for r in 0..GRID {
        for c in 0..GRID {
            let state = match t.image.cell(r, c) {
                None => 0,
                Some(f) => 1 + f.shape as usize * 6 + f.intensity as usize * 2 + f.size as usize,
            };
            out.push(((r * GRID + c) * CELL_STATES + state, 1.0));
        }
    }
    let mut bag = |tokens: &[crate::world::Token], base: usize| -> Result<()> {
        let mut counts = vec![0f32; v];
        for &tk in tokens {
            *counts.get_mut(tk.index()).ok_or_else(|| GenError::Data(format!("token id {} not in vocabulary", tk.0)))? += 1.0;
        }
        out.extend(counts.iter().enumerate().filter(|(_, &x)| x > 0.0).map(|(i, &x)| (base + i, x)));
        Ok(())
    };
    bag(&t.question.tokens, grid)?;
    bag(&t.answer, grid + v)?;
    let a = &t.answer;
    let has_ans = a.iter().enumerate().any(|(i, &tk)| tk == ANS && a.get(i + 2) == Some(&END_ANS));
    let s = grid + 2 * v;
    out.push((s, has_rationale(a) as u8 as f32));
    out.push((s + 1, has_ans as u8 as f32));
    out.push((s + 2, a.len() as f32 / MAX_ANSWER_LEN as f32));
    Ok(out)
}

pub fn featurize(t: &VqaTriplet) -> Result<Vec<f32>> {
    let mut x = vec![0f32; feature_dim()];
    for (i, val) in featurize_sparse(t)? {
        x[i] = val;
    }
    Ok(x)
}

fn feature_batch(items: &[&VqaTriplet]) -> Result<Tensor> {
    let d = feature_dim();
    let mut data = vec![0f32; items.len() * d];
    for (row, t) in items.iter().enumerate() {
        for (i, val) in featurize_sparse(t)? {
            data[row * d + i] = val;
        }
    }
    Ok(Tensor::new(vec![items.len(), d], data)?)
}

pub fn squash(h: f64) -> f64 {
    let h = h.clamp(-30.0, 30.0);
    SCORE_MIN + (SCORE_MAX - SCORE_MIN) / (1.0 + (-h).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Decay the learning rate linearly to zero over the run.
    pub lr_decay: bool,
}

impl Default for RmTrainConfig {
    fn default() -> Self {
        RmTrainConfig { epochs: 80, lr: 2e-3, batch: 32, seed: 0, lr_decay: true }
    }
}

struct Schedule {
    base: f64,
    total: usize,
    done: usize,
    decay: bool,
}

impl Schedule {
    fn new(cfg: &RmTrainConfig, n: usize) -> Self {
        let per_epoch = n.div_ceil(cfg.batch.max(1));
        Schedule { base: cfg.lr, total: per_epoch * cfg.epochs, done: 0, decay: cfg.lr_decay }
    }

    fn next(&mut self) -> AdamConfig {
        let lr = if self.decay { self.base * (1.0 - self.done as f64 / self.total.max(1) as f64) } else { self.base };
        self.done += 1;
        AdamConfig::with_lr(lr)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardNet {
    pub spec: LayerSpec,
    pub params: ParamSet<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceRecord {
    pub triplet: VqaTriplet,
    pub target: f64,
    pub iteration: u32,
}

/// A labelled example for the regression loss.
pub trait ScoredExample {
    fn triplet(&self) -> &VqaTriplet;
    fn target(&self) -> f64;
}

impl ScoredExample for GradedExample {
    fn triplet(&self) -> &VqaTriplet {
        &self.triplet
    }
    fn target(&self) -> f64 {
        self.target_score
    }
}

impl ScoredExample for PreferenceRecord {
    fn triplet(&self) -> &VqaTriplet {
        &self.triplet
    }
    fn target(&self) -> f64 {
        self.target
    }
}

impl RewardNet {
    pub fn new(hidden: usize, seed: u64) -> Self {
        let spec = LayerSpec::new(
            feature_dim(),
            vec![(hidden, Activation::Tanh), (hidden, Activation::Tanh), (1, Activation::Identity)],
        );
        let mut params = ParamSet::new();
        spec.init_params(&mut params, PREFIX, &mut rng_for(seed, &[0x726d]));
        RewardNet { spec, params }
    }

    /// Head outputs before the squash.
    pub fn head_batch(&self, items: &[&VqaTriplet]) -> Result<Vec<f64>> {
        let mut x = feature_batch(items)?;
        for (i, (width, act)) in self.spec.layers.iter().enumerate() {
            let w = &self.params.value(2 * i);
            let b = &self.params.value(2 * i + 1);
            let mut z = matmul(x.data(), w.data(), x.rows(), x.cols(), *width);
            for row in z.chunks_mut(*width) {
                for (zi, &bi) in row.iter_mut().zip(b.data()) {
                    *zi += bi;
                    *zi = match act {
                        Activation::Identity => *zi,
                        Activation::Tanh => zi.tanh(),
                        Activation::Sigmoid => 1.0 / (1.0 + (-*zi).exp()),
                    };
                }
            }
            x = Tensor::new(vec![items.len(), *width], z)?;
        }
        Ok(x.data().iter().map(|&h| h as f64).collect())
    }

    pub fn score(&self, t: &VqaTriplet) -> Result<f64> {
        Ok(squash(self.head_batch(&[t])?[0]))
    }

    pub fn score_all(&self, items: &[VqaTriplet]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(256) {
            let refs: Vec<&VqaTriplet> = chunk.iter().collect();
            out.extend(self.head_batch(&refs)?.into_iter().map(squash));
        }
        Ok(out)
    }

    /// Mean squared error of the scores against the examples' targets.
    pub fn mse<E: ScoredExample>(&self, examples: &[E]) -> Result<f64> {
        if examples.is_empty() {
            return Ok(0.0);
        }
        let items: Vec<VqaTriplet> = examples.iter().map(|e| e.triplet().clone()).collect();
        let scores = self.score_all(&items)?;
        Ok(scores.iter().zip(examples).map(|(s, e)| (s - e.target()).powi(2)).sum::<f64>() / examples.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(save_checkpoint(path, &self.spec.descriptor(), &self.params)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        let spec = LayerSpec::parse_descriptor(&ck.arch)?;
        if spec.input != feature_dim() {
            return Err(GenError::Integrity(format!("reward checkpoint expects {} features", spec.input)));
        }
        Ok(RewardNet { spec, params: ck.params })
    }
}

/// Builds the MSE loss of a batch on a graph; generic so gradient checks can run in f64.
pub fn rm_loss<T: neuralcore::Real>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    spec: &LayerSpec,
    features: Tensor<T>,
    targets: &[f64],
) -> Result<neuralcore::NodeId> {
    let x = g.constant(features);
    let h = mlp_forward(g, params, PREFIX, x, spec)?;
    let s = g.sigmoid(h);
    let s = g.scale(s, SCORE_MAX - SCORE_MIN);
    let s = g.add_scalar(s, SCORE_MIN);
    let y = g.constant(Tensor::new(vec![targets.len(), 1], targets.iter().map(|&t| T::of_f64(t)).collect())?);
    let d = g.sub(s, y);
    let sq = g.square(d);
    Ok(g.mean(sq))
}

fn train_steps<E: ScoredExample>(
    net: &mut RewardNet,
    data: &[&E],
    cfg: &RmTrainConfig,
    sched: &mut Schedule,
    rng: &mut impl Rng,
) -> Result<()> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    for chunk in order.chunks(cfg.batch.max(1)) {
        let items: Vec<&VqaTriplet> = chunk.iter().map(|&i| data[i].triplet()).collect();
        let targets: Vec<f64> = chunk.iter().map(|&i| data[i].target()).collect();
        let mut g = Graph::for_params(&net.params);
        let loss = rm_loss(&mut g, &net.params, &net.spec, feature_batch(&items)?, &targets)?;
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(GenError::Training(format!("reward loss became {lv}")));
        }
        let grads = g.backward(loss)?;
        net.params.adam_step(&grads, &sched.next())?;
    }
    Ok(())
}

/// Trains on the examples; returns the full-set MSE after each epoch.
pub fn train_rm<E: ScoredExample>(net: &mut RewardNet, corpus: &[E], cfg: &RmTrainConfig) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(GenError::Config("reward corpus is empty".into()));
    }
    let refs: Vec<&E> = corpus.iter().collect();
    let mut rng = rng_for(cfg.seed, &[0x72746e]);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut sched = Schedule::new(cfg, refs.len());
    for _ in 0..cfg.epochs {
        train_steps(net, &refs, cfg, &mut sched, &mut rng)?;
        let mse = net.mse(corpus)?;
        if !mse.is_finite() {
            return Err(GenError::Training(format!("reward loss became {mse}")));
        }
        trace.push(mse);
    }
    Ok(trace)
}

/// Grade-ladder target for a policy answer: 10 correct with rationale, 6 correct
/// without, 0 wrong, −6 invalid or outside the task's domain.
pub fn derive_pref_target(t: &VqaTriplet) -> f64 {
    let truth = oracle_value(&t.image, &t.question);
    match extract(&t.answer) {
        Some(v) if t.question.task.in_domain(v) => {
            if v != truth {
                0.0
            } else if has_rationale(&t.answer) {
                10.0
            } else {
                6.0
            }
        }
        _ => -6.0,
    }
}

/// Fine-tunes on new preferences mixed 1:1 with replayed graded examples.
pub fn continual_update(
    net: &RewardNet,
    prefs: &[PreferenceRecord],
    replay: &[GradedExample],
    cfg: &RmTrainConfig,
) -> Result<RewardNet> {
    if prefs.is_empty() {
        return Ok(net.clone());
    }
    if replay.is_empty() {
        return Err(GenError::Config("continual update needs a non-empty replay set".into()));
    }
    let mut rng = rng_for(cfg.seed, &[0x636f6e]);
    let mixed: Vec<(VqaTriplet, f64)> = prefs
        .iter()
        .map(|p| (p.triplet.clone(), p.target))
        .chain((0..prefs.len()).map(|_| {
            let r = &replay[rng.gen_range(0..replay.len())];
            (r.triplet.clone(), r.target_score)
        }))
        .collect();
    let mixed: Vec<PreferenceRecord> =
        mixed.into_iter().map(|(triplet, target)| PreferenceRecord { triplet, target, iteration: 0 }).collect();
    let mut next = net.clone();
    next.params.reset_optimizer();
    let refs: Vec<&PreferenceRecord> = mixed.iter().collect();
    let mut sched = Schedule::new(cfg, refs.len());
    for _ in 0..cfg.epochs {
        train_steps(&mut next, &refs, cfg, &mut sched, &mut rng)?;
    }
    Ok(next)
}
