//! Shared per-seed setup and the experiment suite: data efficiency of
//! reward-ranked selection, the ablation ladder, error transitions,
//! transfer matrices and threshold sweeps.

use serde::{Deserialize, Serialize};

use super::metrics::{evaluate, predict, report, transitions, EvalReport, Prediction, TransitionReport};
use crate::error::{GenError, Result};
use crate::generator::{generate_candidates, GenState};
use crate::policy::{Context, PolicyNet};
use crate::rewardmodel::{continual_update, PreferenceRecord, RewardNet, RmTrainConfig};
use crate::seeding::rng_for;
use crate::setup::{build_foundation, sample_preferences, stage_seed, Foundation, Setup};
use crate::trainers::{run_grpo, run_sft, CompositeReward, GrpoConfig, SftConfig};
use crate::world::{Modality, Task, VqaTriplet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub setup: Setup,
    pub pool_size: usize,
    /// Train each condition on the seed data plus its selection.
    pub include_seed: bool,
    /// Rank within each task, keeping the pool's task proportions.
    pub stratify: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig { setup: Setup::default(), pool_size: 8000, include_seed: false, stratify: true }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.setup.sft.max_steps.is_none() {
            return Err(GenError::Config("experiment SFT needs a fixed step budget".into()));
        }
        if self.pool_size == 0 {
            return Err(GenError::Config("candidate pool must be non-empty".into()));
        }
        self.setup.validate()
    }
}

/// Everything the experiments share for one seed: the foundation, the
/// preference-updated reward model and a reward-scored candidate pool.
#[derive(Clone, Debug)]
pub struct World {
    pub foundation: Foundation,
    pub stratify: bool,
    pub include_seed: bool,
    pub prefs: Vec<PreferenceRecord>,
    pub rm: RewardNet,
    pub pool: Vec<VqaTriplet>,
    pub scores: Vec<f64>,
}

pub fn build_world(cfg: &ExperimentConfig, seed: u64) -> Result<World> {
    cfg.validate()?;
    let s = &cfg.setup;
    let foundation = build_foundation(s, seed)?;
    let f = &foundation;
    let prefs = sample_preferences(&f.base, &f.pref_prompts, stage_seed(seed, "prefs"), 0)?;
    let update = RmTrainConfig { seed: stage_seed(seed, "rm-update"), ..s.rm_update.clone() };
    let rm = continual_update(&f.rm0, &prefs, &f.graded, &update)?;
    let pool = generate_candidates(&GenState::new(&s.mixture)?, &s.gen, cfg.pool_size, stage_seed(seed, "pool"))?;
    let scores = rm.score_all(&pool)?;
    Ok(World { foundation, stratify: cfg.stratify, include_seed: cfg.include_seed, prefs, rm, pool, scores })
}

impl World {
    /// Pool indices by descending score, ties by position.
    pub fn ranked(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.pool.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        idx
    }

    pub fn top_k(&self, k: usize) -> Result<Vec<VqaTriplet>> {
        self.check_k(k)?;
        let ranked = self.ranked();
        if !self.stratify {
            return Ok(ranked.into_iter().take(k).map(|i| self.pool[i].clone()).collect());
        }
        let quotas = task_quotas(&self.pool, k);
        let mut taken = [0usize; 4];
        let mut keep = Vec::with_capacity(k);
        for i in ranked {
            let task = self.pool[i].question.task as usize;
            if taken[task] < quotas[task] {
                taken[task] += 1;
                keep.push(i);
            }
        }
        keep.sort_unstable();
        Ok(keep.into_iter().map(|i| self.pool[i].clone()).collect())
    }

    pub fn rand_k(&self, k: usize, seed: u64) -> Result<Vec<VqaTriplet>> {
        self.check_k(k)?;
        let idx = rand::seq::index::sample(&mut rng_for(seed, &[0x72616e64, k as u64]), self.pool.len(), k);
        let mut idx = idx.into_vec();
        idx.sort_unstable();
        Ok(idx.into_iter().map(|i| self.pool[i].clone()).collect())
    }

    /// Pool members scoring strictly above `tau`.
    pub fn above(&self, tau: f64) -> Vec<VqaTriplet> {
        self.pool.iter().zip(&self.scores).filter(|(_, &s)| s > tau).map(|(t, _)| t.clone()).collect()
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.pool.len() {
            return Err(GenError::Config(format!("K = {k} outside 1..={}", self.pool.len())));
        }
        Ok(())
    }

    /// Warm-started SFT from the base policy on `data` under the fixed budget.
    pub fn sft(&self, setup: &Setup, data: &[VqaTriplet], label: &str) -> Result<PolicyNet> {
        let f = &self.foundation;
        let mut net = f.base.clone();
        net.params.reset_optimizer();
        let data: Vec<VqaTriplet> =
            if self.include_seed { f.seed_data.iter().chain(data).cloned().collect() } else { data.to_vec() };
        run_sft(&mut net, &data, &SftConfig { seed: stage_seed(f.seed, label), ..setup.sft.clone() })?;
        Ok(net)
    }

    /// GRPO from `start` on the questions of `prompts`, anchored to `start`.
    pub fn grpo(&self, setup: &Setup, start: &PolicyNet, prompts: &[VqaTriplet], label: &str) -> Result<PolicyNet> {
        let mut net = start.clone();
        net.params.reset_optimizer();
        let ctxs: Vec<Context> = prompts.iter().map(Context::of).collect::<Result<_>>()?;
        let g = &setup.grpo;
        let reward = CompositeReward { rm: &self.rm, prompts, alpha: g.alpha, beta: g.beta };
        let cfg = GrpoConfig { seed: stage_seed(self.foundation.seed, label), ..g.clone() };
        run_grpo(&mut net, start, &reward, &ctxs, &cfg)?;
        Ok(net)
    }

    pub fn seed(&self) -> u64 {
        self.foundation.seed
    }

    pub fn test(&self) -> &[VqaTriplet] {
        &self.foundation.test
    }

    pub fn eval(&self, net: &PolicyNet) -> Result<EvalReport> {
        evaluate(net, self.test())
    }
}

/// Largest-remainder split of `k` over tasks in proportion to their pool counts.
pub fn task_quotas(pool: &[VqaTriplet], k: usize) -> [usize; 4] {
    let mut counts = [0usize; 4];
    pool.iter().for_each(|t| counts[t.question.task as usize] += 1);
    let n = pool.len() as f64;
    let exact: Vec<f64> = counts.iter().map(|&c| c as f64 * k as f64 / n).collect();
    let mut q: [usize; 4] = std::array::from_fn(|i| exact[i].floor() as usize);
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let short = k - q.iter().sum::<usize>();
    order.iter().take(short).for_each(|&i| q[i] += 1);
    q
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

pub const TOPK: &str = "topk";
pub const RANDK: &str = "randk";
pub const TOPK_GRPO: &str = "topk_grpo";
pub const FULL: &str = "full";

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionResult {
    pub condition: String,
    pub k: usize,
    pub seed: u64,
    pub train_size: usize,
    pub report: EvalReport,
    pub predictions: Vec<Prediction>,
}

impl ConditionResult {
    fn new(world: &World, condition: &str, k: usize, train_size: usize, net: &PolicyNet) -> Result<Self> {
        let predictions = predict(net, world.test())?;
        Ok(ConditionResult {
            condition: condition.into(),
            k,
            seed: world.seed(),
            train_size,
            report: report(&predictions),
            predictions,
        })
    }
}

/// TopK SFT, RandK SFT and TopK SFT followed by GRPO for one K.
pub fn run_k(world: &World, setup: &Setup, k: usize) -> Result<Vec<ConditionResult>> {
    let top = world.top_k(k)?;
    let rand = world.rand_k(k, world.seed())?;
    let top_net = world.sft(setup, &top, &format!("topk-{k}"))?;
    let rand_net = world.sft(setup, &rand, &format!("randk-{k}"))?;
    let grpo_net = world.grpo(setup, &top_net, &top, &format!("topk-grpo-{k}"))?;
    Ok(vec![
        ConditionResult::new(world, TOPK, k, top.len(), &top_net)?,
        ConditionResult::new(world, RANDK, k, rand.len(), &rand_net)?,
        ConditionResult::new(world, TOPK_GRPO, k, top.len(), &grpo_net)?,
    ])
}

/// Data-efficiency comparison on one world: every K plus the unfiltered
/// baseline of `baseline_size` random pool members.
pub fn topk_vs_randk(world: &World, setup: &Setup, ks: &[usize], baseline_size: usize) -> Result<Vec<ConditionResult>> {
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > world.pool.len()) {
        return Err(GenError::Config(format!("K = {k} outside 1..={}", world.pool.len())));
    }
    let mut out = Vec::new();
    for &k in ks {
        out.extend(run_k(world, setup, k)?);
    }
    let full = world.rand_k(baseline_size, world.seed() ^ 0x66756c6c)?;
    let full_net = world.sft(setup, &full, "full")?;
    out.push(ConditionResult::new(world, FULL, baseline_size, full.len(), &full_net)?);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LadderResult {
    pub seed: u64,
    pub data_size: usize,
    pub rungs: Vec<(String, EvalReport)>,
    /// Rewarded SFT to rewarded SFT plus GRPO.
    pub transitions: TransitionReport,
}

pub const RUNGS: [&str; 4] = ["base", "sft_raw", "sft_rewarded", "grpo"];

/// Assembles the ladder from a K's condition results: raw SFT is RandK,
/// rewarded SFT is TopK, the last rung is TopK followed by GRPO.
pub fn ladder_from(world: &World, results: &[ConditionResult], size: usize) -> Result<LadderResult> {
    let find = |c: &str| {
        results
            .iter()
            .find(|r| r.condition == c && r.k == size)
            .ok_or_else(|| GenError::Contract(format!("no {c} result for K = {size}")))
    };
    let (raw, rew, grpo) = (find(RANDK)?, find(TOPK)?, find(TOPK_GRPO)?);
    if raw.train_size != rew.train_size || rew.train_size != grpo.train_size {
        return Err(GenError::Contract("ladder rungs received unequal data budgets".into()));
    }
    let rungs = vec![
        (RUNGS[0].to_string(), world.eval(&world.foundation.base)?),
        (RUNGS[1].to_string(), raw.report.clone()),
        (RUNGS[2].to_string(), rew.report.clone()),
        (RUNGS[3].to_string(), grpo.report.clone()),
    ];
    Ok(LadderResult {
        seed: world.seed(),
        data_size: size,
        rungs,
        transitions: transitions(&rew.predictions, &grpo.predictions)?,
    })
}

/// The four rungs on one world, all SFT rungs on `size` examples and the same step budget.
pub fn ablation_ladder(world: &World, setup: &Setup, size: usize) -> Result<LadderResult> {
    ladder_from(world, &run_k(world, setup, size)?, size)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Task,
    Modality,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    Task(Task),
    Modality(Modality),
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Task(t) => t.name(),
            Domain::Modality(m) => m.word(),
        }
    }

    pub fn contains(self, t: &VqaTriplet) -> bool {
        match self {
            Domain::Task(k) => t.question.task == k,
            Domain::Modality(m) => t.image.modality == m,
        }
    }

    pub fn all(axis: Axis) -> Vec<Domain> {
        match axis {
            Axis::Task => Task::ALL.map(Domain::Task).to_vec(),
            Axis::Modality => Modality::ALL.map(Domain::Modality).to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub domains: Vec<Domain>,
    /// `delta[source][target]`: accuracy change over the base policy, averaged over seeds.
    pub delta: Vec<Vec<f64>>,
    pub seeds: Vec<u64>,
}

impl TransferMatrix {
    /// Rows whose diagonal entry is not the (tied) row maximum.
    pub fn off_diagonal_winners(&self) -> Vec<usize> {
        (0..self.domains.len()).filter(|&i| self.delta[i].iter().any(|&d| d > self.delta[i][i] + 1e-12)).collect()
    }
}

fn domain_accuracy(test: &[VqaTriplet], preds: &[Prediction], d: Domain) -> f64 {
    let sel: Vec<&Prediction> = test.iter().zip(preds).filter(|(t, _)| d.contains(t)).map(|(_, p)| p).collect();
    sel.iter().filter(|p| p.correct()).count() as f64 / sel.len().max(1) as f64
}

/// Source-only SFT+GRPO per domain on the top-ranked `per_source` pool
/// members of that domain; zero-shot accuracy on every target domain.
pub fn transfer_matrix(worlds: &[World], setup: &Setup, domains: &[Domain], per_source: usize) -> Result<TransferMatrix> {
    if domains.len() < 2 {
        return Err(GenError::Config("transfer needs at least two domains".into()));
    }
    let n = domains.len();
    let mut delta = vec![vec![0.0; n]; n];
    for world in worlds {
        let base = predict(&world.foundation.base, world.test())?;
        let ranked = world.ranked();
        for (i, &src) in domains.iter().enumerate() {
            let data: Vec<VqaTriplet> =
                ranked.iter().map(|&j| &world.pool[j]).filter(|t| src.contains(t)).take(per_source).cloned().collect();
            if data.is_empty() {
                return Err(GenError::Config(format!("no source data for domain {}", src.name())));
            }
            let label = format!("transfer-{}", src.name());
            let net = world.sft(setup, &data, &label)?;
            let net = world.grpo(setup, &net, &data, &label)?;
            let preds = predict(&net, world.test())?;
            for (j, &dst) in domains.iter().enumerate() {
                let d = domain_accuracy(world.test(), &preds, dst) - domain_accuracy(world.test(), &base, dst);
                delta[i][j] += d / worlds.len() as f64;
            }
        }
    }
    Ok(TransferMatrix { domains: domains.to_vec(), delta, seeds: worlds.iter().map(World::seed).collect() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauPoint {
    pub tau: f64,
    pub seed: u64,
    pub admitted: usize,
    pub report: Option<EvalReport>,
}

/// SFT on everything scoring strictly above each threshold; thresholds that
/// admit nothing are reported without training.
pub fn tau_sweep(world: &World, setup: &Setup, taus: &[f64]) -> Result<Vec<TauPoint>> {
    taus.iter()
        .map(|&tau| {
            let data = world.above(tau);
            let report = match data.is_empty() {
                true => None,
                false => Some(world.eval(&world.sft(setup, &data, &format!("tau-{tau}"))?)?),
            };
            Ok(TauPoint { tau, seed: world.seed(), admitted: data.len(), report })
        })
        .collect()
}
