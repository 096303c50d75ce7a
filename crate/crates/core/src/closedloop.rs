//! The closed generate → score → filter → SFT → GRPO → preference →
//! reward-update → generator-update cycle, persisted per iteration.
//!
//! Run directory:
//!
//! ```text
//! <run>/manifest.json
//! <run>/iter_<t>/{dgen,dhigh,dpref}.records
//! <run>/iter_<t>/{policy,rm}.ckpt
//! <run>/iter_<t>/gen.state
//! <run>/iter_<t>/metrics.csv
//! ```
//!
//! `iter_0` holds the starting point (seed data, base policy, initial
//! reward model). The manifest records the config hash and the SHA-256 of
//! every file of every completed iteration.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GenError, Result};
use crate::generator::{generate_candidates, self_update, GenState, StrategyKind};
use crate::gradecorpus::GradedExample;
use crate::harness::metrics::{evaluate, EvalReport};
use crate::policy::{Context, PolicyConfig, PolicyNet};
use crate::rewardmodel::{continual_update, PreferenceRecord, RewardNet, RmTrainConfig};
use crate::seeding::{derive_seed, rng_for, tag};
use crate::setup::{build_data, build_foundation, sample_preferences, Setup};
use crate::trainers::{run_grpo, run_sft, CompositeReward, GrpoConfig, SftConfig};
use crate::world::{read_records, write_records, Record, Target, Token, VqaTriplet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub iterations: u32,
    /// Candidates generated per iteration.
    pub candidates: usize,
    pub tau: f64,
    pub allow_overlap: bool,
    /// Re-initialize the policy before each iteration's SFT instead of warm-starting.
    pub sft_from_scratch: bool,
    /// Prompts per iteration offered to GRPO, drawn from the admitted samples.
    pub grpo_prompts: usize,
    pub seed: u64,
    pub setup: Setup,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            iterations: 3,
            candidates: 4000,
            tau: 4.0,
            allow_overlap: false,
            sft_from_scratch: false,
            grpo_prompts: 256,
            seed: 0,
            setup: Setup::default(),
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(GenError::Config("iterations must be at least 1".into()));
        }
        if !(-6.0..=10.0).contains(&self.tau) {
            return Err(GenError::Config(format!("tau = {} outside the reward range [-6, 10]", self.tau)));
        }
        if self.candidates == 0 || self.grpo_prompts == 0 {
            return Err(GenError::Config("candidate and GRPO prompt counts must be positive".into()));
        }
        self.setup.validate()
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).unwrap_or_default();
        hex::encode(Sha256::digest(&json))
    }
}

/// A candidate with its reward score, if scored yet.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub triplet: VqaTriplet,
    pub score: Option<f64>,
}

/// A member of the generated corpus with its admission audit trail.
#[derive(Clone, Debug, PartialEq)]
pub struct Admitted {
    pub triplet: VqaTriplet,
    pub score: f64,
    pub iteration: u32,
}

impl Admitted {
    fn to_record(&self) -> Record {
        let mut r = Record::from_triplet(&self.triplet).with_reward(self.score);
        r.iteration = Some(self.iteration);
        r
    }

    fn from_record(r: &Record) -> Result<Self> {
        let missing = || GenError::Data(format!("admitted record for image {} lacks its audit fields", r.image_seed));
        Ok(Admitted {
            triplet: r.to_triplet()?,
            score: r.reward_score.ok_or_else(missing)?,
            iteration: r.iteration.ok_or_else(missing)?,
        })
    }
}

/// Duplicate key: image seed, global template id, target and answer tokens.
pub type SampleKey = (u64, usize, Option<Target>, Vec<Token>);

pub fn sample_key(t: &VqaTriplet) -> SampleKey {
    (t.image.seed, t.question.global_template(), t.question.target, t.answer.clone())
}

/// Keeps candidates scoring strictly above `tau`.
pub fn filter_high(candidates: &[Scored], tau: f64) -> Result<Vec<(VqaTriplet, f64)>> {
    candidates
        .iter()
        .filter_map(|c| match c.score {
            None => Some(Err(GenError::Contract(format!("candidate for image {} is unscored", c.triplet.image.seed)))),
            Some(s) if s > tau => Some(Ok((c.triplet.clone(), s))),
            Some(_) => None,
        })
        .collect()
}

/// Drops samples whose key already occurs in `existing` or earlier in `high`; order-stable.
pub fn dedup<'a>(high: Vec<(VqaTriplet, f64)>, existing: impl IntoIterator<Item = &'a VqaTriplet>) -> Vec<(VqaTriplet, f64)> {
    let mut seen: HashSet<SampleKey> = existing.into_iter().map(sample_key).collect();
    high.into_iter().filter(|(t, _)| seen.insert(sample_key(t))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterMetrics {
    pub iteration: u32,
    pub candidates: usize,
    pub above_tau: usize,
    pub admitted: usize,
    pub dgen: usize,
    pub mean_candidate_score: Option<f64>,
    pub sft_loss: Option<f64>,
    pub grpo_reward: Option<f64>,
    pub grpo_kl: Option<f64>,
    pub pref_mean_target: Option<f64>,
    pub pref_mse_before: Option<f64>,
    pub pref_mse_after: Option<f64>,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub macro_f1: f64,
    pub auroc: Option<f64>,
    pub mass_direct: f64,
    pub mass_step_by_step: f64,
    pub mass_meta: f64,
}

pub const METRICS_HEADER: &str = "iteration,candidates,above_tau,admitted,dgen,mean_candidate_score,sft_loss,grpo_reward,grpo_kl,pref_mean_target,pref_mse_before,pref_mse_after,accuracy,balanced_accuracy,macro_f1,auroc,mass_direct,mass_step_by_step,mass_meta";

impl IterMetrics {
    pub fn csv_row(&self) -> String {
        let opt = |x: Option<f64>| x.map(|a| a.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.candidates,
            self.above_tau,
            self.admitted,
            self.dgen,
            opt(self.mean_candidate_score),
            opt(self.sft_loss),
            opt(self.grpo_reward),
            opt(self.grpo_kl),
            opt(self.pref_mean_target),
            opt(self.pref_mse_before),
            opt(self.pref_mse_after),
            self.accuracy,
            self.balanced_accuracy,
            self.macro_f1,
            opt(self.auroc),
            self.mass_direct,
            self.mass_step_by_step,
            self.mass_meta
        )
    }

    fn start(state: &LoopState, report: &EvalReport) -> Self {
        let mut m = IterMetrics {
            iteration: 0,
            candidates: 0,
            above_tau: 0,
            admitted: state.d_gen.len(),
            dgen: state.d_gen.len(),
            mean_candidate_score: None,
            sft_loss: None,
            grpo_reward: None,
            grpo_kl: None,
            pref_mean_target: None,
            pref_mse_before: None,
            pref_mse_after: None,
            accuracy: 0.0,
            balanced_accuracy: 0.0,
            macro_f1: 0.0,
            auroc: None,
            mass_direct: 0.0,
            mass_step_by_step: 0.0,
            mass_meta: 0.0,
        };
        m.fill(state, report);
        m
    }

    fn fill(&mut self, state: &LoopState, report: &EvalReport) {
        self.accuracy = report.overall.accuracy;
        self.balanced_accuracy = report.overall.balanced_accuracy;
        self.macro_f1 = report.overall.macro_f1;
        self.auroc = report.overall.auroc;
        self.mass_direct = state.gen.strategy_mass(StrategyKind::Direct);
        self.mass_step_by_step = state.gen.strategy_mass(StrategyKind::StepByStep);
        self.mass_meta = state.gen.strategy_mass(StrategyKind::MetaCognitive);
    }
}

pub fn metrics_csv(history: &[IterMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in history {
        s.push_str(&m.csv_row());
        s.push('\n');
    }
    s
}

/// Inputs fixed for the whole run.
#[derive(Clone, Debug)]
pub struct LoopContext {
    pub seed_data: Vec<VqaTriplet>,
    pub pref_prompts: Vec<VqaTriplet>,
    pub test: Vec<VqaTriplet>,
    pub graded: Vec<GradedExample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopState {
    pub t: u32,
    pub d_gen: Vec<Admitted>,
    pub d_high: Vec<Admitted>,
    pub d_pref: Vec<PreferenceRecord>,
    pub policy: PolicyNet,
    pub rm: RewardNet,
    pub gen: GenState,
    pub metrics: Vec<IterMetrics>,
}

fn stage(cfg: &LoopConfig, t: u32, name: &str) -> u64 {
    derive_seed(cfg.seed, &[t as u64, tag(name)])
}

pub fn loop_context(cfg: &LoopConfig) -> Result<LoopContext> {
    let (seed_data, pref_prompts, test, graded) = build_data(&cfg.setup, cfg.seed)?;
    Ok(LoopContext { seed_data, pref_prompts, test, graded })
}

/// Iteration 0: D_gen = D_seed scored by the initial reward model, the base policy and a fresh generator.
pub fn initial_state(cfg: &LoopConfig) -> Result<(LoopContext, LoopState)> {
    cfg.validate()?;
    let f = build_foundation(&cfg.setup, cfg.seed)?;
    let scores = f.rm0.score_all(&f.seed_data)?;
    let d_gen = f
        .seed_data
        .iter()
        .zip(scores)
        .map(|(t, score)| Admitted { triplet: t.clone(), score, iteration: 0 })
        .collect();
    let gen = GenState::new(&cfg.setup.mixture)?;
    let mut state =
        LoopState { t: 0, d_gen, d_high: Vec::new(), d_pref: Vec::new(), policy: f.base, rm: f.rm0, gen, metrics: Vec::new() };
    let report = evaluate(&state.policy, &f.test)?;
    state.metrics.push(IterMetrics::start(&state, &report));
    let ctx = LoopContext { seed_data: f.seed_data, pref_prompts: f.pref_prompts, test: f.test, graded: f.graded };
    Ok((ctx, state))
}

/// One pass of the cycle. The input state is untouched, so a failing stage
/// leaves the caller at the last completed iteration.
pub fn loop_iteration(cfg: &LoopConfig, ctx: &LoopContext, state: &LoopState) -> Result<LoopState> {
    let t = state.t + 1;
    let s = &cfg.setup;

    let cands = generate_candidates(&state.gen, &s.gen, cfg.candidates, stage(cfg, t, "generate"))?;
    let scores = state.rm.score_all(&cands)?;
    let mean_candidate_score = scores.iter().sum::<f64>() / scores.len() as f64;
    let scored: Vec<Scored> =
        cands.into_iter().zip(&scores).map(|(triplet, &s)| Scored { triplet, score: Some(s) }).collect();
    let high = filter_high(&scored, cfg.tau)?;
    let above_tau = high.len();
    let high = if cfg.allow_overlap { high } else { dedup(high, state.d_gen.iter().map(|a| &a.triplet)) };
    let d_high: Vec<Admitted> =
        high.into_iter().map(|(triplet, score)| Admitted { triplet, score, iteration: t }).collect();
    let mut d_gen = state.d_gen.clone();
    d_gen.extend(d_high.iter().cloned());

    let mut policy = if cfg.sft_from_scratch {
        PolicyNet::new(PolicyConfig::vqa(), stage(cfg, t, "policy-init"))?
    } else {
        state.policy.clone()
    };
    policy.params.reset_optimizer();
    let train: Vec<VqaTriplet> = d_gen.iter().map(|a| a.triplet.clone()).collect();
    let sft_trace = run_sft(&mut policy, &train, &SftConfig { seed: stage(cfg, t, "sft"), ..s.sft.clone() })?;

    let pool: &[Admitted] = if d_high.is_empty() { &d_gen } else { &d_high };
    let mut prompts: Vec<VqaTriplet> = pool.iter().map(|a| a.triplet.clone()).collect();
    prompts.shuffle(&mut rng_for(stage(cfg, t, "grpo-prompts"), &[]));
    prompts.truncate(cfg.grpo_prompts);
    let reference = policy.clone();
    policy.params.reset_optimizer();
    let ctxs: Vec<Context> = prompts.iter().map(Context::of).collect::<Result<_>>()?;
    let reward = CompositeReward { rm: &state.rm, prompts: &prompts, alpha: s.grpo.alpha, beta: s.grpo.beta };
    let grpo_trace =
        run_grpo(&mut policy, &reference, &reward, &ctxs, &GrpoConfig { seed: stage(cfg, t, "grpo"), ..s.grpo.clone() })?;

    let d_pref = sample_preferences(&policy, &ctx.pref_prompts, stage(cfg, t, "prefs"), t)?;
    let pref_mse_before = state.rm.mse(&d_pref)?;
    let rm_cfg = RmTrainConfig { seed: stage(cfg, t, "rm-update"), ..s.rm_update.clone() };
    let rm = continual_update(&state.rm, &d_pref, &ctx.graded, &rm_cfg)?;
    let pref_mse_after = rm.mse(&d_pref)?;

    let accepted: Vec<(VqaTriplet, f64)> = d_high.iter().map(|a| (a.triplet.clone(), a.score)).collect();
    let gen = self_update(&state.gen, &accepted, s.gen.eta)?;

    let tail = grpo_trace.len().clamp(1, 5);
    let recent = &grpo_trace[grpo_trace.len().saturating_sub(tail)..];
    let mut next = LoopState { t, d_gen, d_high, d_pref, policy, rm, gen, metrics: state.metrics.clone() };
    let report = evaluate(&next.policy, &ctx.test)?;
    let mut m = IterMetrics {
        iteration: t,
        candidates: cfg.candidates,
        above_tau,
        admitted: next.d_high.len(),
        dgen: next.d_gen.len(),
        mean_candidate_score: Some(mean_candidate_score),
        sft_loss: sft_trace.last().copied(),
        grpo_reward: Some(recent.iter().map(|g| g.mean_reward).sum::<f64>() / recent.len().max(1) as f64),
        grpo_kl: Some(recent.iter().map(|g| g.kl).sum::<f64>() / recent.len().max(1) as f64),
        pref_mean_target: Some(next.d_pref.iter().map(|p| p.target).sum::<f64>() / next.d_pref.len().max(1) as f64),
        pref_mse_before: Some(pref_mse_before),
        pref_mse_after: Some(pref_mse_after),
        ..IterMetrics::start(&next, &report)
    };
    m.fill(&next, &report);
    next.metrics.push(m);
    Ok(next)
}

/// All iterations in memory.
pub fn run_loop(cfg: &LoopConfig) -> Result<LoopState> {
    let (ctx, mut state) = initial_state(cfg)?;
    while state.t < cfg.iterations {
        state = loop_iteration(cfg, &ctx, &state)?;
    }
    Ok(state)
}

pub const ITER_FILES: [&str; 7] =
    ["dgen.records", "dhigh.records", "dpref.records", "policy.ckpt", "rm.ckpt", "gen.state", "metrics.csv"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub iteration: u32,
    pub files: BTreeMap<String, String>,
    pub metrics: IterMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub config: LoopConfig,
    pub iterations: Vec<ManifestEntry>,
}

pub fn iter_dir(run: &Path, t: u32) -> PathBuf {
    run.join(format!("iter_{t}"))
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn pref_record(p: &PreferenceRecord) -> Record {
    let mut r = Record::from_triplet(&p.triplet);
    r.target_score = Some(p.target);
    r.iteration = Some(p.iteration);
    r
}

fn pref_from_record(r: &Record) -> Result<PreferenceRecord> {
    let target = r.target_score.ok_or_else(|| GenError::Data("preference record lacks a target".into()))?;
    Ok(PreferenceRecord { triplet: r.to_triplet()?, target, iteration: r.iteration.unwrap_or(0) })
}

/// Writes one iteration's directory and appends it to the manifest.
pub fn save_iteration(run: &Path, cfg: &LoopConfig, state: &LoopState) -> Result<()> {
    fs::create_dir_all(run)?;
    let final_dir = iter_dir(run, state.t);
    let dir = run.join(format!("iter_{}.partial", state.t));
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    write_records(&dir.join("dgen.records"), &state.d_gen.iter().map(Admitted::to_record).collect::<Vec<_>>())?;
    write_records(&dir.join("dhigh.records"), &state.d_high.iter().map(Admitted::to_record).collect::<Vec<_>>())?;
    write_records(&dir.join("dpref.records"), &state.d_pref.iter().map(pref_record).collect::<Vec<_>>())?;
    state.policy.save(&dir.join("policy.ckpt"))?;
    state.rm.save(&dir.join("rm.ckpt"))?;
    fs::write(dir.join("gen.state"), serde_json::to_vec(&state.gen)?)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(&state.metrics))?;
    if final_dir.exists() {
        fs::remove_dir_all(&final_dir)?;
    }
    fs::rename(&dir, &final_dir)?;

    let mut manifest = match read_manifest(run)? {
        Some(m) => m,
        None => Manifest { config_hash: cfg.hash(), config: cfg.clone(), iterations: Vec::new() },
    };
    if manifest.config_hash != cfg.hash() {
        return Err(GenError::Config(format!("run directory {} belongs to a different config", run.display())));
    }
    let files = ITER_FILES
        .iter()
        .map(|f| Ok((f.to_string(), sha256_file(&final_dir.join(f))?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let metrics = state.metrics.last().cloned().ok_or_else(|| GenError::Contract("state has no metrics".into()))?;
    manifest.iterations.retain(|e| e.iteration < state.t);
    manifest.iterations.push(ManifestEntry { iteration: state.t, files, metrics });
    write_atomic(&run.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)
}

pub fn read_manifest(run: &Path) -> Result<Option<Manifest>> {
    let path = run.join("manifest.json");
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_slice(&fs::read(path)?)?))
}

/// Restores the state persisted for iteration `t`, verifying every checksum.
pub fn load_iteration(run: &Path, t: u32) -> Result<LoopState> {
    let manifest = read_manifest(run)?.ok_or_else(|| GenError::Data(format!("no manifest in {}", run.display())))?;
    let upto: Vec<&ManifestEntry> = manifest.iterations.iter().filter(|e| e.iteration <= t).collect();
    let entry = upto
        .iter()
        .find(|e| e.iteration == t)
        .ok_or_else(|| GenError::Data(format!("iteration {t} is not recorded in the manifest")))?;
    let dir = iter_dir(run, t);
    for (name, digest) in &entry.files {
        let actual = sha256_file(&dir.join(name))?;
        if &actual != digest {
            return Err(GenError::Integrity(format!("checksum mismatch for {}", dir.join(name).display())));
        }
    }
    let admitted = |f: &str| -> Result<Vec<Admitted>> { read_records(&dir.join(f))?.iter().map(Admitted::from_record).collect() };
    let gen: GenState = serde_json::from_slice(&fs::read(dir.join("gen.state"))?)?;
    Ok(LoopState {
        t,
        d_gen: admitted("dgen.records")?,
        d_high: admitted("dhigh.records")?,
        d_pref: read_records(&dir.join("dpref.records"))?.iter().map(pref_from_record).collect::<Result<_>>()?,
        policy: PolicyNet::load(&dir.join("policy.ckpt"))?,
        rm: RewardNet::load(&dir.join("rm.ckpt"))?,
        gen,
        metrics: upto.iter().map(|e| e.metrics.clone()).collect(),
    })
}

/// Runs (or resumes) a persisted loop up to `until` iterations, defaulting
/// to the configured count. Resumption starts from the last iteration
/// recorded in the manifest.
pub fn run_persisted(cfg: &LoopConfig, run: &Path, until: Option<u32>) -> Result<LoopState> {
    cfg.validate()?;
    let until = until.unwrap_or(cfg.iterations).min(cfg.iterations);
    let (ctx, mut state) = match read_manifest(run)? {
        Some(m) => {
            if m.config_hash != cfg.hash() {
                return Err(GenError::Config(format!("run directory {} belongs to a different config", run.display())));
            }
            let last = m.iterations.iter().map(|e| e.iteration).max().ok_or_else(|| GenError::Data("empty manifest".into()))?;
            (loop_context(cfg)?, load_iteration(run, last)?)
        }
        None => {
            let (ctx, state) = initial_state(cfg)?;
            save_iteration(run, cfg, &state)?;
            (ctx, state)
        }
    };
    while state.t < until {
        state = loop_iteration(cfg, &ctx, &state)?;
        save_iteration(run, cfg, &state)?;
    }
    Ok(state)
}
