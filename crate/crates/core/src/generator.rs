//! Candidate generator with three answer-quality strategies and a
//! categorical sampling state that self-updates from rewarded samples.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GenError, Result};
use crate::seeding::{derive_seed, rng_for};
use crate::world::image::draw;
use crate::world::{
    format_answer, global_template, oracle_value, render_image, render_question, render_rationale,
    template_from_global, Modality, ModalityMixture, Provenance, RationalePolicy, Task, VqaTriplet, NUM_TEMPLATES,
    TEMPLATES_PER_TASK,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Direct,
    StepByStep,
    MetaCognitive,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 3] = [StrategyKind::Direct, StrategyKind::StepByStep, StrategyKind::MetaCognitive];

    pub fn rationale(self) -> RationalePolicy {
        match self {
            StrategyKind::Direct => RationalePolicy::None,
            StrategyKind::StepByStep => RationalePolicy::Trace,
            StrategyKind::MetaCognitive => RationalePolicy::TraceWithSelfCheck,
        }
    }

    pub fn default_p(self) -> f64 {
        [0.6, 0.75, 0.9][self as usize]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    /// Probability of emitting the oracle answer, per strategy.
    pub p: [f64; 3],
    pub eta: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { p: StrategyKind::ALL.map(StrategyKind::default_p), eta: 0.1 }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(GenError::Config("strategy probabilities must lie in [0, 1]".into()));
        }
        if !self.eta.is_finite() || self.eta < 0.0 {
            return Err(GenError::Config("eta must be finite and non-negative".into()));
        }
        Ok(())
    }
}

pub const NUM_CELLS: usize = 3 * NUM_TEMPLATES * 8;

/// Sampling weights over (strategy, template, modality) cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenState {
    pub weights: Vec<f64>,
    pub updates: u64,
}

pub fn cell_index(s: StrategyKind, template: usize, m: Modality) -> usize {
    (s as usize * NUM_TEMPLATES + template) * 8 + m as usize
}

pub fn cell_parts(i: usize) -> (StrategyKind, usize, Modality) {
    (StrategyKind::ALL[i / (NUM_TEMPLATES * 8)], (i / 8) % NUM_TEMPLATES, Modality::ALL[i % 8])
}

const WEIGHT_FLOOR: f64 = 1e-12;

impl GenState {
    /// Uniform over strategies and templates, modality marginal from the mixture.
    pub fn new(mixture: &ModalityMixture) -> Result<Self> {
        mixture.validate()?;
        let weights = (0..NUM_CELLS).map(|i| mixture.weight(cell_parts(i).2).max(WEIGHT_FLOOR)).collect();
        Ok(GenState::normalized(weights, 0))
    }

    /// All mass on one strategy.
    pub fn only_strategy(kind: StrategyKind, mixture: &ModalityMixture) -> Result<Self> {
        let base = GenState::new(mixture)?;
        let weights = (0..NUM_CELLS)
            .map(|i| if cell_parts(i).0 == kind { base.weights[i] } else { WEIGHT_FLOOR })
            .collect();
        Ok(GenState::normalized(weights, 0))
    }

    fn normalized(mut weights: Vec<f64>, updates: u64) -> Self {
        let s: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w = (*w / s).max(f64::MIN_POSITIVE));
        GenState { weights, updates }
    }

    pub fn weight(&self, s: StrategyKind, template: usize, m: Modality) -> f64 {
        self.weights[cell_index(s, template, m)]
    }

    pub fn strategy_mass(&self, s: StrategyKind) -> f64 {
        (0..NUM_CELLS).filter(|&i| cell_parts(i).0 == s).map(|i| self.weights[i]).sum()
    }
}

fn strategy_of(t: &VqaTriplet) -> StrategyKind {
    t.strategy.unwrap_or(StrategyKind::Direct)
}

/// Draws `n` candidate triplets. Meta-cognitive items cycle over tasks.
pub fn generate_candidates(state: &GenState, cfg: &GenConfig, n: usize, seed: u64) -> Result<Vec<VqaTriplet>> {
    if n == 0 {
        return Err(GenError::Config("candidate count must be positive".into()));
    }
    cfg.validate()?;
    let mut meta_turn = 0usize;
    (0..n)
        .map(|i| {
            let mut rng = rng_for(seed, &[0x67656e, i as u64]);
            let (kind, template, modality) = cell_parts(draw(&state.weights, &mut rng));
            let (mut task, tpl) = template_from_global(template);
            if kind == StrategyKind::MetaCognitive {
                task = Task::ALL[meta_turn % Task::ALL.len()];
                meta_turn += 1;
            }
            let image = render_image(derive_seed(seed, &[0x696d67, i as u64]), modality);
            let question = render_question(task, tpl, &image)?;
            let truth = oracle_value(&image, &question);
            let value = if rng.gen_bool(cfg.p[kind as usize]) {
                truth
            } else {
                let wrong: Vec<_> = task.domain().into_iter().filter(|v| *v != truth).collect();
                wrong[rng.gen_range(0..wrong.len())]
            };
            let answer = format_answer(&render_rationale(&image, &question, kind.rationale()), value);
            Ok(VqaTriplet { image, question, answer, provenance: Provenance::Generated, strategy: Some(kind) })
        })
        .collect()
}

/// Reweights each cell by exp(eta · mean reward of its accepted samples).
pub fn self_update(state: &GenState, accepted: &[(VqaTriplet, f64)], eta: f64) -> Result<GenState> {
    if accepted.is_empty() {
        return Ok(state.clone());
    }
    let mut sums: HashMap<usize, (f64, usize)> = HashMap::new();
    for (t, r) in accepted {
        if !(-6.0..=10.0).contains(r) {
            return Err(GenError::Contract(format!("reward {r} outside [-6, 10]")));
        }
        let cell = cell_index(strategy_of(t), global_template(t.question.task, t.question.template), t.image.modality);
        let e = sums.entry(cell).or_default();
        e.0 += r;
        e.1 += 1;
    }
    let weights = state
        .weights
        .iter()
        .enumerate()
        .map(|(i, &w)| match sums.get(&i) {
            Some(&(s, c)) => w * (eta * s / c as f64).exp(),
            None => w,
        })
        .collect();
    Ok(GenState::normalized(weights, state.updates + 1))
}

pub fn template_count() -> usize {
    Task::ALL.len() * TEMPLATES_PER_TASK as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::extract;

    fn oracle_agreement(c: &[VqaTriplet]) -> f64 {
        c.iter().filter(|t| extract(&t.answer) == Some(oracle_value(&t.image, &t.question))).count() as f64
            / c.len() as f64
    }

    #[test]
    fn degenerate_probabilities() {
        let st = GenState::new(&ModalityMixture::default()).unwrap();
        let all = GenConfig { p: [1.0; 3], ..GenConfig::default() };
        assert_eq!(oracle_agreement(&generate_candidates(&st, &all, 300, 1).unwrap()), 1.0);
        let none = GenConfig { p: [0.0; 3], ..GenConfig::default() };
        assert_eq!(oracle_agreement(&generate_candidates(&st, &none, 300, 1).unwrap()), 0.0);
    }

    #[test]
    fn generation_is_deterministic() {
        let st = GenState::new(&ModalityMixture::default()).unwrap();
        let cfg = GenConfig::default();
        assert_eq!(generate_candidates(&st, &cfg, 50, 9).unwrap(), generate_candidates(&st, &cfg, 50, 9).unwrap());
        assert!(generate_candidates(&st, &cfg, 0, 9).is_err());
    }

    #[test]
    fn initial_state_is_a_simplex() {
        let st = GenState::new(&ModalityMixture::only(Modality::OCT)).unwrap();
        assert!((st.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(st.weights.iter().all(|&w| w > 0.0));
        for i in 0..NUM_CELLS {
            let (s, t, m) = cell_parts(i);
            assert_eq!(cell_index(s, t, m), i);
        }
    }

    #[test]
    fn self_update_reweights_by_mean_reward() {
        let st = GenState::new(&ModalityMixture::default()).unwrap();
        assert_eq!(self_update(&st, &[], 0.1).unwrap(), st);
        let cands = generate_candidates(&st, &GenConfig::default(), 200, 4).unwrap();
        let a = &cands[0];
        let b = cands.iter().find(|t| cell_of(t) != cell_of(a)).unwrap();
        let before = st.weights[cell_of(a)] / st.weights[cell_of(b)];
        let next = self_update(&st, &[(a.clone(), 10.0), (b.clone(), 0.0)], 0.1).unwrap();
        let after = next.weights[cell_of(a)] / next.weights[cell_of(b)];
        assert!((after / before - 1f64.exp()).abs() < 1e-12);
        assert!(next.weights[cell_of(a)] > st.weights[cell_of(a)]);
        assert!(self_update(&st, &[(a.clone(), 11.0)], 0.1).is_err());
    }

    fn cell_of(t: &VqaTriplet) -> usize {
        cell_index(strategy_of(t), t.question.global_template(), t.image.modality)
    }
}
