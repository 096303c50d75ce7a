//! Shared starting point of the loop and the experiments: seed data, the
//! graded reward corpus, the initial reward model and the base policy.

use serde::{Deserialize, Serialize};

use crate::error::{GenError, Result};
use crate::generator::GenConfig;
use crate::gradecorpus::{build_graded_dataset, GradeConfig, GradedExample};
use crate::policy::{completion_triplet, sample_answer, Context, Decode, PolicyConfig, PolicyNet};
use crate::rewardmodel::{derive_pref_target, train_rm, PreferenceRecord, RewardNet, RmTrainConfig};
use crate::seeding::{derive_seed, tag};
use crate::trainers::{run_sft, GrpoConfig, SftConfig};
use crate::world::{make_split, ModalityMixture, SplitConfig, VqaTriplet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Setup {
    /// Oracle triplets the base policy and the graded corpus are built from.
    pub seed_size: usize,
    pub test_size: usize,
    pub rm_per_grade: usize,
    pub rm_hidden: usize,
    pub rm_train: RmTrainConfig,
    pub rm_update: RmTrainConfig,
    /// Policy samples per preference round.
    pub pref_size: usize,
    pub mixture: ModalityMixture,
    pub gen: GenConfig,
    pub grade: GradeConfig,
    pub base_sft: SftConfig,
    /// Warm-started SFT after the base; `max_steps` fixes the budget.
    pub sft: SftConfig,
    pub grpo: GrpoConfig,
}

impl Default for Setup {
    fn default() -> Self {
        Setup {
            seed_size: 500,
            test_size: 512,
            rm_per_grade: 400,
            rm_hidden: 64,
            rm_train: RmTrainConfig::default(),
            rm_update: RmTrainConfig { epochs: 20, ..RmTrainConfig::default() },
            pref_size: 1000,
            mixture: ModalityMixture::default(),
            gen: GenConfig::default(),
            grade: GradeConfig::default(),
            base_sft: SftConfig { epochs: 1000, max_steps: Some(400), ..SftConfig::default() },
            sft: SftConfig { epochs: 1000, max_steps: Some(300), ..SftConfig::default() },
            grpo: GrpoConfig { steps: 40, lr: 5e-5, ..GrpoConfig::default() },
        }
    }
}

impl Setup {
    pub fn validate(&self) -> Result<()> {
        if self.seed_size < self.rm_per_grade || self.rm_per_grade == 0 {
            return Err(GenError::Config("seed set must cover the per-grade count".into()));
        }
        if self.pref_size == 0 || self.test_size == 0 || self.rm_hidden == 0 {
            return Err(GenError::Config("preference, test and hidden sizes must be positive".into()));
        }
        self.mixture.validate()?;
        self.base_sft.validate()?;
        self.sft.validate()?;
        self.grpo.validate()?;
        self.gen.validate()
    }
}

/// Seed derived for a named stage.
pub fn stage_seed(seed: u64, name: &str) -> u64 {
    derive_seed(seed, &[tag(name)])
}

#[derive(Clone, Debug)]
pub struct Foundation {
    pub seed: u64,
    pub seed_data: Vec<VqaTriplet>,
    /// Prompts for preference sampling, disjoint from seed and test images.
    pub pref_prompts: Vec<VqaTriplet>,
    pub test: Vec<VqaTriplet>,
    pub graded: Vec<GradedExample>,
    pub rm0: RewardNet,
    pub base: PolicyNet,
}

/// Seed set, preference prompts, test set and graded corpus.
pub type RunData = (Vec<VqaTriplet>, Vec<VqaTriplet>, Vec<VqaTriplet>, Vec<GradedExample>);

/// Fixed data of a run.
pub fn build_data(setup: &Setup, seed: u64) -> Result<RunData> {
    setup.validate()?;
    let split = make_split(
        &SplitConfig {
            train: setup.seed_size,
            val: setup.pref_size,
            test: setup.test_size,
            mixture: setup.mixture.clone(),
            ..SplitConfig::default()
        },
        stage_seed(seed, "split"),
    )?;
    let graded = build_graded_dataset(&split.train, [setup.rm_per_grade; 4], stage_seed(seed, "grade"), &setup.grade)?;
    Ok((split.train, split.val, split.test, graded))
}

pub fn build_foundation(setup: &Setup, seed: u64) -> Result<Foundation> {
    let (seed_data, pref_prompts, test, graded) = build_data(setup, seed)?;
    let mut rm0 = RewardNet::new(setup.rm_hidden, stage_seed(seed, "rm-init"));
    train_rm(&mut rm0, &graded, &RmTrainConfig { seed: stage_seed(seed, "rm-train"), ..setup.rm_train.clone() })?;
    let mut base = PolicyNet::new(PolicyConfig::vqa(), stage_seed(seed, "policy-init"))?;
    run_sft(&mut base, &seed_data, &SftConfig { seed: stage_seed(seed, "base-sft"), ..setup.base_sft.clone() })?;
    Ok(Foundation { seed, seed_data, pref_prompts, test, graded, rm0, base })
}

/// Samples one answer per prompt from the policy and labels it against the oracle.
pub fn sample_preferences(net: &PolicyNet, prompts: &[VqaTriplet], seed: u64, iteration: u32) -> Result<Vec<PreferenceRecord>> {
    prompts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mode = Decode::Sample { temperature: 1.0 };
            let c = sample_answer(net, &Context::of(p)?, mode, derive_seed(seed, &[i as u64]))?;
            let triplet = completion_triplet(p, &c);
            let target = derive_pref_target(&triplet);
            Ok(PreferenceRecord { triplet, target, iteration })
        })
        .collect()
}
