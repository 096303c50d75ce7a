//! VQA triplets, their line-delimited record format and dataset splits.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::{render_image, sample_image, Modality, ModalityMixture, SynthImage};
use super::question::{oracle_answer, render_question, RationalePolicy, Target, Task, TEMPLATES_PER_TASK};
use super::vocab::{vocab, Token};
use crate::error::{GenError, Result};
use crate::generator::StrategyKind;
use crate::seeding::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Oracle,
    Generated,
    Corrupted,
    Policy,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct VqaTriplet {
    pub image: SynthImage,
    pub question: super::question::Question,
    pub answer: Vec<Token>,
    pub provenance: Provenance,
    pub strategy: Option<StrategyKind>,
}

/// Identity of a (image, question) pair, ignoring the answer.
pub type PairKey = (u64, Task, u8, Option<Target>);

impl VqaTriplet {
    pub fn oracle(image: SynthImage, task: Task, template: u8, policy: RationalePolicy) -> Result<Self> {
        let question = render_question(task, template, &image)?;
        let answer = oracle_answer(&image, &question, policy);
        Ok(VqaTriplet { image, question, answer, provenance: Provenance::Oracle, strategy: None })
    }

    pub fn pair_key(&self) -> PairKey {
        (self.image.seed, self.question.task, self.question.template, self.question.target)
    }
}

/// One line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub image_seed: u64,
    pub modality: Modality,
    pub task: Task,
    pub template_id: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Target>,
    pub question_tokens: String,
    pub answer_tokens: String,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<StrategyKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grade: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corruption_seed: Option<u64>,
    /// Loop iteration at which the sample was admitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iteration: Option<u32>,
}

impl Record {
    pub fn from_triplet(t: &VqaTriplet) -> Self {
        let v = vocab();
        Record {
            image_seed: t.image.seed,
            modality: t.image.modality,
            task: t.question.task,
            template_id: t.question.template,
            target: t.question.target,
            question_tokens: v.detokenize(&t.question.tokens),
            answer_tokens: v.detokenize(&t.answer),
            provenance: t.provenance,
            strategy: t.strategy,
            reward_score: None,
            grade: None,
            target_score: None,
            corruption_seed: None,
            iteration: None,
        }
    }

    pub fn with_reward(mut self, r: f64) -> Self {
        self.reward_score = Some(r);
        self
    }

    /// Rebuilds the triplet, checking that the stored question matches its template.
    pub fn to_triplet(&self) -> Result<VqaTriplet> {
        let image = render_image(self.image_seed, self.modality);
        let question = render_question(self.task, self.template_id, &image)
            .map_err(|e| GenError::Data(format!("record for image {}: {e}", self.image_seed)))?;
        let v = vocab();
        if v.detokenize(&question.tokens) != self.question_tokens || question.target != self.target {
            return Err(GenError::Data(format!("question mismatch for image {}", self.image_seed)));
        }
        Ok(VqaTriplet {
            image,
            question,
            answer: v.tokenize(&self.answer_tokens)?,
            provenance: self.provenance,
            strategy: self.strategy,
        })
    }
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| GenError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_triplets(path: &Path, triplets: &[VqaTriplet]) -> Result<()> {
    write_records(path, &triplets.iter().map(Record::from_triplet).collect::<Vec<_>>())
}

pub fn read_triplets(path: &Path) -> Result<Vec<VqaTriplet>> {
    read_records(path)?.iter().map(Record::to_triplet).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub balanced_test: bool,
    pub mixture: ModalityMixture,
    pub rationale: RationalePolicy,
    /// Number of distinct image seeds available.
    pub image_pool: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train: 1000,
            val: 200,
            test: 200,
            balanced_test: true,
            mixture: ModalityMixture::default(),
            rationale: RationalePolicy::TraceWithSelfCheck,
            image_pool: 1 << 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<VqaTriplet>,
    pub val: Vec<VqaTriplet>,
    pub test: Vec<VqaTriplet>,
}

/// Draws distinct image seeds below `pool`.
pub struct SeedDraw {
    rng: rand_chacha::ChaCha8Rng,
    used: HashSet<u64>,
    pool: u64,
}

impl SeedDraw {
    pub fn new(seed: u64, pool: u64) -> Self {
        SeedDraw { rng: rng_for(seed, &[0x696d67]), used: HashSet::new(), pool }
    }

    pub fn next_seed(&mut self) -> Result<u64> {
        if self.used.len() as u64 >= self.pool {
            return Err(GenError::Config(format!("image pool of {} seeds exhausted", self.pool)));
        }
        loop {
            let s = self.rng.gen_range(0..self.pool);
            if self.used.insert(s) {
                return Ok(s);
            }
        }
    }
}

pub fn make_split(cfg: &SplitConfig, seed: u64) -> Result<Split> {
    if cfg.train == 0 || cfg.val == 0 || cfg.test == 0 {
        return Err(GenError::Config("split sizes must be positive".into()));
    }
    cfg.mixture.validate()?;
    let total = (cfg.train + cfg.val + cfg.test) as u64;
    if total > cfg.image_pool {
        return Err(GenError::Config(format!("{total} unique images requested but the pool holds {}", cfg.image_pool)));
    }
    let mut seeds = SeedDraw::new(seed, cfg.image_pool);
    let mut rng = rng_for(seed, &[0x73706c]);
    let mut free = |n: usize, seeds: &mut SeedDraw| -> Result<Vec<VqaTriplet>> {
        (0..n)
            .map(|_| {
                let image = sample_image(seeds.next_seed()?, &cfg.mixture)?;
                let task = Task::ALL[rng.gen_range(0..4)];
                let template = rng.gen_range(0..TEMPLATES_PER_TASK);
                VqaTriplet::oracle(image, task, template, cfg.rationale)
            })
            .collect()
    };
    let train = free(cfg.train, &mut seeds)?;
    let val = free(cfg.val, &mut seeds)?;
    let test = if cfg.balanced_test {
        let mut trng = rng_for(seed, &[0x747374]);
        (0..cfg.test)
            .map(|i| {
                let cell = i % (Task::ALL.len() * Modality::ALL.len());
                let task = Task::ALL[cell / Modality::ALL.len()];
                let modality = Modality::ALL[cell % Modality::ALL.len()];
                let image = render_image(seeds.next_seed()?, modality);
                VqaTriplet::oracle(image, task, trng.gen_range(0..TEMPLATES_PER_TASK), cfg.rationale)
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        free(cfg.test, &mut seeds)?
    };
    Ok(Split { train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn small() -> SplitConfig {
        SplitConfig { train: 100, val: 20, test: 20, ..SplitConfig::default() }
    }

    #[test]
    fn split_is_disjoint_and_reproducible() {
        let s = make_split(&small(), 3).unwrap();
        let keys: HashSet<PairKey> = s.train.iter().chain(&s.val).chain(&s.test).map(VqaTriplet::pair_key).collect();
        assert_eq!(keys.len(), 140);
        assert_eq!(make_split(&small(), 3).unwrap(), s);
    }

    #[test]
    fn balanced_test_cells_differ_by_at_most_one() {
        let cfg = SplitConfig { test: 100, ..small() };
        let s = make_split(&cfg, 5).unwrap();
        let mut counts: HashMap<(Task, Modality), usize> = HashMap::new();
        for t in &s.test {
            *counts.entry((t.question.task, t.image.modality)).or_default() += 1;
        }
        let mut all: Vec<usize> = Task::ALL
            .iter()
            .flat_map(|&t| Modality::ALL.iter().map(move |&m| (t, m)))
            .map(|k| counts.get(&k).copied().unwrap_or(0))
            .collect();
        all.sort();
        assert!(all[all.len() - 1] - all[0] <= 1);
    }

    #[test]
    fn oversized_split_is_config_error() {
        let cfg = SplitConfig { image_pool: 100, ..small() };
        assert!(matches!(make_split(&cfg, 1), Err(GenError::Config(_))));
    }

    #[test]
    fn records_round_trip_through_files() {
        let s = make_split(&small(), 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.records");
        write_triplets(&p, &s.train).unwrap();
        assert_eq!(read_triplets(&p).unwrap(), s.train);
    }
}
