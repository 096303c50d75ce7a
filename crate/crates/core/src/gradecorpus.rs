//! Four-grade reward supervision built from oracle triplets by corruption.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GenError, Result};
use crate::seeding::{derive_seed, rng_for};
use crate::world::vocab::{is_marker, ANS, END_ANS, END_THINK, THINK};
use crate::world::{tok, vocab, Provenance, Record, Token, VqaTriplet};

pub const HALLUCINATIONS: [&str; 6] = ["fracture", "aneurysm", "stent", "implant", "pneumothorax", "effusion"];

/// Target score for a grade: 1→10, 2→6, 3→0, 4→−6.
pub fn grade_score(grade: u8) -> f64 {
    match grade {
        1 => 10.0,
        2 => 6.0,
        3 => 0.0,
        4 => -6.0,
        _ => panic!("grade {grade} outside 1..=4"),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradedExample {
    pub triplet: VqaTriplet,
    pub grade: u8,
    pub target_score: f64,
    pub corruption_seed: u64,
}

impl GradedExample {
    pub fn to_record(&self) -> Record {
        let mut r = Record::from_triplet(&self.triplet);
        r.grade = Some(self.grade);
        r.target_score = Some(self.target_score);
        r.corruption_seed = Some(self.corruption_seed);
        r
    }

    pub fn from_record(r: &Record) -> Result<Self> {
        let grade = r.grade.filter(|g| (1..=4).contains(g)).ok_or_else(|| GenError::Data("record lacks a grade".into()))?;
        Ok(GradedExample {
            triplet: r.to_triplet()?,
            grade,
            target_score: grade_score(grade),
            corruption_seed: r.corruption_seed.unwrap_or(0),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradeConfig {
    pub synonym_rate: f64,
    pub span_range: (f64, f64),
    pub irrelevant_prob: f64,
}

impl Default for GradeConfig {
    fn default() -> Self {
        GradeConfig { synonym_rate: 0.3, span_range: (0.2, 0.5), irrelevant_prob: 0.5 }
    }
}

/// Replaces each content token that has a synonym with probability `rate`.
pub fn perturb_synonym(answer: &[Token], seed: u64, rate: f64) -> Vec<Token> {
    let mut rng = rng_for(seed, &[0x73796e]);
    let v = vocab();
    answer
        .iter()
        .map(|&t| {
            let syn = v.synonyms(t);
            if is_marker(t) || syn.is_empty() || !rng.gen_bool(rate.clamp(0.0, 1.0)) {
                t
            } else {
                syn[rng.gen_range(0..syn.len())]
            }
        })
        .collect()
}

fn content_positions(answer: &[Token]) -> Vec<usize> {
    answer.iter().enumerate().filter(|(_, &t)| !is_marker(t)).map(|(i, _)| i).collect()
}

/// Removes the content tokens at `start..start + len` of the content subsequence.
pub fn delete_span(answer: &[Token], start: usize, len: usize) -> Vec<Token> {
    let pos = content_positions(answer);
    let drop: Vec<usize> = pos.iter().skip(start).take(len).copied().collect();
    answer.iter().enumerate().filter(|(i, _)| !drop.contains(i)).map(|(_, &t)| t).collect()
}

/// Deletes one contiguous span of content tokens; returns the new answer and
/// the sampled span fraction.
pub fn delete_phrases_with_fraction(answer: &[Token], seed: u64, range: (f64, f64)) -> (Vec<Token>, f64) {
    let mut rng = rng_for(seed, &[0x64656c]);
    let m = content_positions(answer).len();
    if m == 0 {
        return (answer.to_vec(), 0.0);
    }
    let frac = if range.1 > range.0 { rng.gen_range(range.0..range.1) } else { range.0 };
    if m < 3 {
        let start = rng.gen_range(0..m);
        return (delete_span(answer, start, 1), frac);
    }
    let k = ((frac * m as f64).round() as usize).clamp(1, m);
    let start = rng.gen_range(0..=m - k);
    (delete_span(answer, start, k), frac)
}

pub fn delete_phrases(answer: &[Token], seed: u64, range: (f64, f64)) -> Vec<Token> {
    delete_phrases_with_fraction(answer, seed, range).0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grade4Branch {
    Irrelevant,
    Hallucinated,
}

/// Swaps the ANS value and the first trace item for hallucination tokens.
pub fn hallucinate(answer: &[Token], seed: u64) -> Vec<Token> {
    let mut rng = rng_for(seed, &[0x68616c]);
    let mut pick = || tok(HALLUCINATIONS[rng.gen_range(0..HALLUCINATIONS.len())]);
    let mut out = answer.to_vec();
    if let Some(i) = out.iter().position(|&t| t == THINK) {
        if out.get(i + 1).is_some_and(|&t| t != END_THINK) {
            out[i + 1] = pick();
        }
    }
    match out.iter().position(|&t| t == ANS) {
        Some(i) if out.get(i + 2) == Some(&END_ANS) => out[i + 1] = pick(),
        _ => {
            let at = out.len().saturating_sub(1);
            out.splice(at..at, [ANS, pick(), END_ANS]);
        }
    }
    out
}

/// Irrelevant answer borrowed from a donor of another task, or a hallucinated one.
pub fn make_irrelevant(host: &VqaTriplet, donors: &[VqaTriplet], seed: u64, irrelevant_prob: f64) -> (Vec<Token>, Grade4Branch) {
    let mut rng = rng_for(seed, &[0x697272]);
    if rng.gen_bool(irrelevant_prob) {
        let pool: Vec<&VqaTriplet> = donors.iter().filter(|d| d.question.task != host.question.task).collect();
        if !pool.is_empty() {
            return (pool[rng.gen_range(0..pool.len())].answer.clone(), Grade4Branch::Irrelevant);
        }
    }
    (hallucinate(&host.answer, seed), Grade4Branch::Hallucinated)
}

pub fn build_graded_dataset(
    sources: &[VqaTriplet],
    counts: [usize; 4],
    seed: u64,
    cfg: &GradeConfig,
) -> Result<Vec<GradedExample>> {
    if counts.contains(&0) {
        return Err(GenError::Config("per-grade counts must be positive".into()));
    }
    let need = counts.iter().copied().max().unwrap_or(0);
    if sources.len() < need {
        return Err(GenError::Config(format!("{} oracle triplets cannot supply {need} examples per grade", sources.len())));
    }
    let mut out = Vec::with_capacity(counts.iter().sum());
    for (g, &count) in counts.iter().enumerate() {
        let grade = g as u8 + 1;
        let mut order: Vec<usize> = (0..sources.len()).collect();
        order.shuffle(&mut rng_for(seed, &[0x677264, grade as u64]));
        for (i, &src) in order.iter().take(count).enumerate() {
            let cseed = derive_seed(seed, &[grade as u64, i as u64]);
            let host = &sources[src];
            let mut triplet = host.clone();
            match grade {
                1 => {}
                2 => triplet.answer = perturb_synonym(&host.answer, cseed, cfg.synonym_rate),
                3 => triplet.answer = delete_phrases(&host.answer, cseed, cfg.span_range),
                _ => triplet.answer = make_irrelevant(host, sources, cseed, cfg.irrelevant_prob).0,
            }
            if grade > 1 {
                triplet.provenance = Provenance::Corrupted;
            }
            out.push(GradedExample { triplet, grade, target_score: grade_score(grade), corruption_seed: cseed });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{extract, make_split, SplitConfig};

    fn sources(n: usize) -> Vec<VqaTriplet> {
        make_split(&SplitConfig { train: n, val: 1, test: 1, ..SplitConfig::default() }, 2).unwrap().train
    }

    #[test]
    fn synonym_rate_extremes() {
        let v = vocab();
        let a = v.tokenize("THINK round large /THINK ANS 3 /ANS EOS").unwrap();
        assert_eq!(perturb_synonym(&a, 1, 0.0), a);
        let b = perturb_synonym(&a, 1, 1.0);
        assert_eq!(v.detokenize(&b), "THINK circular major /THINK ANS three /ANS EOS");
    }

    #[test]
    fn deletion_arithmetic() {
        let v = vocab();
        let a = v.tokenize("THINK round linear diffuse round linear diffuse round linear diffuse /THINK ANS 9 /ANS").unwrap();
        let (b, f) = delete_phrases_with_fraction(&a, 3, (0.2, 0.2));
        assert_eq!(f, 0.2);
        assert_eq!(a.len() - b.len(), 2);
        let a = v.tokenize("ANS 3 /ANS EOS").unwrap();
        let whole = delete_span(&a, 0, 1);
        assert_eq!(extract(&whole), None);
        assert_eq!(delete_phrases(&a, 5, (0.2, 0.5)).len(), 3);
    }

    #[test]
    fn hallucination_leaves_every_domain() {
        let v = vocab();
        let a = v.tokenize("THINK round /THINK ANS 3 /ANS EOS").unwrap();
        let h = hallucinate(&a, 4);
        assert_eq!(extract(&h), None);
        assert!(HALLUCINATIONS.contains(&v.word(h[1])));
    }

    #[test]
    fn donor_pool_of_same_task_falls_back() {
        let src = sources(50);
        let host = &src[0];
        let same: Vec<_> = src.iter().filter(|t| t.question.task == host.question.task).cloned().collect();
        for s in 0..50 {
            assert_eq!(make_irrelevant(host, &same, s, 1.0).1, Grade4Branch::Hallucinated);
        }
    }

    #[test]
    fn balanced_corpus_counts_and_identity() {
        let src = sources(20);
        let d = build_graded_dataset(&src, [10; 4], 7, &GradeConfig::default()).unwrap();
        assert_eq!(d.len(), 40);
        for (g, s) in [(1, 10.0), (2, 6.0), (3, 0.0), (4, -6.0)] {
            assert_eq!(d.iter().filter(|e| e.grade == g && e.target_score == s).count(), 10);
        }
        let mean: f64 = d.iter().map(|e| e.target_score).sum::<f64>() / 40.0;
        assert!((mean - 2.5).abs() < 1e-12);
        for e in d.iter().filter(|e| e.grade == 1) {
            assert!(src.contains(&e.triplet));
        }
        assert_eq!(build_graded_dataset(&src, [10; 4], 7, &GradeConfig::default()).unwrap(), d);
        assert!(build_graded_dataset(&src, [30, 1, 1, 1], 7, &GradeConfig::default()).is_err());
    }
}
