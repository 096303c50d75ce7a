//! Accuracy, balanced accuracy, macro-F1 and AUROC over a test set.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{GenError, Result};
use crate::policy::{Context, Decoder, PolicyNet};
use crate::world::vocab::ANS;
use crate::world::{extract, oracle_value, vocab, AnswerValue, Modality, PairKey, Task, Token, VqaTriplet};

/// Anything that answers VQA questions.
pub trait Answerer {
    fn answer(&self, t: &VqaTriplet) -> Result<Vec<Token>>;

    /// Score for the "yes" answer of a presence question; higher means more confident.
    fn yes_score(&self, t: &VqaTriplet) -> Result<f64>;
}

fn presence_tokens(value: bool) -> Vec<usize> {
    (0..vocab().len())
        .filter(|&i| AnswerValue::from_token(Token(i as u16)) == Some(AnswerValue::Presence(value)))
        .collect()
}

impl Answerer for PolicyNet {
    fn answer(&self, t: &VqaTriplet) -> Result<Vec<Token>> {
        crate::policy::greedy_answer(self, &t.image, &t.question)
    }

    /// Normalized probability of a yes-token right after the first ANS of the
    /// greedy answer; 0.5 when the greedy answer never opens an ANS span.
    fn yes_score(&self, t: &VqaTriplet) -> Result<f64> {
        let mut dec = Decoder::new(self, &Context::of(t)?)?;
        for step in 0..self.cfg.max_answer {
            let lp = dec.next_log_probs();
            let best = (0..lp.len()).fold(0, |b, i| if lp[i] > lp[b] { i } else { b });
            let next = Token(best as u16);
            if next == self.eos() || step + 1 >= self.cfg.max_answer {
                break;
            }
            dec.feed(next)?;
            if next == ANS {
                let lp = dec.next_log_probs();
                let mass = |ids: Vec<usize>| ids.iter().map(|&i| (lp[i] as f64).exp()).sum::<f64>();
                let (yes, no) = (mass(presence_tokens(true)), mass(presence_tokens(false)));
                return Ok(if yes + no > 0.0 { yes / (yes + no) } else { 0.5 });
            }
        }
        Ok(0.5)
    }
}

/// Per-item outcome of one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub key: PairKey,
    pub task: Task,
    pub modality: Modality,
    pub truth: AnswerValue,
    pub predicted: Option<AnswerValue>,
    pub yes_score: Option<f64>,
}

impl Prediction {
    pub fn correct(&self) -> bool {
        self.predicted == Some(self.truth)
    }
}

pub fn predict(model: &dyn Answerer, test: &[VqaTriplet]) -> Result<Vec<Prediction>> {
    test.iter()
        .map(|t| {
            let truth = oracle_value(&t.image, &t.question);
            let yes_score = if t.question.task == Task::Presence { Some(model.yes_score(t)?) } else { None };
            Ok(Prediction {
                key: t.pair_key(),
                task: t.question.task,
                modality: t.image.modality,
                truth,
                predicted: extract(&model.answer(t)?),
                yes_score,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub macro_f1: f64,
    /// Presence items only; absent when they do not contain both classes.
    pub auroc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub task: Task,
    pub modality: Modality,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cells: Vec<EvalCell>,
    pub overall: Metrics,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        self.overall.accuracy
    }
}

/// Mean recall over the classes present in the truth.
pub fn balanced_accuracy(preds: &[&Prediction]) -> f64 {
    let mut per: BTreeMap<AnswerValue, (usize, usize)> = BTreeMap::new();
    for p in preds {
        let e = per.entry(p.truth).or_default();
        e.0 += p.correct() as usize;
        e.1 += 1;
    }
    if per.is_empty() {
        return 0.0;
    }
    per.values().map(|&(c, n)| c as f64 / n as f64).sum::<f64>() / per.len() as f64
}

/// Unweighted mean F1 over the classes appearing in the truth or the predictions.
pub fn macro_f1(preds: &[&Prediction]) -> f64 {
    let classes: BTreeSet<AnswerValue> = preds.iter().flat_map(|p| std::iter::once(p.truth).chain(p.predicted)).collect();
    if classes.is_empty() {
        return 0.0;
    }
    let f1 = |c: AnswerValue| {
        let tp = preds.iter().filter(|p| p.truth == c && p.predicted == Some(c)).count() as f64;
        let fp = preds.iter().filter(|p| p.truth != c && p.predicted == Some(c)).count() as f64;
        let fn_ = preds.iter().filter(|p| p.truth == c && p.predicted != Some(c)).count() as f64;
        if tp == 0.0 {
            0.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fn_)
        }
    };
    classes.iter().map(|&c| f1(c)).sum::<f64>() / classes.len() as f64
}

/// Area under the ROC curve via the rank-sum statistic, ties counted half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += (i..=j).filter(|&k| labels[idx[k]]).count() as f64 * mid;
        i = j + 1;
    }
    Some((rank_sum - (pos * (pos + 1)) as f64 / 2.0) / (pos * neg) as f64)
}

pub fn metrics(preds: &[&Prediction]) -> Metrics {
    let n = preds.len();
    let accuracy = if n == 0 { 0.0 } else { preds.iter().filter(|p| p.correct()).count() as f64 / n as f64 };
    let presence: Vec<&&Prediction> = preds.iter().filter(|p| p.yes_score.is_some()).collect();
    let scores: Vec<f64> = presence.iter().filter_map(|p| p.yes_score).collect();
    let labels: Vec<bool> = presence.iter().map(|p| p.truth == AnswerValue::Presence(true)).collect();
    Metrics {
        n,
        accuracy,
        balanced_accuracy: balanced_accuracy(preds),
        macro_f1: macro_f1(preds),
        auroc: auroc(&scores, &labels),
    }
}

/// Aggregates predictions into per-(task, modality) cells and an overall row.
pub fn report(preds: &[Prediction]) -> EvalReport {
    let mut cells = Vec::new();
    for task in Task::ALL {
        for modality in Modality::ALL {
            let sel: Vec<&Prediction> = preds.iter().filter(|p| p.task == task && p.modality == modality).collect();
            if !sel.is_empty() {
                cells.push(EvalCell { task, modality, metrics: metrics(&sel) });
            }
        }
    }
    let all: Vec<&Prediction> = preds.iter().collect();
    EvalReport { cells, overall: metrics(&all) }
}

/// Greedy evaluation of a model on a test set.
pub fn evaluate(model: &dyn Answerer, test: &[VqaTriplet]) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(GenError::Config("test set is empty".into()));
    }
    Ok(report(&predict(model, test)?))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flows {
    pub correct_to_correct: usize,
    pub wrong_to_correct: usize,
    pub correct_to_wrong: usize,
    pub wrong_to_wrong: usize,
}

impl Flows {
    pub fn total(&self) -> usize {
        self.correct_to_correct + self.wrong_to_correct + self.correct_to_wrong + self.wrong_to_wrong
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionReport {
    pub per_modality: Vec<(Modality, Flows)>,
}

impl TransitionReport {
    pub fn aggregate(&self) -> Flows {
        self.per_modality.iter().fold(Flows::default(), |mut a, (_, f)| {
            a.correct_to_correct += f.correct_to_correct;
            a.wrong_to_correct += f.wrong_to_correct;
            a.correct_to_wrong += f.correct_to_wrong;
            a.wrong_to_wrong += f.wrong_to_wrong;
            a
        })
    }
}

/// Four-way partition of items by baseline and candidate correctness.
pub fn transitions(baseline: &[Prediction], candidate: &[Prediction]) -> Result<TransitionReport> {
    if baseline.len() != candidate.len() || baseline.iter().zip(candidate).any(|(a, b)| a.key != b.key) {
        return Err(GenError::Contract("baseline and candidate were evaluated on different test sets".into()));
    }
    let mut per: BTreeMap<Modality, Flows> = BTreeMap::new();
    for (a, b) in baseline.iter().zip(candidate) {
        let f = per.entry(a.modality).or_default();
        match (a.correct(), b.correct()) {
            (true, true) => f.correct_to_correct += 1,
            (false, true) => f.wrong_to_correct += 1,
            (true, false) => f.correct_to_wrong += 1,
            (false, false) => f.wrong_to_wrong += 1,
        }
    }
    Ok(TransitionReport { per_modality: per.into_iter().collect() })
}

pub fn error_transitions(
    baseline: &dyn Answerer,
    candidate: &dyn Answerer,
    test: &[VqaTriplet],
) -> Result<TransitionReport> {
    transitions(&predict(baseline, test)?, &predict(candidate, test)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.9], &[false, true]), Some(1.0));
        assert_eq!(auroc(&[0.9, 0.1], &[false, true]), Some(0.0));
        assert_eq!(auroc(&[0.5, 0.5, 0.5], &[false, true, true]), Some(0.5));
        assert_eq!(auroc(&[0.2, 0.3], &[true, true]), None);
    }
}
