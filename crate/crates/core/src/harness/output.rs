//! Experiment plans over several seeds and their CSV / gnuplot outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::experiments::{
    build_world, ladder_from, mean_std, run_k, tau_sweep, topk_vs_randk, transfer_matrix, Axis, ConditionResult,
    Domain, ExperimentConfig, LadderResult, TauPoint, TransferMatrix, World, FULL, RANDK, TOPK, TOPK_GRPO,
};
use super::metrics::{EvalReport, Metrics, TransitionReport};
use crate::error::{GenError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentPlan {
    pub seeds: Vec<u64>,
    pub ks: Vec<usize>,
    pub baseline_size: usize,
    pub ladder_size: usize,
    pub taus: Vec<f64>,
    pub axis: Axis,
    pub per_source: usize,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            seeds: vec![0, 1, 2, 3, 4],
            ks: vec![500, 1000, 2000, 4000],
            baseline_size: 8000,
            ladder_size: 2000,
            taus: vec![-6.0, 0.0, 2.0, 4.0, 6.0, 8.0, 9.5],
            axis: Axis::Task,
            per_source: 1000,
        }
    }
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.len() < 3 {
            return Err(GenError::Config("reported comparisons need at least 3 seeds".into()));
        }
        if self.ks.is_empty() || self.ks.contains(&0) || self.baseline_size == 0 || self.ladder_size == 0 {
            return Err(GenError::Config("K values and data sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn worlds(&self, cfg: &ExperimentConfig) -> Result<Vec<World>> {
        self.validate()?;
        self.seeds.iter().map(|&s| build_world(cfg, s)).collect()
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn metric_cols(m: &Metrics) -> String {
    format!("{},{},{},{}", m.accuracy, m.balanced_accuracy, m.macro_f1, opt(m.auroc))
}

pub const EVAL_HEADER: &str = "task,modality,n,accuracy,balanced_accuracy,macro_f1,auroc";

/// One row per (task, modality) cell and a final `all,all` row.
pub fn eval_csv(report: &EvalReport) -> String {
    let mut s = format!("{EVAL_HEADER}\n");
    for c in &report.cells {
        let _ = writeln!(s, "{},{},{},{}", c.task.name(), c.modality.word(), c.metrics.n, metric_cols(&c.metrics));
    }
    let _ = writeln!(s, "all,all,{},{}", report.overall.n, metric_cols(&report.overall));
    s
}

pub const CONDITION_HEADER: &str = "condition,k,seed,train_size,accuracy,balanced_accuracy,macro_f1,auroc";

pub fn conditions_csv(results: &[ConditionResult]) -> String {
    let mut s = format!("{CONDITION_HEADER}\n");
    for r in results {
        let _ = writeln!(s, "{},{},{},{},{}", r.condition, r.k, r.seed, r.train_size, metric_cols(&r.report.overall));
    }
    s
}

/// Mean and standard deviation of accuracy per (condition, K) across seeds.
pub fn condition_summary(results: &[ConditionResult]) -> BTreeMap<(String, usize), (f64, f64, usize)> {
    let mut groups: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for r in results {
        groups.entry((r.condition.clone(), r.k)).or_default().push(r.report.overall.accuracy);
    }
    groups.into_iter().map(|(k, v)| (k, {
        let (m, sd) = mean_std(&v);
        (m, sd, v.len())
    })).collect()
}

pub fn summary_csv(results: &[ConditionResult]) -> String {
    let mut s = String::from("condition,k,seeds,mean_accuracy,std_accuracy\n");
    for ((c, k), (m, sd, n)) in condition_summary(results) {
        let _ = writeln!(s, "{c},{k},{n},{m},{sd}");
    }
    s
}

/// gnuplot block: K, then mean and std for TopK, RandK and TopK+GRPO, then
/// the unfiltered baseline mean and std repeated on every row.
pub fn topk_dat(results: &[ConditionResult]) -> String {
    let sum = condition_summary(results);
    let full = sum.iter().find(|((c, _), _)| c == FULL).map(|(_, v)| *v).unwrap_or((f64::NAN, f64::NAN, 0));
    let mut ks: Vec<usize> = sum.keys().filter(|(c, _)| c == TOPK).map(|(_, k)| *k).collect();
    ks.sort_unstable();
    let mut s = String::from("# k topk_mean topk_std randk_mean randk_std topk_grpo_mean topk_grpo_std full_mean full_std\n");
    for k in ks {
        let get = |c: &str| sum.get(&(c.to_string(), k)).copied().unwrap_or((f64::NAN, f64::NAN, 0));
        let (t, r, g) = (get(TOPK), get(RANDK), get(TOPK_GRPO));
        let _ = writeln!(s, "{k} {} {} {} {} {} {} {} {}", t.0, t.1, r.0, r.1, g.0, g.1, full.0, full.1);
    }
    s
}

pub fn ladder_csv(ladders: &[LadderResult]) -> String {
    let mut s = String::from("seed,rung,data_size,accuracy,balanced_accuracy,macro_f1,auroc\n");
    for l in ladders {
        for (rung, rep) in &l.rungs {
            let _ = writeln!(s, "{},{rung},{},{}", l.seed, l.data_size, metric_cols(&rep.overall));
        }
    }
    s
}

/// Mean accuracy per rung, in rung order.
pub fn ladder_means(ladders: &[LadderResult]) -> Vec<(String, f64, f64)> {
    let Some(first) = ladders.first() else { return Vec::new() };
    first
        .rungs
        .iter()
        .enumerate()
        .map(|(i, (name, _))| {
            let accs: Vec<f64> = ladders.iter().map(|l| l.rungs[i].1.overall.accuracy).collect();
            let (m, sd) = mean_std(&accs);
            (name.clone(), m, sd)
        })
        .collect()
}

pub fn transitions_csv(rows: &[(u64, TransitionReport)]) -> String {
    let mut s = String::from("seed,modality,correct_to_correct,wrong_to_correct,correct_to_wrong,wrong_to_wrong,n\n");
    for (seed, rep) in rows {
        for (m, f) in &rep.per_modality {
            let _ = writeln!(
                s,
                "{seed},{},{},{},{},{},{}",
                m.word(),
                f.correct_to_correct,
                f.wrong_to_correct,
                f.correct_to_wrong,
                f.wrong_to_wrong,
                f.total()
            );
        }
    }
    s
}

pub fn transfer_csv(m: &TransferMatrix) -> String {
    let mut s = String::from("source,target,delta_accuracy\n");
    for (i, src) in m.domains.iter().enumerate() {
        for (j, dst) in m.domains.iter().enumerate() {
            let _ = writeln!(s, "{},{},{}", src.name(), dst.name(), m.delta[i][j]);
        }
    }
    s
}

/// Matrix layout for `plot ... matrix with image`: rows are sources.
pub fn transfer_dat(m: &TransferMatrix) -> String {
    let mut s = format!("# rows: sources, columns: targets ({})\n", m.domains.iter().map(|d| d.name()).collect::<Vec<_>>().join(" "));
    for row in &m.delta {
        let _ = writeln!(s, "{}", row.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" "));
    }
    s
}

pub fn tau_csv(points: &[TauPoint]) -> String {
    let mut s = String::from("tau,seed,admitted,accuracy,balanced_accuracy,macro_f1,auroc\n");
    for p in points {
        let cols = p.report.as_ref().map(|r| metric_cols(&r.overall)).unwrap_or_else(|| ",,,".into());
        let _ = writeln!(s, "{},{},{},{cols}", p.tau, p.seed, p.admitted);
    }
    s
}

pub fn tau_dat(points: &[TauPoint]) -> String {
    let mut by: BTreeMap<String, (f64, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for p in points {
        let e = by.entry(format!("{:020.6}", p.tau + 1e6)).or_insert((p.tau, Vec::new(), Vec::new()));
        e.1.push(p.admitted as f64);
        if let Some(r) = &p.report {
            e.2.push(r.overall.accuracy);
        }
    }
    let mut s = String::from("# tau mean_admitted mean_accuracy std_accuracy\n");
    for (tau, adm, acc) in by.values() {
        let (m, sd) = if acc.is_empty() { (f64::NAN, f64::NAN) } else { mean_std(acc) };
        let _ = writeln!(s, "{tau} {} {m} {sd}", mean_std(adm).0);
    }
    s
}

fn write(out: &Path, name: &str, body: &str) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(name), body)?;
    Ok(())
}

/// topk.csv, topk_summary.csv and topk.dat.
pub fn run_topk(cfg: &ExperimentConfig, plan: &ExperimentPlan, out: &Path) -> Result<Vec<ConditionResult>> {
    let mut all = Vec::new();
    for w in plan.worlds(cfg)? {
        all.extend(topk_vs_randk(&w, &cfg.setup, &plan.ks, plan.baseline_size)?);
    }
    write(out, "topk.csv", &conditions_csv(&all))?;
    write(out, "topk_summary.csv", &summary_csv(&all))?;
    write(out, "topk.dat", &topk_dat(&all))?;
    Ok(all)
}

/// ladder.csv and transitions.csv.
pub fn run_ladder(cfg: &ExperimentConfig, plan: &ExperimentPlan, out: &Path) -> Result<Vec<LadderResult>> {
    let mut ladders = Vec::new();
    for w in plan.worlds(cfg)? {
        ladders.push(ladder_from(&w, &run_k(&w, &cfg.setup, plan.ladder_size)?, plan.ladder_size)?);
    }
    write(out, "ladder.csv", &ladder_csv(&ladders))?;
    let rows: Vec<(u64, TransitionReport)> = ladders.iter().map(|l| (l.seed, l.transitions.clone())).collect();
    write(out, "transitions.csv", &transitions_csv(&rows))?;
    Ok(ladders)
}

/// transfer.csv and transfer.dat.
pub fn run_transfer(cfg: &ExperimentConfig, plan: &ExperimentPlan, out: &Path) -> Result<TransferMatrix> {
    let m = transfer_matrix(&plan.worlds(cfg)?, &cfg.setup, &Domain::all(plan.axis), plan.per_source)?;
    write(out, "transfer.csv", &transfer_csv(&m))?;
    write(out, "transfer.dat", &transfer_dat(&m))?;
    Ok(m)
}

/// tau_sweep.csv and tau_sweep.dat.
pub fn run_tau_sweep(cfg: &ExperimentConfig, plan: &ExperimentPlan, out: &Path) -> Result<Vec<TauPoint>> {
    let mut all = Vec::new();
    for w in plan.worlds(cfg)? {
        all.extend(tau_sweep(&w, &cfg.setup, &plan.taus)?);
    }
    write(out, "tau_sweep.csv", &tau_csv(&all))?;
    write(out, "tau_sweep.dat", &tau_dat(&all))?;
    Ok(all)
}
