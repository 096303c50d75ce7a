//! Command-line entry point for every pipeline stage, the closed loop and
//! the experiment suite.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context as _, Result};
use clap::{Parser, Subcommand};

use genloop::closedloop::{filter_high, metrics_csv, run_persisted, Scored};
use genloop::config::{apply_overrides, Settings};
use genloop::generator::{generate_candidates, GenState};
use genloop::gradecorpus::GradedExample;
use genloop::harness::{eval_csv, evaluate, ladder_means, run_ladder, run_tau_sweep, run_topk, run_transfer};
use genloop::policy::{Context, PolicyConfig, PolicyNet};
use genloop::rewardmodel::{train_rm, RewardNet, RmTrainConfig};
use genloop::setup::{build_data, stage_seed};
use genloop::trainers::{run_grpo, run_sft, CompositeReward, GrpoConfig, SftConfig};
use genloop::world::{read_records, write_records, Record, VqaTriplet};
use genloop::GenError;

#[derive(Parser)]
#[command(name = "genloop", about = "Closed-loop generator, reward model and policy training")]
struct Cli {
    /// Settings overrides, one `dotted.key = value` per line.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample candidates from a generator state (uniform when omitted).
    Gen {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long)]
        state: Option<PathBuf>,
    },
    /// Build the seed, preference-prompt and test splits and the graded corpus.
    Grade,
    /// Train a reward model on a graded corpus.
    TrainRm {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Score candidates and keep those strictly above tau.
    Filter {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        rm: PathBuf,
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Supervised fine-tuning; starts from a fresh policy without --init.
    Sft {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Group-relative policy optimization against a reward model.
    Grpo {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        rm: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
    },
    /// Run or resume the closed loop in `<out>/run/<name>`.
    Loop {
        #[arg(long, default_value = "default")]
        name: String,
        /// Stop after this iteration.
        #[arg(long)]
        until: Option<u32>,
    },
    /// Evaluate a policy on a test file (the configured test split by default).
    Eval {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Multi-seed experiments.
    Experiment {
        #[command(subcommand)]
        kind: Experiment,
    },
}

#[derive(Subcommand, Clone, Copy)]
enum Experiment {
    Topk,
    Transfer,
    Ablation,
    TauSweep,
    Transitions,
}

fn load_settings(cli: &Cli) -> Result<Settings> {
    let mut s = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            apply_overrides(&Settings::default(), &text)?
        }
        None => Settings::default(),
    };
    if let Some(seed) = cli.seed {
        s.seed = seed;
    }
    Ok(s)
}

fn triplets(path: &Path) -> Result<Vec<VqaTriplet>> {
    Ok(read_records(path)?.iter().map(Record::to_triplet).collect::<genloop::Result<_>>()?)
}

fn save_triplets(path: &Path, items: &[VqaTriplet]) -> Result<()> {
    write_records(path, &items.iter().map(Record::from_triplet).collect::<Vec<_>>())?;
    Ok(())
}

fn trace_csv(header: &str, rows: impl Iterator<Item = String>) -> String {
    let mut s = format!("{header}\n");
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    s
}

fn run(cli: &Cli) -> Result<()> {
    let s = load_settings(cli)?;
    let out = &cli.out;
    fs::create_dir_all(out)?;
    match &cli.cmd {
        Cmd::Gen { n, state } => {
            let state = match state {
                Some(p) => serde_json::from_slice(&fs::read(p)?)?,
                None => GenState::new(&s.setup.mixture)?,
            };
            let cands = generate_candidates(&state, &s.setup.gen, *n, stage_seed(s.seed, "generate"))?;
            save_triplets(&out.join("candidates.records"), &cands)?;
        }
        Cmd::Grade => {
            let (seed_data, prefs, test, graded) = build_data(&s.setup, s.seed)?;
            save_triplets(&out.join("seed.records"), &seed_data)?;
            save_triplets(&out.join("pref_prompts.records"), &prefs)?;
            save_triplets(&out.join("test.records"), &test)?;
            write_records(&out.join("graded.records"), &graded.iter().map(GradedExample::to_record).collect::<Vec<_>>())?;
        }
        Cmd::TrainRm { corpus } => {
            let graded = match corpus {
                Some(p) => read_records(p)?.iter().map(GradedExample::from_record).collect::<genloop::Result<Vec<_>>>()?,
                None => build_data(&s.setup, s.seed)?.3,
            };
            let mut rm = RewardNet::new(s.setup.rm_hidden, stage_seed(s.seed, "rm-init"));
            let cfg = RmTrainConfig { seed: stage_seed(s.seed, "rm-train"), ..s.setup.rm_train.clone() };
            let trace = train_rm(&mut rm, &graded, &cfg)?;
            rm.save(&out.join("rm.ckpt"))?;
            let rows = trace.iter().enumerate().map(|(i, m)| format!("{},{m}", i + 1));
            fs::write(out.join("rm_loss.csv"), trace_csv("epoch,mse", rows))?;
        }
        Cmd::Filter { candidates, rm, tau } => {
            let rm = RewardNet::load(rm)?;
            let cands = triplets(candidates)?;
            let scores = rm.score_all(&cands)?;
            let scored: Vec<Scored> = cands.into_iter().zip(&scores).map(|(t, &v)| Scored { triplet: t, score: Some(v) }).collect();
            let all: Vec<Record> = scored.iter().zip(&scores).map(|(c, &v)| Record::from_triplet(&c.triplet).with_reward(v)).collect();
            write_records(&out.join("scored.records"), &all)?;
            let high = filter_high(&scored, tau.unwrap_or(s.tau))?;
            let high: Vec<Record> = high.iter().map(|(t, v)| Record::from_triplet(t).with_reward(*v)).collect();
            write_records(&out.join("dhigh.records"), &high)?;
            println!("{} of {} candidates above tau", high.len(), all.len());
        }
        Cmd::Sft { data, init } => {
            let mut net = match init {
                Some(p) => PolicyNet::load(p)?,
                None => PolicyNet::new(PolicyConfig::vqa(), stage_seed(s.seed, "policy-init"))?,
            };
            net.params.reset_optimizer();
            let cfg = SftConfig { seed: stage_seed(s.seed, "sft"), ..s.setup.sft.clone() };
            let trace = run_sft(&mut net, &triplets(data)?, &cfg)?;
            net.save(&out.join("policy.ckpt"))?;
            let rows = trace.iter().enumerate().map(|(i, l)| format!("{},{l}", i + 1));
            fs::write(out.join("sft_loss.csv"), trace_csv("epoch,loss", rows))?;
        }
        Cmd::Grpo { policy, rm, prompts } => {
            let mut net = PolicyNet::load(policy)?;
            let reference = net.clone();
            net.params.reset_optimizer();
            let rm = RewardNet::load(rm)?;
            let prompts = triplets(prompts)?;
            let ctxs: Vec<Context> = prompts.iter().map(Context::of).collect::<genloop::Result<_>>()?;
            let g = &s.setup.grpo;
            let reward = CompositeReward { rm: &rm, prompts: &prompts, alpha: g.alpha, beta: g.beta };
            let cfg = GrpoConfig { seed: stage_seed(s.seed, "grpo"), ..g.clone() };
            let trace = run_grpo(&mut net, &reference, &reward, &ctxs, &cfg)?;
            net.save(&out.join("policy.ckpt"))?;
            let rows = trace.iter().map(|r| format!("{},{},{},{}", r.step, r.mean_reward, r.loss, r.kl));
            fs::write(out.join("grpo.csv"), trace_csv("step,mean_reward,loss,kl", rows))?;
        }
        Cmd::Loop { name, until } => {
            let run = out.join("run").join(name);
            let state = run_persisted(&s.loop_config(), &run, *until)?;
            fs::write(run.join("metrics.csv"), metrics_csv(&state.metrics))?;
            print!("{}", metrics_csv(&state.metrics));
        }
        Cmd::Eval { policy, test } => {
            let net = PolicyNet::load(policy)?;
            let test = match test {
                Some(p) => triplets(p)?,
                None => build_data(&s.setup, s.seed)?.2,
            };
            let report = evaluate(&net, &test)?;
            fs::write(out.join("eval.csv"), eval_csv(&report))?;
            println!("accuracy {:.4} on {} items", report.overall.accuracy, report.overall.n);
        }
        Cmd::Experiment { kind } => {
            let cfg = s.experiment_config();
            let plan = &s.plan;
            match kind {
                Experiment::Topk => {
                    run_topk(&cfg, plan, out)?;
                    print!("{}", fs::read_to_string(out.join("topk_summary.csv"))?);
                }
                Experiment::Ablation | Experiment::Transitions => {
                    let ladders = run_ladder(&cfg, plan, out)?;
                    for (rung, m, sd) in ladder_means(&ladders) {
                        println!("{rung}: {m:.4} ± {sd:.4}");
                    }
                }
                Experiment::Transfer => {
                    run_transfer(&cfg, plan, out)?;
                    print!("{}", fs::read_to_string(out.join("transfer.dat"))?);
                }
                Experiment::TauSweep => {
                    run_tau_sweep(&cfg, plan, out)?;
                    print!("{}", fs::read_to_string(out.join("tau_sweep.dat"))?);
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<GenError>().map_or(1, GenError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
