use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use adaplan_core::checkpoint::Checkpoint;
use adaplan_core::cost::CostModel;
use adaplan_core::data::{make_synthetic_dataset, Split};
use adaplan_core::harness::{self, SweepReport};
use adaplan_core::model::ModelConfig;
use adaplan_core::scheduler::{argmax_plan, LatencyBudget, SchedulerLogits};
use adaplan_core::training::{train, write_log_csv, Arm};
use adaplan_core::ExperimentConfig;
use adaplan_oracle::{run_check, CheckOptions, CHECK_NAMES};

/// Number of evaluation worker threads.
const THREADS_ENV: &str = "ADAPLAN_THREADS";

#[derive(Parser)]
#[command(name = "adaplan", version, about = "Latency-budgeted adaptive inference toolkit")]
struct Cli {
    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON). Defaults to the built-in toy setup.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one arm and write a checkpoint plus the training log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides the arm in the config: probabilistic, deterministic,
        /// random or base.
        #[arg(long)]
        arm: Option<String>,
        /// Hinge weight for the deterministic arm.
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate a checkpoint over a budget grid.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Budgets, comma separated or repeated. Defaults to the config grid.
        #[arg(long, value_delimiter = ',')]
        budget: Vec<f64>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Train and evaluate every arm over several seeds, then merge a report.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "probabilistic,deterministic,random,base")]
        arms: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0.1,1,10")]
        lambdas: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        budget: Vec<f64>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Dump the plan, scheduler logits and latency-token attention for one
    /// eval sample.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        budget: f64,
        /// Index into the eval split.
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
    /// Prefill FLOP accounting for a config.
    Flops {
        #[command(flatten)]
        common: Common,
        /// `llava-7b` selects the 7B-scale calibration model.
        #[arg(long)]
        preset: Option<String>,
        /// Prompt length; defaults to the task prompt, or 620 for presets.
        #[arg(long)]
        seq_len: Option<usize>,
        #[arg(long)]
        budget: Option<f64>,
    },
    /// Run brute-force oracle checks; exits non-zero if any fails.
    Oracle {
        #[command(flatten)]
        common: Common,
        /// Checks to run (default: all).
        #[arg(long, value_delimiter = ',')]
        check: Vec<String>,
        #[arg(long)]
        draws: Option<usize>,
    },
    /// Merge sweep files into one CSV and Markdown table.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        sweeps: Vec<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    let level = if cli.quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    if let Err(e) = configure_threads().and_then(|_| run(cli.command)) {
        eprintln!("error: {e:#}");
        std::process::exit(2);
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().with_context(|| format!("{THREADS_ENV}={v:?} is not a number"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut exp = match &common.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => ExperimentConfig::toy(),
    };
    if let Some(s) = common.seed {
        exp.train.seed = s;
    }
    Ok(exp)
}

fn parse_arm(name: &str, lambda: f64) -> Result<Arm> {
    Ok(match name {
        "probabilistic" => Arm::Probabilistic,
        "deterministic" => Arm::Deterministic { lambda },
        "random" => Arm::Random,
        "base" => Arm::Base,
        other => bail!("unknown arm {other:?}"),
    })
}

fn write_json(path: Option<&Path>, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train {
            common,
            arm,
            lambda,
            steps,
        } => {
            let mut exp = load_config(&common)?;
            if let Some(a) = arm {
                exp.train.arm = parse_arm(&a, lambda)?;
            }
            if let Some(s) = steps {
                exp.train.steps = s;
            }
            let dir = out_dir(&common)?;
            train_to(&exp, &dir)?;
            Ok(())
        }
        Command::Evaluate {
            common,
            checkpoint,
            budget,
            samples,
        } => {
            let ck = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let seed = common.seed.unwrap_or(ck.config().train.seed);
            let dir = out_dir(&common)?;
            let label = ck.config().train.arm.label();
            evaluate_to(&ck, &budget, samples, seed, &label, &dir)?;
            Ok(())
        }
        Command::Sweep {
            common,
            arms,
            lambdas,
            seeds,
            steps,
            budget,
            samples,
        } => {
            let base = load_config(&common)?;
            let dir = out_dir(&common)?;
            let mut reports = Vec::new();
            for s in 0..seeds {
                for name in &arms {
                    let lams: Vec<f64> = if name == "deterministic" { lambdas.clone() } else { vec![1.0] };
                    for &lam in &lams {
                        let mut exp = base.clone();
                        exp.train.arm = parse_arm(name, lam)?;
                        exp.train.seed = base.train.seed + s;
                        if let Some(n) = steps {
                            exp.train.steps = n;
                        }
                        let label = format!("{} seed={}", exp.train.arm.label(), exp.train.seed);
                        let run_dir = dir.join(label.replace([' ', '(', ')', '='], "_"));
                        fs::create_dir_all(&run_dir)?;
                        let ck = train_to(&exp, &run_dir)?;
                        reports.push(evaluate_to(&ck, &budget, samples, exp.train.seed, &label, &run_dir)?);
                    }
                }
            }
            write_report(&reports, Some(&dir))
        }
        Command::Inspect {
            common,
            checkpoint,
            budget,
            sample,
        } => {
            let ck = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let exp = ck.config();
            let data = make_synthetic_dataset(&exp.task, sample + 1, exp.eval.data_seed, Split::Eval)?;
            let policy = harness::policy_for(&exp.train.arm, common.seed.unwrap_or(exp.train.seed));
            let dump = harness::inspect(&ck.model()?, exp, &data[sample], budget, &policy)?;
            write_json(common.out.as_deref(), &dump)
        }
        Command::Flops {
            common,
            preset,
            seq_len,
            budget,
        } => {
            let (model, seq) = match preset.as_deref() {
                Some("llava-7b") => (ModelConfig::llava_like(), seq_len.unwrap_or(620)),
                Some(other) => bail!("unknown preset {other:?}"),
                None => {
                    let exp = load_config(&common)?;
                    let seq = seq_len.unwrap_or(exp.task.prompt_len());
                    (exp.model, seq)
                }
            };
            let cost = CostModel::new(&model, seq)?;
            write_json(common.out.as_deref(), &flops_report(&model, &cost, budget)?)
        }
        Command::Oracle { common, check, draws } => {
            let mut opts = CheckOptions {
                seed: common.seed.unwrap_or(0),
                ..CheckOptions::default()
            };
            if let Some(d) = draws {
                opts.draws = d;
            }
            let names: Vec<String> = if check.is_empty() {
                CHECK_NAMES.iter().map(|s| s.to_string()).collect()
            } else {
                check
            };
            let results = names
                .iter()
                .map(|n| run_check(n, &opts))
                .collect::<Result<Vec<_>, _>>()?;
            write_json(common.out.as_deref(), &results)?;
            if results.iter().any(|r| !r.passed) {
                std::process::exit(1);
            }
            Ok(())
        }
        Command::Report { common, sweeps } => {
            let reports = sweeps
                .iter()
                .map(|p| -> Result<SweepReport> {
                    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
                })
                .collect::<Result<Vec<_>>>()?;
            write_report(&reports, common.out.as_deref())
        }
    }
}

fn train_to(exp: &ExperimentConfig, dir: &Path) -> Result<Checkpoint> {
    log::info!("training {} for {} steps", exp.train.arm.label(), exp.train.steps);
    let outcome = train(exp, &mut |row| {
        log::info!(
            "step {:>6}  loss {:.4}  acc {:.3}  budget {:.3}  util {:.3}  success {:.3}",
            row.step,
            row.loss,
            row.accuracy,
            row.budget_mean,
            row.utilization_mean,
            row.success_rate
        )
    })?;
    write_log_csv(&outcome.log, fs::File::create(dir.join("train_log.csv"))?)?;
    let ck = Checkpoint::new(exp.clone(), outcome.model.params, exp.train.steps);
    ck.save(&dir.join("model.ckpt"))?;
    write_json(Some(&dir.join("config.json")), exp)?;
    Ok(ck)
}

fn evaluate_to(
    ck: &Checkpoint,
    budgets: &[f64],
    samples: Option<usize>,
    seed: u64,
    label: &str,
    dir: &Path,
) -> Result<SweepReport> {
    let exp = ck.config();
    let budgets = if budgets.is_empty() { exp.eval.budgets.clone() } else { budgets.to_vec() };
    let n = samples.unwrap_or(exp.eval.n_samples);
    let data = make_synthetic_dataset(&exp.task, n, exp.eval.data_seed, Split::Eval)?;
    let policy = harness::policy_for(&exp.train.arm, seed);
    let (report, records) = harness::evaluate(&ck.model()?, exp, &data, &budgets, &policy, label, seed)?;
    for r in &report.rows {
        log::info!(
            "{label}  l={:.2}  acc {:.1}%  success {:.1}%  util {:.1}%",
            r.budget,
            r.accuracy,
            r.success_rate,
            r.mean_utilization
        );
    }
    write_json(Some(&dir.join("sweep.json")), &report)?;
    harness::write_records_csv(&records, fs::File::create(dir.join("records.csv"))?)?;
    Ok(report)
}

fn write_report(reports: &[SweepReport], out: Option<&Path>) -> Result<()> {
    let rep = harness::report(reports)?;
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("report.csv"), &rep.csv)?;
            fs::write(dir.join("report.md"), &rep.markdown)?;
        }
        None => print!("{}", rep.markdown),
    }
    Ok(())
}

#[derive(Serialize)]
struct FlopsReport {
    seq_len: usize,
    n_switches: usize,
    base_flops: f64,
    fixed_flops: f64,
    l_min: f64,
    switch_costs: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    budget: Option<BudgetFlops>,
}

#[derive(Serialize)]
struct BudgetFlops {
    budget: f64,
    allowance: f64,
    /// Greedy plan under uniform logits.
    plan: String,
    plan_flops: f64,
    ratio: f64,
    utilization: f64,
}

fn flops_report(model: &ModelConfig, cost: &CostModel, budget: Option<f64>) -> Result<FlopsReport> {
    let budget = budget
        .map(|b| -> Result<BudgetFlops> {
            let l = LatencyBudget::for_cost(b, cost)?;
            let plan = argmax_plan(&SchedulerLogits::uniform(model.n_switches()), l, cost);
            let plan_flops = cost.plan_flops(&plan);
            Ok(BudgetFlops {
                budget: b,
                allowance: cost.allowance(b),
                plan: plan.to_string(),
                plan_flops,
                ratio: plan_flops / cost.base_flops(),
                utilization: cost.utilization(&plan, b),
            })
        })
        .transpose()?;
    Ok(FlopsReport {
        seq_len: cost.seq_len(),
        n_switches: cost.n_switches(),
        base_flops: cost.base_flops(),
        fixed_flops: cost.fixed_flops(),
        l_min: cost.l_min(),
        switch_costs: cost.costs().to_vec(),
        budget,
    })
}
