mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use simtune::logfeat::emit_log;
use simtune::oracle::{clean_dataset, logo_cv, Dataset};
use simtune::searchspace::{builtin_space, from_controls, to_controls, validate, ParamValue, SearchSpace};
use simtune::simkernel::{cases, run_simulation, SimStatus, SimulationCase};
use simtune::workflow::{
    baseline_run, coupled_run, generate_problem, run_campaign, speedup_report, EnsembleSpec, HistoryMatchProblem,
    RunLedger, SpeedupReport, WorkflowOutcome,
};

use config::ProjectConfig;

#[derive(Parser)]
#[command(name = "simtune", version, about = "Numerical-control tuning for ensemble history matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Project configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed the command draws from.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for simulations and training.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory; defaults to the configured workdir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write its result, log and curves.
    Simulate {
        /// Case JSON; the built-in reference case when absent.
        #[arg(long)]
        case: Option<PathBuf>,
        /// Control override, `name=value`, repeatable.
        #[arg(long = "set", value_name = "NAME=VALUE")]
        overrides: Vec<String>,
        /// Timeout in modeled seconds.
        #[arg(long)]
        timeout: Option<f64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run the configured campaign and write the dataset.
    Dataset(Common),
    /// Grid-search the oracle with leave-one-group-out CV.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset CSV; the configured path when absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Run history matching with tuning, without it, or both.
    Esmda {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tuned: bool,
        #[arg(long)]
        baseline: bool,
    },
    /// Compare a tuned and a baseline ledger.
    Report {
        /// Tuned `ledger.json`.
        #[arg(long)]
        tuned: PathBuf,
        /// Baseline `ledger.json`.
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

/// Error carrying its process exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

trait ExitWith<T> {
    fn exit_with(self, code: u8) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> ExitWith<T> for Result<T, E> {
    fn exit_with(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

const USAGE: u8 = 1;
const SIMULATION: u8 = 2;
const TRAINING: u8 = 3;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate { case, overrides, timeout, out } => cmd_simulate(case.as_deref(), &overrides, timeout, &out),
        Command::Dataset(c) => cmd_dataset(&c),
        Command::Train { common, dataset } => cmd_train(&common, dataset),
        Command::Esmda { common, tuned, baseline } => cmd_esmda(&common, tuned, baseline),
        Command::Report { tuned, baseline, out } => cmd_report(&tuned, &baseline, &out),
    }
}

fn load(c: &Common) -> Result<(ProjectConfig, PathBuf), Failure> {
    let cfg = ProjectConfig::load(&c.config).exit_with(USAGE)?;
    let out = c.out.clone().unwrap_or_else(|| cfg.paths.workdir.clone());
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display())).exit_with(USAGE)?;
    Ok((cfg, out))
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display())).exit_with(USAGE)
}

fn parse_override(space: &SearchSpace, s: &str) -> Result<(String, ParamValue)> {
    let (name, raw) = s.split_once('=').ok_or_else(|| anyhow!("override `{s}` is not NAME=VALUE"))?;
    let p = space.param(name).ok_or_else(|| anyhow!("unknown control `{name}`"))?;
    let v = match &p.default {
        ParamValue::Int(_) => ParamValue::Int(raw.parse().with_context(|| format!("`{name}` needs an integer"))?),
        ParamValue::Real(_) => ParamValue::Real(raw.parse().with_context(|| format!("`{name}` needs a number"))?),
        ParamValue::Cat(_) => ParamValue::Cat(raw.to_string()),
    };
    Ok((name.to_string(), v))
}

fn cmd_simulate(case: Option<&Path>, overrides: &[String], timeout: Option<f64>, out: &Path) -> Result<(), Failure> {
    let mut case: SimulationCase = match case {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).exit_with(USAGE)?;
            SimulationCase::from_json(&text).exit_with(USAGE)?
        }
        None => cases::reference_case(),
    };
    let space = builtin_space();
    let mut sample = from_controls(&case.controls);
    for o in overrides {
        let (name, v) = parse_override(&space, o).exit_with(USAGE)?;
        sample.set(&name, v);
    }
    if let Err(v) = validate(&sample, &space) {
        let msg: Vec<String> = v.iter().map(ToString::to_string).collect();
        return Err(Failure { code: USAGE, error: anyhow!("invalid controls: {}", msg.join("; ")) });
    }
    case.controls = to_controls(&sample, &case.controls).exit_with(USAGE)?;
    let result = run_simulation(&case, timeout.unwrap_or(f64::INFINITY)).exit_with(USAGE)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display())).exit_with(USAGE)?;
    write(&out.join("result.json"), result.to_json())?;
    write(&out.join("run.log"), emit_log(&result, &case).to_text())?;
    write(&out.join("curves.csv"), result.curves.to_csv())?;
    println!(
        "{} elapsed_s={} mean_abs_mbe={} timesteps={}",
        result.status.as_str(),
        result.elapsed_s,
        result.mbe.mean_abs(),
        result.counters.timesteps
    );
    if result.status != SimStatus::Normal {
        return Err(Failure {
            code: SIMULATION,
            error: anyhow!("simulation ended {}: {}", result.status.as_str(), result.message.unwrap_or_default()),
        });
    }
    Ok(())
}

fn cmd_dataset(c: &Common) -> Result<(), Failure> {
    let (cfg, out) = load(c)?;
    let space = builtin_space();
    let spec = EnsembleSpec {
        seed: c.seed.unwrap_or(cfg.campaign.ensemble_seed),
        n_r: cfg.campaign.n_r,
        ..cfg.ensemble.clone()
    };
    let problem = generate_problem(&spec).exit_with(SIMULATION)?;
    let cases: Vec<_> =
        problem.prior_cases().into_iter().enumerate().map(|(j, c)| (format!("model_{j}"), c)).collect();
    let reference = cfg.campaign.reference.clone().unwrap_or_else(|| space.defaults());
    let workers = c.workers.unwrap_or(cfg.workflow.workers);
    let outcome = run_campaign(&cases, &cfg.campaign.plan, &reference, &space, workers, cfg.campaign.timeout_factor)
        .exit_with(SIMULATION)?;
    let path = if c.out.is_some() { out.join("dataset.csv") } else { cfg.paths.dataset.clone() };
    outcome.cleaned.save(&path).exit_with(USAGE)?;
    outcome.raw.save(&out.join("dataset_raw.csv")).exit_with(USAGE)?;
    let mut disc = String::from("group_id,sample,status,message\n");
    for d in &outcome.discards {
        let sample = d.sample.map(|s| s.to_string()).unwrap_or_else(|| "reference".into());
        disc.push_str(&format!("{},{},{},\"{}\"\n", d.group_id, sample, d.status.as_str(), d.message.replace('"', "'")));
    }
    write(&out.join("discards.csv"), disc)?;
    println!(
        "{} runs, {} kept, {} discarded, {} groups -> {}",
        outcome.raw.rows.len(),
        outcome.cleaned.rows.len(),
        outcome.discards.len(),
        outcome.cleaned.groups().len(),
        path.display()
    );
    Ok(())
}

fn cmd_train(c: &Common, dataset: Option<PathBuf>) -> Result<(), Failure> {
    let (cfg, out) = load(c)?;
    let path = dataset.unwrap_or_else(|| cfg.paths.dataset.clone());
    let ds = Dataset::load(&path).with_context(|| format!("loading {}", path.display())).exit_with(USAGE)?;
    let ds = clean_dataset(&ds).exit_with(TRAINING)?;
    let space = builtin_space();
    let seed = c.seed.unwrap_or(cfg.train.seed);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(c.workers.unwrap_or(cfg.workflow.workers))
        .build()
        .exit_with(USAGE)?;
    let grid = cfg.grid();
    let (report, oracle) =
        pool.install(|| logo_cv(&ds, &space, &grid, cfg.train.refit_metric, seed)).exit_with(TRAINING)?;
    let oracle_path = if c.out.is_some() { out.join("oracle.json") } else { cfg.paths.oracle.clone() };
    oracle.save(&oracle_path).exit_with(USAGE)?;
    write(&out.join("cv_report.csv"), report.to_csv())?;
    let best = report.best_candidate();
    println!(
        "best {} validation MAPE {:.3}% over {} groups -> {}",
        best.candidate.regressor.label(),
        best.mean_validation.mape,
        ds.groups().len(),
        oracle_path.display()
    );
    Ok(())
}

fn save_arm(o: &WorkflowOutcome, dir: &Path, cfg: &ProjectConfig, problem: &HistoryMatchProblem) -> Result<(), Failure> {
    o.save(dir, problem, &cfg.esmda, &builtin_space()).exit_with(USAGE)?;
    Ok(())
}

fn cmd_esmda(c: &Common, tuned: bool, baseline: bool) -> Result<(), Failure> {
    if !tuned && !baseline {
        return Err(Failure { code: USAGE, error: anyhow!("pass --tuned, --baseline or both") });
    }
    let (cfg, out) = load(c)?;
    let space = builtin_space();
    let mut wf = cfg.workflow.clone();
    if let Some(s) = c.seed {
        wf.seed = s;
    }
    if let Some(w) = c.workers {
        wf.workers = w;
    }
    let problem = generate_problem(&cfg.ensemble).exit_with(SIMULATION)?;
    let initial = if tuned && cfg.paths.dataset.exists() {
        Some(Dataset::load(&cfg.paths.dataset).exit_with(USAGE)?)
    } else {
        None
    };
    let classify = |e: simtune::workflow::WorkflowError| {
        use simtune::workflow::WorkflowError as W;
        let code = match &e {
            W::Config(_) | W::Budget { .. } | W::Search(_) => USAGE,
            W::Oracle(_) => TRAINING,
            _ => SIMULATION,
        };
        Failure { code, error: e.into() }
    };
    let mut arms = Vec::new();
    if tuned {
        let o = coupled_run(&problem, &cfg.esmda, &wf, initial.as_ref(), &space).map_err(classify)?;
        save_arm(&o, &out.join("tuned"), &cfg, &problem)?;
        println!("tuned: {} simulations, mean elapsed {:.6} s", o.ledger.simulations(), o.ledger.mean_elapsed(1..=usize::MAX));
        arms.push(o);
    }
    if baseline {
        let o = baseline_run(&problem, &cfg.esmda, &wf, &space).map_err(classify)?;
        save_arm(&o, &out.join("baseline"), &cfg, &problem)?;
        println!(
            "baseline: {} simulations, mean elapsed {:.6} s",
            o.ledger.simulations(),
            o.ledger.mean_elapsed(1..=usize::MAX)
        );
        arms.push(o);
    }
    if let [t, b] = arms.as_slice() {
        let r = speedup_report(&t.ledger, &b.ledger, &wf.wet).exit_with(USAGE)?;
        write_report(&r, &out.join("report"))?;
        println!("speedup {:.3}", r.total.speedup);
    }
    Ok(())
}

fn write_report(r: &SpeedupReport, dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).exit_with(USAGE)?;
    write(&dir.join("summary.csv"), r.summary_csv())?;
    write(&dir.join("histograms.csv"), r.histogram_csv())?;
    write(&dir.join("bands.csv"), r.bands_csv())?;
    write(&dir.join("runs.csv"), r.runs_csv())
}

fn read_ledger(p: &Path) -> Result<RunLedger> {
    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    RunLedger::from_json(&text).with_context(|| format!("parsing {}", p.display()))
}

fn cmd_report(tuned: &Path, baseline: &Path, out: &Path) -> Result<(), Failure> {
    let t = read_ledger(tuned).exit_with(USAGE)?;
    let b = read_ledger(baseline).exit_with(USAGE)?;
    let policy = simtune::workflow::WetPolicy::default();
    let r = speedup_report(&t, &b, &policy).exit_with(USAGE)?;
    write_report(&r, out)?;
    println!("speedup {:.3}", r.total.speedup);
    Ok(())
}
