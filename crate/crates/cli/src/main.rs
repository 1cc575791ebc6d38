mod analyze;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use relgate::experiment::{self, ExperimentConfig, SweepAxis, SweepSpec};
use relgate::gate::GateMode;
use relgate::verify;

#[derive(Parser, Debug)]
#[command(name = "relgate", version, about = "Reliability-gated continual test-time adaptation harness")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Experiment config (TOML); unknown keys are errors.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Comma-separated seeds, overriding the config.
    #[arg(long, global = true, value_delimiter = ',', value_name = "SEEDS")]
    seed_list: Option<Vec<u64>>,
    /// Output directory [default: out].
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads [default: all cores].
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Print the fully resolved config and exit.
    #[arg(long, global = true)]
    print_effective_config: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every (method, seed, ordering, level) cell and write traces and a summary.
    Run,
    /// Train sources and calibrate degraded copies to the configured targets.
    Calibrate {
        /// Comma-separated target clean accuracies, overriding `s_targets`.
        #[arg(long, value_delimiter = ',')]
        targets: Option<Vec<f64>>,
    },
    /// Repeat the run grid over the values of one hyperparameter.
    Sweep {
        /// One of s_targets, tau_gate, lambda, alpha, beta, lambda_marg, eta_min, w_min, eta.
        #[arg(long)]
        axis: Option<String>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        values: Option<Vec<f64>>,
    },
    /// Analysis recipes over summaries, traces or the bundled fixtures.
    Analyze(analyze::AnalyzeArgs),
    /// Run the invariant, gradient and statistics checks.
    Verify {
        /// Print tolerances and details for every check.
        #[arg(long, short)]
        verbose: bool,
        /// Random configurations per gradient check.
        #[arg(long, default_value_t = 20)]
        gradient_configs: usize,
        /// Random instances per statistics oracle.
        #[arg(long, default_value_t = 50)]
        stats_instances: usize,
        /// Null resamples per p-value.
        #[arg(long, default_value_t = 1_000_000)]
        resamples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Batches of the source-collapse run.
        #[arg(long, default_value_t = 200)]
        collapse_batches: usize,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.global.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: cannot size worker pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(g: &Global) -> relgate::error::Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seeds) = &g.seed_list {
        cfg.seeds = seeds.clone();
    }
    Ok(cfg)
}

fn print_config(cfg: &ExperimentConfig) -> relgate::error::Result<ExitCode> {
    for w in cfg.validate()? {
        eprintln!("warning: {w}");
    }
    print!("{}", cfg.to_toml());
    Ok(ExitCode::SUCCESS)
}

fn dispatch(cli: &Cli) -> relgate::error::Result<ExitCode> {
    let g = &cli.global;
    let out = experiment::out_dir(g.out.as_deref());
    match &cli.command {
        Command::Run => {
            let cfg = load_config(g)?;
            if g.print_effective_config {
                return print_config(&cfg);
            }
            cmd_run(&cfg, &out)
        }
        Command::Calibrate { targets } => {
            let mut cfg = load_config(g)?;
            if let Some(t) = targets {
                cfg.s_targets = t.clone();
            }
            if g.print_effective_config {
                return print_config(&cfg);
            }
            cmd_calibrate(&cfg, &out)
        }
        Command::Sweep { axis, values } => {
            let mut cfg = load_config(g)?;
            let spec = match (axis, values, &cfg.sweep) {
                (Some(a), Some(v), _) => SweepSpec {
                    axis: SweepAxis::parse(a)?,
                    values: v.clone(),
                },
                (Some(a), None, _) => SweepSpec {
                    axis: SweepAxis::parse(a)?,
                    values: Vec::new(),
                },
                (None, _, Some(s)) => s.clone(),
                (None, _, None) => {
                    return Err(relgate::error::Error::Config {
                        key: "sweep".into(),
                        msg: "no sweep axis: pass --axis/--values or set [sweep]".into(),
                    })
                }
            };
            cfg.sweep = Some(spec.clone());
            if g.print_effective_config {
                return print_config(&cfg);
            }
            cmd_sweep(&cfg, &spec, &out)
        }
        Command::Analyze(args) => {
            if g.print_effective_config {
                print!("{}", args.effective());
                return Ok(ExitCode::SUCCESS);
            }
            analyze::run(args, &out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify {
            verbose,
            gradient_configs,
            stats_instances,
            resamples,
            seed,
            collapse_batches,
            inject_fault,
        } => {
            let gate = if *inject_fault { GateMode::Inverted } else { GateMode::Reliability };
            let mut checks = vec![verify::collapse_check(*collapse_batches, gate)?];
            checks.extend(verify::gradient_checks(*gradient_configs, *seed)?);
            checks.extend(verify::stats_checks(*stats_instances, *resamples, *seed)?);
            Ok(print_checks(&checks, *verbose))
        }
    }
}

fn print_checks(checks: &[verify::Check], verbose: bool) -> ExitCode {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    for c in checks {
        let mark = if c.passed { "PASS" } else { "FAIL" };
        if verbose || !c.passed {
            println!(
                "{mark}  {:width$}  measured {:.3e}  tolerance {:.3e}  {}",
                c.name, c.measured, c.tolerance, c.detail
            );
        } else {
            println!("{mark}  {}", c.name);
        }
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed", checks.len());
        ExitCode::SUCCESS
    } else {
        eprintln!("violated: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}

fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> relgate::error::Result<ExitCode> {
    let outcome = experiment::run_grid(cfg)?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    experiment::write_grid(cfg, &outcome, out)?;
    println!("{} runs -> {}", outcome.runs.len(), out.join("summary.csv").display());
    let aborted = outcome.aborted();
    if aborted.is_empty() {
        return Ok(ExitCode::SUCCESS);
    }
    for r in aborted {
        eprintln!("aborted: {} ({})", r.stem(), r.trace.aborted.as_deref().unwrap_or(""));
    }
    Ok(ExitCode::FAILURE)
}

fn cmd_calibrate(cfg: &ExperimentConfig, out: &Path) -> relgate::error::Result<ExitCode> {
    let sources = experiment::calibrate(cfg)?;
    experiment::write_calibration(&sources, out)?;
    println!("{:>6} {:>8} {:>8} {:>10} {:>5}", "seed", "target", "achieved", "epsilon", "iters");
    for s in &sources {
        let m = &s.manifest;
        println!(
            "{:>6} {:>8.4} {:>8.4} {:>10.6} {:>5}",
            s.seed, m.target_s, m.achieved_s, m.epsilon, m.iterations
        );
    }
    println!("{} sources -> {}", sources.len(), out.join("calibration.csv").display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(cfg: &ExperimentConfig, spec: &SweepSpec, out: &Path) -> relgate::error::Result<ExitCode> {
    let s = experiment::sweep(cfg, spec)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("effective_config.toml"), cfg.to_toml())?;
    experiment::write_sweep(&s, fs::File::create(out.join("sweep.csv"))?)?;
    println!(
        "{} runs, {} rows -> {}",
        s.runs,
        s.rows.len(),
        out.join("sweep.csv").display()
    );
    for r in &s.rows {
        println!(
            "{}={:<8} {:<24} {:<5} err {:>7.3} +/- {:<6.3} r_src {:.3} resets {:.1}",
            spec.axis.name(),
            r.value,
            r.method,
            r.ordering,
            r.err_mean,
            r.err_std,
            r.mean_r_src,
            r.resets_mean
        );
    }
    if s.aborted > 0 {
        eprintln!("{} runs aborted", s.aborted);
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}
