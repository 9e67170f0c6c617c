use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use robust_sysid::estimators::{solve, RegressionProblem};
use robust_sysid::harness::experiments::prepare_cell;
use robust_sysid::harness::output::{prepare_output_dir, write_experiment, write_manifest, write_reports};
use robust_sysid::harness::{self, ExperimentConfig, ExperimentKind, Scale};
use serde_json::json;

#[derive(Parser)]
#[command(name = "robust-sysid", version, about = "Robust nonlinear system identification under sparse attacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config file; "-" or omitted reads stdin.
    #[arg(long)]
    config: Option<String>,
    /// Overrides base_seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "output-dir")]
    output_dir: Option<PathBuf>,
    /// paper or desk; desk clamps sizes to the desk caps.
    #[arg(long)]
    scale: Option<Scale>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one trajectory (first input family, τ and ρ of the config).
    Simulate(Common),
    /// Fit the ground-truth G* for one (system, basis) pair.
    FitGstar(Common),
    /// Run every configured estimator on one full trajectory.
    Estimate(Common),
    /// Residual-bound, uniqueness-condition, excitation and ν checks.
    Check(Common),
    /// Run a full experiment grid.
    Experiment(Common),
    /// Build the two-system lower-bound instance and check its identities.
    Lowerbound(LowerboundArgs),
}

#[derive(Args)]
struct LowerboundArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long = "T")]
    horizon: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long = "L")]
    l: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long = "n-seeds")]
    n_seeds: Option<usize>,
}

fn read_config(common: &Common, fallback: Option<ExperimentKind>) -> robust_sysid::Result<ExperimentConfig> {
    let text = match common.config.as_deref() {
        Some("-") => None,
        Some(path) => Some(std::fs::read_to_string(path)?),
        None if fallback.is_some() => {
            return finish_config(ExperimentConfig::preset(fallback.unwrap(), Scale::Desk), common);
        }
        None => None,
    };
    let text = match text {
        Some(t) => t,
        None => {
            let mut buf = String::new();
            std::io::stdin().read_to_string(&mut buf)?;
            buf
        }
    };
    let cfg: ExperimentConfig = ExperimentConfig::from_json(&text)?;
    finish_config(cfg, common)
}

fn finish_config(mut cfg: ExperimentConfig, common: &Common) -> robust_sysid::Result<ExperimentConfig> {
    if let Some(seed) = common.seed {
        cfg.base_seed = seed;
    }
    if let Some(scale) = common.scale {
        cfg.apply_scale(scale);
    }
    if let Some(dir) = &common.output_dir {
        cfg.output_dir = Some(dir.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("out").join(cfg.short_hash()))
}

fn write_json(dir: &Path, name: &str, value: serde_json::Value, cfg: &ExperimentConfig) -> robust_sysid::Result<()> {
    let files = write_reports(dir, &[], &[(name, value)], &cfg.short_hash())?;
    write_manifest(dir, cfg, &files, None)?;
    Ok(())
}

fn run(cli: Cli) -> robust_sysid::Result<bool> {
    harness::init_thread_pool();
    match cli.command {
        Command::Simulate(common) => {
            let cfg = read_config(&common, None)?;
            let dir = output_dir(&cfg);
            prepare_output_dir(&dir)?;
            let (tau, rho, seed) = (cfg.system.tau[0], cfg.system.rho[0], cfg.base_seed);
            let input = &cfg.inputs[0];
            let data = prepare_cell(&cfg, input, tau, rho, seed)?;
            data.trajectory.write_csv(std::fs::File::create(dir.join("trajectory.csv"))?)?;
            let mut files = vec!["trajectory.csv".to_string()];
            let attacked = data.trajectory.attack_flags.iter().filter(|&&f| f).count();
            files.extend(write_reports(
                &dir,
                &[],
                &[
                    ("system.json", serde_json::to_value(&data.spec)?),
                    (
                    "simulation.json",
                    json!({ "seed": seed, "tau": tau, "rho": rho, "input": input.label(),
                            "horizon": data.trajectory.horizon(), "attacked_steps": attacked }),
                    ),
                ],
                &cfg.short_hash(),
            )?);
            // trajectory.csv has no hash column; its manifest entry carries it.
            write_manifest(&dir, &cfg, &files, None)?;
            println!(
                "simulate seed={seed} T={} attacked={attacked} dir={}",
                data.trajectory.horizon(),
                dir.display()
            );
            Ok(true)
        }
        Command::FitGstar(common) => {
            let cfg = read_config(&common, None)?;
            let dir = output_dir(&cfg);
            prepare_output_dir(&dir)?;
            let data = prepare_cell(&cfg, &cfg.inputs[0], cfg.system.tau[0], cfg.system.rho[0], cfg.base_seed)?;
            let gt = serde_json::to_value(&data.ground_truth)?;
            write_json(&dir, "ground_truth.json", gt, &cfg)?;
            println!(
                "fit-gstar seed={} eps_bar={:.4e} reg={:e} dir={}",
                cfg.base_seed,
                data.ground_truth.eps_bar,
                data.ground_truth.reg_param,
                dir.display()
            );
            Ok(true)
        }
        Command::Estimate(common) => {
            let cfg = read_config(&common, None)?;
            let dir = output_dir(&cfg);
            prepare_output_dir(&dir)?;
            let tau = cfg.system.tau[0];
            let data = prepare_cell(&cfg, &cfg.inputs[0], tau, cfg.system.rho[0], cfg.base_seed)?;
            let mut reports = Vec::new();
            let mut all_converged = true;
            for &norm in &cfg.estimators {
                let problem = RegressionProblem::new(data.features.clone(), data.targets.clone(), norm, tau)?;
                let report = solve(&problem, &cfg.solver)?.with_truth(&data.ground_truth.g_star);
                println!(
                    "estimate {} frob_error={:.4e} objective={:.6e} iters={} converged={}",
                    norm.name(),
                    report.frob_error.unwrap_or(f64::NAN),
                    report.objective,
                    report.iters,
                    report.converged
                );
                all_converged &= report.converged;
                reports.push(serde_json::to_value(&report)?);
            }
            write_json(&dir, "estimates.json", json!({ "seed": cfg.base_seed, "reports": reports }), &cfg)?;
            Ok(all_converged)
        }
        Command::Check(common) => {
            let cfg = read_config(&common, None)?;
            let dir = output_dir(&cfg);
            prepare_output_dir(&dir)?;
            let checks = harness::run_checks(&cfg)?;
            let files = write_reports(&dir, &checks, &[], &cfg.short_hash())?;
            write_manifest(&dir, &cfg, &files, None)?;
            for c in &checks {
                println!(
                    "check {} {} value={:.4e} threshold={:.4e}",
                    c.check_name,
                    if c.pass { "PASS" } else { "FAIL" },
                    c.value,
                    c.threshold
                );
            }
            Ok(true)
        }
        Command::Experiment(common) => {
            let cfg = read_config(&common, None)?;
            let dir = output_dir(&cfg);
            prepare_output_dir(&dir)?;
            let out = harness::run_experiment(&cfg)?;
            write_experiment(&dir, &cfg, &out)?;
            for g in &out.summary {
                println!(
                    "{} {} tau={} rho={} {} plateau={:.4e} rel_slope={:+.3}",
                    cfg.experiment.name(),
                    g.input,
                    g.tau,
                    g.rho,
                    g.estimator,
                    g.plateau_median,
                    g.relative_slope
                );
            }
            println!(
                "experiment {} hash={} rows={} failures={} dir={}",
                cfg.experiment.name(),
                cfg.short_hash(),
                out.rows.len(),
                out.failures.len(),
                dir.display()
            );
            Ok(out.failures.is_empty())
        }
        Command::Lowerbound(args) => {
            let mut cfg = if args.common.config.is_some() {
                read_config(&args.common, None)?
            } else {
                read_config(&args.common, Some(ExperimentKind::LowerBound))?
            };
            let lb = &mut cfg.lower_bound;
            lb.rho = args.rho.unwrap_or(lb.rho);
            lb.tau = args.tau.unwrap_or(lb.tau);
            lb.horizon = args.horizon.unwrap_or(lb.horizon);
            lb.delta = args.delta.unwrap_or(lb.delta);
            lb.l = args.l.unwrap_or(lb.l);
            lb.kappa = args.kappa.unwrap_or(lb.kappa);
            lb.n_seeds = args.n_seeds.unwrap_or(lb.n_seeds);
            let dir = output_dir(&cfg);
            prepare_output_dir(&dir)?;
            let (report, checks) = harness::run_lower_bound(&cfg)?;
            let hash = cfg.short_hash();
            let files = write_reports(&dir, &checks, &[("lowerbound.json", serde_json::to_value(&report)?)], &hash)?;
            write_manifest(&dir, &cfg, &files, None)?;
            let indist = checks.iter().find(|c| c.check_name == "lower_bound_indistinguishable").is_some_and(|c| c.pass);
            println!(
                "lowerbound gap={:.6e} sigma_w={:.3e} floor_fraction={:.3} indistinguishable={}",
                report.gap,
                report.sigma_w,
                report.floor_fraction,
                if indist { "PASS" } else { "FAIL" }
            );
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
