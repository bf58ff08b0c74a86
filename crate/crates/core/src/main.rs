use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde::Serialize;

use phi4lab::mc_experiments::{
    emit_plot_data, fit_scaling, ledger_path, normalized_spread, oracle_suite, renormalization_necessity_study, run_plan,
    ExperimentPlan, PlotQuery, StudyConfig,
};
use phi4lab::regular_part::{fit_decay, regular_part_decay_profile, ParabolicSolverConfig};
use phi4lab::renorm_trees::{TreeInputs, TreeOptions};
use phi4lab::Error;

#[derive(Parser)]
#[command(name = "phi4lab", version, about = "Monte Carlo studies of renormalized trees with noise-correlated coefficients")]
struct Cli {
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    budget_seconds: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw one realization at the first delta and export its fields.
    Sample {
        #[arg(long, default_value_t = 0)]
        realization: u64,
    },
    /// Moment estimates over the lambda sweep and scaling fits.
    ScalingStudy,
    /// Unrenormalized versus renormalized second moments across delta.
    RenormStudy,
    /// Decay of the regular part and, for regular-part objects, moment estimates.
    RegularPartStudy {
        #[arg(long, default_value_t = 200)]
        realizations: usize,
    },
    /// Exact-oracle suites.
    Verify,
    /// CSV and gnuplot tables from a ledger.
    EmitPlots {
        #[arg(long)]
        ledger: Option<PathBuf>,
        #[arg(long)]
        object: Option<String>,
        #[arg(long)]
        p: Option<u32>,
    },
}

enum Failure {
    Config(String),
    Budget(String),
    Acceptance(String),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(Error::Config(_)) | Some(Error::UnresolvableScale { .. }) | Some(Error::SupportEscapesGrid(_)) | Some(Error::InvalidGrid(_)) => {
                Failure::Config(format!("{e:#}"))
            }
            Some(Error::BudgetExceeded { .. }) => Failure::Budget(format!("{e:#}")),
            _ => Failure::Other(e),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Budget(m)) => {
            eprintln!("{m}; rerun to resume from the ledger");
            ExitCode::from(3)
        }
        Err(Failure::Acceptance(m)) => {
            eprintln!("verification failed: {m}");
            ExitCode::from(4)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_plan(cli: &Cli) -> Result<ExperimentPlan, Failure> {
    let path = cli.config.as_ref().ok_or_else(|| Failure::Config("--config is required".into()))?;
    let mut plan = StudyConfig::load(path)?.to_plan()?;
    if let Some(seed) = cli.seed {
        plan.base_seed = seed;
    }
    Ok(plan)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Sample { realization } => {
            let plan = load_plan(cli)?;
            let spec = plan.realization_spec(0)?;
            let inputs = TreeInputs::sample(&spec, plan.base_seed, *realization)?;
            let trees = inputs.trees(
                &spec,
                TreeOptions {
                    engine: plan.engine,
                    cherry_table: None,
                },
            )?;
            std::fs::create_dir_all(&cli.out).map_err(|e| Failure::Other(e.into()))?;
            inputs.xi.write_binary(&cli.out.join("xi.bin"))?;
            inputs.xi_delta.write_binary(&cli.out.join("xi_delta.bin"))?;
            inputs.coeff.write_binary(&cli.out.join("coeff.bin"))?;
            trees.lollipop_hat.write_binary(&cli.out.join("lollipop_hat.bin"))?;
            trees.cherry_bar.write_binary(&cli.out.join("cherry_bar.bin"))?;
            trees.chickenfoot_bar.write_binary(&cli.out.join("chickenfoot_bar.bin"))?;
            println!("wrote realization {realization} to {}", cli.out.display());
        }
        Command::ScalingStudy => {
            let plan = load_plan(cli)?;
            let reports = run_plan(&plan, &cli.out, cli.budget_seconds)?;
            write_json(&cli.out.join("reports.json"), &reports)?;
            let mut fits = Vec::new();
            for &object in &plan.objects {
                for &p in &plan.p {
                    if let Ok(fit) = fit_scaling(&reports, object, p) {
                        let spread = fit.target.and_then(|t| normalized_spread(&reports, object, p, 0, t));
                        println!(
                            "{:<16} p={} beta={:.3} [{:.3}, {:.3}] target={:?} normalized max/min={:?}",
                            object.name(),
                            p,
                            fit.beta,
                            fit.beta_ci.0,
                            fit.beta_ci.1,
                            fit.target,
                            spread
                        );
                        fits.push(fit);
                    }
                }
            }
            write_json(&cli.out.join("fits.json"), &fits)?;
        }
        Command::RenormStudy => {
            let plan = load_plan(cli)?;
            let study = renormalization_necessity_study(&plan, &cli.out, cli.budget_seconds)?;
            println!(
                "unrenormalized growth {:.3}, renormalized max/min {:.3}",
                study.unrenormalized_growth, study.renormalized_spread
            );
            write_json(&cli.out.join("renorm.json"), &study)?;
        }
        Command::RegularPartStudy { realizations } => {
            let plan = load_plan(cli)?;
            let spec = plan.realization_spec(0)?;
            let cfg = plan.solver.unwrap_or(ParabolicSolverConfig::default());
            let profile = regular_part_decay_profile(&spec, &cfg, *realizations, plan.base_seed)?;
            let fit = fit_decay(&profile, (4.0 * spec.grid.dt, 0.25))?;
            println!("decay slope {:.3} (r2 {:.3})", fit.slope, fit.r2);
            write_json(&cli.out.join("decay_fit.json"), &fit)?;
            write_json(&cli.out.join("decay_profile.json"), &profile)?;
            if plan.objects.iter().any(|o| o.name().starts_with("regular_part")) {
                let reports = run_plan(&plan, &cli.out, cli.budget_seconds)?;
                write_json(&cli.out.join("reports.json"), &reports)?;
            }
        }
        Command::Verify => {
            let checks = oracle_suite(cli.seed.unwrap_or(0))?;
            let mut failed = Vec::new();
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                if !c.passed {
                    failed.push(c.name.clone());
                }
            }
            if !failed.is_empty() {
                return Err(Failure::Acceptance(failed.join(", ")));
            }
        }
        Command::EmitPlots { ledger, object, p } => {
            let ledger = ledger.clone().unwrap_or_else(|| ledger_path(&cli.out));
            let object = object
                .as_ref()
                .map(|o| serde_json::from_value(serde_json::Value::String(o.clone())))
                .transpose()
                .map_err(|e| Failure::Config(format!("unknown object: {e}")))?;
            let (csv, long) = emit_plot_data(&ledger, PlotQuery { object, p: *p }, &cli.out)?;
            println!("wrote {} and {}", csv.display(), long.display());
        }
    }
    Ok(())
}
