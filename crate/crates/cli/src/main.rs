//! `clusterfl`: simulate, sweep, train and inspect the clustered FL system.
//!
//! Exit status: 0 on success, 1 on a usage error, 2 when a run fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use clusterfl::bandwidth_opt::{
    kkt_residual, normalizers, numeric_oracle, optimal_allocation, proportional_allocation, ClusterFile,
    OracleSettings,
};
use clusterfl::drl_agent::Agent;
use clusterfl::harness::{
    self, build_datasets, classifier_for, gradcheck_suite, run_cell, run_experiment, write_outputs, BackendKind,
    CellOutput, CellSpec, ExperimentPlan, RunSettings, GRADCHECK_TOLERANCE,
};
use clusterfl::scenario::{generate_scenario, ScenarioConfig};
use clusterfl::strategies::{brute_force_best, surrogate_system_accuracy, FullFlBackend, StrategyKind};
use clusterfl::{bandwidth_opt, Error, Result};

/// `println!` that stops quietly when stdout is closed (e.g. piped into `head`).
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Debug, Parser)]
#[command(name = "clusterfl", version, about = "Energy-aware clustered federated learning simulator")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Run seed; overrides `rng_seed` of the scenario.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Scenario TOML file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (or file, where a subcommand writes one).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: ScenarioOverrides,
    #[command(subcommand)]
    command: Command,
}

/// Per-field overrides of the scenario file.
#[derive(Debug, Args)]
struct ScenarioOverrides {
    #[arg(long, global = true)]
    num_users: Option<usize>,
    #[arg(long, global = true)]
    num_stations: Option<usize>,
    #[arg(long, global = true)]
    area_side: Option<f64>,
    #[arg(long, global = true)]
    bandwidth_hz: Option<f64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    tx_power_dbm: Option<f64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    noise_dbm: Option<f64>,
    #[arg(long, global = true)]
    path_loss_exponent: Option<f64>,
    #[arg(long, global = true)]
    model_size_bits: Option<f64>,
    #[arg(long, global = true)]
    mu: Option<f64>,
    #[arg(long, global = true)]
    g_max: Option<f64>,
    #[arg(long, global = true)]
    e_max: Option<f64>,
    /// Label pairs, e.g. `0-1,2-3`.
    #[arg(long, global = true, value_parser = parse_swap_pairs)]
    swap_pairs: Option<Vec<[usize; 2]>>,
}

fn parse_swap_pairs(s: &str) -> std::result::Result<Vec<[usize; 2]>, String> {
    s.split(',')
        .map(|p| {
            let (a, b) = p.split_once('-').ok_or_else(|| format!("`{p}` is not of the form a-b"))?;
            let a = a.trim().parse().map_err(|e| format!("`{a}`: {e}"))?;
            let b = b.trim().parse().map_err(|e| format!("`{b}`: {e}"))?;
            Ok([a, b])
        })
        .collect()
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Backend {
    Surrogate,
    FullFl,
}

impl From<Backend> for BackendKind {
    fn from(b: Backend) -> Self {
        match b {
            Backend::Surrogate => BackendKind::Surrogate,
            Backend::FullFl => BackendKind::FullFl,
        }
    }
}

#[derive(Debug, Args)]
struct CellArgs {
    /// proposed, accuracy-optimal, greedy, proportional, non-transfer, plain-dqn, brute-force.
    #[arg(long, default_value = "proposed", value_parser = parse_strategy)]
    strategy: StrategyKind,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 50)]
    episode_length: usize,
    /// FL rounds per epoch.
    #[arg(long, default_value_t = 5)]
    rounds: usize,
    /// Run-settings TOML (backend, data, FL and agent hyperparameters).
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long, value_enum)]
    backend: Option<Backend>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
}

fn parse_strategy(s: &str) -> std::result::Result<StrategyKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one strategy on one scenario.
    Simulate(CellArgs),
    /// Run every cell of an experiment plan.
    Sweep {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Train a learned strategy and save its agent.
    TrainAgent {
        #[command(flatten)]
        cell: CellArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run a saved agent greedily without learning.
    Eval {
        #[command(flatten)]
        cell: CellArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Split one cluster's bandwidth and check it against the numeric oracle.
    Bandwidth {
        /// Cluster TOML file.
        #[arg(long)]
        cluster: PathBuf,
    },
    /// Exhaustively search the best association of the scenario.
    BruteForce {
        #[arg(long, value_enum, default_value = "surrogate")]
        backend: Backend,
        /// Epochs of training per association with the full-fl backend.
        #[arg(long, default_value_t = 4)]
        fl_epochs: usize,
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        cap: Option<u64>,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Write the scenario dump and every user's label-swapped data.
    DataGen {
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        idx_images: Option<PathBuf>,
        #[arg(long)]
        idx_labels: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn scenario_config(cli: &Cli) -> Result<ScenarioConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ScenarioConfig::load(path)?,
        None => ScenarioConfig::default(),
    };
    let o = &cli.overrides;
    macro_rules! apply {
        ($($field:ident),*) => { $(if let Some(v) = o.$field { cfg.$field = v; })* };
    }
    apply!(num_users, num_stations, area_side, bandwidth_hz, tx_power_dbm, noise_dbm, path_loss_exponent, model_size_bits, mu, g_max);
    if let Some(e) = o.e_max {
        cfg.e_max = Some(e);
    }
    if let Some(p) = &o.swap_pairs {
        cfg.swap_pairs = p.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.rng_seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_settings(path: Option<&Path>) -> Result<RunSettings> {
    path.map_or_else(|| Ok(RunSettings::default()), RunSettings::load)
}

fn out_dir(cli: &Cli, fallback: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(fallback))
}

fn cell_setup(cfg: &ScenarioConfig, args: &CellArgs) -> Result<(RunSettings, CellSpec)> {
    let mut settings = run_settings(args.run.as_deref())?;
    if let Some(b) = args.backend {
        settings.backend = b.into();
    }
    if let Some(p) = args.pretrain_epochs {
        settings.pretrain_epochs = p;
    }
    let cell = CellSpec {
        strategy: args.strategy,
        mu: cfg.mu,
        num_users: cfg.num_users,
        seed: cfg.rng_seed,
        epochs: args.epochs,
        episode_length: args.episode_length,
        rounds: args.rounds,
    };
    Ok((settings, cell))
}

fn report_cell(out: &CellOutput, dir: &Path) -> Result<()> {
    write_outputs(dir, std::slice::from_ref(out))?;
    let s = &out.summary;
    say!(
        "{} mu={} N={} seed={}: objective {:.6}, accuracy {:.6}, energy {:.6e} J over the last {} of {} epochs",
        s.strategy, s.mu, s.num_users, s.seed, s.objective, s.accuracy, s.energy, s.window, s.epochs
    );
    say!("outputs written to {}", dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::Simulate(args) => {
            let cfg = scenario_config(&cli)?;
            let (settings, cell) = cell_setup(&cfg, args)?;
            let out = run_cell(&cfg, &settings, &cell, None)?;
            report_cell(&out, &out_dir(&cli, "out"))?;
        }
        Command::Sweep { plan, threads } => {
            let mut plan = ExperimentPlan::load(plan)?;
            if cli.config.is_some() {
                plan.scenario = cli.config.clone();
            }
            let dir = cli.out.clone().or_else(|| plan.out_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
            let outputs = run_experiment(&plan, &dir, threads.unwrap_or_else(harness::default_threads))?;
            say!("{} cells written to {}", outputs.len(), dir.display());
        }
        Command::TrainAgent { cell: args, checkpoint } => {
            let cfg = scenario_config(&cli)?;
            let (mut settings, cell) = cell_setup(&cfg, args)?;
            if !cell.strategy.profile().association.is_learned() {
                return Err(Error::Config(format!("strategy `{}` has no agent to train", cell.strategy)));
            }
            settings.frozen = false;
            let out = run_cell(&cfg, &settings, &cell, None)?;
            out.agent.as_ref().expect("learned strategies return their agent").save_checkpoint(checkpoint)?;
            report_cell(&out, &out_dir(&cli, "out"))?;
            say!("checkpoint saved to {}", checkpoint.display());
        }
        Command::Eval { cell: args, checkpoint } => {
            let cfg = scenario_config(&cli)?;
            let (mut settings, cell) = cell_setup(&cfg, args)?;
            if !cell.strategy.profile().association.is_learned() {
                return Err(Error::Config(format!("strategy `{}` does not use an agent", cell.strategy)));
            }
            let agent = Agent::load_checkpoint(checkpoint, cfg.num_users, cfg.num_stations)?;
            settings.frozen = true;
            settings.pretrain_epochs = 0;
            let out = run_cell(&cfg, &settings, &cell, Some(agent))?;
            report_cell(&out, &out_dir(&cli, "out"))?;
        }
        Command::Bandwidth { cluster } => return bandwidth(cluster),
        Command::BruteForce { backend, fl_epochs, run, cap } => {
            let cfg = scenario_config(&cli)?;
            let settings = run_settings(run.as_deref())?;
            let scenario = generate_scenario(&cfg)?;
            let norms = normalizers(&cfg, &scenario.channels)?;
            let cap = cap.unwrap_or(settings.enumeration_cap);
            let best = match backend {
                Backend::Surrogate => brute_force_best(&cfg, &scenario.channels, norms, cap, |a| {
                    Ok(surrogate_system_accuracy(a, &scenario.cluster_labels, settings.kappa))
                })?,
                Backend::FullFl => {
                    let datasets = build_datasets(&scenario, &settings)?;
                    let spec = classifier_for(&datasets, &settings)?;
                    let fl = FullFlBackend {
                        spec: &spec,
                        datasets: &datasets,
                        settings: settings.fl,
                        epochs: *fl_epochs,
                        transfer: true,
                        seed: cfg.rng_seed,
                    };
                    brute_force_best(&cfg, &scenario.channels, norms, cap, |a| fl.accuracy(a))?
                }
            };
            let alloc = bandwidth_opt::allocate(&cfg, &scenario.channels, &best.assoc, bandwidth_opt::AllocationRule::Optimal)?;
            say!("association (station per user): {:?}", best.assoc.stations());
            say!("action code: {}", best.code.0);
            for j in 0..cfg.num_stations {
                let members = best.assoc.members(j);
                let betas: Vec<String> = members.iter().map(|&i| format!("{:.6}", alloc.get(i, j))).collect();
                say!("station {j}: users {members:?}, beta [{}]", betas.join(", "));
            }
            say!("accuracy: {:.6}", best.accuracy);
            say!("energy: {:.6e} J (E_max {:.6e} J)", best.energy, norms.e_max);
            say!("objective: {:.6}", best.objective);
        }
        Command::Gradcheck { seeds } => {
            let cases = gradcheck_suite(*seeds)?;
            let mut worst = 0.0f64;
            for c in &cases {
                worst = worst.max(c.max_relative_error);
                say!("{:<32} seed {:>3} params {:>6}  max rel err {:.3e}", c.name, c.seed, c.params, c.max_relative_error);
            }
            say!("max relative error: {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:e})");
            return Ok(worst <= GRADCHECK_TOLERANCE);
        }
        Command::DataGen { run, idx_images, idx_labels } => {
            let cfg = scenario_config(&cli)?;
            let mut settings = run_settings(run.as_deref())?;
            if idx_images.is_some() || idx_labels.is_some() {
                settings.idx_images = idx_images.clone();
                settings.idx_labels = idx_labels.clone();
            }
            let scenario = generate_scenario(&cfg)?;
            let datasets = build_datasets(&scenario, &settings)?;
            let dir = out_dir(&cli, "data");
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
            let write = |name: &str, text: String| {
                let p = dir.join(name);
                std::fs::write(&p, text).map_err(|e| Error::io(format!("writing {}", p.display()), e))
            };
            write("scenario.toml", scenario.dump().to_toml_string())?;
            write("data.csv", harness::dataset_csv(&datasets)?)?;
            say!("scenario and {} users' data written to {}", datasets.len(), dir.display());
        }
    }
    Ok(true)
}

fn bandwidth(path: &Path) -> Result<bool> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let problem = ClusterFile::from_toml_str(&text)?.to_problem()?;
    let beta = optimal_allocation(&problem);
    let fmt = |v: &[f64]| v.iter().map(|b| format!("{b:.6}")).collect::<Vec<_>>().join(", ");
    say!("beta = [{}]", fmt(&beta));
    let kkt = kkt_residual(&problem, &beta)?;
    say!(
        "kkt: stationarity {:.3e}, feasibility {:.3e}, multiplier {:.6e}",
        kkt.stationarity, kkt.feasibility, kkt.multiplier
    );
    let oracle = numeric_oracle(&problem, OracleSettings::default())?;
    let gap = beta.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    say!("oracle = [{}], max |diff| {:.3e}", fmt(&oracle), gap);
    let prop = proportional_allocation(&problem);
    say!(
        "mean energy: optimal {:.6e}, proportional {:.6e}",
        problem.mean_energy(&beta),
        problem.mean_energy(&prop)
    );
    Ok(true)
}
