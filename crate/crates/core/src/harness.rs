//! Epoch loop, experiment cells and sweep outputs.
//!
//! One epoch: the association is chosen, every station splits its bandwidth,
//! the accuracy backend runs `T` rounds (or scores the association
//! directly), energy and the objective are measured, and a learning strategy
//! stores the transition and takes its learn steps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bandwidth_opt::{allocate, normalizers, AllocationRule};
use crate::comms::{normalized_objective, system_energy, BandwidthAllocation, EnergyReport, Normalizers};
use crate::drl_agent::{encode_action, encode_state, Agent, AgentConfig, MdpState, Transition};
use crate::fl_engine::{
    self, generate_label_swap_data, identify_compromised, ingest_idx, run_fl_rounds, AccuracyReport, ClusterModelState,
    DataConfig, DataSource, FlSettings, UserDataset,
};
use crate::learnkit::NetworkSpec;
use crate::rng::{self, Stream};
use crate::scenario::{generate_scenario, AssociationMatrix, Scenario, ScenarioConfig};
use crate::strategies::{
    accuracy_optimal_assoc, brute_force_best, greedy_assoc, surrogate_accuracy, surrogate_system_accuracy,
    AssociationRule, StrategyKind, DEFAULT_ENUMERATION_CAP, DEFAULT_KAPPA,
};
use crate::{Error, Result};

pub const EPOCH_SCHEMA: &str = "clusterfl-epoch-v1";
pub const USER_SCHEMA: &str = "clusterfl-user-v1";
pub const SUMMARY_SCHEMA: &str = "clusterfl-summary-v1";
pub const PLOT_SCHEMA: &str = "clusterfl-plot-v1";

/// Share of the run averaged into the summary.
pub const FINAL_WINDOW: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Closed-form cluster-purity score; no training.
    Surrogate,
    /// Real clustered FL on label-swapped data.
    FullFl,
}

/// Everything about a run except the swept axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    pub backend: BackendKind,
    pub kappa: f64,
    pub data: DataConfig,
    /// IDX image/label files; synthetic blobs when absent.
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    /// Hidden widths of the client classifier.
    pub model_hidden: Vec<usize>,
    pub fl: FlSettings,
    pub agent: AgentConfig,
    /// Surrogate-backend epochs the agent trains before the run.
    pub pretrain_epochs: usize,
    /// Act greedily and stop learning during the run itself.
    pub frozen: bool,
    pub enumeration_cap: u64,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            backend: BackendKind::Surrogate,
            kappa: DEFAULT_KAPPA,
            data: DataConfig::default(),
            idx_images: None,
            idx_labels: None,
            model_hidden: vec![32],
            fl: FlSettings::default(),
            agent: AgentConfig::default(),
            pretrain_epochs: 0,
            frozen: false,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
        }
    }
}

impl RunSettings {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("run settings: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml_str(&text)
    }
}

/// One point of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSpec {
    pub strategy: StrategyKind,
    pub mu: f64,
    pub num_users: usize,
    pub seed: u64,
    pub epochs: usize,
    pub episode_length: usize,
    pub rounds: usize,
}

impl CellSpec {
    pub fn file_stem(&self) -> String {
        format!("{}_mu{}_n{}_seed{}", self.strategy, self.mu, self.num_users, self.seed)
    }

    /// The cell's scenario: the base config with the swept fields applied.
    pub fn scenario_config(&self, base: &ScenarioConfig) -> ScenarioConfig {
        ScenarioConfig { num_users: self.num_users, mu: self.mu, rng_seed: self.seed, ..base.clone() }
    }
}

/// Accuracy source plus the fixed world it acts on.
pub struct World {
    pub scenario: Scenario,
    pub norms: Normalizers,
    pub kappa: f64,
    fl: Option<FlWorld>,
    previous: Option<AccuracyReport>,
    episode: u64,
}

struct FlWorld {
    datasets: Vec<UserDataset>,
    state: ClusterModelState,
    settings: FlSettings,
    train_rng: ChaCha8Rng,
}

/// Measured outcome of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochOutcome {
    pub alloc: BandwidthAllocation,
    pub report: AccuracyReport,
    pub energy: EnergyReport,
    pub objective: f64,
    pub compromised: Vec<bool>,
}

/// Label-swapped datasets for every user of `scenario`, drawn from its seed.
pub fn build_datasets(scenario: &Scenario, settings: &RunSettings) -> Result<Vec<UserDataset>> {
    let seed = scenario.config.rng_seed;
    let mut data_rng = rng::stream(seed, Stream::Data);
    let source = match (&settings.idx_images, &settings.idx_labels) {
        (Some(images), Some(labels)) => DataSource::Images(ingest_idx(images, labels).map_err(fl_engine::FlError::from)?),
        (None, None) => DataSource::synthetic(&settings.data, &mut data_rng),
        _ => return Err(Error::Config("idx_images and idx_labels must be given together".into())),
    };
    let pairs: Vec<[usize; 2]> = (0..scenario.config.num_users).map(|i| scenario.swap_pair_of(i)).collect();
    Ok(generate_label_swap_data(&settings.data, &source, &pairs, &mut data_rng)?)
}

pub fn classifier_for(datasets: &[UserDataset], settings: &RunSettings) -> Result<NetworkSpec> {
    let dim = datasets.first().map_or(0, |d| d.train.dim);
    Ok(fl_engine::classifier_spec(dim, &settings.model_hidden, settings.data.num_classes)?)
}

impl World {
    pub fn new(scenario: Scenario, settings: &RunSettings, backend: BackendKind) -> Result<Self> {
        let norms = normalizers(&scenario.config, &scenario.channels)?;
        let fl = match backend {
            BackendKind::Surrogate => None,
            BackendKind::FullFl => {
                let datasets = build_datasets(&scenario, settings)?;
                let spec = classifier_for(&datasets, settings)?;
                let seed = scenario.config.rng_seed;
                let mut init = rng::sub_stream(seed, Stream::ModelInit, 0);
                let n = scenario.config.num_users;
                let m = scenario.config.num_stations;
                Some(FlWorld {
                    state: ClusterModelState::new(spec, n, m, &mut init),
                    datasets,
                    settings: settings.fl,
                    train_rng: rng::stream(seed, Stream::Training),
                })
            }
        };
        Ok(Self { scenario, norms, kappa: settings.kappa, fl, previous: None, episode: 0 })
    }

    pub fn backend(&self) -> BackendKind {
        if self.fl.is_some() {
            BackendKind::FullFl
        } else {
            BackendKind::Surrogate
        }
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.scenario.config
    }

    /// Fresh models and no accuracy history; channels stay.
    pub fn reset(&mut self) {
        self.episode += 1;
        self.previous = None;
        let seed = self.scenario.config.rng_seed;
        if let Some(fl) = &mut self.fl {
            let mut init = rng::sub_stream(seed, Stream::ModelInit, self.episode);
            let (n, m) = (fl.state.user_models.len(), fl.state.station_models.len());
            fl.state = ClusterModelState::new(fl.state.spec.clone(), n, m, &mut init);
        }
    }

    pub fn step(&mut self, assoc: &AssociationMatrix, allocation: AllocationRule, transfer: bool) -> Result<EpochOutcome> {
        let cfg = &self.scenario.config;
        let channels = &self.scenario.channels;
        let alloc = allocate(cfg, channels, assoc, allocation)?;
        let energy = system_energy(assoc, &alloc, channels, cfg)?;
        let (report, compromised_sets) = match &mut self.fl {
            Some(fl) => {
                let report = run_fl_rounds(
                    &mut fl.state,
                    assoc,
                    &fl.datasets,
                    &fl.settings,
                    transfer,
                    self.previous.as_ref(),
                    &mut fl.train_rng,
                )?;
                (report, fl.state.compromised.clone())
            }
            None => {
                let sets = match (transfer, &self.previous) {
                    (true, Some(prev)) => identify_compromised(prev, assoc),
                    _ => vec![Vec::new(); assoc.num_stations()],
                };
                let per_user = surrogate_accuracy(assoc, &self.scenario.cluster_labels, self.kappa);
                (AccuracyReport::from_per_user(per_user, self.previous.as_ref()), sets)
            }
        };
        let mut compromised = vec![false; assoc.num_users()];
        for &i in compromised_sets.iter().flatten() {
            compromised[i] = true;
        }
        let objective = normalized_objective(report.system, energy.system_avg, cfg.mu, self.norms);
        self.previous = Some(report.clone());
        Ok(EpochOutcome { alloc, report, energy, objective, compromised })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub episode: usize,
    pub objective: f64,
    pub accuracy: f64,
    pub energy: f64,
    pub reward: f64,
    pub epsilon: Option<f64>,
    pub td_loss: Option<f64>,
    pub action_code: u64,
    pub compromised: usize,
    /// Members per station, `;`-separated.
    pub members: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UserRow {
    pub epoch: usize,
    pub user: usize,
    pub station: usize,
    pub beta: f64,
    pub accuracy: f64,
    pub energy: f64,
    pub improved: bool,
    pub compromised: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub strategy: String,
    pub mu: f64,
    pub num_users: usize,
    pub seed: u64,
    pub epochs: usize,
    pub window: usize,
    pub objective: f64,
    pub accuracy: f64,
    pub energy: f64,
    pub reward: f64,
    pub g_max: f64,
    pub e_max: f64,
}

#[derive(Debug, Clone)]
pub struct CellOutput {
    pub cell: CellSpec,
    pub rows: Vec<EpochRow>,
    pub user_rows: Vec<UserRow>,
    pub summary: SummaryRow,
    pub agent: Option<Agent>,
}

/// Rows averaged into the summary: the last 10% of the run, at least one.
pub fn window_len(epochs: usize) -> usize {
    ((epochs as f64 * FINAL_WINDOW).ceil() as usize).clamp(1, epochs.max(1))
}

pub fn summarize(cell: &CellSpec, rows: &[EpochRow], norms: Normalizers) -> SummaryRow {
    let window = window_len(rows.len()).min(rows.len());
    let tail = &rows[rows.len() - window..];
    let mean = |f: fn(&EpochRow) -> f64| tail.iter().map(f).sum::<f64>() / window.max(1) as f64;
    SummaryRow {
        strategy: cell.strategy.to_string(),
        mu: cell.mu,
        num_users: cell.num_users,
        seed: cell.seed,
        epochs: rows.len(),
        window,
        objective: mean(|r| r.objective),
        accuracy: mean(|r| r.accuracy),
        energy: mean(|r| r.energy),
        reward: mean(|r| r.reward),
        g_max: norms.g_max,
        e_max: norms.e_max,
    }
}

/// How a learning agent behaves during a loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentMode {
    Train,
    Frozen,
}

/// Runs `epochs` epochs of a learned strategy, resetting the world every
/// `episode_length` epochs.
#[allow(clippy::too_many_arguments)]
pub fn run_agent_loop(
    world: &mut World,
    agent: &mut Agent,
    allocation: AllocationRule,
    transfer: bool,
    epochs: usize,
    episode_length: usize,
    mode: AgentMode,
    mut on_epoch: impl FnMut(usize, &EpochOutcome, &AssociationMatrix, EpochRow),
) -> Result<()> {
    let (n, m) = (agent.num_users(), agent.num_stations());
    let horizon = episode_length.max(1);
    let mut state = MdpState::initial(n, m);
    for k in 0..epochs {
        let (code, epsilon) = match mode {
            AgentMode::Train => {
                let eps = agent.epsilon();
                (agent.act(&state)?, eps)
            }
            AgentMode::Frozen => (agent.greedy(&state)?, 0.0),
        };
        let assoc = agent.decode(code)?;
        let out = world.step(&assoc, allocation, transfer)?;
        let next = encode_state(&assoc, &out.alloc, &out.report.improved)?;
        let terminal = (k + 1) % horizon == 0;
        let td_loss = match mode {
            AgentMode::Train => {
                agent.remember(Transition {
                    state: state.clone(),
                    action: code,
                    reward: out.objective,
                    next_state: next.clone(),
                    terminal,
                });
                agent.train()?
            }
            AgentMode::Frozen => None,
        };
        let row = epoch_row(k, k / horizon, &out, &assoc, Some(epsilon), td_loss);
        on_epoch(k, &out, &assoc, row);
        if terminal {
            world.reset();
            state = MdpState::initial(n, m);
        } else {
            state = next;
        }
    }
    Ok(())
}

fn epoch_row(
    epoch: usize,
    episode: usize,
    out: &EpochOutcome,
    assoc: &AssociationMatrix,
    epsilon: Option<f64>,
    td_loss: Option<f64>,
) -> EpochRow {
    let members = assoc.member_counts().iter().map(usize::to_string).collect::<Vec<_>>().join(";");
    EpochRow {
        epoch,
        episode,
        objective: out.objective,
        accuracy: out.report.system,
        energy: out.energy.system_avg,
        reward: out.objective,
        epsilon,
        td_loss,
        action_code: encode_action(assoc).0,
        compromised: out.compromised.iter().filter(|&&c| c).count(),
        members,
    }
}

fn user_rows(epoch: usize, out: &EpochOutcome, assoc: &AssociationMatrix) -> Vec<UserRow> {
    (0..assoc.num_users()).map(|i| {
        let j = assoc.station_of(i);
        UserRow {
            epoch,
            user: i,
            station: j,
            beta: out.alloc.get(i, j),
            accuracy: out.report.per_user[i],
            energy: out.energy.per_user[i],
            improved: out.report.improved[i],
            compromised: out.compromised[i],
        }
    })
    .collect()
}

/// Association used every epoch by a non-learning strategy.
pub fn fixed_association(rule: AssociationRule, scenario: &Scenario, settings: &RunSettings) -> Result<AssociationMatrix> {
    let ch = &scenario.channels;
    match rule {
        AssociationRule::Greedy => Ok(greedy_assoc(ch)),
        AssociationRule::AccuracyOptimal => accuracy_optimal_assoc(&scenario.cluster_labels, ch),
        AssociationRule::BruteForce => {
            let norms = normalizers(&scenario.config, ch)?;
            let labels = &scenario.cluster_labels;
            let best = brute_force_best(&scenario.config, ch, norms, settings.enumeration_cap, |a| {
                Ok(surrogate_system_accuracy(a, labels, settings.kappa))
            })?;
            Ok(best.assoc)
        }
        AssociationRule::D3qn | AssociationRule::Dqn => {
            Err(Error::Config("learned associations have no fixed choice".into()))
        }
    }
}

/// Agent configured for a learned strategy.
pub fn new_agent(rule: AssociationRule, cfg: &ScenarioConfig, settings: &RunSettings, training_epochs: usize) -> Result<Agent> {
    let mut agent_cfg = settings.agent.clone().for_training(training_epochs as u64);
    if rule == AssociationRule::Dqn {
        agent_cfg = agent_cfg.plain();
    }
    Ok(Agent::new(cfg.num_users, cfg.num_stations, agent_cfg, cfg.rng_seed)?)
}

/// Runs one cell. A learned strategy starts from `agent` when given, else
/// from a fresh agent (pretrained on the surrogate backend first when
/// `pretrain_epochs > 0`).
pub fn run_cell(base: &ScenarioConfig, settings: &RunSettings, cell: &CellSpec, agent: Option<Agent>) -> Result<CellOutput> {
    let cfg = cell.scenario_config(base);
    let scenario = generate_scenario(&cfg)?;
    let mut run_settings = settings.clone();
    run_settings.fl.rounds = cell.rounds;
    let profile = cell.strategy.profile();
    let mut world = World::new(scenario.clone(), &run_settings, run_settings.backend)?;
    let norms = world.norms;
    let mut rows = Vec::with_capacity(cell.epochs);
    let mut users = Vec::with_capacity(cell.epochs * cfg.num_users);

    let agent = if profile.association.is_learned() {
        let mut agent = match agent {
            Some(a) => a,
            None => {
                let training = if settings.frozen { settings.pretrain_epochs } else { settings.pretrain_epochs + cell.epochs };
                new_agent(profile.association, &cfg, settings, training)?
            }
        };
        if agent.num_users() != cfg.num_users || agent.num_stations() != cfg.num_stations {
            return Err(Error::Config("agent was built for a different number of users or stations".into()));
        }
        if settings.pretrain_epochs > 0 {
            let mut pre = World::new(scenario, &run_settings, BackendKind::Surrogate)?;
            run_agent_loop(
                &mut pre,
                &mut agent,
                profile.allocation,
                profile.transfer,
                settings.pretrain_epochs,
                cell.episode_length,
                AgentMode::Train,
                |_, _, _, _| {},
            )?;
        }
        let mode = if settings.frozen { AgentMode::Frozen } else { AgentMode::Train };
        run_agent_loop(
            &mut world,
            &mut agent,
            profile.allocation,
            profile.transfer,
            cell.epochs,
            cell.episode_length,
            mode,
            |k, out, assoc, row| {
                users.extend(user_rows(k, out, assoc));
                rows.push(row);
            },
        )?;
        Some(agent)
    } else {
        let assoc = fixed_association(profile.association, &world.scenario, &run_settings)?;
        let horizon = cell.episode_length.max(1);
        for k in 0..cell.epochs {
            let out = world.step(&assoc, profile.allocation, profile.transfer)?;
            users.extend(user_rows(k, &out, &assoc));
            rows.push(epoch_row(k, k / horizon, &out, &assoc, None, None));
            if (k + 1) % horizon == 0 {
                world.reset();
            }
        }
        None
    };
    let summary = summarize(cell, &rows, norms);
    Ok(CellOutput { cell: cell.clone(), rows, user_rows: users, summary, agent })
}

/// A sweep over strategies, weights, user counts and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    /// Scenario file, relative to the plan file.
    #[serde(default)]
    pub scenario: Option<PathBuf>,
    pub strategies: Vec<StrategyKind>,
    pub mu: Vec<f64>,
    pub num_users: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Epochs per cell.
    pub epochs: usize,
    #[serde(default = "default_episode_length")]
    pub episode_length: usize,
    /// FL rounds per epoch.
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub run: RunSettings,
}

fn default_episode_length() -> usize {
    50
}

fn default_rounds() -> usize {
    5
}

impl ExperimentPlan {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let plan: Self = toml::from_str(text).map_err(|e| Error::Config(format!("plan: {e}")))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut plan = Self::from_toml_str(&text)?;
        if let (Some(rel), Some(dir)) = (&plan.scenario, path.parent()) {
            plan.scenario = Some(dir.join(rel));
        }
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("plan: {m}")));
        if self.strategies.is_empty() || self.mu.is_empty() || self.num_users.is_empty() || self.seeds.is_empty() {
            return bad("every sweep list must be non-empty");
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return bad("seeds must be distinct");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.mu.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return bad("mu values must lie in [0, 1]");
        }
        if self.num_users.contains(&0) {
            return bad("user counts must be positive");
        }
        Ok(())
    }

    /// Cells in output order: strategy, mu, N, seed.
    pub fn cells(&self) -> Vec<CellSpec> {
        let mut cells = Vec::new();
        for &strategy in &self.strategies {
            for &mu in &self.mu {
                for &num_users in &self.num_users {
                    for &seed in &self.seeds {
                        cells.push(CellSpec {
                            strategy,
                            mu,
                            num_users,
                            seed,
                            epochs: self.epochs,
                            episode_length: self.episode_length,
                            rounds: self.rounds,
                        });
                    }
                }
            }
        }
        cells
    }

    pub fn base_scenario(&self) -> Result<ScenarioConfig> {
        match &self.scenario {
            Some(path) => Ok(ScenarioConfig::load(path)?),
            None => Ok(ScenarioConfig::default()),
        }
    }
}

/// Runs every cell on up to `threads` workers; output order follows
/// [`ExperimentPlan::cells`] regardless of scheduling.
pub fn run_cells(base: &ScenarioConfig, settings: &RunSettings, cells: &[CellSpec], threads: usize) -> Result<Vec<CellOutput>> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<CellOutput>>>> = cells.iter().map(|_| Mutex::new(None)).collect();
    let workers = threads.clamp(1, cells.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                if k >= cells.len() {
                    break;
                }
                let out = run_cell(base, settings, &cells[k], None);
                *slots[k].lock().expect("slot lock") = Some(out);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().expect("slot lock").expect("every cell ran")).collect()
}

pub fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |p| p.get())
}

/// First 8 bytes of the sha256 of the schema name and column list, hex.
pub fn schema_hash(schema: &str, columns: &[&str]) -> String {
    let digest = Sha256::digest(format!("{schema}:{}", columns.join(",")).as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub const EPOCH_COLUMNS: [&str; 11] = [
    "epoch",
    "episode",
    "objective",
    "accuracy",
    "energy",
    "reward",
    "epsilon",
    "td_loss",
    "action_code",
    "compromised",
    "members",
];
pub const USER_COLUMNS: [&str; 8] = ["epoch", "user", "station", "beta", "accuracy", "energy", "improved", "compromised"];
pub const SUMMARY_COLUMNS: [&str; 12] = [
    "strategy", "mu", "num_users", "seed", "epochs", "window", "objective", "accuracy", "energy", "reward", "g_max", "e_max",
];
pub const PLOT_COLUMNS: [&str; 8] =
    ["strategy", "mu", "num_users", "seeds", "accuracy_norm", "energy_norm", "objective", "objective_std"];

/// CSV text: a `# schema <name> <hash>` comment line, the header, the rows.
pub fn csv_text<T: Serialize>(schema: &str, columns: &[&str], rows: &[T]) -> Result<String> {
    let mut out = format!("# schema {schema} {}\n", schema_hash(schema, columns)).into_bytes();
    {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(&mut out);
        w.write_record(columns).map_err(csv_error)?;
        for r in rows {
            w.serialize(r).map_err(csv_error)?;
        }
        w.flush().map_err(|e| Error::io("csv", e))?;
    }
    Ok(String::from_utf8(out).expect("csv output is utf-8"))
}

fn csv_error(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}

/// Every user's samples as CSV: `user,split,label,x0..x{d-1}`.
pub fn dataset_csv(datasets: &[UserDataset]) -> Result<String> {
    let dim = datasets.first().map_or(0, |d| d.train.dim);
    let mut out = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let mut header = vec!["user".to_string(), "split".into(), "label".into()];
        header.extend((0..dim).map(|k| format!("x{k}")));
        w.write_record(&header).map_err(csv_error)?;
        for (i, d) in datasets.iter().enumerate() {
            for (split, samples) in [("train", &d.train), ("test", &d.test)] {
                for k in 0..samples.len() {
                    let mut rec = vec![i.to_string(), split.to_string(), samples.labels[k].to_string()];
                    rec.extend(samples.feature(k).iter().map(f64::to_string));
                    w.write_record(&rec).map_err(csv_error)?;
                }
            }
        }
        w.flush().map_err(|e| Error::io("csv", e))?;
    }
    Ok(String::from_utf8(out).expect("csv output is utf-8"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlotRow {
    pub strategy: String,
    pub mu: f64,
    pub num_users: usize,
    pub seeds: usize,
    pub accuracy_norm: f64,
    pub energy_norm: f64,
    pub objective: f64,
    pub objective_std: f64,
}

/// Seed-averaged normalized accuracy, energy and objective per
/// (strategy, mu, N), ordered like the summary.
pub fn plot_rows(summaries: &[SummaryRow]) -> Vec<PlotRow> {
    let mut groups: BTreeMap<(usize, u64, usize), (String, f64, Vec<&SummaryRow>)> = BTreeMap::new();
    let mut order = Vec::new();
    for s in summaries {
        let key = (order.iter().position(|k: &String| *k == s.strategy).unwrap_or(order.len()), s.mu.to_bits(), s.num_users);
        if !order.contains(&s.strategy) {
            order.push(s.strategy.clone());
        }
        groups.entry(key).or_insert_with(|| (s.strategy.clone(), s.mu, Vec::new())).2.push(s);
    }
    let mut rows: Vec<PlotRow> = groups
        .into_values()
        .map(|(strategy, mu, members)| {
            let k = members.len() as f64;
            let mean = |f: &dyn Fn(&SummaryRow) -> f64| members.iter().map(|s| f(s)).sum::<f64>() / k;
            let objective = mean(&|s| s.objective);
            let var = mean(&|s| (s.objective - objective).powi(2));
            PlotRow {
                strategy,
                mu,
                num_users: members[0].num_users,
                seeds: members.len(),
                accuracy_norm: mean(&|s| s.accuracy / s.g_max),
                energy_norm: mean(&|s| s.energy / s.e_max),
                objective,
                objective_std: var.sqrt(),
            }
        })
        .collect();
    // Group keys sort mu by bit pattern, which matches numeric order for
    // the non-negative weights a plan allows.
    rows.sort_by(|a, b| {
        let sa = order.iter().position(|s| *s == a.strategy);
        let sb = order.iter().position(|s| *s == b.strategy);
        sa.cmp(&sb).then(a.mu.total_cmp(&b.mu)).then(a.num_users.cmp(&b.num_users))
    });
    rows
}

/// Files a sweep produces, relative to the output directory.
pub fn cell_paths(cell: &CellSpec) -> (PathBuf, PathBuf) {
    let stem = cell.file_stem();
    (PathBuf::from("cells").join(format!("{stem}.csv")), PathBuf::from("cells").join(format!("{stem}_users.csv")))
}

/// Writes per-cell CSVs, `summary.csv` and `plot_data.csv` under `out_dir`.
pub fn write_outputs(out_dir: &Path, outputs: &[CellOutput]) -> Result<()> {
    let io = |p: &Path| {
        let p = p.display().to_string();
        move |e| Error::io(format!("writing {p}"), e)
    };
    std::fs::create_dir_all(out_dir.join("cells")).map_err(io(out_dir))?;
    for o in outputs {
        let (epochs, users) = cell_paths(&o.cell);
        let path = out_dir.join(epochs);
        std::fs::write(&path, csv_text(EPOCH_SCHEMA, &EPOCH_COLUMNS, &o.rows)?).map_err(io(&path))?;
        let path = out_dir.join(users);
        std::fs::write(&path, csv_text(USER_SCHEMA, &USER_COLUMNS, &o.user_rows)?).map_err(io(&path))?;
    }
    let summaries: Vec<SummaryRow> = outputs.iter().map(|o| o.summary.clone()).collect();
    let path = out_dir.join("summary.csv");
    std::fs::write(&path, csv_text(SUMMARY_SCHEMA, &SUMMARY_COLUMNS, &summaries)?).map_err(io(&path))?;
    let path = out_dir.join("plot_data.csv");
    std::fs::write(&path, csv_text(PLOT_SCHEMA, &PLOT_COLUMNS, &plot_rows(&summaries))?).map_err(io(&path))?;
    Ok(())
}

/// Runs a whole plan and writes its outputs.
pub fn run_experiment(plan: &ExperimentPlan, out_dir: &Path, threads: usize) -> Result<Vec<CellOutput>> {
    plan.validate()?;
    let base = plan.base_scenario()?;
    let outputs = run_cells(&base, &plan.run, &plan.cells(), threads)?;
    write_outputs(out_dir, &outputs)?;
    Ok(outputs)
}

/// Largest tolerated relative gradient error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Small enough that a probe rarely crosses a ReLU kink.
const GRADCHECK_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckCase {
    pub name: String,
    pub seed: u64,
    pub params: usize,
    pub max_relative_error: f64,
}

/// Analytic vs central-difference gradients for the client classifiers and
/// both Q-network heads, one case per network and seed.
pub fn gradcheck_suite(seeds: u64) -> Result<Vec<GradcheckCase>> {
    use crate::drl_agent::{td_loss, td_loss_gradient, QNetwork};
    use crate::learnkit::{backward, central_difference, loss, max_relative_error, Batch, ParameterVector};
    use rand::Rng;

    let classifiers = [
        ("classifier 16-10", vec![]),
        ("classifier 16-32-10", vec![32]),
        ("classifier 16-24-16-10", vec![24, 16]),
    ];
    let mut cases = Vec::new();
    for seed in 0..seeds {
        for (name, hidden) in &classifiers {
            let spec = fl_engine::classifier_spec(16, hidden, 10)?;
            let mut r = rng::sub_stream(seed, Stream::Oracle, 1);
            let p = ParameterVector::glorot(&spec, &mut r);
            let x = Batch::new(4, 16, (0..64).map(|_| r.random_range(-2.0..2.0)).collect());
            let y: Vec<usize> = (0..4).map(|_| r.random_range(0..10)).collect();
            let (_, g) = backward(&spec, &p, &x, &y)?;
            let num = central_difference(&p, GRADCHECK_STEP, |q| loss(&spec, q, &x, &y).expect("shapes checked"));
            cases.push(GradcheckCase {
                name: name.to_string(),
                seed,
                params: p.len(),
                max_relative_error: max_relative_error(g.values(), &num),
            });
        }
        for dueling in [true, false] {
            // Two users on two stations: the default trunk with a small head.
            let qnet = QNetwork::new(10, 4, &AgentConfig::default().hidden, dueling)?;
            let mut r = rng::sub_stream(seed, Stream::Oracle, 2);
            let p = ParameterVector::glorot(&qnet.spec, &mut r);
            let states = Batch::new(3, 10, (0..30).map(|_| r.random_range(0.0..1.0)).collect());
            let actions: Vec<usize> = (0..3).map(|_| r.random_range(0..4)).collect();
            let targets: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
            let (_, g) = td_loss_gradient(&qnet, &p, &states, &actions, &targets)?;
            let num = central_difference(&p, GRADCHECK_STEP, |q| {
                td_loss(&qnet, q, &states, &actions, &targets).expect("shapes checked")
            });
            cases.push(GradcheckCase {
                name: if dueling { "q-network dueling 10-128-128-5" } else { "q-network plain 10-128-128-4" }.into(),
                seed,
                params: p.len(),
                max_relative_error: max_relative_error(g.values(), &num),
            });
        }
    }
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(strategy: StrategyKind, n: usize, epochs: usize) -> CellSpec {
        CellSpec { strategy, mu: 0.5, num_users: n, seed: 3, epochs, episode_length: 10, rounds: 1 }
    }

    #[test]
    fn window_is_last_tenth() {
        assert_eq!(window_len(2000), 200);
        assert_eq!(window_len(15), 2);
        assert_eq!(window_len(1), 1);
    }

    #[test]
    fn greedy_rows_have_no_learning_columns() {
        let out = run_cell(&ScenarioConfig::default(), &RunSettings::default(), &cell(StrategyKind::Greedy, 4, 5), None)
            .unwrap();
        assert_eq!(out.rows.len(), 5);
        assert!(out.rows.iter().all(|r| r.td_loss.is_none() && r.epsilon.is_none()));
        assert!(out.agent.is_none());
        let text = csv_text(EPOCH_SCHEMA, &EPOCH_COLUMNS, &out.rows).unwrap();
        let line = text.lines().nth(2).unwrap();
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!((fields[6], fields[7]), ("", ""));
    }

    #[test]
    fn rows_satisfy_the_objective_identity() {
        let out = run_cell(&ScenarioConfig::default(), &RunSettings::default(), &cell(StrategyKind::Proposed, 4, 40), None)
            .unwrap();
        let norms = Normalizers { g_max: out.summary.g_max, e_max: out.summary.e_max };
        for r in &out.rows {
            let expect = normalized_objective(r.accuracy, r.energy, 0.5, norms);
            assert!((r.objective - expect).abs() <= 1e-12);
            assert_eq!(r.reward, r.objective);
        }
        assert!(out.rows.iter().skip(32).all(|r| r.td_loss.is_some()));
        let tail = &out.rows[36..];
        let mean = tail.iter().map(|r| r.objective).sum::<f64>() / 4.0;
        assert!((out.summary.objective - mean).abs() < 1e-12);
    }

    #[test]
    fn episodes_reset_the_history() {
        let out = run_cell(&ScenarioConfig::default(), &RunSettings::default(), &cell(StrategyKind::Greedy, 3, 12), None)
            .unwrap();
        // Under a fixed association the surrogate never improves.
        assert!(out.user_rows.iter().all(|u| !u.improved));
        assert_eq!(out.rows[10].episode, 1);
    }

    #[test]
    fn plan_parsing_and_validation() {
        let text = r#"
            strategies = ["proposed", "greedy"]
            mu = [0.3]
            num_users = [3, 5, 7]
            seeds = [1, 2]
            epochs = 20
            [run]
            backend = "surrogate"
        "#;
        let plan = ExperimentPlan::from_toml_str(text).unwrap();
        assert_eq!(plan.cells().len(), 12);
        assert_eq!(plan.episode_length, 50);
        let dup = text.replace("seeds = [1, 2]", "seeds = [1, 1]");
        assert!(ExperimentPlan::from_toml_str(&dup).is_err());
        let empty = text.replace("mu = [0.3]", "mu = []");
        assert!(ExperimentPlan::from_toml_str(&empty).is_err());
        assert!(ExperimentPlan::from_toml_str(&text.replace("epochs = 20", "epochs = 20\nbogus = 1")).is_err());
    }

    #[test]
    fn schema_hash_tracks_columns() {
        assert_ne!(schema_hash(EPOCH_SCHEMA, &EPOCH_COLUMNS), schema_hash(EPOCH_SCHEMA, &EPOCH_COLUMNS[1..]));
        assert_eq!(schema_hash("x", &["a"]).len(), 16);
    }

    #[test]
    fn plot_rows_average_seeds() {
        let mk = |strategy: &str, seed, objective| SummaryRow {
            strategy: strategy.into(),
            mu: 0.5,
            num_users: 3,
            seed,
            epochs: 10,
            window: 1,
            objective,
            accuracy: 0.8,
            energy: 1.0,
            reward: objective,
            g_max: 1.0,
            e_max: 4.0,
        };
        let rows = plot_rows(&[mk("b", 1, 0.2), mk("b", 2, 0.4), mk("a", 1, 0.1)]);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].strategy, "b");
        assert!((rows[0].objective - 0.3).abs() < 1e-15);
        assert!((rows[0].objective_std - 0.1).abs() < 1e-12);
        assert_eq!(rows[0].energy_norm, 0.25);
    }
}
