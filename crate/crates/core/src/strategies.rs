//! Benchmark association strategies and the exhaustive optimum.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bandwidth_opt::{system_energy_under, AllocationRule};
use crate::comms::{normalized_objective, Normalizers};
use crate::drl_agent::{decode_action, num_actions, ActionCode};
use crate::fl_engine::{run_fl_rounds, ClusterModelState, FlSettings, UserDataset};
use crate::learnkit::NetworkSpec;
use crate::rng::{self, Stream};
use crate::scenario::{AssociationMatrix, ChannelMatrix, ScenarioConfig};
use crate::{Error, Result};

pub const DEFAULT_KAPPA: f64 = 0.5;
pub const DEFAULT_ENUMERATION_CAP: u64 = 65_536;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    Proposed,
    AccuracyOptimal,
    Greedy,
    Proportional,
    NonTransfer,
    PlainDqn,
    BruteForce,
}

/// How users are assigned to stations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssociationRule {
    /// Double dueling agent.
    D3qn,
    /// Single-head, max-target agent.
    Dqn,
    AccuracyOptimal,
    Greedy,
    BruteForce,
}

impl AssociationRule {
    pub fn is_learned(self) -> bool {
        matches!(self, AssociationRule::D3qn | AssociationRule::Dqn)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StrategyProfile {
    pub association: AssociationRule,
    pub allocation: AllocationRule,
    pub transfer: bool,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 7] = [
        StrategyKind::Proposed,
        StrategyKind::AccuracyOptimal,
        StrategyKind::Greedy,
        StrategyKind::Proportional,
        StrategyKind::NonTransfer,
        StrategyKind::PlainDqn,
        StrategyKind::BruteForce,
    ];

    pub fn profile(self) -> StrategyProfile {
        use AllocationRule::{Optimal, Proportional};
        use AssociationRule as A;
        let (association, allocation, transfer) = match self {
            StrategyKind::Proposed => (A::D3qn, Optimal, true),
            StrategyKind::NonTransfer => (A::D3qn, Optimal, false),
            StrategyKind::PlainDqn => (A::Dqn, Optimal, true),
            StrategyKind::Proportional => (A::D3qn, Proportional, true),
            StrategyKind::AccuracyOptimal => (A::AccuracyOptimal, Proportional, false),
            StrategyKind::Greedy => (A::Greedy, Proportional, true),
            StrategyKind::BruteForce => (A::BruteForce, Optimal, true),
        };
        StrategyProfile { association, allocation, transfer }
    }

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Proposed => "proposed",
            StrategyKind::AccuracyOptimal => "accuracy-optimal",
            StrategyKind::Greedy => "greedy",
            StrategyKind::Proportional => "proportional",
            StrategyKind::NonTransfer => "non-transfer",
            StrategyKind::PlainDqn => "plain-dqn",
            StrategyKind::BruteForce => "brute-force",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

/// Every user on its best-gain station; ties go to the lowest index.
pub fn greedy_assoc(channels: &ChannelMatrix) -> AssociationMatrix {
    let stations = (0..channels.num_users())
        .map(|i| {
            let row = channels.gain.row(i);
            (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        })
        .collect();
    AssociationMatrix::new(stations, channels.num_stations()).expect("argmax is in range")
}

/// Groups users by ground-truth cluster and sends each group to the station
/// with the smallest mean member distance.
///
/// Groups are placed largest first (lower label on equal size), each onto the
/// nearest station no earlier group took; once every station is taken the
/// remaining groups pick among all stations.
pub fn accuracy_optimal_assoc(labels: &[usize], channels: &ChannelMatrix) -> Result<AssociationMatrix> {
    let n = channels.num_users();
    let m = channels.num_stations();
    if labels.len() != n {
        return Err(Error::Config(format!("{} labels for {n} users", labels.len())));
    }
    let k = labels.iter().max().map_or(0, |&l| l + 1);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        groups[l].push(i);
    }
    let mut order: Vec<usize> = (0..k).filter(|&g| !groups[g].is_empty()).collect();
    order.sort_by(|&a, &b| groups[b].len().cmp(&groups[a].len()).then(a.cmp(&b)));

    let mut used = vec![false; m];
    let mut stations = vec![0; n];
    for g in order {
        let members = &groups[g];
        let mean_dist = |j: usize| members.iter().map(|&i| channels.distance(i, j)).sum::<f64>() / members.len() as f64;
        let free: Vec<usize> = (0..m).filter(|&j| !used[j]).collect();
        let candidates = if free.is_empty() { (0..m).collect() } else { free };
        let best = candidates
            .iter()
            .copied()
            .fold(candidates[0], |best, j| if mean_dist(j) < mean_dist(best) { j } else { best });
        used[best] = true;
        for &i in members {
            stations[i] = best;
        }
    }
    Ok(AssociationMatrix::new(stations, m)?)
}

/// Deterministic stand-in for clustered-FL accuracy:
/// `g_i = 1 - kappa * (share of i's cluster-mates with a different label)`.
/// A user alone on its station scores 1.
pub fn surrogate_accuracy(assoc: &AssociationMatrix, labels: &[usize], kappa: f64) -> Vec<f64> {
    (0..assoc.num_users())
        .map(|i| {
            let mates: Vec<usize> = assoc.members(assoc.station_of(i)).into_iter().filter(|&u| u != i).collect();
            if mates.is_empty() {
                return 1.0;
            }
            let foreign = mates.iter().filter(|&&u| labels[u] != labels[i]).count();
            1.0 - kappa * foreign as f64 / mates.len() as f64
        })
        .collect()
}

pub fn surrogate_system_accuracy(assoc: &AssociationMatrix, labels: &[usize], kappa: f64) -> f64 {
    let g = surrogate_accuracy(assoc, labels, kappa);
    g.iter().sum::<f64>() / g.len() as f64
}

/// Trains a fresh clustered model under a fixed association and reports its
/// system accuracy. Every call starts from the same seeded initialization.
#[derive(Debug, Clone)]
pub struct FullFlBackend<'a> {
    pub spec: &'a NetworkSpec,
    pub datasets: &'a [UserDataset],
    pub settings: FlSettings,
    pub epochs: usize,
    pub transfer: bool,
    pub seed: u64,
}

impl FullFlBackend<'_> {
    pub fn accuracy(&self, assoc: &AssociationMatrix) -> Result<f64> {
        let mut init = rng::stream(self.seed, Stream::ModelInit);
        let mut train = rng::stream(self.seed, Stream::Training);
        let mut state = ClusterModelState::new(self.spec.clone(), assoc.num_users(), assoc.num_stations(), &mut init);
        let mut report = None;
        for _ in 0..self.epochs.max(1) {
            let r = run_fl_rounds(&mut state, assoc, self.datasets, &self.settings, self.transfer, report.as_ref(), &mut train)?;
            report = Some(r);
        }
        Ok(report.expect("at least one epoch").system)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredAssociation {
    pub code: ActionCode,
    pub assoc: AssociationMatrix,
    pub accuracy: f64,
    pub energy: f64,
    pub objective: f64,
}

/// Objective of one association under optimal allocation.
pub fn score_association(
    cfg: &ScenarioConfig,
    channels: &ChannelMatrix,
    norms: Normalizers,
    assoc: &AssociationMatrix,
    accuracy: f64,
) -> Result<(f64, f64)> {
    let energy = system_energy_under(cfg, channels, assoc, AllocationRule::Optimal)?;
    Ok((energy, normalized_objective(accuracy, energy, cfg.mu, norms)))
}

/// Enumerates every association and returns the objective maximizer, lowest
/// code on ties. Codes are scored on all available cores.
pub fn brute_force_best<F>(
    cfg: &ScenarioConfig,
    channels: &ChannelMatrix,
    norms: Normalizers,
    cap: u64,
    accuracy: F,
) -> Result<ScoredAssociation>
where
    F: Fn(&AssociationMatrix) -> Result<f64> + Sync,
{
    let threads = std::thread::available_parallelism().map_or(1, |p| p.get());
    brute_force_best_on(cfg, channels, norms, cap, threads, accuracy)
}

/// [`brute_force_best`] on at most `threads` scoring threads; one thread
/// scores inline.
pub fn brute_force_best_on<F>(
    cfg: &ScenarioConfig,
    channels: &ChannelMatrix,
    norms: Normalizers,
    cap: u64,
    threads: usize,
    accuracy: F,
) -> Result<ScoredAssociation>
where
    F: Fn(&AssociationMatrix) -> Result<f64> + Sync,
{
    let n = channels.num_users();
    let m = channels.num_stations();
    let total = num_actions(n, m).map_err(|_| Error::EnumerationCap {
        actions: (m as u128).saturating_pow(n as u32),
        cap: cap as u128,
    })?;
    if total > cap {
        return Err(Error::EnumerationCap { actions: total as u128, cap: cap as u128 });
    }
    let score = |code: u64| -> Result<ScoredAssociation> {
        let assoc = decode_action(ActionCode(code), n, m)?;
        let g = accuracy(&assoc)?;
        let (energy, objective) = score_association(cfg, channels, norms, &assoc, g)?;
        Ok(ScoredAssociation { code: ActionCode(code), assoc, accuracy: g, energy, objective })
    };
    let better = |a: ScoredAssociation, b: ScoredAssociation| if b.objective > a.objective { b } else { a };

    let workers = threads.min(total as usize).max(1);
    if workers == 1 {
        let mut best = score(0)?;
        for code in 1..total {
            best = better(best, score(code)?);
        }
        return Ok(best);
    }
    let chunk = total.div_ceil(workers as u64);
    let partials: Vec<Result<Option<ScoredAssociation>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers as u64)
            .map(|w| {
                let score = &score;
                s.spawn(move || {
                    let mut best: Option<ScoredAssociation> = None;
                    for code in w * chunk..((w + 1) * chunk).min(total) {
                        let cand = score(code)?;
                        best = Some(match best {
                            Some(b) => better(b, cand),
                            None => cand,
                        });
                    }
                    Ok(best)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("scoring thread panicked")).collect()
    });
    // Chunks are in code order, so a strict comparison keeps the lowest code.
    let mut best: Option<ScoredAssociation> = None;
    for part in partials {
        if let Some(cand) = part? {
            best = Some(match best {
                Some(b) => better(b, cand),
                None => cand,
            });
        }
    }
    Ok(best.expect("at least one association"))
}
