//! Per-station bandwidth splitting.
//!
//! A station with members `C` minimizes the mean upload energy
//! `sum_i w_i / beta_i` over the simplex, where
//! `w_i = p_i Z_i / (|C| B log2(1 + snr_i))`. Stationarity makes
//! `w_i / beta_i^2` equal across members, which gives
//! `beta_i = sqrt(w_i) / sum_k sqrt(w_k)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comms::{BandwidthAllocation, Normalizers};
use crate::scenario::{AssociationMatrix, ChannelMatrix, ScenarioConfig};

#[derive(Debug, Error, PartialEq)]
pub enum AllocError {
    #[error("empty cluster")]
    EmptyCluster,
    #[error("user {user} has zero SNR and cannot be served at finite energy")]
    Unservable { user: usize },
    #[error("member {index}: invalid {what} {value}")]
    InvalidInput { index: usize, what: &'static str, value: f64 },
    #[error("numeric oracle did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("candidate has {got} entries, cluster has {expected}")]
    Length { expected: usize, got: usize },
    #[error("cluster file: {0}")]
    File(String),
}

/// One station's allocation subproblem.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterProblem {
    pub members: Vec<usize>,
    /// `p_i * Z_i` in Watt-bits.
    pub power_size: Vec<f64>,
    /// `log2(1 + snr_i)` per member.
    pub log_terms: Vec<f64>,
    pub bandwidth_hz: f64,
}

impl ClusterProblem {
    pub fn new(members: Vec<usize>, power_size: Vec<f64>, log_terms: Vec<f64>, bandwidth_hz: f64) -> Result<Self, AllocError> {
        if members.is_empty() {
            return Err(AllocError::EmptyCluster);
        }
        if power_size.len() != members.len() {
            return Err(AllocError::Length { expected: members.len(), got: power_size.len() });
        }
        if log_terms.len() != members.len() {
            return Err(AllocError::Length { expected: members.len(), got: log_terms.len() });
        }
        for (k, &l) in log_terms.iter().enumerate() {
            if l.is_nan() || l <= 0.0 {
                return Err(AllocError::Unservable { user: members[k] });
            }
        }
        for (k, &pz) in power_size.iter().enumerate() {
            if !(pz > 0.0 && pz.is_finite()) {
                return Err(AllocError::InvalidInput { index: k, what: "power*size", value: pz });
            }
        }
        if !(bandwidth_hz > 0.0) {
            return Err(AllocError::InvalidInput { index: 0, what: "bandwidth", value: bandwidth_hz });
        }
        Ok(Self { members, power_size, log_terms, bandwidth_hz })
    }

    /// Builds the problem of `station` under `assoc`; `None` when the station is empty.
    pub fn for_station(
        cfg: &ScenarioConfig,
        channels: &ChannelMatrix,
        assoc: &AssociationMatrix,
        station: usize,
    ) -> Result<Option<Self>, AllocError> {
        let members = assoc.members(station);
        if members.is_empty() {
            return Ok(None);
        }
        let power_size = members.iter().map(|&i| cfg.tx_power_watts(i) * cfg.model_bits(i)).collect();
        let log_terms = members
            .iter()
            .map(|&i| (1.0 + crate::scenario::snr_linear(cfg, i, channels.gain(i, station))).log2())
            .collect();
        Self::new(members, power_size, log_terms, cfg.bandwidth(station)).map(Some)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        let n = self.len() as f64;
        self.power_size
            .iter()
            .zip(&self.log_terms)
            .map(|(&pz, &l)| pz / (n * self.bandwidth_hz * l))
            .collect()
    }

    /// Mean member energy `sum_i w_i / beta_i` for the given fractions.
    pub fn mean_energy(&self, fractions: &[f64]) -> f64 {
        self.weights().iter().zip(fractions).map(|(w, b)| w / b).sum()
    }
}

/// Fractions whose sum is exactly 1: the last entry absorbs rounding.
fn normalize_exact(raw: &[f64]) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    let mut out: Vec<f64> = raw.iter().map(|r| r / total).collect();
    let last = out.len() - 1;
    out[last] = 1.0 - out[..last].iter().sum::<f64>();
    out
}

/// Closed-form energy-minimizing split.
pub fn optimal_allocation(problem: &ClusterProblem) -> Vec<f64> {
    let roots: Vec<f64> = problem.weights().iter().map(|w| w.sqrt()).collect();
    normalize_exact(&roots)
}

/// Benchmark split inversely proportional to `log2(1 + snr)`.
pub fn proportional_allocation(problem: &ClusterProblem) -> Vec<f64> {
    let inv: Vec<f64> = problem.log_terms.iter().map(|l| 1.0 / l).collect();
    normalize_exact(&inv)
}

pub fn uniform_allocation(problem: &ClusterProblem) -> Vec<f64> {
    normalize_exact(&vec![1.0; problem.len()])
}

/// Residuals of the optimality conditions at a candidate split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResidual {
    /// `max_i |w_i/beta_i^2 - lambda| / lambda` with `lambda` the member mean.
    pub stationarity: f64,
    /// `|sum_i beta_i - 1|`.
    pub feasibility: f64,
    /// Multiplier estimate (mean of `w_i / beta_i^2`).
    pub multiplier: f64,
}

pub fn kkt_residual(problem: &ClusterProblem, candidate: &[f64]) -> Result<KktResidual, AllocError> {
    if candidate.len() != problem.len() {
        return Err(AllocError::Length { expected: problem.len(), got: candidate.len() });
    }
    if let Some((k, &b)) = candidate.iter().enumerate().find(|(_, &b)| !(b > 0.0)) {
        return Err(AllocError::InvalidInput { index: k, what: "fraction", value: b });
    }
    let ratios: Vec<f64> = problem.weights().iter().zip(candidate).map(|(w, b)| w / (b * b)).collect();
    let lambda = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let stationarity = ratios.iter().map(|r| (r - lambda).abs() / lambda).fold(0.0, f64::max);
    let feasibility = (candidate.iter().sum::<f64>() - 1.0).abs();
    Ok(KktResidual { stationarity, feasibility, multiplier: lambda })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleSettings {
    /// Stop once the relative spread of the gradient along the simplex is below this.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self { tolerance: 1e-10, max_iterations: 100_000 }
    }
}

/// Independent numerical solution: gradient descent projected onto the
/// simplex's affine hull, Barzilai-Borwein steps with backtracking that
/// keeps every fraction strictly positive.
pub fn numeric_oracle(problem: &ClusterProblem, settings: OracleSettings) -> Result<Vec<f64>, AllocError> {
    let n = problem.len();
    if n == 1 {
        return Ok(vec![1.0]);
    }
    // The minimizer is invariant to a common scale of the weights.
    let raw = problem.weights();
    let top = raw.iter().copied().fold(0.0, f64::max);
    let w: Vec<f64> = raw.iter().map(|x| x / top).collect();
    let objective = |b: &[f64]| -> f64 { w.iter().zip(b).map(|(w, b)| w / b).sum() };
    let projected_grad = |b: &[f64]| -> (Vec<f64>, f64) {
        let g: Vec<f64> = w.iter().zip(b).map(|(w, b)| -w / (b * b)).collect();
        let mean = g.iter().sum::<f64>() / n as f64;
        let pg: Vec<f64> = g.iter().map(|x| x - mean).collect();
        let rel = pg.iter().map(|x| x.abs()).fold(0.0, f64::max) / mean.abs();
        (pg, rel)
    };

    let mut beta = vec![1.0 / n as f64; n];
    let (mut grad, mut residual) = projected_grad(&beta);
    let mut step = 1e-2;
    for iter in 0..settings.max_iterations {
        if residual < settings.tolerance {
            return Ok(beta);
        }
        let f0 = objective(&beta);
        let g_norm2: f64 = grad.iter().map(|x| x * x).sum();
        let mut t = step;
        let next = loop {
            let cand: Vec<f64> = beta.iter().zip(&grad).map(|(b, g)| b - t * g).collect();
            // Near the optimum the objective change falls below its rounding
            // error, so a shrinking gradient also counts as progress.
            if cand.iter().all(|&b| b > 0.0)
                && (objective(&cand) <= f0 - 1e-4 * t * g_norm2 || projected_grad(&cand).1 < residual)
            {
                break Some(cand);
            }
            t *= 0.5;
            if t < 1e-300 {
                break None;
            }
        };
        let Some(next) = next else {
            return Err(AllocError::NoConvergence { iterations: iter, residual });
        };
        let (next_grad, next_residual) = projected_grad(&next);
        let s: Vec<f64> = next.iter().zip(&beta).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = next_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let ss: f64 = s.iter().map(|a| a * a).sum();
        step = if sy > 0.0 { ss / sy } else { t * 2.0 };
        beta = next;
        grad = next_grad;
        residual = next_residual;
    }
    if residual < settings.tolerance {
        Ok(beta)
    } else {
        Err(AllocError::NoConvergence { iterations: settings.max_iterations, residual })
    }
}

/// How a station splits its bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationRule {
    Optimal,
    Proportional,
    Uniform,
}

impl AllocationRule {
    pub fn split(self, problem: &ClusterProblem) -> Vec<f64> {
        match self {
            AllocationRule::Optimal => optimal_allocation(problem),
            AllocationRule::Proportional => proportional_allocation(problem),
            AllocationRule::Uniform => uniform_allocation(problem),
        }
    }
}

/// Solves every station independently.
pub fn allocate(
    cfg: &ScenarioConfig,
    channels: &ChannelMatrix,
    assoc: &AssociationMatrix,
    rule: AllocationRule,
) -> Result<BandwidthAllocation, AllocError> {
    let mut alloc = BandwidthAllocation::zeros(assoc.num_users(), assoc.num_stations());
    for j in 0..assoc.num_stations() {
        if let Some(problem) = ClusterProblem::for_station(cfg, channels, assoc, j)? {
            for (&i, b) in problem.members.iter().zip(rule.split(&problem)) {
                alloc.beta.set(i, j, b);
            }
        }
    }
    Ok(alloc)
}

/// System-average energy of `assoc` under `rule`, without building a report.
pub fn system_energy_under(
    cfg: &ScenarioConfig,
    channels: &ChannelMatrix,
    assoc: &AssociationMatrix,
    rule: AllocationRule,
) -> Result<f64, AllocError> {
    let mut total = 0.0;
    for j in 0..assoc.num_stations() {
        if let Some(problem) = ClusterProblem::for_station(cfg, channels, assoc, j)? {
            let split = rule.split(&problem);
            total += problem.len() as f64 * problem.mean_energy(&split);
        }
    }
    Ok(total / assoc.num_users() as f64)
}

/// Default energy normalizer: everyone on the station with the lowest mean
/// gain, optimally split.
pub fn default_e_max(cfg: &ScenarioConfig, channels: &ChannelMatrix) -> Result<f64, AllocError> {
    let means = channels.mean_gain_per_station();
    let worst = (0..means.len())
        .min_by(|&a, &b| means[a].total_cmp(&means[b]))
        .expect("at least one station");
    let assoc = AssociationMatrix::uniform(channels.num_users(), worst, channels.num_stations())
        .expect("station index in range");
    system_energy_under(cfg, channels, &assoc, AllocationRule::Optimal)
}

pub fn normalizers(cfg: &ScenarioConfig, channels: &ChannelMatrix) -> Result<Normalizers, AllocError> {
    let e_max = match cfg.e_max {
        Some(e) => e,
        None => default_e_max(cfg, channels)?,
    };
    Ok(Normalizers { g_max: cfg.g_max, e_max })
}

/// One member of a cluster file; exactly one of `log_term` and `snr`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterMember {
    #[serde(default)]
    pub log_term: Option<f64>,
    /// Linear SNR.
    #[serde(default)]
    pub snr: Option<f64>,
    /// `p_i * Z_i`; 1 when absent.
    #[serde(default)]
    pub power_size: Option<f64>,
}

/// Stand-alone allocation problem read from TOML:
///
/// ```toml
/// bandwidth_hz = 20e6
/// [[member]]
/// log_term = 4.0
/// [[member]]
/// snr = 1.0
/// power_size = 2.0
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterFile {
    #[serde(default = "unit_bandwidth")]
    pub bandwidth_hz: f64,
    pub member: Vec<ClusterMember>,
}

fn unit_bandwidth() -> f64 {
    1.0
}

impl ClusterFile {
    pub fn from_toml_str(text: &str) -> Result<Self, AllocError> {
        toml::from_str(text).map_err(|e| AllocError::File(e.to_string()))
    }

    pub fn to_problem(&self) -> Result<ClusterProblem, AllocError> {
        let mut logs = Vec::with_capacity(self.member.len());
        for (k, m) in self.member.iter().enumerate() {
            logs.push(match (m.log_term, m.snr) {
                (Some(l), None) => l,
                (None, Some(snr)) => (1.0 + snr).log2(),
                _ => return Err(AllocError::File(format!("member {k} needs exactly one of log_term and snr"))),
            });
        }
        let power_size = self.member.iter().map(|m| m.power_size.unwrap_or(1.0)).collect();
        ClusterProblem::new((0..self.member.len()).collect(), power_size, logs, self.bandwidth_hz)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn problem(log_terms: &[f64]) -> ClusterProblem {
        let n = log_terms.len();
        ClusterProblem::new((0..n).collect(), vec![1.0; n], log_terms.to_vec(), 1.0).unwrap()
    }

    #[test]
    fn single_member_gets_everything() {
        let p = problem(&[3.0]);
        assert_eq!(optimal_allocation(&p), vec![1.0]);
        assert_eq!(proportional_allocation(&p), vec![1.0]);
        assert_eq!(numeric_oracle(&p, OracleSettings::default()).unwrap(), vec![1.0]);
        let r = kkt_residual(&p, &[1.0]).unwrap();
        assert_eq!((r.stationarity, r.feasibility), (0.0, 0.0));
    }

    #[test]
    fn worse_channel_gets_more() {
        let p = problem(&[4.0, 1.0]);
        let b = optimal_allocation(&p);
        assert!((b[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((b[1] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(b.iter().sum::<f64>(), 1.0);
        let prop = proportional_allocation(&p);
        assert!((prop[0] - 0.2).abs() < 1e-15 && (prop[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn identical_members_split_evenly() {
        let p = problem(&[2.5; 4]);
        for b in optimal_allocation(&p).into_iter().chain(proportional_allocation(&p)) {
            assert!((b - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn oracle_matches_two_member_case() {
        let p = problem(&[4.0, 1.0]);
        let o = numeric_oracle(&p, OracleSettings::default()).unwrap();
        assert!((o[0] - 1.0 / 3.0).abs() < 1e-6, "{o:?}");
        assert!((o[1] - 2.0 / 3.0).abs() < 1e-6, "{o:?}");
    }

    #[test]
    fn oracle_reports_non_convergence() {
        let p = problem(&[4.0, 1.0, 2.0]);
        let err = numeric_oracle(&p, OracleSettings { tolerance: 0.0, max_iterations: 3 }).unwrap_err();
        assert!(matches!(err, AllocError::NoConvergence { iterations: 3, .. }));
    }

    #[test]
    fn kkt_residuals() {
        let p = problem(&[4.0, 1.0]);
        let r = kkt_residual(&p, &optimal_allocation(&p)).unwrap();
        assert!(r.stationarity < 1e-9 && r.feasibility < 1e-9);
        // lambda = (sum sqrt w)^2 with w = 1/(2*4), 1/(2*1)
        let expected = ((1.0f64 / 8.0).sqrt() + 0.5f64.sqrt()).powi(2);
        assert!((r.multiplier - expected).abs() < 1e-12);
        let r = kkt_residual(&p, &uniform_allocation(&p)).unwrap();
        assert!(r.stationarity > 0.1);
        assert!(kkt_residual(&p, &[1.0, 0.0]).is_err());
        assert!(kkt_residual(&p, &[1.0]).is_err());
    }

    #[test]
    fn zero_snr_is_unservable() {
        let err = ClusterProblem::new(vec![4, 9], vec![1.0, 1.0], vec![1.0, 0.0], 1.0).unwrap_err();
        assert_eq!(err, AllocError::Unservable { user: 9 });
        assert_eq!(ClusterProblem::new(vec![], vec![], vec![], 1.0).unwrap_err(), AllocError::EmptyCluster);
    }

    #[test]
    fn optimal_beats_proportional_energy() {
        let p = ClusterProblem::new(vec![0, 1, 2], vec![1.0, 3.0, 0.5], vec![9.0, 2.0, 5.0], 1e6).unwrap();
        let opt = p.mean_energy(&optimal_allocation(&p));
        assert!(opt <= p.mean_energy(&proportional_allocation(&p)));
        assert!(opt <= p.mean_energy(&uniform_allocation(&p)));
    }

    #[test]
    fn cluster_file_fixture() {
        let f = ClusterFile::from_toml_str("[[member]]\nlog_term = 4.0\n[[member]]\nlog_term = 1.0\n").unwrap();
        let beta = optimal_allocation(&f.to_problem().unwrap());
        assert!((beta[0] - 1.0 / 3.0).abs() < 1e-15 && (beta[1] - 2.0 / 3.0).abs() < 1e-15);
        let both = ClusterFile::from_toml_str("[[member]]\nlog_term = 4.0\nsnr = 3.0\n").unwrap();
        assert!(matches!(both.to_problem(), Err(AllocError::File(_))));
        let snr = ClusterFile::from_toml_str("[[member]]\nsnr = 3.0\n").unwrap().to_problem().unwrap();
        assert_eq!(snr.log_terms, vec![2.0]);
    }
}
