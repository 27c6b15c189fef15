//! The simulated wireless world.
//!
//! Stations sit at fixed symmetric points, users are dropped uniformly in a
//! square, and every user/station link gets a static gain
//! `h = d^-alpha * |L|` with `L` circularly-symmetric complex Gaussian of
//! total variance 8 (so `|L|` is Rayleigh with scale 2).

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Stream};

/// Users closer than this to a station are re-drawn.
pub const MIN_STATION_DISTANCE: f64 = 1.0;

/// Total variance of the complex fading coefficient.
pub const FADING_VARIANCE: f64 = 8.0;

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("association row {row} sums to {sum}, expected exactly 1")]
    RowSum { row: usize, sum: u32 },
    #[error("association entry ({row}, {col}) = {value} is not binary")]
    NotBinary { row: usize, col: usize, value: u8 },
    #[error("user {user} mapped to station {station}, only {stations} stations exist")]
    StationOutOfRange { user: usize, station: usize, stations: usize },
    #[error("failed to read {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("failed to parse configuration: {0}")]
    Parse(String),
}

/// Every physical and experiment constant of a scenario.
///
/// Per-user power and model size and per-station bandwidth are homogeneous
/// here; accessors take the index so heterogeneous values can be threaded
/// through later without touching call sites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub num_users: usize,
    pub num_stations: usize,
    /// Side of the square deployment area, meters.
    pub area_side: f64,
    /// Uplink bandwidth of every station, Hz.
    pub bandwidth_hz: f64,
    pub tx_power_dbm: f64,
    pub noise_dbm: f64,
    pub path_loss_exponent: f64,
    /// Size of one model upload, bits.
    pub model_size_bits: f64,
    /// Energy weight of the objective.
    pub mu: f64,
    pub g_max: f64,
    /// Energy normalizer, Joules. Derived from the scenario when absent.
    pub e_max: Option<f64>,
    pub rng_seed: u64,
    /// One label pair per ground-truth cluster.
    pub swap_pairs: Vec<[usize; 2]>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            num_users: 15,
            num_stations: 2,
            area_side: 500.0,
            bandwidth_hz: 20e6,
            tx_power_dbm: 23.0,
            noise_dbm: -96.0,
            path_loss_exponent: 4.0,
            model_size_bits: 4e7,
            mu: 0.5,
            g_max: 1.0,
            e_max: None,
            rng_seed: 1,
            swap_pairs: vec![[0, 1], [2, 3]],
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |msg: &str| Err(ScenarioError::Invalid(msg.to_string()));
        if self.num_users == 0 {
            return bad("num_users must be at least 1");
        }
        if self.num_stations == 0 {
            return bad("num_stations must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return bad("mu must lie in [0, 1]");
        }
        if !(self.bandwidth_hz > 0.0) {
            return bad("bandwidth_hz must be positive");
        }
        if !(self.model_size_bits > 0.0) {
            return bad("model_size_bits must be positive");
        }
        if !(self.g_max > 0.0) {
            return bad("g_max must be positive");
        }
        if let Some(e) = self.e_max {
            if !(e > 0.0) {
                return bad("e_max must be positive");
            }
        }
        if !(self.area_side > 0.0) {
            return bad("area_side must be positive");
        }
        if !(self.path_loss_exponent > 0.0) {
            return bad("path_loss_exponent must be positive");
        }
        if self.swap_pairs.is_empty() {
            return bad("at least one swap pair is required");
        }
        if self.swap_pairs.iter().any(|p| p[0] == p[1]) {
            return bad("each swap pair needs two distinct labels");
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario config is always serializable")
    }

    pub fn num_clusters(&self) -> usize {
        self.swap_pairs.len()
    }

    pub fn bandwidth(&self, _station: usize) -> f64 {
        self.bandwidth_hz
    }

    pub fn tx_power_dbm(&self, _user: usize) -> f64 {
        self.tx_power_dbm
    }

    /// Transmit power in Watts.
    pub fn tx_power_watts(&self, user: usize) -> f64 {
        dbm_to_milliwatts(self.tx_power_dbm(user)) / 1e3
    }

    pub fn model_bits(&self, _user: usize) -> f64 {
        self.model_size_bits
    }
}

pub fn dbm_to_milliwatts(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

/// Received SNR of user `user` for a link with linear gain `gain`.
pub fn snr_linear(cfg: &ScenarioConfig, user: usize, gain: f64) -> f64 {
    gain * dbm_to_milliwatts(cfg.tx_power_dbm(user)) / dbm_to_milliwatts(cfg.noise_dbm)
}

/// Path-loss-and-fading gain as printed: amplitude, not power, of the fading.
pub fn channel_gain(distance: f64, fading_amplitude: f64, alpha: f64) -> f64 {
    distance.powf(-alpha) * fading_amplitude
}

/// Dense row-major `rows x cols` matrix of reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols.max(1)).map(<[f64]>::to_vec).collect()
    }
}

/// Static link gains and distances, indexed `[user][station]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix {
    pub gain: Grid,
    pub distance: Grid,
}

impl ChannelMatrix {
    pub fn num_users(&self) -> usize {
        self.gain.rows
    }

    pub fn num_stations(&self) -> usize {
        self.gain.cols
    }

    pub fn gain(&self, user: usize, station: usize) -> f64 {
        self.gain.get(user, station)
    }

    pub fn distance(&self, user: usize, station: usize) -> f64 {
        self.distance.get(user, station)
    }

    /// Mean gain of each station over all users.
    pub fn mean_gain_per_station(&self) -> Vec<f64> {
        let n = self.num_users() as f64;
        (0..self.num_stations())
            .map(|j| (0..self.num_users()).map(|i| self.gain(i, j)).sum::<f64>() / n)
            .collect()
    }
}

/// Binary user-to-station association with exactly one station per user.
///
/// Stored as the station index of each user, which makes the row-sum
/// invariant unrepresentable to break.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AssociationMatrix {
    stations: Vec<usize>,
    num_stations: usize,
}

impl AssociationMatrix {
    pub fn new(stations: Vec<usize>, num_stations: usize) -> Result<Self, ScenarioError> {
        if let Some((user, &station)) = stations.iter().enumerate().find(|(_, &s)| s >= num_stations) {
            return Err(ScenarioError::StationOutOfRange { user, station, stations: num_stations });
        }
        Ok(Self { stations, num_stations })
    }

    /// Everyone on one station.
    pub fn uniform(num_users: usize, station: usize, num_stations: usize) -> Result<Self, ScenarioError> {
        Self::new(vec![station; num_users], num_stations)
    }

    pub fn from_dense(rows: &[Vec<u8>]) -> Result<Self, ScenarioError> {
        let num_stations = rows.first().map_or(0, Vec::len);
        let mut stations = Vec::with_capacity(rows.len());
        for (r, row) in rows.iter().enumerate() {
            if row.len() != num_stations {
                return Err(ScenarioError::Invalid(format!(
                    "association row {r} has {} columns, expected {num_stations}",
                    row.len()
                )));
            }
            if let Some((c, &v)) = row.iter().enumerate().find(|(_, &v)| v > 1) {
                return Err(ScenarioError::NotBinary { row: r, col: c, value: v });
            }
            let sum: u32 = row.iter().map(|&v| u32::from(v)).sum();
            if sum != 1 {
                return Err(ScenarioError::RowSum { row: r, sum });
            }
            stations.push(row.iter().position(|&v| v == 1).unwrap());
        }
        Ok(Self { stations, num_stations })
    }

    pub fn num_users(&self) -> usize {
        self.stations.len()
    }

    pub fn num_stations(&self) -> usize {
        self.num_stations
    }

    pub fn station_of(&self, user: usize) -> usize {
        self.stations[user]
    }

    pub fn stations(&self) -> &[usize] {
        &self.stations
    }

    pub fn get(&self, user: usize, station: usize) -> u8 {
        u8::from(self.stations[user] == station)
    }

    /// Members of `station` in ascending user order.
    pub fn members(&self, station: usize) -> Vec<usize> {
        (0..self.stations.len()).filter(|&i| self.stations[i] == station).collect()
    }

    pub fn member_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_stations];
        for &s in &self.stations {
            counts[s] += 1;
        }
        counts
    }

    pub fn to_dense(&self) -> Vec<Vec<u8>> {
        (0..self.num_users())
            .map(|i| (0..self.num_stations).map(|j| self.get(i, j)).collect())
            .collect()
    }

    pub fn to_grid(&self) -> Grid {
        let mut g = Grid::zeros(self.num_users(), self.num_stations);
        for (i, &s) in self.stations.iter().enumerate() {
            g.set(i, s, 1.0);
        }
        g
    }

    /// Same association with users relabeled: user `perm[i]` of the result is user `i` here.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut stations = vec![0; self.stations.len()];
        for (i, &p) in perm.iter().enumerate() {
            stations[p] = self.stations[i];
        }
        Self { stations, num_stations: self.num_stations }
    }
}

/// A generated world.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub user_positions: Vec<[f64; 2]>,
    pub station_positions: Vec<[f64; 2]>,
    pub channels: ChannelMatrix,
    /// Ground-truth cluster (index into `swap_pairs`) of every user.
    pub cluster_labels: Vec<usize>,
}

impl Scenario {
    pub fn swap_pair_of(&self, user: usize) -> [usize; 2] {
        self.config.swap_pairs[self.cluster_labels[user]]
    }

    pub fn snr(&self, user: usize, station: usize) -> f64 {
        snr_linear(&self.config, user, self.channels.gain(user, station))
    }

    pub fn dump(&self) -> ScenarioDump {
        ScenarioDump {
            config: self.config.clone(),
            station_positions: self.station_positions.clone(),
            user_positions: self.user_positions.clone(),
            cluster_labels: self.cluster_labels.clone(),
            distance: self.channels.distance.to_rows(),
            gain: self.channels.gain.to_rows(),
        }
    }
}

/// Inspection/fixture snapshot of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioDump {
    pub config: ScenarioConfig,
    pub station_positions: Vec<[f64; 2]>,
    pub user_positions: Vec<[f64; 2]>,
    pub cluster_labels: Vec<usize>,
    pub distance: Vec<Vec<f64>>,
    pub gain: Vec<Vec<f64>>,
}

impl ScenarioDump {
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario dump is always serializable")
    }
}

/// Fixed, symmetric station sites: corners of the inner half-square first,
/// then a ring around the center for more than four stations.
pub fn station_sites(num_stations: usize, side: f64) -> Vec<[f64; 2]> {
    if num_stations == 1 {
        return vec![[side / 2.0, side / 2.0]];
    }
    let corners = [[0.25, 0.25], [0.75, 0.75], [0.25, 0.75], [0.75, 0.25]];
    if num_stations <= corners.len() {
        return corners[..num_stations].iter().map(|c| [c[0] * side, c[1] * side]).collect();
    }
    let radius = side * 0.25 * std::f64::consts::SQRT_2;
    (0..num_stations)
        .map(|k| {
            let angle = std::f64::consts::TAU * k as f64 / num_stations as f64 + std::f64::consts::FRAC_PI_4;
            [side / 2.0 + radius * angle.cos(), side / 2.0 + radius * angle.sin()]
        })
        .collect()
}

fn euclid(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Draws user positions, fading and ground-truth clusters from `config.rng_seed`.
pub fn generate_scenario(config: &ScenarioConfig) -> Result<Scenario, ScenarioError> {
    config.validate()?;
    let n = config.num_users;
    let m = config.num_stations;
    let side = config.area_side;
    let stations = station_sites(m, side);

    let mut place = rng::stream(config.rng_seed, Stream::Placement);
    let mut users: Vec<[f64; 2]> = Vec::with_capacity(n);
    while users.len() < n {
        let p = [place.random::<f64>() * side, place.random::<f64>() * side];
        let too_close = stations.iter().any(|&s| euclid(p, s) < MIN_STATION_DISTANCE);
        let duplicate = users.contains(&p);
        if !too_close && !duplicate {
            users.push(p);
        }
    }

    let component = Normal::new(0.0, (FADING_VARIANCE / 2.0).sqrt()).expect("finite std");
    let mut fade = rng::stream(config.rng_seed, Stream::Fading);
    let mut gain = Grid::zeros(n, m);
    let mut distance = Grid::zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            let d = euclid(users[i], stations[j]);
            let re: f64 = component.sample(&mut fade);
            let im: f64 = component.sample(&mut fade);
            let amplitude = re.hypot(im);
            distance.set(i, j, d);
            gain.set(i, j, channel_gain(d, amplitude, config.path_loss_exponent));
        }
    }

    let k = config.num_clusters();
    let cluster_labels = (0..n).map(|i| i % k).collect();

    Ok(Scenario {
        config: config.clone(),
        user_positions: users,
        station_positions: stations,
        channels: ChannelMatrix { gain, distance },
        cluster_labels,
    })
}
