//! Uplink rate and upload energy under OFDMA bandwidth splitting.

use thiserror::Error;

use crate::scenario::{snr_linear, AssociationMatrix, ChannelMatrix, Grid, ScenarioConfig};

#[derive(Debug, Error, PartialEq)]
pub enum CommsError {
    #[error("user {user} has zero uplink rate (no bandwidth or no SNR); energy is unbounded")]
    ZeroBandwidth { user: usize },
    #[error("user {user}: bandwidth fraction {beta} outside [0, a_ij]")]
    Infeasible { user: usize, beta: f64 },
    #[error("station {station}: fractions sum to {sum} > 1")]
    Oversubscribed { station: usize, sum: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Per-link bandwidth fractions `beta[user][station]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthAllocation {
    pub beta: Grid,
}

impl BandwidthAllocation {
    pub fn zeros(num_users: usize, num_stations: usize) -> Self {
        Self { beta: Grid::zeros(num_users, num_stations) }
    }

    pub fn get(&self, user: usize, station: usize) -> f64 {
        self.beta.get(user, station)
    }

    /// Checks `0 <= beta_ij <= a_ij` and per-station sums `<= 1` (with `slack`).
    pub fn check_against(&self, assoc: &AssociationMatrix, slack: f64) -> Result<(), CommsError> {
        if self.beta.rows != assoc.num_users() || self.beta.cols != assoc.num_stations() {
            return Err(CommsError::Shape(format!(
                "allocation is {}x{}, association is {}x{}",
                self.beta.rows,
                self.beta.cols,
                assoc.num_users(),
                assoc.num_stations()
            )));
        }
        for i in 0..self.beta.rows {
            for j in 0..self.beta.cols {
                let b = self.get(i, j);
                if b < 0.0 || b > f64::from(assoc.get(i, j)) {
                    return Err(CommsError::Infeasible { user: i, beta: b });
                }
            }
        }
        for j in 0..self.beta.cols {
            let sum: f64 = (0..self.beta.rows).map(|i| self.get(i, j)).sum();
            if sum > 1.0 + slack {
                return Err(CommsError::Oversubscribed { station: j, sum });
            }
        }
        Ok(())
    }
}

/// `r = beta * B * log2(1 + snr)`, bits per second.
pub fn rate_from_snr(beta: f64, bandwidth_hz: f64, snr: f64) -> f64 {
    beta * bandwidth_hz * (1.0 + snr).log2()
}

/// Uplink rate of `user` towards `station` given the link gain.
pub fn uplink_rate(cfg: &ScenarioConfig, user: usize, station: usize, beta: f64, gain: f64) -> Result<f64, CommsError> {
    let r = rate_from_snr(beta, cfg.bandwidth(station), snr_linear(cfg, user, gain));
    if r > 0.0 {
        Ok(r)
    } else {
        Err(CommsError::ZeroBandwidth { user })
    }
}

/// `E = Z / r * p` in Joules, with `p` in Watts.
pub fn energy_from_rate(model_bits: f64, rate: f64, power_watts: f64) -> Option<f64> {
    (rate > 0.0).then(|| model_bits / rate * power_watts)
}

pub fn upload_energy(cfg: &ScenarioConfig, user: usize, station: usize, beta: f64, gain: f64) -> Result<f64, CommsError> {
    let r = uplink_rate(cfg, user, station, beta, gain)?;
    Ok(energy_from_rate(cfg.model_bits(user), r, cfg.tx_power_watts(user)).expect("rate checked positive"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport {
    /// Upload energy of every user on its associated link, Joules.
    pub per_user: Vec<f64>,
    /// Mean member energy per station; 0 for an empty station.
    pub per_station_avg: Vec<f64>,
    /// `(1/N) * sum_i E_i`.
    pub system_avg: f64,
}

pub fn system_energy(
    assoc: &AssociationMatrix,
    alloc: &BandwidthAllocation,
    channels: &ChannelMatrix,
    cfg: &ScenarioConfig,
) -> Result<EnergyReport, CommsError> {
    alloc.check_against(assoc, 1e-9)?;
    if channels.num_users() != assoc.num_users() || channels.num_stations() != assoc.num_stations() {
        return Err(CommsError::Shape("channel matrix does not match association".into()));
    }
    let n = assoc.num_users();
    let m = assoc.num_stations();
    let mut per_user = Vec::with_capacity(n);
    let mut sums = vec![0.0; m];
    for i in 0..n {
        let j = assoc.station_of(i);
        let e = upload_energy(cfg, i, j, alloc.get(i, j), channels.gain(i, j))?;
        sums[j] += e;
        per_user.push(e);
    }
    let counts = assoc.member_counts();
    let per_station_avg = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect();
    let system_avg = per_user.iter().sum::<f64>() / n as f64;
    Ok(EnergyReport { per_user, per_station_avg, system_avg })
}

/// Normalizing constants of the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizers {
    pub g_max: f64,
    pub e_max: f64,
}

/// `(1 - mu) G / G_max - mu E / E_max`. Not clipped.
pub fn normalized_objective(accuracy: f64, energy: f64, mu: f64, norms: Normalizers) -> f64 {
    (1.0 - mu) * accuracy / norms.g_max - mu * energy / norms.e_max
}
