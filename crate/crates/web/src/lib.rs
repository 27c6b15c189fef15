//! WebAssembly bindings behind `www/index.html`.
//!
//! Every export returns a JSON string; the plain `*_json` functions carry the
//! logic so they can be tested natively.

use clusterfl::bandwidth_opt::{
    normalizers, optimal_allocation, proportional_allocation, system_energy_under, uniform_allocation,
    AllocationRule, ClusterProblem,
};
use clusterfl::comms::normalized_objective;
use clusterfl::scenario::{generate_scenario, AssociationMatrix, Scenario, ScenarioConfig};
use clusterfl::strategies::{
    accuracy_optimal_assoc, brute_force_best_on, greedy_assoc, surrogate_system_accuracy, DEFAULT_KAPPA,
};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Largest enumeration the page will attempt per request.
pub const DEMO_ENUMERATION_CAP: u64 = 4096;

#[derive(Debug, Serialize)]
pub struct MemberSplit {
    pub snr_db: f64,
    pub log_term: f64,
    pub optimal: f64,
    pub proportional: f64,
    pub uniform: f64,
}

#[derive(Debug, Serialize)]
pub struct SplitView {
    pub members: Vec<MemberSplit>,
    /// Mean member upload energy per rule, Joules.
    pub energy_optimal: f64,
    pub energy_proportional: f64,
    pub energy_uniform: f64,
}

/// One station's split under the three rules, for users at the given SNRs.
pub fn split_view(snr_db: &[f64], bandwidth_mhz: f64) -> Result<SplitView, String> {
    if snr_db.is_empty() {
        return Err("no users".into());
    }
    let cfg = ScenarioConfig::default();
    let power_size = cfg.tx_power_watts(0) * cfg.model_bits(0);
    let log_terms: Vec<f64> = snr_db.iter().map(|db| (1.0 + 10f64.powf(db / 10.0)).log2()).collect();
    let problem = ClusterProblem::new(
        (0..snr_db.len()).collect(),
        vec![power_size; snr_db.len()],
        log_terms.clone(),
        bandwidth_mhz * 1e6,
    )
    .map_err(|e| e.to_string())?;
    let (opt, prop, uni) =
        (optimal_allocation(&problem), proportional_allocation(&problem), uniform_allocation(&problem));
    let members = (0..snr_db.len())
        .map(|k| MemberSplit {
            snr_db: snr_db[k],
            log_term: log_terms[k],
            optimal: opt[k],
            proportional: prop[k],
            uniform: uni[k],
        })
        .collect();
    Ok(SplitView {
        members,
        energy_optimal: problem.mean_energy(&opt),
        energy_proportional: problem.mean_energy(&prop),
        energy_uniform: problem.mean_energy(&uni),
    })
}

#[derive(Debug, Serialize)]
pub struct Choice {
    pub name: &'static str,
    pub stations: Vec<usize>,
    pub accuracy: f64,
    pub energy: f64,
    pub objective: f64,
}

#[derive(Debug, Serialize)]
pub struct LayoutView {
    /// Positions scaled to the unit square.
    pub users: Vec<[f64; 2]>,
    pub stations: Vec<[f64; 2]>,
    pub clusters: Vec<usize>,
    pub e_max: f64,
    pub choices: Vec<Choice>,
}

fn scenario(num_users: usize, num_stations: usize, seed: u64, mu: f64) -> Result<Scenario, String> {
    let cfg = ScenarioConfig { num_users, num_stations, rng_seed: seed, mu, ..ScenarioConfig::default() };
    generate_scenario(&cfg).map_err(|e| e.to_string())
}

fn choice(sc: &Scenario, name: &'static str, assoc: &AssociationMatrix, rule: AllocationRule) -> Result<Choice, String> {
    let cfg = &sc.config;
    let norms = normalizers(cfg, &sc.channels).map_err(|e| e.to_string())?;
    let accuracy = surrogate_system_accuracy(assoc, &sc.cluster_labels, DEFAULT_KAPPA);
    let energy = system_energy_under(cfg, &sc.channels, assoc, rule).map_err(|e| e.to_string())?;
    Ok(Choice {
        name,
        stations: assoc.stations().to_vec(),
        accuracy,
        energy,
        objective: normalized_objective(accuracy, energy, cfg.mu, norms),
    })
}

fn best(sc: &Scenario) -> Result<AssociationMatrix, String> {
    let norms = normalizers(&sc.config, &sc.channels).map_err(|e| e.to_string())?;
    let labels = &sc.cluster_labels;
    brute_force_best_on(&sc.config, &sc.channels, norms, DEMO_ENUMERATION_CAP, 1, |a| {
        Ok(surrogate_system_accuracy(a, labels, DEFAULT_KAPPA))
    })
    .map(|b| b.assoc)
    .map_err(|e| e.to_string())
}

/// A generated deployment with the greedy, accuracy-optimal and (when small
/// enough to enumerate) best associations.
pub fn layout_view(num_users: usize, num_stations: usize, seed: u64, mu: f64) -> Result<LayoutView, String> {
    let sc = scenario(num_users, num_stations, seed, mu)?;
    let side = sc.config.area_side;
    let scale = |p: &[f64; 2]| [p[0] / side, p[1] / side];
    let mut choices = vec![
        choice(&sc, "greedy", &greedy_assoc(&sc.channels), AllocationRule::Proportional)?,
        choice(
            &sc,
            "accuracy-optimal",
            &accuracy_optimal_assoc(&sc.cluster_labels, &sc.channels).map_err(|e| e.to_string())?,
            AllocationRule::Proportional,
        )?,
    ];
    if (num_stations as u64).checked_pow(num_users as u32).is_some_and(|a| a <= DEMO_ENUMERATION_CAP) {
        choices.push(choice(&sc, "best", &best(&sc)?, AllocationRule::Optimal)?);
    }
    Ok(LayoutView {
        users: sc.user_positions.iter().map(scale).collect(),
        stations: sc.station_positions.iter().map(scale).collect(),
        clusters: sc.cluster_labels.clone(),
        e_max: normalizers(&sc.config, &sc.channels).map_err(|e| e.to_string())?.e_max,
        choices,
    })
}

#[derive(Debug, Serialize)]
pub struct TradeoffPoint {
    pub mu: f64,
    pub accuracy: f64,
    pub energy_norm: f64,
    pub objective: f64,
    pub stations: Vec<usize>,
}

/// Best association for `steps` evenly spaced energy weights in `[0, 1]`.
pub fn tradeoff_curve(num_users: usize, num_stations: usize, seed: u64, steps: usize) -> Result<Vec<TradeoffPoint>, String> {
    if steps < 2 {
        return Err("need at least two points".into());
    }
    (0..steps)
        .map(|k| {
            let mu = k as f64 / (steps - 1) as f64;
            let sc = scenario(num_users, num_stations, seed, mu)?;
            let c = choice(&sc, "best", &best(&sc)?, AllocationRule::Optimal)?;
            let e_max = normalizers(&sc.config, &sc.channels).map_err(|e| e.to_string())?.e_max;
            Ok(TradeoffPoint {
                mu,
                accuracy: c.accuracy,
                energy_norm: c.energy / e_max,
                objective: c.objective,
                stations: c.stations,
            })
        })
        .collect()
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string())).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn bandwidth_split(snr_db: Vec<f64>, bandwidth_mhz: f64) -> Result<String, JsValue> {
    to_js(split_view(&snr_db, bandwidth_mhz))
}

#[wasm_bindgen]
pub fn deployment(num_users: usize, num_stations: usize, seed: u32, mu: f64) -> Result<String, JsValue> {
    to_js(layout_view(num_users, num_stations, u64::from(seed), mu))
}

#[wasm_bindgen]
pub fn tradeoff(num_users: usize, num_stations: usize, seed: u32, steps: usize) -> Result<String, JsValue> {
    to_js(tradeoff_curve(num_users, num_stations, u64::from(seed), steps))
}
