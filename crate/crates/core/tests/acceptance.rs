//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails. Pass criterion numbers as arguments
//! to run a subset, e.g. `cargo test --test acceptance -- 1 2 9`.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;
use std::time::Instant;

use clusterfl::bandwidth_opt::{
    kkt_residual, normalizers, numeric_oracle, optimal_allocation, proportional_allocation, AllocationRule,
    ClusterProblem, OracleSettings,
};
use clusterfl::drl_agent::{td_target, Agent, MdpState, QNetwork};
use clusterfl::fl_engine::{ingest_idx, parse_idx_images, parse_idx_labels, IdxError};
use clusterfl::harness::{
    gradcheck_suite, run_cell, run_cells, run_experiment, BackendKind, CellOutput, CellSpec, ExperimentPlan, RunSettings,
    World,
};
use clusterfl::learnkit::ParameterVector;
use clusterfl::scenario::{generate_scenario, AssociationMatrix, ScenarioConfig};
use clusterfl::strategies::{brute_force_best, surrogate_system_accuracy, ScoredAssociation, StrategyKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: std::ops::RangeInclusive<u64> = 1..=10;

/// Agent profile for the learned strategies; everything else is default.
const AGENT_PROFILE: &str =
    "[agent]\nlearning_rate = 0.005\nupdates_per_epoch = 8\nbatch_size = 64\ntarget_sync = 1000\ngamma = 0.5\n";
const AGENT_EPOCHS: usize = 2000;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn agent_settings() -> RunSettings {
    RunSettings::from_toml_str(AGENT_PROFILE).unwrap()
}

fn threads() -> usize {
    std::thread::available_parallelism().map_or(1, |p| p.get())
}

fn cell(strategy: StrategyKind, mu: f64, num_users: usize, seed: u64, epochs: usize, rounds: usize) -> CellSpec {
    CellSpec { strategy, mu, num_users, seed, epochs, episode_length: 50, rounds }
}

fn count(flags: &[bool]) -> usize {
    flags.iter().filter(|&&f| f).count()
}

fn fmt_list(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ")
}

/// Trained learned-strategy cells shared by several criteria.
#[derive(Default)]
struct Cache {
    trained: BTreeMap<(StrategyKind, u64, usize, u64), CellOutput>,
}

impl Cache {
    fn trained(&mut self, strategy: StrategyKind, mu: f64, num_users: usize) -> Vec<&CellOutput> {
        let key = |seed| (strategy, mu.to_bits(), num_users, seed);
        let missing: Vec<CellSpec> = SEEDS
            .filter(|&s| !self.trained.contains_key(&key(s)))
            .map(|s| cell(strategy, mu, num_users, s, AGENT_EPOCHS, 1))
            .collect();
        if !missing.is_empty() {
            let outs = run_cells(&ScenarioConfig::default(), &agent_settings(), &missing, threads()).unwrap();
            for out in outs {
                self.trained.insert(key(out.cell.seed), out);
            }
        }
        SEEDS.map(|s| &self.trained[&key(s)]).collect()
    }
}

fn random_cluster(rng: &mut ChaCha8Rng, equal_power: bool) -> ClusterProblem {
    let k = rng.random_range(2..=10);
    let pz = (0..k).map(|_| if equal_power { 1.0 } else { rng.random_range(0.1..10.0) }).collect();
    let logs = (0..k).map(|_| (1.0 + rng.random_range(1.0..=1e3f64)).log2()).collect();
    ClusterProblem::new((0..k).collect(), pz, logs, 20e6).unwrap()
}

fn closed_form_correctness() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut max_abs, mut max_kkt, mut worse) = (0.0f64, 0.0f64, 0);
    for k in 0..100 {
        let p = random_cluster(&mut rng, k % 2 == 0);
        let beta = optimal_allocation(&p);
        let oracle = numeric_oracle(&p, OracleSettings::default()).unwrap();
        max_abs = beta.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(max_abs, f64::max);
        let kkt = kkt_residual(&p, &beta).unwrap();
        max_kkt = max_kkt.max(kkt.stationarity).max(kkt.feasibility);
        let (e_opt, e_prop) = (p.mean_energy(&beta), p.mean_energy(&proportional_allocation(&p)));
        if e_opt > e_prop * (1.0 + 1e-12) {
            worse += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        max_abs <= 1e-6 && max_kkt < 1e-9 && worse == 0 && secs < 5.0,
        format!("max |beta - oracle| {max_abs:.2e}, max KKT {max_kkt:.2e}, {worse} above proportional, {secs:.2} s"),
    )
}

fn worse_channel_more_bandwidth() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut broken = 0;
    for _ in 0..1000 {
        let p = random_cluster(&mut rng, true);
        let beta = optimal_allocation(&p);
        let mut by_channel: Vec<usize> = (0..p.len()).collect();
        by_channel.sort_by(|&a, &b| p.log_terms[a].total_cmp(&p.log_terms[b]));
        if by_channel.windows(2).any(|w| p.log_terms[w[0]] < p.log_terms[w[1]] && beta[w[0]] <= beta[w[1]]) {
            broken += 1;
        }
    }
    verdict(broken == 0, format!("{broken} of 1000 instances out of reverse channel order"))
}

fn gradient_fidelity() -> Verdict {
    let cases = gradcheck_suite(10).unwrap();
    let worst = cases.iter().map(|c| c.max_relative_error).fold(0.0, f64::max);
    let nets = cases.iter().map(|c| c.name.as_str()).collect::<std::collections::BTreeSet<_>>().len();
    verdict(worst <= 1e-4, format!("{} cases over {nets} networks, max relative error {worst:.2e}", cases.len()))
}

fn brute_force(mu: f64, num_users: usize, seed: u64) -> ScoredAssociation {
    let cfg = ScenarioConfig { num_users, mu, rng_seed: seed, ..ScenarioConfig::default() };
    let s = generate_scenario(&cfg).unwrap();
    let norms = normalizers(&cfg, &s.channels).unwrap();
    let kappa = RunSettings::default().kappa;
    let labels = &s.cluster_labels;
    brute_force_best(&cfg, &s.channels, norms, u64::MAX, |a| Ok(surrogate_system_accuracy(a, labels, kappa))).unwrap()
}

fn small_instance_optimality(cache: &mut Cache) -> Verdict {
    let started = Instant::now();
    let gaps: Vec<f64> = cache
        .trained(StrategyKind::Proposed, 0.5, 4)
        .iter()
        .map(|out| {
            let best = brute_force(0.5, 4, out.cell.seed).objective;
            (best - out.summary.objective) / best.abs()
        })
        .collect();
    let hits = gaps.iter().filter(|&&g| g <= 0.05).count();
    verdict(
        hits >= 8,
        format!("{hits}/10 seeds within 5% of the optimum, gaps {} ({:.0} s)", fmt_list(&gaps), started.elapsed().as_secs_f64()),
    )
}

fn full_fl_settings() -> RunSettings {
    RunSettings { backend: BackendKind::FullFl, ..agent_settings() }
}

fn clustering_benefit(cache: &mut Cache) -> Verdict {
    let base = ScenarioConfig::default();
    let fixed: Vec<CellSpec> = [StrategyKind::Greedy, StrategyKind::AccuracyOptimal]
        .into_iter()
        .flat_map(|k| SEEDS.map(move |s| cell(k, 0.5, 8, s, 40, 5)))
        .collect();
    let outs = run_cells(&base, &full_fl_settings(), &fixed, threads()).unwrap();
    let acc = |k: StrategyKind, seed: u64| {
        outs.iter().find(|o| o.cell.strategy == k && o.cell.seed == seed).unwrap().summary.accuracy
    };
    let frozen = RunSettings { frozen: true, ..full_fl_settings() };
    let agents: Vec<Agent> =
        cache.trained(StrategyKind::Proposed, 0.5, 8).iter().map(|o| o.agent.clone().unwrap()).collect();
    let mut acc_gaps = Vec::new();
    let mut prop_gaps = Vec::new();
    for (seed, agent) in SEEDS.zip(agents) {
        let proposed = run_cell(&base, &frozen, &cell(StrategyKind::Proposed, 0.5, 8, seed, 40, 5), Some(agent)).unwrap();
        let greedy = acc(StrategyKind::Greedy, seed);
        acc_gaps.push(acc(StrategyKind::AccuracyOptimal, seed) - greedy);
        prop_gaps.push(proposed.summary.accuracy - greedy);
    }
    let both: Vec<bool> = acc_gaps.iter().zip(&prop_gaps).map(|(a, p)| *a >= 0.10 && *p >= 0.10).collect();
    let hits = count(&both);
    verdict(
        hits >= 8,
        format!(
            "{hits}/10 seeds with both >= 10pp over greedy; accuracy-optimal gaps {}; proposed gaps {}",
            fmt_list(&acc_gaps),
            fmt_list(&prop_gaps)
        ),
    )
}

fn energy_trend(cache: &mut Cache) -> Verdict {
    let fixed: Vec<CellSpec> = [StrategyKind::Greedy, StrategyKind::AccuracyOptimal]
        .into_iter()
        .flat_map(|k| SEEDS.map(move |s| cell(k, 0.7, 8, s, AGENT_EPOCHS, 1)))
        .collect();
    let outs = run_cells(&ScenarioConfig::default(), &agent_settings(), &fixed, threads()).unwrap();
    let energy = |k: StrategyKind, seed: u64| {
        outs.iter().find(|o| o.cell.strategy == k && o.cell.seed == seed).unwrap().summary.energy
    };
    let mut ok = Vec::new();
    let mut optimum_ok = Vec::new();
    let mut ratios = Vec::new();
    for out in cache.trained(StrategyKind::Proposed, 0.7, 8) {
        let seed = out.cell.seed;
        let floor = energy(StrategyKind::Greedy, seed).min(energy(StrategyKind::AccuracyOptimal, seed));
        ok.push(out.summary.energy <= floor);
        ratios.push(out.summary.energy / floor);
        // Reference point: the objective maximizer itself.
        optimum_ok.push(brute_force(0.7, 8, seed).energy <= floor);
    }
    let hits = count(&ok);
    verdict(
        hits >= 8,
        format!(
            "{hits}/10 seeds at or below both baselines (the exact optimum manages {}/10); energy / min(baselines) {}",
            count(&optimum_ok),
            fmt_list(&ratios)
        ),
    )
}

/// Exact one-sided sign test: P(X >= wins) for X ~ Binomial(trials, 1/2).
fn sign_test_p(wins: usize, trials: usize) -> f64 {
    let choose = |n: usize, k: usize| (0..k).fold(1.0, |acc, j| acc * (n - j) as f64 / (j + 1) as f64);
    (wins..=trials).map(|k| choose(trials, k)).sum::<f64>() / 2f64.powi(trials as i32)
}

fn transfer_gain() -> Verdict {
    let settings = RunSettings { backend: BackendKind::FullFl, ..RunSettings::default() };
    let mut diffs = Vec::new();
    for seed in SEEDS {
        let cfg = ScenarioConfig { num_users: 8, rng_seed: seed, ..ScenarioConfig::default() };
        let scenario = generate_scenario(&cfg).unwrap();
        // Every user on one station mixes all ground-truth clusters.
        let mixed = AssociationMatrix::uniform(8, 0, cfg.num_stations).unwrap();
        let mut final_acc = Vec::new();
        let mut marked: Option<Vec<bool>> = None;
        for transfer in [true, false] {
            let mut world = World::new(scenario.clone(), &settings, BackendKind::FullFl).unwrap();
            let mut last = None;
            for _ in 0..10 {
                let out = world.step(&mixed, AllocationRule::Optimal, transfer).unwrap();
                if transfer && marked.is_none() && out.compromised.iter().any(|&c| c) {
                    marked = Some(out.compromised.clone());
                }
                last = Some(out.report.per_user);
            }
            final_acc.push(last.unwrap());
        }
        let Some(marked) = marked else { continue };
        let mean = |acc: &[f64]| {
            let picked: Vec<f64> = acc.iter().zip(&marked).filter(|(_, &m)| m).map(|(a, _)| *a).collect();
            picked.iter().sum::<f64>() / picked.len() as f64
        };
        diffs.push(mean(&final_acc[0]) - mean(&final_acc[1]));
    }
    let wins = diffs.iter().filter(|&&d| d > 0.0).count();
    let trials = diffs.iter().filter(|&&d| d != 0.0).count();
    let mean = diffs.iter().sum::<f64>() / diffs.len().max(1) as f64;
    let p = sign_test_p(wins, trials);
    verdict(
        diffs.len() >= 10 && mean > 0.0 && p < 0.05,
        format!("{} seeds, mean gain {mean:.4}, {wins}/{trials} positive, sign test p = {p:.4}; gains {}", diffs.len(), fmt_list(&diffs)),
    )
}

fn d3qn_beats_dqn(cache: &mut Cache) -> Verdict {
    let d3qn: Vec<f64> = cache.trained(StrategyKind::Proposed, 0.5, 8).iter().map(|o| o.summary.objective).collect();
    let dqn: Vec<f64> = cache.trained(StrategyKind::PlainDqn, 0.5, 8).iter().map(|o| o.summary.objective).collect();
    let hits = d3qn.iter().zip(&dqn).filter(|(a, b)| a >= b).count();
    verdict(hits >= 7, format!("{hits}/10 seeds; d3qn {}; dqn {}", fmt_list(&d3qn), fmt_list(&dqn)))
}

fn with_bias(q: &QNetwork, bias: &[f64]) -> ParameterVector {
    let mut p = ParameterVector::zeros(&q.spec);
    let range = q.spec.layers()[0].bias.clone();
    p.values_mut()[range].copy_from_slice(bias);
    p
}

fn double_dueling_structure() -> Verdict {
    let s = MdpState(vec![0.0]);
    // Online prefers action 1, target prefers action 0.
    let q = QNetwork::new(1, 2, &[], false).unwrap();
    let online = with_bias(&q, &[0.0, 1.0]);
    let target = with_bias(&q, &[2.0, 1.0]);
    let double = td_target(&q, 0.0, &s, &online, &target, 0.5, false, true).unwrap();
    let plain = td_target(&q, 0.0, &s, &online, &target, 0.5, false, false).unwrap();
    let swapped = td_target(&q, 0.0, &s, &target, &online, 0.5, false, true).unwrap();
    let decoupled = (double, plain, swapped) == (0.5, 1.0, 0.0);

    // Raising every advantage by the same amount leaves Q unchanged.
    let d = QNetwork::new(1, 2, &[], true).unwrap();
    let q1 = d.q_values(&with_bias(&d, &[1.0, 2.0, 0.0]), &s).unwrap();
    let q2 = d.q_values(&with_bias(&d, &[1.0, 6.0, 4.0]), &s).unwrap();
    let cancels = q1 == vec![2.0, 0.0] && q2 == q1;
    verdict(
        decoupled && cancels,
        format!("targets double {double}, max {plain}, swapped {swapped}; dueling Q {q1:?} and {q2:?}"),
    )
}

fn gunzip_fixture(name: &str) -> Vec<u8> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    let mut out = Vec::new();
    flate2::read::GzDecoder::new(std::fs::File::open(path).unwrap()).read_to_end(&mut out).unwrap();
    out
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    (u32::from(bytes[at]) << 24) | (u32::from(bytes[at + 1]) << 16) | (u32::from(bytes[at + 2]) << 8) | u32::from(bytes[at + 3])
}

fn idx_format_fidelity() -> Verdict {
    let images = gunzip_fixture("t10k-images-idx3-ubyte.gz");
    let labels = gunzip_fixture("t10k-labels-idx1-ubyte.gz");
    let reference = (be_u32(&images, 4), be_u32(&images, 8), be_u32(&images, 12), be_u32(&labels, 4), labels[8]);

    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("images"), dir.path().join("labels"));
    std::fs::write(&ip, &images).unwrap();
    std::fs::write(&lp, &labels).unwrap();
    let pool = ingest_idx(&ip, &lp).unwrap();
    let ours = (pool.len() as u32, pool.rows as u32, pool.cols as u32, pool.labels.len() as u32, pool.labels[0] as u8);
    let matches = ours == reference && reference == (10000, 28, 28, 10000, 7);

    let mut short = labels[..8 + 9999].to_vec();
    short[4..8].copy_from_slice(&9999u32.to_be_bytes());
    std::fs::write(&lp, &short).unwrap();
    let errors = [
        parse_idx_labels(&images[..64]).err() == Some(IdxError::WrongMagic { expected: 0x0801, found: 0x0803 }),
        parse_idx_images(&labels).err() == Some(IdxError::WrongMagic { expected: 0x0803, found: 0x0801 }),
        parse_idx_images(&images[..images.len() - 1]).err()
            == Some(IdxError::Truncated { needed: images.len(), available: images.len() - 1 }),
        ingest_idx(&ip, &lp).err() == Some(IdxError::CountMismatch { images: 10000, labels: 9999 }),
        matches!(ingest_idx(&dir.path().join("absent"), &lp), Err(IdxError::Io { .. })),
    ];
    verdict(
        matches && errors.iter().all(|&e| e),
        format!("counts/dims/first label {ours:?} vs reference {reference:?}; {}/5 corrupt cases as expected", count(&errors)),
    )
}

const REPRO_PLAN: &str = r#"
strategies = ["proposed", "greedy", "accuracy-optimal", "brute-force"]
mu = [0.3, 0.7]
num_users = [4]
seeds = [1, 2]
epochs = 40
episode_length = 10
rounds = 2

[run]
backend = "full_fl"

[run.data]
samples_per_user = 40

[run.agent]
hidden = [16]
batch_size = 8
"#;

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                files.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn reproducibility() -> Verdict {
    let plan = ExperimentPlan::from_toml_str(REPRO_PLAN).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_experiment(&plan, &a, 1).unwrap();
    run_experiment(&plan, &b, 4).unwrap();
    let (ta, tb) = (read_tree(&a), read_tree(&b));
    let csvs = ta.keys().filter(|k| k.ends_with(".csv")).count();
    verdict(
        csvs > 0 && ta == tb,
        format!("{csvs} CSV files, trees {}", if ta == tb { "byte-identical" } else { "differ" }),
    )
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut cache = Cache::default();
    type Check<'a> = Box<dyn FnMut(&mut Cache) -> Verdict + 'a>;
    let criteria: Vec<(usize, &str, Check)> = vec![
        (1, "closed-form bandwidth split matches the oracle", Box::new(|_| closed_form_correctness())),
        (2, "worse channel gets more bandwidth", Box::new(|_| worse_channel_more_bandwidth())),
        (3, "analytic gradients match finite differences", Box::new(|_| gradient_fidelity())),
        (4, "agent near brute force at N=4", Box::new(small_instance_optimality)),
        (5, "clustering beats greedy on accuracy", Box::new(clustering_benefit)),
        (6, "learned association saves energy at mu=0.7", Box::new(energy_trend)),
        (7, "transfer helps compromised users", Box::new(|_| transfer_gain())),
        (8, "d3qn at least plain dqn at N=8", Box::new(d3qn_beats_dqn)),
        (9, "double target and dueling fixtures", Box::new(|_| double_dueling_structure())),
        (10, "IDX ingestion and corrupt files", Box::new(|_| idx_format_fidelity())),
        (11, "sweeps are byte-identical", Box::new(|_| reproducibility())),
    ];
    let mut failed = 0;
    for (id, name, mut check) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let v = check(&mut cache);
        failed += usize::from(!v.pass);
        println!("{} criterion {id:>2} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
