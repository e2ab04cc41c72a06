//! Scenario generation: perturbed operating points solved by the oracle and
//! assembled into a graph-structured dataset with splits and normalization.

mod dataset;

pub use dataset::{
    load_dataset, save_dataset, split_dataset, Dataset, Manifest, NormStats, Split,
};

use crate::grid::{build_ybus, check_connectivity, BusKind, Network};
use crate::pf::{nr_solve, PFSolution, SolveOptions};
use crate::seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("no line outage keeps the network connected")]
    NoRemovableBranch,
    #[error("discard rate {discards}/{window} exceeded 50% over the last window; config looks miscalibrated")]
    ExcessiveDiscards { discards: usize, window: usize },
    #[error("base case does not converge from flat start")]
    BaseCaseInfeasible,
    #[error(transparent)]
    Pf(#[from] crate::pf::PfError),
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
    #[error("sample built from non-converged solution")]
    NotConverged,
}

/// Number of node feature columns: P, Q, V_init, theta_init, PQ, PV, Slack.
pub const NODE_FEATURES: usize = 7;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScenarioConfig {
    /// Uniform bounds for the load scaling draw (epsilon_P, epsilon_Q).
    pub load_range: (f64, f64),
    /// Fraction of scenarios that also receive a topology perturbation.
    pub topology_fraction: f64,
    pub samples: usize,
    pub seed: u64,
    pub tap_step: f64,
    pub tap_max_steps: i64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            load_range: (-0.4, 0.4),
            topology_fraction: 0.05,
            samples: 12_000,
            seed: 0,
            tap_step: 0.0125,
            tap_max_steps: 2,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let (lo, hi) = self.load_range;
        if !(-1.0 < lo && lo <= hi) {
            return Err(ScenarioError::Config(format!(
                "load_range ({lo}, {hi}) violates -1 < low <= high"
            )));
        }
        if !(0.0..=1.0).contains(&self.topology_fraction) {
            return Err(ScenarioError::Config(format!(
                "topology_fraction {} outside [0, 1]",
                self.topology_fraction
            )));
        }
        Ok(())
    }
}

/// One training example: raw (unnormalized) physical node features, the
/// bidirectional edge list, optional edge features, and oracle targets.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GraphSample {
    /// Row-major N x 7: [P, Q, V_init, theta_init, PQ, PV, Slack].
    pub node_features: Vec<Vec<f64>>,
    /// Both directions present for every in-service branch.
    pub edge_list: Vec<(usize, usize)>,
    /// (|Y_ij|, angle(Y_ij)) aligned to edge_list.
    pub edge_features: Option<Vec<(f64, f64)>>,
    /// N x 2 of (|V|, theta) from a converged solution.
    pub targets: Vec<(f64, f64)>,
    pub scenario_id: u64,
    pub topology_perturbed: bool,
}

impl GraphSample {
    pub fn n_nodes(&self) -> usize {
        self.node_features.len()
    }
}

/// Scales every load bus's demand by independent uniform draws from `range`.
/// A load bus is any bus with nonzero base demand. Draw order is ascending
/// bus index, P before Q at each bus.
pub fn perturb_loads(net: &Network, rng: &mut impl Rng, range: (f64, f64)) -> Network {
    let mut out = net.clone();
    for bus in out.buses.iter_mut() {
        if bus.p_demand == 0.0 && bus.q_demand == 0.0 {
            continue;
        }
        let eps_p = rng.gen_range(range.0..=range.1);
        let eps_q = rng.gen_range(range.0..=range.1);
        bus.p_demand *= 1.0 + eps_p;
        bus.q_demand *= 1.0 + eps_q;
    }
    out
}

/// Applies one mild topology perturbation: with equal probability either an
/// N-1 line outage (redrawn until the network stays connected) or a
/// transformer-tap shift of k*tap_step, k in {-max..-1, 1..max}. Falls back
/// to an outage when the base case has no off-nominal-tap transformer.
pub fn sample_topology_perturbation(
    net: &Network,
    rng: &mut impl Rng,
    tap_step: f64,
    tap_max_steps: i64,
) -> Result<Network, ScenarioError> {
    let transformer_branches: Vec<usize> = net
        .branches
        .iter()
        .enumerate()
        .filter(|(_, b)| b.in_service && b.tap != 1.0)
        .map(|(i, _)| i)
        .collect();
    let take_tap = rng.gen_bool(0.5) && !transformer_branches.is_empty();
    if take_tap {
        let which = transformer_branches[rng.gen_range(0..transformer_branches.len())];
        let mut k = rng.gen_range(-tap_max_steps..tap_max_steps); // 2*max values
        if k >= 0 {
            k += 1; // skip zero: {-max..-1, 1..max}
        }
        let mut out = net.clone();
        out.branches[which].tap += k as f64 * tap_step;
        return Ok(out);
    }
    // line outage with rejection; bail out if no single outage can keep the
    // network connected
    let in_service: Vec<usize> = net
        .branches
        .iter()
        .enumerate()
        .filter(|(_, b)| b.in_service)
        .map(|(i, _)| i)
        .collect();
    let removable = in_service.iter().any(|&i| {
        let mut trial = net.clone();
        trial.branches[i].in_service = false;
        check_connectivity(&trial).is_connected()
    });
    if !removable {
        return Err(ScenarioError::NoRemovableBranch);
    }
    loop {
        let which = in_service[rng.gen_range(0..in_service.len())];
        let mut trial = net.clone();
        trial.branches[which].in_service = false;
        if check_connectivity(&trial).is_connected() {
            return Ok(trial);
        }
    }
}

/// Assembles the graph representation of one solved operating point.
/// P/Q feature columns hold specified net injections where defined and 0
/// where the quantity is a solver unknown (slack P and Q, PV-bus Q); initial
/// voltages are the flat-start values with setpoints at PV/slack buses.
pub fn build_graph_sample(
    net: &Network,
    sol: &PFSolution,
    scenario_id: u64,
    topology_perturbed: bool,
) -> Result<GraphSample, ScenarioError> {
    if !sol.converged {
        return Err(ScenarioError::NotConverged);
    }
    let n = net.n_buses();
    let (p_spec, q_spec) = net.specified_injections();
    let mut node_features = Vec::with_capacity(n);
    for bus in &net.buses {
        let i = bus.id;
        let (p, q, v_init, t_init, flags) = match bus.kind {
            BusKind::Slack => (
                0.0,
                0.0,
                bus.v_setpoint,
                bus.theta_setpoint,
                [0.0, 0.0, 1.0],
            ),
            BusKind::Pv => (p_spec[i], 0.0, bus.v_setpoint, 0.0, [0.0, 1.0, 0.0]),
            BusKind::Pq => (p_spec[i], q_spec[i], 1.0, 0.0, [1.0, 0.0, 0.0]),
        };
        node_features.push(vec![p, q, v_init, t_init, flags[0], flags[1], flags[2]]);
    }
    let ybus = build_ybus(net)?;
    let mut edge_list = Vec::new();
    let mut edge_features = Vec::new();
    for br in net.branches.iter().filter(|b| b.in_service) {
        for (i, j) in [(br.from_bus, br.to_bus), (br.to_bus, br.from_bus)] {
            edge_list.push((i, j));
            let (g, b) = ybus.get(i, j).unwrap_or((0.0, 0.0));
            edge_features.push(((g * g + b * b).sqrt(), b.atan2(g)));
        }
    }
    let targets = (0..n).map(|i| (sol.state.v[i], sol.state.theta[i])).collect();
    Ok(GraphSample {
        node_features,
        edge_list,
        edge_features: Some(edge_features),
        targets,
        scenario_id,
        topology_perturbed,
    })
}

/// Outcome of attempting one scenario counter. Pure function of
/// (base network, config, counter), so counters can run in parallel.
fn attempt_scenario(
    base: &Network,
    cfg: &ScenarioConfig,
    counter: u64,
) -> Result<Option<GraphSample>, ScenarioError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, counter));
    let perturb_topology = rng.gen_bool(cfg.topology_fraction);
    let mut net = perturb_loads(base, &mut rng, cfg.load_range);
    if perturb_topology {
        match sample_topology_perturbation(&net, &mut rng, cfg.tap_step, cfg.tap_max_steps) {
            Ok(n) => net = n,
            Err(ScenarioError::NoRemovableBranch) => return Ok(None),
            Err(e) => return Err(e),
        }
    }
    let ybus = build_ybus(&net)?;
    let sol = match nr_solve(&net, &ybus, &SolveOptions::default(), None) {
        Ok(s) => s,
        Err(crate::pf::PfError::SingularJacobian { .. }) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    if !sol.converged {
        return Ok(None);
    }
    // feasibility band on voltage magnitudes
    if sol.state.v.iter().any(|&v| !(0.8..1.2).contains(&v)) {
        return Ok(None);
    }
    Ok(Some(build_graph_sample(&net, &sol, counter, perturb_topology)?))
}

/// Repeatedly draws scenarios until `cfg.samples` converged, in-band samples
/// are collected. Samples are ordered by scenario counter, so serial and
/// parallel runs produce identical datasets. Aborts if more than half of a
/// 1000-scenario window is discarded.
pub fn generate_dataset(
    base: &Network,
    cfg: &ScenarioConfig,
    workers: usize,
) -> Result<Dataset, ScenarioError> {
    cfg.validate()?;
    {
        let ybus = build_ybus(base)?;
        let sol = nr_solve(base, &ybus, &SolveOptions::default(), None)?;
        if !sol.converged {
            return Err(ScenarioError::BaseCaseInfeasible);
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool");
    let mut samples = Vec::with_capacity(cfg.samples);
    let mut discards = 0usize;
    let mut window_discards = 0usize;
    let mut window_attempts = 0usize;
    let mut counter: u64 = 0;
    const CHUNK: u64 = 64;
    while samples.len() < cfg.samples {
        let range: Vec<u64> = (counter..counter + CHUNK).collect();
        let results: Vec<Result<Option<GraphSample>, ScenarioError>> = pool.install(|| {
            use rayon::prelude::*;
            range.par_iter().map(|&c| attempt_scenario(base, cfg, c)).collect()
        });
        for res in results {
            let outcome = res?;
            window_attempts += 1;
            match outcome {
                Some(sample) if samples.len() < cfg.samples => samples.push(sample),
                Some(_) => {}
                None => {
                    discards += 1;
                    window_discards += 1;
                }
            }
            if window_attempts == 1000 {
                if window_discards > 500 {
                    return Err(ScenarioError::ExcessiveDiscards {
                        discards: window_discards,
                        window: 1000,
                    });
                }
                window_attempts = 0;
                window_discards = 0;
            }
        }
        counter += CHUNK;
    }
    Ok(Dataset {
        samples,
        norm_stats: None,
        split_assignment: Vec::new(),
        config: cfg.clone(),
        discard_count: discards,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::two_bus_network;

    fn ieee30() -> Network {
        crate::grid::parse_matpower_case(include_str!("../../cases/ieee30.m")).unwrap()
    }

    #[test]
    fn boundary_multiplier() {
        // epsilon forced to +0.4 by a degenerate range
        let mut net = two_bus_network(0.0, 0.1, 0.10, 0.0);
        net.buses[1].p_demand = 0.10;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = perturb_loads(&net, &mut rng, (0.4, 0.4));
        assert!((out.buses[1].p_demand - 0.14).abs() < 1e-15);
    }

    #[test]
    fn zero_range_is_identity() {
        let net = ieee30();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = perturb_loads(&net, &mut rng, (0.0, 0.0));
        assert_eq!(out, net);
    }

    #[test]
    fn perturbation_draws_match_uniform_moments() {
        let net = two_bus_network(0.0, 0.1, 1.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut sum = 0.0;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let n = 100_000;
        for _ in 0..n {
            let out = perturb_loads(&net, &mut rng, (-0.4, 0.4));
            let eps = out.buses[1].p_demand - 1.0;
            sum += eps;
            lo = lo.min(eps);
            hi = hi.max(eps);
        }
        let mean = sum / n as f64;
        assert!(mean.abs() < 0.005, "mean {mean}");
        assert!(lo >= -0.4 && hi <= 0.4);
    }

    #[test]
    fn bridge_only_network_cannot_lose_a_line() {
        let net = two_bus_network(0.0, 0.1, 0.1, 0.0);
        // force the line-outage arm by having no transformers
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let res = sample_topology_perturbation(&net, &mut rng, 0.0125, 2);
        assert!(matches!(res, Err(ScenarioError::NoRemovableBranch)));
    }

    #[test]
    fn outages_keep_ieee30_connected() {
        let net = ieee30();
        for s in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let out = sample_topology_perturbation(&net, &mut rng, 0.0125, 2).unwrap();
            assert!(check_connectivity(&out).is_connected());
        }
    }

    #[test]
    fn tap_shift_arithmetic() {
        let mut net = ieee30();
        // make the draw deterministic: single transformer, k range {+1}
        for b in net.branches.iter_mut() {
            if b.tap != 1.0 {
                b.tap = 1.0;
            }
        }
        net.branches[10].tap = 1.0 + f64::EPSILON; // mark as transformer
        let reference = net.branches[10].tap;
        let mut hits = 0;
        for s in 0..200u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let out = sample_topology_perturbation(&net, &mut rng, 0.0125, 2).unwrap();
            let tap = out.branches[10].tap;
            if tap != reference {
                let k = (tap - reference) / 0.0125;
                let k_round = k.round();
                assert!((k - k_round).abs() < 1e-9);
                assert!(matches!(k_round as i64, -2 | -1 | 1 | 2), "k {k_round}");
                hits += 1;
            }
        }
        assert!(hits > 0);
    }

    #[test]
    fn ieee30_sample_shapes() {
        let net = ieee30();
        let ybus = build_ybus(&net).unwrap();
        let sol = nr_solve(&net, &ybus, &SolveOptions::default(), None).unwrap();
        let s = build_graph_sample(&net, &sol, 0, false).unwrap();
        assert_eq!(s.node_features.len(), 30);
        assert_eq!(s.node_features[0].len(), NODE_FEATURES);
        assert_eq!(s.edge_list.len(), 82);
        // every edge appears with its reverse
        for &(a, b) in &s.edge_list {
            assert!(s.edge_list.contains(&(b, a)));
        }
        // slack row encoding
        let slack = net.slack_index().unwrap();
        let row = &s.node_features[slack];
        assert_eq!(&row[4..7], &[0.0, 0.0, 1.0]);
        assert_eq!(row[2], net.buses[slack].v_setpoint);
        assert_eq!(row[3], net.buses[slack].theta_setpoint);
        // PQ rows start flat
        for bus in &net.buses {
            if bus.kind == BusKind::Pq {
                assert_eq!(s.node_features[bus.id][2], 1.0);
                assert_eq!(s.node_features[bus.id][3], 0.0);
            }
        }
        // one-hot flags exclusive
        for row in &s.node_features {
            let sum: f64 = row[4..7].iter().sum();
            assert_eq!(sum, 1.0);
        }
    }

    #[test]
    fn non_converged_solution_rejected() {
        let net = two_bus_network(0.0, 0.1, 10.0, 0.0);
        let ybus = build_ybus(&net).unwrap();
        let sol = nr_solve(&net, &ybus, &SolveOptions::default(), None).unwrap();
        assert!(!sol.converged);
        assert!(build_graph_sample(&net, &sol, 0, false).is_err());
    }

    #[test]
    fn small_generation_run_is_deterministic() {
        let net = ieee30();
        let cfg = ScenarioConfig {
            samples: 20,
            seed: 7,
            ..Default::default()
        };
        let a = generate_dataset(&net, &cfg, 1).unwrap();
        let b = generate_dataset(&net, &cfg, 4).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.discard_count, b.discard_count);
        assert_eq!(a.samples.len(), 20);
        assert!(a.samples.iter().all(|s| {
            s.targets.iter().all(|&(v, _)| (0.8..1.2).contains(&v))
        }));
    }
}
