//! Newton-Raphson AC power-flow solver: the physics oracle that produces
//! ground-truth voltage labels.

mod linear;

pub use linear::{lu_solve, LinearError};

use crate::grid::{AdmittanceMatrix, BusKind, Network};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PfError {
    #[error("network is disconnected: slack component covers {0} of {1} buses")]
    Disconnected(usize, usize),
    #[error("singular Jacobian at iteration {iteration}")]
    SingularJacobian { iteration: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Bus voltage magnitudes (p.u.) and angles (radians).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageState {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
}

impl VoltageState {
    /// Flat start: all magnitudes 1.0 and angles 0, except setpoints at
    /// slack (V, theta) and PV (V) buses.
    pub fn flat_start(net: &Network) -> Self {
        let n = net.n_buses();
        let mut v = vec![1.0; n];
        let mut theta = vec![0.0; n];
        for b in &net.buses {
            match b.kind {
                BusKind::Slack => {
                    v[b.id] = b.v_setpoint;
                    theta[b.id] = b.theta_setpoint;
                }
                BusKind::Pv => v[b.id] = b.v_setpoint,
                BusKind::Pq => {}
            }
        }
        Self { v, theta }
    }
}

/// Computed net injections P, Q per bus: the real and imaginary parts of the
/// complex power injected at each bus.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionVector {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

/// P_i = sum_j |V_i||V_j|(G_ij cos t_ij + B_ij sin t_ij),
/// Q_i = sum_j |V_i||V_j|(G_ij sin t_ij - B_ij cos t_ij),
/// summing only over the stored sparse pattern.
pub fn compute_injections(ybus: &AdmittanceMatrix, state: &VoltageState) -> InjectionVector {
    let n = ybus.n;
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for i in 0..n {
        let vi = state.v[i];
        let ti = state.theta[i];
        let (mut pi, mut qi) = (0.0, 0.0);
        for (j, g, b) in ybus.row(i) {
            let tij = ti - state.theta[j];
            let (s, c) = tij.sin_cos();
            let w = vi * state.v[j];
            pi += w * (g * c + b * s);
            qi += w * (g * s - b * c);
        }
        p[i] = pi;
        q[i] = qi;
    }
    InjectionVector { p, q }
}

/// Unknown-variable bookkeeping: angles at every non-slack bus, magnitudes at
/// PQ buses, both in ascending bus index.
#[derive(Debug, Clone)]
pub struct UnknownIndex {
    pub theta_buses: Vec<usize>,
    pub v_buses: Vec<usize>,
}

impl UnknownIndex {
    pub fn new(kinds: &[BusKind]) -> Self {
        let theta_buses = (0..kinds.len())
            .filter(|&i| kinds[i] != BusKind::Slack)
            .collect();
        let v_buses = (0..kinds.len())
            .filter(|&i| kinds[i] == BusKind::Pq)
            .collect();
        Self {
            theta_buses,
            v_buses,
        }
    }

    pub fn dim(&self) -> usize {
        self.theta_buses.len() + self.v_buses.len()
    }
}

/// Mismatch vector: specified minus computed injections, ordered as all
/// non-slack dP (ascending bus index) then PQ-bus dQ (ascending bus index).
pub fn compute_mismatch(
    net: &Network,
    ybus: &AdmittanceMatrix,
    state: &VoltageState,
) -> Vec<f64> {
    let kinds: Vec<BusKind> = net.buses.iter().map(|b| b.kind).collect();
    let idx = UnknownIndex::new(&kinds);
    let (p_spec, q_spec) = net.specified_injections();
    let inj = compute_injections(ybus, state);
    let mut out = Vec::with_capacity(idx.dim());
    for &i in &idx.theta_buses {
        out.push(p_spec[i] - inj.p[i]);
    }
    for &i in &idx.v_buses {
        out.push(q_spec[i] - inj.q[i]);
    }
    out
}

/// Four-block power-flow Jacobian restricted to the unknowns, stored dense
/// row-major (the factorization is dense at desk scale).
#[derive(Debug, Clone)]
pub struct Jacobian {
    pub dim: usize,
    pub data: Vec<f64>,
    pub index: UnknownIndex,
}

/// Analytic partials of the injection equations with respect to theta and |V|.
pub fn build_jacobian(
    ybus: &AdmittanceMatrix,
    state: &VoltageState,
    kinds: &[BusKind],
) -> Jacobian {
    let n = ybus.n;
    let idx = UnknownIndex::new(kinds);
    let dim = idx.dim();
    let nt = idx.theta_buses.len();
    let mut col_theta = vec![usize::MAX; n];
    let mut col_v = vec![usize::MAX; n];
    for (c, &i) in idx.theta_buses.iter().enumerate() {
        col_theta[i] = c;
    }
    for (c, &i) in idx.v_buses.iter().enumerate() {
        col_v[i] = nt + c;
    }
    let inj = compute_injections(ybus, state);
    let mut data = vec![0.0; dim * dim];

    let mut set = |row: usize, col: usize, val: f64| {
        data[row * dim + col] = val;
    };
    // rows: dP at theta_buses then dQ at v_buses
    for (r, &i) in idx.theta_buses.iter().enumerate() {
        let vi = state.v[i];
        for (j, g, b) in ybus.row(i) {
            let tij = state.theta[i] - state.theta[j];
            let (s, c) = tij.sin_cos();
            if j == i {
                // dP_i/dtheta_i = -Q_i - B_ii V_i^2
                set(r, col_theta[i], -inj.q[i] - b * vi * vi);
                if col_v[i] != usize::MAX {
                    // dP_i/dV_i = P_i/V_i + G_ii V_i
                    set(r, col_v[i], inj.p[i] / vi + g * vi);
                }
            } else {
                let w = vi * state.v[j];
                if col_theta[j] != usize::MAX {
                    set(r, col_theta[j], w * (g * s - b * c));
                }
                if col_v[j] != usize::MAX {
                    set(r, col_v[j], vi * (g * c + b * s));
                }
            }
        }
    }
    for (rq, &i) in idx.v_buses.iter().enumerate() {
        let r = nt + rq;
        let vi = state.v[i];
        for (j, g, b) in ybus.row(i) {
            let tij = state.theta[i] - state.theta[j];
            let (s, c) = tij.sin_cos();
            if j == i {
                // dQ_i/dtheta_i = P_i - G_ii V_i^2
                set(r, col_theta[i], inj.p[i] - g * vi * vi);
                // dQ_i/dV_i = Q_i/V_i - B_ii V_i
                set(r, col_v[i], inj.q[i] / vi - b * vi);
            } else {
                let w = vi * state.v[j];
                if col_theta[j] != usize::MAX {
                    set(r, col_theta[j], -w * (g * c + b * s));
                }
                if col_v[j] != usize::MAX {
                    set(r, col_v[j], vi * (g * s - b * c));
                }
            }
        }
    }
    Jacobian {
        dim,
        data,
        index: idx,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 50,
        }
    }
}

/// Converged state plus solver diagnostics; the ground-truth label record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PFSolution {
    pub state: VoltageState,
    pub iterations: usize,
    pub max_mismatch: f64,
    pub converged: bool,
    pub slack_p: f64,
    pub slack_q: f64,
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
}

/// Full Newton iteration from the given state (or flat start) with a dense-LU
/// correction solve. Non-convergence at the iteration cap is a result, not an
/// error. Any |V| leaving (0.2, 5.0) aborts as non-converged to keep
/// infeasible scenarios from overflowing.
pub fn nr_solve(
    net: &Network,
    ybus: &AdmittanceMatrix,
    options: &SolveOptions,
    initial: Option<VoltageState>,
) -> Result<PFSolution, PfError> {
    let n = net.n_buses();
    let conn = crate::grid::check_connectivity(net);
    if !conn.is_connected() {
        let covered = conn
            .slack_component
            .map(|c| conn.components[c].len())
            .unwrap_or(0);
        return Err(PfError::Disconnected(covered, n));
    }
    let kinds: Vec<BusKind> = net.buses.iter().map(|b| b.kind).collect();
    let idx = UnknownIndex::new(&kinds);
    let mut state = initial.unwrap_or_else(|| VoltageState::flat_start(net));
    if state.v.len() != n || state.theta.len() != n {
        return Err(PfError::Dimension(format!(
            "initial state has {} buses, network has {n}",
            state.v.len()
        )));
    }

    let mut mismatch = compute_mismatch(net, ybus, &state);
    let mut worst = max_abs(&mismatch);
    let mut iterations = 0;
    let mut converged = worst <= options.tolerance;
    while !converged && iterations < options.max_iterations {
        let jac = build_jacobian(ybus, &state, &kinds);
        let mut a = jac.data;
        let dx = lu_solve(&mut a, jac.dim, &mismatch).map_err(|_| PfError::SingularJacobian {
            iteration: iterations + 1,
        })?;
        for (c, &i) in idx.theta_buses.iter().enumerate() {
            state.theta[i] += dx[c];
        }
        let nt = idx.theta_buses.len();
        for (c, &i) in idx.v_buses.iter().enumerate() {
            state.v[i] += dx[nt + c];
        }
        iterations += 1;
        if state.v.iter().any(|&v| !(0.2..5.0).contains(&v) || !v.is_finite()) {
            return Ok(PFSolution {
                state,
                iterations,
                max_mismatch: f64::INFINITY,
                converged: false,
                slack_p: 0.0,
                slack_q: 0.0,
            });
        }
        mismatch = compute_mismatch(net, ybus, &state);
        worst = max_abs(&mismatch);
        converged = worst <= options.tolerance;
    }

    let inj = compute_injections(ybus, &state);
    let slack = net.slack_index().expect("validated network has a slack");
    Ok(PFSolution {
        state,
        iterations,
        max_mismatch: worst,
        converged,
        slack_p: inj.p[slack],
        slack_q: inj.q[slack],
    })
}

/// Total branch active losses computed directly from branch flows; used to
/// cross-check slack recovery against generation-demand balance.
pub fn total_branch_losses(net: &Network, state: &VoltageState) -> f64 {
    let mut loss = 0.0;
    for br in net.branches.iter().filter(|b| b.in_service) {
        let denom = br.r * br.r + br.x * br.x;
        let ys_g = br.r / denom;
        let ys_b = -br.x / denom;
        let (i, j) = (br.from_bus, br.to_bus);
        // complex voltages; from-side behind the tap
        let vi = state.v[i];
        let vj = state.v[j];
        let ti = state.theta[i] - br.shift;
        let tj = state.theta[j];
        let (vix, viy) = (vi * ti.cos() / br.tap, vi * ti.sin() / br.tap);
        let (vjx, vjy) = (vj * tj.cos(), vj * tj.sin());
        // series current and loss = |I|^2 * r over the series element
        let dx = vix - vjx;
        let dy = viy - vjy;
        let ix = ys_g * dx - ys_b * dy;
        let iy = ys_g * dy + ys_b * dx;
        let i2 = ix * ix + iy * iy;
        loss += i2 * br.r;
        // shunt conductance losses are counted below via bus shunts
        let _ = j;
    }
    for b in &net.buses {
        loss += b.shunt_g * state.v[b.id] * state.v[b.id];
    }
    loss
}
