//! Network data model: buses, branches, generators, the bus admittance
//! matrix, and connectivity checks.

mod matpower;

pub use matpower::{parse_matpower_case, serialize_matpower_case};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("validation error: {0}")]
    Validation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BusKind {
    Slack,
    Pv,
    Pq,
}

/// One bus. Demands, shunts and setpoints are in per unit on the system base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    /// 0-based internal index.
    pub id: usize,
    /// Original id from the case file, kept for reporting.
    pub original_id: usize,
    pub kind: BusKind,
    pub p_demand: f64,
    pub q_demand: f64,
    /// Voltage magnitude setpoint, meaningful for Slack and PV buses.
    pub v_setpoint: f64,
    /// Voltage angle setpoint in radians, meaningful for the Slack bus.
    pub theta_setpoint: f64,
    pub shunt_g: f64,
    pub shunt_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from_bus: usize,
    pub to_bus: usize,
    pub r: f64,
    pub x: f64,
    /// Total line charging susceptance.
    pub b_charging: f64,
    /// Off-nominal tap ratio, 1.0 if none.
    pub tap: f64,
    /// Phase shift in radians.
    pub shift: f64,
    pub in_service: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub bus: usize,
    pub p_gen: f64,
    pub q_gen: f64,
    pub v_setpoint: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub generators: Vec<Generator>,
    pub base_mva: f64,
}

impl Network {
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn slack_index(&self) -> Option<usize> {
        self.buses.iter().position(|b| b.kind == BusKind::Slack)
    }

    /// Specified net injections (generation minus demand), per bus, p.u.
    /// Slack P/Q and PV Q are free variables; the returned values there are
    /// still generation minus demand but only the constrained entries are
    /// meaningful to a solver.
    pub fn specified_injections(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.n_buses();
        let mut p = vec![0.0; n];
        let mut q = vec![0.0; n];
        for b in &self.buses {
            p[b.id] -= b.p_demand;
            q[b.id] -= b.q_demand;
        }
        for g in &self.generators {
            p[g.bus] += g.p_gen;
            q[g.bus] += g.q_gen;
        }
        (p, q)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        let slacks = self
            .buses
            .iter()
            .filter(|b| b.kind == BusKind::Slack)
            .count();
        if slacks != 1 {
            return Err(GridError::Validation(format!(
                "expected exactly one slack bus, found {slacks}"
            )));
        }
        for b in &self.buses {
            if matches!(b.kind, BusKind::Slack | BusKind::Pv) && b.v_setpoint <= 0.0 {
                return Err(GridError::Validation(format!(
                    "bus {} has non-positive voltage setpoint",
                    b.original_id
                )));
            }
        }
        for br in &self.branches {
            if br.from_bus >= self.n_buses() || br.to_bus >= self.n_buses() {
                return Err(GridError::Validation(format!(
                    "branch {}-{} references a missing bus",
                    br.from_bus, br.to_bus
                )));
            }
            if br.r * br.r + br.x * br.x == 0.0 {
                return Err(GridError::Validation(format!(
                    "branch {}-{} has zero impedance",
                    br.from_bus, br.to_bus
                )));
            }
            if br.tap <= 0.0 {
                return Err(GridError::Validation(format!(
                    "branch {}-{} has non-positive tap",
                    br.from_bus, br.to_bus
                )));
            }
        }
        Ok(())
    }
}

/// Sparse complex bus admittance matrix Y = G + jB in row-compressed form.
/// The sparsity pattern is structurally symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub g: Vec<f64>,
    pub b: Vec<f64>,
}

impl AdmittanceMatrix {
    /// Iterates (column, G, B) over one row's stored entries.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        (lo..hi).map(move |k| (self.col_idx[k], self.g[k], self.b[k]))
    }

    pub fn get(&self, i: usize, j: usize) -> Option<(f64, f64)> {
        self.row(i).find(|&(c, _, _)| c == j).map(|(_, g, b)| (g, b))
    }

    pub fn to_dense(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut g = vec![vec![0.0; self.n]; self.n];
        let mut b = vec![vec![0.0; self.n]; self.n];
        for i in 0..self.n {
            for (j, gij, bij) in self.row(i) {
                g[i][j] = gij;
                b[i][j] = bij;
            }
        }
        (g, b)
    }
}

/// Standard pi-model assembly of the bus admittance matrix. Only in-service
/// branches contribute; parallel branches sum; bus shunts land on the
/// diagonal. Accumulation follows branch-list order so results are
/// bit-reproducible.
pub fn build_ybus(net: &Network) -> Result<AdmittanceMatrix, GridError> {
    let n = net.n_buses();
    // Dense accumulation keyed (row, col); desk scale keeps N small.
    let mut entries: std::collections::BTreeMap<(usize, usize), (f64, f64)> =
        std::collections::BTreeMap::new();
    let mut acc = |i: usize, j: usize, g: f64, b: f64| {
        let e = entries.entry((i, j)).or_insert((0.0, 0.0));
        e.0 += g;
        e.1 += b;
    };
    for bus in &net.buses {
        acc(bus.id, bus.id, bus.shunt_g, bus.shunt_b);
    }
    for br in &net.branches {
        if !br.in_service {
            continue;
        }
        let denom = br.r * br.r + br.x * br.x;
        if denom == 0.0 {
            return Err(GridError::Validation(format!(
                "branch {}-{} has zero impedance",
                br.from_bus, br.to_bus
            )));
        }
        // series admittance y = 1/(r + jx)
        let ys_g = br.r / denom;
        let ys_b = -br.x / denom;
        let bc2 = br.b_charging / 2.0;
        let t2 = br.tap * br.tap;
        let (cs, sn) = (br.shift.cos(), br.shift.sin());
        let (i, j) = (br.from_bus, br.to_bus);
        // from-side diagonal: y/t^2 + j*bc/2
        acc(i, i, ys_g / t2, ys_b / t2 + bc2);
        // to-side diagonal: y + j*bc/2
        acc(j, j, ys_g, ys_b + bc2);
        // off-diagonals: -y / (t e^{-js}) and -y / (t e^{+js})
        // 1/e^{-js} = cos s + j sin s ; 1/e^{+js} = cos s - j sin s
        acc(
            i,
            j,
            -(ys_g * cs - ys_b * sn) / br.tap,
            -(ys_b * cs + ys_g * sn) / br.tap,
        );
        acc(
            j,
            i,
            -(ys_g * cs + ys_b * sn) / br.tap,
            -(ys_b * cs - ys_g * sn) / br.tap,
        );
    }
    // Structural symmetry: make sure (j,i) exists whenever (i,j) does.
    let keys: Vec<(usize, usize)> = entries.keys().copied().collect();
    for (i, j) in keys {
        entries.entry((j, i)).or_insert((0.0, 0.0));
    }

    let mut row_ptr = vec![0usize; n + 1];
    let mut col_idx = Vec::with_capacity(entries.len());
    let mut g = Vec::with_capacity(entries.len());
    let mut b = Vec::with_capacity(entries.len());
    for (&(i, j), &(gij, bij)) in &entries {
        row_ptr[i + 1] += 1;
        col_idx.push(j);
        g.push(gij);
        b.push(bij);
    }
    for i in 0..n {
        row_ptr[i + 1] += row_ptr[i];
    }
    Ok(AdmittanceMatrix {
        n,
        row_ptr,
        col_idx,
        g,
        b,
    })
}

/// Result of a connectivity sweep over in-service branches.
#[derive(Debug, Clone, PartialEq)]
pub struct Connectivity {
    /// Bus indices grouped by component, each sorted ascending.
    pub components: Vec<Vec<usize>>,
    /// Index into `components` of the component containing the slack bus,
    /// if the network has one.
    pub slack_component: Option<usize>,
}

impl Connectivity {
    pub fn is_connected(&self) -> bool {
        self.components.len() == 1
    }
}

/// Partitions buses into connected components using in-service branches only.
pub fn check_connectivity(net: &Network) -> Connectivity {
    let n = net.n_buses();
    let mut adj = vec![Vec::new(); n];
    for br in net.branches.iter().filter(|b| b.in_service) {
        adj[br.from_bus].push(br.to_bus);
        adj[br.to_bus].push(br.from_bus);
    }
    let mut comp = vec![usize::MAX; n];
    let mut components = Vec::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let cid = components.len();
        let mut member = vec![start];
        comp[start] = cid;
        let mut queue = std::collections::VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if comp[v] == usize::MAX {
                    comp[v] = cid;
                    member.push(v);
                    queue.push_back(v);
                }
            }
        }
        member.sort_unstable();
        components.push(member);
    }
    let slack_component = net.slack_index().map(|s| comp[s]);
    Connectivity {
        components,
        slack_component,
    }
}

/// Builds the minimal network used across tests and docs: one slack bus,
/// one PQ bus, one branch.
pub fn two_bus_network(r: f64, x: f64, p_demand: f64, q_demand: f64) -> Network {
    Network {
        buses: vec![
            Bus {
                id: 0,
                original_id: 1,
                kind: BusKind::Slack,
                p_demand: 0.0,
                q_demand: 0.0,
                v_setpoint: 1.0,
                theta_setpoint: 0.0,
                shunt_g: 0.0,
                shunt_b: 0.0,
            },
            Bus {
                id: 1,
                original_id: 2,
                kind: BusKind::Pq,
                p_demand,
                q_demand,
                v_setpoint: 1.0,
                theta_setpoint: 0.0,
                shunt_g: 0.0,
                shunt_b: 0.0,
            },
        ],
        branches: vec![Branch {
            from_bus: 0,
            to_bus: 1,
            r,
            x,
            b_charging: 0.0,
            tap: 1.0,
            shift: 0.0,
            in_service: true,
        }],
        generators: vec![],
        base_mva: 100.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_bus_ybus_matches_hand_evaluation() {
        // r=0, x=0.1: y = 1/(j0.1) = -j10, so B11=B22=-10, B12=B21=+10.
        let net = two_bus_network(0.0, 0.1, 0.0, 0.0);
        let y = build_ybus(&net).unwrap();
        for ((i, j), want_b) in [((0, 0), -10.0), ((1, 1), -10.0), ((0, 1), 10.0), ((1, 0), 10.0)]
        {
            let (g, b) = y.get(i, j).expect("structural entry");
            assert_eq!(g, 0.0);
            assert!((b - want_b).abs() < 1e-12, "B[{i}][{j}] = {b}");
        }
    }

    #[test]
    fn zero_branch_network_is_diagonal_of_shunts() {
        let mut net = two_bus_network(0.0, 0.1, 0.0, 0.0);
        net.branches.clear();
        net.buses[0].shunt_g = 0.5;
        net.buses[1].shunt_b = -0.25;
        let y = build_ybus(&net).unwrap();
        assert_eq!(y.get(0, 0), Some((0.5, 0.0)));
        assert_eq!(y.get(1, 1), Some((0.0, -0.25)));
        assert_eq!(y.get(0, 1), None);
    }

    #[test]
    fn zero_impedance_branch_rejected() {
        let net = two_bus_network(0.0, 0.0, 0.0, 0.0);
        assert!(build_ybus(&net).is_err());
    }

    #[test]
    fn assembly_is_order_independent_in_value() {
        let mut net = two_bus_network(0.01, 0.1, 0.0, 0.0);
        net.branches.push(Branch {
            from_bus: 0,
            to_bus: 1,
            r: 0.02,
            x: 0.2,
            b_charging: 0.04,
            tap: 1.0,
            shift: 0.0,
            in_service: true,
        });
        let y1 = build_ybus(&net).unwrap();
        net.branches.reverse();
        let y2 = build_ybus(&net).unwrap();
        let (g1, b1) = y1.to_dense();
        let (g2, b2) = y2.to_dense();
        for i in 0..2 {
            for j in 0..2 {
                assert!((g1[i][j] - g2[i][j]).abs() < 1e-15);
                assert!((b1[i][j] - b2[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn symmetric_without_taps_and_shifts() {
        let net = two_bus_network(0.05, 0.2, 0.0, 0.0);
        let y = build_ybus(&net).unwrap();
        assert_eq!(y.get(0, 1), y.get(1, 0));
    }

    #[test]
    fn connectivity_splits_when_branch_out() {
        let mut net = two_bus_network(0.0, 0.1, 0.0, 0.0);
        net.branches[0].in_service = false;
        let c = check_connectivity(&net);
        assert_eq!(c.components.len(), 2);
        assert_eq!(c.slack_component, Some(0));
    }

    #[test]
    fn connectivity_intact() {
        let net = two_bus_network(0.0, 0.1, 0.0, 0.0);
        let c = check_connectivity(&net);
        assert!(c.is_connected());
        assert_eq!(c.components[0], vec![0, 1]);
    }
}
