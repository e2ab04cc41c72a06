//! Gated graph network: a learned input projection, T rounds of neighbor
//! message aggregation with a shared weight and GRU-gated state updates, and
//! a per-node readout MLP.
//!
//! Node states live in row vectors, so a gate written on paper as
//! `W z + U h` is computed as `m * W + h * U` with the stored matrices being
//! the transpose of the column-vector convention. The gating algebra is
//! unchanged:
//!
//!   z = sigmoid(m W_z + h U_z + b_z)
//!   r = sigmoid(m W_r + h U_r + b_r)
//!   c = tanh(m W_h + (r . h) U_h + b_h)
//!   h' = z . h + (1 - z) . c

use super::{glorot, normalized_features, Mode, Model, ModelError, ModelSpec};
use crate::autodiff::{NodeId, Tape, Tensor};
use crate::scenario::{GraphSample, NormStats, NODE_FEATURES};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// Readout hidden width.
const READOUT_HIDDEN: usize = 64;

#[derive(Debug, Clone)]
pub struct GgnnModel {
    /// Message-passing rounds (>= 1).
    pub t: usize,
    /// Hidden state width.
    pub h: usize,
    /// Dropout rate on the readout hidden layer, train mode only.
    pub dropout: f64,
    /// When set, messages are scaled by |Y_ij| from the sample's edge features.
    pub edge_weights: bool,
}

impl Default for GgnnModel {
    fn default() -> Self {
        Self {
            t: 8,
            h: 32,
            dropout: 0.1,
            edge_weights: false,
        }
    }
}

/// Indices into the flat parameter list.
pub(crate) mod p {
    pub const W_IN: usize = 0;
    pub const B_IN: usize = 1;
    pub const W_M: usize = 2;
    pub const W_Z: usize = 3;
    pub const U_Z: usize = 4;
    pub const B_Z: usize = 5;
    pub const W_R: usize = 6;
    pub const U_R: usize = 7;
    pub const B_R: usize = 8;
    pub const W_H: usize = 9;
    pub const U_H: usize = 10;
    pub const B_H: usize = 11;
    pub const W_RO1: usize = 12;
    pub const B_RO1: usize = 13;
    pub const W_RO2: usize = 14;
    pub const B_RO2: usize = 15;
}

impl GgnnModel {
    /// h0 = tanh(X W_in + b_in)
    pub fn init_hidden(
        &self,
        tape: &mut Tape,
        params: &[NodeId],
        features: NodeId,
    ) -> Result<NodeId, ModelError> {
        let proj = tape.matmul(features, params[p::W_IN])?;
        let biased = tape.add_row(proj, params[p::B_IN])?;
        Ok(tape.tanh(biased))
    }

    /// m_i = sum_{j in N(i)} W_m h_j, as a shared linear map followed by a
    /// neighbor-sum over the bidirectional edge list.
    pub fn aggregate_messages(
        &self,
        tape: &mut Tape,
        params: &[NodeId],
        hidden: NodeId,
        edges: Arc<Vec<(usize, usize)>>,
        weights: Option<Arc<Vec<f64>>>,
    ) -> Result<NodeId, ModelError> {
        let mapped = tape.matmul(hidden, params[p::W_M])?;
        Ok(tape.scatter_sum(mapped, edges, weights)?)
    }

    pub fn gru_update(
        &self,
        tape: &mut Tape,
        params: &[NodeId],
        messages: NodeId,
        h_prev: NodeId,
    ) -> Result<NodeId, ModelError> {
        let gate = |tape: &mut Tape, w: usize, u: usize, b: usize, state: NodeId| {
            let a = tape.matmul(messages, params[w])?;
            let c = tape.matmul(state, params[u])?;
            let s = tape.add(a, c)?;
            tape.add_row(s, params[b])
        };
        let z_pre = gate(tape, p::W_Z, p::U_Z, p::B_Z, h_prev)?;
        let z = tape.sigmoid(z_pre);
        let r_pre = gate(tape, p::W_R, p::U_R, p::B_R, h_prev)?;
        let r = tape.sigmoid(r_pre);
        let gated_state = tape.mul(r, h_prev)?;
        let c_pre = gate(tape, p::W_H, p::U_H, p::B_H, gated_state)?;
        let candidate = tape.tanh(c_pre);
        // h' = z . h_prev + (1 - z) . c == z . h_prev + c - z . c
        let keep = tape.mul(z, h_prev)?;
        let zc = tape.mul(z, candidate)?;
        let add = tape.add(keep, candidate)?;
        Ok(tape.sub(add, zc)?)
    }

    fn readout(
        &self,
        tape: &mut Tape,
        params: &[NodeId],
        hidden: NodeId,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId, ModelError> {
        let pre = tape.matmul(hidden, params[p::W_RO1])?;
        let pre = tape.add_row(pre, params[p::B_RO1])?;
        let mut act = tape.tanh(pre);
        if mode == Mode::Train && self.dropout > 0.0 {
            act = tape.dropout(act, self.dropout, rng)?;
        }
        let out = tape.matmul(act, params[p::W_RO2])?;
        Ok(tape.add_row(out, params[p::B_RO2])?)
    }
}

impl Model for GgnnModel {
    fn spec(&self) -> ModelSpec {
        ModelSpec::Ggnn {
            t: self.t,
            h: self.h,
            dropout: self.dropout,
            edge_weights: self.edge_weights,
        }
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        let h = self.h;
        vec![
            vec![NODE_FEATURES, h],
            vec![1, h],
            vec![h, h],
            vec![h, h],
            vec![h, h],
            vec![1, h],
            vec![h, h],
            vec![h, h],
            vec![1, h],
            vec![h, h],
            vec![h, h],
            vec![1, h],
            vec![h, READOUT_HIDDEN],
            vec![1, READOUT_HIDDEN],
            vec![READOUT_HIDDEN, 2],
            vec![1, 2],
        ]
    }

    fn init_params(&self, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = self.param_shapes();
        let mut out = Vec::with_capacity(shapes.len());
        for (i, shape) in shapes.into_iter().enumerate() {
            if shape[0] == 1 {
                // biases: update gate starts at +1 so early training retains
                // state; all other biases start at zero
                let fill = if i == p::B_Z { 1.0 } else { 0.0 };
                out.push(Tensor::new(shape.clone(), vec![fill; shape[1]]));
            } else {
                out.push(glorot(&mut rng, shape[0], shape[1]));
            }
        }
        out
    }

    fn forward(
        &self,
        tape: &mut Tape,
        params: &[NodeId],
        sample: &GraphSample,
        norm: &NormStats,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId, ModelError> {
        assert!(self.t >= 1, "GGNN step count must be >= 1");
        let features = normalized_features(tape, sample, norm);
        let edges = Arc::new(sample.edge_list.clone());
        let weights = if self.edge_weights {
            let feats = sample.edge_features.as_ref().ok_or_else(|| {
                ModelError::Checkpoint("edge weights requested but sample has none".into())
            })?;
            Some(Arc::new(feats.iter().map(|&(m, _)| m).collect::<Vec<f64>>()))
        } else {
            None
        };
        let mut hidden = self.init_hidden(tape, params, features)?;
        for _ in 0..self.t {
            let messages =
                self.aggregate_messages(tape, params, hidden, edges.clone(), weights.clone())?;
            hidden = self.gru_update(tape, params, messages, hidden)?;
        }
        self.readout(tape, params, hidden, mode, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::model::{identity_norm, predict, Prediction};
    use rand::Rng;

    fn toy_sample(n: usize, edges: Vec<(usize, usize)>) -> GraphSample {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        GraphSample {
            node_features: (0..n)
                .map(|_| (0..NODE_FEATURES).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
            edge_list: edges,
            edge_features: None,
            targets: (0..n)
                .map(|_| (rng.gen_range(0.9..1.1), rng.gen_range(-0.3..0.3)))
                .collect(),
            scenario_id: 0,
            topology_perturbed: false,
        }
    }

    #[test]
    fn zero_projection_gives_zero_hidden() {
        let model = GgnnModel {
            t: 1,
            h: 4,
            dropout: 0.0,
            edge_weights: false,
        };
        let mut params = model.init_params(1);
        params[p::W_IN] = Tensor::zeros(vec![NODE_FEATURES, 4]);
        params[p::B_IN] = Tensor::zeros(vec![1, 4]);
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = params.iter().map(|t| tape.param(t.clone())).collect();
        let sample = toy_sample(3, vec![(0, 1), (1, 0)]);
        let features = normalized_features(&mut tape, &sample, &identity_norm());
        let h0 = model.init_hidden(&mut tape, &ids, features).unwrap();
        assert!(tape.value(h0).data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn hidden_state_inside_tanh_range() {
        let model = GgnnModel {
            t: 1,
            h: 8,
            dropout: 0.0,
            edge_weights: false,
        };
        let params = model.init_params(3);
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = params.iter().map(|t| tape.param(t.clone())).collect();
        let sample = toy_sample(4, vec![(0, 1), (1, 0), (1, 2), (2, 1), (2, 3), (3, 2)]);
        let features = normalized_features(&mut tape, &sample, &identity_norm());
        let h0 = model.init_hidden(&mut tape, &ids, features).unwrap();
        assert!(tape.value(h0).data.iter().all(|&x| (-1.0..1.0).contains(&x)));
    }

    #[test]
    fn isolated_node_gets_zero_message() {
        let model = GgnnModel {
            t: 1,
            h: 4,
            dropout: 0.0,
            edge_weights: false,
        };
        let params = model.init_params(5);
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = params.iter().map(|t| tape.param(t.clone())).collect();
        let hidden = tape.param(Tensor::matrix(1, 4, vec![0.5, -0.5, 1.0, 2.0]));
        let m = model
            .aggregate_messages(&mut tape, &ids, hidden, Arc::new(vec![]), None)
            .unwrap();
        assert!(tape.value(m).data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_message_weight_swaps_rows() {
        let model = GgnnModel {
            t: 1,
            h: 2,
            dropout: 0.0,
            edge_weights: false,
        };
        let mut params = model.init_params(5);
        params[p::W_M] = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = params.iter().map(|t| tape.param(t.clone())).collect();
        let hidden = tape.param(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let m = model
            .aggregate_messages(&mut tape, &ids, hidden, Arc::new(vec![(0, 1), (1, 0)]), None)
            .unwrap();
        assert_eq!(tape.value(m).data, vec![3.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn triangle_messages_match_brute_force() {
        let model = GgnnModel {
            t: 1,
            h: 3,
            dropout: 0.0,
            edge_weights: false,
        };
        let params = model.init_params(11);
        let hidden = Tensor::matrix(3, 3, vec![0.1, 0.2, 0.3, -0.4, 0.5, -0.6, 0.7, -0.8, 0.9]);
        let edges = vec![(0, 1), (1, 0), (1, 2), (2, 1), (0, 2), (2, 0)];
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = params.iter().map(|t| tape.param(t.clone())).collect();
        let hid = tape.param(hidden.clone());
        let m = model
            .aggregate_messages(&mut tape, &ids, hid, Arc::new(edges.clone()), None)
            .unwrap();
        // brute force: transform each row by W_m, then sum in-neighbors
        let w = &params[p::W_M];
        let mut transformed = vec![vec![0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    transformed[i][j] += hidden.data[i * 3 + k] * w.data[k * 3 + j];
                }
            }
        }
        let mut expect = vec![vec![0.0; 3]; 3];
        for &(from, to) in &edges {
            for j in 0..3 {
                expect[to][j] += transformed[from][j];
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                assert!((tape.value(m).data[i * 3 + j] - expect[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gru_zero_fixed_point() {
        let model = GgnnModel {
            t: 1,
            h: 2,
            dropout: 0.0,
            edge_weights: false,
        };
        let mut params = model.init_params(1);
        params[p::B_Z] = Tensor::zeros(vec![1, 2]);
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = params.iter().map(|t| tape.param(t.clone())).collect();
        let m = tape.constant(Tensor::zeros(vec![1, 2]));
        let h = tape.constant(Tensor::zeros(vec![1, 2]));
        let out = model.gru_update(&mut tape, &ids, m, h).unwrap();
        assert_eq!(tape.value(out).data, vec![0.0, 0.0]);
    }

    #[test]
    fn saturated_update_gate_retains_state() {
        let model = GgnnModel {
            t: 1,
            h: 2,
            dropout: 0.0,
            edge_weights: false,
        };
        let mut params = model.init_params(1);
        for i in [p::W_Z, p::U_Z, p::W_R, p::U_R, p::W_H, p::U_H] {
            params[i] = Tensor::zeros(vec![2, 2]);
        }
        params[p::B_Z] = Tensor::matrix(1, 2, vec![50.0, 50.0]);
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = params.iter().map(|t| tape.param(t.clone())).collect();
        let m = tape.constant(Tensor::matrix(1, 2, vec![5.0, -3.0]));
        let h = tape.constant(Tensor::matrix(1, 2, vec![0.7, -0.2]));
        let out = model.gru_update(&mut tape, &ids, m, h).unwrap();
        assert!((tape.value(out).data[0] - 0.7).abs() < 1e-12);
        assert!((tape.value(out).data[1] + 0.2).abs() < 1e-12);
    }

    /// Hand/scripted evaluation of the four gating equations on a 1x2 case
    /// with fixed numeric weights, frozen as a fixture.
    #[test]
    fn gru_hand_fixture_1x2() {
        let model = GgnnModel {
            t: 1,
            h: 2,
            dropout: 0.0,
            edge_weights: false,
        };
        let mut params = model.init_params(1);
        let wz = [0.2, -0.1, 0.4, 0.3];
        let uz = [-0.3, 0.5, 0.1, -0.2];
        let wr = [0.6, 0.2, -0.5, 0.1];
        let ur = [0.3, -0.4, 0.2, 0.6];
        let wh = [-0.2, 0.7, 0.5, -0.3];
        let uh = [0.4, 0.1, -0.6, 0.2];
        let bz = [0.05, -0.05];
        let br = [0.1, 0.0];
        let bh = [0.0, -0.1];
        params[p::W_Z] = Tensor::matrix(2, 2, wz.to_vec());
        params[p::U_Z] = Tensor::matrix(2, 2, uz.to_vec());
        params[p::B_Z] = Tensor::matrix(1, 2, bz.to_vec());
        params[p::W_R] = Tensor::matrix(2, 2, wr.to_vec());
        params[p::U_R] = Tensor::matrix(2, 2, ur.to_vec());
        params[p::B_R] = Tensor::matrix(1, 2, br.to_vec());
        params[p::W_H] = Tensor::matrix(2, 2, wh.to_vec());
        params[p::U_H] = Tensor::matrix(2, 2, uh.to_vec());
        params[p::B_H] = Tensor::matrix(1, 2, bh.to_vec());
        let m = [0.3, -0.8];
        let h = [0.5, 0.2];

        // scripted evaluation with scalar arithmetic
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mv = |w: &[f64; 4], v: &[f64; 2]| [v[0] * w[0] + v[1] * w[2], v[0] * w[1] + v[1] * w[3]];
        let zm = mv(&wz, &m);
        let zh = mv(&uz, &h);
        let z = [sig(zm[0] + zh[0] + bz[0]), sig(zm[1] + zh[1] + bz[1])];
        let rm = mv(&wr, &m);
        let rh = mv(&ur, &h);
        let r = [sig(rm[0] + rh[0] + br[0]), sig(rm[1] + rh[1] + br[1])];
        let rh_state = [r[0] * h[0], r[1] * h[1]];
        let cm = mv(&wh, &m);
        let ch = mv(&uh, &rh_state);
        let c = [(cm[0] + ch[0] + bh[0]).tanh(), (cm[1] + ch[1] + bh[1]).tanh()];
        let expect = [
            z[0] * h[0] + (1.0 - z[0]) * c[0],
            z[1] * h[1] + (1.0 - z[1]) * c[1],
        ];

        let mut tape = Tape::new();
        let ids: Vec<NodeId> = params.iter().map(|t| tape.param(t.clone())).collect();
        let mn = tape.constant(Tensor::matrix(1, 2, m.to_vec()));
        let hn = tape.constant(Tensor::matrix(1, 2, h.to_vec()));
        let out = model.gru_update(&mut tape, &ids, mn, hn).unwrap();
        for i in 0..2 {
            assert!(
                (tape.value(out).data[i] - expect[i]).abs() < 1e-12,
                "component {i}: {} vs {}",
                tape.value(out).data[i],
                expect[i]
            );
        }
    }

    #[test]
    fn gate_values_in_open_unit_interval() {
        let model = GgnnModel {
            t: 1,
            h: 4,
            dropout: 0.0,
            edge_weights: false,
        };
        let params = model.init_params(7);
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = params.iter().map(|t| tape.param(t.clone())).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = tape.constant(Tensor::matrix(
            3,
            4,
            (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        ));
        // probe the gates through the public update by checking the output
        // stays a convex-combination-plus-tanh range
        let h = tape.constant(Tensor::matrix(
            3,
            4,
            (0..12).map(|_| rng.gen_range(-0.9..0.9)).collect(),
        ));
        let out = model.gru_update(&mut tape, &ids, m, h).unwrap();
        assert!(tape.value(out).data.iter().all(|&x| (-1.0..1.0).contains(&x)));
    }

    #[test]
    fn t1_forward_equals_manual_composition() {
        let model = GgnnModel {
            t: 1,
            h: 4,
            dropout: 0.0,
            edge_weights: false,
        };
        let params = model.init_params(21);
        let sample = toy_sample(3, vec![(0, 1), (1, 0), (1, 2), (2, 1)]);
        let norm = identity_norm();
        let auto = predict(&model, &params, &sample, &norm).unwrap();

        let mut tape = Tape::new();
        let ids: Vec<NodeId> = params.iter().map(|t| tape.param(t.clone())).collect();
        let features = normalized_features(&mut tape, &sample, &norm);
        let h0 = model.init_hidden(&mut tape, &ids, features).unwrap();
        let m = model
            .aggregate_messages(&mut tape, &ids, h0, Arc::new(sample.edge_list.clone()), None)
            .unwrap();
        let h1 = model.gru_update(&mut tape, &ids, m, h0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = model
            .readout(&mut tape, &ids, h1, Mode::Eval, &mut rng)
            .unwrap();
        let manual = Prediction::from_tensor(tape.value(out));
        assert_eq!(auto, manual);
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let model = GgnnModel::default();
        let params = model.init_params(5);
        let sample = toy_sample(4, vec![(0, 1), (1, 0), (2, 3), (3, 2), (1, 2), (2, 1)]);
        let norm = identity_norm();
        let a = predict(&model, &params, &sample, &norm).unwrap();
        let b = predict(&model, &params, &sample, &norm).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn permutation_equivariance_in_eval_mode() {
        let model = GgnnModel {
            t: 4,
            h: 8,
            dropout: 0.0,
            edge_weights: false,
        };
        let params = model.init_params(13);
        let sample = toy_sample(5, vec![(0, 1), (1, 0), (1, 2), (2, 1), (2, 3), (3, 2), (3, 4), (4, 3), (4, 0), (0, 4)]);
        let norm = identity_norm();
        let base = predict(&model, &params, &sample, &norm).unwrap();

        let perm = [2usize, 4, 0, 1, 3]; // old index -> new index
        let mut permuted = sample.clone();
        for (old, &new) in perm.iter().enumerate() {
            permuted.node_features[new] = sample.node_features[old].clone();
            permuted.targets[new] = sample.targets[old];
        }
        permuted.edge_list = sample
            .edge_list
            .iter()
            .map(|&(a, b)| (perm[a], perm[b]))
            .collect();
        let out = predict(&model, &params, &permuted, &norm).unwrap();
        for (old, &new) in perm.iter().enumerate() {
            assert!((out.v_hat[new] - base.v_hat[old]).abs() < 1e-9);
            assert!((out.theta_hat[new] - base.theta_hat[old]).abs() < 1e-9);
        }
    }

    #[test]
    fn same_params_run_on_any_graph_size() {
        let model = GgnnModel::default();
        let params = model.init_params(2);
        let small = toy_sample(2, vec![(0, 1), (1, 0)]);
        let large = toy_sample(30, (0..29).flat_map(|i| [(i, i + 1), (i + 1, i)]).collect());
        let norm = identity_norm();
        assert_eq!(predict(&model, &params, &small, &norm).unwrap().v_hat.len(), 2);
        assert_eq!(predict(&model, &params, &large, &norm).unwrap().v_hat.len(), 30);
    }

    #[test]
    fn end_to_end_loss_gradient_passes_gradcheck() {
        let model = GgnnModel {
            t: 3,
            h: 4,
            dropout: 0.0,
            edge_weights: false,
        };
        let params = model.init_params(17);
        let sample = toy_sample(5, vec![(0, 1), (1, 0), (1, 2), (2, 1), (2, 3), (3, 2), (3, 4), (4, 3)]);
        let norm = identity_norm();
        let err = gradcheck(
            |tape, ids| {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let out = model
                    .forward(tape, ids, &sample, &norm, Mode::Eval, &mut rng)
                    .map_err(|e| crate::autodiff::AutodiffError::Invalid(e.to_string()))?;
                let targets = tape.constant(Tensor::matrix(
                    5,
                    2,
                    sample.targets.iter().flat_map(|&(v, t)| [v, t]).collect(),
                ));
                let mse = tape.mse_reduce(out, targets)?;
                tape.scale(mse, 2.0)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "gradcheck error {err}");
    }
}
