//! Graph-convolution baseline: two bias-free convolution layers
//!
//!   h <- relu(h W_self + (sum over neighbors j) h_j W_nbr)
//!
//! followed by flattening all node states into one row and a dense head,
//! so the readout is bound to a fixed node count at construction time.

use super::{glorot, normalized_features, Mode, Model, ModelError, ModelSpec};
use crate::autodiff::{NodeId, Tape, Tensor};
use crate::scenario::{GraphSample, NormStats, NODE_FEATURES};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

#[derive(Debug, Clone)]
pub struct GcnModel {
    /// Node count the dense head is sized for.
    pub n_nodes: usize,
    /// Convolution channel width.
    pub hidden: usize,
    /// Dense head width.
    pub head: usize,
    /// Dropout rate on the head activation, train mode only.
    pub dropout: f64,
}

impl GcnModel {
    pub fn new(n_nodes: usize) -> Self {
        Self {
            n_nodes,
            hidden: 12,
            head: 128,
            dropout: 0.1,
        }
    }
}

/// Indices into the flat parameter list.
mod p {
    pub const W_SELF1: usize = 0;
    pub const W_NBR1: usize = 1;
    pub const W_SELF2: usize = 2;
    pub const W_NBR2: usize = 3;
    pub const W_HEAD: usize = 4;
    pub const B_HEAD: usize = 5;
    pub const W_OUT: usize = 6;
    pub const B_OUT: usize = 7;
}

impl GcnModel {
    fn conv_layer(
        &self,
        tape: &mut Tape,
        hidden: NodeId,
        w_self: NodeId,
        w_nbr: NodeId,
        edges: Arc<Vec<(usize, usize)>>,
    ) -> Result<NodeId, ModelError> {
        let own = tape.matmul(hidden, w_self)?;
        let mapped = tape.matmul(hidden, w_nbr)?;
        let gathered = tape.scatter_sum(mapped, edges, None)?;
        let sum = tape.add(own, gathered)?;
        Ok(tape.relu(sum))
    }
}

impl Model for GcnModel {
    fn spec(&self) -> ModelSpec {
        ModelSpec::Gcn {
            n_nodes: self.n_nodes,
            hidden: self.hidden,
            head: self.head,
            dropout: self.dropout,
        }
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        vec![
            vec![NODE_FEATURES, self.hidden],
            vec![NODE_FEATURES, self.hidden],
            vec![self.hidden, self.hidden],
            vec![self.hidden, self.hidden],
            vec![self.n_nodes * self.hidden, self.head],
            vec![1, self.head],
            vec![self.head, 2 * self.n_nodes],
            vec![1, 2 * self.n_nodes],
        ]
    }

    fn init_params(&self, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.param_shapes()
            .into_iter()
            .map(|shape| {
                if shape[0] == 1 {
                    Tensor::zeros(shape)
                } else {
                    glorot(&mut rng, shape[0], shape[1])
                }
            })
            .collect()
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
        let n = sample.node_features.len();
        if n != self.n_nodes {
            return Err(ModelError::NodeCountMismatch {
                expected: self.n_nodes,
                actual: n,
            });
        }
        let features = normalized_features(tape, sample, norm);
        let edges = Arc::new(sample.edge_list.clone());
        let h1 = self.conv_layer(
            tape,
            features,
            params[p::W_SELF1],
            params[p::W_NBR1],
            edges.clone(),
        )?;
        let h2 = self.conv_layer(tape, h1, params[p::W_SELF2], params[p::W_NBR2], edges)?;
        let flat = tape.reshape(h2, vec![1, n * self.hidden])?;
        let head = tape.matmul(flat, params[p::W_HEAD])?;
        let head = tape.add_row(head, params[p::B_HEAD])?;
        let mut act = tape.relu(head);
        if mode == Mode::Train && self.dropout > 0.0 {
            act = tape.dropout(act, self.dropout, rng)?;
        }
        let out = tape.matmul(act, params[p::W_OUT])?;
        let out = tape.add_row(out, params[p::B_OUT])?;
        // 1 x 2N interleaved [V_1, theta_1, V_2, theta_2, ...] -> N x 2
        Ok(tape.reshape(out, vec![n, 2])?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::model::{identity_norm, predict};
    use rand::Rng;

    fn toy_sample(n: usize, edges: Vec<(usize, usize)>) -> GraphSample {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        GraphSample {
            node_features: (0..n)
                .map(|_| (0..NODE_FEATURES).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
            edge_list: edges,
            edge_features: None,
            targets: (0..n).map(|_| (1.0, 0.0)).collect(),
            scenario_id: 0,
            topology_perturbed: false,
        }
    }

    #[test]
    fn param_shapes_for_thirty_nodes() {
        let model = GcnModel::new(30);
        let shapes = model.param_shapes();
        assert_eq!(shapes[p::W_HEAD], vec![360, 128]);
        assert_eq!(shapes[p::W_OUT], vec![128, 60]);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let model = GcnModel::new(3);
        let params: Vec<Tensor> = model
            .param_shapes()
            .into_iter()
            .map(Tensor::zeros)
            .collect();
        let sample = toy_sample(3, vec![(0, 1), (1, 0), (1, 2), (2, 1)]);
        let out = predict(&model, &params, &sample, &identity_norm()).unwrap();
        assert!(out.v_hat.iter().chain(out.theta_hat.iter()).all(|&x| x == 0.0));
    }

    #[test]
    fn rejects_node_count_mismatch() {
        let model = GcnModel::new(30);
        let params = model.init_params(1);
        let sample = toy_sample(2, vec![(0, 1), (1, 0)]);
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = params.iter().map(|t| tape.param(t.clone())).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = model
            .forward(&mut tape, &ids, &sample, &identity_norm(), Mode::Eval, &mut rng)
            .unwrap_err();
        assert!(matches!(
            err,
            ModelError::NodeCountMismatch {
                expected: 30,
                actual: 2
            }
        ));
    }

    /// Single isolated node with hand-set weights: both conv layers reduce to
    /// plain dense layers, so the whole network is computable by hand.
    #[test]
    fn single_node_hand_check() {
        let mut model = GcnModel::new(1);
        model.hidden = 2;
        model.head = 2;
        model.dropout = 0.0;
        let mut params: Vec<Tensor> = model
            .param_shapes()
            .into_iter()
            .map(Tensor::zeros)
            .collect();
        params[p::W_SELF1] = Tensor::matrix(
            NODE_FEATURES,
            2,
            vec![
                1.0, 0.0, //
                0.0, 1.0, //
                0.0, 0.0, //
                0.0, 0.0, //
                0.0, 0.0, //
                0.0, 0.0, //
                0.0, 0.0,
            ],
        );
        params[p::W_SELF2] = Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, -3.0]);
        params[p::W_HEAD] = Tensor::matrix(2, 2, vec![1.0, 1.0, 1.0, -1.0]);
        params[p::B_HEAD] = Tensor::matrix(1, 2, vec![0.0, 0.5]);
        params[p::W_OUT] = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        params[p::B_OUT] = Tensor::matrix(1, 2, vec![0.25, -0.25]);
        let mut sample = toy_sample(1, vec![]);
        sample.node_features[0] = vec![0.3, -0.7, 0.0, 0.0, 0.0, 0.0, 0.0];
        // layer 1: relu([0.3, -0.7]) = [0.3, 0]
        // layer 2: relu([0.6, 0]) = [0.6, 0]
        // head: relu([0.6, 0.6] + [0, 0.5]) = [0.6, 1.1]
        // out: [0.6, 1.1] + [0.25, -0.25] = [0.85, 0.85]
        let out = predict(&model, &params, &sample, &identity_norm()).unwrap();
        assert!((out.v_hat[0] - 0.85).abs() < 1e-12);
        assert!((out.theta_hat[0] - 0.85).abs() < 1e-12);
    }

    #[test]
    fn interleaved_output_maps_to_columns() {
        let mut model = GcnModel::new(2);
        model.hidden = 1;
        model.head = 1;
        model.dropout = 0.0;
        let mut params: Vec<Tensor> = model
            .param_shapes()
            .into_iter()
            .map(Tensor::zeros)
            .collect();
        // force the output straight through the biases
        params[p::B_OUT] = Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]);
        let sample = toy_sample(2, vec![(0, 1), (1, 0)]);
        let out = predict(&model, &params, &sample, &identity_norm()).unwrap();
        assert_eq!(out.v_hat, vec![1.0, 3.0]);
        assert_eq!(out.theta_hat, vec![2.0, 4.0]);
    }

    #[test]
    fn loss_gradient_passes_gradcheck() {
        let mut model = GcnModel::new(4);
        model.hidden = 3;
        model.head = 5;
        model.dropout = 0.0;
        let params = model.init_params(31);
        let sample = toy_sample(4, vec![(0, 1), (1, 0), (1, 2), (2, 1), (2, 3), (3, 2)]);
        let norm = identity_norm();
        let err = gradcheck(
            |tape, ids| {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let out = model
                    .forward(tape, ids, &sample, &norm, Mode::Eval, &mut rng)
                    .map_err(|e| crate::autodiff::AutodiffError::Invalid(e.to_string()))?;
                let targets = tape.constant(Tensor::matrix(
                    4,
                    2,
                    sample.targets.iter().flat_map(|&(v, t)| [v, t]).collect(),
                ));
                tape.mse_reduce(out, targets)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "gradcheck error {err}");
    }
}
