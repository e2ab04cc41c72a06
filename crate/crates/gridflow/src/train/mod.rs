//! Training loop: Adam with classic L2 weight decay, global-norm gradient
//! clipping, reduce-on-plateau learning-rate scheduling, and patience-based
//! early stopping that returns the best-validation parameters.

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::grid::{AdmittanceMatrix, BusKind, Network};
use crate::metrics::fmt_f64;
use crate::model::{Mode, Model, ModelError};
use crate::scenario::{Dataset, GraphSample, NormStats, Split};
use crate::seed;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset is missing a non-empty {0:?} split or normalization stats")]
    BadDataset(Split),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub clip_norm: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_lr: f64,
    pub seed: u64,
    pub physics_loss_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            weight_decay: 1e-6,
            batch_size: 16,
            max_epochs: 800,
            patience: 100,
            clip_norm: 1.0,
            plateau_factor: 0.5,
            plateau_patience: 25,
            min_lr: 1e-6,
            seed: 0,
            physics_loss_weight: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: &str| Err(TrainError::Config(msg.to_string()));
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return fail("plateau_factor must lie in (0, 1)");
        }
        if self.learning_rate <= self.min_lr {
            return fail("learning_rate must exceed min_lr");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return fail("batch_size, max_epochs, and patience must be >= 1");
        }
        if self.clip_norm <= 0.0 {
            return fail("clip_norm must be positive");
        }
        if self.physics_loss_weight < 0.0 {
            return fail("physics_loss_weight must be >= 0");
        }
        Ok(())
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;
/// Absolute improvement below this counts as a plateau for both the
/// scheduler and early stopping.
const IMPROVEMENT_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            first_moment: params.iter().map(|t| Tensor::zeros(t.shape.clone())).collect(),
            second_moment: params.iter().map(|t| Tensor::zeros(t.shape.clone())).collect(),
            step: 0,
        }
    }
}

/// Bias-corrected Adam with classic L2 decay folded into the gradient
/// (g <- g + lambda * w) before the moment updates.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for (i, param) in params.iter_mut().enumerate() {
        let m = &mut state.first_moment[i].data;
        let v = &mut state.second_moment[i].data;
        for (j, w) in param.data.iter_mut().enumerate() {
            let g = grads[i].data[j] + weight_decay * *w;
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * g;
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + EPS);
        }
    }
}

/// Scales every gradient by clip_norm/norm when the global L2 norm over all
/// parameters exceeds clip_norm; otherwise leaves them unchanged.
pub fn clip_gradients(grads: &mut [Tensor], clip_norm: f64) {
    assert!(clip_norm > 0.0);
    let norm = grads
        .iter()
        .flat_map(|t| t.data.iter())
        .map(|&g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > clip_norm {
        let scale = clip_norm / norm;
        for t in grads.iter_mut() {
            for g in &mut t.data {
                *g *= scale;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    pub lr: f64,
    factor: f64,
    patience: usize,
    min_lr: f64,
    best: f64,
    stall: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, min_lr: f64) -> Self {
        Self {
            lr,
            factor,
            patience,
            min_lr,
            best: f64::INFINITY,
            stall: 0,
        }
    }

    /// Halves (by `factor`) the learning rate after `patience` consecutive
    /// epochs without an improvement of more than the absolute threshold.
    pub fn step(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best - IMPROVEMENT_THRESHOLD {
            self.best = val_loss;
            self.stall = 0;
        } else {
            self.stall += 1;
            if self.stall >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.stall = 0;
            }
        }
        self.lr
    }
}

/// Builds L = (1/N) sum_i [(Vhat_i - V_i)^2 + (thetahat_i - theta_i)^2]
/// on the tape from the N x 2 prediction node.
pub fn mse_loss(
    tape: &mut Tape,
    pred: NodeId,
    sample: &GraphSample,
) -> Result<NodeId, TrainError> {
    let n = sample.n_nodes();
    let targets = tape.constant(Tensor::matrix(
        n,
        2,
        sample.targets.iter().flat_map(|&(v, t)| [v, t]).collect(),
    ));
    let mse = tape.mse_reduce(pred, targets)?;
    // mse_reduce averages over 2N entries; Eq. averages the per-bus pair sums
    Ok(tape.scale(mse, 2.0)?)
}

/// Mean squared power mismatch at the predicted voltages, over the non-slack
/// P entries and PQ Q entries, built from differentiable primitives.
pub fn physics_residual_loss(
    tape: &mut Tape,
    pred: NodeId,
    net: &Network,
    ybus: &AdmittanceMatrix,
) -> Result<NodeId, TrainError> {
    let n = net.buses.len();
    // split the N x 2 prediction into V and theta column vectors
    let col_v = tape.constant(Tensor::matrix(2, 1, vec![1.0, 0.0]));
    let col_t = tape.constant(Tensor::matrix(2, 1, vec![0.0, 1.0]));
    let v = tape.matmul(pred, col_v)?;
    let theta = tape.matmul(pred, col_t)?;

    // one row per structural Y entry: selection matrices pick the endpoint
    // values, constants carry G/B
    let mut entries = Vec::new();
    for i in 0..n {
        for (j, g, b) in ybus.row(i) {
            entries.push((i, j, g, b));
        }
    }
    let e = entries.len();
    let mut sel_i = vec![0.0; e * n];
    let mut sel_j = vec![0.0; e * n];
    let mut g_vec = vec![0.0; e];
    let mut b_vec = vec![0.0; e];
    for (k, &(i, j, g, b)) in entries.iter().enumerate() {
        sel_i[k * n + i] = 1.0;
        sel_j[k * n + j] = 1.0;
        g_vec[k] = g;
        b_vec[k] = b;
    }
    let sel_i_node = tape.constant(Tensor::matrix(e, n, sel_i.clone()));
    let sel_j_node = tape.constant(Tensor::matrix(e, n, sel_j));
    let g_node = tape.constant(Tensor::matrix(e, 1, g_vec));
    let b_node = tape.constant(Tensor::matrix(e, 1, b_vec));

    let vi = tape.matmul(sel_i_node, v)?;
    let vj = tape.matmul(sel_j_node, v)?;
    let ti = tape.matmul(sel_i_node, theta)?;
    let tj = tape.matmul(sel_j_node, theta)?;
    let dt = tape.sub(ti, tj)?;
    let cos_dt = tape.cos(dt);
    let sin_dt = tape.sin(dt);
    let vv = tape.mul(vi, vj)?;

    // P terms: V_i V_j (G cos + B sin); Q terms: V_i V_j (G sin - B cos)
    let gc = tape.mul(g_node, cos_dt)?;
    let bs = tape.mul(b_node, sin_dt)?;
    let p_kernel = tape.add(gc, bs)?;
    let p_terms = tape.mul(vv, p_kernel)?;
    let gs = tape.mul(g_node, sin_dt)?;
    let bc = tape.mul(b_node, cos_dt)?;
    let q_kernel = tape.sub(gs, bc)?;
    let q_terms = tape.mul(vv, q_kernel)?;

    // fold the per-entry terms back to per-bus injections: P = S_i^T terms
    let sel_i_t = tape.constant({
        let mut data = vec![0.0; n * e];
        for (k, &(i, _, _, _)) in entries.iter().enumerate() {
            data[i * e + k] = 1.0;
        }
        Tensor::matrix(n, e, data)
    });
    let p_inj = tape.matmul(sel_i_t, p_terms)?;
    let q_inj = tape.matmul(sel_i_t, q_terms)?;

    // mismatch rows: specified minus computed, non-slack P then PQ Q
    let (p_spec, q_spec) = net.specified_injections();
    let mut rows = Vec::new();
    let mut spec = Vec::new();
    for (i, bus) in net.buses.iter().enumerate() {
        if bus.kind != BusKind::Slack {
            rows.push((i, false));
            spec.push(p_spec[i]);
        }
    }
    for (i, bus) in net.buses.iter().enumerate() {
        if bus.kind == BusKind::Pq {
            rows.push((i, true));
            spec.push(q_spec[i]);
        }
    }
    let m = rows.len();
    let mut pick_p = vec![0.0; m * n];
    let mut pick_q = vec![0.0; m * n];
    for (r, &(i, is_q)) in rows.iter().enumerate() {
        if is_q {
            pick_q[r * n + i] = 1.0;
        } else {
            pick_p[r * n + i] = 1.0;
        }
    }
    let pick_p_node = tape.constant(Tensor::matrix(m, n, pick_p));
    let pick_q_node = tape.constant(Tensor::matrix(m, n, pick_q));
    let comp_p = tape.matmul(pick_p_node, p_inj)?;
    let comp_q = tape.matmul(pick_q_node, q_inj)?;
    let computed = tape.add(comp_p, comp_q)?;
    let spec_node = tape.constant(Tensor::matrix(m, 1, spec));
    Ok(tape.mse_reduce(computed, spec_node)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub learning_rate: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub config: TrainConfig,
}

impl TrainHistory {
    /// CSV form; wall time is deliberately excluded so reruns are
    /// byte-identical.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,lr\n");
        for e in &self.epochs {
            writeln!(
                out,
                "{},{},{},{}",
                e.epoch,
                fmt_f64(e.train_loss),
                fmt_f64(e.val_loss),
                fmt_f64(e.learning_rate)
            )
            .expect("string write");
        }
        out
    }
}

pub struct TrainOutcome {
    /// Parameters from the best-validation epoch, not the last one.
    pub params: Vec<Tensor>,
    pub history: TrainHistory,
}

/// Optional physics term context: the base network and its admittance
/// matrix. Samples with perturbed topology skip the term, since their
/// admittance differs from the base.
pub struct PhysicsContext<'a> {
    pub net: &'a Network,
    pub ybus: &'a AdmittanceMatrix,
}

fn sample_loss(
    model: &dyn Model,
    params: &[Tensor],
    sample: &GraphSample,
    norm: &NormStats,
    mode: Mode,
    rng: &mut ChaCha8Rng,
    physics: Option<(&PhysicsContext, f64)>,
) -> Result<(f64, Option<Vec<Tensor>>), TrainError> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|t| tape.param(t.clone())).collect();
    let pred = model.forward(&mut tape, &ids, sample, norm, mode, rng)?;
    let mut loss = mse_loss(&mut tape, pred, sample)?;
    if let Some((ctx, weight)) = physics {
        if weight > 0.0 && !sample.topology_perturbed {
            let residual = physics_residual_loss(&mut tape, pred, ctx.net, ctx.ybus)?;
            let scaled = tape.scale(residual, weight)?;
            loss = tape.add(loss, scaled)?;
        }
    }
    let value = tape.value(loss).data[0];
    if mode == Mode::Eval {
        return Ok((value, None));
    }
    let grads = tape.backward(loss)?;
    let collected = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| {
            grads
                .get(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape.clone()))
        })
        .collect();
    Ok((value, Some(collected)))
}

fn mean_eval_loss(
    model: &dyn Model,
    params: &[Tensor],
    dataset: &Dataset,
    indices: &[usize],
    norm: &NormStats,
) -> Result<f64, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    for &i in indices {
        let (loss, _) = sample_loss(
            model,
            params,
            &dataset.samples[i],
            norm,
            Mode::Eval,
            &mut rng,
            None,
        )?;
        total += loss;
    }
    Ok(total / indices.len() as f64)
}

pub fn train(
    model: &dyn Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    physics: Option<&PhysicsContext>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let norm = dataset
        .norm_stats
        .as_ref()
        .ok_or(TrainError::BadDataset(Split::Train))?;
    let train_idx = dataset.indices_of(Split::Train);
    let val_idx = dataset.indices_of(Split::Val);
    if train_idx.is_empty() {
        return Err(TrainError::BadDataset(Split::Train));
    }
    if val_idx.is_empty() {
        return Err(TrainError::BadDataset(Split::Val));
    }

    let mut params = model.init_params(seed::derive(cfg.seed, 1));
    let mut opt = OptimizerState::new(&params);
    let mut scheduler = PlateauScheduler::new(
        cfg.learning_rate,
        cfg.plateau_factor,
        cfg.plateau_patience,
        cfg.min_lr,
    );
    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        stopped_early: false,
        config: cfg.clone(),
    };
    let mut best_params = params.clone();
    let mut epochs_since_best = 0usize;
    let physics_arg = physics.map(|ctx| (ctx, cfg.physics_loss_weight));
    let started = std::time::Instant::now();

    for epoch in 1..=cfg.max_epochs {
        let mut order = train_idx.clone();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, 0x10_000 + epoch as u64));
        order.shuffle(&mut shuffle_rng);
        let mut dropout_rng =
            ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, 0x20_000 + epoch as u64));
        let lr = scheduler.lr;

        let mut epoch_loss = 0.0;
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc: Vec<Tensor> =
                params.iter().map(|t| Tensor::zeros(t.shape.clone())).collect();
            let mut batch_loss = 0.0;
            for &i in batch {
                let (loss, grads) = sample_loss(
                    model,
                    &params,
                    &dataset.samples[i],
                    norm,
                    Mode::Train,
                    &mut dropout_rng,
                    physics_arg.as_ref().map(|&(ctx, w)| (ctx, w)),
                )?;
                if !loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        batch: batch_no,
                    });
                }
                batch_loss += loss;
                let grads = grads.expect("train mode gradients");
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (x, y) in a.data.iter_mut().zip(&g.data) {
                        *x += y;
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for t in &mut acc {
                for x in &mut t.data {
                    *x *= inv;
                }
            }
            epoch_loss += batch_loss;
            clip_gradients(&mut acc, cfg.clip_norm);
            adam_step(&mut params, &acc, &mut opt, lr, cfg.weight_decay);
        }
        let train_loss = epoch_loss / order.len() as f64;
        let val_loss = mean_eval_loss(model, &params, dataset, &val_idx, norm)?;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, batch: 0 });
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            learning_rate: lr,
            wall_time: started.elapsed().as_secs_f64(),
        });

        if val_loss < history.best_val_loss - IMPROVEMENT_THRESHOLD {
            history.best_val_loss = val_loss;
            history.best_epoch = epoch;
            best_params = params.clone();
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
        scheduler.step(val_loss);
    }

    Ok(TrainOutcome {
        params: best_params,
        history,
    })
}
