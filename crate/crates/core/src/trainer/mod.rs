//! Unrolled loss assembly and the learner update.

mod augment;

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

pub use augment::{data_augment, shift_and_scale};

use crate::config::RunConfig;
use crate::model::{ModelError, ModelSet};
use crate::reanalyze::TrainBatch;
use crate::tensor::{sgd_step, BnUpdate, GradBuffer, Graph, Real, SgdOptions, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite loss: {0:?}")]
    NonFiniteLoss(LossReport),
    #[error("empty batch")]
    EmptyBatch,
    #[error("consistency term enabled without target projections")]
    MissingTargets,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainerConfig {
    pub reward_coeff: f64,
    pub policy_coeff: f64,
    pub value_coeff: f64,
    pub consistency_coeff: f64,
    pub use_consistency: bool,
    pub weight_decay: f64,
    pub momentum: f64,
    pub grad_clip_norm: f64,
    /// Halve the gradient entering each unrolled dynamics step.
    pub dynamics_grad_scale: bool,
    /// `(max shift, intensity)` when augmentation is on.
    pub augmentation: Option<(usize, f64)>,
    pub lstm_reset_horizon: usize,
    pub bn_momentum: f64,
}

impl TrainerConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        TrainerConfig {
            reward_coeff: cfg.value_prefix_loss_coeff,
            policy_coeff: cfg.policy_loss_coeff,
            value_coeff: cfg.value_loss_coeff,
            consistency_coeff: cfg.consistency_loss_coeff,
            use_consistency: cfg.use_consistency,
            weight_decay: cfg.weight_decay,
            momentum: cfg.momentum,
            grad_clip_norm: cfg.grad_clip_norm,
            dynamics_grad_scale: cfg.dynamics_grad_scale,
            augmentation: cfg.use_augmentation.then_some((cfg.augment_shift, cfg.augment_intensity)),
            lstm_reset_horizon: cfg.lstm_reset_horizon,
            bn_momentum: 0.1,
        }
    }
}

/// Per-step loss components. `total` is the coefficient-weighted sum of the
/// four prediction terms; the weight-decay term `c·‖θ‖²` is reported
/// alongside and applied by the optimizer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub total: f64,
    pub reward: f64,
    pub policy: f64,
    pub value: f64,
    pub consistency: f64,
    pub weight_decay: f64,
    pub grad_norm: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.total, self.reward, self.policy, self.value, self.consistency]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Loss graph output: the scalar to differentiate plus bookkeeping.
pub struct LossGraph {
    pub loss: Var,
    pub report: LossReport,
    /// `|decode(v_t) − z_t|` per sample.
    pub value_l1: Vec<f64>,
}

fn const_rows<T: Real>(g: &mut Graph<'_, T>, rows: &[Vec<f64>]) -> Result<Var, TensorError> {
    let w = rows[0].len();
    let data: Vec<T> = rows.iter().flat_map(|r| r.iter().map(|v| T::of(*v))).collect();
    Ok(g.constant(Tensor::new(vec![rows.len(), w], data)?))
}

fn const_vec<T: Real>(g: &mut Graph<'_, T>, v: &[f64]) -> Result<Var, TensorError> {
    Ok(g.constant(Tensor::new(vec![v.len()], v.iter().map(|x| T::of(*x)).collect())?))
}

/// Per-row cross-entropy `−Σ target · log_softmax(logits)`, shape `[n]`.
fn cross_entropy<T: Real>(g: &mut Graph<'_, T>, logits: Var, target: &[Vec<f64>]) -> Result<Var, TensorError> {
    let t = const_rows(g, target)?;
    let lp = g.log_softmax(logits)?;
    let prod = g.mul(lp, t)?;
    let s = g.sum_rows(prod)?;
    Ok(g.scale(s, -1.0))
}

/// Per-row `−cos(a, b)`, shape `[n]`.
fn negative_cosine<T: Real>(g: &mut Graph<'_, T>, a: Var, b: Var) -> Result<Var, TensorError> {
    let a = g.l2_normalize(a)?;
    let b = g.l2_normalize(b)?;
    let prod = g.mul(a, b)?;
    let s = g.sum_rows(prod)?;
    Ok(g.scale(s, -1.0))
}

fn accumulate<T: Real>(g: &mut Graph<'_, T>, acc: Option<Var>, x: Var) -> Result<Var, TensorError> {
    match acc {
        Some(a) => g.add(a, x),
        None => Ok(x),
    }
}

/// Target branch `sg(P1(H(o_{t+i+1})))` for each unroll step, evaluated in
/// its own graph so its value is a constant for the loss graph.
pub fn consistency_targets<T: Real>(
    model: &ModelSet<T>,
    next_obs: &[Vec<Vec<f32>>],
) -> Result<(Vec<Tensor<T>>, Vec<BnUpdate<T>>), TrainError> {
    let k = next_obs[0].len();
    let mut g = Graph::new(&model.store);
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let refs: Vec<&[f32]> = next_obs.iter().map(|row| row[i].as_slice()).collect();
        let x = model.observation_input(&mut g, &refs)?;
        let s = model.represent(&mut g, x, true)?;
        let t = model.project(&mut g, s, false, true)?;
        out.push(g.value(t).clone());
    }
    Ok((out, g.take_bn_updates()))
}

/// Records the unrolled loss for `batch` in `g`.
///
/// `obs` replaces the batch's current observations when augmentation
/// produced new ones. `targets` comes from [`consistency_targets`] and is
/// required when the consistency term is on.
pub fn build_loss<T: Real>(
    g: &mut Graph<'_, T>,
    model: &ModelSet<T>,
    batch: &TrainBatch,
    cfg: &TrainerConfig,
    obs: Option<&[Vec<f32>]>,
    targets: Option<&[Tensor<T>]>,
) -> Result<LossGraph, TrainError> {
    let n = batch.len();
    if n == 0 {
        return Err(TrainError::EmptyBatch);
    }
    let k = batch.actions[0].len();
    let support = model.support();
    let obs = obs.unwrap_or(&batch.obs);
    let obs_refs: Vec<&[f32]> = obs.iter().map(|o| o.as_slice()).collect();
    let x = model.observation_input(g, &obs_refs)?;
    let mut s = model.represent(g, x, true)?;
    let mut lstm = model.zero_lstm(g, n);
    let consistency = uses_consistency(cfg);
    if consistency && targets.is_none() {
        return Err(TrainError::MissingTargets);
    }
    let (mut reward_acc, mut policy_acc, mut value_acc, mut sim_acc) = (None, None, None, None);
    let mut value_l1 = vec![0.0; n];
    for i in 0..k {
        let v_logits = model.value_logits(g, s, true)?;
        if i == 0 {
            let rows = g.value(v_logits);
            let w = rows.row_len();
            for (b, row) in rows.data().chunks(w).enumerate() {
                let row: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
                value_l1[b] = (support.decode_logits(&row) - batch.values[b][0]).abs();
            }
        }
        let z: Vec<Vec<f64>> = (0..n).map(|b| support.encode(batch.values[b][i]).0).collect();
        let lv = cross_entropy(g, v_logits, &z)?;
        value_acc = Some(accumulate(g, value_acc, lv)?);
        let p_logits = model.policy_logits(g, s, true)?;
        let pi: Vec<Vec<f64>> = (0..n).map(|b| batch.policies[b][i].clone()).collect();
        let lp = cross_entropy(g, p_logits, &pi)?;
        policy_acc = Some(accumulate(g, policy_acc, lp)?);

        let actions: Vec<usize> = (0..n).map(|b| batch.actions[b][i]).collect();
        let mut next = model.dynamics(g, s, &actions, true)?;
        if cfg.dynamics_grad_scale {
            let half = g.scale(next, 0.5);
            let frozen = g.stop_gradient(next);
            let frozen = g.scale(frozen, 0.5);
            next = g.add(half, frozen)?;
        }
        let (r_logits, next_lstm) = model.reward_logits(g, next, lstm, true)?;
        lstm = if (i + 1) % cfg.lstm_reset_horizon == 0 {
            model.zero_lstm(g, n)
        } else {
            next_lstm
        };
        let r: Vec<Vec<f64>> = (0..n).map(|b| support.encode(batch.reward_targets[b][i]).0).collect();
        let lr = cross_entropy(g, r_logits, &r)?;
        reward_acc = Some(accumulate(g, reward_acc, lr)?);

        if consistency {
            let target = g.constant(targets.expect("checked above")[i].clone());
            let online = model.project(g, next, true, true)?;
            let sim = negative_cosine(g, online, target)?;
            let mask: Vec<f64> = (0..n).map(|b| f64::from(u8::from(batch.next_mask[b][i]))).collect();
            let mask = const_vec(g, &mask)?;
            let sim = g.mul(sim, mask)?;
            sim_acc = Some(accumulate(g, sim_acc, sim)?);
        }
        s = next;
    }
    // IS-weighted mean over the batch and unroll steps
    let scale: Vec<f64> = batch.weights.iter().map(|w| w / (n * k) as f64).collect();
    let scale_v = const_vec(g, &scale)?;
    let mut parts = [0.0; 4];
    let mut total: Option<Var> = None;
    let terms = [
        (reward_acc, cfg.reward_coeff),
        (policy_acc, cfg.policy_coeff),
        (value_acc, cfg.value_coeff),
        (sim_acc, cfg.consistency_coeff),
    ];
    for (slot, (acc, coeff)) in terms.into_iter().enumerate() {
        let Some(acc) = acc else { continue };
        let weighted = g.mul(acc, scale_v)?;
        let term = g.sum(weighted);
        parts[slot] = g.scalar(term);
        let scaled = g.scale(term, coeff);
        total = Some(accumulate(g, total, scaled)?);
    }
    let loss = total.expect("at least the value term");
    let report = LossReport {
        total: g.scalar(loss),
        reward: parts[0],
        policy: parts[1],
        value: parts[2],
        consistency: parts[3],
        weight_decay: cfg.weight_decay * model.store.squared_norm(),
        grad_norm: 0.0,
    };
    Ok(LossGraph { loss, report, value_l1 })
}

fn uses_consistency(cfg: &TrainerConfig) -> bool {
    cfg.use_consistency && cfg.consistency_coeff != 0.0
}

/// Loss components without a parameter update.
pub fn compute_losses<T: Real>(
    model: &ModelSet<T>,
    batch: &TrainBatch,
    cfg: &TrainerConfig,
) -> Result<LossGraph, TrainError> {
    let targets = if uses_consistency(cfg) {
        Some(consistency_targets(model, &batch.next_obs)?.0)
    } else {
        None
    };
    let mut g = Graph::new(&model.store);
    build_loss(&mut g, model, batch, cfg, None, targets.as_deref())
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub report: LossReport,
    pub value_l1: Vec<f64>,
}

/// Owns the online model and its optimizer state.
pub struct Trainer<T: Real> {
    pub model: ModelSet<T>,
    pub cfg: TrainerConfig,
    pub steps: usize,
    grads: GradBuffer<T>,
    rng: ChaCha8Rng,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: ModelSet<T>, cfg: TrainerConfig, seed: u64) -> Self {
        let grads = GradBuffer::for_store(&model.store);
        Trainer {
            model,
            cfg,
            steps: 0,
            grads,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn augmented(&mut self, batch: &TrainBatch) -> Option<(Vec<Vec<f32>>, Vec<Vec<Vec<f32>>>)> {
        let (shift, intensity) = self.cfg.augmentation?;
        let shape = self.model.spec.obs_shape;
        let rng = &mut self.rng;
        let obs = batch
            .obs
            .iter()
            .map(|o| data_augment(o, shape, shift, intensity, rng))
            .collect();
        let next = batch
            .next_obs
            .iter()
            .map(|row| row.iter().map(|o| data_augment(o, shape, shift, intensity, rng)).collect())
            .collect();
        Some((obs, next))
    }

    /// Backward pass, clipped SGD update at `lr`, and running-stat refresh.
    pub fn train_step(&mut self, batch: &TrainBatch, lr: f64) -> Result<StepOutput, TrainError> {
        let aug = self.augmented(batch);
        self.grads.zero();
        let (obs, next) = match &aug {
            Some((o, n)) => (Some(o.as_slice()), n.as_slice()),
            None => (None, batch.next_obs.as_slice()),
        };
        let (targets, mut bn) = if uses_consistency(&self.cfg) {
            let (t, u) = consistency_targets(&self.model, next)?;
            (Some(t), u)
        } else {
            (None, Vec::new())
        };
        let (mut report, value_l1, more_bn) = {
            let mut g = Graph::new(&self.model.store);
            let out = build_loss(&mut g, &self.model, batch, &self.cfg, obs, targets.as_deref())?;
            if !out.report.is_finite() {
                return Err(TrainError::NonFiniteLoss(out.report));
            }
            g.backward(out.loss, &mut self.grads)?;
            (out.report, out.value_l1, g.take_bn_updates())
        };
        let sgd = sgd_step(
            &mut self.model.store,
            &self.grads,
            &SgdOptions {
                lr,
                momentum: self.cfg.momentum,
                weight_decay: self.cfg.weight_decay,
                grad_clip_norm: Some(self.cfg.grad_clip_norm),
            },
        )?;
        bn.extend(more_bn);
        let m = T::of(self.cfg.bn_momentum);
        for u in bn {
            for (r, b) in self.model.store.get_mut(u.running_mean).data_mut().iter_mut().zip(&u.mean) {
                *r = (T::one() - m) * *r + m * *b;
            }
            for (r, b) in self.model.store.get_mut(u.running_var).data_mut().iter_mut().zip(&u.var) {
                *r = (T::one() - m) * *r + m * *b;
            }
        }
        report.grad_norm = sgd.grad_norm;
        self.steps += 1;
        Ok(StepOutput { report, value_l1 })
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsRecord {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossReport,
    pub lr: f64,
    pub beta: f64,
    pub temperature: f64,
    pub buffer_size: usize,
    pub env_steps: usize,
    pub mean_horizon: f64,
    pub saturated_values: usize,
}

/// Writes one JSON object per line.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Self {
        MetricsWriter { out }
    }

    pub fn write<S: Serialize>(&mut self, rec: &S) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, rec)?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
