//! Representation, dynamics, prediction heads and the self-supervised
//! projector/predictor pair, all sharing one parameter store.

pub mod codec;
pub mod layers;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{RepresentationKind, RunConfig};
use crate::tensor::{read_checkpoint, write_checkpoint, CheckpointData, Graph, LstmState, ParamStore, Real, Tensor, TensorError, Var};
pub use codec::Support;
use layers::{BatchNorm, Conv, ConvResBlock, Dense, DenseBnRelu, Lstm, Mlp, ResBlock};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("action {action} out of range for {num_actions} actions")]
    InvalidAction { action: usize, num_actions: usize },
    #[error("observation has {got} values, model expects {expected} ({shape:?})")]
    ObservationShape { expected: usize, got: usize, shape: [usize; 3] },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Everything needed to rebuild the network layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Stacked observation shape, channels × height × width.
    pub obs_shape: [usize; 3],
    pub num_actions: usize,
    pub representation: RepresentationKind,
    pub latent_dim: usize,
    pub repr_hidden: usize,
    pub conv_planes: usize,
    pub head_hidden: usize,
    pub lstm_hidden: usize,
    pub projection_hidden: usize,
    pub projection_dim: usize,
    pub predictor_hidden: usize,
    pub support_half_width: f64,
    pub support_bins: usize,
    pub value_prefix: bool,
    pub lstm_reset_horizon: usize,
}

impl ModelSpec {
    pub fn from_config(cfg: &RunConfig, frame_shape: [usize; 3], num_actions: usize) -> Self {
        ModelSpec {
            obs_shape: [frame_shape[0] * cfg.frames_stacked, frame_shape[1], frame_shape[2]],
            num_actions,
            representation: cfg.representation,
            latent_dim: cfg.latent_dim,
            repr_hidden: cfg.repr_hidden,
            conv_planes: cfg.conv_planes,
            head_hidden: cfg.head_hidden,
            lstm_hidden: cfg.lstm_hidden,
            projection_hidden: cfg.projection_hidden,
            projection_dim: cfg.projection_dim,
            predictor_hidden: cfg.predictor_hidden,
            support_half_width: cfg.support_half_width,
            support_bins: cfg.support_bins,
            value_prefix: cfg.use_value_prefix,
            lstm_reset_horizon: cfg.lstm_reset_horizon,
        }
    }

    pub fn obs_len(&self) -> usize {
        self.obs_shape.iter().product()
    }

    pub fn support(&self) -> Support {
        Support::new(self.support_half_width, self.support_bins)
    }
}

#[derive(Debug, Clone)]
enum Representation {
    Mlp {
        layers: Vec<DenseBnRelu>,
        res: ResBlock,
    },
    Conv {
        conv1: Conv,
        bn1: BatchNorm,
        conv2: Conv,
        bn2: BatchNorm,
        res: ConvResBlock,
        fc: DenseBnRelu,
        flat: usize,
    },
}

#[derive(Debug, Clone)]
enum RewardHead {
    ValuePrefix { lstm: Lstm, bn: BatchNorm, mlp: Mlp },
    PerStep { mlp: Mlp },
}

/// Recurrent context of the value-prefix head.
///
/// After `ζ` consecutive predictions the hidden state is zeroed and the
/// counter wraps, so a fresh window starts.
#[derive(Debug, Clone, PartialEq)]
pub struct ValuePrefixState<T> {
    pub h: Vec<T>,
    pub c: Vec<T>,
    pub steps_since_reset: usize,
}

impl<T: Real> ValuePrefixState<T> {
    pub fn zeros(hidden: usize) -> Self {
        ValuePrefixState {
            h: vec![T::zero(); hidden],
            c: vec![T::zero(); hidden],
            steps_since_reset: 0,
        }
    }

    pub fn is_reset(&self) -> bool {
        self.steps_since_reset == 0
    }
}

#[derive(Debug, Clone)]
pub struct InitialOutput<T> {
    pub latents: Vec<Vec<T>>,
    pub values: Vec<f64>,
    pub policy_logits: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct RecurrentOutput<T> {
    pub latents: Vec<Vec<T>>,
    pub vp_states: Vec<ValuePrefixState<T>>,
    /// Decoded value prefix, or per-step reward with the feedforward head.
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub policy_logits: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub env: String,
    pub spec: ModelSpec,
    pub config_hash: u64,
    pub training_step: usize,
}

#[derive(Debug, Clone)]
pub struct ModelSet<T: Real> {
    pub spec: ModelSpec,
    pub store: ParamStore<T>,
    repr: Representation,
    dyn_fc: Dense,
    dyn_bn: BatchNorm,
    dyn_res: ResBlock,
    reward: RewardHead,
    value: Mlp,
    policy: Mlp,
    projector: Mlp,
    predictor: Mlp,
}

impl<T: Real> ModelSet<T> {
    pub fn new(spec: ModelSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let s = &spec;
        let d = s.latent_dim;
        let [c, h, w] = s.obs_shape;
        let repr = match s.representation {
            RepresentationKind::Mlp => Representation::Mlp {
                layers: vec![
                    DenseBnRelu::new(&mut store, "repr.0", c * h * w, s.repr_hidden, &mut rng),
                    DenseBnRelu::new(&mut store, "repr.1", s.repr_hidden, d, &mut rng),
                ],
                res: ResBlock::new(&mut store, "repr.res", d, &mut rng),
            },
            RepresentationKind::Conv => {
                let p = s.conv_planes;
                let (h2, w2) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
                Representation::Conv {
                    conv1: Conv::new(&mut store, "repr.conv1", c, p, &mut rng),
                    bn1: BatchNorm::new(&mut store, "repr.conv1.bn", p),
                    conv2: Conv::new(&mut store, "repr.conv2", p, p, &mut rng),
                    bn2: BatchNorm::new(&mut store, "repr.conv2.bn", p),
                    res: ConvResBlock::new(&mut store, "repr.res", p, &mut rng),
                    fc: DenseBnRelu::new(&mut store, "repr.fc", p * h2 * w2, d, &mut rng),
                    flat: p * h2 * w2,
                }
            }
        };
        let dyn_fc = Dense::unbiased(&mut store, "dynamics.fc", d + s.num_actions, d, &mut rng);
        let dyn_bn = BatchNorm::new(&mut store, "dynamics.fc.bn", d);
        let dyn_res = ResBlock::new(&mut store, "dynamics.res", d, &mut rng);
        let bins = s.support_bins;
        let reward = if s.value_prefix {
            RewardHead::ValuePrefix {
                lstm: Lstm::new(&mut store, "value_prefix.lstm", d, s.lstm_hidden, &mut rng),
                bn: BatchNorm::new(&mut store, "value_prefix.bn", s.lstm_hidden),
                mlp: Mlp::new(&mut store, "value_prefix.mlp", &[s.lstm_hidden, s.head_hidden, bins], &mut rng, true),
            }
        } else {
            RewardHead::PerStep {
                mlp: Mlp::new(&mut store, "reward.mlp", &[d, s.head_hidden, bins], &mut rng, true),
            }
        };
        let value = Mlp::new(&mut store, "value.mlp", &[d, s.head_hidden, bins], &mut rng, true);
        let policy = Mlp::new(&mut store, "policy.mlp", &[d, s.head_hidden, s.num_actions], &mut rng, true);
        let (ph, pd) = (s.projection_hidden, s.projection_dim);
        let projector = Mlp::new(&mut store, "projector", &[d, ph, ph, pd], &mut rng, false);
        let predictor = Mlp::new(&mut store, "predictor", &[pd, s.predictor_hidden, pd], &mut rng, false);
        ModelSet {
            spec,
            store,
            repr,
            dyn_fc,
            dyn_bn,
            dyn_res,
            reward,
            value,
            policy,
            projector,
            predictor,
        }
    }

    pub fn support(&self) -> Support {
        self.spec.support()
    }

    pub fn uses_value_prefix(&self) -> bool {
        matches!(self.reward, RewardHead::ValuePrefix { .. })
    }

    /// Same layout and values at another precision.
    pub fn cast<U: Real>(&self) -> ModelSet<U> {
        ModelSet {
            spec: self.spec.clone(),
            store: self.store.cast(),
            repr: self.repr.clone(),
            dyn_fc: self.dyn_fc,
            dyn_bn: self.dyn_bn,
            dyn_res: self.dyn_res,
            reward: self.reward.clone(),
            value: self.value.clone(),
            policy: self.policy.clone(),
            projector: self.projector.clone(),
            predictor: self.predictor.clone(),
        }
    }

    /// Parameter-name prefixes of the projector and predictor.
    pub fn is_projection_param(name: &str) -> bool {
        name.starts_with("projector") || name.starts_with("predictor")
    }

    pub fn dynamics_param_ids(&self) -> Vec<crate::tensor::ParamId> {
        self.store
            .iter()
            .filter(|(_, p)| p.name.starts_with("dynamics"))
            .map(|(id, _)| id)
            .collect()
    }

    // ---- graph builders -------------------------------------------------

    /// `[n, C, H, W]` constant from flat stacked observations.
    pub fn observation_input(&self, g: &mut Graph<'_, T>, obs: &[&[f32]]) -> Result<Var, ModelError> {
        let len = self.spec.obs_len();
        let mut data = Vec::with_capacity(obs.len() * len);
        for o in obs {
            if o.len() != len {
                return Err(ModelError::ObservationShape {
                    expected: len,
                    got: o.len(),
                    shape: self.spec.obs_shape,
                });
            }
            data.extend(o.iter().map(|v| T::of(*v as f64)));
        }
        let [c, h, w] = self.spec.obs_shape;
        Ok(g.constant(Tensor::new(vec![obs.len(), c, h, w], data)?))
    }

    pub fn represent(&self, g: &mut Graph<'_, T>, obs: Var, train: bool) -> Result<Var, ModelError> {
        let n = g.shape(obs)[0];
        Ok(match &self.repr {
            Representation::Mlp { layers, res } => {
                let mut x = g.reshape(obs, &[n, self.spec.obs_len()])?;
                for l in layers {
                    x = l.forward(g, x, train)?;
                }
                res.forward(g, x, train)?
            }
            Representation::Conv {
                conv1,
                bn1,
                conv2,
                bn2,
                res,
                fc,
                flat,
            } => {
                let x = g.conv2d(obs, conv1.w, None, 1)?;
                let x = bn1.forward(g, x, train)?;
                let x = g.relu(x);
                let x = g.conv2d(x, conv2.w, None, 2)?;
                let x = bn2.forward(g, x, train)?;
                let x = g.relu(x);
                let x = res.forward(g, x, train)?;
                let x = g.reshape(x, &[n, *flat])?;
                fc.forward(g, x, train)?
            }
        })
    }

    pub fn action_input(&self, g: &mut Graph<'_, T>, actions: &[usize]) -> Result<Var, ModelError> {
        let a = self.spec.num_actions;
        let mut onehot = vec![T::zero(); actions.len() * a];
        for (i, &act) in actions.iter().enumerate() {
            if act >= a {
                return Err(ModelError::InvalidAction {
                    action: act,
                    num_actions: a,
                });
            }
            onehot[i * a + act] = T::one();
        }
        Ok(g.constant(Tensor::new(vec![actions.len(), a], onehot)?))
    }

    /// `relu(bn(fc([s, onehot(a)])) + s)` followed by a residual block.
    ///
    /// With every dynamics weight at zero the output is `relu(s)`, which is
    /// `s` itself for latents produced by this model.
    pub fn dynamics(&self, g: &mut Graph<'_, T>, s: Var, actions: &[usize], train: bool) -> Result<Var, ModelError> {
        let a = self.action_input(g, actions)?;
        let x = g.concat(&[s, a])?;
        let x = self.dyn_fc.forward(g, x)?;
        let x = self.dyn_bn.forward(g, x, train)?;
        let x = g.add(x, s)?;
        let x = g.relu(x);
        Ok(self.dyn_res.forward(g, x, train)?)
    }

    pub fn zero_lstm(&self, g: &mut Graph<'_, T>, n: usize) -> LstmState {
        let hidden = self.spec.lstm_hidden;
        let h = g.constant(Tensor::zeros(&[n, hidden]));
        let c = g.constant(Tensor::zeros(&[n, hidden]));
        LstmState { h, c }
    }

    /// Reward logits for `s`. The value-prefix head advances `state`; the
    /// feedforward head ignores it.
    pub fn reward_logits(
        &self,
        g: &mut Graph<'_, T>,
        s: Var,
        state: LstmState,
        train: bool,
    ) -> Result<(Var, LstmState), ModelError> {
        match &self.reward {
            RewardHead::ValuePrefix { lstm, bn, mlp } => {
                let next = lstm.forward(g, s, state)?;
                let x = bn.forward(g, next.h, train)?;
                let x = g.relu(x);
                Ok((mlp.forward(g, x, train)?, next))
            }
            RewardHead::PerStep { mlp } => Ok((mlp.forward(g, s, train)?, state)),
        }
    }

    pub fn value_logits(&self, g: &mut Graph<'_, T>, s: Var, train: bool) -> Result<Var, ModelError> {
        Ok(self.value.forward(g, s, train)?)
    }

    pub fn policy_logits(&self, g: &mut Graph<'_, T>, s: Var, train: bool) -> Result<Var, ModelError> {
        Ok(self.policy.forward(g, s, train)?)
    }

    /// Online branch `P2(P1(s))`, or the target branch `sg(P1(s))`.
    pub fn project(&self, g: &mut Graph<'_, T>, s: Var, with_predictor: bool, train: bool) -> Result<Var, ModelError> {
        let z = self.projector.forward(g, s, train)?;
        if with_predictor {
            Ok(self.predictor.forward(g, z, train)?)
        } else {
            Ok(g.stop_gradient(z))
        }
    }

    // ---- eval-mode batched inference -------------------------------------

    fn rows_f64(g: &Graph<'_, T>, v: Var) -> Vec<Vec<f64>> {
        let t = g.value(v);
        let w = t.row_len();
        t.data().chunks(w).map(|r| r.iter().map(|x| x.as_f64()).collect()).collect()
    }

    fn rows(g: &Graph<'_, T>, v: Var) -> Vec<Vec<T>> {
        let t = g.value(v);
        let w = t.row_len();
        t.data().chunks(w).map(|r| r.to_vec()).collect()
    }

    fn decode_rows(&self, g: &Graph<'_, T>, v: Var) -> Vec<f64> {
        let support = self.support();
        Self::rows_f64(g, v).iter().map(|r| support.decode_logits(r)).collect()
    }

    fn matrix(&self, g: &mut Graph<'_, T>, rows: &[&[T]]) -> Result<Var, ModelError> {
        let w = rows.first().map_or(0, |r| r.len());
        let data: Vec<T> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Ok(g.constant(Tensor::new(vec![rows.len(), w], data)?))
    }

    pub fn initial_inference(&self, obs: &[&[f32]]) -> Result<InitialOutput<T>, ModelError> {
        let mut g = Graph::new(&self.store);
        let x = self.observation_input(&mut g, obs)?;
        let s = self.represent(&mut g, x, false)?;
        let v = self.value_logits(&mut g, s, false)?;
        let p = self.policy_logits(&mut g, s, false)?;
        Ok(InitialOutput {
            latents: Self::rows(&g, s),
            values: self.decode_rows(&g, v),
            policy_logits: Self::rows_f64(&g, p),
        })
    }

    pub fn recurrent_inference(
        &self,
        latents: &[&[T]],
        vp_states: &[&ValuePrefixState<T>],
        actions: &[usize],
    ) -> Result<RecurrentOutput<T>, ModelError> {
        let mut g = Graph::new(&self.store);
        let s = self.matrix(&mut g, latents)?;
        let next = self.dynamics(&mut g, s, actions, false)?;
        let hs: Vec<&[T]> = vp_states.iter().map(|v| v.h.as_slice()).collect();
        let cs: Vec<&[T]> = vp_states.iter().map(|v| v.c.as_slice()).collect();
        let state = if self.uses_value_prefix() {
            LstmState {
                h: self.matrix(&mut g, &hs)?,
                c: self.matrix(&mut g, &cs)?,
            }
        } else {
            self.zero_lstm(&mut g, 0)
        };
        let (r, new_state) = self.reward_logits(&mut g, next, state, false)?;
        let v = self.value_logits(&mut g, next, false)?;
        let p = self.policy_logits(&mut g, next, false)?;
        let zeta = self.spec.lstm_reset_horizon;
        let new_vp = if self.uses_value_prefix() {
            let hrows = Self::rows(&g, new_state.h);
            let crows = Self::rows(&g, new_state.c);
            vp_states
                .iter()
                .zip(hrows.into_iter().zip(crows))
                .map(|(old, (h, c))| {
                    let steps = old.steps_since_reset + 1;
                    if steps >= zeta {
                        ValuePrefixState::zeros(self.spec.lstm_hidden)
                    } else {
                        ValuePrefixState {
                            h,
                            c,
                            steps_since_reset: steps,
                        }
                    }
                })
                .collect()
        } else {
            vp_states
                .iter()
                .map(|old| ValuePrefixState {
                    h: Vec::new(),
                    c: Vec::new(),
                    steps_since_reset: (old.steps_since_reset + 1) % zeta,
                })
                .collect()
        };
        Ok(RecurrentOutput {
            latents: Self::rows(&g, next),
            vp_states: new_vp,
            rewards: self.decode_rows(&g, r),
            values: self.decode_rows(&g, v),
            policy_logits: Self::rows_f64(&g, p),
        })
    }

    pub fn initial_vp_state(&self) -> ValuePrefixState<T> {
        if self.uses_value_prefix() {
            ValuePrefixState::zeros(self.spec.lstm_hidden)
        } else {
            ValuePrefixState {
                h: Vec::new(),
                c: Vec::new(),
                steps_since_reset: 0,
            }
        }
    }

    /// Value-prefix logits for a batch of latents in eval mode, with the
    /// window bookkeeping applied to the returned states.
    pub fn predict_value_prefix(
        &self,
        latents: &[&[T]],
        vp_states: &[&ValuePrefixState<T>],
    ) -> Result<(Vec<Vec<f64>>, Vec<ValuePrefixState<T>>), ModelError> {
        let mut g = Graph::new(&self.store);
        let s = self.matrix(&mut g, latents)?;
        let hs: Vec<&[T]> = vp_states.iter().map(|v| v.h.as_slice()).collect();
        let cs: Vec<&[T]> = vp_states.iter().map(|v| v.c.as_slice()).collect();
        let state = LstmState {
            h: self.matrix(&mut g, &hs)?,
            c: self.matrix(&mut g, &cs)?,
        };
        let (r, next) = self.reward_logits(&mut g, s, state, false)?;
        let zeta = self.spec.lstm_reset_horizon;
        let hrows = Self::rows(&g, next.h);
        let crows = Self::rows(&g, next.c);
        let states = vp_states
            .iter()
            .zip(hrows.into_iter().zip(crows))
            .map(|(old, (h, c))| {
                if old.steps_since_reset + 1 >= zeta {
                    ValuePrefixState::zeros(self.spec.lstm_hidden)
                } else {
                    ValuePrefixState {
                        h,
                        c,
                        steps_since_reset: old.steps_since_reset + 1,
                    }
                }
            })
            .collect();
        Ok((Self::rows_f64(&g, r), states))
    }

    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<(), ModelError> {
        let json = serde_json::to_string(meta).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let file = File::create(path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut w = BufWriter::new(file);
        write_checkpoint(&mut w, &CheckpointData::from_store(&self.store, json))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta), ModelError> {
        let file = File::open(path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
        let data: CheckpointData<T> = read_checkpoint(&mut BufReader::new(file))?;
        let meta: CheckpointMeta =
            serde_json::from_str(&data.metadata).map_err(|e| ModelError::Checkpoint(format!("metadata: {e}")))?;
        let mut model = ModelSet::new(meta.spec.clone(), 0);
        model.store.load_values(&data.named_tensors())?;
        Ok((model, meta))
    }
}
