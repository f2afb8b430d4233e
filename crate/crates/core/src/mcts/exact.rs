use std::marker::PhantomData;

use super::{Prediction, RootInput, SearchError, SearchModel};
use crate::env::Environment;

/// The true environment used as the search model: exact transitions and
/// rewards with uniform priors. Leaves are valued at zero, or with
/// [`EnvModel::with_rollouts`] at the exact expected discounted return of a
/// uniformly random policy played to the end of the episode. Terminal states
/// are leaves.
#[derive(Debug, Clone, Copy)]
pub struct EnvModel<E> {
    rollout_discount: Option<f64>,
    _env: PhantomData<E>,
}

#[derive(Debug, Clone)]
pub struct EnvState<E> {
    pub env: E,
    pub done: bool,
}

impl<E: Environment + Clone> EnvModel<E> {
    pub fn new() -> Self {
        EnvModel {
            rollout_discount: None,
            _env: PhantomData,
        }
    }

    /// Enumerates every action sequence below a leaf, so only suited to
    /// short episodes with few actions.
    pub fn with_rollouts(discount: f64) -> Self {
        EnvModel {
            rollout_discount: Some(discount),
            _env: PhantomData,
        }
    }

    fn leaf_value(&self, state: &EnvState<E>) -> Result<f64, SearchError> {
        match self.rollout_discount {
            Some(gamma) if !state.done => uniform_return(&state.env, gamma),
            _ => Ok(0.0),
        }
    }

    /// Root at the environment's current state.
    pub fn root(&self, env: &E, noise_seed: u64) -> RootInput<EnvState<E>> {
        RootInput {
            state: EnvState {
                env: env.clone(),
                done: false,
            },
            value: 0.0,
            policy_logits: vec![0.0; env.num_actions()],
            noise_seed,
        }
    }
}

impl<E: Environment + Clone> Default for EnvModel<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Environment + Clone> SearchModel for EnvModel<E> {
    type State = EnvState<E>;

    fn predicts_value_prefix(&self) -> bool {
        false
    }

    fn is_reset(&self, _state: &Self::State) -> bool {
        true
    }

    fn is_terminal(&self, state: &Self::State) -> bool {
        state.done
    }

    fn recurrent(
        &self,
        parents: &[&Self::State],
        actions: &[usize],
    ) -> Result<Vec<(Self::State, Prediction)>, SearchError> {
        parents
            .iter()
            .zip(actions)
            .map(|(p, &a)| {
                let mut next = (*p).clone();
                let n = next.env.num_actions();
                let reward = if next.done {
                    0.0
                } else {
                    let r = next.env.step(a).map_err(|e| SearchError::Model(e.to_string()))?;
                    next.done = r.done;
                    r.reward
                };
                let value = self.leaf_value(&next)?;
                Ok((
                    next,
                    Prediction {
                        reward,
                        value,
                        policy_logits: vec![0.0; n],
                    },
                ))
            })
            .collect()
    }
}

fn uniform_return<E: Environment + Clone>(env: &E, gamma: f64) -> Result<f64, SearchError> {
    let n = env.num_actions();
    let mut total = 0.0;
    for a in 0..n {
        let mut e = env.clone();
        let r = e.step(a).map_err(|err| SearchError::Model(err.to_string()))?;
        total += r.reward + if r.done { 0.0 } else { gamma * uniform_return(&e, gamma)? };
    }
    Ok(total / n as f64)
}
