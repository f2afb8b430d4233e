use super::{Prediction, RootInput, SearchError, SearchModel};
use crate::model::{ModelError, ModelSet, ValuePrefixState};
use crate::tensor::Real;

/// Latent plus value-prefix context carried by each expanded node.
#[derive(Debug, Clone)]
pub struct NetState<T> {
    pub latent: Vec<T>,
    pub vp: ValuePrefixState<T>,
}

impl From<ModelError> for SearchError {
    fn from(e: ModelError) -> Self {
        SearchError::Model(e.to_string())
    }
}

impl<T: Real> SearchModel for ModelSet<T> {
    type State = NetState<T>;

    fn predicts_value_prefix(&self) -> bool {
        self.uses_value_prefix()
    }

    fn is_reset(&self, state: &Self::State) -> bool {
        state.vp.is_reset()
    }

    fn recurrent(
        &self,
        parents: &[&Self::State],
        actions: &[usize],
    ) -> Result<Vec<(Self::State, Prediction)>, SearchError> {
        let latents: Vec<&[T]> = parents.iter().map(|p| p.latent.as_slice()).collect();
        let vps: Vec<&ValuePrefixState<T>> = parents.iter().map(|p| &p.vp).collect();
        let out = self.recurrent_inference(&latents, &vps, actions)?;
        Ok(out
            .latents
            .into_iter()
            .zip(out.vp_states)
            .zip(out.rewards.into_iter().zip(out.values).zip(out.policy_logits))
            .map(|((latent, vp), ((reward, value), policy_logits))| {
                (
                    NetState { latent, vp },
                    Prediction {
                        reward,
                        value,
                        policy_logits,
                    },
                )
            })
            .collect())
    }
}

/// Evaluates stacked observations into search roots.
pub fn net_roots<T: Real>(
    model: &ModelSet<T>,
    obs: &[&[f32]],
    noise_seeds: &[u64],
) -> Result<Vec<RootInput<NetState<T>>>, SearchError> {
    let init = model.initial_inference(obs)?;
    Ok(init
        .latents
        .into_iter()
        .zip(init.values)
        .zip(init.policy_logits)
        .zip(noise_seeds)
        .map(|(((latent, value), policy_logits), &noise_seed)| RootInput {
            state: NetState {
                latent,
                vp: model.initial_vp_state(),
            },
            value,
            policy_logits,
            noise_seed,
        })
        .collect())
}
