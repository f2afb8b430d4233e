use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::PipelineError;
use crate::env::{clip_reward, Environment, FrameStack};
use crate::mcts::{net_roots, search_trees, visit_policy, NoiseMode, SearchConfig};
use crate::model::ModelSet;
use crate::replay::{GameSegment, SegmentBuilder, StepRecord};

struct Slot {
    env: Box<dyn Environment>,
    stack: FrameStack,
    builder: SegmentBuilder,
    episode_return: f64,
    live: bool,
}

/// What one lockstep round of self-play produced.
#[derive(Debug, Default)]
pub struct ActorOutput {
    pub segments: Vec<GameSegment>,
    /// Undiscounted, unclipped returns of episodes that finished.
    pub episode_returns: Vec<f64>,
    pub env_steps: usize,
    /// Actions taken this round, one per live env.
    pub actions: Vec<usize>,
}

/// Drives a group of environments with batched searches.
pub struct Actor {
    slots: Vec<Slot>,
    search: SearchConfig,
    clip: bool,
    rng: ChaCha8Rng,
    noise_counter: u64,
    pub restarts: usize,
}

impl Actor {
    pub fn new(
        envs: Vec<Box<dyn Environment>>,
        search: SearchConfig,
        frames_stacked: usize,
        segment_length: usize,
        padding: usize,
        clip_rewards: bool,
        seed: u64,
    ) -> Self {
        let slots = envs
            .into_iter()
            .map(|env| Slot {
                env,
                stack: FrameStack::new(frames_stacked),
                builder: SegmentBuilder::new(segment_length, padding, frames_stacked),
                episode_return: 0.0,
                live: false,
            })
            .collect();
        Actor {
            slots,
            search,
            clip: clip_rewards,
            rng: ChaCha8Rng::seed_from_u64(seed),
            noise_counter: seed.wrapping_mul(0x9e37_79b9_7f4a_7c15),
            restarts: 0,
        }
    }

    pub fn num_envs(&self) -> usize {
        self.slots.len()
    }

    #[cfg(test)]
    pub(crate) fn observations(&self) -> Vec<Vec<f32>> {
        self.slots.iter().map(|s| s.stack.stacked().pixels).collect()
    }

    fn start(slot: &mut Slot) -> Result<(), PipelineError> {
        let first = slot.env.reset().map_err(|e| PipelineError::Env(e.to_string()))?;
        slot.stack.reset(first.clone());
        slot.builder.reset(&first);
        slot.episode_return = 0.0;
        slot.live = true;
        Ok(())
    }

    /// One search and env step per environment, up to `max_steps` of them.
    pub fn step<T: crate::tensor::Real>(
        &mut self,
        model: &ModelSet<T>,
        learner_step: usize,
        temperature: f64,
        max_steps: usize,
    ) -> Result<ActorOutput, PipelineError> {
        let mut out = ActorOutput::default();
        let n = self.slots.len().min(max_steps);
        if n == 0 {
            return Ok(out);
        }
        for slot in &mut self.slots[..n] {
            if !slot.live {
                Self::start(slot)?;
            }
        }
        let obs: Vec<Vec<f32>> = self.slots[..n].iter().map(|s| s.stack.stacked().pixels).collect();
        let refs: Vec<&[f32]> = obs.iter().map(|o| o.as_slice()).collect();
        let seeds: Vec<u64> = (0..n)
            .map(|_| {
                self.noise_counter = self.noise_counter.wrapping_add(1);
                self.noise_counter
            })
            .collect();
        let roots = net_roots(model, &refs, &seeds)?;
        let trees = search_trees(model, &roots, &self.search, NoiseMode::Train)?;
        for (slot, tree) in self.slots[..n].iter_mut().zip(&trees) {
            let result = tree.result();
            let pi = visit_policy(&result.visit_counts, temperature);
            let action = WeightedIndex::new(&pi)
                .map(|d| d.sample(&mut self.rng))
                .unwrap_or(result.best_action);
            let snapshot = slot.env.state_snapshot();
            let step = match slot.env.step(action) {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("env step failed, restarting episode: {e}");
                    self.restarts += 1;
                    slot.live = false;
                    continue;
                }
            };
            out.env_steps += 1;
            out.actions.push(action);
            slot.episode_return += step.reward;
            let reward = if self.clip { clip_reward(step.reward) } else { step.reward };
            let done = step.done;
            slot.stack.push(step.observation.clone());
            out.segments.extend(slot.builder.push(StepRecord {
                action,
                reward,
                policy: result.policy.clone(),
                root_value: result.root_value,
                collected_at: learner_step,
                snapshot,
                next: step.observation,
                done,
            }));
            if done {
                out.episode_returns.push(slot.episode_return);
                slot.live = false;
            }
        }
        Ok(out)
    }

    /// Emits any partially built segments.
    pub fn flush(&mut self) -> Vec<GameSegment> {
        self.slots.iter_mut().filter_map(|s| s.builder.flush()).collect()
    }
}
