use serde::Serialize;

use super::PipelineError;
use crate::env::{make_env, Environment, FrameStack};
use crate::mcts::{net_roots, run_batch, NoiseMode, SearchConfig};
use crate::model::ModelSet;
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mean: f64,
    pub median: f64,
    pub returns: Vec<f64>,
}

impl EvalReport {
    pub fn from_returns(returns: Vec<f64>) -> Self {
        let mean = if returns.is_empty() {
            0.0
        } else {
            returns.iter().sum::<f64>() / returns.len() as f64
        };
        let mut sorted = returns.clone();
        sorted.sort_by(f64::total_cmp);
        let median = match sorted.len() {
            0 => 0.0,
            n if n % 2 == 1 => sorted[n / 2],
            n => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
        };
        EvalReport { mean, median, returns }
    }
}

/// `(x − random) / (reference − random)`.
pub fn normalized_score(score: f64, random: f64, reference: f64) -> f64 {
    (score - random) / (reference - random)
}

/// Greedy search play, one episode per environment, all in lockstep.
pub fn evaluate<T: Real>(
    model: &ModelSet<T>,
    mut envs: Vec<Box<dyn Environment>>,
    search: &SearchConfig,
    frames_stacked: usize,
    max_steps: usize,
) -> Result<EvalReport, PipelineError> {
    let mut stacks = Vec::with_capacity(envs.len());
    for env in &mut envs {
        let first = env.reset().map_err(|e| PipelineError::Env(e.to_string()))?;
        let mut fs = FrameStack::new(frames_stacked);
        fs.reset(first);
        stacks.push(fs);
    }
    let expected = model.spec.obs_len();
    if let Some(s) = stacks.first() {
        let got = s.stacked().pixels.len();
        if got != expected {
            return Err(PipelineError::Mismatch(format!(
                "environment observations have {got} values, model expects {expected}"
            )));
        }
    }
    let mut returns = vec![0.0; envs.len()];
    let mut live = vec![true; envs.len()];
    for _ in 0..max_steps {
        let idx: Vec<usize> = (0..envs.len()).filter(|i| live[*i]).collect();
        if idx.is_empty() {
            break;
        }
        let obs: Vec<Vec<f32>> = idx.iter().map(|&i| stacks[i].stacked().pixels).collect();
        let refs: Vec<&[f32]> = obs.iter().map(|o| o.as_slice()).collect();
        let roots = net_roots(model, &refs, &vec![0; idx.len()])?;
        let results = run_batch(model, &roots, search, NoiseMode::Eval)?;
        for (&i, r) in idx.iter().zip(&results) {
            let step = envs[i].step(r.best_action).map_err(|e| PipelineError::Env(e.to_string()))?;
            returns[i] += step.reward;
            stacks[i].push(step.observation);
            if step.done {
                live[i] = false;
            }
        }
    }
    Ok(EvalReport::from_returns(returns))
}

/// Builds `episodes` environments seeded `seed, seed+1, …` and evaluates.
pub fn evaluate_env<T: Real>(
    model: &ModelSet<T>,
    env: &str,
    size: usize,
    episodes: usize,
    seed: u64,
    search: &SearchConfig,
    frames_stacked: usize,
) -> Result<EvalReport, PipelineError> {
    let mut envs = Vec::with_capacity(episodes);
    for e in 0..episodes {
        envs.push(make_env(env, size, seed.wrapping_add(e as u64)).map_err(|e| PipelineError::Env(e.to_string()))?);
    }
    evaluate(model, envs, search, frames_stacked, MAX_EVAL_STEPS)
}

pub const MAX_EVAL_STEPS: usize = 10_000;
