use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{reanalyze_targets, ReanalyzeConfig, ReanalyzeError};
use crate::env::{Environment, FrameStack, Observation};
use crate::mcts::{net_roots, run_batch, NoiseMode};
use crate::model::ModelSet;
use crate::replay::{ReplayBuffer, Sampled};
use crate::tensor::Real;

/// Mean L1 distance between value targets and Monte-Carlo returns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ValueErrorReport {
    pub correction: bool,
    /// Targets at the sampled state.
    pub current: f64,
    /// Targets at the next unrolled states.
    pub unrolled: f64,
    pub all: f64,
    pub samples: usize,
}

/// Number of unrolled positions compared after the current one.
pub const UNROLLED_STATES: usize = 5;

/// Discounted return of the model's greedy search policy from `env`, with
/// `history` as the frames seen so far (oldest first).
pub fn policy_return<T: Real, E: Environment + ?Sized>(
    model: &ModelSet<T>,
    env: &mut E,
    history: &[Observation],
    cfg: &ReanalyzeConfig,
    max_steps: usize,
) -> Result<f64, ReanalyzeError> {
    let frames = history.len();
    let mut stack = FrameStack::new(frames);
    stack.reset(history[0].clone());
    for f in &history[1..] {
        stack.push(f.clone());
    }
    let mut ret = 0.0;
    let mut g = 1.0;
    for _ in 0..max_steps {
        let obs = stack.stacked().pixels;
        let roots = net_roots(model, &[obs.as_slice()], &[0])?;
        let res = run_batch(model, &roots, &cfg.search, NoiseMode::Eval)?;
        let step = match env.step(res[0].best_action) {
            Ok(s) => s,
            Err(_) => break,
        };
        ret += g * step.reward;
        g *= cfg.discount;
        if step.done {
            break;
        }
        stack.push(step.observation);
    }
    Ok(ret)
}

/// Compares value targets built from `buffer` against returns of the final
/// policy rolled out from the stored environment states.
///
/// `samples` transitions are drawn uniformly from segments carrying
/// snapshots. Deterministic environments give exact returns, so one
/// rollout per state suffices.
pub fn measure_value_error<T: Real>(
    buffer: &ReplayBuffer,
    model: &ModelSet<T>,
    cfg: &ReanalyzeConfig,
    t_current: usize,
    samples: usize,
    max_steps: usize,
    seed: u64,
) -> Result<ValueErrorReport, ReanalyzeError> {
    let cfg = ReanalyzeConfig {
        unroll_steps: UNROLLED_STATES + 1,
        policy_ratio: 0.0,
        ..*cfg
    };
    let pool: Vec<_> = buffer
        .transitions()
        .into_iter()
        .filter_map(|t| buffer.resolve(t).map(|(s, p)| (t, s, p)))
        .filter(|(_, s, _)| !s.snapshots.is_empty())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked: Vec<Sampled> = (0..samples.min(pool.len()))
        .map(|_| {
            let (index, segment, pos) = pool[rng.random_range(0..pool.len())].clone();
            Sampled {
                index,
                segment,
                pos,
                probability: 0.0,
                weight: 1.0,
            }
        })
        .collect();
    let mut sums = [0.0f64; UNROLLED_STATES + 1];
    let mut counts = [0usize; UNROLLED_STATES + 1];
    if !picked.is_empty() {
        let batch = reanalyze_targets(&picked, model, &cfg, t_current, seed)?;
        for (b, s) in picked.iter().enumerate() {
            let seg = &s.segment;
            for i in 0..=UNROLLED_STATES {
                let p = s.pos + i;
                if p >= seg.total() {
                    break;
                }
                let mut env = seg.snapshots[p].restore(seed);
                let history: Vec<Observation> = seg.frames[p..p + seg.frames_stacked]
                    .iter()
                    .map(|f| Observation {
                        shape: seg.frame_shape,
                        pixels: f.clone(),
                    })
                    .collect();
                let truth = policy_return(model, &mut env, &history, &cfg, max_steps)?;
                sums[i] += (batch.values[b][i] - truth).abs();
                counts[i] += 1;
            }
        }
    }
    let mean = |s: f64, c: usize| if c == 0 { 0.0 } else { s / c as f64 };
    let unrolled_sum: f64 = sums[1..].iter().sum();
    let unrolled_count: usize = counts[1..].iter().sum();
    Ok(ValueErrorReport {
        correction: cfg.correction,
        current: mean(sums[0], counts[0]),
        unrolled: mean(unrolled_sum, unrolled_count),
        all: mean(sums.iter().sum(), counts.iter().sum()),
        samples: picked.len(),
    })
}
