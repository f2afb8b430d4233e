//! Training targets: re-searched policies, corrected value targets and
//! value-prefix sums.

mod diagnostics;

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use diagnostics::{measure_value_error, ValueErrorReport};

use crate::config::RunConfig;
use crate::mcts::{net_roots, run_batch, NoiseMode, SearchConfig, SearchError};
use crate::model::{codec::transform, ModelError, ModelSet};
use crate::replay::{GameSegment, Sampled, TransitionRef};
use crate::tensor::Real;

#[derive(Debug, Error)]
pub enum ReanalyzeError {
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// `clip(k − ⌊age / (τ·T_total)⌋, 1, k)`.
pub fn compute_horizon(t_current: usize, t_s: usize, k: usize, tau: f64, t_total: usize) -> usize {
    assert!(t_current >= t_s && tau > 0.0 && k >= 1);
    let age = (t_current - t_s) as f64;
    let drop = (age / (tau * t_total as f64)).floor();
    if drop >= k as f64 {
        1
    } else {
        (k - drop as usize).max(1)
    }
}

/// `Σ_{i<l} γ^i u_{t+i} + γ^l · bootstrap`; `None` drops the bootstrap term
/// (the episode ended inside the horizon).
pub fn compute_value_target(rewards: &[f64], discount: f64, bootstrap: Option<f64>) -> f64 {
    let mut z = 0.0;
    let mut g = 1.0;
    for u in rewards {
        z += g * u;
        g *= discount;
    }
    if let Some(v) = bootstrap {
        z += g * v;
    }
    z
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReanalyzeConfig {
    pub discount: f64,
    pub unroll_steps: usize,
    pub td_steps: usize,
    pub horizon_tau: f64,
    pub total_steps: usize,
    pub correction: bool,
    pub policy_ratio: f64,
    pub value_prefix: bool,
    pub lstm_reset_horizon: usize,
    pub num_actions: usize,
    pub search: SearchConfig,
}

impl ReanalyzeConfig {
    pub fn from_run(cfg: &RunConfig, num_actions: usize) -> Self {
        ReanalyzeConfig {
            discount: cfg.discount,
            unroll_steps: cfg.unroll_steps,
            td_steps: cfg.td_steps,
            horizon_tau: cfg.horizon_tau,
            total_steps: cfg.training_steps,
            correction: cfg.use_off_policy_correction,
            policy_ratio: cfg.reanalyze_policy_ratio,
            value_prefix: cfg.use_value_prefix,
            lstm_reset_horizon: cfg.lstm_reset_horizon,
            num_actions,
            search: SearchConfig::from_run(cfg),
        }
    }

    /// Lookahead transitions a segment must carry for full-length targets.
    pub fn padding(&self) -> usize {
        self.unroll_steps + self.td_steps
    }
}

/// How the value target of one unroll position is bootstrapped.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Bootstrap {
    /// Past the end of the episode: value 0.
    Absorbing,
    /// Rewards up to the end of the episode, no bootstrap.
    Terminal { end: usize },
    /// Fresh root value of a search at `pos`.
    Search { pos: usize },
    /// Target network value at `pos`.
    Network { pos: usize },
}

#[derive(Debug, Clone)]
struct SampleContext {
    segment_id: u64,
    segment: Arc<GameSegment>,
    pos: usize,
    reanalyze_policy: bool,
    bootstraps: Vec<Bootstrap>,
    filler_actions: Vec<usize>,
}

/// Everything a target worker needs, sliced out of the buffer.
#[derive(Debug, Clone)]
pub struct BatchContext {
    samples: Vec<SampleContext>,
    pub indices: Vec<TransitionRef>,
    pub weights: Vec<f64>,
    pub staleness: Vec<usize>,
    pub seed: u64,
    pub missing_bootstrap: usize,
}

/// One learner batch with targets for `unroll_steps` positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    /// Stacked observation at `t`.
    pub obs: Vec<Vec<f32>>,
    /// `a_{t..t+K−1}`; arbitrary filler past the episode end.
    pub actions: Vec<Vec<usize>>,
    /// Observed `u_{t+i}`, 0 past the end.
    pub rewards: Vec<Vec<f64>>,
    /// Target for the reward head after `i+1` unrolled steps: the
    /// undiscounted running sum within the LSTM window, or `u_{t+i}` for the
    /// per-step head.
    pub reward_targets: Vec<Vec<f64>>,
    /// `z_{t+i}` for `i < K`.
    pub values: Vec<Vec<f64>>,
    pub policies: Vec<Vec<Vec<f64>>>,
    /// Stacked observation at `t+i+1` for the consistency target.
    pub next_obs: Vec<Vec<Vec<f32>>>,
    /// `next_obs[b][i]` is a real observation.
    pub next_mask: Vec<Vec<bool>>,
    pub weights: Vec<f64>,
    pub indices: Vec<TransitionRef>,
    pub staleness: Vec<usize>,
    pub stats: TargetStats,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize)]
pub struct TargetStats {
    pub searches: usize,
    pub reanalyzed_policies: usize,
    /// Value targets outside the categorical support (clamped when encoded).
    pub saturated_values: usize,
    /// Bootstraps that fell back to the target network for lack of an observation.
    pub missing_bootstrap: usize,
    pub mean_horizon: f64,
}

fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn position_seed(seed: u64, segment_id: u64, pos: usize) -> u64 {
    mix(seed ^ mix(segment_id ^ mix(pos as u64)))
}

/// Slices samples into per-position bootstrap plans. Cheap; no model calls.
pub fn prepare_context(samples: &[Sampled], cfg: &ReanalyzeConfig, t_current: usize, seed: u64) -> BatchContext {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k_unroll = cfg.unroll_steps;
    let mut missing = 0;
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let seg = &s.segment;
        let total = seg.total();
        let mut bootstraps = Vec::with_capacity(k_unroll);
        for i in 0..k_unroll {
            let p = s.pos + i;
            if p >= total {
                bootstraps.push(Bootstrap::Absorbing);
                continue;
            }
            let horizon = if cfg.correction {
                let t_s = seg.collected_at[p].min(t_current);
                compute_horizon(t_current, t_s, cfg.td_steps, cfg.horizon_tau, cfg.total_steps)
            } else {
                cfg.td_steps
            };
            let b = p + horizon;
            let plan = if b >= total && seg.terminal {
                Bootstrap::Terminal { end: total }
            } else if b > total {
                // the segment was cut before its lookahead was collected
                missing += 1;
                Bootstrap::Network { pos: total }
            } else if cfg.correction {
                Bootstrap::Search { pos: b }
            } else {
                Bootstrap::Network { pos: b }
            };
            bootstraps.push(plan);
        }
        let filler_actions = (0..k_unroll).map(|_| rng.random_range(0..cfg.num_actions)).collect();
        out.push(SampleContext {
            segment_id: s.index.segment_id,
            segment: Arc::clone(seg),
            pos: s.pos,
            reanalyze_policy: rng.random::<f64>() < cfg.policy_ratio,
            bootstraps,
            filler_actions,
        });
    }
    BatchContext {
        indices: samples.iter().map(|s| s.index).collect(),
        weights: samples.iter().map(|s| s.weight).collect(),
        staleness: samples
            .iter()
            .map(|s| t_current.saturating_sub(s.segment.collected_at[s.pos]))
            .collect(),
        samples: out,
        seed,
        missing_bootstrap: missing,
    }
}

/// Runs the searches and network evaluations a context needs and assembles
/// the batch.
pub fn compute_targets<T: Real>(
    ctx: &BatchContext,
    target: &ModelSet<T>,
    cfg: &ReanalyzeConfig,
) -> Result<TrainBatch, ReanalyzeError> {
    let k_unroll = cfg.unroll_steps;
    // unique (segment, position) keys needing a search or a network value
    let mut search_keys: Vec<(u64, usize)> = Vec::new();
    let mut search_obs: Vec<Vec<f32>> = Vec::new();
    let mut search_index: HashMap<(u64, usize), usize> = HashMap::new();
    let mut net_keys: HashMap<(u64, usize), usize> = HashMap::new();
    let mut net_obs: Vec<Vec<f32>> = Vec::new();
    for s in &ctx.samples {
        let mut want_search = |pos: usize| {
            let key = (s.segment_id, pos);
            if !search_index.contains_key(&key) {
                search_index.insert(key, search_keys.len());
                search_keys.push(key);
                search_obs.push(s.segment.stacked(pos));
            }
        };
        if s.reanalyze_policy {
            for i in 0..k_unroll {
                if s.pos + i < s.segment.total() {
                    want_search(s.pos + i);
                }
            }
        }
        for b in &s.bootstraps {
            match *b {
                Bootstrap::Search { pos } => want_search(pos),
                Bootstrap::Network { pos } => {
                    let key = (s.segment_id, pos);
                    if !net_keys.contains_key(&key) {
                        net_keys.insert(key, net_obs.len());
                        net_obs.push(s.segment.stacked(pos));
                    }
                }
                _ => {}
            }
        }
    }
    let results = if search_obs.is_empty() {
        Vec::new()
    } else {
        let refs: Vec<&[f32]> = search_obs.iter().map(|o| o.as_slice()).collect();
        let seeds: Vec<u64> = search_keys
            .iter()
            .map(|&(id, pos)| position_seed(ctx.seed, id, pos))
            .collect();
        let roots = net_roots(target, &refs, &seeds)?;
        run_batch(target, &roots, &cfg.search, NoiseMode::Reanalyze)?
    };
    let net_values = if net_obs.is_empty() {
        Vec::new()
    } else {
        let refs: Vec<&[f32]> = net_obs.iter().map(|o| o.as_slice()).collect();
        target.initial_inference(&refs)?.values
    };
    let support = target.spec.support();
    let uniform = vec![1.0 / cfg.num_actions as f64; cfg.num_actions];
    let mut stats = TargetStats {
        searches: search_keys.len(),
        missing_bootstrap: ctx.missing_bootstrap,
        ..TargetStats::default()
    };
    let mut horizons = 0usize;
    let mut horizon_count = 0usize;
    let mut batch = TrainBatch {
        obs: Vec::with_capacity(ctx.samples.len()),
        actions: Vec::new(),
        rewards: Vec::new(),
        reward_targets: Vec::new(),
        values: Vec::new(),
        policies: Vec::new(),
        next_obs: Vec::new(),
        next_mask: Vec::new(),
        weights: ctx.weights.clone(),
        indices: ctx.indices.clone(),
        staleness: ctx.staleness.clone(),
        stats,
    };
    for s in &ctx.samples {
        let seg = &s.segment;
        let total = seg.total();
        let mut actions = Vec::with_capacity(k_unroll);
        let mut rewards = Vec::with_capacity(k_unroll);
        let mut policies = Vec::with_capacity(k_unroll);
        let mut values = Vec::with_capacity(k_unroll);
        let mut next_obs = Vec::with_capacity(k_unroll);
        let mut next_mask = Vec::with_capacity(k_unroll);
        for i in 0..k_unroll {
            let p = s.pos + i;
            if p < total {
                actions.push(seg.actions[p]);
                rewards.push(seg.rewards[p]);
                let fresh = s.reanalyze_policy.then(|| &results[search_index[&(s.segment_id, p)]]);
                match fresh {
                    Some(r) => {
                        policies.push(r.policy.clone());
                        stats.reanalyzed_policies += 1;
                    }
                    None => policies.push(seg.policies[p].clone()),
                }
                next_obs.push(seg.stacked(p + 1));
                next_mask.push(true);
            } else {
                actions.push(s.filler_actions[i]);
                rewards.push(0.0);
                policies.push(uniform.clone());
                next_obs.push(seg.stacked(total));
                next_mask.push(false);
            }
            let z = match s.bootstraps[i] {
                Bootstrap::Absorbing => 0.0,
                Bootstrap::Terminal { end } => compute_value_target(&seg.rewards[p..end], cfg.discount, None),
                Bootstrap::Search { pos } => {
                    let v = results[search_index[&(s.segment_id, pos)]].root_value;
                    compute_value_target(&seg.rewards[p..pos], cfg.discount, Some(v))
                }
                Bootstrap::Network { pos } => {
                    let v = net_values[net_keys[&(s.segment_id, pos)]];
                    compute_value_target(&seg.rewards[p..pos], cfg.discount, Some(v))
                }
            };
            match s.bootstraps[i] {
                Bootstrap::Search { pos } | Bootstrap::Network { pos } => {
                    horizons += pos - p;
                    horizon_count += 1;
                }
                Bootstrap::Terminal { end } => {
                    horizons += end - p;
                    horizon_count += 1;
                }
                Bootstrap::Absorbing => {}
            }
            if transform(z).abs() > support.half_width {
                stats.saturated_values += 1;
            }
            values.push(z);
        }
        batch.reward_targets.push(reward_targets(&rewards, cfg));
        batch.obs.push(seg.stacked(s.pos));
        batch.actions.push(actions);
        batch.rewards.push(rewards);
        batch.policies.push(policies);
        batch.values.push(values);
        batch.next_obs.push(next_obs);
        batch.next_mask.push(next_mask);
    }
    if stats.missing_bootstrap > 0 {
        log::debug!("{} value bootstraps fell back to the target network", stats.missing_bootstrap);
    }
    stats.mean_horizon = if horizon_count > 0 {
        horizons as f64 / horizon_count as f64
    } else {
        0.0
    };
    batch.stats = stats;
    Ok(batch)
}

/// Reward-head targets for each unroll step given observed rewards.
pub fn reward_targets(rewards: &[f64], cfg: &ReanalyzeConfig) -> Vec<f64> {
    if !cfg.value_prefix {
        return rewards.to_vec();
    }
    let zeta = cfg.lstm_reset_horizon;
    let mut out = Vec::with_capacity(rewards.len());
    let mut sum = 0.0;
    for (i, u) in rewards.iter().enumerate() {
        if i % zeta == 0 {
            sum = 0.0;
        }
        sum += u;
        out.push(sum);
    }
    out
}

/// [`prepare_context`] followed by [`compute_targets`].
pub fn reanalyze_targets<T: Real>(
    samples: &[Sampled],
    target: &ModelSet<T>,
    cfg: &ReanalyzeConfig,
    t_current: usize,
    seed: u64,
) -> Result<TrainBatch, ReanalyzeError> {
    let ctx = prepare_context(samples, cfg, t_current, seed);
    compute_targets(&ctx, target, cfg)
}
