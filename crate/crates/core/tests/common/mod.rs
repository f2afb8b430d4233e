#![allow(dead_code)]

use effzero::config::{Profile, RepresentationKind, RunConfig};
use effzero::model::{ModelSet, ModelSpec};
use effzero::reanalyze::{TargetStats, TrainBatch};
use effzero::replay::{GameSegment, TransitionRef};
use effzero::tensor::Real;
use effzero::trainer::TrainerConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_spec(value_prefix: bool) -> ModelSpec {
    ModelSpec {
        obs_shape: [2, 3, 3],
        num_actions: 3,
        representation: RepresentationKind::Mlp,
        latent_dim: 6,
        repr_hidden: 8,
        conv_planes: 2,
        head_hidden: 5,
        lstm_hidden: 4,
        projection_hidden: 5,
        projection_dim: 4,
        predictor_hidden: 3,
        support_half_width: 3.0,
        support_bins: 7,
        value_prefix,
        lstm_reset_horizon: 5,
    }
}

/// Adds uniform noise in `[-scale, scale)` to every trainable value.
pub fn randomize<T: Real>(model: &mut ModelSet<T>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        for v in model.store.get_mut(id).data_mut() {
            *v += T::of(rng.random_range(-scale..scale));
        }
    }
}

pub fn trainer_cfg(lstm_reset_horizon: usize) -> TrainerConfig {
    TrainerConfig {
        reward_coeff: 1.0,
        policy_coeff: 1.0,
        value_coeff: 0.25,
        consistency_coeff: 2.0,
        use_consistency: true,
        weight_decay: 1e-4,
        momentum: 0.9,
        grad_clip_norm: 5.0,
        dynamics_grad_scale: false,
        augmentation: None,
        lstm_reset_horizon,
        bn_momentum: 0.1,
    }
}

/// Random targets for [`tiny_spec`]: 18-value observations, 3 actions.
pub fn random_batch(n: usize, k: usize, seed: u64) -> TrainBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let obs = |rng: &mut ChaCha8Rng| (0..18).map(|_| rng.random_range(0.0..1.0f32)).collect::<Vec<_>>();
    let o: Vec<Vec<f32>> = (0..n).map(|_| obs(&mut rng)).collect();
    let next: Vec<Vec<Vec<f32>>> = (0..n).map(|_| (0..k).map(|_| obs(&mut rng)).collect()).collect();
    let policy = |rng: &mut ChaCha8Rng| {
        let raw: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect::<Vec<_>>()
    };
    let policies = (0..n).map(|_| (0..k).map(|_| policy(&mut rng)).collect()).collect();
    let grid = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..k).map(|_| rng.random_range(lo..hi)).collect()).collect()
    };
    let rewards = grid(&mut rng, -1.0, 1.0);
    let values = grid(&mut rng, -2.0, 2.0);
    let reward_targets = grid(&mut rng, -2.0, 2.0);
    TrainBatch {
        obs: o,
        actions: (0..n).map(|_| (0..k).map(|_| rng.random_range(0..3)).collect()).collect(),
        reward_targets,
        rewards,
        values,
        policies,
        next_obs: next,
        next_mask: (0..n).map(|b| (0..k).map(|i| b + i < n + k - 1).collect()).collect(),
        weights: (0..n).map(|_| rng.random_range(0.2..1.0)).collect(),
        indices: (0..n).map(|i| TransitionRef { slot: i, segment_id: 0 }).collect(),
        staleness: vec![0; n],
        stats: TargetStats::default(),
    }
}

/// A terminal segment of `len` steps with two-value frames and no history.
pub fn toy_segment(len: usize, step: usize) -> GameSegment {
    GameSegment {
        frame_shape: [1, 1, 2],
        frames_stacked: 1,
        frames: (0..=len).map(|i| vec![i as f32, 0.5]).collect(),
        actions: vec![0; len],
        rewards: vec![0.0; len],
        policies: vec![vec![0.5, 0.5]; len],
        root_values: vec![0.0; len],
        collected_at: vec![step; len],
        len,
        episode_start: true,
        terminal: true,
        snapshots: Vec::new(),
    }
}

/// Toy profile shrunk to a few seconds of work.
pub fn tiny_run(env: &str, size: usize, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::for_profile(Profile::Toy);
    cfg.env = env.into();
    cfg.env_size = size;
    cfg.seed = seed;
    cfg.training_steps = 20;
    cfg.env_steps_budget = 100;
    cfg.min_replay_size = 30;
    cfg.batch_size = 8;
    cfg.num_simulations = 4;
    cfg.selfplay_envs = 2;
    cfg.eval_episodes = 2;
    cfg.eval_interval = 10;
    cfg.checkpoint_interval = 10;
    cfg.lr_decay_steps = 15;
    cfg.selfplay_model_interval = 5;
    cfg.target_model_interval = 10;
    cfg.validate().unwrap();
    cfg
}

/// Straight-line versions of the closed-form rules, written independently
/// of the library code.
pub mod reference {
    pub fn horizon(t_current: usize, t_s: usize, k: usize, tau: f64, t_total: usize) -> usize {
        let age = t_current as f64 - t_s as f64;
        let l = k as f64 - (age / (tau * t_total as f64)).floor();
        l.clamp(1.0, k as f64) as usize
    }

    pub fn value_target(rewards: &[f64], gamma: f64, bootstrap: Option<f64>) -> f64 {
        let mut z = 0.0;
        for (i, u) in rewards.iter().enumerate() {
            z += gamma.powi(i as i32) * u;
        }
        if let Some(v) = bootstrap {
            z += gamma.powi(rewards.len() as i32) * v;
        }
        z
    }

    /// Scores with unvisited children valued at the mean-Q, plus that mean-Q.
    pub fn uct(priors: &[f64], visits: &[u32], q: &[f64], parent_mean_q: f64, c1: f64, c2: f64) -> (Vec<f64>, f64) {
        let mut sum = parent_mean_q;
        let mut count = 1.0;
        for a in 0..priors.len() {
            if visits[a] > 0 {
                sum += q[a];
                count += 1.0;
            }
        }
        let mq = sum / count;
        let total: f64 = visits.iter().map(|v| *v as f64).sum();
        let scores = (0..priors.len())
            .map(|a| {
                let qa = if visits[a] > 0 { q[a] } else { mq };
                let u = priors[a] * total.sqrt() / (1.0 + visits[a] as f64) * (c1 + ((total + c2 + 1.0) / c2).ln());
                qa + u
            })
            .collect();
        (scores, mq)
    }

    pub fn first_argmax(xs: &[f64]) -> usize {
        let mut best = 0;
        for i in 1..xs.len() {
            if xs[i] > xs[best] {
                best = i;
            }
        }
        best
    }

    pub fn visit_policy(visits: &[u32], temperature: f64) -> Vec<f64> {
        let w: Vec<f64> = visits.iter().map(|n| (*n as f64).powf(1.0 / temperature)).collect();
        let s: f64 = w.iter().sum();
        w.iter().map(|x| x / s).collect()
    }

    pub fn mix(priors: &[f64], noise: &[f64], frac: f64) -> Vec<f64> {
        (0..priors.len()).map(|i| priors[i] * (1.0 - frac) + noise[i] * frac).collect()
    }

    pub fn soft_minmax(seen: &[f64], q: f64, eps: f64) -> f64 {
        if seen.is_empty() {
            return 0.0;
        }
        let lo = seen.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = seen.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let width = if hi - lo < eps { eps } else { hi - lo };
        (q - lo) / width
    }

    pub fn priority_probabilities(errors: &[f64], alpha: f64) -> Vec<f64> {
        let p: Vec<f64> = errors.iter().map(|e| e.abs().max(1e-6).powf(alpha)).collect();
        let s: f64 = p.iter().sum();
        p.iter().map(|x| x / s).collect()
    }

    const EPS: f64 = 0.001;

    pub fn h(x: f64) -> f64 {
        x.signum() * ((x.abs() + 1.0).sqrt() - 1.0) + EPS * x
    }

    /// Inverse of `h` by bisection, monotone so it converges to within ulp.
    pub fn h_inv(y: f64) -> f64 {
        let (mut lo, mut hi) = (-1e12, 1e12);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if h(mid) < y {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    pub fn two_hot(x: f64, half_width: f64, bins: usize) -> Vec<f64> {
        let step = 2.0 * half_width / (bins - 1) as f64;
        let y = h(x).clamp(-half_width, half_width);
        let mut out = vec![0.0; bins];
        let pos = (y + half_width) / step;
        let lo = pos.floor() as usize;
        if lo >= bins - 1 {
            out[bins - 1] = 1.0;
        } else {
            let frac = pos - lo as f64;
            out[lo] += 1.0 - frac;
            out[lo + 1] += frac;
        }
        out
    }

    pub fn decode(probs: &[f64], half_width: f64) -> f64 {
        let bins = probs.len();
        let step = 2.0 * half_width / (bins - 1) as f64;
        let y: f64 = probs.iter().enumerate().map(|(i, p)| p * (-half_width + i as f64 * step)).sum();
        h_inv(y)
    }
}
