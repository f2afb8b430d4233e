use super::*;
use crate::config::Profile;
use crate::env::{BuiltinEnv, Catcher};
use crate::model::tests::randomize;

fn tiny(env: &str, size: usize) -> RunConfig {
    let mut cfg = RunConfig::for_profile(Profile::Toy);
    cfg.env = env.into();
    cfg.env_size = size;
    cfg.training_steps = 24;
    cfg.env_steps_budget = 120;
    cfg.min_replay_size = 40;
    cfg.batch_size = 8;
    cfg.num_simulations = 4;
    cfg.selfplay_envs = 2;
    cfg.eval_episodes = 2;
    cfg.eval_interval = 12;
    cfg.checkpoint_interval = 12;
    cfg.log_interval = 1;
    cfg.lr_decay_steps = 20;
    cfg.selfplay_model_interval = 5;
    cfg.target_model_interval = 10;
    cfg.validate().unwrap();
    cfg
}

fn run_in(cfg: &RunConfig, dir: &Path) -> RunSummary {
    let opts = RunOptions {
        out_dir: Some(dir.to_path_buf()),
        ..Default::default()
    };
    run_training(cfg, &opts).unwrap()
}

#[test]
fn serial_runs_are_bit_identical() {
    let cfg = tiny("catcher", 5);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_in(&cfg, a.path());
    run_in(&cfg, b.path());
    for f in ["metrics.jsonl", "eval.jsonl", "config.toml", "final.ezck", "checkpoints/step_12.ezck"] {
        let x = fs::read(a.path().join(f)).unwrap();
        let y = fs::read(b.path().join(f)).unwrap();
        assert!(!x.is_empty(), "{f}");
        assert_eq!(x, y, "{f} differs");
    }
    let metrics = fs::read_to_string(a.path().join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), cfg.training_steps);
    let snapshot = load_config_text(&fs::read_to_string(a.path().join("config.toml")).unwrap());
    assert_eq!(snapshot, cfg);
}

fn load_config_text(text: &str) -> RunConfig {
    RunConfig::from_toml_str(text).unwrap()
}

#[test]
fn budget_freezes_collection_but_not_learning() {
    let mut cfg = tiny("deepsea", 4);
    cfg.env_steps_budget = 60;
    cfg.training_steps = 40;
    let dir = tempfile::tempdir().unwrap();
    let summary = run_in(&cfg, dir.path());
    assert_eq!(summary.env_steps, 60);
    assert_eq!(summary.learner_steps, 40);
    let metrics = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    let env_steps: Vec<u64> = metrics
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["env_steps"].as_u64().unwrap())
        .collect();
    assert!(env_steps.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(*env_steps.last().unwrap(), 60);
    let frozen = env_steps.iter().filter(|s| **s == 60).count();
    assert!(frozen >= 20, "{frozen}");
}

#[test]
fn segment_stamps_follow_learner_step() {
    let cfg = tiny("catcher", 5);
    let summary = run_training(&cfg, &RunOptions::default()).unwrap();
    let mut seen = 0;
    for seg in summary.buffer.segments() {
        assert!(seg.collected_at.windows(2).all(|w| w[0] <= w[1]));
        assert!(seg.collected_at.iter().all(|s| *s < cfg.training_steps));
        seen += seg.len;
    }
    assert!(seen > 0);
    assert!(summary.buffer.segments().any(|s| s.collected_at.iter().any(|t| *t > 0)));
}

#[test]
fn parallel_mode_completes() {
    let mut cfg = tiny("catcher", 5);
    cfg.pipeline_mode = PipelineMode::Parallel;
    cfg.queue_capacity = 2;
    let dir = tempfile::tempdir().unwrap();
    let summary = run_in(&cfg, dir.path());
    assert_eq!(summary.learner_steps, cfg.training_steps);
    assert!(summary.env_steps <= cfg.env_steps_budget);
    assert!(dir.path().join("final.ezck").exists());
    let (_, meta) = ModelSet::<f32>::load(&dir.path().join("final.ezck")).unwrap();
    assert_eq!(meta.training_step, cfg.training_steps);
}

#[test]
fn early_stop_on_return() {
    let mut cfg = tiny("catcher", 5);
    cfg.eval_interval = 4;
    let opts = RunOptions {
        stop_at_return: Some(-10.0),
        ..Default::default()
    };
    let summary = run_training(&cfg, &opts).unwrap();
    assert!(summary.stopped_early);
    assert_eq!(summary.learner_steps, 4);
}

#[test]
fn fresh_model_acts_near_uniformly() {
    let cfg = tiny("catcher", 5);
    let s = setup(&cfg).unwrap();
    let model = ModelSet::<f32>::new(s.spec.clone(), 0);
    let mut actor = actor_for(&cfg, &s, 0).unwrap();
    let mut counts = [0usize; 3];
    let mut total = 0;
    while total < 1000 {
        let out = actor.step(&model, 0, 1.0, usize::MAX).unwrap();
        for a in out.actions {
            counts[a] += 1;
            total += 1;
        }
    }
    let p = 1.0 / 3.0;
    let sd = (total as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - total as f64 * p).abs() < 4.0 * sd, "{counts:?}");
    }
}

#[test]
fn temperature_sharpens_sampling() {
    let cfg = tiny("catcher", 5);
    let s = setup(&cfg).unwrap();
    let mut model = ModelSet::<f32>::new(s.spec.clone(), 0);
    randomize(&mut model, 2, 0.5);
    let mode_share = |temperature: f64| {
        let mut actor = actor_for(&cfg, &s, 0).unwrap();
        actor.step(&model, 0, temperature, usize::MAX).unwrap();
        let (mut agree, mut total) = (0, 0);
        while total < 300 {
            let obs = actor.observations();
            let out = actor.step(&model, 0, temperature, usize::MAX).unwrap();
            let refs: Vec<&[f32]> = obs.iter().map(|o| o.as_slice()).collect();
            let init = model.initial_inference(&refs).unwrap();
            for (a, logits) in out.actions.iter().zip(&init.policy_logits) {
                let best = (0..logits.len()).max_by(|x, y| logits[*x].total_cmp(&logits[*y])).unwrap();
                agree += usize::from(*a == best);
                total += 1;
            }
        }
        agree as f64 / total as f64
    };
    assert!(mode_share(0.25) > mode_share(1.0));
}

#[test]
fn fresh_model_eval_matches_enumerated_start_states() {
    let cfg = tiny("catcher", 5);
    let s = setup(&cfg).unwrap();
    let mut model = ModelSet::<f32>::new(s.spec.clone(), 0);
    randomize(&mut model, 11, 0.3);
    let mut exact = 0.0;
    for fruit in 0..5 {
        for paddle in 0..5 {
            let mut c = Catcher::new(5, 5, 0);
            let first = c.reset_to(fruit, paddle);
            let r = evaluate(&model, vec_of(c, first), &s.search, cfg.frames_stacked, 10).unwrap();
            exact += r.mean / 25.0;
        }
    }
    let episodes = 400;
    let r = evaluate_env(&model, "catcher", 5, episodes, 99, &s.search, cfg.frames_stacked).unwrap();
    // returns are ±1, so the standard error is at most 1/√episodes
    assert!((r.mean - exact).abs() < 4.0 / (episodes as f64).sqrt(), "{} vs {exact}", r.mean);
}

/// An environment whose next reset returns the already-placed start state.
struct Placed {
    env: BuiltinEnv,
    first: Option<crate::env::Observation>,
}

impl Environment for Placed {
    fn name(&self) -> String {
        self.env.name()
    }
    fn num_actions(&self) -> usize {
        self.env.num_actions()
    }
    fn frame_shape(&self) -> [usize; 3] {
        self.env.frame_shape()
    }
    fn reset(&mut self) -> Result<crate::env::Observation, crate::env::EnvError> {
        match self.first.take() {
            Some(o) => Ok(o),
            None => self.env.reset(),
        }
    }
    fn step(&mut self, action: usize) -> Result<crate::env::StepResult, crate::env::EnvError> {
        self.env.step(action)
    }
}

fn vec_of(c: Catcher, first: crate::env::Observation) -> Vec<Box<dyn Environment>> {
    vec![Box::new(Placed {
        env: BuiltinEnv::Catcher(c),
        first: Some(first),
    })]
}

#[test]
fn eval_rejects_mismatched_env() {
    let cfg = tiny("catcher", 5);
    let s = setup(&cfg).unwrap();
    let model = ModelSet::<f32>::new(s.spec.clone(), 0);
    let err = evaluate_env(&model, "catcher", 6, 1, 0, &s.search, cfg.frames_stacked).unwrap_err();
    assert!(matches!(err, PipelineError::Mismatch(_)));
}

#[test]
fn normalization_identities() {
    assert_eq!(normalized_score(3.0, -1.0, 3.0), 1.0);
    assert_eq!(normalized_score(-1.0, -1.0, 3.0), 0.0);
    assert_eq!(normalized_score(1.0, -1.0, 3.0), 0.5);
}
