//! Self-play, target preparation and learning, serially or on worker threads.

mod actor;
mod eval;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread;
use std::time::Duration;

use crossbeam_channel::{bounded, RecvTimeoutError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

pub use actor::{Actor, ActorOutput};
pub use eval::{evaluate, evaluate_env, normalized_score, EvalReport, MAX_EVAL_STEPS};

use crate::config::{PipelineMode, RunConfig};
use crate::env::{make_env, Environment};
use crate::mcts::{SearchConfig, SearchError};
use crate::model::{CheckpointMeta, ModelError, ModelSet, ModelSpec};
use crate::reanalyze::{compute_targets, prepare_context, ReanalyzeConfig, ReanalyzeError};
use crate::replay::{ReplayBuffer, ReplayError};
use crate::trainer::{MetricsRecord, MetricsWriter, TrainError, Trainer, TrainerConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("environment: {0}")]
    Env(String),
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Reanalyze(#[from] ReanalyzeError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{worker} failed: {message}")]
    Worker { worker: String, message: String },
}

/// Extra knobs that are not part of the reproducible run configuration.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Directory for config snapshot, metrics, evaluations and checkpoints.
    pub out_dir: Option<PathBuf>,
    /// End training early once an evaluation's mean return reaches this.
    pub stop_at_return: Option<f64>,
    /// Also write the final replay buffer to `buffer.ezck`.
    pub save_buffer: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalRecord {
    pub step: usize,
    pub env_steps: usize,
    pub mean: f64,
    pub median: f64,
}

pub struct RunSummary {
    pub model: ModelSet<f32>,
    pub meta: CheckpointMeta,
    pub learner_steps: usize,
    pub env_steps: usize,
    pub evals: Vec<EvalRecord>,
    pub episode_returns: Vec<f64>,
    pub buffer: ReplayBuffer,
    pub stopped_early: bool,
}

impl RunSummary {
    pub fn final_eval(&self) -> Option<&EvalRecord> {
        self.evals.last()
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut x = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Shapes and run-wide derived settings.
struct Setup {
    spec: ModelSpec,
    search: SearchConfig,
    rcfg: ReanalyzeConfig,
    tcfg: TrainerConfig,
}

fn setup(cfg: &RunConfig) -> Result<Setup, PipelineError> {
    let probe = make_env(&cfg.env, cfg.env_size, cfg.seed).map_err(|e| PipelineError::Env(e.to_string()))?;
    let num_actions = probe.num_actions();
    let spec = ModelSpec::from_config(cfg, probe.frame_shape(), num_actions);
    Ok(Setup {
        spec,
        search: SearchConfig::from_run(cfg),
        rcfg: ReanalyzeConfig::from_run(cfg, num_actions),
        tcfg: TrainerConfig::from_run(cfg),
    })
}

fn actor_for(cfg: &RunConfig, s: &Setup, index: usize) -> Result<Actor, PipelineError> {
    let mut envs: Vec<Box<dyn Environment>> = Vec::with_capacity(cfg.selfplay_envs);
    for e in 0..cfg.selfplay_envs {
        let seed = mix(cfg.seed, 1_000 + (index * cfg.selfplay_envs + e) as u64);
        envs.push(make_env(&cfg.env, cfg.env_size, seed).map_err(|e| PipelineError::Env(e.to_string()))?);
    }
    Ok(Actor::new(
        envs,
        s.search,
        cfg.frames_stacked,
        cfg.segment_length,
        s.rcfg.padding(),
        cfg.reward_clipping,
        mix(cfg.seed, 2 + index as u64),
    ))
}

/// Files written under the output directory.
struct Outputs {
    dir: Option<PathBuf>,
    metrics: Option<MetricsWriter<BufWriter<File>>>,
    evals: Option<MetricsWriter<BufWriter<File>>>,
}

impl Outputs {
    fn open(dir: Option<&Path>, cfg: &RunConfig) -> Result<Self, PipelineError> {
        let Some(dir) = dir else {
            return Ok(Outputs {
                dir: None,
                metrics: None,
                evals: None,
            });
        };
        fs::create_dir_all(dir.join("checkpoints"))?;
        fs::write(dir.join("config.toml"), cfg.to_toml_string())?;
        Ok(Outputs {
            dir: Some(dir.to_path_buf()),
            metrics: Some(MetricsWriter::new(BufWriter::new(File::create(dir.join("metrics.jsonl"))?))),
            evals: Some(MetricsWriter::new(BufWriter::new(File::create(dir.join("eval.jsonl"))?))),
        })
    }

    fn metrics(&mut self, rec: &MetricsRecord) -> Result<(), PipelineError> {
        if let Some(w) = &mut self.metrics {
            w.write(rec)?;
        }
        Ok(())
    }

    fn eval(&mut self, rec: &EvalRecord) -> Result<(), PipelineError> {
        if let Some(w) = &mut self.evals {
            w.write(rec)?;
        }
        Ok(())
    }

    fn checkpoint(&self, name: &str, model: &ModelSet<f32>, meta: &CheckpointMeta) -> Result<(), PipelineError> {
        if let Some(dir) = &self.dir {
            model.save(&dir.join(name), meta)?;
        }
        Ok(())
    }
}

/// Per-learner-step bookkeeping shared by both modes.
struct Learner<'a> {
    cfg: &'a RunConfig,
    setup: &'a Setup,
    opts: &'a RunOptions,
    trainer: Trainer<f32>,
    out: Outputs,
    evals: Vec<EvalRecord>,
    stopped_early: bool,
}

impl Learner<'_> {
    fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            env: self.cfg.env.clone(),
            spec: self.setup.spec.clone(),
            config_hash: self.cfg.hash(),
            training_step: self.trainer.steps,
        }
    }

    fn train(
        &mut self,
        batch: &crate::reanalyze::TrainBatch,
        step: usize,
        buffer: &Mutex<ReplayBuffer>,
        env_steps: usize,
    ) -> Result<(), PipelineError> {
        let lr = self.cfg.learning_rate(step);
        let out = match self.trainer.train_step(batch, lr) {
            Ok(o) => o,
            Err(e) => {
                let meta = self.meta();
                self.out.checkpoint("partial.ezck", &self.trainer.model, &meta)?;
                return Err(e.into());
            }
        };
        let buffer_size = {
            let mut b = buffer.lock().expect("buffer lock");
            b.update_priorities(&batch.indices, &out.value_l1)?;
            b.len()
        };
        if self.cfg.log_interval > 0 && step % self.cfg.log_interval == 0 {
            self.out.metrics(&MetricsRecord {
                step,
                loss: out.report,
                lr,
                beta: self.cfg.priority_beta(step),
                temperature: self.cfg.temperature(step),
                buffer_size,
                env_steps,
                mean_horizon: batch.stats.mean_horizon,
                saturated_values: batch.stats.saturated_values,
            })?;
        }
        Ok(())
    }

    /// Evaluation and checkpointing after learner step `done` completed.
    /// Returns whether training should stop.
    fn after_step(&mut self, done: usize, env_steps: usize) -> Result<bool, PipelineError> {
        let last = done == self.cfg.training_steps;
        if self.cfg.checkpoint_interval > 0 && done % self.cfg.checkpoint_interval == 0 && !last {
            let meta = self.meta();
            self.out.checkpoint(&format!("checkpoints/step_{done}.ezck"), &self.trainer.model, &meta)?;
        }
        let eval_due = (self.cfg.eval_interval > 0 && done % self.cfg.eval_interval == 0) || last;
        if eval_due && self.cfg.eval_episodes > 0 {
            let report = evaluate_env(
                &self.trainer.model,
                &self.cfg.env,
                self.cfg.env_size,
                self.cfg.eval_episodes,
                mix(self.cfg.seed, 7_777),
                &self.setup.search,
                self.cfg.frames_stacked,
            )?;
            let rec = EvalRecord {
                step: done,
                env_steps,
                mean: report.mean,
                median: report.median,
            };
            log::info!("step {done}: eval mean {:.3} median {:.3}", rec.mean, rec.median);
            self.out.eval(&rec)?;
            self.evals.push(rec);
            if let Some(th) = self.opts.stop_at_return {
                if report.mean >= th && !last {
                    self.stopped_early = true;
                    return Ok(true);
                }
            }
        }
        Ok(false)
    }

    fn finish(self, env_steps: usize, episode_returns: Vec<f64>, buffer: ReplayBuffer) -> Result<RunSummary, PipelineError> {
        let meta = self.meta();
        self.out.checkpoint("final.ezck", &self.trainer.model, &meta)?;
        if self.opts.save_buffer {
            if let Some(dir) = &self.out.dir {
                buffer.save(&dir.join("buffer.ezck"))?;
            }
        }
        Ok(RunSummary {
            learner_steps: self.trainer.steps,
            model: self.trainer.model,
            meta,
            env_steps,
            evals: self.evals,
            episode_returns,
            buffer,
            stopped_early: self.stopped_early,
        })
    }
}

/// Target env-step count before learner step `step`.
fn env_target(cfg: &RunConfig, step: usize) -> usize {
    let t = cfg.min_replay_size as f64 + step as f64 * cfg.env_steps_per_train_step;
    (t.ceil() as usize).min(cfg.env_steps_budget)
}

pub fn run_training(cfg: &RunConfig, opts: &RunOptions) -> Result<RunSummary, PipelineError> {
    cfg.validate().map_err(|e| PipelineError::Mismatch(e.to_string()))?;
    match cfg.pipeline_mode {
        PipelineMode::Serial => run_serial(cfg, opts),
        PipelineMode::Parallel => run_parallel(cfg, opts),
    }
}

fn new_learner<'a>(cfg: &'a RunConfig, setup: &'a Setup, opts: &'a RunOptions) -> Result<Learner<'a>, PipelineError> {
    let model = ModelSet::<f32>::new(setup.spec.clone(), cfg.seed);
    Ok(Learner {
        cfg,
        setup,
        opts,
        trainer: Trainer::new(model, setup.tcfg, mix(cfg.seed, 3)),
        out: Outputs::open(opts.out_dir.as_deref(), cfg)?,
        evals: Vec::new(),
        stopped_early: false,
    })
}

/// Actor, context, targets and learner interleaved in a fixed order on one thread.
fn run_serial(cfg: &RunConfig, opts: &RunOptions) -> Result<RunSummary, PipelineError> {
    let setup = setup(cfg)?;
    let mut learner = new_learner(cfg, &setup, opts)?;
    let mut actor = actor_for(cfg, &setup, 0)?;
    let buffer = Mutex::new(ReplayBuffer::new(cfg.env_steps_budget, cfg.priority_alpha));
    let mut selfplay = learner.trainer.model.clone();
    let mut target = learner.trainer.model.clone();
    let mut sample_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 4));
    let mut env_steps = 0;
    let mut flushed = false;
    let mut episode_returns = Vec::new();
    for step in 0..cfg.training_steps {
        let want = env_target(cfg, step);
        loop {
            let have = buffer.lock().expect("buffer lock").len();
            if env_steps >= want && have >= cfg.min_replay_size {
                break;
            }
            if env_steps >= cfg.env_steps_budget {
                if !flushed {
                    let mut b = buffer.lock().expect("buffer lock");
                    for seg in actor.flush() {
                        b.append(seg)?;
                    }
                    flushed = true;
                    continue;
                }
                if have < cfg.min_replay_size {
                    return Err(PipelineError::Mismatch(format!(
                        "env_steps_budget {} left only {have} sampleable transitions, min_replay_size is {}",
                        cfg.env_steps_budget, cfg.min_replay_size
                    )));
                }
                break;
            }
            let budget_left = cfg.env_steps_budget - env_steps;
            let out = actor.step(&selfplay, step, cfg.temperature(step), budget_left)?;
            env_steps += out.env_steps;
            episode_returns.extend(out.episode_returns);
            let mut b = buffer.lock().expect("buffer lock");
            for seg in out.segments {
                b.append(seg)?;
            }
        }
        if env_steps >= cfg.env_steps_budget && !flushed {
            let mut b = buffer.lock().expect("buffer lock");
            for seg in actor.flush() {
                b.append(seg)?;
            }
            flushed = true;
        }
        let samples = buffer.lock().expect("buffer lock").sample(
            cfg.batch_size,
            cfg.priority_beta(step),
            cfg.min_replay_size,
            &mut sample_rng,
        )?;
        let t0 = std::time::Instant::now();
        let ctx = prepare_context(&samples, &setup.rcfg, step, mix(cfg.seed, 10_000 + step as u64));
        let batch = compute_targets(&ctx, &target, &setup.rcfg)?;
        let t1 = std::time::Instant::now();
        learner.train(&batch, step, &buffer, env_steps)?;
        log::debug!("step {step}: targets {:?}, train {:?}", t1 - t0, t1.elapsed());
        let done = step + 1;
        if done % cfg.selfplay_model_interval == 0 {
            selfplay = learner.trainer.model.clone();
        }
        if done % cfg.target_model_interval == 0 {
            target = learner.trainer.model.clone();
        }
        if learner.after_step(done, env_steps)? {
            break;
        }
    }
    let buffer = buffer.into_inner().expect("buffer lock");
    learner.finish(env_steps, episode_returns, buffer)
}

type Snapshot = Arc<RwLock<Arc<ModelSet<f32>>>>;

fn publish(slot: &Snapshot, model: &ModelSet<f32>) {
    *slot.write().expect("snapshot lock") = Arc::new(model.clone());
}

fn current(slot: &Snapshot) -> Arc<ModelSet<f32>> {
    Arc::clone(&slot.read().expect("snapshot lock"))
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".into())
}

/// Actors, context workers and target workers on their own threads,
/// connected to the learner by two bounded queues.
fn run_parallel(cfg: &RunConfig, opts: &RunOptions) -> Result<RunSummary, PipelineError> {
    let setup = setup(cfg)?;
    let mut learner = new_learner(cfg, &setup, opts)?;
    let buffer = Arc::new(Mutex::new(ReplayBuffer::new(cfg.env_steps_budget, cfg.priority_alpha)));
    let selfplay: Snapshot = Arc::new(RwLock::new(Arc::new(learner.trainer.model.clone())));
    let target: Snapshot = Arc::new(RwLock::new(Arc::new(learner.trainer.model.clone())));
    let learner_step = Arc::new(AtomicUsize::new(0));
    let env_steps = Arc::new(AtomicUsize::new(0));
    let stop = Arc::new(AtomicBool::new(false));
    let returns = Arc::new(Mutex::new(Vec::new()));
    let (ctx_tx, ctx_rx) = bounded(cfg.queue_capacity);
    let (batch_tx, batch_rx) = bounded(cfg.queue_capacity);
    let mut handles: Vec<(String, thread::JoinHandle<Result<(), PipelineError>>)> = Vec::new();

    for a in 0..cfg.actors {
        let mut actor = actor_for(cfg, &setup, a)?;
        let (buffer, selfplay, learner_step, env_steps, stop, returns) = (
            Arc::clone(&buffer),
            Arc::clone(&selfplay),
            Arc::clone(&learner_step),
            Arc::clone(&env_steps),
            Arc::clone(&stop),
            Arc::clone(&returns),
        );
        let cfg = cfg.clone();
        handles.push((
            format!("actor {a}"),
            thread::spawn(move || {
                while !stop.load(Ordering::Relaxed) {
                    let done = env_steps.load(Ordering::SeqCst);
                    if done >= cfg.env_steps_budget {
                        break;
                    }
                    let step = learner_step.load(Ordering::SeqCst);
                    // stay close to the configured data/update ratio
                    if done > env_target(&cfg, step) + actor.num_envs() {
                        thread::sleep(Duration::from_millis(1));
                        continue;
                    }
                    let model = current(&selfplay);
                    let left = cfg.env_steps_budget - done;
                    let out = actor.step(&model, step, cfg.temperature(step), left)?;
                    env_steps.fetch_add(out.env_steps, Ordering::SeqCst);
                    returns.lock().expect("returns lock").extend(out.episode_returns);
                    let mut b = buffer.lock().expect("buffer lock");
                    for seg in out.segments {
                        b.append(seg)?;
                    }
                }
                let mut b = buffer.lock().expect("buffer lock");
                for seg in actor.flush() {
                    b.append(seg)?;
                }
                Ok(())
            }),
        ));
    }
    for w in 0..cfg.context_workers {
        let (buffer, learner_step, stop, tx) = (
            Arc::clone(&buffer),
            Arc::clone(&learner_step),
            Arc::clone(&stop),
            ctx_tx.clone(),
        );
        let cfg = cfg.clone();
        let rcfg = setup.rcfg;
        handles.push((
            format!("context worker {w}"),
            thread::spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 20 + w as u64));
                let mut n = 0u64;
                while !stop.load(Ordering::Relaxed) {
                    let step = learner_step.load(Ordering::SeqCst);
                    let samples = {
                        let b = buffer.lock().expect("buffer lock");
                        if b.len() < cfg.min_replay_size {
                            None
                        } else {
                            Some(b.sample(cfg.batch_size, cfg.priority_beta(step), cfg.min_replay_size, &mut rng)?)
                        }
                    };
                    let Some(samples) = samples else {
                        thread::sleep(Duration::from_millis(2));
                        continue;
                    };
                    n += 1;
                    let ctx = prepare_context(&samples, &rcfg, step, mix(cfg.seed, (w as u64) << 40 | n));
                    if tx.send(ctx).is_err() {
                        break;
                    }
                }
                Ok(())
            }),
        ));
    }
    drop(ctx_tx);
    for w in 0..cfg.batch_workers {
        let (target, stop, rx, tx) = (Arc::clone(&target), Arc::clone(&stop), ctx_rx.clone(), batch_tx.clone());
        let rcfg = setup.rcfg;
        handles.push((
            format!("batch worker {w}"),
            thread::spawn(move || {
                while !stop.load(Ordering::Relaxed) {
                    let ctx = match rx.recv_timeout(Duration::from_millis(50)) {
                        Ok(c) => c,
                        Err(RecvTimeoutError::Timeout) => continue,
                        Err(RecvTimeoutError::Disconnected) => break,
                    };
                    let model = current(&target);
                    let batch = compute_targets(&ctx, &model, &rcfg)?;
                    if tx.send(batch).is_err() {
                        break;
                    }
                }
                Ok(())
            }),
        ));
    }
    drop(ctx_rx);
    drop(batch_tx);

    let result = (|| -> Result<(), PipelineError> {
        for step in 0..cfg.training_steps {
            let batch = loop {
                match batch_rx.recv_timeout(Duration::from_millis(200)) {
                    Ok(b) => break b,
                    Err(RecvTimeoutError::Timeout) => {
                        if let Some((name, _)) = handles.iter().find(|(_, h)| h.is_finished()) {
                            if !name.starts_with("actor") {
                                return Err(PipelineError::Worker {
                                    worker: name.clone(),
                                    message: "exited early".into(),
                                });
                            }
                        }
                    }
                    Err(RecvTimeoutError::Disconnected) => {
                        return Err(PipelineError::Worker {
                            worker: "target workers".into(),
                            message: "queue closed".into(),
                        })
                    }
                }
            };
            learner.train(&batch, step, &buffer, env_steps.load(Ordering::SeqCst))?;
            let done = step + 1;
            learner_step.store(done, Ordering::SeqCst);
            if done % cfg.selfplay_model_interval == 0 {
                publish(&selfplay, &learner.trainer.model);
            }
            if done % cfg.target_model_interval == 0 {
                publish(&target, &learner.trainer.model);
            }
            if learner.after_step(done, env_steps.load(Ordering::SeqCst))? {
                break;
            }
        }
        Ok(())
    })();
    stop.store(true, Ordering::SeqCst);
    drop(batch_rx);
    let mut worker_error = None;
    for (name, h) in handles {
        match h.join() {
            Ok(Ok(())) => {}
            Ok(Err(e)) => {
                worker_error.get_or_insert(PipelineError::Worker {
                    worker: name,
                    message: e.to_string(),
                });
            }
            Err(p) => {
                worker_error.get_or_insert(PipelineError::Worker {
                    worker: name,
                    message: panic_message(p),
                });
            }
        }
    }
    if let Err(e) = result {
        let meta = learner.meta();
        learner.out.checkpoint("partial.ezck", &learner.trainer.model, &meta)?;
        return Err(worker_error.unwrap_or(e));
    }
    if let Some(e) = worker_error {
        return Err(e);
    }
    let buffer = Arc::try_unwrap(buffer)
        .map_err(|_| PipelineError::Mismatch("buffer still shared after shutdown".into()))?
        .into_inner()
        .expect("buffer lock");
    let episode_returns = std::mem::take(&mut *returns.lock().expect("returns lock"));
    learner.finish(env_steps.load(Ordering::SeqCst), episode_returns, buffer)
}

#[cfg(test)]
mod tests;
