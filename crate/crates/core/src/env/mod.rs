//! Image-observation environments.
//!
//! Two deterministic built-ins (`catcher`, `deepsea`) plus a client for
//! environments living in another process (see `protocol`).

mod catcher;
mod deepsea;
mod protocol;
mod stack;

pub use catcher::Catcher;
pub use deepsea::DeepSea;
pub use protocol::{serve, ProtocolEnv};
pub use stack::{FrameStack, StackedObservation};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const AVAILABLE_ENVS: &[&str] = &["catcher", "deepsea", "protocol:<command>"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("action {action} out of range for {num_actions} actions")]
    InvalidAction { action: usize, num_actions: usize },
    #[error("step called after the episode ended; call reset first")]
    StepAfterDone,
    #[error("unknown environment `{0}`; available: catcher, deepsea, protocol:<command>")]
    Unknown(String),
    #[error("environment protocol: {0}")]
    Protocol(String),
}

/// Channels × height × width pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub shape: [usize; 3],
    pub pixels: Vec<f32>,
}

impl Observation {
    pub fn zeros(shape: [usize; 3]) -> Self {
        Observation {
            shape,
            pixels: vec![0.0; shape.iter().product()],
        }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.shape[1] + y) * self.shape[2] + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let [_, h, w] = self.shape;
        self.pixels[(c * h + y) * w + x] = v;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
}

pub trait Environment: Send {
    fn name(&self) -> String;
    fn num_actions(&self) -> usize;
    fn frame_shape(&self) -> [usize; 3];
    fn reset(&mut self) -> Result<Observation, EnvError>;
    fn step(&mut self, action: usize) -> Result<StepResult, EnvError>;
    /// Restorable state, for environments that can provide one.
    fn state_snapshot(&self) -> Option<EnvSnapshot> {
        None
    }
}

/// Built-in environments, cloneable so oracles can roll copies forward.
#[derive(Debug, Clone)]
pub enum BuiltinEnv {
    Catcher(Catcher),
    DeepSea(DeepSea),
}

impl BuiltinEnv {
    pub fn create(name: &str, size: usize, seed: u64) -> Result<Self, EnvError> {
        match name {
            "catcher" => Ok(BuiltinEnv::Catcher(Catcher::new(size, size, seed))),
            "deepsea" => Ok(BuiltinEnv::DeepSea(DeepSea::new(size))),
            other => Err(EnvError::Unknown(other.to_string())),
        }
    }

    /// Dynamics-relevant state; restoring it reproduces every future transition.
    pub fn snapshot(&self) -> EnvSnapshot {
        match self {
            BuiltinEnv::Catcher(c) => {
                let (fruit_row, fruit_col, paddle_col) = c.state();
                EnvSnapshot::Catcher {
                    width: c.width(),
                    height: c.height(),
                    fruit_row,
                    fruit_col,
                    paddle_col,
                }
            }
            BuiltinEnv::DeepSea(d) => {
                let (row, col) = d.position();
                EnvSnapshot::DeepSea {
                    size: d.size(),
                    row,
                    col,
                }
            }
        }
    }

    /// Longest possible episode.
    pub fn horizon(&self) -> usize {
        match self {
            BuiltinEnv::Catcher(c) => c.height() - 1,
            BuiltinEnv::DeepSea(d) => d.size(),
        }
    }
}

impl Environment for BuiltinEnv {
    fn name(&self) -> String {
        match self {
            BuiltinEnv::Catcher(e) => e.name(),
            BuiltinEnv::DeepSea(e) => e.name(),
        }
    }
    fn num_actions(&self) -> usize {
        match self {
            BuiltinEnv::Catcher(e) => e.num_actions(),
            BuiltinEnv::DeepSea(e) => e.num_actions(),
        }
    }
    fn frame_shape(&self) -> [usize; 3] {
        match self {
            BuiltinEnv::Catcher(e) => e.frame_shape(),
            BuiltinEnv::DeepSea(e) => e.frame_shape(),
        }
    }
    fn reset(&mut self) -> Result<Observation, EnvError> {
        match self {
            BuiltinEnv::Catcher(e) => e.reset(),
            BuiltinEnv::DeepSea(e) => e.reset(),
        }
    }
    fn step(&mut self, action: usize) -> Result<StepResult, EnvError> {
        match self {
            BuiltinEnv::Catcher(e) => e.step(action),
            BuiltinEnv::DeepSea(e) => e.step(action),
        }
    }
    fn state_snapshot(&self) -> Option<EnvSnapshot> {
        Some(self.snapshot())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "env", rename_all = "lowercase")]
pub enum EnvSnapshot {
    Catcher {
        width: usize,
        height: usize,
        fruit_row: usize,
        fruit_col: usize,
        paddle_col: usize,
    },
    DeepSea {
        size: usize,
        row: usize,
        col: usize,
    },
}

impl EnvSnapshot {
    /// A live environment positioned at this state, mid-episode. `seed`
    /// drives any later resets.
    pub fn restore(&self, seed: u64) -> BuiltinEnv {
        match *self {
            EnvSnapshot::Catcher {
                width,
                height,
                fruit_row,
                fruit_col,
                paddle_col,
            } => {
                let mut c = Catcher::new(width, height, seed);
                c.set_state(fruit_row, fruit_col, paddle_col);
                BuiltinEnv::Catcher(c)
            }
            EnvSnapshot::DeepSea { size, row, col } => {
                let mut d = DeepSea::new(size);
                d.set_position(row, col);
                BuiltinEnv::DeepSea(d)
            }
        }
    }
}

/// Resolves an environment name. `protocol:<command>` spawns `<command>`
/// (split on whitespace) and talks to it over its stdin/stdout.
pub fn make_env(name: &str, size: usize, seed: u64) -> Result<Box<dyn Environment>, EnvError> {
    if let Some(cmd) = name.strip_prefix("protocol:") {
        let mut parts = cmd.split_whitespace();
        let program = parts.next().ok_or_else(|| EnvError::Unknown(name.to_string()))?;
        let args: Vec<String> = parts.map(str::to_string).collect();
        return Ok(Box::new(ProtocolEnv::spawn(program, &args, 1)?));
    }
    Ok(Box::new(BuiltinEnv::create(name, size, seed)?))
}

/// Sign clipping to {-1, 0, 1}.
pub fn clip_reward(r: f64) -> f64 {
    if r > 0.0 {
        1.0
    } else if r < 0.0 {
        -1.0
    } else {
        0.0
    }
}
