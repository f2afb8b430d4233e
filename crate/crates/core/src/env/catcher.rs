use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EnvError, Environment, Observation, StepResult};

/// One fruit falls one row per step toward a paddle on the bottom row.
///
/// Actions are `{left, stay, right}`; the paddle moves first, then the fruit
/// drops. When the fruit reaches the paddle row the episode ends with +1 if
/// caught and -1 otherwise. Plane 0 holds the fruit, plane 1 the paddle.
#[derive(Debug, Clone)]
pub struct Catcher {
    width: usize,
    height: usize,
    rng: ChaCha8Rng,
    fruit_row: usize,
    fruit_col: usize,
    paddle_col: usize,
    done: bool,
    started: bool,
}

impl Catcher {
    pub const LEFT: usize = 0;
    pub const STAY: usize = 1;
    pub const RIGHT: usize = 2;

    pub fn new(width: usize, height: usize, seed: u64) -> Self {
        assert!(width >= 1 && height >= 2, "catcher needs width >= 1 and height >= 2");
        Catcher {
            width,
            height,
            rng: ChaCha8Rng::seed_from_u64(seed),
            fruit_row: 0,
            fruit_col: 0,
            paddle_col: 0,
            done: false,
            started: false,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(fruit_row, fruit_col, paddle_col)`.
    pub fn state(&self) -> (usize, usize, usize) {
        (self.fruit_row, self.fruit_col, self.paddle_col)
    }

    /// Starts an episode from an explicit configuration.
    pub fn reset_to(&mut self, fruit_col: usize, paddle_col: usize) -> Observation {
        self.fruit_row = 0;
        self.fruit_col = fruit_col.min(self.width - 1);
        self.paddle_col = paddle_col.min(self.width - 1);
        self.done = false;
        self.started = true;
        self.render()
    }

    /// Places fruit and paddle mid-episode.
    pub fn set_state(&mut self, fruit_row: usize, fruit_col: usize, paddle_col: usize) -> Observation {
        assert!(fruit_row < self.height - 1 && fruit_col < self.width && paddle_col < self.width);
        self.fruit_row = fruit_row;
        self.fruit_col = fruit_col;
        self.paddle_col = paddle_col;
        self.done = false;
        self.started = true;
        self.render()
    }

    pub fn render(&self) -> Observation {
        let mut obs = Observation::zeros([2, self.height, self.width]);
        obs.set(0, self.fruit_row, self.fruit_col, 1.0);
        obs.set(1, self.height - 1, self.paddle_col, 1.0);
        obs
    }
}

impl Environment for Catcher {
    fn name(&self) -> String {
        "catcher".into()
    }

    fn num_actions(&self) -> usize {
        3
    }

    fn frame_shape(&self) -> [usize; 3] {
        [2, self.height, self.width]
    }

    fn reset(&mut self) -> Result<Observation, EnvError> {
        let fruit = self.rng.random_range(0..self.width);
        let paddle = self.rng.random_range(0..self.width);
        Ok(self.reset_to(fruit, paddle))
    }

    fn step(&mut self, action: usize) -> Result<StepResult, EnvError> {
        if action >= 3 {
            return Err(EnvError::InvalidAction { action, num_actions: 3 });
        }
        if self.done || !self.started {
            return Err(EnvError::StepAfterDone);
        }
        match action {
            Catcher::LEFT => self.paddle_col = self.paddle_col.saturating_sub(1),
            Catcher::RIGHT => self.paddle_col = (self.paddle_col + 1).min(self.width - 1),
            _ => {}
        }
        self.fruit_row += 1;
        let mut reward = 0.0;
        if self.fruit_row == self.height - 1 {
            self.done = true;
            reward = if self.fruit_col == self.paddle_col { 1.0 } else { -1.0 };
        }
        Ok(StepResult {
            observation: self.render(),
            reward,
            done: self.done,
        })
    }
}
