use super::{EnvError, Environment, Observation, StepResult};

/// N×N hard-exploration grid.
///
/// The agent starts top-left and descends one row per step, moving one
/// column left or right. Each `right` costs `0.01 / N`. Only `N` consecutive
/// `right` actions earn `+1` on the final step at the bottom-right. Plane 0
/// marks the agent; the terminal frame is blank.
#[derive(Debug, Clone)]
pub struct DeepSea {
    size: usize,
    row: usize,
    col: usize,
    done: bool,
    started: bool,
}

impl DeepSea {
    pub const LEFT: usize = 0;
    pub const RIGHT: usize = 1;

    pub fn new(size: usize) -> Self {
        assert!(size >= 1);
        DeepSea {
            size,
            row: 0,
            col: 0,
            done: false,
            started: false,
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn move_cost(&self) -> f64 {
        0.01 / self.size as f64
    }

    pub fn position(&self) -> (usize, usize) {
        (self.row, self.col)
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Places the agent at `(row, col)`, used by oracles that start mid-episode.
    pub fn set_position(&mut self, row: usize, col: usize) -> Observation {
        assert!(row < self.size && col <= row);
        self.row = row;
        self.col = col;
        self.done = false;
        self.started = true;
        self.render()
    }

    fn render(&self) -> Observation {
        let mut obs = Observation::zeros([1, self.size, self.size]);
        if !self.done {
            obs.set(0, self.row, self.col, 1.0);
        }
        obs
    }
}

impl Environment for DeepSea {
    fn name(&self) -> String {
        "deepsea".into()
    }

    fn num_actions(&self) -> usize {
        2
    }

    fn frame_shape(&self) -> [usize; 3] {
        [1, self.size, self.size]
    }

    fn reset(&mut self) -> Result<Observation, EnvError> {
        Ok(self.set_position(0, 0))
    }

    fn step(&mut self, action: usize) -> Result<StepResult, EnvError> {
        if action >= 2 {
            return Err(EnvError::InvalidAction { action, num_actions: 2 });
        }
        if self.done || !self.started {
            return Err(EnvError::StepAfterDone);
        }
        let n = self.size;
        let mut reward = 0.0;
        let on_diagonal = self.col == self.row;
        if action == DeepSea::RIGHT {
            reward -= self.move_cost();
        }
        if self.row == n - 1 {
            if action == DeepSea::RIGHT && on_diagonal {
                reward += 1.0;
            }
            self.done = true;
        } else {
            self.col = match action {
                DeepSea::RIGHT => (self.col + 1).min(n - 1),
                _ => self.col.saturating_sub(1),
            };
            self.row += 1;
        }
        Ok(StepResult {
            observation: self.render(),
            reward,
            done: self.done,
        })
    }
}
