use serde::{Deserialize, Serialize};

use super::ReplayError;
use crate::env::{EnvSnapshot, Observation};

/// A contiguous slice of one episode.
///
/// Positions `0..len` are sampleable. Up to `padding()` further transitions
/// follow so targets near the end of the slice can look ahead.
#[derive(Debug, Clone, PartialEq)]
pub struct GameSegment {
    pub frame_shape: [usize; 3],
    pub frames_stacked: usize,
    /// `frames_stacked − 1` history frames, then the frame seen before each
    /// stored transition, then the final frame.
    pub frames: Vec<Vec<f32>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub policies: Vec<Vec<f64>>,
    pub root_values: Vec<f64>,
    /// Learner step at which each transition was collected.
    pub collected_at: Vec<usize>,
    pub len: usize,
    /// Position 0 is the first step of its episode.
    pub episode_start: bool,
    /// The episode ended after the last stored transition.
    pub terminal: bool,
    /// Environment state before each transition, when the env supports it.
    pub snapshots: Vec<EnvSnapshot>,
}

impl GameSegment {
    /// Stored transitions including lookahead padding.
    pub fn total(&self) -> usize {
        self.actions.len()
    }

    pub fn padding(&self) -> usize {
        self.total() - self.len
    }

    pub fn frame_len(&self) -> usize {
        self.frame_shape.iter().product()
    }

    /// Stacked observation before transition `pos` (`pos == total()` gives
    /// the final observation).
    pub fn stacked(&self, pos: usize) -> Vec<f32> {
        assert!(pos <= self.total());
        let mut out = Vec::with_capacity(self.frames_stacked * self.frame_len());
        for f in &self.frames[pos..pos + self.frames_stacked] {
            out.extend_from_slice(f);
        }
        out
    }

    /// Observation at `pos` is the end of the episode.
    pub fn is_terminal_at(&self, pos: usize) -> bool {
        self.terminal && pos >= self.total()
    }

    pub fn validate(&self) -> Result<(), ReplayError> {
        let bad = |m: String| Err(ReplayError::Malformed(m));
        let n = self.total();
        if self.len == 0 || self.len > n {
            return bad(format!("len {} with {} stored transitions", self.len, n));
        }
        if self.frames_stacked == 0 {
            return bad("frames_stacked is 0".into());
        }
        for (what, l) in [
            ("rewards", self.rewards.len()),
            ("policies", self.policies.len()),
            ("root_values", self.root_values.len()),
            ("collected_at", self.collected_at.len()),
        ] {
            if l != n {
                return bad(format!("{what} has {l} entries, actions has {n}"));
            }
        }
        if self.frames.len() != n + self.frames_stacked {
            return bad(format!("{} frames for {} transitions", self.frames.len(), n));
        }
        if !self.snapshots.is_empty() && self.snapshots.len() != n {
            return bad(format!("{} snapshots for {} transitions", self.snapshots.len(), n));
        }
        let fl = self.frame_len();
        if self.frames.iter().any(|f| f.len() != fl) {
            return bad("frame size mismatch".into());
        }
        if self.collected_at.windows(2).any(|w| w[0] > w[1]) {
            return bad("collection steps decrease".into());
        }
        if !self.rewards.iter().chain(&self.root_values).all(|v| v.is_finite()) {
            return bad("non-finite reward or value".into());
        }
        for p in &self.policies {
            let s: f64 = p.iter().sum();
            if p.is_empty() || p.iter().any(|x| !(*x >= 0.0)) || (s - 1.0).abs() > 1e-6 {
                return bad(format!("policy {p:?} is not a distribution"));
            }
        }
        Ok(())
    }
}

/// Per-step record handed to [`SegmentBuilder::push`].
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub action: usize,
    pub reward: f64,
    pub policy: Vec<f64>,
    pub root_value: f64,
    pub collected_at: usize,
    pub snapshot: Option<EnvSnapshot>,
    pub next: Observation,
    pub done: bool,
}

/// Cuts a running episode into segments of `segment_length`, each carrying
/// `padding` lookahead transitions.
#[derive(Debug, Clone)]
pub struct SegmentBuilder {
    segment_length: usize,
    padding: usize,
    frames_stacked: usize,
    frame_shape: [usize; 3],
    frames: Vec<Vec<f32>>,
    actions: Vec<usize>,
    rewards: Vec<f64>,
    policies: Vec<Vec<f64>>,
    root_values: Vec<f64>,
    collected_at: Vec<usize>,
    snapshots: Vec<EnvSnapshot>,
    at_episode_start: bool,
    active: bool,
}

impl SegmentBuilder {
    pub fn new(segment_length: usize, padding: usize, frames_stacked: usize) -> Self {
        assert!(segment_length >= 1 && frames_stacked >= 1);
        SegmentBuilder {
            segment_length,
            padding,
            frames_stacked,
            frame_shape: [0; 3],
            frames: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            policies: Vec::new(),
            root_values: Vec::new(),
            collected_at: Vec::new(),
            snapshots: Vec::new(),
            at_episode_start: true,
            active: false,
        }
    }

    /// Starts an episode. Any unfinished data is discarded.
    pub fn reset(&mut self, first: &Observation) {
        self.frame_shape = first.shape;
        self.frames.clear();
        for _ in 0..self.frames_stacked {
            self.frames.push(first.pixels.clone());
        }
        self.actions.clear();
        self.rewards.clear();
        self.policies.clear();
        self.root_values.clear();
        self.collected_at.clear();
        self.snapshots.clear();
        self.at_episode_start = true;
        self.active = true;
    }

    /// Records one transition and returns any segments that became complete.
    pub fn push(&mut self, step: StepRecord) -> Vec<GameSegment> {
        assert!(self.active, "push before reset");
        self.actions.push(step.action);
        self.rewards.push(step.reward);
        self.policies.push(step.policy);
        self.root_values.push(step.root_value);
        self.collected_at.push(step.collected_at);
        if let Some(s) = step.snapshot {
            self.snapshots.push(s);
        }
        self.frames.push(step.next.pixels);
        let mut out = Vec::new();
        if step.done {
            while self.actions.len() > self.segment_length {
                out.push(self.cut(self.segment_length, true));
            }
            out.push(self.cut(self.actions.len(), true));
            self.active = false;
        } else if self.actions.len() > self.segment_length + self.padding {
            out.push(self.cut(self.segment_length, false));
        }
        out
    }

    /// Emits whatever is buffered as a non-terminal segment.
    pub fn flush(&mut self) -> Option<GameSegment> {
        if !self.active || self.actions.is_empty() {
            return None;
        }
        let len = self.actions.len().min(self.segment_length);
        let seg = self.cut(len, false);
        self.active = false;
        Some(seg)
    }

    fn cut(&mut self, len: usize, terminal: bool) -> GameSegment {
        let total = self.actions.len().min(len + self.padding);
        let terminal = terminal && total == self.actions.len();
        let snaps = if self.snapshots.len() == self.actions.len() {
            self.snapshots[..total].to_vec()
        } else {
            Vec::new()
        };
        let seg = GameSegment {
            frame_shape: self.frame_shape,
            frames_stacked: self.frames_stacked,
            frames: self.frames[..total + self.frames_stacked].to_vec(),
            actions: self.actions[..total].to_vec(),
            rewards: self.rewards[..total].to_vec(),
            policies: self.policies[..total].to_vec(),
            root_values: self.root_values[..total].to_vec(),
            collected_at: self.collected_at[..total].to_vec(),
            len,
            episode_start: self.at_episode_start,
            terminal,
            snapshots: snaps,
        };
        self.frames.drain(..len);
        self.actions.drain(..len);
        self.rewards.drain(..len);
        self.policies.drain(..len);
        self.root_values.drain(..len);
        self.collected_at.drain(..len);
        if self.snapshots.len() >= len {
            self.snapshots.drain(..len);
        }
        self.at_episode_start = false;
        seg
    }
}

/// Serializable scalar part of a segment, used by buffer snapshots.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct SegmentHeader {
    pub frame_shape: [usize; 3],
    pub frames_stacked: usize,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub policies: Vec<Vec<f64>>,
    pub root_values: Vec<f64>,
    pub collected_at: Vec<usize>,
    pub len: usize,
    pub episode_start: bool,
    pub terminal: bool,
    pub snapshots: Vec<EnvSnapshot>,
}

impl GameSegment {
    pub(crate) fn header(&self) -> SegmentHeader {
        SegmentHeader {
            frame_shape: self.frame_shape,
            frames_stacked: self.frames_stacked,
            actions: self.actions.clone(),
            rewards: self.rewards.clone(),
            policies: self.policies.clone(),
            root_values: self.root_values.clone(),
            collected_at: self.collected_at.clone(),
            len: self.len,
            episode_start: self.episode_start,
            terminal: self.terminal,
            snapshots: self.snapshots.clone(),
        }
    }

    pub(crate) fn from_header(h: SegmentHeader, frames: Vec<Vec<f32>>) -> Self {
        GameSegment {
            frame_shape: h.frame_shape,
            frames_stacked: h.frames_stacked,
            frames,
            actions: h.actions,
            rewards: h.rewards,
            policies: h.policies,
            root_values: h.root_values,
            collected_at: h.collected_at,
            len: h.len,
            episode_start: h.episode_start,
            terminal: h.terminal,
            snapshots: h.snapshots,
        }
    }
}
