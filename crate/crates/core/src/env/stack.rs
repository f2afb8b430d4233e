use std::collections::VecDeque;

use super::Observation;

/// Last `F` frames concatenated along channels, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedObservation {
    pub shape: [usize; 3],
    pub pixels: Vec<f32>,
}

impl StackedObservation {
    /// Stacks a history; a short history is padded by repeating its earliest frame.
    pub fn stack(history: &[Observation], frames: usize) -> Self {
        assert!(frames >= 1 && !history.is_empty());
        let [c, h, w] = history[0].shape;
        let start = history.len().saturating_sub(frames);
        let tail = &history[start..];
        let pad = frames - tail.len();
        let mut pixels = Vec::with_capacity(frames * c * h * w);
        for _ in 0..pad {
            pixels.extend_from_slice(&tail[0].pixels);
        }
        for f in tail {
            pixels.extend_from_slice(&f.pixels);
        }
        StackedObservation {
            shape: [frames * c, h, w],
            pixels,
        }
    }
}

/// Rolling frame history for an actor.
#[derive(Debug, Clone)]
pub struct FrameStack {
    frames: usize,
    history: VecDeque<Observation>,
}

impl FrameStack {
    pub fn new(frames: usize) -> Self {
        FrameStack {
            frames,
            history: VecDeque::with_capacity(frames),
        }
    }

    /// Starts a new episode: history becomes `F` copies of the first frame.
    pub fn reset(&mut self, first: Observation) {
        self.history.clear();
        for _ in 0..self.frames {
            self.history.push_back(first.clone());
        }
    }

    pub fn push(&mut self, obs: Observation) {
        if self.history.len() == self.frames {
            self.history.pop_front();
        }
        self.history.push_back(obs);
    }

    pub fn stacked(&self) -> StackedObservation {
        let frames: Vec<Observation> = self.history.iter().cloned().collect();
        StackedObservation::stack(&frames, self.frames)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(v: f32) -> Observation {
        Observation {
            shape: [3, 2, 2],
            pixels: vec![v; 12],
        }
    }

    #[test]
    fn single_frame_is_identity() {
        let f = frame(0.5);
        let s = StackedObservation::stack(std::slice::from_ref(&f), 1);
        assert_eq!(s.shape, f.shape);
        assert_eq!(s.pixels, f.pixels);
    }

    #[test]
    fn four_rgb_frames_make_twelve_channels() {
        let hist: Vec<_> = (0..4).map(|i| frame(i as f32 / 4.0)).collect();
        let s = StackedObservation::stack(&hist, 4);
        assert_eq!(s.shape, [12, 2, 2]);
        // oldest first
        assert_eq!(s.pixels[0], 0.0);
        assert_eq!(s.pixels[47], 0.75);
    }

    #[test]
    fn initial_step_pads_with_copies() {
        let mut fs = FrameStack::new(4);
        fs.reset(frame(0.25));
        let s = fs.stacked();
        assert_eq!(s.shape, [12, 2, 2]);
        assert!(s.pixels.iter().all(|v| *v == 0.25));
        let short = StackedObservation::stack(&[frame(0.1), frame(0.2)], 4);
        assert_eq!(&short.pixels[..24], &[0.1; 24]);
        assert_eq!(&short.pixels[36..], &[0.2; 12]);
        fs.push(frame(1.0));
        let s = fs.stacked();
        assert_eq!(&s.pixels[36..], &[1.0; 12]);
        assert_eq!(&s.pixels[..12], &[0.25; 12]);
    }
}
