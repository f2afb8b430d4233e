//! Prioritized trajectory storage.

mod segment;
mod tree;

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use segment::{GameSegment, SegmentBuilder, StepRecord};
pub use tree::PriorityTree;

use crate::tensor::{read_checkpoint, write_checkpoint, CheckpointData, Tensor, TensorError};
use segment::SegmentHeader;

pub const PRIORITY_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReplayError {
    #[error("malformed segment: {0}")]
    Malformed(String),
    #[error("buffer holds {have} transitions, sampling needs {need}")]
    UnderFilled { have: usize, need: usize },
    #[error("transition index {index} out of range")]
    IndexOutOfRange { index: usize },
    #[error("{indices} indices but {errors} errors")]
    LengthMismatch { indices: usize, errors: usize },
    #[error("snapshot: {0}")]
    Snapshot(String),
}

impl From<TensorError> for ReplayError {
    fn from(e: TensorError) -> Self {
        ReplayError::Snapshot(e.to_string())
    }
}

/// Handle to one stored transition. Stale handles (their segment was evicted)
/// are ignored by [`ReplayBuffer::update_priorities`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TransitionRef {
    pub slot: usize,
    pub segment_id: u64,
}

#[derive(Debug, Clone)]
pub struct Sampled {
    pub index: TransitionRef,
    pub segment: Arc<GameSegment>,
    pub pos: usize,
    pub probability: f64,
    pub weight: f64,
}

#[derive(Debug)]
struct Entry {
    id: u64,
    segment: Arc<GameSegment>,
    slots: Vec<usize>,
}

/// FIFO store of game segments with proportional prioritized sampling.
#[derive(Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    alpha: f64,
    tree: PriorityTree,
    owners: Vec<Option<(u64, usize)>>,
    free: Vec<usize>,
    entries: VecDeque<Entry>,
    next_id: u64,
    transitions: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, alpha: f64) -> Self {
        assert!(capacity >= 1 && alpha >= 0.0);
        ReplayBuffer {
            capacity,
            alpha,
            tree: PriorityTree::new(capacity),
            owners: vec![None; capacity],
            free: (0..capacity).rev().collect(),
            entries: VecDeque::new(),
            next_id: 0,
            transitions: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Sampleable transitions currently stored.
    pub fn len(&self) -> usize {
        self.transitions
    }

    pub fn is_empty(&self) -> bool {
        self.transitions == 0
    }

    pub fn num_segments(&self) -> usize {
        self.entries.len()
    }

    pub fn segments(&self) -> impl Iterator<Item = &Arc<GameSegment>> {
        self.entries.iter().map(|e| &e.segment)
    }

    /// Largest raw priority stored, 1 when empty.
    pub fn max_priority(&self) -> f64 {
        if self.is_empty() {
            1.0
        } else {
            self.tree.max_priority()
        }
    }

    pub fn append(&mut self, segment: GameSegment) -> Result<u64, ReplayError> {
        let p = self.max_priority();
        self.append_with(segment, &[], p)
    }

    fn append_with(&mut self, segment: GameSegment, priorities: &[f64], default: f64) -> Result<u64, ReplayError> {
        segment.validate()?;
        if segment.len > self.capacity {
            return Err(ReplayError::Malformed(format!(
                "segment of {} transitions exceeds capacity {}",
                segment.len, self.capacity
            )));
        }
        while self.transitions + segment.len > self.capacity {
            self.evict_oldest();
        }
        let id = self.next_id;
        self.next_id += 1;
        let mut slots = Vec::with_capacity(segment.len);
        for pos in 0..segment.len {
            let slot = self.free.pop().expect("free slot after eviction");
            let p = priorities.get(pos).copied().unwrap_or(default).max(PRIORITY_FLOOR);
            self.tree.set(slot, p, p.powf(self.alpha));
            self.owners[slot] = Some((id, pos));
            slots.push(slot);
        }
        self.transitions += segment.len;
        self.entries.push_back(Entry {
            id,
            segment: Arc::new(segment),
            slots,
        });
        Ok(id)
    }

    fn evict_oldest(&mut self) {
        let e = self.entries.pop_front().expect("evicting from empty buffer");
        for &slot in &e.slots {
            self.tree.set(slot, 0.0, 0.0);
            self.owners[slot] = None;
            self.free.push(slot);
        }
        self.transitions -= e.slots.len();
    }

    fn entry(&self, id: u64) -> Option<&Entry> {
        let front = self.entries.front()?.id;
        let e = self.entries.get(id.checked_sub(front)? as usize)?;
        (e.id == id).then_some(e)
    }

    /// Sampling probability of a stored transition.
    pub fn probability(&self, index: TransitionRef) -> Option<f64> {
        match self.owners.get(index.slot)? {
            Some((id, _)) if *id == index.segment_id => Some(self.tree.weighted(index.slot) / self.tree.total()),
            _ => None,
        }
    }

    pub fn priority(&self, index: TransitionRef) -> Option<f64> {
        self.probability(index).map(|_| self.tree.priority(index.slot))
    }

    /// Every stored transition, oldest segment first.
    pub fn transitions(&self) -> Vec<TransitionRef> {
        self.entries
            .iter()
            .flat_map(|e| e.slots.iter().map(move |&slot| TransitionRef { slot, segment_id: e.id }))
            .collect()
    }

    pub fn resolve(&self, index: TransitionRef) -> Option<(Arc<GameSegment>, usize)> {
        let (id, pos) = (*self.owners.get(index.slot)?)?;
        if id != index.segment_id {
            return None;
        }
        self.entry(id).map(|e| (Arc::clone(&e.segment), pos))
    }

    /// Draws `batch` transitions with replacement, `P(i) ∝ p_i^α`, with
    /// importance weights `(N·P(i))^−β` scaled so the batch maximum is 1.
    pub fn sample<R: Rng>(
        &self,
        batch: usize,
        beta: f64,
        min_size: usize,
        rng: &mut R,
    ) -> Result<Vec<Sampled>, ReplayError> {
        if self.transitions < min_size.max(1) {
            return Err(ReplayError::UnderFilled {
                have: self.transitions,
                need: min_size.max(1),
            });
        }
        let total = self.tree.total();
        let n = self.transitions as f64;
        let mut out = Vec::with_capacity(batch);
        for _ in 0..batch {
            let u = rng.random::<f64>() * total;
            let slot = self.tree.find(u);
            let (id, pos) = self.owners[slot].expect("sampled slot is occupied");
            let probability = self.tree.weighted(slot) / total;
            let entry = self.entry(id).expect("owner segment is stored");
            out.push(Sampled {
                index: TransitionRef { slot, segment_id: id },
                segment: Arc::clone(&entry.segment),
                pos,
                probability,
                weight: (n * probability).powf(-beta),
            });
        }
        let max_w = out.iter().map(|s| s.weight).fold(0.0, f64::max);
        for s in &mut out {
            s.weight /= max_w;
        }
        Ok(out)
    }

    /// Sets `p_i = max(|error|, floor)`. Returns how many handles were live.
    pub fn update_priorities(&mut self, indices: &[TransitionRef], errors: &[f64]) -> Result<usize, ReplayError> {
        if indices.len() != errors.len() {
            return Err(ReplayError::LengthMismatch {
                indices: indices.len(),
                errors: errors.len(),
            });
        }
        if let Some(bad) = indices.iter().find(|i| i.slot >= self.capacity) {
            return Err(ReplayError::IndexOutOfRange { index: bad.slot });
        }
        let mut live = 0;
        for (idx, err) in indices.iter().zip(errors) {
            if !matches!(self.owners[idx.slot], Some((id, _)) if id == idx.segment_id) {
                continue;
            }
            let p = if err.is_finite() { err.abs().max(PRIORITY_FLOOR) } else { PRIORITY_FLOOR };
            self.tree.set(idx.slot, p, p.powf(self.alpha));
            live += 1;
        }
        Ok(live)
    }

    /// Writes segments and priorities in the checkpoint container.
    pub fn save(&self, path: &Path) -> Result<(), ReplayError> {
        let mut headers = Vec::new();
        let mut entries = Vec::new();
        for e in &self.entries {
            let seg = &e.segment;
            let rows = seg.frames.len();
            let data: Vec<f32> = seg.frames.iter().flatten().copied().collect();
            entries.push((
                format!("segment.{}.frames", headers.len()),
                false,
                Tensor::new(vec![rows, seg.frame_len()], data)?,
            ));
            headers.push(SnapshotSegment {
                header: seg.header(),
                priorities: e.slots.iter().map(|&s| self.tree.priority(s)).collect(),
            });
        }
        let meta = SnapshotMeta {
            capacity: self.capacity,
            alpha: self.alpha,
            segments: headers,
        };
        let metadata = serde_json::to_string(&meta).map_err(|e| ReplayError::Snapshot(e.to_string()))?;
        let mut w = BufWriter::new(File::create(path).map_err(|e| ReplayError::Snapshot(e.to_string()))?);
        write_checkpoint(&mut w, &CheckpointData { metadata, entries })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ReplayError> {
        let mut r = BufReader::new(File::open(path).map_err(|e| ReplayError::Snapshot(e.to_string()))?);
        let data: CheckpointData<f32> = read_checkpoint(&mut r)?;
        let meta: SnapshotMeta =
            serde_json::from_str(&data.metadata).map_err(|e| ReplayError::Snapshot(e.to_string()))?;
        if meta.segments.len() != data.entries.len() {
            return Err(ReplayError::Snapshot("segment count mismatch".into()));
        }
        let mut buf = ReplayBuffer::new(meta.capacity, meta.alpha);
        for (s, (_, _, t)) in meta.segments.into_iter().zip(data.entries) {
            let frames = t.data().chunks(t.row_len().max(1)).map(|c| c.to_vec()).collect();
            let seg = GameSegment::from_header(s.header, frames);
            buf.append_with(seg, &s.priorities, 1.0)?;
        }
        Ok(buf)
    }
}

#[derive(Serialize, Deserialize)]
struct SnapshotSegment {
    header: SegmentHeader,
    priorities: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SnapshotMeta {
    capacity: usize,
    alpha: f64,
    segments: Vec<SnapshotSegment>,
}

#[cfg(test)]
pub(crate) mod tests;
