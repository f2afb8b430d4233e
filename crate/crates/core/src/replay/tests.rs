use super::*;
use crate::env::Observation;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Segment of `len` transitions with 2 actions and 1×1×2 frames.
pub(crate) fn toy_segment(len: usize, step: usize) -> GameSegment {
    GameSegment {
        frame_shape: [1, 1, 2],
        frames_stacked: 2,
        frames: (0..len + 2).map(|i| vec![i as f32, 0.5]).collect(),
        actions: (0..len).map(|i| i % 2).collect(),
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

fn chi_bound(n: f64, p: f64) -> f64 {
    3.0 * (n * p * (1.0 - p)).sqrt()
}

#[test]
fn empty_buffer_gives_priority_one() {
    let mut b = ReplayBuffer::new(10, 0.6);
    b.append(toy_segment(3, 0)).unwrap();
    for t in b.transitions() {
        assert_eq!(b.priority(t), Some(1.0));
    }
}

#[test]
fn new_data_gets_current_max() {
    let mut b = ReplayBuffer::new(10, 0.6);
    b.append(toy_segment(2, 0)).unwrap();
    let t = b.transitions();
    b.update_priorities(&t, &[3.2, 0.1]).unwrap();
    b.append(toy_segment(2, 1)).unwrap();
    let after = b.transitions();
    assert_eq!(b.priority(after[2]), Some(3.2));
    assert_eq!(b.priority(after[3]), Some(3.2));
}

#[test]
fn fifo_eviction_by_segment() {
    let mut b = ReplayBuffer::new(5, 0.6);
    let first = b.append(toy_segment(3, 0)).unwrap();
    b.append(toy_segment(2, 1)).unwrap();
    assert_eq!(b.len(), 5);
    let old = b.transitions()[0];
    b.append(toy_segment(2, 2)).unwrap();
    assert_eq!(b.len(), 4);
    assert_eq!(b.num_segments(), 2);
    assert!(b.segments().all(|s| s.collected_at[0] > 0));
    assert_eq!(old.segment_id, first);
    assert_eq!(b.probability(old), None);
    assert_eq!(b.update_priorities(&[old], &[5.0]).unwrap(), 0);
    assert!(b.append(toy_segment(6, 3)).is_err());
}

#[test]
fn malformed_segments_rejected() {
    let mut b = ReplayBuffer::new(10, 0.6);
    let mut s = toy_segment(3, 0);
    s.rewards.pop();
    assert!(matches!(b.append(s), Err(ReplayError::Malformed(_))));
    let mut s = toy_segment(3, 0);
    s.collected_at = vec![2, 1, 3];
    assert!(matches!(b.append(s), Err(ReplayError::Malformed(_))));
    let mut s = toy_segment(3, 0);
    s.policies[1] = vec![0.7, 0.7];
    assert!(b.append(s).is_err());
}

#[test]
fn under_filled_buffer_refuses() {
    let mut b = ReplayBuffer::new(10, 0.6);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        b.sample(4, 0.4, 1, &mut rng),
        Err(ReplayError::UnderFilled { have: 0, need: 1 })
    ));
    b.append(toy_segment(3, 0)).unwrap();
    assert!(matches!(
        b.sample(4, 0.4, 5, &mut rng),
        Err(ReplayError::UnderFilled { have: 3, need: 5 })
    ));
}

#[test]
fn uniform_priorities_sample_uniformly() {
    let mut b = ReplayBuffer::new(8, 0.6);
    b.append(toy_segment(5, 0)).unwrap();
    b.append(toy_segment(3, 0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let draws = 100_000usize;
    let mut counts = std::collections::HashMap::new();
    for s in b.sample(draws, 0.4, 1, &mut rng).unwrap() {
        assert_eq!(s.weight, 1.0);
        *counts.entry(s.index).or_insert(0usize) += 1;
    }
    assert_eq!(counts.len(), 8);
    let expected = draws as f64 / 8.0;
    for c in counts.values() {
        assert!((*c as f64 - expected).abs() <= chi_bound(draws as f64, 0.125));
    }
}

#[test]
fn closed_form_probabilities_and_weights() {
    let mut b = ReplayBuffer::new(2, 1.0);
    b.append(toy_segment(2, 0)).unwrap();
    let t = b.transitions();
    b.update_priorities(&t, &[1.0, 3.0]).unwrap();
    assert!((b.probability(t[0]).unwrap() - 0.25).abs() < 1e-12);
    assert!((b.probability(t[1]).unwrap() - 0.75).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let draws = 100_000;
    let batch = b.sample(draws, 1.0, 1, &mut rng).unwrap();
    let hits = batch.iter().filter(|s| s.index == t[1]).count() as f64;
    assert!((hits - 0.75 * draws as f64).abs() <= chi_bound(draws as f64, 0.75));
    // raw weights 1/(2·0.25) = 2 and 1/(2·0.75) ≈ 0.667, normalized by 2
    for s in &batch {
        let expect = if s.index == t[1] { (2.0 / 3.0) / 2.0 } else { 1.0 };
        assert!((s.weight - expect).abs() < 1e-12);
    }
}

#[test]
fn priority_updates_floor_and_shift_frequency() {
    let mut b = ReplayBuffer::new(4, 1.0);
    b.append(toy_segment(4, 0)).unwrap();
    let t = b.transitions();
    b.update_priorities(&t, &[0.0, 2.5, 1.0, 1.0]).unwrap();
    assert_eq!(b.priority(t[0]), Some(PRIORITY_FLOOR));
    assert_eq!(b.priority(t[1]), Some(2.5));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let draws = 50_000;
    let before = b.sample(draws, 0.4, 1, &mut rng).unwrap().iter().filter(|s| s.index == t[2]).count();
    b.update_priorities(&[t[2]], &[10.0]).unwrap();
    let after = b.sample(draws, 0.4, 1, &mut rng).unwrap().iter().filter(|s| s.index == t[2]).count();
    assert!(after > 3 * before, "{before} → {after}");
    let bad = TransitionRef { slot: 99, segment_id: 0 };
    assert_eq!(b.update_priorities(&[bad], &[1.0]), Err(ReplayError::IndexOutOfRange { index: 99 }));
}

#[test]
fn snapshot_round_trip() {
    let mut b = ReplayBuffer::new(10, 0.6);
    b.append(toy_segment(3, 0)).unwrap();
    b.append(toy_segment(4, 2)).unwrap();
    let t = b.transitions();
    b.update_priorities(&t[..2], &[0.3, 7.0]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("buffer.ezck");
    b.save(&path).unwrap();
    let loaded = ReplayBuffer::load(&path).unwrap();
    assert_eq!(loaded.len(), 7);
    let segs: Vec<_> = loaded.segments().map(|s| (**s).clone()).collect();
    let orig: Vec<_> = b.segments().map(|s| (**s).clone()).collect();
    assert_eq!(segs, orig);
    let lt = loaded.transitions();
    for (x, y) in t.iter().zip(&lt) {
        assert_eq!(b.priority(*x), loaded.priority(*y));
    }
}

fn obs(v: f32) -> Observation {
    Observation {
        shape: [1, 1, 1],
        pixels: vec![v],
    }
}

fn record(i: usize, done: bool) -> StepRecord {
    StepRecord {
        action: i % 2,
        reward: i as f64,
        policy: vec![0.5, 0.5],
        root_value: 0.0,
        collected_at: i,
        snapshot: None,
        next: obs(i as f32 + 1.0),
        done,
    }
}

#[test]
fn builder_cuts_with_padding() {
    let mut sb = SegmentBuilder::new(3, 2, 2);
    sb.reset(&obs(0.0));
    let mut segs = Vec::new();
    for i in 0..8 {
        segs.extend(sb.push(record(i, i == 7)));
    }
    assert_eq!(segs.len(), 3);
    let (a, b, c) = (&segs[0], &segs[1], &segs[2]);
    assert_eq!((a.len, a.total(), a.terminal, a.episode_start), (3, 5, false, true));
    assert_eq!(a.stacked(0), vec![0.0, 0.0]);
    assert_eq!(a.stacked(5), vec![4.0, 5.0]);
    assert_eq!((b.len, b.total(), b.terminal, b.episode_start), (3, 5, true, false));
    assert_eq!(b.rewards, vec![3.0, 4.0, 5.0, 6.0, 7.0]);
    assert_eq!(b.stacked(0), vec![2.0, 3.0]);
    assert_eq!((c.len, c.total(), c.terminal), (2, 2, true));
    assert_eq!(c.stacked(2), vec![7.0, 8.0]);
    for s in &segs {
        s.validate().unwrap();
    }
    sb.reset(&obs(0.0));
    sb.push(record(0, false));
    let f = sb.flush().unwrap();
    assert_eq!((f.len, f.terminal), (1, false));
    assert!(sb.flush().is_none());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn probabilities_sum_to_one(
        ops in proptest::collection::vec((1usize..6, proptest::collection::vec(0.0f64..20.0, 0..6)), 1..20),
        alpha in 0.0f64..1.5,
    ) {
        let mut b = ReplayBuffer::new(12, alpha);
        for (step, (len, errs)) in ops.into_iter().enumerate() {
            b.append(toy_segment(len, step)).unwrap();
            let t = b.transitions();
            let k = errs.len().min(t.len());
            b.update_priorities(&t[..k], &errs[..k]).unwrap();
            let total: f64 = t.iter().map(|i| b.probability(*i).unwrap()).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(t.iter().all(|i| b.priority(*i).unwrap() > 0.0));
            prop_assert!(b.len() <= 12);
        }
    }
}
