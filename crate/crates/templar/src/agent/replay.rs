//! Transition storage: FIFO replay ring with a prioritized subset, episode
//! trajectories, and the moving-average score tracker that decides which
//! trajectories get priority.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;

use crate::actions::TemplateAction;
use crate::text::ObservationDoc;

use super::AgentError;

/// One environment step as stored for replay. Docs are the
/// retrieval-extended observations frozen at collection time.
#[derive(Debug, Clone)]
pub struct Transition {
    pub doc: Arc<ObservationDoc>,
    pub action: TemplateAction,
    pub reward: i64,
    pub next_doc: Arc<ObservationDoc>,
    pub next_valid: Arc<Vec<TemplateAction>>,
    pub done: bool,
    pub trajectory: u64,
}

/// Episode record: its transitions' sequence range plus the final score.
/// The prioritized flag is set exactly once, when the episode ends.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub id: u64,
    pub first_seq: u64,
    pub len: usize,
    pub final_score: i64,
    pub prioritized: Option<bool>,
}

impl Trajectory {
    pub fn new(id: u64, first_seq: u64) -> Self {
        Trajectory {
            id,
            first_seq,
            len: 0,
            final_score: 0,
            prioritized: None,
        }
    }
}

/// Exponential moving average of finished-episode scores.
///
/// The first score initializes the average (and is never "outperforming");
/// afterwards `ema <- (1-beta)*score + beta*ema`.
#[derive(Debug, Clone)]
pub struct EmaTracker {
    value: Option<f64>,
    pub beta: f64,
}

impl EmaTracker {
    pub fn new(beta: f64) -> Self {
        EmaTracker { value: None, beta }
    }

    pub fn value(&self) -> Option<f64> {
        self.value
    }

    /// Fold in a finished trajectory's score; returns the prioritized flag
    /// (score strictly above the average before this update).
    pub fn finalize(&mut self, score: f64) -> bool {
        match self.value {
            None => {
                self.value = Some(score);
                false
            }
            Some(ema) => {
                self.value = Some((1.0 - self.beta) * score + self.beta * ema);
                score > ema
            }
        }
    }
}

/// FIFO ring of transitions with an index of the prioritized subset.
#[derive(Debug)]
pub struct ReplayBuffer {
    ring: VecDeque<Arc<Transition>>,
    capacity: usize,
    /// sequence number of ring\[0\]
    base_seq: u64,
    next_seq: u64,
    /// ascending sequence numbers of prioritized transitions still alive
    prioritized: VecDeque<u64>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1);
        ReplayBuffer {
            ring: VecDeque::with_capacity(capacity.min(4096)),
            capacity,
            base_seq: 0,
            next_seq: 0,
            prioritized: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn prioritized_len(&self) -> usize {
        self.prioritized.len()
    }

    /// Append a transition, evicting the oldest when full. Returns its
    /// sequence number.
    pub fn push(&mut self, t: Transition) -> u64 {
        if self.ring.len() == self.capacity {
            self.ring.pop_front();
            self.base_seq += 1;
            while self.prioritized.front().is_some_and(|&s| s < self.base_seq) {
                self.prioritized.pop_front();
            }
        }
        let seq = self.next_seq;
        self.ring.push_back(Arc::new(t));
        self.next_seq += 1;
        seq
    }

    /// Mark a finalized trajectory's transitions as prioritized. Ranges must
    /// arrive in increasing order (episodes finish in order).
    pub fn mark_prioritized(&mut self, first_seq: u64, len: usize) {
        for seq in first_seq..first_seq + len as u64 {
            if seq >= self.base_seq && seq < self.next_seq {
                debug_assert!(self.prioritized.back().map_or(true, |&b| b < seq));
                self.prioritized.push_back(seq);
            }
        }
    }

    pub fn get_seq(&self, seq: u64) -> Option<&Arc<Transition>> {
        if seq < self.base_seq {
            return None;
        }
        self.ring.get((seq - self.base_seq) as usize)
    }

    /// Sample `batch` transitions with replacement: `ceil(pri_frac * batch)`
    /// uniformly from the prioritized subset (falling back to the whole
    /// buffer while the subset is empty), the rest uniformly overall.
    pub fn sample(
        &self,
        batch: usize,
        pri_frac: f64,
        rng: &mut impl Rng,
    ) -> Result<Vec<Arc<Transition>>, AgentError> {
        if self.ring.is_empty() {
            return Err(AgentError::EmptyBuffer);
        }
        let n_pri = if self.prioritized.is_empty() {
            0
        } else {
            ((pri_frac * batch as f64).ceil() as usize).min(batch)
        };
        let mut out = Vec::with_capacity(batch);
        for _ in 0..n_pri {
            let i = rng.gen_range(0..self.prioritized.len());
            let seq = self.prioritized[i];
            out.push(Arc::clone(self.get_seq(seq).expect("pruned on eviction")));
        }
        for _ in n_pri..batch {
            let i = rng.gen_range(0..self.ring.len());
            out.push(Arc::clone(&self.ring[i]));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actions::TplId;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dummy_doc() -> Arc<ObservationDoc> {
        Arc::new(ObservationDoc::new(vec![5, 1, 6], vec![], vec![1], 0, 1))
    }

    fn transition(traj: u64, reward: i64) -> Transition {
        Transition {
            doc: dummy_doc(),
            action: TemplateAction::nullary(TplId(0)),
            reward,
            next_doc: dummy_doc(),
            next_valid: Arc::new(vec![TemplateAction::nullary(TplId(0))]),
            done: false,
            trajectory: traj,
        }
    }

    #[test]
    fn ema_follows_spec_arithmetic() {
        let mut ema = EmaTracker::new(0.9);
        assert!(!ema.finalize(10.0));
        assert_eq!(ema.value(), Some(10.0));
        assert!(ema.finalize(20.0));
        assert!((ema.value().unwrap() - 11.0).abs() < 1e-12);
        assert!(!ema.finalize(5.0));
        assert!((ema.value().unwrap() - 10.4).abs() < 1e-12);
    }

    #[test]
    fn ema_matches_closed_form_recurrence() {
        let beta = 0.9;
        let mut ema = EmaTracker::new(beta);
        let scores = [3.0, 7.5, -2.0, 11.0, 0.0, 4.25];
        let mut expect = None;
        for &s in &scores {
            ema.finalize(s);
            expect = Some(match expect {
                None => s,
                Some(e) => (1.0 - beta) * s + beta * e,
            });
            assert!((ema.value().unwrap() - expect.unwrap()).abs() < 1e-12);
        }
        // bounded between min and max of seen scores
        let v = ema.value().unwrap();
        assert!(v >= -2.0 && v <= 11.0);
    }

    #[test]
    fn buffer_is_fifo_and_bounded() {
        let mut buf = ReplayBuffer::new(3);
        for i in 0..5 {
            buf.push(transition(0, i));
        }
        assert_eq!(buf.len(), 3);
        let rewards: Vec<i64> = (0..10)
            .filter_map(|s| buf.get_seq(s).map(|t| t.reward))
            .collect();
        assert_eq!(rewards, vec![2, 3, 4]);
        assert!(buf.get_seq(0).is_none());
        assert!(buf.get_seq(1).is_none());
    }

    #[test]
    fn eviction_prunes_prioritized_subset() {
        let mut buf = ReplayBuffer::new(3);
        for i in 0..3 {
            buf.push(transition(0, i));
        }
        buf.mark_prioritized(0, 3);
        assert_eq!(buf.prioritized_len(), 3);
        buf.push(transition(1, 3));
        assert_eq!(buf.prioritized_len(), 2);
        buf.push(transition(1, 4));
        buf.push(transition(1, 5));
        assert_eq!(buf.prioritized_len(), 0);
    }

    #[test]
    fn sampling_single_transition_fills_batch() {
        let mut buf = ReplayBuffer::new(8);
        buf.push(transition(0, 42));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = buf.sample(5, 0.5, &mut rng).unwrap();
        assert_eq!(batch.len(), 5);
        assert!(batch.iter().all(|t| t.reward == 42));
    }

    #[test]
    fn sampling_empty_buffer_is_an_error() {
        let buf = ReplayBuffer::new(8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            buf.sample(1, 0.5, &mut rng),
            Err(AgentError::EmptyBuffer)
        ));
    }

    #[test]
    fn empty_prioritized_subset_falls_back_to_uniform() {
        let mut buf = ReplayBuffer::new(8);
        for i in 0..4 {
            buf.push(transition(0, i));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = buf.sample(100, 0.5, &mut rng).unwrap();
        assert_eq!(batch.len(), 100);
        // all four rewards appear: uniform over the whole buffer
        for r in 0..4 {
            assert!(batch.iter().any(|t| t.reward == r));
        }
    }

    #[test]
    fn prioritized_sampling_frequency() {
        // 20% of the buffer prioritized, pri_frac = 0.5:
        // expected prioritized share = 0.5 + 0.5*0.2 = 0.6
        let mut buf = ReplayBuffer::new(1000);
        for i in 0..1000 {
            buf.push(transition(if i < 200 { 1 } else { 0 }, i));
        }
        buf.mark_prioritized(0, 200);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut pri_hits = 0usize;
        let mut total = 0usize;
        while total < 100_000 {
            let batch = buf.sample(10, 0.5, &mut rng).unwrap();
            for t in batch {
                total += 1;
                if t.reward < 200 {
                    pri_hits += 1;
                }
            }
        }
        let freq = pri_hits as f64 / total as f64;
        assert!((freq - 0.6).abs() < 0.02, "freq={freq}");
    }
}
