//! Object-centric retrieval of past observations.
//!
//! A step's observation alone can under-determine the state. To compensate,
//! the agent retrieves the most recent past observations sharing at least
//! one object with the current one and concatenates them (separator-joined,
//! oldest first) in front of the current observation.

use std::sync::Arc;

use crate::actions::ObjId;
use crate::text::{ObjectSpan, ObservationDoc, SEP};

/// Per-episode store of unextended observation docs, in time order.
#[derive(Debug, Default)]
pub struct HistoryBuffer {
    docs: Vec<Arc<ObservationDoc>>,
}

impl HistoryBuffer {
    pub fn new() -> Self {
        HistoryBuffer { docs: Vec::new() }
    }

    /// Append the doc observed at its `time_step`. Steps must increase.
    pub fn push(&mut self, doc: Arc<ObservationDoc>) {
        if let Some(last) = self.docs.last() {
            assert!(
                doc.time_step > last.time_step,
                "history time steps must strictly increase"
            );
        }
        self.docs.push(doc);
    }

    pub fn clear(&mut self) {
        self.docs.clear();
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn docs(&self) -> &[Arc<ObservationDoc>] {
        &self.docs
    }
}

/// The `k` most recent stored docs sharing an object with the current
/// observation, ascending by time. With `recency_only`, the object filter is
/// dropped and the latest `k` docs are returned regardless of overlap.
pub fn retrieve(
    history: &HistoryBuffer,
    current_objects: &[ObjId],
    k: usize,
    recency_only: bool,
) -> Vec<Arc<ObservationDoc>> {
    if k == 0 {
        return Vec::new();
    }
    let mut picked: Vec<Arc<ObservationDoc>> = Vec::with_capacity(k);
    for doc in history.docs.iter().rev() {
        let shares = recency_only
            || current_objects
                .iter()
                .any(|&o| doc.contains_object(o));
        if shares {
            picked.push(Arc::clone(doc));
            if picked.len() == k {
                break;
            }
        }
    }
    picked.reverse();
    picked
}

/// Concatenate retrieved docs (ascending by time) in front of the current
/// one, separator-joined. Spans are re-offset; the `none` anchor stays
/// pinned to the current segment's first separator.
pub fn extend_observation(
    current: &Arc<ObservationDoc>,
    retrieved: &[Arc<ObservationDoc>],
) -> Arc<ObservationDoc> {
    if retrieved.is_empty() {
        return Arc::clone(current);
    }
    debug_assert!(retrieved
        .windows(2)
        .all(|w| w[0].time_step < w[1].time_step));

    let total: usize = retrieved.iter().map(|d| d.len() + 1).sum::<usize>() + current.len();
    let mut tokens = Vec::with_capacity(total);
    let mut spans: Vec<ObjectSpan> = Vec::new();
    let mut sep_positions = Vec::new();

    let append = |doc: &ObservationDoc, tokens: &mut Vec<u32>,
                  spans: &mut Vec<ObjectSpan>, seps: &mut Vec<usize>| {
        let offset = tokens.len();
        tokens.extend_from_slice(&doc.tokens);
        seps.extend(doc.sep_positions.iter().map(|&p| p + offset));
        spans.extend(doc.object_spans.iter().map(|s| ObjectSpan {
            object: s.object,
            start: s.start + offset,
            end: s.end + offset,
            head: s.head + offset,
        }));
        offset
    };

    for doc in retrieved {
        append(doc, &mut tokens, &mut spans, &mut sep_positions);
        sep_positions.push(tokens.len());
        tokens.push(SEP);
    }
    let current_offset = append(current, &mut tokens, &mut spans, &mut sep_positions);
    let anchor = current_offset + current.none_anchor;

    Arc::new(ObservationDoc::new(
        tokens,
        spans,
        sep_positions,
        current.time_step,
        anchor,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// A doc with the given time step and one span per object id.
    fn doc(time: usize, objects: &[usize], len: usize) -> Arc<ObservationDoc> {
        assert!(len >= objects.len() + 2);
        let tokens: Vec<u32> = (0..len as u32).map(|i| i + 10).collect();
        let spans = objects
            .iter()
            .enumerate()
            .map(|(i, &o)| ObjectSpan {
                object: ObjId(o),
                start: i,
                end: i + 1,
                head: i,
            })
            .collect();
        // give every doc one separator so the anchor is defined
        Arc::new(ObservationDoc::new(
            tokens,
            spans,
            vec![len - 1],
            time,
            len - 1,
        ))
    }

    fn ids(v: &[usize]) -> Vec<ObjId> {
        v.iter().map(|&i| ObjId(i)).collect()
    }

    #[test]
    fn retrieve_shared_object_docs_sorted() {
        let mut h = HistoryBuffer::new();
        h.push(doc(1, &[7, 9], 5)); // sword, troll
        h.push(doc(2, &[3], 5)); // lamp
        h.push(doc(3, &[7], 5)); // sword
        let got = retrieve(&h, &ids(&[7]), 2, false);
        let times: Vec<usize> = got.iter().map(|d| d.time_step).collect();
        assert_eq!(times, vec![1, 3]);
    }

    #[test]
    fn retrieve_most_recent_one() {
        let mut h = HistoryBuffer::new();
        h.push(doc(1, &[7, 9], 5));
        h.push(doc(2, &[3], 5));
        h.push(doc(3, &[7], 5));
        let got = retrieve(&h, &ids(&[7]), 1, false);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].time_step, 3);
    }

    #[test]
    fn retrieve_no_shared_objects() {
        let mut h = HistoryBuffer::new();
        h.push(doc(1, &[7], 5));
        h.push(doc(2, &[3], 5));
        assert!(retrieve(&h, &ids(&[5]), 4, false).is_empty());
        assert!(retrieve(&h, &ids(&[]), 4, false).is_empty());
    }

    #[test]
    fn recency_only_ignores_object_filter() {
        let mut h = HistoryBuffer::new();
        h.push(doc(1, &[7], 5));
        h.push(doc(2, &[3], 5));
        h.push(doc(3, &[4], 5));
        let got = retrieve(&h, &ids(&[]), 2, true);
        let times: Vec<usize> = got.iter().map(|d| d.time_step).collect();
        assert_eq!(times, vec![2, 3]);
    }

    #[test]
    fn extend_empty_retrieval_is_identity() {
        let cur = doc(4, &[1], 6);
        let ext = extend_observation(&cur, &[]);
        assert_eq!(ext.tokens, cur.tokens);
        assert_eq!(ext.none_anchor, cur.none_anchor);
    }

    #[test]
    fn extend_lengths_and_anchor() {
        let a = doc(1, &[1], 3);
        let b = doc(2, &[1], 4);
        let cur = doc(3, &[1], 5);
        let ext = extend_observation(&cur, &[a, b]);
        assert_eq!(ext.len(), 3 + 1 + 4 + 1 + 5);
        // current segment starts at 3+1+4+1 = 9; its anchor was len-1 = 4
        assert_eq!(ext.none_anchor, 9 + 4);
        assert_eq!(ext.time_step, 3);
        // joiner separators present at the segment boundaries
        assert_eq!(ext.tokens[3], SEP);
        assert_eq!(ext.tokens[8], SEP);
        // spans re-offset: one span per doc at its segment start
        let heads: Vec<usize> = ext.head_indices(ObjId(1));
        assert_eq!(heads, vec![0, 4, 9]);
    }

    #[test]
    fn retrieval_properties_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let mut h = HistoryBuffer::new();
            let hist_len = rng.gen_range(0..12);
            for t in 0..hist_len {
                let objs: Vec<usize> = (0..rng.gen_range(0..4)).map(|_| rng.gen_range(0..6)).collect();
                let mut objs = objs;
                objs.sort();
                objs.dedup();
                h.push(doc(t + 1, &objs, objs.len() + rng.gen_range(2..5)));
            }
            let current: Vec<usize> = {
                let mut v: Vec<usize> = (0..rng.gen_range(0..3)).map(|_| rng.gen_range(0..6)).collect();
                v.sort();
                v.dedup();
                v
            };
            let k = rng.gen_range(0..5);
            let got = retrieve(&h, &ids(&current), k, false);

            // every returned doc shares >= 1 object and order is ascending
            assert!(got.len() <= k);
            for d in &got {
                assert!(current.iter().any(|&o| d.contains_object(ObjId(o))));
            }
            for w in got.windows(2) {
                assert!(w[0].time_step < w[1].time_step);
            }
            // exactly the k most recent qualifying docs
            let qualifying: Vec<usize> = h
                .docs()
                .iter()
                .filter(|d| current.iter().any(|&o| d.contains_object(ObjId(o))))
                .map(|d| d.time_step)
                .collect();
            let expect: Vec<usize> = qualifying
                .iter()
                .rev()
                .take(k)
                .rev()
                .copied()
                .collect();
            let times: Vec<usize> = got.iter().map(|d| d.time_step).collect();
            assert_eq!(times, expect);

            // stability: retrieving k then truncating to k' equals retrieving k'
            if k > 1 {
                let kp = k - 1;
                let direct = retrieve(&h, &ids(&current), kp, false);
                let truncated: Vec<usize> = times[times.len().saturating_sub(kp)..].to_vec();
                let direct_times: Vec<usize> = direct.iter().map(|d| d.time_step).collect();
                assert_eq!(direct_times, truncated);
            }
        }
    }
}
