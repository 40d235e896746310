//! Timestamp-based buffer scheduler pairing leader and follower
//! observations within a sliding temporal window.
//!
//! Pairing is greedy nearest-timestamp with one-shot consumption. Emission
//! is deferred until no future arrival could form a strictly closer pair
//! with either endpoint, which makes the emitted pair set equal to an
//! offline all-pairs greedy matcher for any per-source-valid interleaving.

use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SyncError {
    #[error("out-of-order timestamp {got:.6} on {stream:?} (last was {last:.6})")]
    OutOfOrder {
        stream: Source,
        got: f64,
        last: f64,
    },
    #[error("non-finite timestamp {0}")]
    BadTimestamp(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Source {
    Leader,
    Follower,
}

/// A time-stamped observation; the payload is an opaque reference.
#[derive(Debug, Clone, PartialEq)]
pub struct StampedItem<T> {
    pub timestamp: f64,
    pub source: Source,
    pub payload: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncConfig {
    /// Maximum |t_leader - t_follower| of an emitted pair, seconds.
    pub window: f64,
    /// Per-source buffer capacity; the oldest item is evicted beyond it.
    pub buffer_capacity: usize,
}

impl Default for SyncConfig {
    fn default() -> Self {
        Self {
            window: 0.05,
            buffer_capacity: 128,
        }
    }
}

/// An emitted (leader, follower) pair.
pub type MatchedPair<T> = (StampedItem<T>, StampedItem<T>);

/// Buffered two-stream scheduler. Mutations serialize through `&mut self`;
/// wrap in a mutex to share across pushing threads.
#[derive(Debug)]
pub struct SyncBuffer<T> {
    cfg: SyncConfig,
    leader: VecDeque<StampedItem<T>>,
    follower: VecDeque<StampedItem<T>>,
    last_leader: Option<f64>,
    last_follower: Option<f64>,
}

impl<T: Clone> SyncBuffer<T> {
    pub fn new(cfg: SyncConfig) -> Self {
        Self {
            cfg,
            leader: VecDeque::new(),
            follower: VecDeque::new(),
            last_leader: None,
            last_follower: None,
        }
    }

    pub fn len(&self, source: Source) -> usize {
        match source {
            Source::Leader => self.leader.len(),
            Source::Follower => self.follower.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.leader.is_empty() && self.follower.is_empty()
    }

    /// Push one item; returns every pair that became safe to emit, nearest
    /// timestamps first. Rejects items that are not strictly newer than the
    /// last accepted item of their source.
    pub fn push(&mut self, item: StampedItem<T>) -> Result<Vec<MatchedPair<T>>, SyncError> {
        if !item.timestamp.is_finite() {
            return Err(SyncError::BadTimestamp(item.timestamp));
        }
        let last = match item.source {
            Source::Leader => &mut self.last_leader,
            Source::Follower => &mut self.last_follower,
        };
        if let Some(prev) = *last {
            if item.timestamp <= prev {
                return Err(SyncError::OutOfOrder {
                    stream: item.source,
                    got: item.timestamp,
                    last: prev,
                });
            }
        }
        *last = Some(item.timestamp);
        match item.source {
            Source::Leader => self.leader.push_back(item),
            Source::Follower => self.follower.push_back(item),
        }
        self.evict();
        Ok(self.drain_safe_pairs())
    }

    /// Flush every admissible pair assuming no further input will arrive.
    pub fn finish(&mut self) -> Vec<MatchedPair<T>> {
        self.last_leader = Some(f64::INFINITY);
        self.last_follower = Some(f64::INFINITY);
        self.drain_safe_pairs()
    }

    fn evict(&mut self) {
        while self.leader.len() > self.cfg.buffer_capacity {
            self.leader.pop_front();
        }
        while self.follower.len() > self.cfg.buffer_capacity {
            self.follower.pop_front();
        }
    }

    /// No future item of `source` can land strictly closer than `delta`
    /// to time `t` once that stream has advanced past `t + delta`.
    fn future_cannot_beat(&self, source: Source, t: f64, delta: f64) -> bool {
        let last = match source {
            Source::Leader => self.last_leader,
            Source::Follower => self.last_follower,
        };
        match last {
            Some(ts) => ts >= t + delta,
            None => false,
        }
    }

    fn drain_safe_pairs(&mut self) -> Vec<MatchedPair<T>> {
        let mut out = Vec::new();
        loop {
            // minimal-delta admissible pair among the buffered items
            let mut best: Option<(f64, usize, usize)> = None;
            for (li, l) in self.leader.iter().enumerate() {
                for (fi, f) in self.follower.iter().enumerate() {
                    let delta = (l.timestamp - f.timestamp).abs();
                    if delta > self.cfg.window {
                        continue;
                    }
                    let key = (delta, l.timestamp, f.timestamp);
                    let better = match best {
                        None => true,
                        Some((bd, bl, bf)) => {
                            key < (bd, self.leader[bl].timestamp, self.follower[bf].timestamp)
                        }
                    };
                    if better {
                        best = Some((delta, li, fi));
                    }
                }
            }
            let Some((delta, li, fi)) = best else {
                break;
            };
            let lt = self.leader[li].timestamp;
            let ft = self.follower[fi].timestamp;
            // safe once neither endpoint can get a strictly closer partner:
            // the leader endpoint is threatened by future followers and
            // vice versa
            let leader_safe = self.future_cannot_beat(Source::Follower, lt, delta);
            let follower_safe = self.future_cannot_beat(Source::Leader, ft, delta);
            if !(leader_safe && follower_safe) {
                break;
            }
            let l = self.leader.remove(li).expect("index valid");
            let f = self.follower.remove(fi).expect("index valid");
            out.push((l, f));
        }
        out
    }
}

/// Offline reference matcher: all cross pairs within the window, greedily
/// consumed in ascending-delta order (ties by timestamps). Returns pairs of
/// indices into the two parallel timestamp lists.
pub fn offline_match(leader_ts: &[f64], follower_ts: &[f64], window: f64) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (li, &lt) in leader_ts.iter().enumerate() {
        for (fi, &ft) in follower_ts.iter().enumerate() {
            let delta = (lt - ft).abs();
            if delta <= window {
                pairs.push((delta, lt, ft, li, fi));
            }
        }
    }
    pairs.sort_by(|a, b| {
        (a.0, a.1, a.2)
            .partial_cmp(&(b.0, b.1, b.2))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut used_l = vec![false; leader_ts.len()];
    let mut used_f = vec![false; follower_ts.len()];
    let mut out = Vec::new();
    for (_, _, _, li, fi) in pairs {
        if used_l[li] || used_f[fi] {
            continue;
        }
        used_l[li] = true;
        used_f[fi] = true;
        out.push((li, fi));
    }
    out
}
