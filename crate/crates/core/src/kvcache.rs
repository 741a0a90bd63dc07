//! Bounded dual-region key/value cache for streaming attention.
//!
//! Two ordered regions share one store: `past` holds the K/V of frames the
//! stream has already committed, `future` holds the K/V of keyframes the
//! model predicted ahead of the cursor. Each region has its own capacity and
//! its own sliding-window eviction — appending to one region never disturbs
//! the other. Keys are stored already rotated for their absolute position
//! (rotations compose, so relative distances stay correct for any later
//! query), and positions ride along so queries can be rotated consistently.
//!
//! When the stream reaches a predicted keyframe, [`DualRegionKVCache::consume_future`]
//! promotes that entry into the past region, where it conditions subsequent
//! frames exactly as an ordinarily generated frame would.

use std::collections::VecDeque;

use crate::tensor::Tensor;

pub type CacheResult<T> = Result<T, CacheError>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CacheError {
    #[error("cache capacities must be ≥ 1 (got past {past}, future {future})")]
    ZeroCapacity { past: usize, future: usize },
    #[error("position {position} not after current {region} maximum {max}")]
    NonMonotonic {
        region: &'static str,
        position: usize,
        max: usize,
    },
    #[error("past position {position} would not precede future minimum {future_min}")]
    PastReachesFuture { position: usize, future_min: usize },
    #[error("no future entry at position {position} (front is {front:?})")]
    NoSuchFuture {
        position: usize,
        front: Option<usize>,
    },
    #[error("entry has {got} layers, cache established {expected}")]
    LayerCount { expected: usize, got: usize },
}

/// Key/value projections of one latent frame: one `[P, d]` pair per layer,
/// keys already rotated for `position`.
#[derive(Debug, Clone)]
pub struct CacheEntry {
    pub position: usize,
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
}

impl CacheEntry {
    pub fn new(position: usize, keys: Vec<Tensor>, values: Vec<Tensor>) -> CacheEntry {
        debug_assert_eq!(keys.len(), values.len());
        CacheEntry {
            position,
            keys,
            values,
        }
    }
}

/// The dual-region cache. See the module docs for the region semantics.
#[derive(Debug, Clone, Default)]
pub struct DualRegionKVCache {
    past: VecDeque<CacheEntry>,
    future: VecDeque<CacheEntry>,
    capacity_past: usize,
    capacity_future: usize,
}

impl DualRegionKVCache {
    pub fn new(capacity_past: usize, capacity_future: usize) -> CacheResult<DualRegionKVCache> {
        if capacity_past == 0 || capacity_future == 0 {
            return Err(CacheError::ZeroCapacity {
                past: capacity_past,
                future: capacity_future,
            });
        }
        Ok(DualRegionKVCache {
            past: VecDeque::new(),
            future: VecDeque::new(),
            capacity_past,
            capacity_future,
        })
    }

    pub fn capacity_past(&self) -> usize {
        self.capacity_past
    }

    pub fn capacity_future(&self) -> usize {
        self.capacity_future
    }

    pub fn past_len(&self) -> usize {
        self.past.len()
    }

    pub fn future_len(&self) -> usize {
        self.future.len()
    }

    pub fn past_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.past.iter().map(|e| e.position)
    }

    pub fn future_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.future.iter().map(|e| e.position)
    }

    /// Append one committed frame's K/V; evicts the oldest past entry when
    /// the region overflows. The future region is untouched.
    pub fn append_past(&mut self, entry: CacheEntry) -> CacheResult<()> {
        self.check_layers(&entry)?;
        if let Some(back) = self.past.back() {
            if entry.position <= back.position {
                return Err(CacheError::NonMonotonic {
                    region: "past",
                    position: entry.position,
                    max: back.position,
                });
            }
        }
        if let Some(front) = self.future.front() {
            if entry.position >= front.position {
                return Err(CacheError::PastReachesFuture {
                    position: entry.position,
                    future_min: front.position,
                });
            }
        }
        self.past.push_back(entry);
        while self.past.len() > self.capacity_past {
            self.past.pop_front();
        }
        Ok(())
    }

    /// Store a predicted keyframe frame's K/V; evicts the oldest future
    /// entry when that region overflows. The past region is untouched.
    pub fn set_future(&mut self, entry: CacheEntry) -> CacheResult<()> {
        self.check_layers(&entry)?;
        if let Some(back) = self.past.back() {
            if entry.position <= back.position {
                return Err(CacheError::NonMonotonic {
                    region: "past",
                    position: entry.position,
                    max: back.position,
                });
            }
        }
        if let Some(back) = self.future.back() {
            if entry.position <= back.position {
                return Err(CacheError::NonMonotonic {
                    region: "future",
                    position: entry.position,
                    max: back.position,
                });
            }
        }
        self.future.push_back(entry);
        while self.future.len() > self.capacity_future {
            self.future.pop_front();
        }
        Ok(())
    }

    /// True when `n` more future entries fit without evicting pending ones.
    pub fn future_has_room(&self, n: usize) -> bool {
        self.future.len() + n <= self.capacity_future
    }

    /// Drop every pending future entry (e.g. when their prompts changed and
    /// the keyframes must be re-predicted). Returns the dropped positions.
    pub fn clear_future(&mut self) -> Vec<usize> {
        let dropped = self.future.iter().map(|e| e.position).collect();
        self.future.clear();
        dropped
    }

    /// The stream reached the earliest predicted keyframe: move it into the
    /// past region (subject to past eviction). `position` must equal the
    /// smallest future position.
    pub fn consume_future(&mut self, position: usize) -> CacheResult<()> {
        match self.future.front() {
            Some(front) if front.position == position => {}
            front => {
                return Err(CacheError::NoSuchFuture {
                    position,
                    front: front.map(|e| e.position),
                })
            }
        }
        let entry = self.future.pop_front().expect("checked front");
        self.past.push_back(entry);
        while self.past.len() > self.capacity_past {
            self.past.pop_front();
        }
        Ok(())
    }

    /// Entry positions in gather order (past ascending, then future
    /// ascending) plus the past-region count — the column geometry of
    /// [`DualRegionKVCache::gather`] without cloning any tensors.
    pub fn positions(&self) -> (Vec<usize>, usize) {
        let pos = self
            .past
            .iter()
            .chain(self.future.iter())
            .map(|e| e.position)
            .collect();
        (pos, self.past.len())
    }

    /// All cached K/V for one layer, past entries first (ascending), then
    /// future entries (ascending), with their frame positions and the count
    /// of past entries so callers can mask the regions separately. Rows of
    /// the returned tensors are entry-major (`P` token rows per entry).
    pub fn gather(&self, layer: usize) -> GatheredKV {
        let mut keys = Vec::with_capacity(self.past.len() + self.future.len());
        let mut values = Vec::with_capacity(keys.capacity());
        let mut positions = Vec::with_capacity(keys.capacity());
        for e in self.past.iter().chain(self.future.iter()) {
            keys.push(&e.keys[layer]);
            values.push(&e.values[layer]);
            positions.push(e.position);
        }
        GatheredKV {
            keys: if keys.is_empty() {
                None
            } else {
                Some(Tensor::concat(0, &keys).expect("cache entry shapes agree"))
            },
            values: if values.is_empty() {
                None
            } else {
                Some(Tensor::concat(0, &values).expect("cache entry shapes agree"))
            },
            positions,
            n_past: self.past.len(),
        }
    }

    /// Text dump of (region, position) pairs, for debugging and golden tests.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for e in &self.past {
            out.push_str(&format!("past {}\n", e.position));
        }
        for e in &self.future {
            out.push_str(&format!("future {}\n", e.position));
        }
        out
    }

    /// Internal consistency check, also used by property tests: region
    /// bounds, strict monotonicity, and past-before-future ordering.
    pub fn invariants_hold(&self) -> bool {
        let bounded =
            self.past.len() <= self.capacity_past && self.future.len() <= self.capacity_future;
        let increasing = |v: &VecDeque<CacheEntry>| {
            v.iter()
                .zip(v.iter().skip(1))
                .all(|(a, b)| a.position < b.position)
        };
        let ordered = match (self.past.back(), self.future.front()) {
            (Some(p), Some(f)) => p.position < f.position,
            _ => true,
        };
        bounded && increasing(&self.past) && increasing(&self.future) && ordered
    }

    fn check_layers(&self, entry: &CacheEntry) -> CacheResult<()> {
        let expected = self
            .past
            .front()
            .or_else(|| self.future.front())
            .map(|e| e.keys.len());
        match expected {
            Some(expected) if expected != entry.keys.len() => Err(CacheError::LayerCount {
                expected,
                got: entry.keys.len(),
            }),
            _ => Ok(()),
        }
    }
}

/// Result of [`DualRegionKVCache::gather`]: `None` tensors when empty.
#[derive(Debug, Clone)]
pub struct GatheredKV {
    pub keys: Option<Tensor>,
    pub values: Option<Tensor>,
    pub positions: Vec<usize>,
    pub n_past: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn entry(position: usize) -> CacheEntry {
        // 2 layers, P=1, d=4; key data tagged with the position for identity checks
        let t = |v: f64| Tensor::filled(&[1, 4], v);
        CacheEntry::new(
            position,
            vec![t(position as f64), t(position as f64 + 0.5)],
            vec![t(-(position as f64)), t(-(position as f64) - 0.5)],
        )
    }

    #[test]
    fn new_validates_capacities() {
        let c = DualRegionKVCache::new(9, 3).unwrap();
        assert_eq!((c.capacity_past(), c.capacity_future()), (9, 3));
        assert!(DualRegionKVCache::new(1, 1).is_ok());
        assert!(matches!(
            DualRegionKVCache::new(0, 2),
            Err(CacheError::ZeroCapacity { .. })
        ));
        assert!(DualRegionKVCache::new(2, 0).is_err());
    }

    #[test]
    fn past_window_keeps_most_recent() {
        let mut c = DualRegionKVCache::new(9, 2).unwrap();
        for p in 0..9 {
            c.append_past(entry(p)).unwrap();
        }
        assert_eq!(c.past_positions().collect::<Vec<_>>(), (0..9).collect::<Vec<_>>());
        c.append_past(entry(9)).unwrap();
        assert_eq!(c.past_positions().collect::<Vec<_>>(), (1..10).collect::<Vec<_>>());
    }

    #[test]
    fn append_past_rejects_non_monotonic() {
        let mut c = DualRegionKVCache::new(4, 2).unwrap();
        c.append_past(entry(7)).unwrap();
        assert!(matches!(
            c.append_past(entry(5)),
            Err(CacheError::NonMonotonic { position: 5, max: 7, .. })
        ));
    }

    #[test]
    fn future_region_evicts_independently() {
        let mut c = DualRegionKVCache::new(4, 1).unwrap();
        for p in 0..3 {
            c.append_past(entry(p)).unwrap();
        }
        c.set_future(entry(23)).unwrap();
        c.set_future(entry(41)).unwrap(); // capacity 1: 23 evicted
        assert_eq!(c.future_positions().collect::<Vec<_>>(), vec![41]);
        assert_eq!(c.past_positions().collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn set_future_rejects_position_conflicts() {
        let mut c = DualRegionKVCache::new(4, 2).unwrap();
        for p in 0..=5 {
            c.append_past(entry(p)).unwrap();
        }
        assert!(c.set_future(entry(5)).is_err());
        assert!(c.set_future(entry(4)).is_err());
        c.set_future(entry(23)).unwrap();
        assert!(c.set_future(entry(23)).is_err());
        assert!(c.set_future(entry(10)).is_err());
    }

    #[test]
    fn append_past_cannot_cross_future() {
        let mut c = DualRegionKVCache::new(4, 2).unwrap();
        c.append_past(entry(3)).unwrap();
        c.set_future(entry(6)).unwrap();
        c.append_past(entry(4)).unwrap();
        c.append_past(entry(5)).unwrap();
        assert!(matches!(
            c.append_past(entry(6)),
            Err(CacheError::PastReachesFuture { position: 6, future_min: 6 })
        ));
    }

    #[test]
    fn consume_future_moves_entry_to_past() {
        let mut c = DualRegionKVCache::new(4, 2).unwrap();
        for p in 20..=22 {
            c.append_past(entry(p)).unwrap();
        }
        c.set_future(entry(23)).unwrap();
        c.consume_future(23).unwrap();
        assert_eq!(c.future_len(), 0);
        assert_eq!(c.past_positions().collect::<Vec<_>>(), vec![20, 21, 22, 23]);
        // the moved entry is the same tensors, not a re-projection
        let g = c.gather(0);
        assert_eq!(g.positions, vec![20, 21, 22, 23]);
        assert_eq!(g.keys.unwrap().get2(3, 0), 23.0);
    }

    #[test]
    fn consume_future_requires_front_position() {
        let mut c = DualRegionKVCache::new(4, 2).unwrap();
        c.set_future(entry(23)).unwrap();
        assert!(matches!(
            c.consume_future(24),
            Err(CacheError::NoSuchFuture { position: 24, front: Some(23) })
        ));
        let mut empty = DualRegionKVCache::new(4, 2).unwrap();
        assert!(matches!(
            empty.consume_future(1),
            Err(CacheError::NoSuchFuture { front: None, .. })
        ));
    }

    #[test]
    fn consume_with_full_past_evicts_oldest() {
        let mut c = DualRegionKVCache::new(3, 2).unwrap();
        for p in 0..3 {
            c.append_past(entry(p)).unwrap();
        }
        c.set_future(entry(10)).unwrap();
        c.consume_future(10).unwrap();
        assert_eq!(c.past_positions().collect::<Vec<_>>(), vec![1, 2, 10]);
        assert!(c.invariants_hold());
    }

    #[test]
    fn gather_orders_past_then_future() {
        let mut c = DualRegionKVCache::new(4, 2).unwrap();
        assert!(c.gather(0).keys.is_none());
        assert_eq!(c.gather(0).positions, Vec::<usize>::new());

        c.append_past(entry(1)).unwrap();
        c.append_past(entry(2)).unwrap();
        c.set_future(entry(20)).unwrap();
        let g = c.gather(1);
        assert_eq!(g.positions, vec![1, 2, 20]);
        assert_eq!(g.n_past, 2);
        let keys = g.keys.unwrap();
        assert_eq!(keys.shape(), &[3, 4]);
        // layer-1 keys carry position + 0.5
        assert_eq!(keys.get2(0, 0), 1.5);
        assert_eq!(keys.get2(2, 0), 20.5);
    }

    #[test]
    fn layer_count_is_enforced() {
        let mut c = DualRegionKVCache::new(4, 2).unwrap();
        c.append_past(entry(0)).unwrap();
        let bad = CacheEntry::new(1, vec![Tensor::zeros(&[1, 4])], vec![Tensor::zeros(&[1, 4])]);
        assert!(matches!(
            c.append_past(bad),
            Err(CacheError::LayerCount { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn dump_lists_regions_in_order() {
        let mut c = DualRegionKVCache::new(4, 2).unwrap();
        c.append_past(entry(5)).unwrap();
        c.set_future(entry(23)).unwrap();
        assert_eq!(c.dump(), "past 5\nfuture 23\n");
    }

    #[test]
    fn random_operation_sequences_preserve_invariants() {
        // smaller sibling of the acceptance-scale property run
        let mut rng = crate::rng::substream(3, "cache-ops");
        for _ in 0..200 {
            let mut c = DualRegionKVCache::new(
                rng.random_range(1..=6),
                rng.random_range(1..=4),
            )
            .unwrap();
            let mut next = 0usize;
            for _ in 0..40 {
                match rng.random_range(0..3) {
                    0 => {
                        let past_before: Vec<usize> = c.past_positions().collect();
                        if c.set_future(entry(next + rng.random_range(1..5))).is_ok() {
                            assert_eq!(c.past_positions().collect::<Vec<_>>(), past_before);
                        }
                    }
                    1 => {
                        let fut_before: Vec<usize> = c.future_positions().collect();
                        if c.append_past(entry(next)).is_ok() {
                            next += 1;
                            assert_eq!(c.future_positions().collect::<Vec<_>>(), fut_before);
                        } else {
                            next = c
                                .future_positions()
                                .next()
                                .map_or(next + 1, |f| f.max(next));
                        }
                    }
                    _ => {
                        let front = c.future_positions().next();
                        if let Some(front) = front {
                            c.consume_future(front).unwrap();
                            next = front + 1;
                        }
                    }
                }
                assert!(c.invariants_hold(), "after op: {}", c.dump());
            }
        }
    }
}
