//! Two-lane dispatch: every (function, key) hashes to a primary and a
//! secondary worker.

use xxhash_rust::xxh3::xxh3_64_with_seed;

const LANE_SEED: u64 = 0x5eed_1a7e;

#[derive(Clone, Copy, Debug)]
pub struct DispatchTable {
    workers: usize,
    threshold: f64,
    floor: usize,
}

/// What dispatch needs to know about the two candidate lanes.
#[derive(Clone, Copy, Debug, Default)]
pub struct LaneState {
    pub pending: bool,
    pub len: usize,
}

impl DispatchTable {
    pub fn new(workers: usize, threshold: f64, floor: usize) -> Self {
        Self {
            workers: workers.max(1),
            threshold,
            floor,
        }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// `(primary, secondary)`; distinct whenever there are two or more
    /// workers.
    pub fn lanes(&self, key: &[u8], function: &str) -> (usize, usize) {
        let mut buf = Vec::with_capacity(key.len() + function.len() + 1);
        buf.extend_from_slice(key);
        buf.push(0xff);
        buf.extend_from_slice(function.as_bytes());
        let h = xxh3_64_with_seed(&buf, LANE_SEED);
        let w = self.workers as u64;
        let p = h % w;
        if w == 1 {
            return (0, 0);
        }
        let s = (p + 1 + (h >> 32) % (w - 1)) % w;
        (p as usize, s as usize)
    }

    /// Picks a lane: whichever already holds the key pending, else the
    /// primary unless the secondary is significantly shorter.
    pub fn choose(&self, (p, s): (usize, usize), primary: LaneState, secondary: LaneState) -> usize {
        if primary.pending {
            p
        } else if secondary.pending
            || (primary.len >= self.floor && (secondary.len as f64) < self.threshold * primary.len as f64)
        {
            s
        } else {
            p
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lane(pending: bool, len: usize) -> LaneState {
        LaneState { pending, len }
    }

    #[test]
    fn fresh_system_goes_to_primary() {
        let t = DispatchTable::new(8, 0.5, 16);
        let lanes = t.lanes(b"Walmart", "U1");
        assert_eq!(t.choose(lanes, lane(false, 0), lane(false, 0)), lanes.0);
    }

    #[test]
    fn pending_on_secondary_wins_even_with_empty_primary() {
        let t = DispatchTable::new(8, 0.5, 16);
        assert_eq!(t.choose((2, 5), lane(false, 0), lane(true, 40)), 5);
    }

    #[test]
    fn significantly_shorter_secondary_is_chosen() {
        let t = DispatchTable::new(8, 0.5, 16);
        assert_eq!(t.choose((2, 5), lane(false, 100), lane(false, 10)), 5);
        assert_eq!(t.choose((2, 5), lane(false, 100), lane(false, 50)), 2);
        // Below the floor the primary is kept.
        assert_eq!(t.choose((2, 5), lane(false, 15), lane(false, 0)), 2);
    }

    #[test]
    fn single_worker_has_one_lane() {
        let t = DispatchTable::new(1, 0.5, 16);
        assert_eq!(t.lanes(b"k", "U1"), (0, 0));
    }

    proptest! {
        #[test]
        fn lanes_are_distinct_and_stable(key in prop::collection::vec(any::<u8>(), 0..16), w in 2usize..16) {
            let t = DispatchTable::new(w, 0.5, 16);
            let (p, s) = t.lanes(&key, "U1");
            prop_assert!(p < w && s < w);
            prop_assert_ne!(p, s);
            prop_assert_eq!(t.lanes(&key, "U1"), (p, s));
        }
    }
}
