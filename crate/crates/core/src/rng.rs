//! Splittable, counter-based random streams.
//!
//! Every estimator takes a [`StreamSeed`] rather than a live generator and
//! splits it into one child stream per fixed-size batch. Batch boundaries
//! never depend on the thread count, so results are reproducible for a
//! given `(seed, stream)` no matter how rayon schedules the work.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Generator used throughout the crate.
pub type SimRng = ChaCha8Rng;

/// Replicates simulated per child stream.
pub const BATCH: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamSeed {
    pub seed: u64,
    pub stream: u64,
}

impl StreamSeed {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream: 0 }
    }

    /// Derive the `i`-th child stream. Children of distinct parents or with
    /// distinct indices collide only with probability ~2^-64.
    pub fn child(&self, i: u64) -> Self {
        Self {
            seed: self.seed,
            stream: mix(self.stream ^ mix(i.wrapping_add(0x9e37_79b9_7f4a_7c15))),
        }
    }

    /// Named sub-stream, for giving independent randomness to the distinct
    /// stages of one experiment.
    pub fn named(&self, label: &str) -> Self {
        let h = label
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
        self.child(h)
    }

    pub fn rng(&self) -> SimRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Run `total` replicates in batches of [`BATCH`], one child stream per
/// batch. `f` receives the batch generator, the global index of the first
/// replicate and the batch length. Results come back in batch order.
pub fn par_batches<A, F>(source: StreamSeed, total: usize, f: F) -> Vec<A>
where
    A: Send,
    F: Fn(&mut SimRng, usize, usize) -> A + Sync,
{
    let batches = total.div_ceil(BATCH);
    (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = source.child(b as u64).rng();
            let start = b * BATCH;
            let len = BATCH.min(total - start);
            f(&mut rng, start, len)
        })
        .collect()
}

/// Pairwise-tree reduction. The shape of the tree depends only on
/// `items.len()`, so floating-point results are reproducible.
pub fn tree_reduce<A, F>(mut items: Vec<A>, merge: F) -> Option<A>
where
    F: Fn(A, A) -> A,
{
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(merge(a, b)),
                None => next.push(a),
            }
        }
        items = next;
    }
    items.pop()
}
