//! Seeded random streams.
//!
//! Every run is driven by ChaCha8 (`rand_chacha`). A run seed is split into
//! independent substreams by setting the ChaCha stream id, so training data,
//! exploration noise, evaluation scenarios and per-worker draws never share
//! state and never depend on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used everywhere in the crate.
pub type SimRng = ChaCha8Rng;

/// Recorded in run manifests so results can be tied to the generator.
pub const PRNG_ALGORITHM: &str = "ChaCha8 (rand_chacha 0.9), seed_from_u64 + set_stream substreams";

/// Well-known substream ids.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const TRAIN_SCENARIOS: u64 = 2;
    pub const ACTIONS: u64 = 3;
    pub const MINIBATCH: u64 = 4;
    /// Evaluation scenarios are drawn from a stream disjoint from all training streams.
    pub const EVAL_SCENARIOS: u64 = 5;
    pub const BASELINE: u64 = 6;
    /// Worker streams start here: `WORKER_BASE + worker_index`.
    pub const WORKER_BASE: u64 = 1 << 32;
}

/// Substream `stream` of run `seed`.
pub fn substream(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Number of worker threads allowed, from `AIGC_ALLOC_THREADS` (default: available parallelism).
pub fn thread_cap() -> usize {
    std::env::var("AIGC_ALLOC_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}
