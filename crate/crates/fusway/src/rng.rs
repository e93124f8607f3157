//! Deterministic RNG stream derivation.
//!
//! Every randomized step draws from a ChaCha stream derived from the master
//! seed plus a `(purpose, index)` pair. Parallel and serial execution
//! therefore produce identical bytes: each scene, fold, or model owns its
//! stream regardless of scheduling order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purposes. Kept disjoint so an index collision across purposes can
/// never alias two streams.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    SceneGen(u64),
    AudioSynth(u64),
    Detector(u64),
    ModelInit(u64),
    EpochShuffle(u64),
    FoldSplit(u64),
}

impl Stream {
    fn id(self) -> u64 {
        let (tag, idx) = match self {
            Stream::SceneGen(i) => (1, i),
            Stream::AudioSynth(i) => (2, i),
            Stream::Detector(i) => (3, i),
            Stream::ModelInit(i) => (4, i),
            Stream::EpochShuffle(i) => (5, i),
            Stream::FoldSplit(i) => (6, i),
        };
        (tag << 56) | (idx & 0x00ff_ffff_ffff_ffff)
    }
}

/// RNG for one named stream of a master seed.
pub fn stream_rng(master_seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream.id());
    rng
}
