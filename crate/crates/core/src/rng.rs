//! Seeded random streams. Every consumer derives its own ChaCha stream from
//! the root seed so results never depend on call interleaving.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream identifiers for the distinct consumers of randomness.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const PRETRAIN: u64 = 4;
    pub const SEARCH: u64 = 5;
    pub const FINETUNE: u64 = 6;
    pub const EVAL_SUBSET: u64 = 7;
    pub const CERTIFY: u64 = 8;
}

/// Independent stream `stream` of the generator seeded by `root`.
pub fn stream(root: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(stream);
    rng
}

/// Sub-stream keyed by `(stream, index)`, e.g. one per evaluation sample.
pub fn substream(root: u64, stream: u64, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(root ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream);
    rng
}
