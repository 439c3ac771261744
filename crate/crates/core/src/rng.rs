//! Seeded random streams.
//!
//! One root seed fans out into independent named substreams so that
//! toggling one subsystem (for example counterfactual augmentation) does not
//! shift the random draws seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named substreams derived from a root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Env,
    Agent,
    Sta,
    Sampler,
    Replay,
    Init,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Env => 1,
            Stream::Agent => 2,
            Stream::Sta => 3,
            Stream::Sampler => 4,
            Stream::Replay => 5,
            Stream::Init => 6,
        }
    }
}

pub type StreamRng = ChaCha8Rng;

/// Builds the generator for `stream` under `root_seed`.
pub fn stream(root_seed: u64, stream: Stream) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
    rng.set_stream(stream.id());
    rng
}

/// Plain seeded generator for ad-hoc use.
pub fn seeded(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}
