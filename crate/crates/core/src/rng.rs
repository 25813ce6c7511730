use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random streams derived from one scenario seed, so that e.g.
/// changing roadmap size never perturbs the target tracks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Tracks = 1,
    Roadmap = 2,
    Planner = 3,
    Network = 4,
    Training = 5,
    Start = 6,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
