//! Seeded random streams.
//!
//! All randomness comes from ChaCha8 generators. A run seed is split into
//! independent substreams by component, using ChaCha's stream counter, so
//! adding draws in one component never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data,
    TeacherInit,
    StudentInit,
    AuxInit,
    Shuffle,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Data => 1,
            Stream::TeacherInit => 2,
            Stream::StudentInit => 3,
            Stream::AuxInit => 4,
            Stream::Shuffle => 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn stream(&self, stream: Stream) -> ChaCha8Rng {
        self.substream(stream, 0)
    }

    /// Substream further keyed by `index` (e.g. an epoch number).
    pub fn substream(&self, stream: Stream, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream.id() << 32 | index);
        rng
    }
}
