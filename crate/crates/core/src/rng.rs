// SPDX-License-Identifier: Apache-2.0

//! Reproducible random streams.
//!
//! All randomness is drawn from ChaCha8 keyed by a 64-bit seed. Independent
//! consumers get disjoint ChaCha stream ids, so e.g. evaluation episode `i`
//! always sees the same numbers regardless of how many workers run or which
//! order they finish in.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream namespaces. The stream id is `(purpose << 40) | index`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Synthetic = 1,
    TrainEpisodes = 2,
    EvalEpisodes = 3,
    ValEpisodes = 4,
    AdapterInit = 5,
    PromptInit = 6,
    TextStub = 7,
    Split = 8,
    Audit = 9,
}

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 40) | (index & ((1 << 40) - 1)));
    rng
}
