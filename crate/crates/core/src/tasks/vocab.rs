use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved token ids shared by both task families.
pub mod tokens {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    /// Instruction token opening a retrieval prompt.
    pub const RETRIEVE: usize = 2;
    /// Instruction token opening a two-hop reasoning prompt.
    pub const REASON: usize = 3;
    pub const DOC: usize = 4;
    pub const QUERY: usize = 5;
    /// Answer marker ("The answer is:").
    pub const ANS: usize = 6;
    pub const EOS: usize = 7;
    pub const HOP1: usize = 8;
    pub const HOP2: usize = 9;
}

pub const NUM_SPECIAL: usize = 10;

/// Partition of an integer vocabulary into special, key, value and entity
/// tokens. Keys and values are disjoint halves of the content range; two-hop
/// entities use the whole content range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskVocab {
    pub size: usize,
}

impl TaskVocab {
    pub fn new(size: usize) -> Result<Self> {
        if size < NUM_SPECIAL + 4 {
            return Err(Error::Capacity(format!(
                "vocabulary of {size} leaves no room for content tokens"
            )));
        }
        Ok(Self { size })
    }

    fn split(&self) -> usize {
        NUM_SPECIAL + (self.size - NUM_SPECIAL) / 2
    }

    pub fn keys(&self) -> Range<usize> {
        NUM_SPECIAL..self.split()
    }

    pub fn values(&self) -> Range<usize> {
        self.split()..self.size
    }

    pub fn entities(&self) -> Range<usize> {
        NUM_SPECIAL..self.size
    }
}

/// Mixes a list of integers into one seed (splitmix64 finalizer chain).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = splitmix(h);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
