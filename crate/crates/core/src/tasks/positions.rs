use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative placement of the two hop documents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HopMode {
    /// Hops in adjacent slots.
    Connected,
    /// Hops separated by a fixed stride of distractors.
    Disconnected,
    /// Disconnected pairs with the hop order inverted.
    Reversed,
}

impl HopMode {
    pub const ALL: [HopMode; 3] = [HopMode::Connected, HopMode::Disconnected, HopMode::Reversed];

    pub fn name(self) -> &'static str {
        match self {
            HopMode::Connected => "connected",
            HopMode::Disconnected => "disconnected",
            HopMode::Reversed => "reversed",
        }
    }
}

const TEMPLATE_N: usize = 20;
const CONNECTED_STARTS: [usize; 4] = [0, 5, 12, 17];
const DISCONNECTED: [(usize, usize); 4] = [(0, 8), (5, 13), (6, 14), (8, 16)];

fn scaled(slot: usize, n: usize) -> usize {
    ((slot * n) as f64 / TEMPLATE_N as f64).round() as usize
}

/// Evaluation grid of `(pre, post)` slots for a mode, **zero-based**. For
/// `n = 20` it is exactly the four-pair template
/// `[0,1] [5,6] [12,13] [17,18]` / `[0,8] [5,13] [6,14] [8,16]` / swapped;
/// other window sizes scale it proportionally.
pub fn position_configs(mode: HopMode, n: usize) -> Result<Vec<(usize, usize)>> {
    if n < 10 {
        return Err(Error::Config(format!("position grid needs n >= 10, got {n}")));
    }
    let stride = scaled(8, n).max(2);
    let disconnected = || {
        DISCONNECTED
            .iter()
            .map(|&(a, _)| {
                let s = scaled(a, n).min(n - 1 - stride);
                (s, s + stride)
            })
            .collect::<Vec<_>>()
    };
    Ok(match mode {
        HopMode::Connected => CONNECTED_STARTS
            .iter()
            .map(|&a| {
                let s = scaled(a, n).min(n - 2);
                (s, s + 1)
            })
            .collect(),
        HopMode::Disconnected => disconnected(),
        HopMode::Reversed => disconnected().into_iter().map(|(a, b)| (b, a)).collect(),
    })
}

/// `k` distinct trivial retrieval positions drawn uniformly from `{2..n}`.
pub fn sample_trivial_positions(k: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n < 2 || k > n - 1 {
        return Err(Error::Capacity(format!("{k} trivial positions from {{2..{n}}}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, n - 1, k)
        .iter()
        .map(|i| i + 2)
        .collect())
}

/// `k` distinct ordered pairs `(pre, post)` over `{1..n}` with `pre ≠ post`.
pub fn sample_trivial_pairs(k: usize, n: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let total = n * n.saturating_sub(1);
    if k > total {
        return Err(Error::Capacity(format!("{k} ordered pairs from {total}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, total, k)
        .iter()
        .map(|idx| {
            let pre = idx / (n - 1);
            let mut post = idx % (n - 1);
            if post >= pre {
                post += 1;
            }
            (pre + 1, post + 1)
        })
        .collect())
}
