//! Counter-addressed random streams.
//!
//! Every random draw in a run is addressed by `(seed, step, purpose)` so that a
//! run can be resumed from any step, and reordering or skipping work never
//! shifts the numbers another consumer sees.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Gates = 0,
    Batch = 1,
    Dropout = 2,
    Init = 3,
    Sampling = 4,
}

const PURPOSES: u64 = 8;

/// Generator for one `(seed, step, purpose)` address.
pub fn stream(seed: u64, step: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_mul(PURPOSES).wrapping_add(purpose as u64));
    rng
}

/// Uniform draw in `(0, 1]` at word offset `index` of the stream.
///
/// The open lower end makes `u <= 0` impossible, so a zero probability never
/// fires; the closed upper end makes `u <= 1` certain.
pub fn uniform_at(seed: u64, step: u64, purpose: Purpose, index: u64) -> f64 {
    let mut rng = stream(seed, step, purpose);
    rng.set_word_pos(u128::from(index) * 2);
    unit_open_closed(rng.next_u64())
}

#[inline]
pub(crate) fn unit_open_closed(bits: u64) -> f64 {
    ((bits >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}
