use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Mode;

/// Mixes the epoch index into the run seed so each epoch gets its own order.
pub fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    seed ^ epoch.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Index lists for one pass over `len` samples.
///
/// `shuffle = Some((seed, epoch))` permutes with ChaCha8 seeded by
/// [`epoch_seed`]. In train mode a trailing short batch is dropped (batch norm
/// needs at least two rows); in eval mode it is kept.
pub fn batches(len: usize, batch_size: usize, shuffle: Option<(u64, u64)>, mode: Mode) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..len).collect();
    if let Some((seed, epoch)) = shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch)));
    }
    order
        .chunks(batch_size)
        .filter(|c| mode == Mode::Eval || c.len() == batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}
