use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Sample indices for one epoch, shuffled by a permutation that depends only
/// on `(seed, epoch)`. A batch size larger than `n` yields a single batch.
pub fn shuffled_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_add(1));
    order.shuffle(&mut rng);
    order.chunks(batch_size.min(n.max(1))).map(<[usize]>::to_vec).collect()
}

/// Epoch-by-epoch stream of shuffled index batches.
#[derive(Clone, Debug)]
pub struct Batcher {
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
}

impl Batcher {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            n,
            batch_size: batch_size.max(1),
            seed,
            epoch: 0,
        }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Batches for the current epoch; advances to the next one.
    pub fn next_epoch(&mut self) -> Vec<Vec<usize>> {
        let out = shuffled_batches(self.n, self.batch_size, self.seed, self.epoch);
        self.epoch += 1;
        out
    }
}
