//! Balanced domain/label batch sampling.
//!
//! Every batch carries exactly `batch_size / 4` samples from each of the
//! four (domain, label) strata, so the source count is always
//! `batch_size / 2 > 0` and the total-loss denominator never vanishes.
//! Sampling is without replacement within an epoch; each stratum reshuffles
//! per epoch from a seed derived from `(seed, epoch)`, and the epoch ends
//! when the smallest stratum runs out.

use super::{derive_seed, Manifest, Split};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STRATUM_NAMES: [&str; 4] = [
    "source/look-alike",
    "source/mitosis",
    "target/look-alike",
    "target/mitosis",
];

#[derive(Debug)]
pub struct BalancedSampler {
    strata: [Vec<usize>; 4],
    batch_size: usize,
    seed: u64,
}

impl BalancedSampler {
    pub fn new(manifest: &Manifest, split: Split, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size % 4 != 0 {
            return Err(Error::Data(format!(
                "batch size must be a positive multiple of 4 (2 domains x 2 labels), got {batch_size}"
            )));
        }
        let mut strata: [Vec<usize>; 4] = Default::default();
        for (i, rec) in manifest.records.iter().enumerate() {
            if rec.split == split {
                strata[(rec.y_d * 2 + rec.y_c) as usize].push(i);
            }
        }
        for (s, name) in strata.iter().zip(STRATUM_NAMES) {
            if s.is_empty() {
                return Err(Error::Data(format!("empty stratum: {name}")));
            }
        }
        Ok(BalancedSampler {
            strata,
            batch_size,
            seed,
        })
    }

    /// Number of batches per epoch: bounded by the smallest stratum.
    pub fn batches_per_epoch(&self) -> usize {
        let quota = self.batch_size / 4;
        self.strata.iter().map(|s| s.len() / quota).min().unwrap_or(0)
    }

    /// Record indices for every batch of the given epoch. Identical
    /// `(seed, epoch)` pairs produce identical sequences.
    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        let quota = self.batch_size / 4;
        let mut shuffled: Vec<Vec<usize>> = self.strata.iter().cloned().collect();
        for (k, stratum) in shuffled.iter_mut().enumerate() {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(self.seed, epoch * 4 + k as u64));
            stratum.shuffle(&mut rng);
        }
        let n_batches = self.batches_per_epoch();
        let mut batches = Vec::with_capacity(n_batches);
        for b in 0..n_batches {
            let mut batch = Vec::with_capacity(self.batch_size);
            for stratum in &shuffled {
                batch.extend_from_slice(&stratum[b * quota..(b + 1) * quota]);
            }
            batches.push(batch);
        }
        batches
    }
}
