//! Stratified minibatch construction.
//!
//! The pairwise ranking term needs both classes in a batch, so batches are
//! built by dealing one positive and one negative into every batch first
//! (as far as the class populations allow) and then filling remaining slots
//! from a seeded shuffle of the rest. Every sample appears exactly once per
//! epoch and the last partial batch is kept.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Batch index lists for one epoch, deterministic in `(seed, epoch)`.
pub fn stratified_batches(
    labels: &[i8],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::InvalidConfig(format!(
            "batch_size must be >= 2, got {batch_size}"
        )));
    }
    let mut pos: Vec<usize> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    for (i, &y) in labels.iter().enumerate() {
        match y {
            1 => pos.push(i),
            -1 => neg.push(i),
            other => {
                return Err(Error::InvalidConfig(format!(
                    "label {other} is not in {{-1,+1}}"
                )))
            }
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::SingleClass("stratified batching"));
    }
    let total = labels.len();
    let num_batches = total.div_ceil(batch_size);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_add(1));
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);

    // batch capacities; the last batch may be partial
    let mut batches: Vec<Vec<usize>> = (0..num_batches)
        .map(|b| {
            let cap = if b + 1 == num_batches {
                total - batch_size * (num_batches - 1)
            } else {
                batch_size
            };
            Vec::with_capacity(cap)
        })
        .collect();
    let cap = |b: usize| {
        if b + 1 == num_batches {
            total - batch_size * (num_batches - 1)
        } else {
            batch_size
        }
    };

    // seed each batch with one positive, then one negative, while they last
    let mut pi = 0;
    let mut ni = 0;
    for (b, batch) in batches.iter_mut().enumerate() {
        if pi < pos.len() && batch.len() < cap(b) {
            batch.push(pos[pi]);
            pi += 1;
        }
    }
    for (b, batch) in batches.iter_mut().enumerate() {
        if ni < neg.len() && batch.len() < cap(b) {
            batch.push(neg[ni]);
            ni += 1;
        }
    }
    // remaining samples in one shuffled stream, dealt batch by batch
    let mut rest: Vec<usize> = pos[pi..].iter().chain(&neg[ni..]).copied().collect();
    rest.shuffle(&mut rng);
    let mut r = 0;
    for (b, batch) in batches.iter_mut().enumerate() {
        while batch.len() < cap(b) {
            batch.push(rest[r]);
            r += 1;
        }
    }
    debug_assert_eq!(r, rest.len());
    // hide the pos-first layout inside each batch
    for batch in &mut batches {
        batch.shuffle(&mut rng);
    }
    batches.shuffle(&mut rng);
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(num_pos: usize, num_neg: usize) -> Vec<i8> {
        let mut v = vec![1i8; num_pos];
        v.extend(vec![-1i8; num_neg]);
        v
    }

    #[test]
    fn imbalanced_epoch_has_positive_in_every_batch() {
        // 1:5 at batch 128, as in the imbalanced protocol
        let l = labels(400, 2000);
        let batches = stratified_batches(&l, 128, 9, 0).unwrap();
        assert_eq!(batches.len(), 2400usize.div_ceil(128));
        let mut seen = vec![false; l.len()];
        for batch in &batches {
            assert!(batch.iter().any(|&i| l[i] == 1), "batch without positive");
            assert!(batch.iter().any(|&i| l[i] == -1), "batch without negative");
            for &i in batch {
                assert!(!seen[i], "sample {i} repeated");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s), "epoch must cover every sample");
    }

    #[test]
    fn batch_size_two_on_balanced_data_pairs_classes() {
        let l = labels(6, 6);
        let batches = stratified_batches(&l, 2, 1, 0).unwrap();
        assert_eq!(batches.len(), 6);
        for batch in &batches {
            assert_eq!(batch.len(), 2);
            let p = batch.iter().filter(|&&i| l[i] == 1).count();
            assert_eq!(p, 1, "each pair should hold one of each class");
        }
    }

    #[test]
    fn equal_seeds_identical_epochs_and_streams_differ() {
        let l = labels(30, 70);
        let a = stratified_batches(&l, 16, 5, 3).unwrap();
        let b = stratified_batches(&l, 16, 5, 3).unwrap();
        assert_eq!(a, b);
        let c = stratified_batches(&l, 16, 5, 4).unwrap();
        assert_ne!(a, c, "different epochs should reshuffle");
        let d = stratified_batches(&l, 16, 6, 3).unwrap();
        assert_ne!(a, d, "different seeds should reshuffle");
    }

    #[test]
    fn partial_last_batch_kept() {
        let l = labels(5, 8);
        let batches = stratified_batches(&l, 4, 2, 0).unwrap();
        assert_eq!(batches.len(), 4);
        let total: usize = batches.iter().map(|b| b.len()).sum();
        assert_eq!(total, 13);
        assert_eq!(batches.iter().map(|b| b.len()).max(), Some(4));
    }

    #[test]
    fn fewer_positives_than_batches_spreads_them() {
        let l = labels(2, 30);
        let batches = stratified_batches(&l, 8, 2, 0).unwrap();
        let with_pos = batches
            .iter()
            .filter(|b| b.iter().any(|&i| l[i] == 1))
            .count();
        assert_eq!(with_pos, 2, "each positive lands in its own batch");
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(stratified_batches(&labels(4, 4), 1, 0, 0).is_err());
        assert!(stratified_batches(&labels(4, 0), 4, 0, 0).is_err());
    }
}
