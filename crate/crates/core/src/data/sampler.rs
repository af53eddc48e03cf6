use rand::seq::{index, SliceRandom};
use rand::Rng;

use super::Task;
use crate::error::{Error, Result};

/// Draws `batch_size / 3` distinct positions from each task's pool and
/// shuffles them together. `pools` is indexed by [`Task::index`].
pub fn sample_balanced_batch<R: Rng + ?Sized>(
    pools: &[Vec<usize>; 3],
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if batch_size == 0 || !batch_size.is_multiple_of(3) {
        return Err(Error::invalid(format!(
            "batch size {batch_size} must be a positive multiple of 3"
        )));
    }
    let per_task = batch_size / 3;
    let mut batch = Vec::with_capacity(batch_size);
    for task in Task::ALL {
        let pool = &pools[task.index()];
        if pool.len() < per_task {
            return Err(Error::invalid(format!(
                "task {} has {} training instances, batch needs {per_task}",
                task.name(),
                pool.len()
            )));
        }
        batch.extend(index::sample(rng, pool.len(), per_task).iter().map(|i| pool[i]));
    }
    batch.shuffle(rng);
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pools() -> [Vec<usize>; 3] {
        [(0..10).collect(), (10..20).collect(), (20..30).collect()]
    }

    #[test]
    fn batch_is_split_evenly_between_tasks() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_balanced_batch(&pools(), 12, &mut rng).unwrap();
        assert_eq!(b.len(), 12);
        for lo in [0, 10, 20] {
            assert_eq!(b.iter().filter(|&&i| (lo..lo + 10).contains(&i)).count(), 4);
        }
        let mut dedup = b.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), 12);
    }

    #[test]
    fn exhaustive_when_pools_are_tiny() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = [vec![7], vec![3], vec![42]];
        let mut b = sample_balanced_batch(&p, 3, &mut rng).unwrap();
        b.sort();
        assert_eq!(b, vec![3, 7, 42]);
    }

    #[test]
    fn rejects_bad_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_balanced_batch(&pools(), 10, &mut rng).is_err());
        assert!(sample_balanced_batch(&pools(), 33, &mut rng).is_err());
    }

    #[test]
    fn selection_frequencies_are_uniform() {
        // Each of the 10 AU positions is picked with probability 4/10 per draw.
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let draws = 10_000;
        let mut counts = [0usize; 30];
        for _ in 0..draws {
            for i in sample_balanced_batch(&pools(), 12, &mut rng).unwrap() {
                counts[i] += 1;
            }
        }
        let p: f64 = 0.4;
        let expected = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            assert!((c as f64 - expected).abs() < 3.0 * sd, "position {i}: {c}");
        }
    }

    #[test]
    fn deterministic_given_rng_state() {
        let a = sample_balanced_batch(&pools(), 9, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_balanced_batch(&pools(), 9, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }
}
