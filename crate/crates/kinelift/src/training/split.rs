//! Train/validation/test splitting by video sequence: frames of one
//! sequence never straddle a split boundary.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainingError;

/// Disjoint sequence-id sets covering the whole dataset, sized roughly
/// 80/10/10 by sequence count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetSplit {
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), TrainingError> {
        Ok(std::fs::write(path, serde_json::to_string_pretty(self)?)?)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, TrainingError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Shuffles the sequence ids with the given seed and partitions them
/// 80/10/10; validation and test always get at least one sequence each.
pub fn split_dataset(sequence_ids: &[usize], seed: u64) -> Result<DatasetSplit, TrainingError> {
    let mut ids: Vec<usize> = sequence_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let n = ids.len();
    if n < 10 {
        return Err(TrainingError::TooFewSequences(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);

    let n_val = ((n as f64) * 0.1).round().max(1.0) as usize;
    let n_test = n_val;
    let n_train = n - n_val - n_test;

    let train = ids[..n_train].to_vec();
    let val = ids[n_train..n_train + n_val].to_vec();
    let test = ids[n_train + n_val..].to_vec();
    Ok(DatasetSplit { train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_sequences_split_8_1_1() {
        let ids: Vec<usize> = (0..10).collect();
        let split = split_dataset(&ids, 1).unwrap();
        assert_eq!(split.train.len(), 8);
        assert_eq!(split.val.len(), 1);
        assert_eq!(split.test.len(), 1);
    }

    #[test]
    fn splits_partition_the_input() {
        let ids: Vec<usize> = (0..37).collect();
        let split = split_dataset(&ids, 5).unwrap();
        let mut all: Vec<usize> = split
            .train
            .iter()
            .chain(&split.val)
            .chain(&split.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, ids);
    }

    #[test]
    fn different_seeds_permute_same_sizes() {
        let ids: Vec<usize> = (0..100).collect();
        let a = split_dataset(&ids, 1).unwrap();
        let b = split_dataset(&ids, 2).unwrap();
        assert_eq!(a.train.len(), 80);
        assert_eq!(a.val.len(), 10);
        assert_eq!(a.test.len(), 10);
        assert_eq!(a.train.len(), b.train.len());
        assert_ne!(a.train, b.train);
        // Same seed reproduces the split exactly.
        assert_eq!(a, split_dataset(&ids, 1).unwrap());
    }

    #[test]
    fn too_few_sequences_rejected() {
        let ids: Vec<usize> = (0..9).collect();
        assert!(matches!(
            split_dataset(&ids, 0),
            Err(TrainingError::TooFewSequences(9))
        ));
    }
}
