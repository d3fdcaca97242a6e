use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DataError;

/// Assignment of every sample to one of `k` folds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignment: Vec<usize>,
}

impl FoldPlan {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] != fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignment {
            sizes[f] += 1;
        }
        sizes
    }

    /// Per-fold count of samples with label 1.
    pub fn positives_per_fold(&self, labels: &[u8]) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        for (&f, &y) in self.assignment.iter().zip(labels) {
            if y == 1 {
                counts[f] += 1;
            }
        }
        counts
    }
}

/// Shuffles each class under `seed` and deals positives then negatives
/// round-robin, so per-fold class counts and fold sizes differ by at most one.
pub fn stratified_kfold(labels: &[u8], k: usize, seed: u64) -> Result<FoldPlan, DataError> {
    if k < 2 {
        return Err(DataError::InvalidFolds(format!("k must be >= 2, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != 1).collect();
    for (class, members) in [(1u8, &pos), (0u8, &neg)] {
        if members.len() < k {
            return Err(DataError::ClassTooSmall {
                class,
                count: members.len(),
                k,
            });
        }
    }
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut assignment = vec![0; labels.len()];
    for (slot, &i) in pos.iter().chain(neg.iter()).enumerate() {
        assignment[i] = slot % k;
    }
    Ok(FoldPlan { k, seed, assignment })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tiny_symmetric_case() {
        let plan = stratified_kfold(&[1, 1, 0, 0], 2, 3).unwrap();
        assert_eq!(plan.positives_per_fold(&[1, 1, 0, 0]), vec![1, 1]);
    }

    #[test]
    fn cohort_sized_split() {
        let mut labels = vec![1u8; 199];
        labels.extend(vec![0u8; 522]);
        let plan = stratified_kfold(&labels, 10, 11).unwrap();
        for c in plan.positives_per_fold(&labels) {
            assert!(c == 19 || c == 20, "{c}");
        }
        for s in plan.fold_sizes() {
            assert!(s == 72 || s == 73, "{s}");
        }
    }

    #[test]
    fn rejects_small_class() {
        assert!(matches!(
            stratified_kfold(&[1, 0, 0, 0], 2, 0),
            Err(DataError::ClassTooSmall { class: 1, .. })
        ));
        assert!(stratified_kfold(&[1, 0], 1, 0).is_err());
    }

    proptest! {
        #[test]
        fn partition_and_balance(labels in proptest::collection::vec(0u8..2, 20..120), k in 2usize..6, seed in any::<u64>()) {
            let pos = labels.iter().filter(|&&y| y == 1).count();
            prop_assume!(pos >= k && labels.len() - pos >= k);
            let plan = stratified_kfold(&labels, k, seed).unwrap();
            let mut seen = vec![false; labels.len()];
            for f in 0..k {
                for i in plan.test_indices(f) {
                    prop_assert!(!seen[i]);
                    seen[i] = true;
                }
            }
            prop_assert!(seen.iter().all(|&s| s));
            let per = plan.positives_per_fold(&labels);
            prop_assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1);
            prop_assert_eq!(plan, stratified_kfold(&labels, k, seed).unwrap());
        }
    }
}
