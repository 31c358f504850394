use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PatientRecord;
use crate::error::{Error, Result};

/// Patient-disjoint train/validation/test partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSplit {
    pub train: Vec<PatientRecord>,
    pub val: Vec<PatientRecord>,
    pub test: Vec<PatientRecord>,
}

/// Sizes for a 60/20/20 split: validation and test get the nearest integer to
/// 20% each and train absorbs the remainder.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let fifth = (n as f64 / 5.0).round() as usize;
    (n - 2 * fifth, fifth, fifth)
}

/// Seeded shuffle of patients followed by a 60/20/20 cut.
pub fn split_cohort(cohort: Vec<PatientRecord>, seed: u64) -> Result<CohortSplit> {
    if cohort.len() < 5 {
        return Err(Error::TooFewPatients(cohort.len()));
    }
    let (n_train, n_val, _) = split_sizes(cohort.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = cohort;
    shuffled.shuffle(&mut rng);

    let mut rest = shuffled.split_off(n_train);
    let test = rest.split_off(n_val);
    Ok(CohortSplit { train: shuffled, val: rest, test })
}
