#![allow(dead_code)]

use bayesmtr::ingest::{default_onset, filter_plausible, split_cohort, Normalizer, TrainingExample};
use bayesmtr::synth::{generate, GeneratorConfig};
use bayesmtr::train::split_examples;

pub struct Sets {
    pub train: Vec<TrainingExample>,
    pub val: Vec<TrainingExample>,
    pub test: Vec<TrainingExample>,
}

pub fn synthetic_sets(n_patients: usize, seed: u64) -> Sets {
    let cfg = GeneratorConfig { n_patients, seed, ..Default::default() };
    let (cohort, _) = generate(&cfg).unwrap();
    let (kept, _) = filter_plausible(cohort, default_onset());
    let split = split_cohort(kept, seed).unwrap();
    let (train, val, test) = split_examples(&split, default_onset(), &Normalizer::default()).unwrap();
    Sets { train, val, test }
}
