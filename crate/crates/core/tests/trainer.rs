mod common;

use bayesmtr::model::{Ablation, Model, ModelConfig};
use bayesmtr::rng::substream;
use bayesmtr::train::{
    backward, gradient_check, train_examples, AdamW, BatchDraw, LossSettings, TrainConfig,
};

fn check(model: &Model, lambda: f64, fixed_noise: bool) -> f64 {
    let sets = common::synthetic_sets(30, 3);
    let batch = &sets.train[..4];
    let settings = LossSettings::for_model(model, lambda);
    let mut rng = substream(11, "check");
    let noise: Vec<_> = batch.iter().map(|_| model.sample_noise(&mut rng)).collect();
    let report = gradient_check(
        model,
        batch,
        settings,
        fixed_noise.then_some(noise.as_slice()),
        1e-5,
        240,
        &mut rng,
    )
    .unwrap();
    assert!(report.checked >= 200);
    println!("max rel err {:.3e} at {}", report.max_relative_error, report.worst_tensor);
    report.max_relative_error
}

#[test]
fn full_model_gradients_at_initialization() {
    let model = Model::new(ModelConfig::default(), 5).unwrap();
    assert!(check(&model, 0.0, false) < 1e-4);
    assert!(check(&model, 1e-4, false) < 1e-4);
    // A large KL weight makes the KL term dominate a share of the gradient.
    assert!(check(&model, 0.5, false) < 1e-4);
}

#[test]
fn reparameterized_gradients_with_fixed_noise() {
    let mut model = Model::new(ModelConfig::default(), 5).unwrap();
    model.set_log_sigma(-1.0);
    assert!(check(&model, 1e-2, true) < 1e-4);
}

#[test]
fn ablation_gradients() {
    for ablation in [Ablation::NoBayesian, Ablation::NoDeepmtr] {
        let model = Model::new(ModelConfig { ablation, ..Default::default() }, 2).unwrap();
        assert!(check(&model, 0.0, false) < 1e-4, "{ablation:?}");
    }
    let model = Model::new(ModelConfig { aleatoric_head: false, ..Default::default() }, 2).unwrap();
    assert!(check(&model, 1e-4, false) < 1e-4);
}

#[test]
fn zero_loss_batch_has_zero_gradients() {
    let model = Model::new(ModelConfig { aleatoric_head: false, ..Default::default() }, 1).unwrap();
    let sets = common::synthetic_sets(20, 1);
    let mut batch = sets.train[..3].to_vec();
    for ex in &mut batch {
        let out = model.predict(ex, bayesmtr::model::Draw::Mean).unwrap();
        ex.target = bayesmtr::ingest::BiomarkerVector::from_array(out.means);
    }
    let settings = LossSettings::for_model(&model, 0.0);
    let (grads, loss) = backward(&model, &batch, settings, BatchDraw::Mean).unwrap();
    assert_eq!(loss.total, 0.0);
    assert!(grads.all_zero());
}

#[test]
fn zero_learning_rate_keeps_initial_weights() {
    let sets = common::synthetic_sets(30, 4);
    let cfg = TrainConfig { epochs: 2, learning_rate: 0.0, seed: 9, ..Default::default() };
    let (model, _) = train_examples(&sets.train, &sets.val, &ModelConfig::default(), &cfg).unwrap();
    let init = Model::new(
        ModelConfig::default(),
        bayesmtr::rng::derive_seed(9, bayesmtr::rng::stream::INIT),
    )
    .unwrap();
    assert_eq!(model.params, init.params);
}

#[test]
fn training_is_deterministic() {
    let sets = common::synthetic_sets(30, 4);
    let cfg = TrainConfig { epochs: 3, seed: 21, ..Default::default() };
    let (a, ra) = train_examples(&sets.train, &sets.val, &ModelConfig::default(), &cfg).unwrap();
    let (b, rb) = train_examples(&sets.train, &sets.val, &ModelConfig::default(), &cfg).unwrap();
    assert_eq!(ra.epochs, rb.epochs);
    assert_eq!(ra.best_epoch, rb.best_epoch);
    assert_eq!(a.params, b.params);
    assert_eq!(ra.epochs.len(), 3);
}

#[test]
fn gradients_after_training_epochs() {
    let sets = common::synthetic_sets(30, 6);
    let cfg = TrainConfig { epochs: 5, seed: 2, ..Default::default() };
    let (model, _) = train_examples(&sets.train, &sets.val, &ModelConfig::default(), &cfg).unwrap();
    assert!(check(&model, 1e-4, false) < 1e-4);
}

#[test]
fn optimizer_state_advances() {
    let model = Model::new(ModelConfig::default(), 0).unwrap();
    let sets = common::synthetic_sets(20, 0);
    let settings = LossSettings::for_model(&model, 1e-4);
    let (grads, _) = backward(&model, &sets.train[..4], settings, BatchDraw::Mean).unwrap();
    let mut store = model.params.clone();
    let mut opt = AdamW::new(&store, &TrainConfig::default());
    opt.step(&mut store, &grads);
    assert_ne!(store, model.params);
}

#[test]
fn default_training_halves_the_loss() {
    for seed in 1..=5 {
        let sets = common::synthetic_sets(304, seed);
        let cfg = TrainConfig { seed, ..Default::default() };
        let (_, report) = train_examples(&sets.train, &sets.val, &ModelConfig::default(), &cfg).unwrap();
        let first = report.epochs[0].train.total;
        let last = report.epochs.last().unwrap().train.total;
        assert!(last < 0.5 * first, "seed {seed}: {first} -> {last}");
    }
}
