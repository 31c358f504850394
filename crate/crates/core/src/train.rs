//! Loss assembly, gradients, optimization and ablation variants.

use std::time::Instant;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{make_example, CohortSplit, Normalizer, TrainingExample};
use crate::model::{Ablation, Draw, Model, ModelConfig, Noise};
use crate::mtr::N_TARGETS;
use crate::nn::{Grads, ParamStore};
use crate::rng::{derive_seed, stream, substream, Rng};

/// Loss components for one example or averaged over a set of examples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub kl: f64,
    pub lambda: f64,
    /// Gaussian negative log-likelihood; present when log-variances are learned.
    pub nll: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// The data term: NLL when present, otherwise MSE.
    pub fn data(&self) -> f64 {
        self.nll.unwrap_or(self.mse)
    }
}

/// Per-example loss. Without a variance head the data term is the MSE over the
/// four targets; with one it is `½ Σ [log_var + (y − ŷ)² e^(−log_var)] / 4`.
pub fn total_loss(
    y: &[f64; N_TARGETS],
    y_hat: &[f64; N_TARGETS],
    log_vars: &[f64; N_TARGETS],
    kl: f64,
    lambda: f64,
    aleatoric: bool,
) -> LossBreakdown {
    let n = N_TARGETS as f64;
    let mse = y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    let nll = aleatoric.then(|| {
        0.5 * y
            .iter()
            .zip(y_hat)
            .zip(log_vars)
            .map(|((a, b), lv)| lv + (a - b).powi(2) * (-lv).exp())
            .sum::<f64>()
            / n
    });
    let data = nll.unwrap_or(mse);
    LossBreakdown { mse, kl, lambda, nll, total: data + lambda * kl }
}

/// Gradients of the data term with respect to means and log-variances.
fn data_gradients(
    y: &[f64; N_TARGETS],
    y_hat: &[f64; N_TARGETS],
    log_vars: &[f64; N_TARGETS],
    aleatoric: bool,
) -> ([f64; N_TARGETS], [f64; N_TARGETS]) {
    let n = N_TARGETS as f64;
    let mut gm = [0.0; N_TARGETS];
    let mut gv = [0.0; N_TARGETS];
    for i in 0..N_TARGETS {
        let r = y_hat[i] - y[i];
        if aleatoric {
            let prec = (-log_vars[i]).exp();
            gm[i] = r * prec / n;
            gv[i] = 0.5 * (1.0 - r * r * prec) / n;
        } else {
            gm[i] = 2.0 * r / n;
        }
    }
    (gm, gv)
}

/// Averages data terms over examples and adds `λ·KL` once.
fn combine(parts: &[LossBreakdown], kl: f64, lambda: f64, aleatoric: bool) -> LossBreakdown {
    let n = parts.len().max(1) as f64;
    let mse = parts.iter().map(|p| p.mse).sum::<f64>() / n;
    let nll = aleatoric.then(|| parts.iter().map(|p| p.nll.unwrap_or(0.0)).sum::<f64>() / n);
    let data = nll.unwrap_or(mse);
    LossBreakdown { mse, kl, lambda, nll, total: data + lambda * kl }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lambda_kl: f64,
    /// Monte-Carlo weight samples per training step.
    pub mc_samples: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub aleatoric_head: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 4,
            weight_decay: 0.01,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lambda_kl: 1e-4,
            mc_samples: 1,
            seed: 0,
            ablation: Ablation::Full,
            aleatoric_head: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.mc_samples == 0 {
            return Err(Error::Config("epochs, batch size and MC samples must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.lambda_kl >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rate, KL weight and weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// A model configuration together with its effective KL weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub model: ModelConfig,
    pub lambda_kl: f64,
}

/// `no_bayesian` runs every variational weight at its mean and drops the KL
/// term; `no_deepmtr` swaps the trunk and heads for one affine map.
pub fn apply_ablation(base: &ModelConfig, cfg: &TrainConfig) -> Variant {
    let model = ModelConfig { ablation: cfg.ablation, aleatoric_head: cfg.aleatoric_head, ..base.clone() };
    let lambda_kl = if cfg.ablation == Ablation::NoBayesian { 0.0 } else { cfg.lambda_kl };
    Variant { model, lambda_kl }
}

/// Settings shared by loss evaluation and backpropagation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub lambda: f64,
    pub aleatoric: bool,
}

impl LossSettings {
    pub fn for_model(model: &Model, lambda: f64) -> Self {
        LossSettings { lambda, aleatoric: model.config.has_variance_head() }
    }
}

fn targets(ex: &TrainingExample) -> [f64; N_TARGETS] {
    ex.target.to_array()
}

fn check_finite(model: &Model, grads: &Grads) -> Result<()> {
    for (t, g) in model.params.tensors().iter().zip(&grads.tensors) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(t.name.clone()));
        }
    }
    Ok(())
}

/// How noise is chosen for each example of a batch.
pub enum BatchDraw<'a> {
    Mean,
    Sample(&'a mut Rng, usize),
    Fixed(&'a [Noise]),
}

/// Loss and parameter gradients of a batch: the data term is averaged over
/// examples (and Monte-Carlo samples), then `λ·KL` is added once.
pub fn backward(
    model: &Model,
    batch: &[TrainingExample],
    settings: LossSettings,
    mut draw: BatchDraw<'_>,
) -> Result<(Grads, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut grads = Grads::zeros_like(&model.params);
    let mut parts = Vec::with_capacity(batch.len());
    let samples = match draw {
        BatchDraw::Sample(_, s) => s.max(1),
        _ => 1,
    };
    let scale = 1.0 / (batch.len() * samples) as f64;
    for (i, ex) in batch.iter().enumerate() {
        for _ in 0..samples {
            let d = match &mut draw {
                BatchDraw::Mean => Draw::Mean,
                BatchDraw::Sample(rng, _) => Draw::Sample(rng),
                BatchDraw::Fixed(noise) => Draw::Fixed(&noise[i]),
            };
            let fwd = model.forward(ex, d)?;
            let y = targets(ex);
            let out = fwd.output;
            parts.push(total_loss(&y, &out.means, &out.log_vars, 0.0, 0.0, settings.aleatoric));
            let (mut gm, mut gv) = data_gradients(&y, &out.means, &out.log_vars, settings.aleatoric);
            gm.iter_mut().chain(gv.iter_mut()).for_each(|g| *g *= scale);
            model.backward(&fwd, &gm, &gv, &mut grads);
        }
    }
    let kl = model.kl();
    if settings.lambda != 0.0 {
        model.kl_backward(settings.lambda, &mut grads);
    }
    check_finite(model, &grads)?;
    Ok((grads, combine(&parts, kl, settings.lambda, settings.aleatoric)))
}

/// Batch loss without gradients.
pub fn evaluate_loss(
    model: &Model,
    batch: &[TrainingExample],
    settings: LossSettings,
    noise: Option<&[Noise]>,
) -> Result<LossBreakdown> {
    let mut parts = Vec::with_capacity(batch.len());
    for (i, ex) in batch.iter().enumerate() {
        let draw = match noise {
            Some(n) => Draw::Fixed(&n[i]),
            None => Draw::Mean,
        };
        let out = model.predict(ex, draw)?;
        parts.push(total_loss(&targets(ex), &out.means, &out.log_vars, 0.0, 0.0, settings.aleatoric));
    }
    Ok(combine(&parts, model.kl(), settings.lambda, settings.aleatoric))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    pub worst_tensor: String,
}

/// Compares analytical gradients against central differences on `n_params`
/// randomly chosen scalars. Tensors are visited round-robin so every tensor is
/// probed. `noise` fixes `ε` per example; `None` checks the mean-weight path.
pub fn gradient_check(
    model: &Model,
    batch: &[TrainingExample],
    settings: LossSettings,
    noise: Option<&[Noise]>,
    epsilon: f64,
    n_params: usize,
    rng: &mut Rng,
) -> Result<GradCheckReport> {
    let draw = match noise {
        Some(n) => BatchDraw::Fixed(n),
        None => BatchDraw::Mean,
    };
    let (grads, _) = backward(model, batch, settings, draw)?;
    let mut probe = model.clone();
    let n_tensors = probe.params.len();
    let mut report = GradCheckReport { max_relative_error: 0.0, checked: 0, worst_tensor: String::new() };
    for i in 0..n_params.max(n_tensors) {
        let t = i % n_tensors;
        let len = probe.params.tensors()[t].value.len();
        let idx = rng.random_range(0..len);
        let id = crate::nn::ParamId(t);
        let original = flat(&probe.params, id, idx);

        set_flat(&mut probe.params, id, idx, original + epsilon);
        let plus = evaluate_loss(&probe, batch, settings, noise)?.total;
        set_flat(&mut probe.params, id, idx, original - epsilon);
        let minus = evaluate_loss(&probe, batch, settings, noise)?.total;
        set_flat(&mut probe.params, id, idx, original);

        let numeric = (plus - minus) / (2.0 * epsilon);
        let analytic = grads.tensors[t].as_slice().expect("contiguous")[idx];
        let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
        if rel > report.max_relative_error {
            report.max_relative_error = rel;
            report.worst_tensor = format!("{}[{idx}] analytic {analytic:e} numeric {numeric:e}", probe.params.tensors()[t].name);
        }
        report.checked += 1;
    }
    Ok(report)
}

fn flat(store: &ParamStore, id: crate::nn::ParamId, idx: usize) -> f64 {
    store.get(id).as_slice().expect("contiguous")[idx]
}

fn set_flat(store: &mut ParamStore, id: crate::nn::ParamId, idx: usize, v: f64) {
    store.get_mut(id).as_slice_mut().expect("contiguous")[idx] = v;
}

/// Adaptive moment estimation with decoupled weight decay. Decay applies only
/// to tensors whose kind allows it.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Grads,
    v: Grads,
    t: i32,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        AdamW {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            m: Grads::zeros_like(store),
            v: Grads::zeros_like(store),
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((tensor, g), m), v) in store.tensors_mut().iter_mut().zip(&grads.tensors).zip(&mut self.m.tensors).zip(&mut self.v.tensors) {
            let decay = if tensor.kind.decays() { lr * self.weight_decay } else { 0.0 };
            ndarray::Zip::from(&mut tensor.value).and(g).and(m).and(v).for_each(|w, &g, m, v| {
                *w -= decay * *w;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: Option<LossBreakdown>,
    pub mean_log_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: Ablation,
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub n_train: usize,
    pub n_val: usize,
    pub epochs: Vec<EpochRecord>,
    /// Epoch (1-based) whose weights were kept.
    pub best_epoch: usize,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Builds examples for every patient of a split.
pub fn split_examples(
    split: &CohortSplit,
    onset: NaiveDate,
    norm: &Normalizer,
) -> Result<(Vec<TrainingExample>, Vec<TrainingExample>, Vec<TrainingExample>)> {
    let build = |ps: &[crate::ingest::PatientRecord]| ps.iter().map(|p| make_example(p, onset, norm)).collect::<Result<Vec<_>>>();
    Ok((build(&split.train)?, build(&split.val)?, build(&split.test)?))
}

pub fn train(
    split: &CohortSplit,
    onset: NaiveDate,
    norm: &Normalizer,
    base: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Model, TrainReport)> {
    let (train_set, val_set, _) = split_examples(split, onset, norm)?;
    train_examples(&train_set, &val_set, base, cfg)
}

/// Mini-batch training with one fresh weight sample per forward pass.
/// Validation runs at the mean weights after every epoch and the weights of
/// the best validation epoch are returned.
pub fn train_examples(
    train_set: &[TrainingExample],
    val_set: &[TrainingExample],
    base: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let started = Instant::now();
    let variant = apply_ablation(base, cfg);
    let mut model = Model::new(variant.model.clone(), derive_seed(cfg.seed, stream::INIT))?;
    let settings = LossSettings::for_model(&model, variant.lambda_kl);
    let mut optimizer = AdamW::new(&model.params, cfg);
    let mut shuffle_rng = substream(cfg.seed, stream::SHUFFLE);
    let mut sample_rng = substream(cfg.seed, stream::SAMPLING);

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut parts = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainingExample> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let (grads, loss) = backward(&model, &batch, settings, BatchDraw::Sample(&mut sample_rng, cfg.mc_samples))?;
            if !loss.total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            optimizer.step(&mut model.params, &grads);
            model.clamp_log_sigma();
            // Weight each batch by its size so the epoch average is per example.
            for _ in 0..batch.len() {
                parts.push(loss);
            }
        }
        let train_loss = average(&parts, model.kl(), settings.lambda, settings.aleatoric);
        let val = if val_set.is_empty() { None } else { Some(evaluate_loss(&model, val_set, settings, None)?) };
        if let Some(v) = val {
            if !v.total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
        }
        let score = val.map_or(train_loss.total, |v| v.total);
        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
            best = Some((score, epoch, model.params.clone()));
        }
        epochs.push(EpochRecord { epoch, train: train_loss, val, mean_log_sigma: model.mean_log_sigma() });
    }

    let (_, best_epoch, params) = best.expect("at least one epoch");
    model.params = params;
    let calibration_set = if val_set.is_empty() { train_set } else { val_set };
    model.residual_var = Some(residual_variance(&model, calibration_set)?);

    let report = TrainReport {
        variant: cfg.ablation,
        config: cfg.clone(),
        model: model.config.clone(),
        n_train: train_set.len(),
        n_val: val_set.len(),
        epochs,
        best_epoch,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

fn average(parts: &[LossBreakdown], kl: f64, lambda: f64, aleatoric: bool) -> LossBreakdown {
    let n = parts.len().max(1) as f64;
    let mse = parts.iter().map(|p| p.mse).sum::<f64>() / n;
    let nll = aleatoric.then(|| parts.iter().map(|p| p.nll.unwrap_or(0.0)).sum::<f64>() / n);
    let data = nll.unwrap_or(mse);
    LossBreakdown { mse, kl, lambda, nll, total: data + lambda * kl }
}

/// Per-target mean squared residual at the mean weights.
pub fn residual_variance(model: &Model, set: &[TrainingExample]) -> Result<[f64; N_TARGETS]> {
    if set.is_empty() {
        return Err(Error::Empty("residual set"));
    }
    let mut acc = [0.0; N_TARGETS];
    for ex in set {
        let out = model.predict(ex, Draw::Mean)?;
        for (i, y) in targets(ex).iter().enumerate() {
            acc[i] += (y - out.means[i]).powi(2);
        }
    }
    Ok(acc.map(|a| (a / set.len() as f64).max(1e-12)))
}
