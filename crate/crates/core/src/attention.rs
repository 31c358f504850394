//! Multi-head self-attention with Gaussian key-projection weights.
//!
//! Key weights are drawn by reparameterization, `W = μ + exp(logσ) ⊙ ε`, once
//! per forward pass and head. The KL penalty against a standard-normal prior
//! is closed form: `Σ −logσ + ½(σ² + μ² − 1)`.

use ndarray::{s, Array2, ArrayView2};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{layer_norm, layer_norm_backward, sum_rows, LayerNormCache};

pub const LOG_SIGMA_MIN: f64 = -10.0;
pub const LOG_SIGMA_MAX: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Stochastic,
    Deterministic,
}

/// Mean and log standard deviation of a diagonal Gaussian over a weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalParameter {
    pub mu: Array2<f64>,
    pub log_sigma: Array2<f64>,
}

impl VariationalParameter {
    pub fn new(mu: Array2<f64>, log_sigma: Array2<f64>) -> Result<Self> {
        if mu.dim() != log_sigma.dim() {
            return Err(Error::Shape(format!("mu {:?} vs log_sigma {:?}", mu.dim(), log_sigma.dim())));
        }
        if log_sigma.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("log_sigma must be finite".into()));
        }
        Ok(VariationalParameter { mu, log_sigma: log_sigma.mapv(clamp_log_sigma) })
    }

    pub fn init<R: rand::Rng + ?Sized>(rng: &mut R, shape: (usize, usize), mu_std: f64, log_sigma: f64) -> Self {
        let mu = Array2::from_shape_fn(shape, |_| mu_std * rng.sample::<f64, _>(StandardNormal));
        VariationalParameter { mu, log_sigma: Array2::from_elem(shape, clamp_log_sigma(log_sigma)) }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.mu.dim()
    }
}

pub fn clamp_log_sigma(v: f64) -> f64 {
    v.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX)
}

pub fn standard_normal<R: rand::Rng + ?Sized>(rng: &mut R, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

/// `μ + exp(logσ) ⊙ ε`.
pub fn reparameterize(mu: &Array2<f64>, log_sigma: &Array2<f64>, eps: &Array2<f64>) -> Array2<f64> {
    let mut w = mu.clone();
    ndarray::Zip::from(&mut w).and(log_sigma).and(eps).for_each(|w, &ls, &e| *w += ls.exp() * e);
    w
}

/// Draws a weight matrix; deterministic mode returns `μ` exactly.
pub fn sample_weights<R: rand::Rng + ?Sized>(vp: &VariationalParameter, rng: &mut R, mode: Mode) -> Array2<f64> {
    match mode {
        Mode::Deterministic => vp.mu.clone(),
        Mode::Stochastic => reparameterize(&vp.mu, &vp.log_sigma, &standard_normal(rng, vp.dim())),
    }
}

pub fn kl_divergence(vp: &VariationalParameter) -> f64 {
    kl_terms(&vp.mu, &vp.log_sigma)
}

/// Closed-form KL(N(μ, σ²) ‖ N(0, 1)) summed over entries.
pub fn kl_terms(mu: &Array2<f64>, log_sigma: &Array2<f64>) -> f64 {
    mu.iter()
        .zip(log_sigma)
        .map(|(&m, &ls)| -ls + 0.5 * ((2.0 * ls).exp() + m * m - 1.0))
        .sum()
}

/// Gradients of [`kl_terms`]: `∂/∂μ = μ`, `∂/∂logσ = σ² − 1`.
pub fn kl_gradients(mu: &Array2<f64>, log_sigma: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    (mu.clone(), log_sigma.mapv(|ls| (2.0 * ls).exp() - 1.0))
}

/// `q·k'ᵀ / √d_k`, with masked key columns set to `−∞`.
pub fn attention_scores(
    q: ArrayView2<f64>,
    k_prime: ArrayView2<f64>,
    d_k: usize,
    key_mask: Option<&[bool]>,
) -> Result<Array2<f64>> {
    if q.ncols() != d_k || k_prime.ncols() != d_k {
        return Err(Error::Shape(format!("q {:?} and k' {:?} must both have {d_k} columns", q.dim(), k_prime.dim())));
    }
    let mut scores = q.dot(&k_prime.t());
    scores.mapv_inplace(|v| v / (d_k as f64).sqrt());
    if let Some(mask) = key_mask {
        if mask.len() != k_prime.nrows() {
            return Err(Error::Shape(format!("mask length {} vs {} keys", mask.len(), k_prime.nrows())));
        }
        for (j, &masked) in mask.iter().enumerate() {
            if masked {
                scores.column_mut(j).fill(f64::NEG_INFINITY);
            }
        }
    }
    Ok(scores)
}

/// Row-wise softmax, stabilized by subtracting the row maximum. `−∞` entries
/// map to exactly 0.
pub fn softmax_rows(scores: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = scores.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::FullyMaskedRow(i));
        }
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    Ok(out)
}

/// Score gradient from the probability gradient: `A ⊙ (dA − rowsum(dA ⊙ A))`.
pub fn softmax_backward(probs: &Array2<f64>, grad_probs: &Array2<f64>) -> Array2<f64> {
    let mut out = grad_probs * probs;
    for (mut row, p) in out.rows_mut().into_iter().zip(probs.rows()) {
        let dot = row.sum();
        row.zip_mut_with(&p, |g, &pv| *g -= pv * dot);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub n_heads: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub mode: Mode,
    /// Also sample query and value projections.
    pub variational_qv: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig { n_heads: 4, d_model: 64, d_k: 16, d_v: 16, mode: Mode::Stochastic, variational_qv: false }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_k == 0 || self.d_v == 0 || self.d_model == 0 {
            return Err(Error::Config("attention dimensions must be positive".into()));
        }
        if self.n_heads * self.d_k > self.d_model || self.n_heads * self.d_v > self.d_model {
            return Err(Error::Config(format!(
                "{} heads of width {}/{} exceed d_model {}",
                self.n_heads, self.d_k, self.d_v, self.d_model
            )));
        }
        Ok(())
    }
}

/// A projection that is either a point estimate or a Gaussian over weights.
#[derive(Debug, Clone, PartialEq)]
pub enum Projection {
    Fixed(Array2<f64>),
    Variational(VariationalParameter),
}

impl Projection {
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R, mode: Mode) -> Array2<f64> {
        match self {
            Projection::Fixed(w) => w.clone(),
            Projection::Variational(vp) => sample_weights(vp, rng, mode),
        }
    }
}

/// Per-head weights for the standalone attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub wq: Projection,
    pub wk: VariationalParameter,
    pub wv: Projection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadWeights {
    pub heads: Vec<HeadWeights>,
    /// `(H·d_v) × d_model`.
    pub wo: Array2<f64>,
}

/// Concrete (already sampled) projection matrices for one head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMatrices {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Post-softmax attention matrix.
    pub probs: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub input: Array2<f64>,
    pub heads: Vec<HeadCache>,
    pub concat: Array2<f64>,
    pub norm: LayerNormCache,
}

#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub input: Array2<f64>,
    pub heads: Vec<HeadMatrices>,
    pub wo: Array2<f64>,
    pub bo: Array2<f64>,
    pub gamma: Array2<f64>,
    pub beta: Array2<f64>,
}

/// `LayerNorm(X + Concat(softmax(QK'ᵀ/√d_k)·V)·Wo + bo)`.
pub fn attention_sublayer(
    x: &Array2<f64>,
    heads: &[HeadMatrices],
    wo: &Array2<f64>,
    bo: &Array2<f64>,
    gamma: &Array2<f64>,
    beta: &Array2<f64>,
    key_mask: Option<&[bool]>,
) -> Result<(Array2<f64>, AttentionCache)> {
    let Some(first) = heads.first() else {
        return Err(Error::Shape("attention needs at least one head".into()));
    };
    let (d_k, d_v) = (first.wq.ncols(), first.wv.ncols());
    if wo.nrows() != heads.len() * d_v || wo.ncols() != x.ncols() {
        return Err(Error::Shape(format!("Wo {:?} vs {} heads of width {d_v}", wo.dim(), heads.len())));
    }
    let mut concat = Array2::zeros((x.nrows(), heads.len() * d_v));
    let mut caches = Vec::with_capacity(heads.len());
    for (h, w) in heads.iter().enumerate() {
        if w.wq.nrows() != x.ncols() || w.wk.dim() != w.wq.dim() || w.wv.dim() != (x.ncols(), d_v) {
            return Err(Error::Shape(format!("head {h} projections do not match input width {}", x.ncols())));
        }
        let q = x.dot(&w.wq);
        let k = x.dot(&w.wk);
        let v = x.dot(&w.wv);
        let probs = softmax_rows(&attention_scores(q.view(), k.view(), d_k, key_mask)?)?;
        concat.slice_mut(s![.., h * d_v..(h + 1) * d_v]).assign(&probs.dot(&v));
        caches.push(HeadCache { q, k, v, probs });
    }
    let mut residual = concat.dot(wo);
    residual += &bo.row(0);
    residual += x;
    let (out, norm) = layer_norm(residual.view(), gamma, beta);
    Ok((out, AttentionCache { input: x.clone(), heads: caches, concat, norm }))
}

pub fn attention_sublayer_backward(
    grad_out: &Array2<f64>,
    heads: &[HeadMatrices],
    wo: &Array2<f64>,
    gamma: &Array2<f64>,
    cache: &AttentionCache,
) -> AttentionGrads {
    let mut grad_gamma = Array2::zeros(gamma.raw_dim());
    let mut grad_beta = Array2::zeros(gamma.raw_dim());
    let grad_res = layer_norm_backward(grad_out, gamma, &cache.norm, &mut grad_gamma, &mut grad_beta);

    let grad_wo = cache.concat.t().dot(&grad_res);
    let grad_bo = sum_rows(&grad_res);
    let grad_concat = grad_res.dot(&wo.t());

    let mut grad_x = grad_res;
    let x = &cache.input;
    let mut head_grads = Vec::with_capacity(heads.len());
    for (h, (w, c)) in heads.iter().zip(&cache.heads).enumerate() {
        let d_k = w.wq.ncols();
        let d_v = w.wv.ncols();
        let scale = 1.0 / (d_k as f64).sqrt();
        let grad_o = grad_concat.slice(s![.., h * d_v..(h + 1) * d_v]);
        let grad_probs = grad_o.dot(&c.v.t());
        let grad_v = c.probs.t().dot(&grad_o);
        let mut grad_scores = softmax_backward(&c.probs, &grad_probs);
        grad_scores.mapv_inplace(|g| g * scale);
        let grad_q = grad_scores.dot(&c.k);
        let grad_k = grad_scores.t().dot(&c.q);

        grad_x += &grad_q.dot(&w.wq.t());
        grad_x += &grad_k.dot(&w.wk.t());
        grad_x += &grad_v.dot(&w.wv.t());
        head_grads.push(HeadMatrices { wq: x.t().dot(&grad_q), wk: x.t().dot(&grad_k), wv: x.t().dot(&grad_v) });
    }
    AttentionGrads { input: grad_x, heads: head_grads, wo: grad_wo, bo: grad_bo, gamma: grad_gamma, beta: grad_beta }
}

/// Standalone attention block: samples one weight set per head, attends, then
/// applies the residual connection and a unit layer norm.
pub fn multi_head_forward<R: rand::Rng + ?Sized>(
    x: &Array2<f64>,
    weights: &MultiHeadWeights,
    cfg: &AttentionConfig,
    rng: &mut R,
    key_mask: Option<&[bool]>,
) -> Result<Array2<f64>> {
    if weights.heads.len() != cfg.n_heads {
        return Err(Error::Shape(format!("{} head weights for {} heads", weights.heads.len(), cfg.n_heads)));
    }
    let mats: Vec<HeadMatrices> = weights
        .heads
        .iter()
        .map(|h| HeadMatrices {
            wq: h.wq.sample(rng, cfg.mode),
            wk: sample_weights(&h.wk, rng, cfg.mode),
            wv: h.wv.sample(rng, cfg.mode),
        })
        .collect();
    let d = x.ncols();
    let gamma = Array2::ones((1, d));
    let beta = Array2::zeros((1, d));
    let bo = Array2::zeros((1, d));
    attention_sublayer(x, &mats, &weights.wo, &bo, &gamma, &beta, key_mask).map(|(out, _)| out)
}
