//! Parameter storage and the small dense building blocks shared by the
//! encoder and the regression head.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Whether decoupled weight decay applies to a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Decay,
    /// Variational log standard deviations.
    LogSigma,
    /// Layer-norm gain and shift.
    Norm,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Decay)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub kind: ParamKind,
    pub value: Array2<f64>,
}

/// Flat, ordered collection of named learnable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Array2<f64>) -> ParamId {
        self.tensors.push(Tensor { name: name.into(), kind, value });
        ParamId(self.tensors.len() - 1)
    }

    pub fn normal(&mut self, rng: &mut Rng, name: impl Into<String>, shape: (usize, usize), std: f64) -> ParamId {
        let value = Array2::from_shape_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal));
        self.add(name, ParamKind::Decay, value)
    }

    pub fn filled(&mut self, name: impl Into<String>, kind: ParamKind, shape: (usize, usize), v: f64) -> ParamId {
        self.add(name, kind, Array2::from_elem(shape, v))
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.tensors[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.tensors[id.0].value
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|t| t.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub tensors: Vec<Array2<f64>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads { tensors: store.tensors().iter().map(|t| Array2::zeros(t.value.raw_dim())).collect() }
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.tensors[id.0]
    }

    /// `self += alpha * other`, tensor by tensor in index order.
    pub fn add_scaled(&mut self, other: &Grads, alpha: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.scaled_add(alpha, b);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v * alpha);
        }
    }

    pub fn all_zero(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|&v| v == 0.0))
    }
}

/// Adds a `1×n` bias row to every row of `x`.
pub fn add_bias(x: &mut Array2<f64>, bias: &Array2<f64>) {
    *x += &bias.row(0);
}

/// Column sums as a `1×n` matrix.
pub fn sum_rows(x: &Array2<f64>) -> Array2<f64> {
    x.sum_axis(Axis(0)).insert_axis(Axis(0))
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Zeroes `grad` where the pre-activation was not positive.
pub fn relu_backward(grad: &mut Array2<f64>, pre: &Array2<f64>) {
    ndarray::Zip::from(grad).and(pre).for_each(|g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Saved statistics of a row-wise layer normalization.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Array2<f64>,
    pub inv_std: Array1<f64>,
}

/// Row-wise layer normalization with gain `gamma` and shift `beta` (`1×d`).
pub fn layer_norm(x: ArrayView2<f64>, gamma: &Array2<f64>, beta: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
    let d = x.ncols() as f64;
    let mut normalized = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in normalized.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *s = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| v * *s);
    }
    let mut out = &normalized * &gamma.row(0);
    out += &beta.row(0);
    (out, LayerNormCache { normalized, inv_std })
}

/// Returns the input gradient and accumulates gain/shift gradients.
pub fn layer_norm_backward(
    grad_out: &Array2<f64>,
    gamma: &Array2<f64>,
    cache: &LayerNormCache,
    grad_gamma: &mut Array2<f64>,
    grad_beta: &mut Array2<f64>,
) -> Array2<f64> {
    *grad_gamma += &sum_rows(&(grad_out * &cache.normalized));
    *grad_beta += &sum_rows(grad_out);

    let d = grad_out.ncols() as f64;
    let g_hat = grad_out * &gamma.row(0);
    let mut grad_in = Array2::zeros(grad_out.raw_dim());
    for (i, mut row) in grad_in.rows_mut().into_iter().enumerate() {
        let gh = g_hat.row(i);
        let xh = cache.normalized.row(i);
        let mean_g = gh.sum() / d;
        let mean_gx = gh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d;
        let s = cache.inv_std[i];
        for ((r, &g), &x) in row.iter_mut().zip(gh).zip(xh) {
            *r = s * (g - mean_g - x * mean_gx);
        }
    }
    grad_in
}
