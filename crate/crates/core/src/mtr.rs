//! Shared-trunk multi-target regression head.
//!
//! The latent vector passes once through a ReLU trunk (default 512 → 128 → 64);
//! each biomarker then reads the shared trunk output through its own mean map
//! and, optionally, its own log-variance map.

use ndarray::{Array1, Array2, Axis};

use crate::attention::standard_normal;
use crate::nn::{relu, relu_backward, sum_rows, Grads, ParamId, ParamKind, ParamStore};
use crate::rng::Rng;

pub const N_TARGETS: usize = 4;
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 3.0;
/// Initial log-variance bias (variance ≈ 6.7e-3 in normalized units).
pub const LOG_VAR_INIT: f64 = -5.0;
/// Initial mean bias: the midpoint of the normalized range.
pub const MEAN_INIT: f64 = 0.5;

/// Affine map `x·W + b` with `W: in × out`, `b: 1 × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weight: T,
    pub bias: T,
}

impl Dense<ParamId> {
    pub fn register(store: &mut ParamStore, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize, std: f64, bias: f64) -> Self {
        Dense {
            weight: store.normal(rng, format!("{name}.weight"), (fan_in, fan_out), std),
            bias: store.filled(format!("{name}.bias"), ParamKind::Decay, (1, fan_out), bias),
        }
    }

    pub fn resolve<'a>(&self, store: &'a ParamStore) -> Dense<&'a Array2<f64>> {
        Dense { weight: store.get(self.weight), bias: store.get(self.bias) }
    }

    /// Accumulates parameter gradients for input rows `x` and returns the
    /// input gradient.
    pub fn backward(&self, store: &ParamStore, x: &Array2<f64>, grad_out: &Array2<f64>, grads: &mut Grads) -> Array2<f64> {
        *grads.get_mut(self.weight) += &x.t().dot(grad_out);
        *grads.get_mut(self.bias) += &sum_rows(grad_out);
        grad_out.dot(&store.get(self.weight).t())
    }
}

impl Dense<&Array2<f64>> {
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(self.weight);
        y += &self.bias.row(0);
        y
    }
}

impl Dense<Array2<f64>> {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense { weight: Array2::zeros((fan_in, fan_out)), bias: Array2::zeros((1, fan_out)) }
    }

    pub fn random(rng: &mut Rng, fan_in: usize, fan_out: usize, std: f64) -> Self {
        Dense { weight: standard_normal(rng, (fan_in, fan_out)) * std, bias: standard_normal(rng, (1, fan_out)) * std }
    }

    pub fn view(&self) -> Dense<&Array2<f64>> {
        Dense { weight: &self.weight, bias: &self.bias }
    }
}

/// One biomarker's output maps (trunk width → 1).
#[derive(Debug, Clone, PartialEq)]
pub struct TargetHead<T> {
    pub mean: Dense<T>,
    pub log_var: Option<Dense<T>>,
}

/// Trunk plus per-target heads.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepMtr<T> {
    pub trunk: Vec<Dense<T>>,
    pub heads: Vec<TargetHead<T>>,
}

impl DeepMtr<ParamId> {
    pub fn register(store: &mut ParamStore, rng: &mut Rng, d_latent: usize, widths: &[usize], aleatoric: bool) -> Self {
        let mut trunk = Vec::with_capacity(widths.len());
        let mut fan_in = d_latent;
        for (i, &w) in widths.iter().enumerate() {
            trunk.push(Dense::register(store, rng, &format!("mtr.trunk{i}"), fan_in, w, (2.0 / fan_in as f64).sqrt(), 0.0));
            fan_in = w;
        }
        let head_std = 1.0 / (fan_in as f64).sqrt();
        let heads = crate::ingest::Biomarker::ALL
            .iter()
            .map(|b| TargetHead {
                mean: Dense::register(store, rng, &format!("mtr.{}.mean", b.column()), fan_in, 1, head_std, MEAN_INIT),
                log_var: aleatoric.then(|| {
                    Dense::register(store, rng, &format!("mtr.{}.log_var", b.column()), fan_in, 1, 0.1 * head_std, LOG_VAR_INIT)
                }),
            })
            .collect();
        DeepMtr { trunk, heads }
    }

    pub fn resolve<'a>(&self, store: &'a ParamStore) -> DeepMtr<&'a Array2<f64>> {
        DeepMtr {
            trunk: self.trunk.iter().map(|d| d.resolve(store)).collect(),
            heads: self
                .heads
                .iter()
                .map(|h| TargetHead { mean: h.mean.resolve(store), log_var: h.log_var.as_ref().map(|d| d.resolve(store)) })
                .collect(),
        }
    }
}

impl DeepMtr<Array2<f64>> {
    pub fn view(&self) -> DeepMtr<&Array2<f64>> {
        DeepMtr {
            trunk: self.trunk.iter().map(Dense::view).collect(),
            heads: self
                .heads
                .iter()
                .map(|h| TargetHead { mean: h.mean.view(), log_var: h.log_var.as_ref().map(Dense::view) })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MtrOutput {
    pub means: [f64; N_TARGETS],
    /// Clamped to `[LOG_VAR_MIN, LOG_VAR_MAX]`; zero when there is no variance head.
    pub log_vars: [f64; N_TARGETS],
    /// Raw (pre-clamp) log-variances.
    pub raw_log_vars: [f64; N_TARGETS],
}

#[derive(Debug, Clone)]
pub struct MtrCache {
    pub input: Array2<f64>,
    /// Pre-activation of each trunk layer.
    pub pre: Vec<Array2<f64>>,
    /// Post-ReLU output of each trunk layer.
    pub post: Vec<Array2<f64>>,
    pub output: MtrOutput,
}

fn row(x: &Array1<f64>) -> Array2<f64> {
    x.view().insert_axis(Axis(0)).to_owned()
}

pub fn mtr_forward_cached(z: &Array1<f64>, net: &DeepMtr<&Array2<f64>>) -> MtrCache {
    let input = row(z);
    let mut pre = Vec::with_capacity(net.trunk.len());
    let mut post = Vec::with_capacity(net.trunk.len());
    let mut h = input.clone();
    for layer in &net.trunk {
        let a = layer.forward(&h);
        h = relu(&a);
        pre.push(a);
        post.push(h.clone());
    }
    let mut output = MtrOutput { means: [0.0; N_TARGETS], log_vars: [0.0; N_TARGETS], raw_log_vars: [0.0; N_TARGETS] };
    for (i, head) in net.heads.iter().enumerate() {
        output.means[i] = head.mean.forward(&h)[[0, 0]];
        if let Some(lv) = &head.log_var {
            let raw = lv.forward(&h)[[0, 0]];
            output.raw_log_vars[i] = raw;
            output.log_vars[i] = raw.clamp(LOG_VAR_MIN, LOG_VAR_MAX);
        }
    }
    MtrCache { input, pre, post, output }
}

/// Trunk once, then each head on the shared trunk output.
pub fn mtr_forward(z: &Array1<f64>, net: &DeepMtr<&Array2<f64>>) -> MtrOutput {
    mtr_forward_cached(z, net).output
}

pub fn mtr_backward(
    cache: &MtrCache,
    grad_means: &[f64; N_TARGETS],
    grad_log_vars: &[f64; N_TARGETS],
    net: &DeepMtr<ParamId>,
    store: &ParamStore,
    grads: &mut Grads,
) -> Array1<f64> {
    let top = cache.post.last().unwrap_or(&cache.input);
    let mut grad_h = Array2::zeros(top.raw_dim());
    for (i, head) in net.heads.iter().enumerate() {
        grad_h += &head.mean.backward(store, top, &Array2::from_elem((1, 1), grad_means[i]), grads);
        if let Some(lv) = &head.log_var {
            let raw = cache.output.raw_log_vars[i];
            let g = if (LOG_VAR_MIN..=LOG_VAR_MAX).contains(&raw) { grad_log_vars[i] } else { 0.0 };
            grad_h += &lv.backward(store, top, &Array2::from_elem((1, 1), g), grads);
        }
    }
    for (l, layer) in net.trunk.iter().enumerate().rev() {
        relu_backward(&mut grad_h, &cache.pre[l]);
        let input = if l == 0 { &cache.input } else { &cache.post[l - 1] };
        grad_h = layer.backward(store, input, &grad_h, grads);
    }
    grad_h.row(0).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_net(rng: &mut Rng, aleatoric: bool) -> DeepMtr<Array2<f64>> {
        let widths = [12, 8, 6];
        let mut fan_in = 5;
        let mut trunk = Vec::new();
        for w in widths {
            trunk.push(Dense::random(rng, fan_in, w, 0.7));
            fan_in = w;
        }
        let heads = (0..4)
            .map(|_| TargetHead {
                mean: Dense::random(rng, 6, 1, 0.7),
                log_var: aleatoric.then(|| Dense::random(rng, 6, 1, 0.3)),
            })
            .collect();
        DeepMtr { trunk, heads }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = DeepMtr {
            trunk: vec![Dense::zeros(5, 4), Dense::zeros(4, 3)],
            heads: (0..4).map(|_| TargetHead { mean: Dense::zeros(3, 1), log_var: Some(Dense::zeros(3, 1)) }).collect(),
        };
        let out = mtr_forward(&Array1::from_vec(vec![1.0, -2.0, 0.5, 3.0, 0.1]), &net.view());
        assert_eq!(out.means, [0.0; 4]);
        assert_eq!(out.raw_log_vars, [0.0; 4]);
    }

    #[test]
    fn heads_are_independent() {
        let mut rng = Rng::seed_from_u64(0);
        let mut net = random_net(&mut rng, true);
        let z = standard_normal(&mut rng, (1, 5)).row(0).to_owned();
        let before = mtr_forward(&z, &net.view());
        net.heads[2].mean.weight.mapv_inplace(|v| v + 0.3);
        net.heads[2].mean.bias[[0, 0]] -= 1.0;
        let after = mtr_forward(&z, &net.view());
        for i in [0, 1, 3] {
            assert_eq!(before.means[i], after.means[i]);
        }
        assert_ne!(before.means[2], after.means[2]);
    }

    #[test]
    fn bias_only_head() {
        let mut rng = Rng::seed_from_u64(1);
        let mut net = random_net(&mut rng, false);
        net.heads[1].mean = Dense { weight: Array2::zeros((6, 1)), bias: Array2::from_elem((1, 1), 0.42) };
        for _ in 0..5 {
            let z = standard_normal(&mut rng, (1, 5)).row(0).to_owned();
            let out = mtr_forward(&z, &net.view());
            assert_eq!(out.means[1], 0.42);
            assert_eq!(out.log_vars, [0.0; 4]);
        }
    }

    #[test]
    fn log_vars_are_clamped() {
        let mut rng = Rng::seed_from_u64(2);
        let mut net = random_net(&mut rng, true);
        net.heads[0].log_var.as_mut().unwrap().bias[[0, 0]] = 100.0;
        net.heads[3].log_var.as_mut().unwrap().bias[[0, 0]] = -100.0;
        let z = standard_normal(&mut rng, (1, 5)).row(0).to_owned();
        let out = mtr_forward(&z, &net.view());
        assert_eq!(out.log_vars[0], LOG_VAR_MAX);
        assert_eq!(out.log_vars[3], LOG_VAR_MIN);
    }

    /// Finite-difference checks of head independence and trunk sharing.
    #[test]
    fn head_independence_and_trunk_sharing_by_finite_differences() {
        let mut rng = Rng::seed_from_u64(3);
        let net = random_net(&mut rng, true);
        let z = standard_normal(&mut rng, (1, 5)).row(0).to_owned();
        let h = 1e-6;
        for j in 0..4 {
            for p in 0..6 {
                let mut plus = net.clone();
                plus.heads[j].mean.weight[[p, 0]] += h;
                let mut minus = net.clone();
                minus.heads[j].mean.weight[[p, 0]] -= h;
                let (a, b) = (mtr_forward(&z, &plus.view()), mtr_forward(&z, &minus.view()));
                for i in (0..4).filter(|&i| i != j) {
                    assert_eq!((a.means[i] - b.means[i]) / (2.0 * h), 0.0);
                }
            }
        }
        // Every mean depends on the first trunk layer.
        for i in 0..4 {
            let mut any = false;
            for p in 0..5 {
                for q in 0..12 {
                    let mut plus = net.clone();
                    plus.trunk[0].weight[[p, q]] += h;
                    let mut minus = net.clone();
                    minus.trunk[0].weight[[p, q]] -= h;
                    let d = mtr_forward(&z, &plus.view()).means[i] - mtr_forward(&z, &minus.view()).means[i];
                    any |= d.abs() > 0.0;
                }
            }
            assert!(any, "mean {i} is disconnected from the trunk");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::seed_from_u64(4);
        let owned = random_net(&mut rng, true);
        let mut store = ParamStore::new();
        let ids = DeepMtr {
            trunk: owned
                .trunk
                .iter()
                .enumerate()
                .map(|(i, d)| Dense {
                    weight: store.add(format!("t{i}w"), ParamKind::Decay, d.weight.clone()),
                    bias: store.add(format!("t{i}b"), ParamKind::Decay, d.bias.clone()),
                })
                .collect(),
            heads: owned
                .heads
                .iter()
                .enumerate()
                .map(|(i, h)| TargetHead {
                    mean: Dense {
                        weight: store.add(format!("h{i}mw"), ParamKind::Decay, h.mean.weight.clone()),
                        bias: store.add(format!("h{i}mb"), ParamKind::Decay, h.mean.bias.clone()),
                    },
                    log_var: h.log_var.as_ref().map(|d| Dense {
                        weight: store.add(format!("h{i}vw"), ParamKind::Decay, d.weight.clone()),
                        bias: store.add(format!("h{i}vb"), ParamKind::Decay, d.bias.clone()),
                    }),
                })
                .collect(),
        };
        let z = standard_normal(&mut rng, (1, 5)).row(0).to_owned();
        let wm = [0.3, -1.2, 0.7, 2.0];
        let wv = [0.5, 0.1, -0.4, 1.1];
        let loss = |store: &ParamStore, z: &Array1<f64>| {
            let o = mtr_forward(z, &ids.resolve(store));
            (0..4).map(|i| wm[i] * o.means[i] + wv[i] * o.log_vars[i]).sum::<f64>()
        };
        let cache = mtr_forward_cached(&z, &ids.resolve(&store));
        let mut grads = Grads::zeros_like(&store);
        let gz = mtr_backward(&cache, &wm, &wv, &ids, &store, &mut grads);

        let h = 1e-6;
        for t in 0..store.len() {
            let shape = store.tensors()[t].value.dim();
            for r in 0..shape.0 {
                for c in 0..shape.1 {
                    let mut sp = store.clone();
                    sp.get_mut(ParamId(t))[[r, c]] += h;
                    let mut sm = store.clone();
                    sm.get_mut(ParamId(t))[[r, c]] -= h;
                    let fd = (loss(&sp, &z) - loss(&sm, &z)) / (2.0 * h);
                    let an = grads.tensors[t][[r, c]];
                    assert!((fd - an).abs() < 1e-6, "{}[{r},{c}]: {fd} vs {an}", store.tensors()[t].name);
                }
            }
        }
        for p in 0..5 {
            let mut zp = z.clone();
            zp[p] += h;
            let mut zm = z.clone();
            zm[p] -= h;
            let fd = (loss(&store, &zp) - loss(&store, &zm)) / (2.0 * h);
            assert!((fd - gz[p]).abs() < 1e-6);
        }
    }
}
