//! The assembled network: embeddings → encoder layers with variational
//! attention → `[CLS]` projection → regression head.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_sublayer, attention_sublayer_backward, kl_gradients, kl_terms, reparameterize, standard_normal,
    AttentionCache, AttentionConfig, HeadMatrices, Mode,
};
use crate::encoder::{
    embed_backward, embed_example_padded, pool_and_project, pool_backward, EmbeddingTable, EncodedSequence,
    ProjectionHead, TokenSource,
};
use crate::error::{Error, Result};
use crate::ingest::TrainingExample;
use crate::mtr::{mtr_backward, mtr_forward_cached, Dense, DeepMtr, MtrCache, MtrOutput, N_TARGETS};
use crate::nn::{layer_norm, layer_norm_backward, relu, relu_backward, Grads, LayerNormCache, ParamId, ParamKind, ParamStore};
use crate::rng::{substream, Rng};

/// Initial standard deviation of embeddings and variational means.
pub const INIT_STD: f64 = 0.02;
pub const INIT_LOG_SIGMA: f64 = -5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoBayesian,
    NoDeepmtr,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Full, Ablation::NoBayesian, Ablation::NoDeepmtr];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoBayesian => "no_bayesian",
            Ablation::NoDeepmtr => "no_deepmtr",
        }
    }

    /// Row label used in result tables.
    pub fn display(self) -> &'static str {
        match self {
            Ablation::Full => "MBT (full)",
            Ablation::NoBayesian => "w/o Bayesian",
            Ablation::NoDeepmtr => "w/o DeepMTR",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub attention: AttentionConfig,
    pub n_layers: usize,
    pub ffn_mult: usize,
    pub d_latent: usize,
    pub max_visits: usize,
    pub trunk: Vec<usize>,
    pub aleatoric_head: bool,
    pub ablation: Ablation,
    pub init_log_sigma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            attention: AttentionConfig::default(),
            n_layers: 1,
            ffn_mult: 4,
            d_latent: 128,
            max_visits: 64,
            trunk: vec![512, 128, 64],
            aleatoric_head: true,
            ablation: Ablation::Full,
            init_log_sigma: INIT_LOG_SIGMA,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        if self.n_layers == 0 || self.ffn_mult == 0 || self.d_latent == 0 || self.max_visits == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.trunk.contains(&0) {
            return Err(Error::Config("trunk widths must be positive".into()));
        }
        Ok(())
    }

    /// Whether key weights are sampled at all.
    pub fn bayesian(&self) -> bool {
        self.ablation != Ablation::NoBayesian
    }

    /// Whether the model emits learned log-variances.
    pub fn has_variance_head(&self) -> bool {
        self.aleatoric_head && self.ablation != Ablation::NoDeepmtr
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ProjIds {
    Fixed(ParamId),
    Variational { mu: ParamId, log_sigma: ParamId, slot: usize },
}

#[derive(Debug, Clone)]
struct HeadIds {
    wq: ProjIds,
    wk: ProjIds,
    wv: ProjIds,
}

#[derive(Debug, Clone)]
struct LayerIds {
    heads: Vec<HeadIds>,
    out: Dense<ParamId>,
    norm1: (ParamId, ParamId),
    ffn_in: Dense<ParamId>,
    ffn_out: Dense<ParamId>,
    norm2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
enum RegressionIds {
    DeepMtr(DeepMtr<ParamId>),
    Affine(Dense<ParamId>),
}

#[derive(Debug, Clone)]
struct Layout {
    embed: EmbeddingTable<ParamId>,
    embed_norm: (ParamId, ParamId),
    layers: Vec<LayerIds>,
    proj: ProjectionHead<ParamId>,
    head: RegressionIds,
    /// (μ, logσ) pairs in sampling order.
    variational: Vec<(ParamId, ParamId)>,
}

/// One standard-normal draw per variational tensor, in sampling order.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise(pub Vec<Array2<f64>>);

/// How variational weights are realized for one forward pass.
pub enum Draw<'a> {
    /// `W = μ`.
    Mean,
    /// Fresh `ε` for every variational tensor.
    Sample(&'a mut Rng),
    /// Caller-provided `ε`.
    Fixed(&'a Noise),
}

#[derive(Debug, Clone)]
struct LayerCache {
    heads: Vec<HeadMatrices>,
    attention: AttentionCache,
    attended: Array2<f64>,
    ffn_pre: Array2<f64>,
    ffn_hidden: Array2<f64>,
    norm2: LayerNormCache,
}

#[derive(Debug, Clone)]
enum HeadCache {
    DeepMtr(MtrCache),
    Affine(Array2<f64>),
}

/// Output of one forward pass plus everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct Forward {
    pub output: MtrOutput,
    tokens: Vec<TokenSource>,
    embed_norm: LayerNormCache,
    layers: Vec<LayerCache>,
    encoded: Array2<f64>,
    latent: Array1<f64>,
    head: HeadCache,
    noise: Option<Noise>,
}

impl Forward {
    pub fn latent(&self) -> &Array1<f64> {
        &self.latent
    }

    /// Post-softmax attention matrices, indexed `[layer][head]`.
    pub fn attention_maps(&self) -> Vec<Vec<Array2<f64>>> {
        self.layers.iter().map(|l| l.attention.heads.iter().map(|h| h.probs.clone()).collect()).collect()
    }

    pub fn token_labels(&self) -> Vec<String> {
        self.tokens.iter().map(TokenSource::label).collect()
    }

    pub fn noise(&self) -> Option<&Noise> {
        self.noise.as_ref()
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
    /// Per-target residual variance from validation, used as the aleatoric
    /// estimate when the model has no variance head.
    pub residual_var: Option<[f64; N_TARGETS]>,
}

impl Model {
    /// Builds and initializes a model. Encoder tensors come from one seeded
    /// stream and regression-head tensors from another, so ablation variants
    /// built from the same seed share their encoder initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let att = config.attention;
        let d = att.d_model;
        let mut rng = substream(seed, "init.encoder");
        let mut params = ParamStore::new();
        let mut variational = Vec::new();

        let embed = EmbeddingTable::register(&mut params, &mut rng, "", d, config.max_visits);
        let embed_norm = (
            params.filled("embed.norm.gamma", ParamKind::Norm, (1, d), 1.0),
            params.filled("embed.norm.beta", ParamKind::Norm, (1, d), 0.0),
        );

        let proj_std = 1.0 / (d as f64).sqrt();
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let mut heads = Vec::with_capacity(att.n_heads);
            for h in 0..att.n_heads {
                let mut proj = |name: &str, cols: usize, variational_proj: bool, std: f64| {
                    let base = format!("layer{l}.head{h}.{name}");
                    if variational_proj {
                        let mu = params.normal(&mut rng, format!("{base}.mu"), (d, cols), std);
                        let log_sigma =
                            params.filled(format!("{base}.log_sigma"), ParamKind::LogSigma, (d, cols), config.init_log_sigma);
                        variational.push((mu, log_sigma));
                        ProjIds::Variational { mu, log_sigma, slot: variational.len() - 1 }
                    } else {
                        ProjIds::Fixed(params.normal(&mut rng, base, (d, cols), std))
                    }
                };
                let wq = proj("wq", att.d_k, att.variational_qv, if att.variational_qv { INIT_STD } else { proj_std });
                let wk = proj("wk", att.d_k, true, INIT_STD);
                let wv = proj("wv", att.d_v, att.variational_qv, if att.variational_qv { INIT_STD } else { proj_std });
                heads.push(HeadIds { wq, wk, wv });
            }
            let out = Dense::register(&mut params, &mut rng, &format!("layer{l}.attn_out"), att.n_heads * att.d_v, d, proj_std, 0.0);
            let norm1 = (
                params.filled(format!("layer{l}.norm1.gamma"), ParamKind::Norm, (1, d), 1.0),
                params.filled(format!("layer{l}.norm1.beta"), ParamKind::Norm, (1, d), 0.0),
            );
            let hidden = config.ffn_mult * d;
            let ffn_in = Dense::register(&mut params, &mut rng, &format!("layer{l}.ffn_in"), d, hidden, (2.0 / d as f64).sqrt(), 0.0);
            let ffn_out = Dense::register(&mut params, &mut rng, &format!("layer{l}.ffn_out"), hidden, d, 1.0 / (hidden as f64).sqrt(), 0.0);
            let norm2 = (
                params.filled(format!("layer{l}.norm2.gamma"), ParamKind::Norm, (1, d), 1.0),
                params.filled(format!("layer{l}.norm2.beta"), ParamKind::Norm, (1, d), 0.0),
            );
            layers.push(LayerIds { heads, out, norm1, ffn_in, ffn_out, norm2 });
        }

        let proj = ProjectionHead::register(&mut params, &mut rng, d, config.d_latent);

        let mut head_rng = substream(seed, "init.head");
        let head = match config.ablation {
            Ablation::NoDeepmtr => RegressionIds::Affine(Dense::register(
                &mut params,
                &mut head_rng,
                "affine",
                config.d_latent,
                N_TARGETS,
                1.0 / (config.d_latent as f64).sqrt(),
                crate::mtr::MEAN_INIT,
            )),
            _ => RegressionIds::DeepMtr(DeepMtr::register(
                &mut params,
                &mut head_rng,
                config.d_latent,
                &config.trunk,
                config.aleatoric_head,
            )),
        };

        Ok(Model {
            config,
            params,
            layout: Layout { embed, embed_norm, layers, proj, head, variational },
            residual_var: None,
        })
    }

    pub fn variational_ids(&self) -> &[(ParamId, ParamId)] {
        &self.layout.variational
    }

    /// Number of scalars in the regression head (trunk plus target heads, or
    /// the single affine map).
    pub fn head_parameter_count(&self) -> usize {
        let count = |d: &Dense<ParamId>| self.params.get(d.weight).len() + self.params.get(d.bias).len();
        match &self.layout.head {
            RegressionIds::Affine(d) => count(d),
            RegressionIds::DeepMtr(net) => {
                net.trunk.iter().map(count).sum::<usize>()
                    + net
                        .heads
                        .iter()
                        .map(|h| count(&h.mean) + h.log_var.as_ref().map_or(0, count))
                        .sum::<usize>()
            }
        }
    }

    /// Draws fresh noise for every variational tensor.
    pub fn sample_noise(&self, rng: &mut Rng) -> Noise {
        Noise(self.layout.variational.iter().map(|&(mu, _)| standard_normal(rng, self.params.get(mu).dim())).collect())
    }

    /// Summed closed-form KL of every variational tensor against N(0, I).
    pub fn kl(&self) -> f64 {
        self.layout
            .variational
            .iter()
            .map(|&(mu, ls)| kl_terms(self.params.get(mu), self.params.get(ls)))
            .sum()
    }

    /// Adds `scale · ∂KL` to `grads`.
    pub fn kl_backward(&self, scale: f64, grads: &mut Grads) {
        for &(mu, ls) in &self.layout.variational {
            let (gm, gs) = kl_gradients(self.params.get(mu), self.params.get(ls));
            grads.get_mut(mu).scaled_add(scale, &gm);
            grads.get_mut(ls).scaled_add(scale, &gs);
        }
    }

    pub fn embed(&self, ex: &TrainingExample, pad_to: usize) -> Result<EncodedSequence> {
        embed_example_padded(ex, &self.layout.embed.resolve(&self.params), pad_to)
    }

    fn realize(&self, p: ProjIds, noise: Option<&Noise>) -> Array2<f64> {
        match p {
            ProjIds::Fixed(id) => self.params.get(id).clone(),
            ProjIds::Variational { mu, log_sigma, slot } => match noise {
                Some(n) => reparameterize(self.params.get(mu), self.params.get(log_sigma), &n.0[slot]),
                None => self.params.get(mu).clone(),
            },
        }
    }

    pub fn forward(&self, ex: &TrainingExample, draw: Draw<'_>) -> Result<Forward> {
        self.forward_padded(ex, 0, draw)
    }

    /// Forward pass over a sequence padded to at least `pad_to` rows.
    pub fn forward_padded(&self, ex: &TrainingExample, pad_to: usize, draw: Draw<'_>) -> Result<Forward> {
        let stochastic = self.config.bayesian() && self.config.attention.mode == Mode::Stochastic;
        let noise = match draw {
            Draw::Mean => None,
            _ if !stochastic => None,
            Draw::Sample(rng) => Some(self.sample_noise(rng)),
            Draw::Fixed(n) => {
                if n.0.len() != self.layout.variational.len() {
                    return Err(Error::Shape(format!(
                        "{} noise tensors for {} variational weights",
                        n.0.len(),
                        self.layout.variational.len()
                    )));
                }
                Some(n.clone())
            }
        };

        let seq = self.embed(ex, pad_to)?;
        let mask = seq.has_padding().then_some(seq.mask.as_slice());
        let p = &self.params;
        let (mut x, embed_norm) = layer_norm(seq.matrix.view(), p.get(self.layout.embed_norm.0), p.get(self.layout.embed_norm.1));
        let mut layers = Vec::with_capacity(self.layout.layers.len());
        for ids in &self.layout.layers {
            let heads: Vec<HeadMatrices> = ids
                .heads
                .iter()
                .map(|h| HeadMatrices {
                    wq: self.realize(h.wq, noise.as_ref()),
                    wk: self.realize(h.wk, noise.as_ref()),
                    wv: self.realize(h.wv, noise.as_ref()),
                })
                .collect();
            let (attended, attention) = attention_sublayer(
                &x,
                &heads,
                p.get(ids.out.weight),
                p.get(ids.out.bias),
                p.get(ids.norm1.0),
                p.get(ids.norm1.1),
                mask,
            )?;
            let ffn_pre = ids.ffn_in.resolve(p).forward(&attended);
            let ffn_hidden = relu(&ffn_pre);
            let mut residual = ids.ffn_out.resolve(p).forward(&ffn_hidden);
            residual += &attended;
            let (out, norm2) = layer_norm(residual.view(), p.get(ids.norm2.0), p.get(ids.norm2.1));
            layers.push(LayerCache { heads, attention, attended, ffn_pre, ffn_hidden, norm2 });
            x = out;
        }

        let latent = pool_and_project(&x, &self.layout.proj.resolve(p));
        let (output, head) = match &self.layout.head {
            RegressionIds::DeepMtr(net) => {
                let cache = mtr_forward_cached(&latent, &net.resolve(p));
                (cache.output, HeadCache::DeepMtr(cache))
            }
            RegressionIds::Affine(d) => {
                let input = latent.view().insert_axis(ndarray::Axis(0)).to_owned();
                let y = d.resolve(p).forward(&input);
                let mut means = [0.0; N_TARGETS];
                means.iter_mut().zip(y.row(0)).for_each(|(m, v)| *m = *v);
                let out = MtrOutput { means, log_vars: [0.0; N_TARGETS], raw_log_vars: [0.0; N_TARGETS] };
                (out, HeadCache::Affine(input))
            }
        };

        Ok(Forward { output, tokens: seq.tokens, embed_norm, layers, encoded: x, latent, head, noise })
    }

    /// Prediction only.
    pub fn predict(&self, ex: &TrainingExample, draw: Draw<'_>) -> Result<MtrOutput> {
        self.forward(ex, draw).map(|f| f.output)
    }

    /// Accumulates parameter gradients for the given output gradients. The
    /// reparameterization path contributes `∂W` to `μ` and `∂W ⊙ σ ⊙ ε` to
    /// `logσ`.
    pub fn backward(
        &self,
        fwd: &Forward,
        grad_means: &[f64; N_TARGETS],
        grad_log_vars: &[f64; N_TARGETS],
        grads: &mut Grads,
    ) {
        let p = &self.params;
        let grad_latent = match (&self.layout.head, &fwd.head) {
            (RegressionIds::DeepMtr(net), HeadCache::DeepMtr(cache)) => {
                mtr_backward(cache, grad_means, grad_log_vars, net, p, grads)
            }
            (RegressionIds::Affine(d), HeadCache::Affine(input)) => {
                let g = Array2::from_shape_vec((1, N_TARGETS), grad_means.to_vec()).expect("shape");
                d.backward(p, input, &g, grads).row(0).to_owned()
            }
            _ => unreachable!("forward cache does not match the model layout"),
        };
        let mut grad_x = pool_backward(&fwd.encoded, &grad_latent, &self.layout.proj, p, grads);

        for (ids, cache) in self.layout.layers.iter().zip(&fwd.layers).rev() {
            let mut g_gamma = Array2::zeros((1, grad_x.ncols()));
            let mut g_beta = Array2::zeros((1, grad_x.ncols()));
            let grad_res = layer_norm_backward(&grad_x, p.get(ids.norm2.0), &cache.norm2, &mut g_gamma, &mut g_beta);
            *grads.get_mut(ids.norm2.0) += &g_gamma;
            *grads.get_mut(ids.norm2.1) += &g_beta;

            let mut grad_hidden = ids.ffn_out.backward(p, &cache.ffn_hidden, &grad_res, grads);
            relu_backward(&mut grad_hidden, &cache.ffn_pre);
            let mut grad_attended = ids.ffn_in.backward(p, &cache.attended, &grad_hidden, grads);
            grad_attended += &grad_res;

            let ag = attention_sublayer_backward(
                &grad_attended,
                &cache.heads,
                p.get(ids.out.weight),
                p.get(ids.norm1.0),
                &cache.attention,
            );
            *grads.get_mut(ids.out.weight) += &ag.wo;
            *grads.get_mut(ids.out.bias) += &ag.bo;
            *grads.get_mut(ids.norm1.0) += &ag.gamma;
            *grads.get_mut(ids.norm1.1) += &ag.beta;
            for (h, hg) in ids.heads.iter().zip(&ag.heads) {
                self.projection_backward(h.wq, &hg.wq, fwd.noise.as_ref(), grads);
                self.projection_backward(h.wk, &hg.wk, fwd.noise.as_ref(), grads);
                self.projection_backward(h.wv, &hg.wv, fwd.noise.as_ref(), grads);
            }
            grad_x = ag.input;
        }
        let (gamma, beta) = self.layout.embed_norm;
        let mut g_gamma = Array2::zeros((1, grad_x.ncols()));
        let mut g_beta = Array2::zeros((1, grad_x.ncols()));
        let grad_embed = layer_norm_backward(&grad_x, p.get(gamma), &fwd.embed_norm, &mut g_gamma, &mut g_beta);
        *grads.get_mut(gamma) += &g_gamma;
        *grads.get_mut(beta) += &g_beta;
        embed_backward(&fwd.tokens, &grad_embed, &self.layout.embed, grads);
    }

    fn projection_backward(&self, p: ProjIds, grad_w: &Array2<f64>, noise: Option<&Noise>, grads: &mut Grads) {
        match p {
            ProjIds::Fixed(id) => *grads.get_mut(id) += grad_w,
            ProjIds::Variational { mu, log_sigma, slot } => {
                *grads.get_mut(mu) += grad_w;
                if let Some(n) = noise {
                    let ls = self.params.get(log_sigma);
                    let g = grads.get_mut(log_sigma);
                    ndarray::Zip::from(g).and(grad_w).and(ls).and(&n.0[slot]).for_each(|g, &gw, &l, &e| {
                        *g += gw * l.exp() * e;
                    });
                }
            }
        }
    }

    /// Overrides every log standard deviation with `value` (clamped).
    pub fn set_log_sigma(&mut self, value: f64) {
        let v = crate::attention::clamp_log_sigma(value);
        for &(_, ls) in &self.layout.variational {
            self.params.get_mut(ls).fill(v);
        }
    }

    /// Adds `offset` to every log standard deviation (clamped).
    pub fn shift_log_sigma(&mut self, offset: f64) {
        for &(_, ls) in &self.layout.variational {
            self.params.get_mut(ls).mapv_inplace(|v| crate::attention::clamp_log_sigma(v + offset));
        }
    }

    /// Re-applies the log-sigma bounds after an update.
    pub fn clamp_log_sigma(&mut self) {
        self.shift_log_sigma(0.0);
    }

    /// Mean log standard deviation over all variational entries.
    pub fn mean_log_sigma(&self) -> f64 {
        let (sum, n) = self.layout.variational.iter().fold((0.0, 0usize), |(s, n), &(_, ls)| {
            let t = self.params.get(ls);
            (s + t.sum(), n + t.len())
        });
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}
