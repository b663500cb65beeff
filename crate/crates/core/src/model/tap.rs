//! The TAP head.
//!
//! ```text
//! Xn   = LN_pool(F)                         F: N x D, row 0 = cls
//! z    = MHA(q, Xn)                         one learnable query, H heads
//! z'   = z + W2 gelu(W1 LN_mlp(z) + b1) + b2
//! gpl  = W_proj z' + b_proj
//! out  = w_cls . [f_cls ; gpl] + b_cls      single logit
//! ```
//!
//! The query attends over all N rows, `cls` included. `f_cls` in the final
//! concatenation is the raw (un-normalised) encoder token.

use serde::{Deserialize, Serialize};

use super::{normal_vec, Classifier, LayerNormParams, Linear, LinearProbe, Parameters, Tensor};
use crate::error::{Error, Result};
use crate::feature_store::TokenFeatureRecord;
use crate::linalg::{
    self, affine_backward, affine_forward, dot, gelu, gelu_grad, layer_norm_backward, layer_norm_forward,
    softmax_backward, softmax_rows, AffineCache, LnCache, Matrix, SoftmaxCache, LN_EPS,
};
use crate::rng;

pub const DEFAULT_HEADS: usize = 8;
pub const PROBE_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapConfig {
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub proj_dim: usize,
    pub seed: u64,
}

impl TapConfig {
    /// Defaults: 8 heads, hidden width 4D, projector width D.
    pub fn new(dim: usize, seed: u64) -> Self {
        TapConfig {
            dim,
            heads: DEFAULT_HEADS,
            mlp_hidden: 4 * dim,
            proj_dim: dim,
            seed,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.dim == 0 || self.heads == 0 || self.mlp_hidden == 0 || self.proj_dim == 0 {
            return bad(format!("all dimensions must be positive: {self:?}"));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return bad(format!("heads {} must divide dim {}", self.heads, self.dim));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TapParams {
    pub config: TapConfig,
    /// Learnable query, length D.
    pub probe: Vec<f64>,
    pub ln_pool: LayerNormParams,
    pub attn_q: Linear,
    pub attn_k: Linear,
    pub attn_v: Linear,
    pub attn_out: Linear,
    pub ln_mlp: LayerNormParams,
    pub fc1: Linear,
    pub fc2: Linear,
    pub proj: Linear,
    /// (D + P) x 1 over `[cls ; gpl]`.
    pub classifier: Linear,
}

pub type TapGrads = TapParams;

impl TapParams {
    /// Deterministic in `config.seed`: probe ~ N(0, 0.02^2), matrices
    /// Glorot-uniform, biases and LN beta zero, LN gamma one.
    pub fn init(config: TapConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut r = rng::seeded(config.seed);
        let probe = normal_vec(d, PROBE_INIT_STD, &mut r);
        let attn_q = Linear::glorot(d, d, &mut r);
        let attn_k = Linear::glorot(d, d, &mut r);
        let attn_v = Linear::glorot(d, d, &mut r);
        let attn_out = Linear::glorot(d, d, &mut r);
        let fc1 = Linear::glorot(d, config.mlp_hidden, &mut r);
        let fc2 = Linear::glorot(config.mlp_hidden, d, &mut r);
        let proj = Linear::glorot(d, config.proj_dim, &mut r);
        let classifier = Linear::glorot(d + config.proj_dim, 1, &mut r);
        Ok(TapParams {
            config,
            probe,
            ln_pool: LayerNormParams::identity(d),
            attn_q,
            attn_k,
            attn_v,
            attn_out,
            ln_mlp: LayerNormParams::identity(d),
            fc1,
            fc2,
            proj,
            classifier,
        })
    }

    pub fn zeros(config: TapConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        Ok(TapParams {
            config,
            probe: vec![0.0; d],
            ln_pool: LayerNormParams::zeros(d),
            attn_q: Linear::zeros(d, d),
            attn_k: Linear::zeros(d, d),
            attn_v: Linear::zeros(d, d),
            attn_out: Linear::zeros(d, d),
            ln_mlp: LayerNormParams::zeros(d),
            fc1: Linear::zeros(d, config.mlp_hidden),
            fc2: Linear::zeros(config.mlp_hidden, d),
            proj: Linear::zeros(d, config.proj_dim),
            classifier: Linear::zeros(d + config.proj_dim, 1),
        })
    }

    /// Zeroes the classifier rows that read `gpl`, leaving a `cls`-only head.
    pub fn mask_gpl(&mut self) {
        let d = self.config.dim;
        for r in d..self.classifier.weight.rows() {
            self.classifier.weight.set(r, 0, 0.0);
        }
    }

    /// The linear probe formed by the classifier's `cls` rows and bias.
    pub fn cls_probe(&self) -> LinearProbe {
        let d = self.config.dim;
        let w: Vec<f64> = (0..d).map(|r| self.classifier.weight.get(r, 0)).collect();
        LinearProbe::from_parts(w, self.classifier.bias[0])
    }
}

fn lin<'a>(name_w: &'static str, name_b: &'static str, l: &'a Linear) -> [Tensor<'a>; 2] {
    [
        Tensor {
            name: name_w,
            shape: vec![l.weight.rows(), l.weight.cols()],
            data: l.weight.data(),
        },
        Tensor {
            name: name_b,
            shape: vec![l.bias.len()],
            data: &l.bias,
        },
    ]
}

fn vec_t<'a>(name: &'static str, v: &'a [f64]) -> Tensor<'a> {
    Tensor {
        name,
        shape: vec![v.len()],
        data: v,
    }
}

impl Parameters for TapParams {
    fn tensors(&self) -> Vec<Tensor<'_>> {
        let d = self.config.dim;
        let mut out = vec![
            vec_t("probe", &self.probe),
            vec_t("ln_pool.gamma", &self.ln_pool.gamma),
            vec_t("ln_pool.beta", &self.ln_pool.beta),
        ];
        out.extend(lin("attn.q.weight", "attn.q.bias", &self.attn_q));
        out.extend(lin("attn.k.weight", "attn.k.bias", &self.attn_k));
        out.extend(lin("attn.v.weight", "attn.v.bias", &self.attn_v));
        out.extend(lin("attn.out.weight", "attn.out.bias", &self.attn_out));
        out.push(vec_t("ln_mlp.gamma", &self.ln_mlp.gamma));
        out.push(vec_t("ln_mlp.beta", &self.ln_mlp.beta));
        out.extend(lin("mlp.fc1.weight", "mlp.fc1.bias", &self.fc1));
        out.extend(lin("mlp.fc2.weight", "mlp.fc2.bias", &self.fc2));
        out.extend(lin("proj.weight", "proj.bias", &self.proj));
        out.extend(lin("classifier.weight", "classifier.bias", &self.classifier));
        debug_assert_eq!(out[0].data.len(), d);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("probe", &mut self.probe[..]),
            ("ln_pool.gamma", &mut self.ln_pool.gamma[..]),
            ("ln_pool.beta", &mut self.ln_pool.beta[..]),
            ("attn.q.weight", self.attn_q.weight.data_mut()),
            ("attn.q.bias", &mut self.attn_q.bias[..]),
            ("attn.k.weight", self.attn_k.weight.data_mut()),
            ("attn.k.bias", &mut self.attn_k.bias[..]),
            ("attn.v.weight", self.attn_v.weight.data_mut()),
            ("attn.v.bias", &mut self.attn_v.bias[..]),
            ("attn.out.weight", self.attn_out.weight.data_mut()),
            ("attn.out.bias", &mut self.attn_out.bias[..]),
            ("ln_mlp.gamma", &mut self.ln_mlp.gamma[..]),
            ("ln_mlp.beta", &mut self.ln_mlp.beta[..]),
            ("mlp.fc1.weight", self.fc1.weight.data_mut()),
            ("mlp.fc1.bias", &mut self.fc1.bias[..]),
            ("mlp.fc2.weight", self.fc2.weight.data_mut()),
            ("mlp.fc2.bias", &mut self.fc2.bias[..]),
            ("proj.weight", self.proj.weight.data_mut()),
            ("proj.bias", &mut self.proj.bias[..]),
            ("classifier.weight", self.classifier.weight.data_mut()),
            ("classifier.bias", &mut self.classifier.bias[..]),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub ln: LnCache,
    pub normed: Matrix,
    pub query: Vec<f64>,
    pub keys: AffineCache,
    pub key_proj: Matrix,
    pub value_proj: Matrix,
    /// H x N attention weights.
    pub weights: SoftmaxCache,
    /// Concatenated head outputs, length D.
    pub heads: Vec<f64>,
}

impl AttentionCache {
    pub fn weights(&self) -> &Matrix {
        &self.weights.probs
    }
}

/// Probe cross-attention over the layer-normalised token set.
pub fn attention_pool(params: &TapParams, tokens: &Matrix) -> Result<(Vec<f64>, AttentionCache)> {
    let cfg = &params.config;
    let d = cfg.dim;
    if tokens.cols() != d {
        return Err(Error::dim("attention tokens", d, tokens.cols()));
    }
    if tokens.rows() == 0 {
        return Err(Error::dim("attention token count", 1, 0));
    }
    let n = tokens.rows();
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let (normed, ln) = layer_norm_forward(tokens, &params.ln_pool.gamma, &params.ln_pool.beta, LN_EPS)?;
    let query = params.attn_q.apply(&params.probe);
    let (key_proj, keys) = affine_forward(&normed, &params.attn_k.weight, &params.attn_k.bias)?;
    let (value_proj, _) = affine_forward(&normed, &params.attn_v.weight, &params.attn_v.bias)?;

    let mut scores = Matrix::zeros(cfg.heads, n);
    for h in 0..cfg.heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = &query[cols.clone()];
        for i in 0..n {
            scores.set(h, i, scale * dot(qh, &key_proj.row(i)[cols.clone()]));
        }
    }
    let (weights, weights_cache) = softmax_rows(&scores).map_err(|_| Error::NonFiniteIntermediate {
        stage: "attention scores",
    })?;

    let mut heads = vec![0.0; d];
    for h in 0..cfg.heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            linalg::axpy(
                weights.get(h, i),
                &value_proj.row(i)[cols.clone()],
                &mut heads[cols.clone()],
            );
        }
    }
    let z = params.attn_out.apply(&heads);
    if !z.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteIntermediate {
            stage: "attention pool",
        });
    }
    Ok((
        z,
        AttentionCache {
            ln,
            normed,
            query,
            keys,
            key_proj,
            value_proj,
            weights: weights_cache,
            heads,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    pub ln: LnCache,
    pub normed: Vec<f64>,
    pub pre_act: Vec<f64>,
    pub act: Vec<f64>,
}

/// `z + W2 gelu(W1 LN(z) + b1) + b2`.
pub fn residual_mlp(params: &TapParams, z: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
    let d = params.config.dim;
    if z.len() != d {
        return Err(Error::dim("residual mlp input", d, z.len()));
    }
    let (normed, ln) = layer_norm_forward(
        &Matrix::row_vector(z),
        &params.ln_mlp.gamma,
        &params.ln_mlp.beta,
        LN_EPS,
    )?;
    let normed = normed.into_vec();
    let pre_act = params.fc1.apply(&normed);
    let act: Vec<f64> = pre_act.iter().map(|&x| gelu(x)).collect();
    let mut out = params.fc2.apply(&act);
    linalg::axpy(1.0, z, &mut out);
    if !out.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteIntermediate { stage: "residual mlp" });
    }
    Ok((
        out,
        MlpCache {
            ln,
            normed,
            pre_act,
            act,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub n_tokens: usize,
    pub dim: usize,
    pub attention: AttentionCache,
    pub z: Vec<f64>,
    pub mlp: MlpCache,
    pub z_prime: Vec<f64>,
    pub gpl: Vec<f64>,
    /// `[cls ; gpl]`.
    pub features: Vec<f64>,
}

fn forward_matrix(params: &TapParams, tokens: &Matrix) -> Result<(f64, ForwardCache)> {
    let d = params.config.dim;
    if tokens.cols() != d {
        return Err(Error::dim("record embedding width", d, tokens.cols()));
    }
    if !tokens.is_finite() {
        return Err(Error::NonFiniteIntermediate { stage: "input tokens" });
    }
    let (z, attention) = attention_pool(params, tokens)?;
    let (z_prime, mlp) = residual_mlp(params, &z)?;
    let gpl = params.proj.apply(&z_prime);
    if !gpl.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteIntermediate { stage: "projector" });
    }
    let mut features = tokens.row(0).to_vec();
    features.extend_from_slice(&gpl);
    let logit = params.classifier.apply(&features)[0];
    if !logit.is_finite() {
        return Err(Error::NonFiniteIntermediate { stage: "classifier" });
    }
    Ok((
        logit,
        ForwardCache {
            n_tokens: tokens.rows(),
            dim: d,
            attention,
            z,
            mlp,
            z_prime,
            gpl,
            features,
        },
    ))
}

pub fn tap_forward(params: &TapParams, record: &TokenFeatureRecord) -> Result<(f64, ForwardCache)> {
    if record.dim() != params.config.dim {
        return Err(Error::dim("record embedding width", params.config.dim, record.dim()));
    }
    forward_matrix(params, &record.to_matrix())
}

fn check_cache(params: &TapParams, cache: &ForwardCache) -> Result<()> {
    let cfg = &params.config;
    let w = cache.attention.weights();
    if cache.dim != cfg.dim
        || w.rows() != cfg.heads
        || w.cols() != cache.n_tokens
        || cache.mlp.pre_act.len() != cfg.mlp_hidden
        || cache.gpl.len() != cfg.proj_dim
    {
        return Err(Error::StaleCache(format!(
            "cache (dim {}, {} heads, {} tokens) does not match config {cfg:?}",
            cache.dim,
            w.rows(),
            cache.n_tokens
        )));
    }
    Ok(())
}

/// Accumulates parameter gradients into `grads`; returns dLoss/dTokens.
fn backward_into(params: &TapParams, cache: &ForwardCache, dlogit: f64, grads: &mut TapParams) -> Result<Matrix> {
    check_cache(params, cache)?;
    let cfg = &params.config;
    let d = cfg.dim;
    let dh = cfg.head_dim();
    let n = cache.n_tokens;
    let scale = 1.0 / (dh as f64).sqrt();

    let dfeatures = params
        .classifier
        .backward_vec(&cache.features, &[dlogit], &mut grads.classifier);
    let (dcls, dgpl) = dfeatures.split_at(d);

    let dz_prime = params.proj.backward_vec(&cache.z_prime, dgpl, &mut grads.proj);

    // Residual MLP.
    let mut dz = dz_prime.clone();
    let dact = params.fc2.backward_vec(&cache.mlp.act, &dz_prime, &mut grads.fc2);
    let dpre: Vec<f64> = dact
        .iter()
        .zip(&cache.mlp.pre_act)
        .map(|(g, &x)| g * gelu_grad(x))
        .collect();
    let dnormed = params.fc1.backward_vec(&cache.mlp.normed, &dpre, &mut grads.fc1);
    let ln = layer_norm_backward(&Matrix::row_vector(&dnormed), &params.ln_mlp.gamma, &cache.mlp.ln)?;
    linalg::axpy(1.0, ln.dx.data(), &mut dz);
    linalg::axpy(1.0, &ln.dgamma, &mut grads.ln_mlp.gamma);
    linalg::axpy(1.0, &ln.dbeta, &mut grads.ln_mlp.beta);

    // Attention.
    let att = &cache.attention;
    let dheads = params.attn_out.backward_vec(&att.heads, &dz, &mut grads.attn_out);
    let weights = att.weights();
    let mut dweights = Matrix::zeros(cfg.heads, n);
    let mut dvalue = Matrix::zeros(n, d);
    for h in 0..cfg.heads {
        let cols = h * dh..(h + 1) * dh;
        let dout = &dheads[cols.clone()];
        for i in 0..n {
            dweights.set(h, i, dot(dout, &att.value_proj.row(i)[cols.clone()]));
            linalg::axpy(weights.get(h, i), dout, &mut dvalue.row_mut(i)[cols.clone()]);
        }
    }
    let dscores = softmax_backward(&dweights, &att.weights)?;
    let mut dquery = vec![0.0; d];
    let mut dkey = Matrix::zeros(n, d);
    for h in 0..cfg.heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = &att.query[cols.clone()];
        for i in 0..n {
            let g = scale * dscores.get(h, i);
            linalg::axpy(g, &att.key_proj.row(i)[cols.clone()], &mut dquery[cols.clone()]);
            linalg::axpy(g, qh, &mut dkey.row_mut(i)[cols.clone()]);
        }
    }
    let dprobe = params.attn_q.backward_vec(&params.probe, &dquery, &mut grads.attn_q);
    linalg::axpy(1.0, &dprobe, &mut grads.probe);

    let kg = affine_backward(&dkey, &params.attn_k.weight, &att.keys)?;
    let vg = affine_backward(&dvalue, &params.attn_v.weight, &att.keys)?;
    grads.attn_k.weight.add_assign(&kg.dw);
    linalg::axpy(1.0, &kg.db, &mut grads.attn_k.bias);
    grads.attn_v.weight.add_assign(&vg.dw);
    linalg::axpy(1.0, &vg.db, &mut grads.attn_v.bias);

    let mut dnormed_tokens = kg.dx;
    dnormed_tokens.add_assign(&vg.dx);
    let lp = layer_norm_backward(&dnormed_tokens, &params.ln_pool.gamma, &att.ln)?;
    linalg::axpy(1.0, &lp.dgamma, &mut grads.ln_pool.gamma);
    linalg::axpy(1.0, &lp.dbeta, &mut grads.ln_pool.beta);

    let mut dtokens = lp.dx;
    linalg::axpy(1.0, dcls, dtokens.row_mut(0));
    Ok(dtokens)
}

/// Gradient of `dlogit * logit` with respect to every parameter.
pub fn tap_backward(params: &TapParams, cache: &ForwardCache, dlogit: f64) -> Result<TapGrads> {
    let mut grads = TapParams::zeros(params.config)?;
    backward_into(params, cache, dlogit, &mut grads)?;
    Ok(grads)
}

/// As [`tap_backward`], also returning the gradient with respect to the tokens.
pub fn tap_backward_with_input(params: &TapParams, cache: &ForwardCache, dlogit: f64) -> Result<(TapGrads, Matrix)> {
    let mut grads = TapParams::zeros(params.config)?;
    let dtokens = backward_into(params, cache, dlogit, &mut grads)?;
    Ok((grads, dtokens))
}

impl Classifier for TapParams {
    type Cache = ForwardCache;

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn forward(&self, tokens: &Matrix) -> Result<(f64, ForwardCache)> {
        forward_matrix(self, tokens)
    }

    fn accumulate_grad(&self, cache: &ForwardCache, dlogit: f64, grads: &mut Self) -> Result<()> {
        backward_into(self, cache, dlogit, grads).map(drop)
    }

    fn zeros_like(&self) -> Self {
        TapParams::zeros(self.config).expect("config validated at construction")
    }
}
