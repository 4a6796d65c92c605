//! A small pre-norm transformer encoder classifier with manual backprop.
//!
//! Each layer computes `X + MHSA(LN(X))` followed by `· + FFN(LN(·))`, where
//! MHSA runs [`sparse_attention_forward`] with the layer's target sparsity.
//! Token and learned position embeddings feed the stack; the output is
//! mean-pooled over valid positions and projected to class logits.
//!
//! Activations are kept as `(batch · n, d)` row matrices; attention works
//! on `(batch, head, n, d_k)` views of them.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView3, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    sparse_attention_backward, sparse_attention_forward, AttentionOutput, SelectionPool, ValidityMask,
};
use crate::data::{Batch, Example};
use crate::metrics::{AttentionStats, StatsAccumulator};
use crate::schedule::{batch_threshold_mode, build_schedule, SparsityConfig};
use crate::{Error, Exec, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults: 2 layers, 2 heads, width 32.
    pub fn desk(vocab_size: usize, seed: u64) -> Self {
        Self {
            layers: 2,
            heads: 2,
            d_model: 32,
            d_ff: 64,
            vocab_size,
            max_len: 64,
            num_classes: 2,
            seed,
        }
    }

    /// DistilBERT-sized shape (6 layers, 12 heads, width 768).
    pub fn distilbert(vocab_size: usize, seed: u64) -> Self {
        Self {
            layers: 6,
            heads: 12,
            d_model: 768,
            d_ff: 3072,
            vocab_size,
            max_len: 512,
            num_classes: 2,
            seed,
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    /// Closed-form number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let (d, f) = (self.d_model, self.d_ff);
        let per_layer = 4 * (d * d + d) + 4 * d + (d * f + f) + (f * d + d);
        self.vocab_size * d + self.max_len * d + self.layers * per_layer + d * self.num_classes + self.num_classes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Parameter group used when reporting gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamClass {
    Embedding,
    Projection,
    LayerNorm,
    FeedForward,
    Classifier,
}

/// A borrowed parameter tensor with its name and shape.
#[derive(Debug)]
pub struct NamedTensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub class: ParamClass,
    pub data: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub token_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub cls_w: Array2<f64>,
    pub cls_b: Array1<f64>,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..=bound))
}

macro_rules! layer_fields {
    ($m:ident) => {
        $m!(
            ln1_gain LayerNorm, ln1_bias LayerNorm,
            wq Projection, bq Projection, wk Projection, bk Projection,
            wv Projection, bv Projection, wo Projection, bo Projection,
            ln2_gain LayerNorm, ln2_bias LayerNorm,
            w1 FeedForward, b1 FeedForward, w2 FeedForward, b2 FeedForward
        )
    };
}

impl ModelParams {
    /// Xavier-uniform weights, zero biases, unit layer-norm gains.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, f) = (config.d_model, config.d_ff);
        let token_emb = xavier(&mut rng, config.vocab_size, d);
        let pos_emb = xavier(&mut rng, config.max_len, d);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                ln1_gain: Array1::ones(d),
                ln1_bias: Array1::zeros(d),
                wq: xavier(&mut rng, d, d),
                bq: Array1::zeros(d),
                wk: xavier(&mut rng, d, d),
                bk: Array1::zeros(d),
                wv: xavier(&mut rng, d, d),
                bv: Array1::zeros(d),
                wo: xavier(&mut rng, d, d),
                bo: Array1::zeros(d),
                ln2_gain: Array1::ones(d),
                ln2_bias: Array1::zeros(d),
                w1: xavier(&mut rng, d, f),
                b1: Array1::zeros(f),
                w2: xavier(&mut rng, f, d),
                b2: Array1::zeros(d),
            })
            .collect();
        let cls_w = xavier(&mut rng, d, config.num_classes);
        Ok(Self {
            config,
            token_emb,
            pos_emb,
            layers,
            cls_w,
            cls_b: Array1::zeros(config.num_classes),
        })
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        z
    }

    /// Every tensor in a fixed order (the checkpoint order).
    pub fn tensors(&self) -> Vec<NamedTensor<'_>> {
        fn t<'a, D: ndarray::Dimension>(
            name: String,
            class: ParamClass,
            a: &'a ndarray::Array<f64, D>,
        ) -> NamedTensor<'a> {
            NamedTensor {
                name,
                shape: a.shape().to_vec(),
                class,
                data: a.as_slice().expect("parameters are contiguous"),
            }
        }
        let mut out = vec![
            t("token_emb".into(), ParamClass::Embedding, &self.token_emb),
            t("pos_emb".into(), ParamClass::Embedding, &self.pos_emb),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            macro_rules! push {
                ($($f:ident $c:ident),*) => {
                    $(out.push(t(format!("layer{l}.{}", stringify!($f)), ParamClass::$c, &layer.$f));)*
                };
            }
            layer_fields!(push);
        }
        out.push(t("cls_w".into(), ParamClass::Classifier, &self.cls_w));
        out.push(t("cls_b".into(), ParamClass::Classifier, &self.cls_b));
        out
    }

    /// Mutable slices in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        fn m<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
            a.as_slice_mut().expect("parameters are contiguous")
        }
        let mut out = vec![m(&mut self.token_emb), m(&mut self.pos_emb)];
        for layer in &mut self.layers {
            macro_rules! push {
                ($($f:ident $c:ident),*) => {
                    $(out.push(m(&mut layer.$f));)*
                };
            }
            layer_fields!(push);
        }
        out.push(m(&mut self.cls_w));
        out.push(m(&mut self.cls_b));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

/// Per-layer sparsity ratios and selection pools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityPlan {
    pub per_layer: Vec<f64>,
    pub pools: Vec<SelectionPool>,
}

impl SparsityPlan {
    pub fn dense(layers: usize) -> Self {
        Self {
            per_layer: vec![0.0; layers],
            pools: vec![SelectionPool::PerHead; layers],
        }
    }

    pub fn from_config(config: &SparsityConfig) -> Result<Self> {
        Ok(Self {
            per_layer: build_schedule(config)?.per_layer,
            pools: batch_threshold_mode(config),
        })
    }

    pub fn len(&self) -> usize {
        self.per_layer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_layer.is_empty()
    }
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *inv = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| v * *inv);
    }
    let y = &xhat * gain + bias;
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    gain: &Array1<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let dgain = (dy * &cache.xhat).sum_axis(Axis(0));
    let dbias = dy.sum_axis(Axis(0));
    let dxhat = dy * gain;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.dim());
    Zip::from(dx.rows_mut())
        .and(dxhat.rows())
        .and(cache.xhat.rows())
        .and(&cache.inv_std)
        .for_each(|mut out, g, xh, &inv| {
            let sum_g = g.sum();
            let sum_gx = g.dot(&xh);
            Zip::from(&mut out).and(&g).and(&xh).for_each(|o, &gi, &xi| {
                *o = inv / d * (d * gi - sum_g - xi * sum_gx);
            });
        });
    (dx, dgain, dbias)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn linear(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    x.dot(w) + b
}

fn split_heads(x: &Array2<f64>, batch: usize, n: usize, heads: usize) -> Array4<f64> {
    let d_k = x.ncols() / heads;
    x.view()
        .into_shape_with_order((batch, n, heads, d_k))
        .expect("rows are batch * n")
        .permuted_axes([0, 2, 1, 3])
        .as_standard_layout()
        .into_owned()
}

fn merge_heads(x: &Array4<f64>) -> Array2<f64> {
    let (batch, heads, n, d_k) = x.dim();
    x.view()
        .permuted_axes([0, 2, 1, 3])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((batch * n, heads * d_k))
        .expect("contiguous")
}

struct LayerCache {
    ln1: LnCache,
    h1: Array2<f64>,
    q: Array4<f64>,
    k: Array4<f64>,
    v: Array4<f64>,
    concat: Array2<f64>,
    ln2: LnCache,
    h2: Array2<f64>,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
}

#[allow(clippy::too_many_arguments)]
fn layer_forward(
    x: &Array2<f64>,
    p: &LayerParams,
    heads: usize,
    batch: usize,
    n: usize,
    sparsity: f64,
    pool: SelectionPool,
    valid: &ValidityMask,
    exec: Exec,
) -> Result<(Array2<f64>, AttentionOutput, LayerCache)> {
    let (h1, ln1) = layer_norm(x, &p.ln1_gain, &p.ln1_bias);
    let q = split_heads(&linear(&h1, &p.wq, &p.bq), batch, n, heads);
    let k = split_heads(&linear(&h1, &p.wk, &p.bk), batch, n, heads);
    let v = split_heads(&linear(&h1, &p.wv, &p.bv), batch, n, heads);
    let attn = sparse_attention_forward(q.view(), k.view(), v.view(), sparsity, valid, pool, exec)?;
    let concat = merge_heads(&attn.context);
    let x_mid = x + &linear(&concat, &p.wo, &p.bo);

    let (h2, ln2) = layer_norm(&x_mid, &p.ln2_gain, &p.ln2_bias);
    let ff_pre = linear(&h2, &p.w1, &p.b1);
    let ff_act = ff_pre.mapv(gelu);
    let out = &x_mid + &linear(&ff_act, &p.w2, &p.b2);
    let cache = LayerCache {
        ln1,
        h1,
        q,
        k,
        v,
        concat,
        ln2,
        h2,
        ff_pre,
        ff_act,
    };
    Ok((out, attn, cache))
}

/// Gradient of a linear map: `(dX, dW, db)`.
fn linear_backward(x: &Array2<f64>, w: &Array2<f64>, dy: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    (dy.dot(&w.t()), x.t().dot(dy), dy.sum_axis(Axis(0)))
}

fn layer_backward(
    d_out: &Array2<f64>,
    p: &LayerParams,
    cache: &LayerCache,
    attn: &AttentionOutput,
    grads: &mut LayerParams,
    exec: Exec,
) -> Result<Array2<f64>> {
    let heads = cache.q.dim().1;
    let (batch, n) = (cache.q.dim().0, cache.q.dim().2);

    let (d_act, dw2, db2) = linear_backward(&cache.ff_act, &p.w2, d_out);
    let d_pre = d_act * &cache.ff_pre.mapv(gelu_grad);
    let (d_h2, dw1, db1) = linear_backward(&cache.h2, &p.w1, &d_pre);
    let (d_ln2, dg2, dbias2) = layer_norm_backward(&d_h2, &cache.ln2, &p.ln2_gain);
    let d_mid = d_out + &d_ln2;

    let (d_concat, dwo, dbo) = linear_backward(&cache.concat, &p.wo, &d_mid);
    let d_context = split_heads(&d_concat, batch, n, heads);
    let g = sparse_attention_backward(
        d_context.view(),
        cache.q.view(),
        cache.k.view(),
        cache.v.view(),
        attn,
        exec,
    )?;
    let (dq, dk, dv) = (merge_heads(&g.q), merge_heads(&g.k), merge_heads(&g.v));
    let (dh_q, dwq, dbq) = linear_backward(&cache.h1, &p.wq, &dq);
    let (dh_k, dwk, dbk) = linear_backward(&cache.h1, &p.wk, &dk);
    let (dh_v, dwv, dbv) = linear_backward(&cache.h1, &p.wv, &dv);
    let d_h1 = dh_q + &dh_k + &dh_v;
    let (d_ln1, dg1, dbias1) = layer_norm_backward(&d_h1, &cache.ln1, &p.ln1_gain);

    *grads = LayerParams {
        ln1_gain: dg1,
        ln1_bias: dbias1,
        wq: dwq,
        bq: dbq,
        wk: dwk,
        bk: dbk,
        wv: dwv,
        bv: dbv,
        wo: dwo,
        bo: dbo,
        ln2_gain: dg2,
        ln2_bias: dbias2,
        w1: dw1,
        b1: db1,
        w2: dw2,
        b2: db2,
    };
    Ok(d_mid + &d_ln1)
}

/// One encoder layer on `(batch, n, d)` input. Returns the layer output and
/// its attention.
#[allow(clippy::too_many_arguments)]
pub fn encoder_layer_forward(
    x: ArrayView3<f64>,
    layer: &LayerParams,
    heads: usize,
    sparsity: f64,
    pool: SelectionPool,
    valid: &ValidityMask,
    exec: Exec,
) -> Result<(Array3<f64>, AttentionOutput)> {
    let (batch, n, d) = x.dim();
    if d % heads != 0 || layer.wq.dim() != (d, d) {
        return Err(Error::Dimension(format!(
            "input width {d} does not fit layer of width {} with {heads} heads",
            layer.wq.nrows()
        )));
    }
    let rows = x
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((batch * n, d))
        .expect("contiguous");
    let (out, attn, _) = layer_forward(&rows, layer, heads, batch, n, sparsity, pool, valid, exec)?;
    Ok((out.into_shape_with_order((batch, n, d)).expect("contiguous"), attn))
}

/// Whether [`model_forward`] keeps what [`backward`] needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Train,
    Inference,
}

struct ForwardCache {
    tokens: ndarray::Array2<u32>,
    layers: Vec<LayerCache>,
    final_x: Array2<f64>,
    pooled: Array2<f64>,
}

/// Result of [`model_forward`].
pub struct ForwardOutput {
    /// `(batch, num_classes)`.
    pub logits: Array2<f64>,
    /// One entry per layer.
    pub attention: Vec<AttentionOutput>,
    pub valid: ValidityMask,
    cache: Option<ForwardCache>,
}

/// Embeddings → encoder layers → mean pool over valid tokens → classifier.
pub fn model_forward(
    params: &ModelParams,
    batch: &Batch,
    plan: &SparsityPlan,
    mode: ForwardMode,
    exec: Exec,
) -> Result<ForwardOutput> {
    let cfg = &params.config;
    let (b, n) = batch.tokens.dim();
    if plan.len() != cfg.layers || plan.pools.len() != cfg.layers {
        return Err(Error::Config(format!(
            "sparsity plan has {} layers, model has {}",
            plan.len(),
            cfg.layers
        )));
    }
    if n > cfg.max_len {
        return Err(Error::Data(format!("batch length {n} exceeds max_len {}", cfg.max_len)));
    }
    if batch.valid.as_array().dim() != (b, n) {
        return Err(Error::Dimension("validity mask does not match tokens".into()));
    }
    if let Some(bad) = batch.tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Data(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }

    let d = cfg.d_model;
    let mut x = Array2::zeros((b * n, d));
    for ((bi, i), &tok) in batch.tokens.indexed_iter() {
        let row = &params.token_emb.row(tok as usize) + &params.pos_emb.row(i);
        x.row_mut(bi * n + i).assign(&row);
    }

    let mut attention = Vec::with_capacity(cfg.layers);
    let mut caches = Vec::with_capacity(cfg.layers);
    for (l, layer) in params.layers.iter().enumerate() {
        let (out, attn, cache) = layer_forward(
            &x,
            layer,
            cfg.heads,
            b,
            n,
            plan.per_layer[l],
            plan.pools[l],
            &batch.valid,
            exec,
        )?;
        x = out;
        attention.push(attn);
        if mode == ForwardMode::Train {
            caches.push(cache);
        }
    }

    let pooled = mean_pool(&x, &batch.valid, b, n);
    let logits = linear(&pooled, &params.cls_w, &params.cls_b);
    let cache = (mode == ForwardMode::Train).then(|| ForwardCache {
        tokens: batch.tokens.clone(),
        layers: caches,
        final_x: x,
        pooled,
    });
    Ok(ForwardOutput {
        logits,
        attention,
        valid: batch.valid.clone(),
        cache,
    })
}

fn mean_pool(x: &Array2<f64>, valid: &ValidityMask, batch: usize, n: usize) -> Array2<f64> {
    let mut pooled = Array2::zeros((batch, x.ncols()));
    for b in 0..batch {
        let count = valid.count(b) as f64;
        let mut acc = pooled.row_mut(b);
        for i in (0..n).filter(|&i| valid.is_valid(b, i)) {
            acc += &x.row(b * n + i);
        }
        acc.mapv_inplace(|v| v / count);
    }
    pooled
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy_loss(logits: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (batch, classes) = logits.dim();
    if labels.len() != batch || batch == 0 {
        return Err(Error::Dimension(format!(
            "{} labels for {batch} logit rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
    }
    let mut grad = Array2::zeros((batch, classes));
    let mut loss = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        let row = logits.row(b);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[y];
        for c in 0..classes {
            let p = (row[c] - log_z).exp();
            grad[[b, c]] = (p - if c == y { 1.0 } else { 0.0 }) / batch as f64;
        }
    }
    Ok((loss / batch as f64, grad))
}

/// Reverse pass of [`model_forward`] given `∂loss/∂logits`.
pub fn backward(
    params: &ModelParams,
    forward: &ForwardOutput,
    grad_logits: &Array2<f64>,
    exec: Exec,
) -> Result<ModelParams> {
    let cache = forward
        .cache
        .as_ref()
        .ok_or_else(|| Error::State("backward needs a forward pass run in training mode".into()))?;
    if grad_logits.dim() != forward.logits.dim() {
        return Err(Error::Dimension(format!(
            "logit gradient {:?} does not match logits {:?}",
            grad_logits.dim(),
            forward.logits.dim()
        )));
    }
    let cfg = &params.config;
    let (b, n) = cache.tokens.dim();
    let (final_x, pooled) = (&cache.final_x, &cache.pooled);

    let mut grads = params.zeros_like();
    let (d_pooled, dcls_w, dcls_b) = linear_backward(pooled, &params.cls_w, grad_logits);
    grads.cls_w = dcls_w;
    grads.cls_b = dcls_b;

    let mut dx = Array2::zeros(final_x.dim());
    for bi in 0..b {
        let count = forward.valid.count(bi) as f64;
        let g = d_pooled.row(bi).mapv(|v| v / count);
        for i in (0..n).filter(|&i| forward.valid.is_valid(bi, i)) {
            dx.row_mut(bi * n + i).assign(&g);
        }
    }

    for l in (0..cfg.layers).rev() {
        dx = layer_backward(
            &dx,
            &params.layers[l],
            &cache.layers[l],
            &forward.attention[l],
            &mut grads.layers[l],
            exec,
        )?;
    }

    for ((bi, i), &tok) in cache.tokens.indexed_iter() {
        let row = dx.row(bi * n + i);
        let mut t = grads.token_emb.row_mut(tok as usize);
        t += &row;
        let mut p = grads.pos_emb.row_mut(i);
        p += &row;
    }
    Ok(grads)
}

/// Decoupled-weight-decay Adam with optional gradient accumulation.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub accum_steps: usize,
    step: usize,
    m: ModelParams,
    v: ModelParams,
    pending: Option<ModelParams>,
    micro: usize,
}

impl AdamW {
    pub fn new(params: &ModelParams, lr: f64, weight_decay: f64, accum_steps: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            accum_steps: accum_steps.max(1),
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
            pending: None,
            micro: 0,
        }
    }

    /// Optimizer updates applied so far.
    pub fn steps(&self) -> usize {
        self.step
    }

    /// Applies one update with `grads`.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::Training {
                step: self.step + 1,
                msg: "non-finite gradient".into(),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, wd, eps) = (self.beta1, self.beta2, self.lr, self.weight_decay, self.eps);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for (((p, g), m), v) in tensors {
            for (((p, &g), m), v) in p.iter_mut().zip(g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * wd * *p;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Adds a micro-batch gradient; every `accum_steps` calls the averaged
    /// gradient is applied. Returns whether an update happened.
    pub fn accumulate(&mut self, params: &mut ModelParams, grads: &ModelParams) -> Result<bool> {
        if self.accum_steps == 1 {
            self.step(params, grads)?;
            return Ok(true);
        }
        match &mut self.pending {
            None => self.pending = Some(grads.clone()),
            Some(acc) => {
                for (a, g) in acc.tensors_mut().into_iter().zip(grads.tensors()) {
                    a.iter_mut().zip(g.data).for_each(|(a, g)| *a += g);
                }
            }
        }
        self.micro += 1;
        if self.micro < self.accum_steps {
            return Ok(false);
        }
        let mut avg = self.pending.take().expect("accumulated above");
        let scale = 1.0 / self.accum_steps as f64;
        avg.tensors_mut()
            .into_iter()
            .for_each(|t| t.iter_mut().for_each(|v| *v *= scale));
        self.micro = 0;
        self.step(params, &avg)?;
        Ok(true)
    }
}

/// Loss, accuracy and attention statistics over a set of examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
    pub examples: usize,
    pub stats: AttentionStats,
}

struct BatchEval {
    loss_sum: f64,
    correct: usize,
    stats: StatsAccumulator,
}

/// Evaluates in consecutive batches of `batch_size`. Batches run through
/// `exec`; per-batch results are combined in batch order.
pub fn evaluate(
    params: &ModelParams,
    examples: &[Example],
    plan: &SparsityPlan,
    batch_size: usize,
    exec: Exec,
) -> Result<EvalResult> {
    if examples.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let chunks: Vec<&[Example]> = examples.chunks(batch_size.max(1)).collect();
    let cfg = &params.config;
    let per_batch = exec.try_map(chunks.len(), |c| {
        let refs: Vec<&Example> = chunks[c].iter().collect();
        let batch = Batch::new(&refs, None)?;
        let out = model_forward(params, &batch, plan, ForwardMode::Inference, exec)?;
        let (loss, _) = cross_entropy_loss(&out.logits, &batch.labels)?;
        let correct = out
            .logits
            .rows()
            .into_iter()
            .zip(&batch.labels)
            .filter(|(row, &y)| argmax(row.iter().copied()) == y)
            .count();
        let mut stats = StatsAccumulator::new(cfg.layers, cfg.heads);
        for (l, attn) in out.attention.iter().enumerate() {
            stats.add_layer(l, attn, &batch.valid)?;
        }
        Ok::<_, Error>(BatchEval {
            loss_sum: loss * batch.len() as f64,
            correct,
            stats,
        })
    })?;

    let mut stats = StatsAccumulator::new(cfg.layers, cfg.heads);
    let (mut loss_sum, mut correct) = (0.0, 0);
    for r in &per_batch {
        loss_sum += r.loss_sum;
        correct += r.correct;
        stats.merge(&r.stats);
    }
    Ok(EvalResult {
        loss: loss_sum / examples.len() as f64,
        accuracy: correct as f64 / examples.len() as f64,
        examples: examples.len(),
        stats: stats.finish()?,
    })
}

fn argmax(xs: impl Iterator<Item = f64>) -> usize {
    xs.enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, x)| if x > best.1 { (i, x) } else { best },
        )
        .0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub accum_steps: usize,
    /// Evaluate every this many optimizer steps (and at every epoch end).
    pub eval_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale defaults for training from scratch.
    pub fn desk(epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size: 32,
            lr: 3e-3,
            weight_decay: 0.01,
            accum_steps: 1,
            eval_every: 50,
            seed,
        }
    }

    /// Fine-tuning hyperparameters (lr 2e-5, batch 16, 4 accumulation steps).
    pub fn fine_tune(epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size: 16,
            lr: 2e-5,
            weight_decay: 0.01,
            accum_steps: 4,
            eval_every: 50,
            seed,
        }
    }
}

/// One evaluation snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub epoch: usize,
    /// Mean training loss since the previous record (over the full training
    /// set for the initial record).
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub per_layer_sparsity: Vec<f64>,
    pub mean_sparsity: f64,
    pub mean_entropy: f64,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub records: Vec<TrainRecord>,
    /// Validation evaluation of the final parameters.
    pub final_eval: EvalResult,
}

fn record(step: usize, epoch: usize, train_loss: f64, eval: &EvalResult) -> TrainRecord {
    TrainRecord {
        step,
        epoch,
        train_loss,
        val_loss: eval.loss,
        val_accuracy: eval.accuracy,
        per_layer_sparsity: eval.stats.per_layer_sparsity.clone(),
        mean_sparsity: eval.stats.mean_sparsity,
        mean_entropy: eval.stats.mean_entropy,
    }
}

/// Trains `params` on `train` and reports on `validation`. Deterministic for
/// a fixed seed; `on_record` sees each record as it is produced.
pub fn train(
    mut params: ModelParams,
    plan: &SparsityPlan,
    train: &[Example],
    validation: &[Example],
    cfg: &TrainConfig,
    exec: Exec,
    mut on_record: impl FnMut(&TrainRecord),
) -> Result<TrainOutcome> {
    if train.is_empty() || validation.is_empty() {
        return Err(Error::Data("training needs non-empty train and validation sets".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(&params, cfg.lr, cfg.weight_decay, cfg.accum_steps);
    let mut records = Vec::new();
    let mut emit = |r: TrainRecord, records: &mut Vec<TrainRecord>| {
        on_record(&r);
        records.push(r);
    };

    let initial_train = evaluate(&params, train, plan, cfg.batch_size, exec)?;
    let mut eval = evaluate(&params, validation, plan, cfg.batch_size, exec)?;
    emit(record(0, 0, initial_train.loss, &eval), &mut records);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);
    for epoch in 1..=cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let refs: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = Batch::new(&refs, None)?;
            let out = model_forward(&params, &batch, plan, ForwardMode::Train, exec)?;
            let (loss, grad_logits) = cross_entropy_loss(&out.logits, &batch.labels)?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    step: opt.steps() + 1,
                    msg: format!("loss is {loss}"),
                });
            }
            loss_sum += loss;
            loss_count += 1;
            let grads = backward(&params, &out, &grad_logits, exec)?;
            if opt.accumulate(&mut params, &grads)? && opt.steps().is_multiple_of(cfg.eval_every.max(1)) {
                eval = evaluate(&params, validation, plan, cfg.batch_size, exec)?;
                emit(
                    record(opt.steps(), epoch, loss_sum / loss_count as f64, &eval),
                    &mut records,
                );
                (loss_sum, loss_count) = (0.0, 0);
            }
        }
        if loss_count > 0 {
            eval = evaluate(&params, validation, plan, cfg.batch_size, exec)?;
            emit(
                record(opt.steps(), epoch, loss_sum / loss_count as f64, &eval),
                &mut records,
            );
            (loss_sum, loss_count) = (0.0, 0);
        }
    }
    Ok(TrainOutcome {
        params,
        records,
        final_eval: eval,
    })
}
