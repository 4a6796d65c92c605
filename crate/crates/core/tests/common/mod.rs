//! Independent oracles shared by the integration tests. Nothing here calls
//! into the attention or model code paths it is used to check.

#![allow(dead_code)]

use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparseattn::attention::{SelectionPool, ValidityMask};
use sparseattn::data::{Batch, Example};
use sparseattn::model::{ModelConfig, ModelParams};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random4(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
    Array4::from_shape_simple_fn(shape, || rng.gen_range(-1.0..1.0))
}

/// `softmax(Q Kᵀ / √d_k) V` with plain loops; padded keys excluded, padded
/// query rows zero.
pub fn dense_attention(
    q: &Array4<f64>,
    k: &Array4<f64>,
    v: &Array4<f64>,
    valid: &ValidityMask,
) -> (Array4<f64>, Array4<f64>) {
    let (batch, heads, n, d_k) = q.dim();
    let mut weights = Array4::zeros((batch, heads, n, n));
    let mut context = Array4::zeros((batch, heads, n, d_k));
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..n {
                if !valid.is_valid(b, i) {
                    continue;
                }
                let mut logits = vec![f64::NEG_INFINITY; n];
                for j in 0..n {
                    if valid.is_valid(b, j) {
                        let mut dot = 0.0;
                        for c in 0..d_k {
                            dot += q[[b, h, i, c]] * k[[b, h, j, c]];
                        }
                        logits[j] = dot / (d_k as f64).sqrt();
                    }
                }
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits
                    .iter()
                    .map(|&l| if l.is_finite() { (l - m).exp() } else { 0.0 })
                    .collect();
                let z: f64 = e.iter().sum();
                for j in 0..n {
                    weights[[b, h, i, j]] = e[j] / z;
                    for c in 0..d_k {
                        context[[b, h, i, c]] += e[j] / z * v[[b, h, j, c]];
                    }
                }
            }
        }
    }
    (weights, context)
}

/// Full-sort top-k oracle with the same tie rule (score desc, flat index
/// asc) and one-per-row guarantee as the library.
pub fn brute_force_keep(
    scores: &Array4<f64>,
    sparsity: f64,
    valid: &ValidityMask,
    pool: SelectionPool,
) -> Array4<bool> {
    let (batch, heads, n, _) = scores.dim();
    let mut keep = Array4::from_elem(scores.dim(), false);
    let pools: Vec<Vec<(usize, usize)>> = match pool {
        SelectionPool::PerHead => (0..batch).flat_map(|b| (0..heads).map(move |h| vec![(b, h)])).collect(),
        SelectionPool::PerLayerBatch => vec![(0..batch).flat_map(|b| (0..heads).map(move |h| (b, h))).collect()],
    };
    for slices in pools {
        let mut entries = Vec::new();
        let mut rows = 0;
        for &(b, h) in &slices {
            for i in 0..n {
                if !valid.is_valid(b, i) {
                    continue;
                }
                rows += 1;
                for j in 0..n {
                    if valid.is_valid(b, j) {
                        let flat = ((b * heads + h) * n + i) * n + j;
                        entries.push((scores[[b, h, i, j]], flat, (b, h, i, j)));
                    }
                }
            }
        }
        entries.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let m = entries.len();
        let k = (((1.0 - sparsity) * m as f64).round() as usize).max(rows).min(m);
        for e in &entries[..k] {
            keep[e.2] = true;
        }
    }
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..n {
                if !valid.is_valid(b, i) || (0..n).any(|j| keep[[b, h, i, j]]) {
                    continue;
                }
                let mut best: Option<usize> = None;
                for j in 0..n {
                    if valid.is_valid(b, j) && best.is_none_or(|bj| scores[[b, h, i, j]] > scores[[b, h, i, bj]]) {
                        best = Some(j);
                    }
                }
                keep[[b, h, i, best.unwrap()]] = true;
            }
        }
    }
    keep
}

/// Relative error with an absolute floor of 1e-6 on the denominator.
///
/// Central differences at step 1e-5 carry roughly 1e-11 of round-off, so
/// gradients that are structurally zero (the key bias, for one, cancels in
/// the softmax) would otherwise show huge relative errors.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}

pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        layers: 1,
        heads: 1,
        d_model: 4,
        d_ff: 8,
        vocab_size: 7,
        max_len: 3,
        num_classes: 2,
        seed,
    }
}

/// Randomizes every parameter (including biases and layer-norm terms) so
/// each gradient class is exercised away from its initial values.
pub fn perturbed_params(config: ModelConfig, seed: u64) -> ModelParams {
    let mut p = ModelParams::init(config).unwrap();
    let mut r = rng(seed);
    for t in p.tensors_mut() {
        for v in t.iter_mut() {
            *v += r.gen_range(-0.5..0.5);
        }
    }
    p
}

pub fn batch_of(examples: &[Example], pad_to: Option<usize>) -> Batch {
    let refs: Vec<&Example> = examples.iter().collect();
    Batch::new(&refs, pad_to).unwrap()
}

fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .zip(gain)
        .zip(bias)
        .map(|((v, g), b)| (v - mean) * inv * g + b)
        .collect()
}

fn matvec(x: &[f64], w: &Array2<f64>, b: &[f64]) -> Vec<f64> {
    (0..w.ncols())
        .map(|c| b[c] + (0..w.nrows()).map(|r| x[r] * w[[r, c]]).sum::<f64>())
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Dense encoder classifier written token-by-token with no masking code:
/// each sequence is processed at its own length.
pub fn dense_model_logits(params: &ModelParams, sequences: &[Vec<u32>]) -> Vec<Vec<f64>> {
    let cfg = params.config;
    let (d, heads) = (cfg.d_model, cfg.heads);
    let d_k = d / heads;
    sequences
        .iter()
        .map(|seq| {
            let n = seq.len();
            let mut x: Vec<Vec<f64>> = seq
                .iter()
                .enumerate()
                .map(|(i, &t)| {
                    (0..d)
                        .map(|c| params.token_emb[[t as usize, c]] + params.pos_emb[[i, c]])
                        .collect()
                })
                .collect();
            for layer in &params.layers {
                let h1: Vec<Vec<f64>> = x
                    .iter()
                    .map(|r| {
                        layer_norm_row(
                            r,
                            layer.ln1_gain.as_slice().unwrap(),
                            layer.ln1_bias.as_slice().unwrap(),
                        )
                    })
                    .collect();
                let proj = |w: &Array2<f64>, b: &ndarray::Array1<f64>| -> Vec<Vec<f64>> {
                    h1.iter().map(|r| matvec(r, w, b.as_slice().unwrap())).collect()
                };
                let (q, k, v) = (
                    proj(&layer.wq, &layer.bq),
                    proj(&layer.wk, &layer.bk),
                    proj(&layer.wv, &layer.bv),
                );
                let mut concat = vec![vec![0.0; d]; n];
                for h in 0..heads {
                    let off = h * d_k;
                    for i in 0..n {
                        let logits: Vec<f64> = (0..n)
                            .map(|j| (0..d_k).map(|c| q[i][off + c] * k[j][off + c]).sum::<f64>() / (d_k as f64).sqrt())
                            .collect();
                        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                        let z: f64 = e.iter().sum();
                        for j in 0..n {
                            for c in 0..d_k {
                                concat[i][off + c] += e[j] / z * v[j][off + c];
                            }
                        }
                    }
                }
                for i in 0..n {
                    let o = matvec(&concat[i], &layer.wo, layer.bo.as_slice().unwrap());
                    for c in 0..d {
                        x[i][c] += o[c];
                    }
                    let h2 = layer_norm_row(
                        &x[i],
                        layer.ln2_gain.as_slice().unwrap(),
                        layer.ln2_bias.as_slice().unwrap(),
                    );
                    let act: Vec<f64> = matvec(&h2, &layer.w1, layer.b1.as_slice().unwrap())
                        .into_iter()
                        .map(gelu)
                        .collect();
                    let f = matvec(&act, &layer.w2, layer.b2.as_slice().unwrap());
                    for c in 0..d {
                        x[i][c] += f[c];
                    }
                }
            }
            let pooled: Vec<f64> = (0..d).map(|c| x.iter().map(|r| r[c]).sum::<f64>() / n as f64).collect();
            matvec(&pooled, &params.cls_w, params.cls_b.as_slice().unwrap())
        })
        .collect()
}

use sparseattn::model::{backward, cross_entropy_loss, model_forward, ForwardMode, ParamClass, SparsityPlan};
use sparseattn::Exec;
use std::collections::BTreeMap;

fn loss_of(params: &ModelParams, batch: &Batch, plan: &SparsityPlan) -> f64 {
    let out = model_forward(params, batch, plan, ForwardMode::Inference, Exec::Sequential).unwrap();
    cross_entropy_loss(&out.logits, &batch.labels).unwrap().0
}

/// Central-difference check of every parameter scalar. Returns the largest
/// relative error per parameter class.
pub fn model_fd_check(
    params: &ModelParams,
    batch: &Batch,
    plan: &SparsityPlan,
    step: f64,
) -> BTreeMap<ParamClass, f64> {
    let out = model_forward(params, batch, plan, ForwardMode::Train, Exec::Sequential).unwrap();
    let (_, grad_logits) = cross_entropy_loss(&out.logits, &batch.labels).unwrap();
    let grads = backward(params, &out, &grad_logits, Exec::Sequential).unwrap();

    let mut worst: BTreeMap<ParamClass, f64> = BTreeMap::new();
    let classes: Vec<ParamClass> = params.tensors().iter().map(|t| t.class).collect();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.data.to_vec()).collect();
    for (ti, (class, grad)) in classes.iter().zip(&analytic).enumerate() {
        for (j, &g) in grad.iter().enumerate() {
            let mut plus = params.clone();
            plus.tensors_mut()[ti][j] += step;
            let mut minus = params.clone();
            minus.tensors_mut()[ti][j] -= step;
            let fd = (loss_of(&plus, batch, plan) - loss_of(&minus, batch, plan)) / (2.0 * step);
            let e = rel_err(g, fd);
            let w = worst.entry(*class).or_insert(0.0);
            *w = w.max(e);
        }
    }
    worst
}
