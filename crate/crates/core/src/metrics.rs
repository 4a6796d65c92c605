//! Achieved sparsity, attention entropy, correlation and the FLOPs model.

use ndarray::{s, Array3, ArrayView4};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionOutput, SparseMaskSpec, ValidityMask};
use crate::{Error, Result};

/// Tolerance on `|Σ p - 1|` accepted by [`attention_entropy`].
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Zero-weight and selectable entry counts for one head.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparsityCount {
    pub dropped: usize,
    pub selectable: usize,
}

impl SparsityCount {
    pub fn ratio(&self) -> f64 {
        self.dropped as f64 / self.selectable as f64
    }

    fn add(&mut self, other: SparsityCount) {
        self.dropped += other.dropped;
        self.selectable += other.selectable;
    }
}

/// Achieved sparsity per `(layer, head)`, per layer and overall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub per_layer_head: Vec<Vec<f64>>,
    pub per_layer: Vec<f64>,
    pub overall: f64,
}

impl SparsityReport {
    fn from_counts(counts: &[Vec<SparsityCount>]) -> Result<Self> {
        let mut total = SparsityCount::default();
        let mut per_layer = Vec::with_capacity(counts.len());
        let mut per_layer_head = Vec::with_capacity(counts.len());
        for (l, heads) in counts.iter().enumerate() {
            let mut layer = SparsityCount::default();
            let mut row = Vec::with_capacity(heads.len());
            for (h, c) in heads.iter().enumerate() {
                if c.selectable == 0 {
                    return Err(Error::Data(format!("layer {l} head {h} has no selectable entries")));
                }
                row.push(c.ratio());
                layer.add(*c);
            }
            if layer.selectable == 0 {
                return Err(Error::Data(format!("layer {l} has no heads")));
            }
            per_layer.push(layer.ratio());
            per_layer_head.push(row);
            total.add(layer);
        }
        if total.selectable == 0 {
            return Err(Error::Data("no attention layers to measure".into()));
        }
        Ok(Self {
            per_layer_head,
            per_layer,
            overall: total.ratio(),
        })
    }
}

fn counts_from_spec(spec: &SparseMaskSpec) -> Vec<SparsityCount> {
    let (batch, heads) = spec.keep_count.dim();
    (0..heads)
        .map(|h| {
            let mut c = SparsityCount::default();
            for b in 0..batch {
                c.add(SparsityCount {
                    dropped: spec.selectable[[b, h]] - spec.keep_count[[b, h]],
                    selectable: spec.selectable[[b, h]],
                });
            }
            c
        })
        .collect()
}

fn counts_from_weights(weights: ArrayView4<f64>, valid: &ValidityMask) -> Result<Vec<SparsityCount>> {
    let (batch, heads, n, nk) = weights.dim();
    if valid.as_array().dim() != (batch, n) || n != nk {
        return Err(Error::Dimension(format!(
            "weights {:?} do not match validity mask {:?}",
            weights.dim(),
            valid.as_array().dim()
        )));
    }
    let mut counts = vec![SparsityCount::default(); heads];
    for b in 0..batch {
        for (h, count) in counts.iter_mut().enumerate() {
            for i in (0..n).filter(|&i| valid.is_valid(b, i)) {
                for j in (0..n).filter(|&j| valid.is_valid(b, j)) {
                    count.selectable += 1;
                    if weights[[b, h, i, j]] == 0.0 {
                        count.dropped += 1;
                    }
                }
            }
        }
    }
    Ok(counts)
}

/// Achieved sparsity from the mask specs of each layer (one spec per layer).
pub fn measure_sparsity(layers: &[&SparseMaskSpec]) -> Result<SparsityReport> {
    let counts: Vec<_> = layers.iter().map(|s| counts_from_spec(s)).collect();
    SparsityReport::from_counts(&counts)
}

/// Achieved sparsity counted directly as zero weights among valid entries.
pub fn measure_sparsity_from_weights(layers: &[ArrayView4<f64>], valid: &ValidityMask) -> Result<SparsityReport> {
    let counts = layers
        .iter()
        .map(|w| counts_from_weights(w.view(), valid))
        .collect::<Result<Vec<_>>>()?;
    SparsityReport::from_counts(&counts)
}

/// Shannon entropy in nats, with `0 · ln 0 = 0`.
pub fn row_entropy(row: impl IntoIterator<Item = f64>) -> f64 {
    -row.into_iter().filter(|&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Entropy of every valid query row of one attention call.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyReport {
    /// `(batch, head, query)`; zero for padded queries.
    pub per_row: Array3<f64>,
    /// Mean over valid rows per head.
    pub per_head: Vec<f64>,
    /// Valid rows per head.
    pub rows_per_head: usize,
    pub mean: f64,
}

/// Per-row attention entropy over valid keys.
pub fn attention_entropy(weights: ArrayView4<f64>, valid: &ValidityMask) -> Result<EntropyReport> {
    let (batch, heads, n, nk) = weights.dim();
    if valid.as_array().dim() != (batch, n) || n != nk {
        return Err(Error::Dimension(format!(
            "weights {:?} do not match validity mask {:?}",
            weights.dim(),
            valid.as_array().dim()
        )));
    }
    let mut per_row = Array3::zeros((batch, heads, n));
    let mut per_head = vec![0.0; heads];
    let rows_per_head: usize = (0..batch).map(|b| valid.count(b)).sum();
    for b in 0..batch {
        for h in 0..heads {
            for i in (0..n).filter(|&i| valid.is_valid(b, i)) {
                let row = weights.slice(s![b, h, i, ..]);
                let probs = (0..n).filter(|&j| valid.is_valid(b, j)).map(|j| row[j]);
                let total: f64 = probs.clone().sum();
                if (total - 1.0).abs() > ROW_SUM_TOLERANCE {
                    return Err(Error::Invariant(format!(
                        "attention row (batch {b}, head {h}, query {i}) sums to {total}"
                    )));
                }
                let e = row_entropy(probs);
                per_row[[b, h, i]] = e;
                per_head[h] += e;
            }
        }
    }
    let mean = per_head.iter().sum::<f64>() / (rows_per_head * heads) as f64;
    per_head.iter_mut().for_each(|e| *e /= rows_per_head as f64);
    Ok(EntropyReport {
        per_row,
        per_head,
        rows_per_head,
        mean,
    })
}

/// Aggregated attention statistics of a model over some evaluation data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionStats {
    pub per_layer_sparsity: Vec<f64>,
    pub per_layer_head_sparsity: Vec<Vec<f64>>,
    /// Mean row entropy (nats) per `(layer, head)`.
    pub per_head_entropy: Vec<Vec<f64>>,
    pub per_layer_entropy: Vec<f64>,
    pub mean_sparsity: f64,
    pub mean_entropy: f64,
    pub entropy_base: String,
}

/// Running sums behind [`AttentionStats`]; merge order does not change the
/// counts, and entropy sums are merged in call order.
#[derive(Debug, Clone, Default)]
pub struct StatsAccumulator {
    sparsity: Vec<Vec<SparsityCount>>,
    entropy_sum: Vec<Vec<f64>>,
    entropy_rows: Vec<usize>,
}

impl StatsAccumulator {
    pub fn new(layers: usize, heads: usize) -> Self {
        Self {
            sparsity: vec![vec![SparsityCount::default(); heads]; layers],
            entropy_sum: vec![vec![0.0; heads]; layers],
            entropy_rows: vec![0; layers],
        }
    }

    pub fn add_layer(&mut self, layer: usize, out: &AttentionOutput, valid: &ValidityMask) -> Result<()> {
        for (acc, c) in self.sparsity[layer].iter_mut().zip(counts_from_spec(&out.mask_spec)) {
            acc.add(c);
        }
        let ent = attention_entropy(out.weights.view(), valid)?;
        for (acc, e) in self.entropy_sum[layer].iter_mut().zip(&ent.per_head) {
            *acc += e * ent.rows_per_head as f64;
        }
        self.entropy_rows[layer] += ent.rows_per_head;
        Ok(())
    }

    pub fn merge(&mut self, other: &StatsAccumulator) {
        for (a, b) in self.sparsity.iter_mut().zip(&other.sparsity) {
            a.iter_mut().zip(b).for_each(|(x, y)| x.add(*y));
        }
        for (a, b) in self.entropy_sum.iter_mut().zip(&other.entropy_sum) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.entropy_rows.iter_mut().zip(&other.entropy_rows) {
            *a += b;
        }
    }

    pub fn finish(&self) -> Result<AttentionStats> {
        let sparsity = SparsityReport::from_counts(&self.sparsity)?;
        let per_head_entropy: Vec<Vec<f64>> = self
            .entropy_sum
            .iter()
            .zip(&self.entropy_rows)
            .map(|(sums, &rows)| sums.iter().map(|s| s / rows as f64).collect())
            .collect();
        let per_layer_entropy: Vec<f64> = per_head_entropy
            .iter()
            .map(|h| h.iter().sum::<f64>() / h.len() as f64)
            .collect();
        let mean_entropy = per_layer_entropy.iter().sum::<f64>() / per_layer_entropy.len() as f64;
        Ok(AttentionStats {
            per_layer_sparsity: sparsity.per_layer,
            per_layer_head_sparsity: sparsity.per_layer_head,
            per_head_entropy,
            per_layer_entropy,
            mean_sparsity: sparsity.overall,
            mean_entropy,
            entropy_base: "e".into(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub r: f64,
    pub points: usize,
}

/// Sample Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<CorrelationResult> {
    if xs.len() != ys.len() {
        return Err(Error::UndefinedCorrelation(format!(
            "{} x values but {} y values",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::UndefinedCorrelation("insufficient points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    if constant(xs) || constant(ys) || sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok(CorrelationResult {
        r: sxy / (sxx.sqrt() * syy.sqrt()),
        points: xs.len(),
    })
}

/// One configuration row of a [`FlopsReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsRow {
    pub config: String,
    /// Fraction of attention-matmul work removed.
    pub attention_sparsity: f64,
    pub dense_attention_flops: f64,
    pub sparse_attention_flops: f64,
    pub projection_flops: f64,
    pub attention_reduction_pct: f64,
    /// Reduction over projections + attention matmuls.
    pub layer_reduction_pct: f64,
    /// Extension: reduction when the feed-forward block is counted too.
    pub with_ffn_reduction_pct: f64,
}

/// Analytic FLOPs of one attention sublayer at 2 FLOPs per multiply-add.
/// Softmax, layer-norm and bias FLOPs are not counted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub n: usize,
    pub d: usize,
    pub d_ff: usize,
    pub ffn_flops: f64,
    pub convention: String,
    pub rows: Vec<FlopsRow>,
}

/// Dense `QKᵀ` plus `weights · V`: `4 n² d`.
pub fn attention_matmul_flops(n: usize, d: usize) -> f64 {
    4.0 * (n as f64).powi(2) * d as f64
}

/// Q, K, V and output projections: `8 n d²`.
pub fn projection_flops(n: usize, d: usize) -> f64 {
    8.0 * n as f64 * (d as f64).powi(2)
}

/// Two feed-forward matmuls: `4 n d d_ff`.
pub fn ffn_flops(n: usize, d: usize, d_ff: usize) -> f64 {
    4.0 * n as f64 * d as f64 * d_ff as f64
}

pub fn flops_report(n: usize, d: usize, d_ff: usize, configs: &[(String, f64)]) -> Result<FlopsReport> {
    if n == 0 || d == 0 {
        return Err(Error::Config(format!("n and d must be at least 1 (n={n}, d={d})")));
    }
    let attn = attention_matmul_flops(n, d);
    let proj = projection_flops(n, d);
    let ffn = ffn_flops(n, d, d_ff);
    let rows = configs
        .iter()
        .map(|(name, s)| {
            if !(0.0..=1.0).contains(s) {
                return Err(Error::Config(format!("{name}: attention sparsity {s} outside [0, 1]")));
            }
            let saved = s * attn;
            Ok(FlopsRow {
                config: name.clone(),
                attention_sparsity: *s,
                dense_attention_flops: attn,
                sparse_attention_flops: attn - saved,
                projection_flops: proj,
                attention_reduction_pct: 100.0 * s,
                layer_reduction_pct: 100.0 * saved / (attn + proj),
                with_ffn_reduction_pct: 100.0 * saved / (attn + proj + ffn),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FlopsReport {
        n,
        d,
        d_ff,
        ffn_flops: ffn,
        convention: "2 FLOPs per multiply-add; attention sublayer = 4 projections (8nd^2) + QK^T and weights*V (4n^2d); softmax, layer-norm and bias excluded".into(),
        rows,
    })
}
