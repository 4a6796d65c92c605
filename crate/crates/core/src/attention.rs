//! Scaled dot-product attention with pre-softmax top-k sparsification.
//!
//! The forward pass runs in four steps:
//!
//! 1. raw scores `S = Q Kᵀ` (unscaled),
//! 2. top-k selection over a pool of selectable scores, keeping the
//!    `round((1 - s) · m)` highest entries plus the maximum of every valid
//!    query row,
//! 3. masking of every dropped or padded score to `-∞`,
//! 4. a stable softmax of the masked scores scaled by `1/√d_k`, followed by
//!    the weighted sum of values.
//!
//! All tensors are laid out `(batch, head, query, key)` or
//! `(batch, head, position, d_k)`.

use ndarray::{s, Array2, Array4, ArrayView2, ArrayView4, Zip};
use serde::{Deserialize, Serialize};

use crate::{Error, Exec, Result};

/// Shape of one multi-head attention call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadDims {
    /// Sequence length.
    pub n: usize,
    /// Per-head key/query width.
    pub d_k: usize,
    /// Head count.
    pub h: usize,
}

impl HeadDims {
    pub fn new(n: usize, d_k: usize, h: usize) -> Result<Self> {
        if n == 0 || d_k == 0 || h == 0 {
            return Err(Error::Dimension(format!(
                "head dims must be positive (n={n}, d_k={d_k}, h={h})"
            )));
        }
        Ok(Self { n, d_k, h })
    }

    /// Model width `h · d_k`.
    pub fn d(&self) -> usize {
        self.h * self.d_k
    }
}

/// Raw (or masked) attention scores indexed `(batch, head, query, key)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTensor {
    values: Array4<f64>,
    d_k: usize,
}

impl ScoreTensor {
    pub fn new(values: Array4<f64>, d_k: usize) -> Result<Self> {
        let (_, _, nq, nk) = values.dim();
        if nq != nk {
            return Err(Error::Dimension(format!("score matrix must be square, got {nq}x{nk}")));
        }
        Ok(Self { values, d_k })
    }

    pub fn values(&self) -> &Array4<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array4<f64> {
        self.values
    }

    pub fn d_k(&self) -> usize {
        self.d_k
    }

    pub fn batch(&self) -> usize {
        self.values.dim().0
    }

    pub fn heads(&self) -> usize {
        self.values.dim().1
    }

    pub fn len(&self) -> usize {
        self.values.dim().2
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dims(&self) -> HeadDims {
        HeadDims {
            n: self.len(),
            d_k: self.d_k,
            h: self.heads(),
        }
    }
}

/// Real-token flags indexed `(batch, position)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityMask {
    valid: Array2<bool>,
}

impl ValidityMask {
    /// Fails if any sequence has no valid position.
    pub fn new(valid: Array2<bool>) -> Result<Self> {
        for (b, row) in valid.outer_iter().enumerate() {
            if !row.iter().any(|&v| v) {
                return Err(Error::Validity(format!("sequence {b} has no valid positions")));
            }
        }
        Ok(Self { valid })
    }

    pub fn all_valid(batch: usize, n: usize) -> Self {
        Self {
            valid: Array2::from_elem((batch, n), true),
        }
    }

    /// Left-aligned sequences of the given lengths padded to `n`.
    pub fn from_lengths(lengths: &[usize], n: usize) -> Result<Self> {
        if let Some(&bad) = lengths.iter().find(|&&l| l > n) {
            return Err(Error::Dimension(format!("length {bad} exceeds padded length {n}")));
        }
        let valid = Array2::from_shape_fn((lengths.len(), n), |(b, i)| i < lengths[b]);
        Self::new(valid)
    }

    pub fn batch(&self) -> usize {
        self.valid.dim().0
    }

    pub fn len(&self) -> usize {
        self.valid.dim().1
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    #[inline]
    pub fn is_valid(&self, b: usize, i: usize) -> bool {
        self.valid[[b, i]]
    }

    /// Number of valid positions in sequence `b`.
    pub fn count(&self, b: usize) -> usize {
        self.valid.row(b).iter().filter(|&&v| v).count()
    }

    pub fn as_array(&self) -> &Array2<bool> {
        &self.valid
    }

    fn check_against(&self, batch: usize, n: usize) -> Result<()> {
        if self.valid.dim() != (batch, n) {
            return Err(Error::Dimension(format!(
                "validity mask is {:?}, scores need ({batch}, {n})",
                self.valid.dim()
            )));
        }
        Ok(())
    }
}

/// The set of scores that compete for the same top-k budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPool {
    /// One selection per `(batch, head)` score matrix.
    #[default]
    PerHead,
    /// One selection over every head and batch item of a layer call.
    PerLayerBatch,
}

/// Result of top-k selection.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMaskSpec {
    /// Kept entries, aligned with the score tensor.
    pub keep: Array4<bool>,
    /// Smallest score inside the top-k set of the pool covering `(batch, head)`.
    pub threshold: Array2<f64>,
    /// Entries kept per `(batch, head)` after the row guarantee.
    pub keep_count: Array2<usize>,
    /// Selectable (valid query × valid key) entries per `(batch, head)`.
    pub selectable: Array2<usize>,
    pub target_sparsity: f64,
    pub pool: SelectionPool,
}

impl SparseMaskSpec {
    pub fn kept_total(&self) -> usize {
        self.keep_count.sum()
    }

    pub fn selectable_total(&self) -> usize {
        self.selectable.sum()
    }

    /// `1 - kept / selectable` over the whole tensor.
    pub fn achieved_sparsity(&self) -> f64 {
        1.0 - self.kept_total() as f64 / self.selectable_total() as f64
    }
}

/// Forward result of [`sparse_attention_forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// `(batch, head, query, d_k)`.
    pub context: Array4<f64>,
    /// Post-softmax probabilities, `(batch, head, query, key)`.
    pub weights: Array4<f64>,
    pub mask_spec: SparseMaskSpec,
}

/// Gradients returned by [`sparse_attention_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads {
    pub q: Array4<f64>,
    pub k: Array4<f64>,
    pub v: Array4<f64>,
}

/// Number of entries each valid query row is guaranteed to keep.
pub const MIN_KEEP_PER_ROW: usize = 1;

fn check_qkv(q: &ArrayView4<f64>, k: &ArrayView4<f64>) -> Result<()> {
    if q.dim() != k.dim() {
        return Err(Error::Dimension(format!("Q is {:?} but K is {:?}", q.dim(), k.dim())));
    }
    let (_, h, n, d_k) = q.dim();
    HeadDims::new(n, d_k, h)?;
    Ok(())
}

/// Splits a `(batch, head, ...)` loop index.
#[inline]
fn slice_index(idx: usize, heads: usize) -> (usize, usize) {
    (idx / heads, idx % heads)
}

/// `S[b,h,i,j] = Σ_c Q[b,h,i,c] · K[b,h,j,c]`, unscaled.
pub fn raw_scores(q: ArrayView4<f64>, k: ArrayView4<f64>, exec: Exec) -> Result<ScoreTensor> {
    check_qkv(&q, &k)?;
    let (batch, heads, n, d_k) = q.dim();
    let slices = exec.map(batch * heads, |idx| {
        let (b, h) = slice_index(idx, heads);
        let qs = q.slice(s![b, h, .., ..]);
        let ks = k.slice(s![b, h, .., ..]);
        qs.dot(&ks.t())
    });
    let mut values = Array4::zeros((batch, heads, n, n));
    for (idx, slice) in slices.into_iter().enumerate() {
        let (b, h) = slice_index(idx, heads);
        values.slice_mut(s![b, h, .., ..]).assign(&slice);
    }
    ScoreTensor::new(values, d_k)
}

/// Total order used for selection: higher score first, then lower flat index.
#[inline]
fn rank_order(a: &(f64, usize), b: &(f64, usize)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Number of entries a pool of `selectable` entries with `rows` valid query
/// rows keeps before the row guarantee.
pub fn keep_budget(sparsity: f64, selectable: usize, rows: usize) -> usize {
    let nominal = ((1.0 - sparsity) * selectable as f64).round() as usize;
    nominal.max(rows * MIN_KEEP_PER_ROW).min(selectable)
}

/// Keeps the `k` best entries of `pool` (which is reordered). Returns the
/// smallest kept score.
fn select_top_k(pool: &mut [(f64, usize)], k: usize) -> f64 {
    debug_assert!(k >= 1 && k <= pool.len());
    if k < pool.len() {
        pool.select_nth_unstable_by(k - 1, rank_order);
    }
    pool[..k]
        .iter()
        .map(|e| e.0)
        .min_by(|a, b| a.total_cmp(b))
        .expect("k >= 1")
}

fn check_sparsity(sparsity: f64) -> Result<()> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::Config(format!(
            "sparsity ratio must lie in [0, 1), got {sparsity}"
        )));
    }
    Ok(())
}

/// Selectable entries of one `(b, h)` matrix as `(score, local flat index)`.
fn slice_pool(scores: ArrayView2<f64>, valid: &ValidityMask, b: usize) -> Result<Vec<(f64, usize)>> {
    let n = scores.nrows();
    let mut pool = Vec::with_capacity(n * n);
    for i in (0..n).filter(|&i| valid.is_valid(b, i)) {
        for j in (0..n).filter(|&j| valid.is_valid(b, j)) {
            let v = scores[[i, j]];
            if !v.is_finite() {
                return Err(Error::Invariant(format!(
                    "non-finite score {v} at (batch {b}, query {i}, key {j})"
                )));
            }
            pool.push((v, i * n + j));
        }
    }
    Ok(pool)
}

/// Force-keeps the maximum (lowest index on ties) of every valid query row
/// that has nothing kept.
fn guarantee_rows(keep: &mut [bool], scores: ArrayView2<f64>, valid: &ValidityMask, b: usize) {
    let n = scores.nrows();
    for i in (0..n).filter(|&i| valid.is_valid(b, i)) {
        let row = &mut keep[i * n..(i + 1) * n];
        if row.iter().any(|&k| k) {
            continue;
        }
        let best = (0..n)
            .filter(|&j| valid.is_valid(b, j))
            .map(|j| (scores[[i, j]], j))
            .min_by(rank_order)
            .expect("validity mask guarantees a valid key")
            .1;
        row[best] = true;
    }
}

struct SliceSelection {
    keep: Vec<bool>,
    threshold: f64,
    selectable: usize,
}

/// Chooses which scores survive for target sparsity `sparsity`.
///
/// The kept set is the `k = max(rows, round((1 - s) · m))` highest
/// selectable scores of each pool (ties broken by ascending flat index),
/// after which each valid query row with no survivor keeps its maximum.
pub fn select_threshold(
    scores: &ScoreTensor,
    sparsity: f64,
    valid: &ValidityMask,
    pool: SelectionPool,
    exec: Exec,
) -> Result<SparseMaskSpec> {
    check_sparsity(sparsity)?;
    let (batch, heads, n, _) = scores.values.dim();
    valid.check_against(batch, n)?;
    for b in 0..batch {
        if valid.count(b) == 0 {
            return Err(Error::Validity(format!("sequence {b} has no valid keys")));
        }
    }
    let values = &scores.values;

    let selections: Vec<SliceSelection> = match pool {
        SelectionPool::PerHead => exec.try_map(batch * heads, |idx| {
            let (b, h) = slice_index(idx, heads);
            let mat = values.slice(s![b, h, .., ..]);
            let mut entries = slice_pool(mat, valid, b)?;
            let selectable = entries.len();
            let rows = valid.count(b);
            let k = keep_budget(sparsity, selectable, rows);
            let threshold = select_top_k(&mut entries, k);
            let mut keep = vec![false; n * n];
            for &(_, flat) in &entries[..k] {
                keep[flat] = true;
            }
            guarantee_rows(&mut keep, mat, valid, b);
            Ok(SliceSelection {
                keep,
                threshold,
                selectable,
            })
        })?,
        SelectionPool::PerLayerBatch => {
            let per_slice = exec.try_map(batch * heads, |idx| {
                let (b, h) = slice_index(idx, heads);
                slice_pool(values.slice(s![b, h, .., ..]), valid, b)
            })?;
            let counts: Vec<usize> = per_slice.iter().map(Vec::len).collect();
            let mut entries: Vec<(f64, usize)> = per_slice
                .into_iter()
                .enumerate()
                .flat_map(|(idx, e)| e.into_iter().map(move |(v, local)| (v, idx * n * n + local)))
                .collect();
            let rows: usize = (0..batch).map(|b| valid.count(b) * heads).sum();
            let k = keep_budget(sparsity, entries.len(), rows);
            let threshold = select_top_k(&mut entries, k);
            let mut keep_all = vec![false; batch * heads * n * n];
            for &(_, flat) in &entries[..k] {
                keep_all[flat] = true;
            }
            let mut chunks: Vec<Vec<bool>> = keep_all.chunks(n * n).map(<[bool]>::to_vec).collect();
            chunks.iter_mut().enumerate().for_each(|(idx, keep)| {
                let (b, h) = slice_index(idx, heads);
                guarantee_rows(keep, values.slice(s![b, h, .., ..]), valid, b);
            });
            chunks
                .into_iter()
                .zip(counts)
                .map(|(keep, selectable)| SliceSelection {
                    keep,
                    threshold,
                    selectable,
                })
                .collect()
        }
    };

    let mut keep = Array4::from_elem((batch, heads, n, n), false);
    let mut threshold = Array2::zeros((batch, heads));
    let mut keep_count = Array2::zeros((batch, heads));
    let mut selectable = Array2::zeros((batch, heads));
    for (idx, sel) in selections.into_iter().enumerate() {
        let (b, h) = slice_index(idx, heads);
        keep_count[[b, h]] = sel.keep.iter().filter(|&&k| k).count();
        threshold[[b, h]] = sel.threshold;
        selectable[[b, h]] = sel.selectable;
        let view = ArrayView2::from_shape((n, n), &sel.keep).expect("n*n slice");
        keep.slice_mut(s![b, h, .., ..]).assign(&view);
    }
    Ok(SparseMaskSpec {
        keep,
        threshold,
        keep_count,
        selectable,
        target_sparsity: sparsity,
        pool,
    })
}

/// Replaces every score not kept by `spec` with `-∞`.
pub fn apply_sparsity_mask(scores: &ScoreTensor, spec: &SparseMaskSpec) -> Result<ScoreTensor> {
    if spec.keep.dim() != scores.values.dim() {
        return Err(Error::Dimension(format!(
            "mask is {:?}, scores are {:?}",
            spec.keep.dim(),
            scores.values.dim()
        )));
    }
    let mut values = scores.values.clone();
    Zip::from(&mut values).and(&spec.keep).for_each(|v, &k| {
        if !k {
            *v = f64::NEG_INFINITY;
        }
    });
    Ok(ScoreTensor {
        values,
        d_k: scores.d_k,
    })
}

/// Softmax of one score row scaled by `scale`, ignoring non-finite entries
/// and entries whose key is padding. Returns `false` if nothing survives.
fn softmax_row(
    scores: ndarray::ArrayView1<f64>,
    out: &mut ndarray::ArrayViewMut1<f64>,
    scale: f64,
    key_valid: impl Fn(usize) -> bool,
) -> bool {
    let live = |j: usize| key_valid(j) && scores[j].is_finite();
    let Some(max) = (0..scores.len())
        .filter(|&j| live(j))
        .map(|j| scores[j])
        .max_by(|a, b| a.total_cmp(b))
    else {
        return false;
    };
    let mut total = 0.0;
    for j in 0..scores.len() {
        let w = if live(j) {
            ((scores[j] - max) * scale).exp()
        } else {
            0.0
        };
        out[j] = w;
        total += w;
    }
    out.mapv_inplace(|w| w / total);
    true
}

/// `softmax(S_masked / √d_k)` row by row. Masked entries map to exactly 0;
/// padded query rows are all zero.
pub fn sparse_softmax(masked: &ScoreTensor, d_k: usize, valid: &ValidityMask, exec: Exec) -> Result<Array4<f64>> {
    if d_k == 0 {
        return Err(Error::Dimension("d_k must be positive".into()));
    }
    let (batch, heads, n, _) = masked.values.dim();
    valid.check_against(batch, n)?;
    let scale = 1.0 / (d_k as f64).sqrt();
    let values = &masked.values;
    let slices = exec.try_map(batch * heads, |idx| {
        let (b, h) = slice_index(idx, heads);
        let mat = values.slice(s![b, h, .., ..]);
        let mut out = Array2::zeros((n, n));
        for i in (0..n).filter(|&i| valid.is_valid(b, i)) {
            let mut row = out.row_mut(i);
            if !softmax_row(mat.row(i), &mut row, scale, |j| valid.is_valid(b, j)) {
                return Err(Error::Invariant(format!(
                    "query row (batch {b}, head {h}, row {i}) has every key masked"
                )));
            }
        }
        Ok(out)
    })?;
    let mut weights = Array4::zeros((batch, heads, n, n));
    for (idx, slice) in slices.into_iter().enumerate() {
        let (b, h) = slice_index(idx, heads);
        weights.slice_mut(s![b, h, .., ..]).assign(&slice);
    }
    Ok(weights)
}

/// Full sparse attention: scores, selection, mask, softmax, weighted values.
pub fn sparse_attention_forward(
    q: ArrayView4<f64>,
    k: ArrayView4<f64>,
    v: ArrayView4<f64>,
    sparsity: f64,
    valid: &ValidityMask,
    pool: SelectionPool,
    exec: Exec,
) -> Result<AttentionOutput> {
    if v.dim() != q.dim() {
        return Err(Error::Dimension(format!("V is {:?} but Q is {:?}", v.dim(), q.dim())));
    }
    let scores = raw_scores(q, k, exec)?;
    let mask_spec = select_threshold(&scores, sparsity, valid, pool, exec)?;
    let masked = apply_sparsity_mask(&scores, &mask_spec)?;
    let weights = sparse_softmax(&masked, scores.d_k(), valid, exec)?;

    let (batch, heads, n, d_k) = v.dim();
    let slices = exec.map(batch * heads, |idx| {
        let (b, h) = slice_index(idx, heads);
        weights.slice(s![b, h, .., ..]).dot(&v.slice(s![b, h, .., ..]))
    });
    let mut context = Array4::zeros((batch, heads, n, d_k));
    for (idx, slice) in slices.into_iter().enumerate() {
        let (b, h) = slice_index(idx, heads);
        context.slice_mut(s![b, h, .., ..]).assign(&slice);
    }
    Ok(AttentionOutput {
        context,
        weights,
        mask_spec,
    })
}

/// Reverse pass of [`sparse_attention_forward`].
///
/// The kept set is a constant of the forward pass: dropped entries carry zero
/// weight and therefore receive zero gradient, and nothing flows through the
/// selection itself.
pub fn sparse_attention_backward(
    grad_context: ArrayView4<f64>,
    q: ArrayView4<f64>,
    k: ArrayView4<f64>,
    v: ArrayView4<f64>,
    forward: &AttentionOutput,
    exec: Exec,
) -> Result<AttentionGrads> {
    check_qkv(&q, &k)?;
    let shape = q.dim();
    if v.dim() != shape || grad_context.dim() != shape || forward.context.dim() != shape {
        return Err(Error::Dimension(format!(
            "backward shapes disagree: dC {:?}, Q {:?}, V {:?}, cached context {:?}",
            grad_context.dim(),
            shape,
            v.dim(),
            forward.context.dim()
        )));
    }
    let (batch, heads, n, d_k) = shape;
    let scale = 1.0 / (d_k as f64).sqrt();
    let weights = &forward.weights;

    let slices = exec.map(batch * heads, |idx| {
        let (b, h) = slice_index(idx, heads);
        let p = weights.slice(s![b, h, .., ..]);
        let dc = grad_context.slice(s![b, h, .., ..]);
        let vs = v.slice(s![b, h, .., ..]);
        let dv = p.t().dot(&dc);
        let dp = dc.dot(&vs.t());
        let mut ds = Array2::zeros((n, n));
        for i in 0..n {
            let row_dot: f64 = (0..n).map(|j| dp[[i, j]] * p[[i, j]]).sum();
            for j in 0..n {
                ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - row_dot) * scale;
            }
        }
        let dq = ds.dot(&k.slice(s![b, h, .., ..]));
        let dk = ds.t().dot(&q.slice(s![b, h, .., ..]));
        (dq, dk, dv)
    });

    let mut grads = AttentionGrads {
        q: Array4::zeros(shape),
        k: Array4::zeros(shape),
        v: Array4::zeros(shape),
    };
    for (idx, (dq, dk, dv)) in slices.into_iter().enumerate() {
        let (b, h) = slice_index(idx, heads);
        grads.q.slice_mut(s![b, h, .., ..]).assign(&dq);
        grads.k.slice_mut(s![b, h, .., ..]).assign(&dk);
        grads.v.slice_mut(s![b, h, .., ..]).assign(&dv);
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scores_from(rows: Array2<f64>) -> ScoreTensor {
        let n = rows.nrows();
        ScoreTensor::new(rows.into_shape_with_order((1, 1, n, n)).unwrap(), 1).unwrap()
    }

    fn random4(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        Array::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn raw_scores_identity_and_zero() {
        let q = array![[1.0, 0.0], [0.0, 1.0]]
            .into_shape_with_order((1, 1, 2, 2))
            .unwrap();
        let s = raw_scores(q.view(), q.view(), Exec::Sequential).unwrap();
        assert_eq!(s.values().slice(s![0, 0, .., ..]), array![[1.0, 0.0], [0.0, 1.0]]);

        let z = Array4::<f64>::zeros((2, 3, 4, 5));
        let s = raw_scores(z.view(), z.view(), Exec::Sequential).unwrap();
        assert!(s.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn raw_scores_hand_dot_products() {
        // query [1,2] (padded with a second row) against keys [3,4], [5,6]
        let q = array![[1.0, 2.0], [0.0, 0.0]]
            .into_shape_with_order((1, 1, 2, 2))
            .unwrap();
        let k = array![[3.0, 4.0], [5.0, 6.0]]
            .into_shape_with_order((1, 1, 2, 2))
            .unwrap();
        let s = raw_scores(q.view(), k.view(), Exec::Sequential).unwrap();
        assert_eq!(s.values()[[0, 0, 0, 0]], 11.0);
        assert_eq!(s.values()[[0, 0, 0, 1]], 17.0);
    }

    #[test]
    fn raw_scores_shape_mismatch() {
        let q = Array4::<f64>::zeros((1, 1, 2, 2));
        let k = Array4::<f64>::zeros((1, 1, 3, 2));
        assert!(matches!(
            raw_scores(q.view(), k.view(), Exec::Sequential),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn select_half_of_four() {
        let s = scores_from(array![[1.0, 2.0], [3.0, 4.0]]);
        let valid = ValidityMask::all_valid(1, 2);
        let spec = select_threshold(&s, 0.5, &valid, SelectionPool::PerHead, Exec::Sequential).unwrap();
        // top-2 is {3, 4}, both in row 1, so row 0 keeps its max (2) as well
        assert_eq!(spec.threshold[[0, 0]], 3.0);
        assert!(spec.keep[[0, 0, 1, 0]] && spec.keep[[0, 0, 1, 1]]);
        assert!(spec.keep[[0, 0, 0, 1]] && !spec.keep[[0, 0, 0, 0]]);
        assert_eq!(spec.keep_count[[0, 0]], 3);
    }

    #[test]
    fn select_half_without_row_override() {
        // rows each contain one of the two largest scores
        let s = scores_from(array![[3.0, 1.0], [2.0, 4.0]]);
        let valid = ValidityMask::all_valid(1, 2);
        let spec = select_threshold(&s, 0.5, &valid, SelectionPool::PerHead, Exec::Sequential).unwrap();
        assert_eq!(spec.threshold[[0, 0]], 3.0);
        assert_eq!(spec.keep_count[[0, 0]], 2);
        assert_abs_diff_eq!(spec.achieved_sparsity(), 0.5);

        let masked = apply_sparsity_mask(&s, &spec).unwrap();
        let m = masked.values().slice(s![0, 0, .., ..]).to_owned();
        assert_eq!(m, array![[3.0, f64::NEG_INFINITY], [f64::NEG_INFINITY, 4.0]]);
    }

    #[test]
    fn dense_selection_keeps_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = ScoreTensor::new(random4(&mut rng, (2, 3, 5, 5)), 4).unwrap();
        let valid = ValidityMask::all_valid(2, 5);
        for pool in [SelectionPool::PerHead, SelectionPool::PerLayerBatch] {
            let spec = select_threshold(&s, 0.0, &valid, pool, Exec::Sequential).unwrap();
            assert!(spec.keep.iter().all(|&k| k));
            assert_eq!(spec.achieved_sparsity(), 0.0);
            let masked = apply_sparsity_mask(&s, &spec).unwrap();
            assert_eq!(masked.values(), s.values());
        }
    }

    #[test]
    fn starved_row_keeps_its_max() {
        let s = scores_from(array![
            [-10.0, -9.0, -8.0, -7.0],
            [5.0, 6.0, 7.0, 8.0],
            [4.0, 6.5, 3.0, 2.0],
            [9.0, 1.0, 0.0, 7.5],
        ]);
        let valid = ValidityMask::all_valid(1, 4);
        let spec = select_threshold(&s, 0.9, &valid, SelectionPool::PerHead, Exec::Sequential).unwrap();
        // k = max(4 rows, round(1.6)) = 4: top-4 is {9, 8, 7.5, 7}; row 0 and row 2 are starved
        assert_eq!(spec.threshold[[0, 0]], 7.0);
        assert!(spec.keep[[0, 0, 0, 3]]);
        assert!(spec.keep[[0, 0, 2, 1]]);
        assert_eq!(spec.keep_count[[0, 0]], 6);
        assert!(spec.achieved_sparsity() < 0.9);
        assert_abs_diff_eq!(spec.achieved_sparsity(), 1.0 - 6.0 / 16.0);
    }

    #[test]
    fn padded_keys_never_kept() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = ScoreTensor::new(random4(&mut rng, (2, 2, 4, 4)), 2).unwrap();
        let valid = ValidityMask::from_lengths(&[4, 2], 4).unwrap();
        for pool in [SelectionPool::PerHead, SelectionPool::PerLayerBatch] {
            let spec = select_threshold(&s, 0.0, &valid, pool, Exec::Sequential).unwrap();
            for h in 0..2 {
                for i in 0..4 {
                    for j in 2..4 {
                        assert!(!spec.keep[[1, h, i, j]]);
                        assert!(!spec.keep[[1, h, j, i]]);
                    }
                }
            }
            assert_eq!(spec.selectable[[1, 0]], 4);
            let masked = apply_sparsity_mask(&s, &spec).unwrap();
            assert!(masked
                .values()
                .slice(s![1, .., .., 3])
                .iter()
                .all(|v| *v == f64::NEG_INFINITY));
        }
    }

    #[test]
    fn select_rejects_bad_ratio() {
        let s = scores_from(array![[1.0]]);
        let valid = ValidityMask::all_valid(1, 1);
        for bad in [1.0, -0.1, f64::NAN] {
            assert!(matches!(
                select_threshold(&s, bad, &valid, SelectionPool::PerHead, Exec::Sequential),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn empty_sequence_rejected() {
        assert!(matches!(
            ValidityMask::from_lengths(&[2, 0], 3),
            Err(Error::Validity(_))
        ));
    }

    #[test]
    fn misaligned_mask_rejected() {
        let s = scores_from(array![[1.0, 2.0], [3.0, 4.0]]);
        let other = scores_from(array![[1.0]]);
        let valid = ValidityMask::all_valid(1, 1);
        let spec = select_threshold(&other, 0.0, &valid, SelectionPool::PerHead, Exec::Sequential).unwrap();
        assert!(matches!(apply_sparsity_mask(&s, &spec), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        let valid2 = ValidityMask::all_valid(1, 2);
        let w = sparse_softmax(
            &scores_from(array![[0.0, 0.0], [3.0, f64::NEG_INFINITY]]),
            1,
            &valid2,
            Exec::Sequential,
        )
        .unwrap();
        assert_eq!(w[[0, 0, 0, 0]], 0.5);
        assert_eq!(w[[0, 0, 0, 1]], 0.5);
        assert_eq!(w[[0, 0, 1, 0]], 1.0);
        assert_eq!(w[[0, 0, 1, 1]], 0.0);

        let valid3 = ValidityMask::all_valid(1, 3);
        let s = scores_from(array![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        let w = sparse_softmax(&s, 4, &valid3, Exec::Sequential).unwrap();
        let e: Vec<f64> = [0.5f64, 1.0, 1.5].iter().map(|x| x.exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..3 {
            assert_abs_diff_eq!(w[[0, 0, 0, j]], e[j] / z, epsilon = 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_fully_masked_row() {
        let valid = ValidityMask::all_valid(1, 2);
        let s = scores_from(array![[f64::NEG_INFINITY, f64::NEG_INFINITY], [0.0, 1.0]]);
        assert!(matches!(
            sparse_softmax(&s, 1, &valid, Exec::Sequential),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn forced_top1_context() {
        // q·k makes key 0 dominate for both rows; s = 0.5 keeps 2 of 4
        let q = array![[1.0, 0.0], [1.0, 0.0]]
            .into_shape_with_order((1, 1, 2, 2))
            .unwrap();
        let k = array![[5.0, 0.0], [-5.0, 0.0]]
            .into_shape_with_order((1, 1, 2, 2))
            .unwrap();
        let v = array![[1.0, 0.0], [0.0, 1.0]]
            .into_shape_with_order((1, 1, 2, 2))
            .unwrap();
        let valid = ValidityMask::all_valid(1, 2);
        let out = sparse_attention_forward(
            q.view(),
            k.view(),
            v.view(),
            0.5,
            &valid,
            SelectionPool::PerHead,
            Exec::Sequential,
        )
        .unwrap();
        assert_eq!(out.weights.slice(s![0, 0, .., ..]), array![[1.0, 0.0], [1.0, 0.0]]);
        assert_eq!(out.context.slice(s![0, 0, .., ..]), array![[1.0, 0.0], [1.0, 0.0]]);
    }

    #[test]
    fn identical_batch_items_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let one = random4(&mut rng, (1, 2, 5, 3));
        let q = ndarray::concatenate(ndarray::Axis(0), &[one.view(), one.view()]).unwrap();
        let valid = ValidityMask::all_valid(2, 5);
        let out = sparse_attention_forward(
            q.view(),
            q.view(),
            q.view(),
            0.6,
            &valid,
            SelectionPool::PerHead,
            Exec::Sequential,
        )
        .unwrap();
        assert_eq!(
            out.context.slice(s![0, .., .., ..]),
            out.context.slice(s![1, .., .., ..])
        );
    }

    #[test]
    fn padded_queries_give_zero_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = random4(&mut rng, (2, 2, 4, 3));
        let valid = ValidityMask::from_lengths(&[4, 3], 4).unwrap();
        let out = sparse_attention_forward(
            q.view(),
            q.view(),
            q.view(),
            0.5,
            &valid,
            SelectionPool::PerLayerBatch,
            Exec::Sequential,
        )
        .unwrap();
        assert!(out.weights.slice(s![1, .., 3, ..]).iter().all(|&w| w == 0.0));
        assert!(out.context.slice(s![1, .., 3, ..]).iter().all(|&c| c == 0.0));
        for b in 0..2 {
            for h in 0..2 {
                for i in 0..valid.count(b) {
                    let sum: f64 = out.weights.slice(s![b, h, i, ..]).sum();
                    assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_upstream_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random4(&mut rng, (1, 2, 3, 2));
        let k = random4(&mut rng, (1, 2, 3, 2));
        let v = random4(&mut rng, (1, 2, 3, 2));
        let valid = ValidityMask::all_valid(1, 3);
        let out = sparse_attention_forward(
            q.view(),
            k.view(),
            v.view(),
            0.5,
            &valid,
            SelectionPool::PerHead,
            Exec::Sequential,
        )
        .unwrap();
        let g = sparse_attention_backward(
            Array4::zeros(q.dim()).view(),
            q.view(),
            k.view(),
            v.view(),
            &out,
            Exec::Sequential,
        )
        .unwrap();
        assert!(g.q.iter().chain(g.k.iter()).chain(g.v.iter()).all(|&x| x == 0.0));
    }

    #[test]
    fn keep_budget_rounding() {
        assert_eq!(keep_budget(0.5, 4, 1), 2);
        assert_eq!(keep_budget(0.0, 7, 2), 7);
        assert_eq!(keep_budget(0.9, 16, 4), 4);
        assert_eq!(keep_budget(0.8, 4096, 64), 819);
    }
}
