//! Super-event pooling.
//!
//! Turns a `T×D` feature sequence into context vectors for the per-frame
//! classifier: a single per-class filter, a soft-attention mixture of shared
//! filters, the per-frame relative variant, and the max/mean/pyramid
//! poolings used as ablations. Pooled vectors are distribution-major: entry
//! `n·D + d` is distribution `n`, feature `d`.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tsf::MaterializedFilter;

/// Per-class attention logits over `M` shared filters (`C×M`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights {
    pub logits: Array2<f64>,
}

impl AttentionWeights {
    pub fn new(logits: Array2<f64>) -> Self {
        AttentionWeights { logits }
    }

    pub fn zeros(classes: usize, filters: usize) -> Self {
        AttentionWeights {
            logits: Array2::zeros((classes, filters)),
        }
    }

    pub fn classes(&self) -> usize {
        self.logits.nrows()
    }

    pub fn filters(&self) -> usize {
        self.logits.ncols()
    }

    pub fn softmax(&self) -> Result<Array2<f64>> {
        soft_attention(self)
    }
}

/// Row-wise softmax of the attention logits, stabilized by subtracting each
/// row's maximum.
pub fn soft_attention(weights: &AttentionWeights) -> Result<Array2<f64>> {
    if weights.logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("attention logits"));
    }
    let mut out = weights.logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|l| (l - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|e| e / sum);
    }
    Ok(out)
}

/// Backward of a row-wise softmax: `A ⊙ (g - <A, g>)` per row.
pub fn softmax_backward(probs: ArrayView2<f64>, upstream: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(probs.dim());
    for ((p, g), mut o) in probs
        .rows()
        .into_iter()
        .zip(upstream.rows())
        .zip(out.rows_mut())
    {
        let dot = p.dot(&g);
        for ((o, &p), &g) in o.iter_mut().zip(p).zip(g) {
            *o = p * (g - dot);
        }
    }
    out
}

/// Per-class super-event representations, `C×(N·D)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SuperEventRep {
    pub values: Array2<f64>,
}

fn check_frames(filter: &MaterializedFilter, v: &ArrayView2<f64>) -> Result<()> {
    if filter.frames() != v.nrows() {
        return Err(Error::shape("filter length", v.nrows(), filter.frames()));
    }
    Ok(())
}

/// `out[n·D + d] = Σ_t F[t,n] · v[t,d]`.
pub fn pool_single(filter: &MaterializedFilter, v: ArrayView2<f64>) -> Result<Array1<f64>> {
    check_frames(filter, &v)?;
    let (_, d) = v.dim();
    let n = filter.distributions();
    let mut out = Array1::zeros(n * d);
    for k in 0..n {
        let mut block = out.slice_mut(s![k * d..(k + 1) * d]);
        for (w, row) in filter.values.column(k).iter().zip(v.rows()) {
            block.scaled_add(*w, &row);
        }
    }
    Ok(out)
}

/// Gradients of [`pool_single`] with respect to the filter values (`T×N`)
/// and the features (`T×D`).
pub fn pool_single_backward(
    filter: &MaterializedFilter,
    v: ArrayView2<f64>,
    upstream: ArrayView1<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_frames(filter, &v)?;
    let (frames, d) = v.dim();
    let n = filter.distributions();
    if upstream.len() != n * d {
        return Err(Error::shape("pooled upstream", n * d, upstream.len()));
    }
    let mut d_filter = Array2::zeros((frames, n));
    let mut d_v = Array2::zeros((frames, d));
    for k in 0..n {
        let block = upstream.slice(s![k * d..(k + 1) * d]);
        for t in 0..frames {
            d_filter[[t, k]] = v.row(t).dot(&block);
            d_v.row_mut(t).scaled_add(filter.values[[t, k]], &block);
        }
    }
    Ok((d_filter, d_v))
}

fn check_bank(filters: &[MaterializedFilter], weights: &AttentionWeights) -> Result<usize> {
    if filters.len() != weights.filters() {
        return Err(Error::shape(
            "filter bank size",
            weights.filters(),
            filters.len(),
        ));
    }
    let n = filters.first().map_or(0, |f| f.distributions());
    if let Some(f) = filters.iter().find(|f| f.distributions() != n) {
        return Err(Error::shape("distributions per filter", n, f.distributions()));
    }
    Ok(n)
}

/// `S_c = Σ_m A[c,m] · pool_single(F_m, v)`, computed as a mixture of the
/// `M` pooled vectors.
pub fn pool_attended(
    filters: &[MaterializedFilter],
    weights: &AttentionWeights,
    v: ArrayView2<f64>,
) -> Result<SuperEventRep> {
    check_bank(filters, weights)?;
    let attention = soft_attention(weights)?;
    let pooled = pooled_bank(filters, v)?;
    let mut values = Array2::zeros((weights.classes(), pooled.ncols()));
    for (a, mut out) in attention.rows().into_iter().zip(values.rows_mut()) {
        mix_into(a, |m| pooled.row(m), &mut out);
    }
    Ok(SuperEventRep { values })
}

/// Writes `Σ_m a[m]·x_m` as `x_0 + Σ_{m>0} a[m]·(x_m - x_0)`, which equals the
/// plain mixture on the simplex and reproduces `x_0` exactly when all inputs
/// are identical.
fn mix_into<'a>(
    a: ArrayView1<f64>,
    item: impl Fn(usize) -> ArrayView1<'a, f64>,
    out: &mut ndarray::ArrayViewMut1<f64>,
) {
    let base = item(0);
    out.assign(&base);
    for m in 1..a.len() {
        let x = item(m);
        for ((o, &xm), &x0) in out.iter_mut().zip(x).zip(base) {
            *o += a[m] * (xm - x0);
        }
    }
}

fn pooled_bank(filters: &[MaterializedFilter], v: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = filters.first().map_or(0, |f| f.distributions());
    let mut pooled = Array2::zeros((filters.len(), n * v.ncols()));
    for (f, mut row) in filters.iter().zip(pooled.rows_mut()) {
        row.assign(&pool_single(f, v)?);
    }
    Ok(pooled)
}

/// Gradients through the attended (or relative) pooling.
#[derive(Clone, Debug)]
pub struct PoolingGrad {
    /// One `T×N` (or `L×N`) gradient per shared filter.
    pub filters: Vec<Array2<f64>>,
    /// Gradient with respect to the attention logits, `C×M`.
    pub logits: Array2<f64>,
    /// Gradient with respect to the features, `T×D`.
    pub features: Array2<f64>,
}

pub fn pool_attended_backward(
    filters: &[MaterializedFilter],
    weights: &AttentionWeights,
    v: ArrayView2<f64>,
    upstream: ArrayView2<f64>,
) -> Result<PoolingGrad> {
    let n = check_bank(filters, weights)?;
    let (frames, d) = v.dim();
    if upstream.dim() != (weights.classes(), n * d) {
        return Err(Error::shape(
            "super-event upstream",
            format!("{}x{}", weights.classes(), n * d),
            format!("{}x{}", upstream.nrows(), upstream.ncols()),
        ));
    }
    let attention = soft_attention(weights)?;
    let pooled = pooled_bank(filters, v)?;

    let d_attention = upstream.dot(&pooled.t());
    let logits = softmax_backward(attention.view(), d_attention.view());
    let d_pooled = attention.t().dot(&upstream);

    let mut features = Array2::zeros((frames, d));
    let mut d_filters = Vec::with_capacity(filters.len());
    for (f, up) in filters.iter().zip(d_pooled.rows()) {
        let (df, dv) = pool_single_backward(f, v, up)?;
        features += &dv;
        d_filters.push(df);
    }
    Ok(PoolingGrad {
        filters: d_filters,
        logits,
        features,
    })
}

/// Kernel length for the relative (per-frame) variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelativeConfig {
    len: usize,
}

impl RelativeConfig {
    pub const DEFAULT_LEN: usize = 15;

    pub fn new(len: usize) -> Result<Self> {
        if len == 0 || len.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "relative kernel length must be odd and positive, got {len}"
            )));
        }
        Ok(RelativeConfig { len })
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.len
    }

    /// Frames on each side of the center.
    pub fn half(&self) -> usize {
        (self.len - 1) / 2
    }
}

impl Default for RelativeConfig {
    fn default() -> Self {
        RelativeConfig {
            len: Self::DEFAULT_LEN,
        }
    }
}

/// Frame range `[lo, hi)` of kernel taps that land inside a sequence of
/// `frames` frames when centered at `t`.
#[inline]
fn taps(t: usize, half: usize, len: usize, frames: usize) -> (usize, usize) {
    let lo = half.saturating_sub(t);
    let hi = len.min(frames + half - t);
    (lo, hi)
}

/// Correlates the `L×N` kernel with the features around every frame:
/// `P[t, n·D + d] = Σ_j K[j,n] · v[t + j - (L-1)/2, d]`, zero outside the
/// sequence.
fn correlate(kernel: &MaterializedFilter, v: ArrayView2<f64>, half: usize) -> Array2<f64> {
    let (frames, d) = v.dim();
    let (len, n) = kernel.values.dim();
    let mut out = Array2::zeros((frames, n * d));
    for t in 0..frames {
        let (lo, hi) = taps(t, half, len, frames);
        let mut row = out.row_mut(t);
        for j in lo..hi {
            let src = v.row(t + j - half);
            for k in 0..n {
                row.slice_mut(s![k * d..(k + 1) * d])
                    .scaled_add(kernel.values[[j, k]], &src);
            }
        }
    }
    out
}

fn check_relative(
    filters: &[MaterializedFilter],
    weights: &AttentionWeights,
    cfg: RelativeConfig,
) -> Result<usize> {
    let n = check_bank(filters, weights)?;
    if let Some(f) = filters.iter().find(|f| f.frames() != cfg.len()) {
        return Err(Error::shape("relative kernel length", cfg.len(), f.frames()));
    }
    Ok(n)
}

/// Per-frame super-event representations, `T×C×(N·D)`: each shared filter,
/// materialized at the fixed length `L`, is centered on every frame, and the
/// results are mixed with the per-class attention.
pub fn pool_relative(
    filters: &[MaterializedFilter],
    weights: &AttentionWeights,
    v: ArrayView2<f64>,
    cfg: RelativeConfig,
) -> Result<Array3<f64>> {
    let n = check_relative(filters, weights, cfg)?;
    let (frames, d) = v.dim();
    let attention = soft_attention(weights)?;
    let classes = weights.classes();
    let pooled: Vec<Array2<f64>> = filters.iter().map(|f| correlate(f, v, cfg.half())).collect();
    let mut out = Array3::zeros((frames, classes, n * d));
    for t in 0..frames {
        for c in 0..classes {
            let mut dst = out.slice_mut(s![t, c, ..]);
            mix_into(attention.row(c), |m| pooled[m].row(t), &mut dst);
        }
    }
    Ok(out)
}

pub fn pool_relative_backward(
    filters: &[MaterializedFilter],
    weights: &AttentionWeights,
    v: ArrayView2<f64>,
    cfg: RelativeConfig,
    upstream: ArrayView3<f64>,
) -> Result<PoolingGrad> {
    let n = check_relative(filters, weights, cfg)?;
    let (frames, d) = v.dim();
    let classes = weights.classes();
    if upstream.dim() != (frames, classes, n * d) {
        return Err(Error::shape(
            "relative upstream",
            format!("{frames}x{classes}x{}", n * d),
            format!("{:?}", upstream.dim()),
        ));
    }
    let attention = soft_attention(weights)?;
    let half = cfg.half();
    let len = cfg.len();

    let mut d_attention = Array2::zeros((classes, filters.len()));
    let mut features = Array2::zeros((frames, d));
    let mut d_filters = Vec::with_capacity(filters.len());
    for (m, f) in filters.iter().enumerate() {
        let pooled = correlate(f, v, half);
        let mut d_pooled = Array2::zeros((frames, n * d));
        for t in 0..frames {
            for c in 0..classes {
                let up = upstream.slice(s![t, c, ..]);
                d_attention[[c, m]] += up.dot(&pooled.row(t));
                d_pooled.row_mut(t).scaled_add(attention[[c, m]], &up);
            }
        }
        let mut d_kernel = Array2::zeros((len, n));
        for t in 0..frames {
            let (lo, hi) = taps(t, half, len, frames);
            for j in lo..hi {
                let src = t + j - half;
                for k in 0..n {
                    let g = d_pooled.slice(s![t, k * d..(k + 1) * d]);
                    d_kernel[[j, k]] += g.dot(&v.row(src));
                    features
                        .row_mut(src)
                        .scaled_add(f.values[[j, k]], &g);
                }
            }
        }
        d_filters.push(d_kernel);
    }
    Ok(PoolingGrad {
        filters: d_filters,
        logits: softmax_backward(attention.view(), d_attention.view()),
        features,
    })
}

/// Per-frame linear scores of the relative representation,
/// `score[t,c] = Σ_k proj[c,k] · R[t,c,k]` with `R` as in [`pool_relative`],
/// computed without materializing `R`.
///
/// The per-class kernels are mixed first and the projection is applied to
/// the features before correlation, which costs `O(C·N·T·(L + D))` instead of
/// `O(M·T·L·N·D)`.
pub fn relative_scores(
    filters: &[MaterializedFilter],
    attention: ArrayView2<f64>,
    v: ArrayView2<f64>,
    projection: ArrayView2<f64>,
    cfg: RelativeConfig,
) -> Array2<f64> {
    let mixed = mix_kernels(filters, attention);
    let projected = project_features(v, projection, mixed[0].ncols());
    let (frames, _) = v.dim();
    let classes = attention.nrows();
    let (half, len) = (cfg.half(), cfg.len());
    let mut scores = Array2::zeros((frames, classes));
    for c in 0..classes {
        for k in 0..mixed[c].ncols() {
            let kernel = mixed[c].column(k).to_vec();
            let u = projected.slice(s![c, k, ..]);
            let u = u.as_slice().expect("standard layout");
            for t in 0..frames {
                let (lo, hi) = taps(t, half, len, frames);
                let src = &u[t + lo - half..t + hi - half];
                let acc = kernel[lo..hi].iter().zip(src).fold(0.0, |acc, (a, b)| acc + a * b);
                scores[[t, c]] += acc;
            }
        }
    }
    scores
}

/// Gradients of [`relative_scores`] with respect to the kernels, the
/// attention probabilities, and the projection.
#[derive(Clone, Debug)]
pub struct RelativeScoresGrad {
    pub filters: Vec<Array2<f64>>,
    pub attention: Array2<f64>,
    pub projection: Array2<f64>,
}

pub fn relative_scores_backward(
    filters: &[MaterializedFilter],
    attention: ArrayView2<f64>,
    v: ArrayView2<f64>,
    projection: ArrayView2<f64>,
    cfg: RelativeConfig,
    upstream: ArrayView2<f64>,
) -> RelativeScoresGrad {
    let mixed = mix_kernels(filters, attention);
    let n = mixed[0].ncols();
    let projected = project_features(v, projection, n);
    let (frames, d) = v.dim();
    let classes = attention.nrows();
    let (half, len) = (cfg.half(), cfg.len());

    let mut d_mixed = vec![Array2::<f64>::zeros((len, n)); classes];
    let mut d_projected = Array3::<f64>::zeros((classes, n, frames));
    for c in 0..classes {
        for k in 0..n {
            let kernel = mixed[c].column(k).to_vec();
            let mut d_kernel = vec![0.0; len];
            let u = projected.slice(s![c, k, ..]);
            let u = u.as_slice().expect("standard layout");
            let mut du = d_projected.slice_mut(s![c, k, ..]);
            let du = du.as_slice_mut().expect("standard layout");
            for t in 0..frames {
                let g = upstream[[t, c]];
                if g == 0.0 {
                    continue;
                }
                let (lo, hi) = taps(t, half, len, frames);
                let range = t + lo - half..t + hi - half;
                for (dk, x) in d_kernel[lo..hi].iter_mut().zip(&u[range.clone()]) {
                    *dk += g * x;
                }
                for (dx, w) in du[range].iter_mut().zip(&kernel[lo..hi]) {
                    *dx += g * w;
                }
            }
            d_mixed[c].column_mut(k).assign(&ndarray::ArrayView1::from(&d_kernel));
        }
    }

    let mut d_projection = Array2::zeros(projection.dim());
    for c in 0..classes {
        for k in 0..n {
            let du = d_projected.slice(s![c, k, ..]);
            let mut block = d_projection.slice_mut(s![c, k * d..(k + 1) * d]);
            for (g, row) in du.iter().zip(v.rows()) {
                block.scaled_add(*g, &row);
            }
        }
    }

    let mut d_attention = Array2::zeros(attention.dim());
    let mut d_filters = vec![Array2::<f64>::zeros((len, n)); filters.len()];
    for c in 0..classes {
        for (m, f) in filters.iter().enumerate() {
            d_attention[[c, m]] = (&d_mixed[c] * &f.values).sum();
            d_filters[m].scaled_add(attention[[c, m]], &d_mixed[c]);
        }
    }
    RelativeScoresGrad {
        filters: d_filters,
        attention: d_attention,
        projection: d_projection,
    }
}

fn mix_kernels(filters: &[MaterializedFilter], attention: ArrayView2<f64>) -> Vec<Array2<f64>> {
    let dim = filters[0].values.dim();
    attention
        .rows()
        .into_iter()
        .map(|a| {
            let mut k = Array2::zeros(dim);
            for (w, f) in a.iter().zip(filters) {
                k.scaled_add(*w, &f.values);
            }
            k
        })
        .collect()
}

/// `u[c, n, t] = Σ_d proj[c, n·D + d] · v[t, d]`.
fn project_features(v: ArrayView2<f64>, projection: ArrayView2<f64>, n: usize) -> Array3<f64> {
    let (frames, d) = v.dim();
    let classes = projection.nrows();
    let mut u = Array3::zeros((classes, n, frames));
    for c in 0..classes {
        for k in 0..n {
            let w = projection.slice(s![c, k * d..(k + 1) * d]);
            let col = v.dot(&w);
            u.slice_mut(s![c, k, ..]).assign(&col);
        }
    }
    u
}

/// Class-independent poolings used as ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselinePooling {
    Max,
    Mean,
    Pyramid3,
}

impl BaselinePooling {
    /// Number of pooled segments `P`; the output has `P·D` entries.
    pub fn segments(self) -> usize {
        match self {
            BaselinePooling::Max | BaselinePooling::Mean => 1,
            BaselinePooling::Pyramid3 => 7,
        }
    }
}

/// Frame ranges of the level-3 pyramid: whole sequence, halves, quarters.
/// Empty segments (only possible when `T < 4`) borrow the range of the
/// non-empty segment of the same level whose midpoint is nearest, preferring
/// the earlier one on ties.
pub fn pyramid_segments(frames: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(7);
    for k in [1usize, 2, 4] {
        let level: Vec<(usize, usize)> = (0..k)
            .map(|i| (i * frames / k, (i + 1) * frames / k))
            .collect();
        for i in 0..k {
            let (lo, hi) = level[i];
            if hi > lo {
                out.push((lo, hi));
                continue;
            }
            // Compare midpoints in units of frames/(2k) to stay in integers.
            let nominal = (2 * i + 1) * frames;
            let nearest = (0..k)
                .filter(|&j| level[j].1 > level[j].0)
                .min_by_key(|&j| (nominal.abs_diff(k * (level[j].0 + level[j].1)), j))
                .expect("at least one non-empty segment when frames >= 1");
            out.push(level[nearest]);
        }
    }
    out
}

pub fn pool_baseline(kind: BaselinePooling, v: ArrayView2<f64>) -> Result<Array1<f64>> {
    let (frames, d) = v.dim();
    if frames == 0 {
        return Err(Error::InvalidArgument("cannot pool an empty sequence".into()));
    }
    Ok(match kind {
        BaselinePooling::Max => v.fold_axis(Axis(0), f64::NEG_INFINITY, |&a, &b| a.max(b)),
        BaselinePooling::Mean => v.sum_axis(Axis(0)) / frames as f64,
        BaselinePooling::Pyramid3 => {
            let mut out = Array1::zeros(7 * d);
            for (p, (lo, hi)) in pyramid_segments(frames).into_iter().enumerate() {
                let seg = v.slice(s![lo..hi, ..]).sum_axis(Axis(0)) / (hi - lo) as f64;
                out.slice_mut(s![p * d..(p + 1) * d]).assign(&seg);
            }
            out
        }
    })
}

/// Gradient of [`pool_baseline`] with respect to the features. Max pooling
/// routes each coordinate's gradient to its first maximizing frame.
pub fn pool_baseline_backward(
    kind: BaselinePooling,
    v: ArrayView2<f64>,
    upstream: ArrayView1<f64>,
) -> Result<Array2<f64>> {
    let (frames, d) = v.dim();
    if frames == 0 {
        return Err(Error::InvalidArgument("cannot pool an empty sequence".into()));
    }
    if upstream.len() != kind.segments() * d {
        return Err(Error::shape(
            "pooling upstream",
            kind.segments() * d,
            upstream.len(),
        ));
    }
    let mut out = Array2::zeros((frames, d));
    match kind {
        BaselinePooling::Max => {
            for j in 0..d {
                let col = v.column(j);
                let mut best = 0;
                for t in 1..frames {
                    if col[t] > col[best] {
                        best = t;
                    }
                }
                out[[best, j]] = upstream[j];
            }
        }
        BaselinePooling::Mean => {
            let g = &upstream / frames as f64;
            for mut row in out.rows_mut() {
                row.assign(&g);
            }
        }
        BaselinePooling::Pyramid3 => {
            for (p, (lo, hi)) in pyramid_segments(frames).into_iter().enumerate() {
                let g = &upstream.slice(s![p * d..(p + 1) * d]) / (hi - lo) as f64;
                for mut row in out.slice_mut(s![lo..hi, ..]).rows_mut() {
                    row += &g;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tsf::{materialize, FilterParams};
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn explicit_filter(values: Array2<f64>) -> MaterializedFilter {
        let n = values.ncols();
        MaterializedFilter {
            values,
            centers_hat: vec![0.0; n],
            widths_hat: vec![1.0; n],
            norm: vec![1.0; n],
        }
    }

    #[test]
    fn uniform_filter_pools_the_mean() {
        let v = array![[1.0, -2.0], [3.0, 0.0], [5.0, 8.0], [7.0, 2.0]];
        let f = explicit_filter(Array2::from_elem((4, 1), 0.25));
        let out = pool_single(&f, v.view()).unwrap();
        assert_eq!(out, array![4.0, 2.0]);
    }

    #[test]
    fn one_hot_filter_selects_a_frame() {
        let v = array![[1.0, -2.0], [3.0, 0.5], [5.0, 8.0]];
        let f = explicit_filter(array![[0.0, 1.0], [1.0, 0.0], [0.0, 0.0]]);
        let out = pool_single(&f, v.view()).unwrap();
        assert_eq!(out, array![3.0, 0.5, 1.0, -2.0]);
    }

    #[test]
    fn pool_single_hand_product() {
        let f = explicit_filter(array![[0.2, 0.5], [0.3, 0.25], [0.5, 0.25]]);
        let v = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let out = pool_single(&f, v.view()).unwrap();
        for (a, e) in out.iter().zip([3.6, 4.6, 2.5, 3.5]) {
            assert_abs_diff_eq!(*a, e, epsilon = 1e-12);
        }
        let short = array![[1.0, 2.0]];
        assert!(pool_single(&f, short.view()).is_err());
    }

    #[test]
    fn softmax_examples() {
        let a = soft_attention(&AttentionWeights::new(Array2::from_elem((1, 5), 0.4))).unwrap();
        for v in a.iter() {
            assert_abs_diff_eq!(*v, 0.2, epsilon = 1e-15);
        }
        let a = soft_attention(&AttentionWeights::new(array![[1.0, 0.0]])).unwrap();
        assert_abs_diff_eq!(a[[0, 0]], 0.731_058_578_630_004_9, epsilon = 1e-15);
        assert_abs_diff_eq!(a[[0, 1]], 0.268_941_421_369_995_1, epsilon = 1e-15);
        assert!(soft_attention(&AttentionWeights::new(array![[f64::NAN, 0.0]])).is_err());
    }

    #[test]
    fn dyadic_shift_is_bitwise_invariant() {
        let logits = array![[0.5, -1.25, 2.0], [3.0, 3.0, -0.125]];
        let shifted = &logits + 7.25;
        let a = soft_attention(&AttentionWeights::new(logits)).unwrap();
        let b = soft_attention(&AttentionWeights::new(shifted)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn attended_hand_mixture() {
        let f1 = explicit_filter(array![[0.2], [0.3], [0.5]]);
        let f2 = explicit_filter(array![[0.6], [0.3], [0.1]]);
        let v = array![[1.0], [2.0], [4.0]];
        let w = AttentionWeights::new(array![[0.0, 0.0], [3f64.ln(), 0.0]]);
        let s = pool_attended(&[f1, f2], &w, v.view()).unwrap();
        assert_abs_diff_eq!(s.values[[0, 0]], 2.2, epsilon = 1e-12);
        assert_abs_diff_eq!(s.values[[1, 0]], 2.5, epsilon = 1e-12);
    }

    #[test]
    fn saturated_and_duplicate_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = Array2::from_shape_fn((11, 3), |_| rng.random_range(-1.0..1.0));
        let bank: Vec<_> = (0..3)
            .map(|_| materialize(&FilterParams::random(2, &mut rng), 11).unwrap())
            .collect();
        let w = AttentionWeights::new(array![[0.0, 35.0, 1.0]]);
        let s = pool_attended(&bank, &w, v.view()).unwrap();
        let single = pool_single(&bank[1], v.view()).unwrap();
        for (a, b) in s.values.row(0).iter().zip(&single) {
            assert!((a - b).abs() <= 1e-9);
        }

        let twins = vec![bank[0].clone(), bank[0].clone()];
        let w = AttentionWeights::new(array![[0.3, -2.0], [4.0, 1.0]]);
        let s = pool_attended(&twins, &w, v.view()).unwrap();
        let single = pool_single(&bank[0], v.view()).unwrap();
        for row in s.values.rows() {
            for (a, b) in row.iter().zip(&single) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
            }
        }
        let w = AttentionWeights::zeros(1, 3);
        assert!(pool_attended(&twins, &w, v.view()).is_err());
    }

    #[test]
    fn relative_hand_convolution() {
        let k = explicit_filter(array![[0.25], [0.5], [0.25]]);
        let v = array![[1.0], [2.0], [3.0], [4.0], [5.0]];
        let cfg = RelativeConfig::new(3).unwrap();
        let out = pool_relative(&[k], &AttentionWeights::zeros(1, 1), v.view(), cfg).unwrap();
        let got: Vec<f64> = out.iter().copied().collect();
        for (a, e) in got.iter().zip([1.0, 2.0, 3.0, 4.0, 3.5]) {
            assert_abs_diff_eq!(*a, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn relative_unit_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = Array2::from_shape_fn((9, 4), |_| rng.random_range(-3.0..3.0));
        let cfg = RelativeConfig::new(1).unwrap();
        let bank: Vec<_> = (0..2)
            .map(|_| materialize(&FilterParams::random(1, &mut rng), 1).unwrap())
            .collect();
        let w = AttentionWeights::new(array![[0.1, 0.9], [-1.0, 2.0], [0.0, 0.0]]);
        let out = pool_relative(&bank, &w, v.view(), cfg).unwrap();
        for t in 0..9 {
            for c in 0..3 {
                assert_eq!(out.slice(s![t, c, ..]), v.row(t));
            }
        }
    }

    #[test]
    fn relative_constant_input_matches_global_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = RelativeConfig::new(7).unwrap();
        let bank: Vec<_> = (0..2)
            .map(|_| materialize(&FilterParams::random(2, &mut rng), 7).unwrap())
            .collect();
        let w = AttentionWeights::new(array![[0.4, -0.2]]);
        let row = array![1.5, -0.5, 2.0];
        let long = Array2::from_shape_fn((20, 3), |(_, d)| row[d]);
        let short = Array2::from_shape_fn((7, 3), |(_, d)| row[d]);
        let rel = pool_relative(&bank, &w, long.view(), cfg).unwrap();
        let global = pool_attended(&bank, &w, short.view()).unwrap();
        for t in 3..17 {
            for (a, b) in rel.slice(s![t, 0, ..]).iter().zip(global.values.row(0)) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn relative_rejects_bad_lengths() {
        assert!(RelativeConfig::new(4).is_err());
        assert!(RelativeConfig::new(0).is_err());
        let k = explicit_filter(array![[0.5], [0.5], [0.0]]);
        let v = array![[1.0], [2.0]];
        let cfg = RelativeConfig::new(5).unwrap();
        assert!(pool_relative(&[k], &AttentionWeights::zeros(1, 1), v.view(), cfg).is_err());
    }

    #[test]
    fn baseline_examples() {
        let v = array![[1.0], [2.0], [3.0], [4.0]];
        assert_eq!(pool_baseline(BaselinePooling::Mean, v.view()).unwrap(), array![2.5]);
        assert_eq!(pool_baseline(BaselinePooling::Max, v.view()).unwrap(), array![4.0]);
        assert_eq!(
            pool_baseline(BaselinePooling::Pyramid3, v.view()).unwrap(),
            array![2.5, 1.5, 3.5, 1.0, 2.0, 3.0, 4.0]
        );

        let one = array![[0.7, -1.0]];
        let p = pool_baseline(BaselinePooling::Pyramid3, one.view()).unwrap();
        for seg in 0..7 {
            assert_eq!(p.slice(s![seg * 2..seg * 2 + 2]), one.row(0));
        }

        let constant = Array2::from_elem((5, 2), 1.25);
        for kind in [BaselinePooling::Max, BaselinePooling::Mean, BaselinePooling::Pyramid3] {
            let p = pool_baseline(kind, constant.view()).unwrap();
            assert!(p.iter().all(|&x| x == 1.25));
        }
        assert!(pool_baseline(BaselinePooling::Mean, Array2::zeros((0, 2)).view()).is_err());
    }

    #[test]
    fn pyramid_short_sequences_reuse_neighbors() {
        assert_eq!(
            pyramid_segments(2),
            vec![(0, 2), (0, 1), (1, 2), (0, 1), (0, 1), (1, 2), (1, 2)]
        );
        assert_eq!(pyramid_segments(1), vec![(0, 1); 7]);
        assert_eq!(
            pyramid_segments(3),
            vec![(0, 3), (0, 1), (1, 3), (0, 1), (0, 1), (1, 2), (2, 3)]
        );
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = Array2::from_shape_fn((6, 2), |_| rng.random_range(-1.0..1.0));
        let bank: Vec<_> = (0..2)
            .map(|_| materialize(&FilterParams::random(2, &mut rng), 6).unwrap())
            .collect();
        let w = AttentionWeights::new(array![[0.2, 0.1], [1.0, -1.0]]);
        let g = pool_attended_backward(&bank, &w, v.view(), Array2::zeros((2, 4)).view()).unwrap();
        assert!(g.logits.iter().chain(g.features.iter()).all(|&x| x == 0.0));
        assert!(g.filters.iter().all(|f| f.iter().all(|&x| x == 0.0)));
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    /// Central differences of `f` along every entry of `x`.
    fn numeric_grad(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let h = 1e-5;
        let mut out = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            minus.as_slice_mut().unwrap()[idx] -= h;
            out.as_slice_mut().unwrap()[idx] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>, what: &str) {
        for (x, y) in a.iter().zip(b) {
            assert!(rel_err(*x, *y) < 1e-4, "{what}: {x} vs {y}");
        }
    }

    #[test]
    fn attended_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let (t, d, m, n, c) = (
                rng.random_range(1..=10),
                rng.random_range(1..=4),
                rng.random_range(1..=3),
                rng.random_range(1..=2),
                rng.random_range(1..=3),
            );
            let v = Array2::from_shape_fn((t, d), |_| rng.random_range(-1.0..1.0));
            let bank: Vec<_> = (0..m)
                .map(|_| {
                    explicit_filter(Array2::from_shape_fn((t, n), |_| rng.random_range(0.0..1.0)))
                })
                .collect();
            let logits = Array2::from_shape_fn((c, m), |_| rng.random_range(-1.0..1.0));
            let up = Array2::from_shape_fn((c, n * d), |_| rng.random_range(-1.0..1.0));
            let w = AttentionWeights::new(logits.clone());
            let g = pool_attended_backward(&bank, &w, v.view(), up.view()).unwrap();

            let loss = |bank: &[MaterializedFilter], logits: &Array2<f64>, v: &Array2<f64>| {
                let s = pool_attended(bank, &AttentionWeights::new(logits.clone()), v.view())
                    .unwrap();
                (&s.values * &up).sum()
            };
            let nl = numeric_grad(&logits, |l| loss(&bank, l, &v));
            assert_close(&g.logits, &nl, "logits");
            for row in g.logits.rows() {
                assert!(row.sum().abs() < 1e-12);
            }
            let nv = numeric_grad(&v, |x| loss(&bank, &logits, x));
            assert_close(&g.features, &nv, "features");
            for i in 0..m {
                let nf = numeric_grad(&bank[i].values, |vals| {
                    let mut b = bank.clone();
                    b[i].values = vals.clone();
                    loss(&b, &logits, &v)
                });
                assert_close(&g.filters[i], &nf, "filters");
            }
        }
    }

    #[test]
    fn relative_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let (t, d, m, n, c) = (
                rng.random_range(1..=10),
                rng.random_range(1..=3),
                rng.random_range(1..=3),
                rng.random_range(1..=2),
                rng.random_range(1..=3),
            );
            let cfg = RelativeConfig::new(2 * rng.random_range(0..=3) + 1).unwrap();
            let l = cfg.len();
            let v = Array2::from_shape_fn((t, d), |_| rng.random_range(-1.0..1.0));
            let bank: Vec<_> = (0..m)
                .map(|_| {
                    explicit_filter(Array2::from_shape_fn((l, n), |_| rng.random_range(0.0..1.0)))
                })
                .collect();
            let logits = Array2::from_shape_fn((c, m), |_| rng.random_range(-1.0..1.0));
            let up = Array3::from_shape_fn((t, c, n * d), |_| rng.random_range(-1.0..1.0));
            let w = AttentionWeights::new(logits.clone());
            let g = pool_relative_backward(&bank, &w, v.view(), cfg, up.view()).unwrap();

            let loss = |bank: &[MaterializedFilter], logits: &Array2<f64>, v: &Array2<f64>| {
                let r = pool_relative(bank, &AttentionWeights::new(logits.clone()), v.view(), cfg)
                    .unwrap();
                (&r * &up).sum()
            };
            assert_close(&g.logits, &numeric_grad(&logits, |x| loss(&bank, x, &v)), "logits");
            assert_close(&g.features, &numeric_grad(&v, |x| loss(&bank, &logits, x)), "features");
            for i in 0..m {
                let nf = numeric_grad(&bank[i].values, |vals| {
                    let mut b = bank.clone();
                    b[i].values = vals.clone();
                    loss(&b, &logits, &v)
                });
                assert_close(&g.filters[i], &nf, "filters");
            }
        }
    }

    #[test]
    fn relative_scores_match_explicit_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..30 {
            let (t, d, m, n, c) = (
                rng.random_range(1..=12),
                rng.random_range(1..=4),
                rng.random_range(1..=3),
                rng.random_range(1..=2),
                rng.random_range(1..=3),
            );
            let cfg = RelativeConfig::new(2 * rng.random_range(0..=4) + 1).unwrap();
            let v = Array2::from_shape_fn((t, d), |_| rng.random_range(-1.0..1.0));
            let bank: Vec<_> = (0..m)
                .map(|_| materialize(&FilterParams::random(n, &mut rng), cfg.len()).unwrap())
                .collect();
            let w = AttentionWeights::new(Array2::from_shape_fn((c, m), |_| {
                rng.random_range(-1.0..1.0)
            }));
            let proj = Array2::from_shape_fn((c, n * d), |_| rng.random_range(-1.0..1.0));
            let a = w.softmax().unwrap();
            let fast = relative_scores(&bank, a.view(), v.view(), proj.view(), cfg);
            let rep = pool_relative(&bank, &w, v.view(), cfg).unwrap();
            for ti in 0..t {
                for ci in 0..c {
                    let slow = rep.slice(s![ti, ci, ..]).dot(&proj.row(ci));
                    assert_abs_diff_eq!(fast[[ti, ci]], slow, epsilon = 1e-12);
                }
            }

            // Backward agrees with the explicit route through pool_relative_backward.
            let up = Array2::from_shape_fn((t, c), |_| rng.random_range(-1.0..1.0));
            let g = relative_scores_backward(&bank, a.view(), v.view(), proj.view(), cfg, up.view());
            let mut r_up = Array3::zeros((t, c, n * d));
            for ti in 0..t {
                for ci in 0..c {
                    r_up.slice_mut(s![ti, ci, ..]).assign(&(&proj.row(ci) * up[[ti, ci]]));
                }
            }
            let slow = pool_relative_backward(&bank, &w, v.view(), cfg, r_up.view()).unwrap();
            let logits = softmax_backward(a.view(), g.attention.view());
            for (x, y) in logits.iter().zip(&slow.logits) {
                assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
            }
            for (fa, fb) in g.filters.iter().zip(&slow.filters) {
                for (x, y) in fa.iter().zip(fb) {
                    assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
                }
            }
            let mut d_proj = Array2::<f64>::zeros((c, n * d));
            for ti in 0..t {
                for ci in 0..c {
                    d_proj.row_mut(ci).scaled_add(up[[ti, ci]], &rep.slice(s![ti, ci, ..]));
                }
            }
            for (x, y) in g.projection.iter().zip(&d_proj) {
                assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn baseline_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..50 {
            let (t, d) = (rng.random_range(1..=9), rng.random_range(1..=3));
            let v = Array2::from_shape_fn((t, d), |_| rng.random_range(-1.0..1.0));
            for kind in [BaselinePooling::Max, BaselinePooling::Mean, BaselinePooling::Pyramid3] {
                let up = Array1::from_shape_fn(kind.segments() * d, |_| rng.random_range(-1.0..1.0));
                let g = pool_baseline_backward(kind, v.view(), up.view()).unwrap();
                let n = numeric_grad(&v, |x| pool_baseline(kind, x.view()).unwrap().dot(&up));
                assert_close(&g, &n, "baseline");
            }
        }
    }
}
