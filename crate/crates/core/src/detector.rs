//! Per-frame multi-label classification and the binary cross-entropy
//! objective.
//!
//! Row `c` of the classifier weight scores class `c` from the concatenation
//! `[v_t, S_c]`; the first `D` columns read the frame feature and the
//! remaining `K` columns read the context vector.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Logits are clamped to `[-LOGIT_CLAMP, LOGIT_CLAMP]` before the sigmoid and
/// inside the loss.
pub const LOGIT_CLAMP: f64 = 30.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    /// `C×(D+K)` weights of the context-aware head.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    /// `C×D` weights of the frame-only head.
    pub baseline_weight: Array2<f64>,
    pub baseline_bias: Array1<f64>,
}

impl DetectorParams {
    pub fn zeros(classes: usize, features: usize, context: usize) -> Self {
        DetectorParams {
            weight: Array2::zeros((classes, features + context)),
            bias: Array1::zeros(classes),
            baseline_weight: Array2::zeros((classes, features)),
            baseline_bias: Array1::zeros(classes),
        }
    }

    /// Fan-in scaled `Uniform(-a, a)` weights with `a = sqrt(1/fan_in)` and
    /// zero biases.
    pub fn random<R: Rng + ?Sized>(
        classes: usize,
        features: usize,
        context: usize,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(classes, features, context);
        fill_fan_in(&mut p.weight, rng);
        fill_fan_in(&mut p.baseline_weight, rng);
        p
    }

    pub fn classes(&self) -> usize {
        self.bias.len().max(self.baseline_bias.len())
    }
}

pub(crate) fn fill_fan_in<R: Rng + ?Sized>(w: &mut Array2<f64>, rng: &mut R) {
    let fan_in = w.ncols();
    if fan_in == 0 {
        return;
    }
    let a = (1.0 / fan_in as f64).sqrt();
    w.mapv_inplace(|_| rng.random_range(-a..a));
}

/// Binary frame-level labels, `T×C`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    z: Array2<u8>,
}

impl LabelMask {
    pub fn new(z: Array2<u8>) -> Result<Self> {
        if let Some(bad) = z.iter().find(|&&b| b > 1) {
            return Err(Error::InvalidArgument(format!("label value {bad} is not 0 or 1")));
        }
        Ok(LabelMask { z })
    }

    pub fn zeros(frames: usize, classes: usize) -> Self {
        LabelMask {
            z: Array2::zeros((frames, classes)),
        }
    }

    pub fn frames(&self) -> usize {
        self.z.nrows()
    }

    pub fn classes(&self) -> usize {
        self.z.ncols()
    }

    pub fn get(&self, t: usize, c: usize) -> bool {
        self.z[[t, c]] == 1
    }

    pub fn set(&mut self, t: usize, c: usize, active: bool) {
        self.z[[t, c]] = u8::from(active);
    }

    pub fn view(&self) -> ArrayView2<'_, u8> {
        self.z.view()
    }

    pub fn as_f64(&self) -> Array2<f64> {
        self.z.mapv(f64::from)
    }
}

/// Context fed to the classifier next to each frame feature.
#[derive(Clone, Copy, Debug)]
pub enum Context<'a> {
    /// Frame features only.
    None,
    /// One vector shared by all classes and frames (global max/mean/pyramid).
    Shared(ArrayView1<'a, f64>),
    /// One vector per class, `C×K` (global super-events).
    PerClass(ArrayView2<'a, f64>),
    /// One vector per frame and class, `T×C×K` (relative super-events).
    PerFrame(ArrayView3<'a, f64>),
}

impl Context<'_> {
    pub fn dim(&self) -> usize {
        match self {
            Context::None => 0,
            Context::Shared(s) => s.len(),
            Context::PerClass(s) => s.ncols(),
            Context::PerFrame(s) => s.dim().2,
        }
    }

    fn vector(&self, t: usize, c: usize) -> Option<ArrayView1<'_, f64>> {
        match self {
            Context::None => None,
            Context::Shared(s) => Some(s.view()),
            Context::PerClass(s) => Some(s.row(c)),
            Context::PerFrame(s) => Some(s.slice(s![t, c, ..])),
        }
    }

    fn check(&self, frames: usize, classes: usize) -> Result<()> {
        let ok = match self {
            Context::None | Context::Shared(_) => true,
            Context::PerClass(s) => s.nrows() == classes,
            Context::PerFrame(s) => s.dim().0 == frames && s.dim().1 == classes,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::shape("classifier context", format!("{frames} frames x {classes} classes"), format!("{self:?}")))
        }
    }
}

/// Gradient of the context, shaped like the [`Context`] it came from.
#[derive(Clone, Debug, PartialEq)]
pub enum ContextGrad {
    None,
    Shared(Array1<f64>),
    PerClass(Array2<f64>),
    PerFrame(Array3<f64>),
}

fn ordered_dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Unclamped logits `weight[c]·[v_t, ctx] + bias[c]`, `T×C`.
///
/// The frame term, the context term and the bias are summed in that order,
/// each with a fixed left-to-right reduction.
pub fn frame_logits(
    weight: ArrayView2<f64>,
    bias: ArrayView1<f64>,
    v: ArrayView2<f64>,
    ctx: Context<'_>,
) -> Result<Array2<f64>> {
    let (frames, d) = v.dim();
    let classes = weight.nrows();
    if weight.ncols() != d + ctx.dim() || bias.len() != classes {
        return Err(Error::shape(
            "classifier weight",
            format!("{classes}x{}", d + ctx.dim()),
            format!("{}x{} (bias {})", weight.nrows(), weight.ncols(), bias.len()),
        ));
    }
    ctx.check(frames, classes)?;

    let frame_w = weight.slice(s![.., ..d]);
    let ctx_w = weight.slice(s![.., d..]);
    // Context terms that do not depend on the frame are computed once.
    let fixed: Option<Vec<f64>> = match ctx {
        Context::Shared(_) | Context::PerClass(_) => Some(
            (0..classes)
                .map(|c| ordered_dot(ctx_w.row(c), ctx.vector(0, c).unwrap()))
                .collect(),
        ),
        _ => None,
    };

    let mut out = Array2::zeros((frames, classes));
    for t in 0..frames {
        let row = v.row(t);
        for c in 0..classes {
            let mut logit = ordered_dot(frame_w.row(c), row);
            match (&fixed, ctx) {
                (Some(f), _) => logit += f[c],
                (None, Context::PerFrame(_)) => {
                    logit += ordered_dot(ctx_w.row(c), ctx.vector(t, c).unwrap())
                }
                _ => {}
            }
            out[[t, c]] = logit + bias[c];
        }
    }
    Ok(out)
}

pub fn clamp_logit(x: f64) -> f64 {
    x.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Probabilities from logits, clamped so they stay strictly inside `(0, 1)`.
pub fn probabilities(logits: &Array2<f64>) -> Array2<f64> {
    logits.mapv(|x| sigmoid(clamp_logit(x)))
}

/// Frame probabilities of the context-aware head.
pub fn classify_frames(
    params: &DetectorParams,
    v: ArrayView2<f64>,
    context: Context<'_>,
) -> Result<Array2<f64>> {
    let logits = frame_logits(params.weight.view(), params.bias.view(), v, context)?;
    Ok(probabilities(&logits))
}

/// Frame probabilities of the frame-only head.
pub fn classify_frames_baseline(params: &DetectorParams, v: ArrayView2<f64>) -> Result<Array2<f64>> {
    let logits = frame_logits(
        params.baseline_weight.view(),
        params.baseline_bias.view(),
        v,
        Context::None,
    )?;
    Ok(probabilities(&logits))
}

fn check_labels(frames: usize, classes: usize, z: &LabelMask) -> Result<()> {
    if z.frames() != frames || z.classes() != classes {
        return Err(Error::shape(
            "labels",
            format!("{frames}x{classes}"),
            format!("{}x{}", z.frames(), z.classes()),
        ));
    }
    Ok(())
}

/// Mean binary cross-entropy over all `T·C` terms, from logits.
///
/// Each term is `softplus(l) - z·l` with `l` clamped, evaluated as
/// `max(l, 0) - z·l + ln(1 + e^{-|l|})`.
pub fn bce_with_logits(logits: ArrayView2<f64>, z: &LabelMask) -> Result<f64> {
    let (frames, classes) = logits.dim();
    check_labels(frames, classes, z)?;
    if frames * classes == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for ((t, c), &x) in logits.indexed_iter() {
        let l = clamp_logit(x);
        let target = if z.get(t, c) { 1.0 } else { 0.0 };
        total += l.max(0.0) - target * l + (-l.abs()).exp().ln_1p();
    }
    Ok(total / (frames * classes) as f64)
}

/// Mean binary cross-entropy of probabilities `p`; the probabilities are
/// mapped back to logits and scored with [`bce_with_logits`].
pub fn bce_loss(p: ArrayView2<f64>, z: &LabelMask) -> Result<f64> {
    let logits = p.mapv(|q| q.ln() - (-q).ln_1p());
    if logits.iter().any(|l| l.is_nan()) {
        return Err(Error::NonFinite("probabilities"));
    }
    bce_with_logits(logits.view(), z)
}

/// Gradient of [`bce_with_logits`] with respect to the raw logits:
/// `(σ(l) - z)/(T·C)` inside the clamp range and zero outside it.
pub fn bce_logit_grad(logits: ArrayView2<f64>, z: &LabelMask) -> Result<Array2<f64>> {
    let (frames, classes) = logits.dim();
    check_labels(frames, classes, z)?;
    let scale = 1.0 / (frames * classes).max(1) as f64;
    let mut out = Array2::zeros((frames, classes));
    for ((t, c), &x) in logits.indexed_iter() {
        if x.abs() < LOGIT_CLAMP {
            let target = if z.get(t, c) { 1.0 } else { 0.0 };
            out[[t, c]] = (sigmoid(x) - target) * scale;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct DetectorGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub features: Array2<f64>,
    pub context: ContextGrad,
}

/// Backpropagates `d_logits` (`T×C`) through [`frame_logits`].
pub fn detector_backward(
    weight: ArrayView2<f64>,
    v: ArrayView2<f64>,
    ctx: Context<'_>,
    d_logits: ArrayView2<f64>,
) -> Result<DetectorGrad> {
    let (frames, d) = v.dim();
    let classes = weight.nrows();
    let k = ctx.dim();
    if weight.ncols() != d + k || d_logits.dim() != (frames, classes) {
        return Err(Error::shape(
            "detector backward",
            format!("{classes}x{} weight, {frames}x{classes} upstream", d + k),
            format!(
                "{}x{} weight, {}x{} upstream",
                weight.nrows(),
                weight.ncols(),
                d_logits.nrows(),
                d_logits.ncols()
            ),
        ));
    }
    ctx.check(frames, classes)?;

    let frame_w = weight.slice(s![.., ..d]);
    let ctx_w = weight.slice(s![.., d..]);
    let mut d_weight = Array2::zeros((classes, d + k));
    let bias: Array1<f64> = d_logits.sum_axis(ndarray::Axis(0));
    let features = d_logits.dot(&frame_w);
    d_weight
        .slice_mut(s![.., ..d])
        .assign(&d_logits.t().dot(&v));

    let context = match ctx {
        Context::None => ContextGrad::None,
        Context::Shared(sv) => {
            let mut g = Array1::zeros(k);
            for c in 0..classes {
                d_weight.slice_mut(s![c, d..]).scaled_add(bias[c], &sv);
                g.scaled_add(bias[c], &ctx_w.row(c));
            }
            ContextGrad::Shared(g)
        }
        Context::PerClass(sv) => {
            let mut g = Array2::zeros((classes, k));
            for c in 0..classes {
                d_weight.slice_mut(s![c, d..]).scaled_add(bias[c], &sv.row(c));
                g.row_mut(c).scaled_add(bias[c], &ctx_w.row(c));
            }
            ContextGrad::PerClass(g)
        }
        Context::PerFrame(sv) => {
            let mut g = Array3::zeros((frames, classes, k));
            for t in 0..frames {
                for c in 0..classes {
                    let up = d_logits[[t, c]];
                    d_weight
                        .slice_mut(s![c, d..])
                        .scaled_add(up, &sv.slice(s![t, c, ..]));
                    g.slice_mut(s![t, c, ..]).scaled_add(up, &ctx_w.row(c));
                }
            }
            ContextGrad::PerFrame(g)
        }
    };
    Ok(DetectorGrad {
        weight: d_weight,
        bias,
        features,
        context,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_give_one_half() {
        let p = DetectorParams::zeros(3, 2, 4);
        let v = array![[1.0, 2.0], [-3.0, 0.5]];
        let s = Array2::from_elem((3, 4), 0.7);
        let probs = classify_frames(&p, v.view(), Context::PerClass(s.view())).unwrap();
        assert!(probs.iter().all(|&x| x == 0.5));
        let probs = classify_frames_baseline(&p, v.view()).unwrap();
        assert!(probs.iter().all(|&x| x == 0.5));
    }

    #[test]
    fn saturated_bias() {
        let mut p = DetectorParams::zeros(2, 1, 0);
        p.bias[1] = 30.0;
        let v = array![[4.0], [-1.0]];
        let probs = classify_frames(&p, v.view(), Context::None).unwrap();
        assert!(probs.column(1).iter().all(|&x| x >= 1.0 - 1e-9 && x < 1.0));
        p.bias[1] = 1e6;
        let probs = classify_frames(&p, v.view(), Context::None).unwrap();
        assert!(probs.iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn hand_computed_logits() {
        // T = 2, C = 1, D = 1, N = 1.
        let mut p = DetectorParams::zeros(1, 1, 1);
        p.weight = array![[0.5, -1.0]];
        p.bias = array![0.25];
        let v = array![[2.0], [-1.0]];
        let s = array![[0.75]];
        let probs = classify_frames(&p, v.view(), Context::PerClass(s.view())).unwrap();
        // logits: 1.0 - 0.75 + 0.25 = 0.5 and -0.5 - 0.75 + 0.25 = -1.0
        assert_abs_diff_eq!(probs[[0, 0]], 1.0 / (1.0 + (-0.5f64).exp()), epsilon = 1e-15);
        assert_abs_diff_eq!(probs[[1, 0]], 1.0 / (1.0 + 1f64.exp()), epsilon = 1e-15);

        p.baseline_weight = array![[-2.0]];
        p.baseline_bias = array![1.0];
        let probs = classify_frames_baseline(&p, v.view()).unwrap();
        assert_abs_diff_eq!(probs[[0, 0]], 1.0 / (1.0 + 3f64.exp()), epsilon = 1e-15);
        assert_abs_diff_eq!(probs[[1, 0]], 1.0 / (1.0 + (-3f64).exp()), epsilon = 1e-15);
    }

    #[test]
    fn zeroed_context_block_equals_baseline_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = DetectorParams::random(4, 6, 12, &mut rng);
        p.weight.slice_mut(s![.., 6..]).fill(0.0);
        p.baseline_weight = p.weight.slice(s![.., ..6]).to_owned();
        p.bias = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
        p.baseline_bias = p.bias.clone();
        let v = Array2::from_shape_fn((9, 6), |_| rng.random_range(-2.0..2.0));
        let ctx = Array2::from_shape_fn((4, 12), |_| rng.random_range(-2.0..2.0));
        let a = classify_frames(&p, v.view(), Context::PerClass(ctx.view())).unwrap();
        let b = classify_frames_baseline(&p, v.view()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_errors() {
        let p = DetectorParams::zeros(2, 3, 0);
        assert!(classify_frames(&p, Array2::zeros((4, 2)).view(), Context::None).is_err());
        let p = DetectorParams::zeros(2, 3, 2);
        let bad = Array2::zeros((3, 2));
        assert!(
            classify_frames(&p, Array2::zeros((4, 3)).view(), Context::PerClass(bad.view()))
                .is_err()
        );
        let z = LabelMask::zeros(2, 2);
        assert!(bce_with_logits(Array2::zeros((3, 2)).view(), &z).is_err());
        assert!(LabelMask::new(array![[0, 2]]).is_err());
    }

    #[test]
    fn bce_examples() {
        let z = LabelMask::new(array![[1, 0], [0, 1]]).unwrap();
        let perfect = array![[f64::INFINITY, f64::NEG_INFINITY], [-1e9, 1e9]];
        assert!(bce_with_logits(perfect.view(), &z).unwrap() <= 1e-6);
        let exact = z.as_f64();
        assert!(bce_loss(exact.view(), &z).unwrap() <= 1e-6);

        let half = Array2::from_elem((2, 2), 0.5);
        assert_abs_diff_eq!(bce_loss(half.view(), &z).unwrap(), std::f64::consts::LN_2, epsilon = 1e-15);

        let z = LabelMask::new(array![[1, 0]]).unwrap();
        let p = array![[0.8, 0.3]];
        assert_abs_diff_eq!(bce_loss(p.view(), &z).unwrap(), 0.289_909_247_626_471_1, epsilon = 1e-12);
    }

    #[test]
    fn gradient_vanishes_at_the_optimum() {
        let z = LabelMask::new(array![[1, 0], [0, 1]]).unwrap();
        let logits = array![[45.0, -45.0], [-31.0, 31.0]];
        let g = bce_logit_grad(logits.view(), &z).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn bias_gradient_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for classes in [1usize, 3] {
            let (frames, d) = (7, 2);
            let logits = Array2::from_shape_fn((frames, classes), |_| rng.random_range(-3.0..3.0));
            let z = LabelMask::new(Array2::from_shape_fn((frames, classes), |_| {
                u8::from(rng.random_bool(0.4))
            }))
            .unwrap();
            let g = bce_logit_grad(logits.view(), &z).unwrap();
            let w = Array2::zeros((classes, d));
            let grad = detector_backward(w.view(), Array2::zeros((frames, d)).view(), Context::None, g.view()).unwrap();
            let p = probabilities(&logits);
            for c in 0..classes {
                let mean: f64 = (0..frames)
                    .map(|t| p[[t, c]] - if z.get(t, c) { 1.0 } else { 0.0 })
                    .sum::<f64>()
                    / frames as f64;
                assert_abs_diff_eq!(grad.bias[c], mean / classes as f64, epsilon = 1e-15);
            }
        }
    }

    fn loss_of(
        weight: &Array2<f64>,
        bias: &Array1<f64>,
        v: &Array2<f64>,
        ctx: Context<'_>,
        z: &LabelMask,
    ) -> f64 {
        let l = frame_logits(weight.view(), bias.view(), v.view(), ctx).unwrap();
        bce_with_logits(l.view(), z).unwrap()
    }

    fn check(a: f64, n: f64, what: &str) {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        assert!(rel < 1e-4, "{what}: analytic {a} numeric {n}");
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = 1e-5;
        for trial in 0..30 {
            let (t, d, c, k) = (
                rng.random_range(1..=6),
                rng.random_range(1..=3),
                rng.random_range(1..=3),
                rng.random_range(1..=4),
            );
            let v = Array2::from_shape_fn((t, d), |_| rng.random_range(-1.0..1.0));
            let z = LabelMask::new(Array2::from_shape_fn((t, c), |_| u8::from(rng.random_bool(0.5))))
                .unwrap();
            let shared = Array1::from_shape_fn(k, |_| rng.random_range(-1.0..1.0));
            let per_class = Array2::from_shape_fn((c, k), |_| rng.random_range(-1.0..1.0));
            let per_frame = Array3::from_shape_fn((t, c, k), |_| rng.random_range(-1.0..1.0));
            let ctx = match trial % 4 {
                0 => Context::None,
                1 => Context::Shared(shared.view()),
                2 => Context::PerClass(per_class.view()),
                _ => Context::PerFrame(per_frame.view()),
            };
            let weight = Array2::from_shape_fn((c, d + ctx.dim()), |_| rng.random_range(-1.0..1.0));
            let bias = Array1::from_shape_fn(c, |_| rng.random_range(-1.0..1.0));
            let logits = frame_logits(weight.view(), bias.view(), v.view(), ctx).unwrap();
            let up = bce_logit_grad(logits.view(), &z).unwrap();
            let g = detector_backward(weight.view(), v.view(), ctx, up.view()).unwrap();

            for i in 0..weight.len() {
                let (mut wp, mut wm) = (weight.clone(), weight.clone());
                wp.as_slice_mut().unwrap()[i] += h;
                wm.as_slice_mut().unwrap()[i] -= h;
                let n = (loss_of(&wp, &bias, &v, ctx, &z) - loss_of(&wm, &bias, &v, ctx, &z)) / (2.0 * h);
                check(g.weight.as_slice().unwrap()[i], n, "weight");
            }
            for i in 0..c {
                let (mut bp, mut bm) = (bias.clone(), bias.clone());
                bp[i] += h;
                bm[i] -= h;
                let n = (loss_of(&weight, &bp, &v, ctx, &z) - loss_of(&weight, &bm, &v, ctx, &z)) / (2.0 * h);
                check(g.bias[i], n, "bias");
            }
            for i in 0..v.len() {
                let (mut vp, mut vm) = (v.clone(), v.clone());
                vp.as_slice_mut().unwrap()[i] += h;
                vm.as_slice_mut().unwrap()[i] -= h;
                let n = (loss_of(&weight, &bias, &vp, ctx, &z) - loss_of(&weight, &bias, &vm, ctx, &z)) / (2.0 * h);
                check(g.features.as_slice().unwrap()[i], n, "features");
            }
            if let (Context::PerClass(_), ContextGrad::PerClass(gs)) = (ctx, &g.context) {
                for i in 0..per_class.len() {
                    let (mut sp, mut sm) = (per_class.clone(), per_class.clone());
                    sp.as_slice_mut().unwrap()[i] += h;
                    sm.as_slice_mut().unwrap()[i] -= h;
                    let n = (loss_of(&weight, &bias, &v, Context::PerClass(sp.view()), &z)
                        - loss_of(&weight, &bias, &v, Context::PerClass(sm.view()), &z))
                        / (2.0 * h);
                    check(gs.as_slice().unwrap()[i], n, "context");
                }
            }
            if let (Context::Shared(_), ContextGrad::Shared(gs)) = (ctx, &g.context) {
                for i in 0..k {
                    let (mut sp, mut sm) = (shared.clone(), shared.clone());
                    sp[i] += h;
                    sm[i] -= h;
                    let n = (loss_of(&weight, &bias, &v, Context::Shared(sp.view()), &z)
                        - loss_of(&weight, &bias, &v, Context::Shared(sm.view()), &z))
                        / (2.0 * h);
                    check(gs[i], n, "shared context");
                }
            }
            if let (Context::PerFrame(_), ContextGrad::PerFrame(gs)) = (ctx, &g.context) {
                for i in 0..per_frame.len() {
                    let (mut sp, mut sm) = (per_frame.clone(), per_frame.clone());
                    sp.as_slice_mut().unwrap()[i] += h;
                    sm.as_slice_mut().unwrap()[i] -= h;
                    let n = (loss_of(&weight, &bias, &v, Context::PerFrame(sp.view()), &z)
                        - loss_of(&weight, &bias, &v, Context::PerFrame(sm.view()), &z))
                        / (2.0 * h);
                    check(gs.as_slice().unwrap()[i], n, "frame context");
                }
            }
        }
    }
}
