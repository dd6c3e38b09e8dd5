//! Trainable detector variants.
//!
//! A [`Model`] combines a context builder (nothing, a fixed pooling, per-class
//! filters, or attended shared filters) with a linear per-frame classifier.
//! All learnable values can be viewed as one flat vector whose layout is
//! given by [`Model::param_groups`].

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{
    bce_logit_grad, bce_with_logits, detector_backward, fill_fan_in, frame_logits, probabilities,
    Context, DetectorParams, LabelMask,
};
use crate::error::{Error, Result};
use crate::superevent::{
    pool_attended, pool_attended_backward, pool_baseline, pool_single, pool_single_backward,
    relative_scores, relative_scores_backward, softmax_backward, AttentionWeights,
    BaselinePooling, RelativeConfig,
};
use crate::tsf::{filter_backward_from, materialize, FilterParams, MaterializedFilter};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Frame features only.
    Baseline,
    /// Global max pooling as context.
    Max,
    /// Global mean pooling as context.
    Mean,
    /// Level-3 temporal pyramid of means as context.
    Pyramid3,
    /// One temporal structure filter per class.
    Single,
    /// Shared filters mixed by per-class soft attention.
    Attended,
    /// Shared fixed-length filters applied around every frame.
    Relative,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Baseline,
        Variant::Max,
        Variant::Mean,
        Variant::Pyramid3,
        Variant::Single,
        Variant::Attended,
        Variant::Relative,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Max => "max",
            Variant::Mean => "mean",
            Variant::Pyramid3 => "pyramid3",
            Variant::Single => "single",
            Variant::Attended => "attended",
            Variant::Relative => "relative",
        }
    }

    pub fn pooling(self) -> Option<BaselinePooling> {
        match self {
            Variant::Max => Some(BaselinePooling::Max),
            Variant::Mean => Some(BaselinePooling::Mean),
            Variant::Pyramid3 => Some(BaselinePooling::Pyramid3),
            _ => None,
        }
    }

    pub fn has_filters(self) -> bool {
        matches!(self, Variant::Single | Variant::Attended | Variant::Relative)
    }

    pub fn has_attention(self) -> bool {
        matches!(self, Variant::Attended | Variant::Relative)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?}")))
    }
}

/// Dimensions of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    /// Feature dimension `D`.
    pub features: usize,
    /// Class count `C`.
    pub classes: usize,
    /// Shared filter count `M` (attended and relative variants).
    pub filters: usize,
    /// Cauchy distributions per filter `N`.
    pub distributions: usize,
    /// Kernel length `L` of the relative variant.
    pub relative_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Filters,
    Attention,
    Weight,
    Bias,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Filters => "filters",
            ParamGroup::Attention => "attention",
            ParamGroup::Weight => "classifier weight",
            ParamGroup::Bias => "classifier bias",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub variant: Variant,
    pub shape: ModelShape,
    /// `C` filters for [`Variant::Single`], `M` for attended and relative,
    /// none otherwise.
    pub filters: Vec<FilterParams>,
    pub attention: Option<AttentionWeights>,
    /// Only the head used by the variant is populated; the frame-only head
    /// for [`Variant::Baseline`] and the context head for all others. The
    /// unused head has zero size.
    pub detector: DetectorParams,
}

/// Intermediate values of one forward pass.
enum Forward {
    Plain,
    Shared(ndarray::Array1<f64>),
    PerClass {
        filters: Vec<MaterializedFilter>,
        rep: Array2<f64>,
    },
    Relative {
        filters: Vec<MaterializedFilter>,
        attention: Array2<f64>,
    },
}

impl Model {
    pub fn new<R: Rng + ?Sized>(variant: Variant, shape: ModelShape, rng: &mut R) -> Result<Self> {
        let ModelShape {
            features: d,
            classes: c,
            filters: m,
            distributions: n,
            relative_len,
        } = shape;
        if d == 0 || c == 0 {
            return Err(Error::InvalidArgument(
                "feature dimension and class count must be positive".into(),
            ));
        }
        if variant.has_filters() && n == 0 {
            return Err(Error::InvalidArgument("distributions per filter must be positive".into()));
        }
        if variant.has_attention() && m == 0 {
            return Err(Error::InvalidArgument("filter count must be positive".into()));
        }
        if variant == Variant::Relative {
            RelativeConfig::new(relative_len)?;
        }

        let bank = match variant {
            Variant::Single => c,
            Variant::Attended | Variant::Relative => m,
            _ => 0,
        };
        let filters = (0..bank).map(|_| FilterParams::random(n, rng)).collect();
        let attention = variant
            .has_attention()
            .then(|| AttentionWeights::zeros(c, m));

        let mut detector = DetectorParams {
            weight: Array2::zeros((0, 0)),
            bias: ndarray::Array1::zeros(0),
            baseline_weight: Array2::zeros((0, 0)),
            baseline_bias: ndarray::Array1::zeros(0),
        };
        if variant == Variant::Baseline {
            detector.baseline_weight = Array2::zeros((c, d));
            detector.baseline_bias = ndarray::Array1::zeros(c);
            fill_fan_in(&mut detector.baseline_weight, rng);
        } else {
            let k = Self::context_dim_for(variant, shape);
            detector.weight = Array2::zeros((c, d + k));
            detector.bias = ndarray::Array1::zeros(c);
            fill_fan_in(&mut detector.weight, rng);
        }
        Ok(Model {
            variant,
            shape,
            filters,
            attention,
            detector,
        })
    }

    fn context_dim_for(variant: Variant, shape: ModelShape) -> usize {
        let d = shape.features;
        match variant {
            Variant::Baseline => 0,
            Variant::Max | Variant::Mean => d,
            Variant::Pyramid3 => 7 * d,
            Variant::Single | Variant::Attended | Variant::Relative => shape.distributions * d,
        }
    }

    /// Length `K` of the context vector read by the classifier.
    pub fn context_dim(&self) -> usize {
        Self::context_dim_for(self.variant, self.shape)
    }

    fn head(&self) -> (ArrayView2<'_, f64>, ndarray::ArrayView1<'_, f64>) {
        if self.variant == Variant::Baseline {
            (self.detector.baseline_weight.view(), self.detector.baseline_bias.view())
        } else {
            (self.detector.weight.view(), self.detector.bias.view())
        }
    }

    fn relative_config(&self) -> Result<RelativeConfig> {
        RelativeConfig::new(self.shape.relative_len)
    }

    fn check_features(&self, v: &ArrayView2<f64>) -> Result<()> {
        if v.ncols() != self.shape.features {
            return Err(Error::shape("feature dimension", self.shape.features, v.ncols()));
        }
        if v.nrows() == 0 {
            return Err(Error::InvalidArgument("empty feature sequence".into()));
        }
        Ok(())
    }

    fn forward(&self, v: ArrayView2<f64>) -> Result<(Array2<f64>, Forward)> {
        self.check_features(&v)?;
        let frames = v.nrows();
        let d = self.shape.features;
        let (weight, bias) = self.head();
        match self.variant {
            Variant::Baseline => Ok((frame_logits(weight, bias, v, Context::None)?, Forward::Plain)),
            Variant::Max | Variant::Mean | Variant::Pyramid3 => {
                let pooled = pool_baseline(self.variant.pooling().unwrap(), v)?;
                let logits = frame_logits(weight, bias, v, Context::Shared(pooled.view()))?;
                Ok((logits, Forward::Shared(pooled)))
            }
            Variant::Single | Variant::Attended => {
                let filters = self
                    .filters
                    .iter()
                    .map(|p| materialize(p, frames))
                    .collect::<Result<Vec<_>>>()?;
                let rep = if self.variant == Variant::Single {
                    let mut rep = Array2::zeros((self.shape.classes, self.context_dim()));
                    for (f, mut row) in filters.iter().zip(rep.rows_mut()) {
                        row.assign(&pool_single(f, v)?);
                    }
                    rep
                } else {
                    pool_attended(&filters, self.attention.as_ref().unwrap(), v)?.values
                };
                let logits = frame_logits(weight, bias, v, Context::PerClass(rep.view()))?;
                Ok((logits, Forward::PerClass { filters, rep }))
            }
            Variant::Relative => {
                let cfg = self.relative_config()?;
                let filters = self
                    .filters
                    .iter()
                    .map(|p| materialize(p, cfg.len()))
                    .collect::<Result<Vec<_>>>()?;
                let attention = self.attention.as_ref().unwrap().softmax()?;
                let mut logits =
                    frame_logits(weight.slice(s![.., ..d]), bias, v, Context::None)?;
                logits += &relative_scores(
                    &filters,
                    attention.view(),
                    v,
                    weight.slice(s![.., d..]),
                    cfg,
                );
                Ok((logits, Forward::Relative { filters, attention }))
            }
        }
    }

    /// Raw per-frame logits, `T×C`.
    pub fn logits(&self, v: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(v)?.0)
    }

    /// Per-frame class probabilities, `T×C`.
    pub fn predict(&self, v: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(probabilities(&self.logits(v)?))
    }

    pub fn loss(&self, v: ArrayView2<f64>, z: &LabelMask) -> Result<f64> {
        bce_with_logits(self.logits(v)?.view(), z)
    }

    /// Loss and its gradient, laid out like [`Model::flat_params`].
    pub fn loss_and_grad(&self, v: ArrayView2<f64>, z: &LabelMask) -> Result<(f64, Vec<f64>)> {
        let (logits, cache) = self.forward(v)?;
        let loss = bce_with_logits(logits.view(), z)?;
        let up = bce_logit_grad(logits.view(), z)?;
        let d = self.shape.features;
        let (weight, _) = self.head();

        let mut filter_grads: Vec<FilterParams> = Vec::new();
        let mut attention_grad: Option<Array2<f64>> = None;
        let (weight_grad, bias_grad) = match cache {
            Forward::Plain => {
                let g = detector_backward(weight, v, Context::None, up.view())?;
                (g.weight, g.bias)
            }
            Forward::Shared(pooled) => {
                let g = detector_backward(weight, v, Context::Shared(pooled.view()), up.view())?;
                (g.weight, g.bias)
            }
            Forward::PerClass { filters, rep } => {
                let g = detector_backward(weight, v, Context::PerClass(rep.view()), up.view())?;
                let d_rep = match g.context {
                    crate::detector::ContextGrad::PerClass(r) => r,
                    _ => unreachable!("per-class context yields a per-class gradient"),
                };
                let value_grads = if self.variant == Variant::Single {
                    filters
                        .iter()
                        .zip(d_rep.rows())
                        .map(|(f, up)| pool_single_backward(f, v, up).map(|(df, _)| df))
                        .collect::<Result<Vec<_>>>()?
                } else {
                    let attention = self.attention.as_ref().unwrap();
                    let pg = pool_attended_backward(&filters, attention, v, d_rep.view())?;
                    attention_grad = Some(pg.logits);
                    pg.filters
                };
                for ((p, f), df) in self.filters.iter().zip(&filters).zip(&value_grads) {
                    filter_grads.push(filter_backward_from(p, f, df.view())?);
                }
                (g.weight, g.bias)
            }
            Forward::Relative { filters, attention } => {
                let cfg = self.relative_config()?;
                let g = detector_backward(weight.slice(s![.., ..d]), v, Context::None, up.view())?;
                let rg = relative_scores_backward(
                    &filters,
                    attention.view(),
                    v,
                    weight.slice(s![.., d..]),
                    cfg,
                    up.view(),
                );
                attention_grad = Some(softmax_backward(attention.view(), rg.attention.view()));
                for ((p, f), df) in self.filters.iter().zip(&filters).zip(&rg.filters) {
                    filter_grads.push(filter_backward_from(p, f, df.view())?);
                }
                let mut w = Array2::zeros(weight.dim());
                w.slice_mut(s![.., ..d]).assign(&g.weight);
                w.slice_mut(s![.., d..]).assign(&rg.projection);
                (w, g.bias)
            }
        };

        let mut flat = Vec::with_capacity(self.param_count());
        for g in &filter_grads {
            flat.extend_from_slice(&g.centers);
            flat.extend_from_slice(&g.widths);
        }
        if let Some(a) = attention_grad {
            flat.extend(a.iter());
        }
        flat.extend(weight_grad.iter());
        flat.extend(bias_grad.iter());
        debug_assert_eq!(flat.len(), self.param_count());
        Ok((loss, flat))
    }

    /// Parameter groups with their lengths, in flat-vector order.
    pub fn param_groups(&self) -> Vec<(ParamGroup, usize)> {
        let mut out = Vec::with_capacity(4);
        let filter_len: usize = self.filters.iter().map(|f| 2 * f.len()).sum();
        if filter_len > 0 {
            out.push((ParamGroup::Filters, filter_len));
        }
        if let Some(a) = &self.attention {
            out.push((ParamGroup::Attention, a.logits.len()));
        }
        let (w, b) = self.head();
        out.push((ParamGroup::Weight, w.len()));
        out.push((ParamGroup::Bias, b.len()));
        out
    }

    /// Named tensors with their shapes, in flat-vector order.
    pub fn tensor_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, f) in self.filters.iter().enumerate() {
            out.push((format!("filters/{i}/centers"), vec![f.len()]));
            out.push((format!("filters/{i}/widths"), vec![f.len()]));
        }
        if let Some(a) = &self.attention {
            out.push(("attention/logits".into(), vec![a.classes(), a.filters()]));
        }
        let head = if self.variant == Variant::Baseline { "baseline" } else { "classifier" };
        let (w, b) = self.head();
        out.push((format!("{head}/weight"), vec![w.nrows(), w.ncols()]));
        out.push((format!("{head}/bias"), vec![b.len()]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_groups().iter().map(|(_, n)| n).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for f in &self.filters {
            flat.extend_from_slice(&f.centers);
            flat.extend_from_slice(&f.widths);
        }
        if let Some(a) = &self.attention {
            flat.extend(a.logits.iter());
        }
        let (w, b) = self.head();
        flat.extend(w.iter());
        flat.extend(b.iter());
        flat
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape("flat parameters", self.param_count(), flat.len()));
        }
        let mut rest = flat;
        let mut take = |n: usize| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head
        };
        for f in &mut self.filters {
            let n = f.len();
            f.centers.copy_from_slice(take(n));
            f.widths.copy_from_slice(take(n));
        }
        if let Some(a) = &mut self.attention {
            let n = a.logits.len();
            for (dst, src) in a.logits.iter_mut().zip(take(n)) {
                *dst = *src;
            }
        }
        let baseline = self.variant == Variant::Baseline;
        let (w, b) = if baseline {
            (&mut self.detector.baseline_weight, &mut self.detector.baseline_bias)
        } else {
            (&mut self.detector.weight, &mut self.detector.bias)
        };
        let n = w.len();
        for (dst, src) in w.iter_mut().zip(take(n)) {
            *dst = *src;
        }
        let n = b.len();
        for (dst, src) in b.iter_mut().zip(take(n)) {
            *dst = *src;
        }
        Ok(())
    }

    /// Per-class combined filters `Σ_m A[c,m]·F_m` materialized at `len`
    /// frames; for [`Variant::Single`] the class's own filter.
    pub fn combined_filters(&self, len: usize) -> Result<Vec<Array2<f64>>> {
        let mats = self
            .filters
            .iter()
            .map(|p| materialize(p, len))
            .collect::<Result<Vec<_>>>()?;
        match self.variant {
            Variant::Single => Ok(mats.into_iter().map(|m| m.values).collect()),
            Variant::Attended | Variant::Relative => {
                let a = self.attention.as_ref().unwrap().softmax()?;
                Ok(a.rows()
                    .into_iter()
                    .map(|row| {
                        let mut out = Array2::zeros((len, self.shape.distributions));
                        for (w, m) in row.iter().zip(&mats) {
                            out.scaled_add(*w, &m.values);
                        }
                        out
                    })
                    .collect())
            }
            v => Err(Error::InvalidArgument(format!(
                "variant {v} has no temporal structure filters"
            ))),
        }
    }
}
