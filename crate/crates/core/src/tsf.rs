//! Temporal structure filters.
//!
//! A filter is a bank of `N` Cauchy distributions over frame positions
//! `t ∈ {0, …, T-1}`. Each distribution has an unconstrained center
//! parameter `x` and width parameter `gamma`, which are squashed into a frame
//! position `x̂ = (T-1)(tanh x + 1)/2` and a width `γ̂ = exp(1 - 2|tanh γ|)`.
//! Every column of the materialized `T×N` matrix is normalized to sum to one.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learnable parameters of one temporal structure filter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterParams {
    pub centers: Vec<f64>,
    pub widths: Vec<f64>,
}

impl FilterParams {
    pub fn new(centers: Vec<f64>, widths: Vec<f64>) -> Result<Self> {
        if centers.len() != widths.len() {
            return Err(Error::shape("filter params", centers.len(), widths.len()));
        }
        let params = FilterParams { centers, widths };
        params.check_finite()?;
        Ok(params)
    }

    pub fn zeros(n: usize) -> Self {
        FilterParams {
            centers: vec![0.0; n],
            widths: vec![0.0; n],
        }
    }

    /// Draws centers and widths from `Uniform(-0.5, 0.5)`.
    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let centers = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        let widths = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        FilterParams { centers, widths }
    }

    /// Number of distributions.
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    fn check_finite(&self) -> Result<()> {
        if self
            .centers
            .iter()
            .chain(&self.widths)
            .all(|v| v.is_finite())
        {
            Ok(())
        } else {
            Err(Error::NonFinite("filter params"))
        }
    }
}

/// A filter evaluated at a concrete sequence length.
#[derive(Clone, Debug, PartialEq)]
pub struct MaterializedFilter {
    /// `T×N`; column `n` is the normalized density of distribution `n`.
    pub values: Array2<f64>,
    pub centers_hat: Vec<f64>,
    pub widths_hat: Vec<f64>,
    /// Per-column normalizers `Z_n`.
    pub norm: Vec<f64>,
}

impl MaterializedFilter {
    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn distributions(&self) -> usize {
        self.values.ncols()
    }
}

/// Frame position of a center parameter for a sequence of `len` frames.
pub fn center_position(x: f64, len: usize) -> f64 {
    (len as f64 - 1.0) * (x.tanh() + 1.0) / 2.0
}

/// Width scale of a width parameter; always in `(1/e, e]`.
pub fn width_scale(gamma: f64) -> f64 {
    (1.0 - 2.0 * gamma.tanh().abs()).exp()
}

fn cauchy(t: f64, center: f64, width: f64) -> f64 {
    let u = (t - center) / width;
    1.0 / (PI * width * (1.0 + u * u))
}

pub fn materialize(params: &FilterParams, len: usize) -> Result<MaterializedFilter> {
    if len == 0 {
        return Err(Error::InvalidArgument(
            "filter length must be at least 1".into(),
        ));
    }
    if params.centers.len() != params.widths.len() {
        return Err(Error::shape(
            "filter params",
            params.centers.len(),
            params.widths.len(),
        ));
    }
    params.check_finite()?;

    let n = params.len();
    let mut values = Array2::zeros((len, n));
    let mut centers_hat = Vec::with_capacity(n);
    let mut widths_hat = Vec::with_capacity(n);
    let mut norm = Vec::with_capacity(n);
    for k in 0..n {
        let center = center_position(params.centers[k], len);
        let width = width_scale(params.widths[k]);
        let mut z = 0.0;
        for t in 0..len {
            let g = cauchy(t as f64, center, width);
            values[[t, k]] = g;
            z += g;
        }
        values.column_mut(k).mapv_inplace(|g| g / z);
        centers_hat.push(center);
        widths_hat.push(width);
        norm.push(z);
    }
    Ok(MaterializedFilter {
        values,
        centers_hat,
        widths_hat,
        norm,
    })
}

/// Gradient of a scalar loss with respect to the filter parameters, given
/// the gradient `upstream` with respect to the materialized `T×N` values.
///
/// The kink of `|tanh γ|` at `γ = 0` takes subgradient 0.
pub fn filter_backward(
    params: &FilterParams,
    len: usize,
    upstream: ArrayView2<f64>,
) -> Result<FilterParams> {
    let filter = materialize(params, len)?;
    filter_backward_from(params, &filter, upstream)
}

/// Same as [`filter_backward`], reusing an already materialized filter.
pub fn filter_backward_from(
    params: &FilterParams,
    filter: &MaterializedFilter,
    upstream: ArrayView2<f64>,
) -> Result<FilterParams> {
    let (len, n) = filter.values.dim();
    if upstream.dim() != (len, n) || params.len() != n {
        return Err(Error::shape(
            "filter upstream",
            format!("{len}x{n}"),
            format!("{}x{}", upstream.nrows(), upstream.ncols()),
        ));
    }

    let mut grad = FilterParams::zeros(n);
    for k in 0..n {
        let center = filter.centers_hat[k];
        let width = filter.widths_hat[k];
        let z = filter.norm[k];

        // d/dg_t of sum_s U_s g_s / Z is (U_t - <U, F>) / Z.
        let mean: f64 = (0..len)
            .map(|t| upstream[[t, k]] * filter.values[[t, k]])
            .sum();

        let mut d_center = 0.0;
        let mut d_width = 0.0;
        for t in 0..len {
            let d_g = (upstream[[t, k]] - mean) / z;
            let g = filter.values[[t, k]] * z;
            let u = (t as f64 - center) / width;
            let q = 1.0 + u * u;
            d_center += d_g * g * 2.0 * u / (q * width);
            d_width += d_g * (-g * (1.0 - u * u) / (q * width));
        }

        let tx = params.centers[k].tanh();
        grad.centers[k] = d_center * (len as f64 - 1.0) / 2.0 * (1.0 - tx * tx);

        let tg = params.widths[k].tanh();
        let sign = if tg > 0.0 {
            1.0
        } else if tg < 0.0 {
            -1.0
        } else {
            0.0
        };
        grad.widths[k] = d_width * width * (-2.0 * sign * (1.0 - tg * tg));
    }
    Ok(grad)
}
