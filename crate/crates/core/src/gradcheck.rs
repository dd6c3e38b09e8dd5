//! Central finite-difference verification of the analytic gradients.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::detector::LabelMask;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{Model, ModelShape, ParamGroup, Variant};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
/// Floor of the relative-error denominator.
pub const GUARD: f64 = 1e-8;

/// Widths closer than this to the kink of `|tanh γ|` are redrawn, so the
/// finite-difference stencil stays on one side.
const KINK_MARGIN: f64 = 1e-2;

/// One model with one labelled video; dropout never applies.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckInstance {
    pub model: Model,
    pub features: Array2<f64>,
    pub labels: LabelMask,
}

impl GradcheckInstance {
    /// Random instance with `T ≤ 20`, `D ≤ 8`, `C ≤ 4`, `M ≤ 3`, `N ≤ 2` and
    /// odd `L ≤ 7`.
    pub fn random(variant: Variant, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = rng.random_range(2..=20);
        let shape = ModelShape {
            features: rng.random_range(1..=8),
            classes: rng.random_range(1..=4),
            filters: rng.random_range(1..=3),
            distributions: rng.random_range(1..=2),
            relative_len: 2 * rng.random_range(0..=3) + 1,
        };
        let mut model = Model::new(variant, shape, &mut rng).expect("sizes are positive");
        for f in &mut model.filters {
            for x in &mut f.centers {
                *x = rng.random_range(-1.5..1.5);
            }
            for g in &mut f.widths {
                *g = loop {
                    let g: f64 = rng.random_range(-1.5..1.5);
                    if g.abs() > KINK_MARGIN {
                        break g;
                    }
                };
            }
        }
        if let Some(a) = &mut model.attention {
            a.logits.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        }
        let mut flat = model.flat_params();
        let bias_len = model.param_groups().last().map_or(0, |&(_, n)| n);
        let start = flat.len() - bias_len;
        for b in &mut flat[start..] {
            *b = rng.random_range(-0.5..0.5);
        }
        model.set_flat_params(&flat).expect("same layout");
        let features = Array2::from_shape_fn((frames, shape.features), |_| rng.sample(StandardNormal));
        let labels = LabelMask::new(Array2::from_shape_fn((frames, shape.classes), |_| {
            u8::from(rng.random_bool(0.4))
        }))
        .expect("labels are binary");
        GradcheckInstance {
            model,
            features,
            labels,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: ParamGroup,
    pub params: usize,
    pub max_rel_error: f64,
    /// Index within the group of the worst parameter.
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub variant: Variant,
    pub frames: usize,
    pub shape: ModelShape,
    pub step: f64,
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn failing_groups(&self) -> Vec<ParamGroup> {
        self.groups.iter().filter(|g| !g.passed).map(|g| g.group).collect()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GUARD)
}

/// Compares `analytic` against central differences of [`Model::loss`].
pub fn gradcheck_with<F>(instance: &GradcheckInstance, exec: Execution, analytic: F) -> Result<GradcheckReport>
where
    F: Fn(&Model, ArrayView2<f64>, &LabelMask) -> Result<(f64, Vec<f64>)>,
{
    let GradcheckInstance {
        model,
        features,
        labels,
    } = instance;
    let (_, grad) = analytic(model, features.view(), labels)?;
    let base = model.flat_params();
    if grad.len() != base.len() {
        return Err(Error::shape("analytic gradient", base.len(), grad.len()));
    }
    let indices: Vec<usize> = (0..base.len()).collect();
    let numeric = exec.map(&indices, |_, &i| -> Result<f64> {
        let mut m = model.clone();
        let mut p = base.clone();
        p[i] = base[i] + STEP;
        m.set_flat_params(&p)?;
        let up = m.loss(features.view(), labels)?;
        p[i] = base[i] - STEP;
        m.set_flat_params(&p)?;
        let down = m.loss(features.view(), labels)?;
        Ok((up - down) / (2.0 * STEP))
    });
    let numeric = numeric.into_iter().collect::<Result<Vec<f64>>>()?;

    let mut groups = Vec::new();
    let mut offset = 0;
    for (group, len) in model.param_groups() {
        let (worst_index, max_rel_error) = (0..len)
            .map(|k| (k, relative_error(grad[offset + k], numeric[offset + k])))
            .fold((0, 0.0), |best, cur| if cur.1 > best.1 || cur.1.is_nan() { cur } else { best });
        groups.push(GroupReport {
            group,
            params: len,
            max_rel_error,
            worst_index,
            passed: max_rel_error < TOLERANCE,
        });
        offset += len;
    }
    let passed = groups.iter().all(|g| g.passed);
    Ok(GradcheckReport {
        variant: model.variant,
        frames: features.nrows(),
        shape: model.shape,
        step: STEP,
        tolerance: TOLERANCE,
        groups,
        passed,
    })
}

/// Checks [`Model::loss_and_grad`].
pub fn gradcheck(instance: &GradcheckInstance, exec: Execution) -> Result<GradcheckReport> {
    gradcheck_with(instance, exec, |m, v, z| m.loss_and_grad(v, z))
}
