//! Frame-level average precision.
//!
//! Frames of every video are pooled per class before ranking. AP is the mean
//! of the precision at each positive's rank, with ties in score ordered by
//! `(video, frame)`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::Model;

pub const REPORT_SCHEMA: &str = "superevents.eval/1";

/// Exact average precision, or `None` when there are no positives.
///
/// Equal scores keep their input order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub frames: String,
    pub ap: String,
    pub ties: String,
    pub missing_classes: String,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            frames: "pooled across all videos per class".into(),
            ap: "exact precision at each positive rank, no interpolation".into(),
            ties: "stable by (video index, frame index)".into(),
            missing_classes: "classes without positive frames are excluded from the mean".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub protocol: Protocol,
    pub class_names: Vec<String>,
    /// `null` for classes without positive frames.
    pub ap_per_class: Vec<Option<f64>>,
    pub map: f64,
    pub evaluated_classes: Vec<usize>,
    pub excluded_classes: Vec<usize>,
    pub videos: usize,
    pub frames: usize,
    /// Training configuration of the evaluated model, when known.
    #[serde(default)]
    pub config: Option<serde_json::Value>,
}

impl EvalReport {
    /// Builds a report from per-class scores and labels over pooled frames.
    pub fn from_scores(
        class_names: Vec<String>,
        scores: &[Vec<f64>],
        labels: &[Vec<bool>],
        videos: usize,
    ) -> Result<Self> {
        let ap_per_class: Vec<Option<f64>> = scores
            .iter()
            .zip(labels)
            .map(|(s, l)| average_precision(s, l))
            .collect();
        let evaluated_classes: Vec<usize> =
            (0..ap_per_class.len()).filter(|&c| ap_per_class[c].is_some()).collect();
        let excluded_classes: Vec<usize> =
            (0..ap_per_class.len()).filter(|&c| ap_per_class[c].is_none()).collect();
        if evaluated_classes.is_empty() {
            return Err(Error::Dataset("no class has a positive frame".into()));
        }
        let map = evaluated_classes.iter().map(|&c| ap_per_class[c].unwrap()).sum::<f64>()
            / evaluated_classes.len() as f64;
        Ok(EvalReport {
            schema: REPORT_SCHEMA.into(),
            protocol: Protocol::default(),
            class_names,
            ap_per_class,
            map,
            evaluated_classes,
            excluded_classes,
            videos,
            frames: scores.first().map_or(0, Vec::len),
            config: None,
        })
    }

    /// Mean AP over the listed classes that have positives.
    pub fn map_over(&self, classes: &[usize]) -> Option<f64> {
        let aps: Vec<f64> = classes.iter().filter_map(|&c| self.ap_per_class[c]).collect();
        (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let width = self
            .class_names
            .iter()
            .map(String::len)
            .chain(["class".len(), "mAP".len()])
            .max()
            .unwrap_or(5);
        let mut out = String::new();
        writeln!(out, "# frame-level AP, {}; {}", self.protocol.frames, self.protocol.ap).unwrap();
        writeln!(out, "# {} videos, {} frames", self.videos, self.frames).unwrap();
        writeln!(out, "{:<width$}  {:>8}", "class", "AP").unwrap();
        for (name, ap) in self.class_names.iter().zip(&self.ap_per_class) {
            match ap {
                Some(ap) => writeln!(out, "{name:<width$}  {ap:>8.4}").unwrap(),
                None => writeln!(out, "{name:<width$}  {:>8}", "excluded").unwrap(),
            }
        }
        writeln!(out, "{:<width$}  {:>8.4}", "mAP", self.map).unwrap();
        out
    }
}

/// Per-frame probabilities for every video, in dataset order.
pub fn predict_dataset(
    model: &Model,
    dataset: &Dataset,
    exec: Execution,
) -> Result<Vec<ndarray::Array2<f64>>> {
    if dataset.feature_dim != model.shape.features {
        return Err(Error::shape("dataset feature dimension", model.shape.features, dataset.feature_dim));
    }
    if dataset.classes() != model.shape.classes {
        return Err(Error::shape("dataset class count", model.shape.classes, dataset.classes()));
    }
    exec.map(&dataset.videos, |_, v| model.predict(v.features.view()))
        .into_iter()
        .collect()
}

/// Frame-level AP of `model` on `dataset`; dropout is never applied.
pub fn evaluate(model: &Model, dataset: &Dataset, exec: Execution) -> Result<EvalReport> {
    let probs = predict_dataset(model, dataset, exec)?;
    let classes = dataset.classes();
    let frames = dataset.total_frames();
    let mut scores = vec![Vec::with_capacity(frames); classes];
    let mut labels = vec![Vec::with_capacity(frames); classes];
    for (p, video) in probs.iter().zip(&dataset.videos) {
        for c in 0..classes {
            scores[c].extend(p.column(c).iter());
            labels[c].extend(video.labels.view().column(c).iter().map(|&b| b == 1));
        }
    }
    EvalReport::from_scores(dataset.class_names.clone(), &scores, &labels, dataset.videos.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Precision at each positive, counting every frame ranked strictly
    /// ahead or tied and earlier.
    fn brute_force(scores: &[f64], labels: &[bool]) -> Option<f64> {
        let n = scores.len();
        let ahead = |i: usize, j: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
        let mut sum = 0.0;
        let mut positives = 0;
        for i in (0..n).filter(|&i| labels[i]) {
            positives += 1;
            let rank = 1 + (0..n).filter(|&j| ahead(i, j)).count();
            let hits = 1 + (0..n).filter(|&j| labels[j] && ahead(i, j)).count();
            sum += hits as f64 / rank as f64;
        }
        (positives > 0).then(|| sum / positives as f64)
    }

    #[test]
    fn examples() {
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]).unwrap();
        assert_abs_diff_eq!(ap, 5.0 / 6.0, epsilon = 1e-15);
        assert_eq!(average_precision(&[0.2], &[true]), Some(1.0));
        assert_eq!(average_precision(&[0.2, 0.1], &[false, false]), None);
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[true, true, false]), Some(1.0));
    }

    #[test]
    fn ties_keep_input_order() {
        assert_eq!(average_precision(&[0.5, 0.5], &[true, false]), Some(1.0));
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]), Some(0.5));
    }

    #[test]
    fn report_excludes_classes_without_positives() {
        let scores = vec![vec![0.9, 0.1], vec![0.3, 0.2]];
        let labels = vec![vec![true, false], vec![false, false]];
        let r = EvalReport::from_scores(vec!["a".into(), "b".into()], &scores, &labels, 1).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.evaluated_classes, vec![0]);
        assert_eq!(r.excluded_classes, vec![1]);
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["ap_per_class"][1].is_null());
        assert!(r.to_table().contains("excluded"));
    }

    proptest! {
        #[test]
        fn matches_rank_enumeration(
            data in prop::collection::vec((0u8..6, any::<bool>()), 1..50)
        ) {
            let scores: Vec<f64> = data.iter().map(|&(s, _)| f64::from(s) / 5.0).collect();
            let labels: Vec<bool> = data.iter().map(|&(_, l)| l).collect();
            match (average_precision(&scores, &labels), brute_force(&scores, &labels)) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-9),
                (a, b) => prop_assert_eq!(a, b),
            }
        }

        #[test]
        fn monotone_transform_invariance(
            data in prop::collection::vec((-500i32..500, any::<bool>()), 1..50)
        ) {
            let scores: Vec<f64> = data.iter().map(|&(s, _)| f64::from(s) / 100.0).collect();
            let labels: Vec<bool> = data.iter().map(|&(_, l)| l).collect();
            let mapped: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 + 1.0).collect();
            prop_assert_eq!(average_precision(&scores, &labels), average_precision(&mapped, &labels));
        }
    }
}
