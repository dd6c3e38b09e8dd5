//! Synthetic multi-activity videos whose paired classes can only be told
//! apart by the events that precede them.
//!
//! Each paired rule owns two trigger classes and two ambiguous classes that
//! share one emission vector. In every video each rule contributes a single
//! episode: either `trigger_a` followed by `class_a` or `trigger_b` followed by
//! `class_b`, separated by a gap drawn from the rule's range. Episodes of rule
//! `r` start near the relative position `(r + 0.5) / R`. Base classes that are
//! not triggers appear as standalone events.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Video};
use crate::detector::LabelMask;
use crate::error::{Error, Result};

/// Attempts allowed for placing one episode before giving up.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairedRule {
    pub trigger_a: usize,
    pub trigger_b: usize,
    pub class_a: usize,
    pub class_b: usize,
    /// Inclusive range of empty frames between trigger and ambiguous event.
    pub gap_range: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_videos: usize,
    /// Videos of the held-out split generated alongside the training split.
    pub test_videos: usize,
    #[serde(rename = "T_range")]
    pub frames_range: [usize; 2],
    #[serde(rename = "D")]
    pub feature_dim: usize,
    pub base_classes: usize,
    pub paired_rules: Vec<PairedRule>,
    pub noise_sigma: f64,
    pub event_len_range: [usize; 2],
    /// Inclusive range of standalone events per non-trigger base class.
    pub standalone_events: [usize; 2],
    /// Half-width of the relative start window around each rule's anchor.
    pub anchor_jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_videos: 200,
            test_videos: 100,
            frames_range: [100, 300],
            feature_dim: 16,
            base_classes: 4,
            paired_rules: vec![
                PairedRule {
                    trigger_a: 0,
                    trigger_b: 1,
                    class_a: 4,
                    class_b: 5,
                    gap_range: [5, 15],
                },
                PairedRule {
                    trigger_a: 2,
                    trigger_b: 3,
                    class_a: 6,
                    class_b: 7,
                    gap_range: [5, 15],
                },
            ],
            noise_sigma: 0.5,
            event_len_range: [8, 20],
            standalone_events: [1, 2],
            anchor_jitter: 0.05,
            seed: 0,
        }
    }
}

fn check_range(name: &str, r: [usize; 2], min: usize) -> Result<()> {
    if r[0] < min || r[0] > r[1] {
        return Err(Error::InvalidArgument(format!(
            "{name} must satisfy {min} <= min <= max, got {r:?}"
        )));
    }
    Ok(())
}

impl SynthConfig {
    pub fn classes(&self) -> usize {
        self.base_classes + 2 * self.paired_rules.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.base_classes).map(|c| format!("base_{c}")).collect();
        names.resize(self.classes(), String::new());
        for (r, rule) in self.paired_rules.iter().enumerate() {
            names[rule.class_a] = format!("rule{r}_a");
            names[rule.class_b] = format!("rule{r}_b");
        }
        names
    }

    /// Classes that share an emission with another class.
    pub fn ambiguous_classes(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .paired_rules
            .iter()
            .flat_map(|r| [r.class_a, r.class_b])
            .collect();
        out.sort_unstable();
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_videos == 0 {
            return Err(Error::InvalidArgument("num_videos must be positive".into()));
        }
        if self.feature_dim == 0 || self.classes() == 0 {
            return Err(Error::InvalidArgument("need at least one feature and one class".into()));
        }
        check_range("T_range", self.frames_range, 1)?;
        check_range("event_len_range", self.event_len_range, 1)?;
        check_range("standalone_events", self.standalone_events, 0)?;
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument("noise_sigma must be finite and non-negative".into()));
        }
        if !(0.0..=0.5).contains(&self.anchor_jitter) {
            return Err(Error::InvalidArgument("anchor_jitter must lie in [0, 0.5]".into()));
        }
        let mut seen = vec![false; self.classes()];
        for rule in &self.paired_rules {
            check_range("gap_range", rule.gap_range, 0)?;
            for (c, is_trigger) in [
                (rule.trigger_a, true),
                (rule.trigger_b, true),
                (rule.class_a, false),
                (rule.class_b, false),
            ] {
                let ok = if is_trigger {
                    c < self.base_classes
                } else {
                    (self.base_classes..self.classes()).contains(&c)
                };
                if !ok || seen[c] {
                    return Err(Error::InvalidArgument(format!(
                        "paired rule {rule:?}: class {c} is out of range or used twice"
                    )));
                }
                seen[c] = true;
            }
        }
        Ok(())
    }
}

/// Train and test splits generated from one emission table.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub train: Dataset,
    /// `None` when `test_videos` is zero.
    pub test: Option<Dataset>,
    /// `C×D` unit-norm emission vectors.
    pub emissions: Array2<f64>,
}

fn unit_vector<R: Rng>(dim: usize, rng: &mut R) -> Array1<f64> {
    loop {
        let v = Array1::from_shape_fn(dim, |_| rng.sample::<f64, _>(StandardNormal));
        let norm = v.dot(&v).sqrt();
        if norm > 1e-6 {
            return v / norm;
        }
    }
}

fn mark(z: &mut LabelMask, class: usize, start: usize, len: usize) {
    for t in start..start + len {
        z.set(t, class, true);
    }
}

fn sample_video<R: Rng>(cfg: &SynthConfig, index: usize, rng: &mut R) -> Result<LabelMask> {
    let frames = rng.random_range(cfg.frames_range[0]..=cfg.frames_range[1]);
    let mut z = LabelMask::zeros(frames, cfg.classes());
    let [ev_lo, ev_hi] = cfg.event_len_range;
    let rules = cfg.paired_rules.len() as f64;

    for (r, rule) in cfg.paired_rules.iter().enumerate() {
        let second = rng.random_bool(0.5);
        let (trigger, class) = if second {
            (rule.trigger_b, rule.class_b)
        } else {
            (rule.trigger_a, rule.class_a)
        };
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let lead = rng.random_range(ev_lo..=ev_hi);
            let gap = rng.random_range(rule.gap_range[0]..=rule.gap_range[1]);
            let len = rng.random_range(ev_lo..=ev_hi);
            let span = lead + gap + len;
            if span > frames {
                continue;
            }
            let anchor = (r as f64 + 0.5) / rules;
            let lo = (anchor - cfg.anchor_jitter).max(0.0);
            let hi = (anchor + cfg.anchor_jitter).min(1.0);
            let frac = if hi > lo { rng.random_range(lo..hi) } else { lo };
            let start = ((frac * (frames - span) as f64).floor() as usize).min(frames - span);
            mark(&mut z, trigger, start, lead);
            mark(&mut z, class, start + lead + gap, len);
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::PlacementFailed {
                video: index,
                attempts: MAX_PLACEMENT_ATTEMPTS,
            });
        }
    }

    let triggers: Vec<usize> = cfg
        .paired_rules
        .iter()
        .flat_map(|r| [r.trigger_a, r.trigger_b])
        .collect();
    for c in (0..cfg.base_classes).filter(|c| !triggers.contains(c)) {
        let count = rng.random_range(cfg.standalone_events[0]..=cfg.standalone_events[1]);
        for _ in 0..count {
            let mut placed = false;
            for _ in 0..MAX_PLACEMENT_ATTEMPTS {
                let len = rng.random_range(ev_lo..=ev_hi);
                if len > frames {
                    continue;
                }
                let start = rng.random_range(0..=frames - len);
                mark(&mut z, c, start, len);
                placed = true;
                break;
            }
            if !placed {
                return Err(Error::PlacementFailed {
                    video: index,
                    attempts: MAX_PLACEMENT_ATTEMPTS,
                });
            }
        }
    }
    Ok(z)
}

fn render<R: Rng>(
    cfg: &SynthConfig,
    emissions: &Array2<f64>,
    z: &LabelMask,
    rng: &mut R,
) -> Array2<f64> {
    let std = cfg.noise_sigma / (cfg.feature_dim as f64).sqrt();
    let mut v = Array2::zeros((z.frames(), cfg.feature_dim));
    for (t, mut row) in v.rows_mut().into_iter().enumerate() {
        for c in 0..z.classes() {
            if z.get(t, c) {
                row += &emissions.row(c);
            }
        }
        for x in row.iter_mut() {
            if cfg.noise_sigma > 0.0 {
                *x += std * rng.sample::<f64, _>(StandardNormal);
            }
            *x = f64::from(*x as f32);
        }
    }
    v
}

fn split<R: Rng>(
    cfg: &SynthConfig,
    emissions: &Array2<f64>,
    count: usize,
    prefix: &str,
    rng: &mut R,
) -> Result<Dataset> {
    let mut videos = Vec::with_capacity(count);
    for i in 0..count {
        let labels = sample_video(cfg, i, rng)?;
        let features = render(cfg, emissions, &labels, rng);
        videos.push(Video {
            id: format!("{prefix}_{i:05}"),
            features,
            labels,
        });
    }
    Dataset::new(cfg.class_names(), cfg.feature_dim, videos)
}

/// Deterministic in `cfg`, including its seed.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut emissions = Array2::zeros((cfg.classes(), cfg.feature_dim));
    for c in 0..cfg.classes() {
        let e = unit_vector(cfg.feature_dim, &mut rng);
        emissions.row_mut(c).assign(&e);
    }
    for rule in &cfg.paired_rules {
        let shared = emissions.row(rule.class_a).to_owned();
        emissions.row_mut(rule.class_b).assign(&shared);
    }
    let train = split(cfg, &emissions, cfg.num_videos, "train", &mut rng)?;
    let test = if cfg.test_videos > 0 {
        Some(split(cfg, &emissions, cfg.test_videos, "test", &mut rng)?)
    } else {
        None
    };
    Ok(SynthDataset {
        train,
        test,
        emissions,
    })
}

/// Maximal runs `(start, end_exclusive)` of class `c`.
pub fn label_runs(z: &LabelMask, c: usize) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    for t in 0..z.frames() {
        match (z.get(t, c), start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                runs.push((s, t));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, z.frames()));
    }
    runs
}

/// Counts ambiguous-class runs that start within the rule's gap range after
/// the end of a run of their own trigger, returning `(satisfied, total)`.
pub fn rule_satisfaction(dataset: &Dataset, rules: &[PairedRule]) -> (usize, usize) {
    let (mut ok, mut total) = (0, 0);
    for video in &dataset.videos {
        for rule in rules {
            for (trigger, class) in [(rule.trigger_a, rule.class_a), (rule.trigger_b, rule.class_b)] {
                let trigger_runs = label_runs(&video.labels, trigger);
                for (start, _) in label_runs(&video.labels, class) {
                    total += 1;
                    let satisfied = trigger_runs.iter().any(|&(_, end)| {
                        end <= start && (rule.gap_range[0]..=rule.gap_range[1]).contains(&(start - end))
                    });
                    ok += satisfied as usize;
                }
            }
        }
    }
    (ok, total)
}
