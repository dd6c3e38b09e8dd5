//! Mini-batch training with Adam, step-decayed learning rate and inverted
//! input dropout.
//!
//! Videos in a batch are processed independently, possibly in parallel, and
//! their gradients are summed in ascending video-index order, so results
//! depend only on the seed, the configuration and the data.

use std::borrow::Cow;

use ndarray::Array2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{Model, ModelShape, Variant};
use crate::superevent::RelativeConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay_every: u64,
    pub lr_decay_factor: f64,
    pub iterations: u64,
    pub batch_size: usize,
    #[serde(rename = "dropout_p")]
    pub dropout: f64,
    /// Shared filter count `M`.
    #[serde(rename = "M")]
    pub filters: usize,
    /// Cauchy distributions per filter `N`.
    #[serde(rename = "N")]
    pub distributions: usize,
    /// Odd kernel length `L` of the relative variant.
    #[serde(rename = "L")]
    pub relative_len: usize,
    pub seed: u64,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.1,
            lr_decay_every: 1000,
            lr_decay_factor: 0.1,
            iterations: 5000,
            batch_size: 32,
            dropout: 0.5,
            filters: 5,
            distributions: 3,
            relative_len: RelativeConfig::DEFAULT_LEN,
            seed: 0,
            variant: Variant::Attended,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.into()));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr must be finite and non-negative");
        }
        if !(self.lr_decay_factor.is_finite() && self.lr_decay_factor > 0.0) {
            return bad("lr_decay_factor must be finite and positive");
        }
        if self.lr_decay_every == 0 {
            return bad("lr_decay_every must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout_p must lie in [0, 1)");
        }
        if self.variant.has_filters() && self.distributions == 0 {
            return bad("N must be at least 1");
        }
        if self.variant.has_attention() && self.filters == 0 {
            return bad("M must be at least 1");
        }
        if self.variant == Variant::Relative {
            RelativeConfig::new(self.relative_len)?;
        }
        Ok(())
    }

    /// `lr · decay_factor^floor(i / decay_every)`.
    pub fn learning_rate(&self, iteration: u64) -> f64 {
        let k = iteration / self.lr_decay_every;
        self.lr * self.lr_decay_factor.powi(i32::try_from(k).unwrap_or(i32::MAX))
    }

    pub fn model_shape(&self, features: usize, classes: usize) -> ModelShape {
        ModelShape {
            features,
            classes,
            filters: self.filters,
            distributions: self.distributions,
            relative_len: self.relative_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(params: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            m: vec![0.0; params],
            v: vec![0.0; params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.steps += 1;
        let t = i32::try_from(self.steps).unwrap_or(i32::MAX);
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Position of the training random stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationRecord {
    /// Zero-based index of the step just taken.
    pub iteration: u64,
    pub lr: f64,
    /// Mean loss over the batch before the step.
    pub loss: f64,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: Adam,
    /// Completed optimizer steps.
    pub iteration: u64,
    pub rng: ChaCha8Rng,
}

/// Applies inverted dropout with keep probability `1 − p`.
pub fn apply_dropout(v: &Array2<f64>, p: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (1.0 - p);
    v.mapv(|x| if rng.random::<f64>() < p { 0.0 } else { x * scale })
}

/// Batch indices in ascending order; without replacement when the dataset
/// is large enough.
pub fn sample_batch<R: Rng + ?Sized>(videos: usize, batch: usize, rng: &mut R) -> Vec<usize> {
    let mut idx = if videos >= batch {
        index::sample(rng, videos, batch).into_vec()
    } else {
        (0..batch).map(|_| rng.random_range(0..videos)).collect()
    };
    idx.sort_unstable();
    idx
}

impl ModelState {
    /// Fresh parameters drawn from the configured seed.
    pub fn new(config: TrainConfig, features: usize, classes: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::new(config.variant, config.model_shape(features, classes), &mut rng)?;
        let optimizer = Adam::new(model.param_count());
        Ok(ModelState {
            config,
            model,
            optimizer,
            iteration: 0,
            rng,
        })
    }

    fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        let shape = self.model.shape;
        if dataset.feature_dim != shape.features {
            return Err(Error::shape("dataset feature dimension", shape.features, dataset.feature_dim));
        }
        if dataset.classes() != shape.classes {
            return Err(Error::shape("dataset class count", shape.classes, dataset.classes()));
        }
        Ok(())
    }

    /// Mean loss and gradient over the given videos, accumulated in order.
    pub fn batch_gradient(
        &self,
        dataset: &Dataset,
        batch: &[(usize, Option<u64>)],
        exec: Execution,
    ) -> Result<(f64, Vec<f64>)> {
        let p = self.config.dropout;
        let results = exec.map(batch, |_, &(i, seed)| {
            let video = &dataset.videos[i];
            let v = match seed {
                Some(s) if p > 0.0 => Cow::Owned(apply_dropout(&video.features, p, s)),
                _ => Cow::Borrowed(&video.features),
            };
            self.model.loss_and_grad(v.view(), &video.labels)
        });
        let mut loss = 0.0;
        let mut grad = vec![0.0; self.model.param_count()];
        for r in results {
            let (l, g) = r?;
            loss += l;
            for (acc, x) in grad.iter_mut().zip(&g) {
                *acc += x;
            }
        }
        let n = batch.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        Ok((loss / n, grad))
    }

    /// One optimizer step on a freshly sampled batch.
    pub fn step(&mut self, dataset: &Dataset, exec: Execution) -> Result<IterationRecord> {
        self.check_dataset(dataset)?;
        let lr = self.config.learning_rate(self.iteration);
        let indices = sample_batch(dataset.videos.len(), self.config.batch_size, &mut self.rng);
        let batch: Vec<(usize, Option<u64>)> = indices
            .into_iter()
            .map(|i| (i, Some(self.rng.random::<u64>())))
            .collect();
        let (loss, grad) = self.batch_gradient(dataset, &batch, exec)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                iteration: self.iteration,
                loss,
            });
        }
        let mut params = self.model.flat_params();
        self.optimizer.step(&mut params, &grad, lr);
        if params.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("parameters after optimizer step"));
        }
        self.model.set_flat_params(&params)?;
        let record = IterationRecord {
            iteration: self.iteration,
            lr,
            loss,
        };
        self.iteration += 1;
        Ok(record)
    }

    /// Steps until `config.iterations` steps have completed, reporting each.
    pub fn run(
        &mut self,
        dataset: &Dataset,
        exec: Execution,
        mut on_step: impl FnMut(&IterationRecord),
    ) -> Result<Vec<f64>> {
        let mut history = Vec::new();
        while self.iteration < self.config.iterations {
            let record = self.step(dataset, exec)?;
            on_step(&record);
            history.push(record.loss);
        }
        Ok(history)
    }
}

/// Trains a fresh model and returns it with the per-step loss history.
pub fn train(
    config: TrainConfig,
    dataset: &Dataset,
    exec: Execution,
    on_step: impl FnMut(&IterationRecord),
) -> Result<(ModelState, Vec<f64>)> {
    let mut state = ModelState::new(config, dataset.feature_dim, dataset.classes())?;
    let history = state.run(dataset, exec, on_step)?;
    Ok((state, history))
}
