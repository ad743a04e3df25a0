use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{save_checkpoint, Denoiser};
use crate::diffusion::{forward_sample, NoiseSchedule};
use crate::nn::{Adam, AdamConfig, Geometry, Scalar, Tensor, UNet};
use crate::rng::{self, derive_seed, SeededRng};
use crate::tensor::ImageTensor;
use crate::{Error, Result};

/// Training patches in model range `[-1, 1]`.
pub trait PatchSource: Sync {
    fn patch_shape(&self) -> &[usize];

    fn sample_patches(&self, count: usize, rng: &mut SeededRng) -> Result<Vec<ImageTensor>>;
}

/// A fixed set of patches, drawn uniformly with replacement.
impl PatchSource for Vec<ImageTensor> {
    fn patch_shape(&self) -> &[usize] {
        self.first().map_or(&[], |p| p.shape())
    }

    fn sample_patches(&self, count: usize, rng: &mut SeededRng) -> Result<Vec<ImageTensor>> {
        if self.is_empty() {
            return Err(Error::EmptyInput("patch set"));
        }
        Ok((0..count)
            .map(|_| self[rng.random_range(0..self.len())].clone())
            .collect())
    }
}

/// Noised batch handed to a [`Trainable`]: `x_t` and the noise that produced it,
/// both flattened sample after sample.
#[derive(Debug, Clone)]
pub struct NoisyBatch {
    pub shape: Vec<usize>,
    pub steps: Vec<usize>,
    pub x_t: Vec<f64>,
    pub eps: Vec<f64>,
}

impl NoisyBatch {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Mean squared error of a noise prediction against the true noise.
    pub fn loss_of(&self, prediction: &[f64]) -> f64 {
        assert_eq!(prediction.len(), self.eps.len());
        prediction
            .iter()
            .zip(&self.eps)
            .map(|(p, e)| (p - e) * (p - e))
            .sum::<f64>()
            / self.eps.len() as f64
    }
}

/// A model that can take one optimizer step on the noise-prediction loss.
pub trait Trainable {
    /// Returns the loss measured before the update.
    fn fit_noise(&mut self, batch: &NoisyBatch) -> Result<f64>;
}

/// Mean squared noise-prediction loss and its parameter gradient.
pub fn eps_loss_and_grad<T: Scalar>(
    net: &UNet,
    params: &[T],
    x_t: Tensor<T>,
    steps: &[usize],
    eps: &[T],
) -> (f64, Vec<T>) {
    let (pred, trace) = net.forward_train(params, x_t, steps);
    assert_eq!(pred.data.len(), eps.len());
    let scale = T::lit(2.0 / eps.len() as f64);
    let mut loss = 0.0;
    let mut dout = pred.clone();
    for (d, (&p, &e)) in dout.data.iter_mut().zip(pred.data.iter().zip(eps)) {
        let r = p - e;
        let rf = r.to_f64().unwrap_or(f64::NAN);
        loss += rf * rf;
        *d = r * scale;
    }
    let mut grads = vec![T::zero(); params.len()];
    net.backward(params, &trace, &dout, &mut grads);
    (loss / eps.len() as f64, grads)
}

/// Draws per-sample steps uniformly from `1..=T` and fresh noise, then lets
/// the model take one optimizer step.
pub fn train_step<M: Trainable + ?Sized, R: Rng + ?Sized>(
    model: &mut M,
    batch_x0: &[ImageTensor],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    let first = batch_x0.first().ok_or(Error::EmptyInput("training batch"))?;
    let shape = first.shape().to_vec();
    let mut batch = NoisyBatch {
        shape: shape.clone(),
        steps: Vec::with_capacity(batch_x0.len()),
        x_t: Vec::with_capacity(batch_x0.len() * first.len()),
        eps: Vec::with_capacity(batch_x0.len() * first.len()),
    };
    for x0 in batch_x0 {
        x0.ensure_same_shape(&shape)?;
        if let Some(v) = x0.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParameter(format!(
                "training patch value {v} outside [-1, 1]"
            )));
        }
        let t = rng.random_range(1..=schedule.steps());
        let eps = ImageTensor::standard_normal(&shape, rng)?;
        let x_t = forward_sample(x0, t, &eps, schedule)?;
        batch.steps.push(t);
        batch.x_t.extend_from_slice(x_t.data());
        batch.eps.extend_from_slice(eps.data());
    }
    model.fit_noise(&batch)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub loss_history: Vec<(u64, f64)>,
    pub checkpoint_path: Option<PathBuf>,
    pub rng_seed: u64,
}

impl TrainState {
    pub fn new(rng_seed: u64) -> Self {
        Self {
            rng_seed,
            ..Self::default()
        }
    }

    /// Mean loss over history entries with `lo < step <= hi`.
    pub fn mean_loss(&self, lo: u64, hi: u64) -> Option<f64> {
        let sel: Vec<f64> = self
            .loss_history
            .iter()
            .filter(|(s, _)| *s > lo && *s <= hi)
            .map(|&(_, l)| l)
            .collect();
        (!sel.is_empty()).then(|| sel.iter().sum::<f64>() / sel.len() as f64)
    }
}

/// Denoiser together with optimizer state and training progress.
#[derive(Debug)]
pub struct Trainer {
    pub denoiser: Denoiser,
    pub optimizer: Adam<f32>,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(denoiser: Denoiser, optimizer: AdamConfig, rng_seed: u64) -> Self {
        let optimizer = Adam::new(optimizer, denoiser.params().len());
        Self {
            denoiser,
            optimizer,
            state: TrainState::new(rng_seed),
        }
    }
}

impl Trainable for Trainer {
    fn fit_noise(&mut self, batch: &NoisyBatch) -> Result<f64> {
        self.denoiser.config().check_input_shape(&batch.shape)?;
        let geom = Geometry::from_shape(&batch.shape);
        let x = Tensor::from_vec(
            batch.len(),
            1,
            geom,
            batch.x_t.iter().map(|&v| v as f32).collect(),
        );
        let eps: Vec<f32> = batch.eps.iter().map(|&v| v as f32).collect();
        let (loss, grads) =
            eps_loss_and_grad(self.denoiser.net(), self.denoiser.params(), x, &batch.steps, &eps);
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step: self.state.step + 1,
                loss,
            });
        }
        self.optimizer.update(self.denoiser.params_mut(), &grads);
        Ok(loss)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub steps: u64,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Write a checkpoint every this many steps (and always at the end) when
    /// `checkpoint_path` is set.
    pub checkpoint_every: Option<u64>,
    pub checkpoint_path: Option<PathBuf>,
    pub log_every: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 8,
            optimizer: AdamConfig::default(),
            checkpoint_every: None,
            checkpoint_path: None,
            log_every: 500,
        }
    }
}

/// Continues training from `trainer.state.step` for `opts.steps` more steps.
///
/// Step `s` draws its batch and noise from a generator seeded with
/// `derive_seed(rng_seed, s)`, so a resumed run follows the same trajectory as
/// an uninterrupted one.
pub fn train(
    trainer: &mut Trainer,
    data: &dyn PatchSource,
    schedule: &NoiseSchedule,
    opts: &TrainOptions,
) -> Result<TrainState> {
    if opts.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    if opts.checkpoint_every == Some(0) {
        return Err(Error::InvalidConfig("checkpoint_every must be positive".into()));
    }
    if let Some(bound) = trainer.denoiser.schedule() {
        if bound != schedule.params() {
            return Err(Error::ScheduleMismatch {
                checkpoint: bound.id(),
                supplied: schedule.id(),
            });
        }
    }
    trainer.denoiser.config().check_input_shape(data.patch_shape())?;
    trainer.denoiser.bind_schedule(*schedule.params());
    trainer.optimizer.config = opts.optimizer;

    let end = trainer.state.step + opts.steps;
    while trainer.state.step < end {
        let step = trainer.state.step + 1;
        let mut rng = rng::seeded(derive_seed(trainer.state.rng_seed, step));
        let batch = data.sample_patches(opts.batch_size, &mut rng)?;
        let loss = train_step(trainer, &batch, schedule, &mut rng)?;
        trainer.state.step = step;
        trainer.state.loss_history.push((step, loss));
        if opts.log_every > 0 && step.is_multiple_of(opts.log_every) {
            let recent = trainer.state.mean_loss(step.saturating_sub(opts.log_every), step);
            log::info!("step {step}/{end}: loss {:.5}", recent.unwrap_or(loss));
        }
        if let (Some(every), Some(path)) = (opts.checkpoint_every, &opts.checkpoint_path) {
            if step.is_multiple_of(every) && step < end {
                trainer.state.checkpoint_path = Some(path.clone());
                save_checkpoint(path, &trainer.denoiser, Some(&trainer.optimizer), &trainer.state)?;
            }
        }
    }
    if let Some(path) = &opts.checkpoint_path {
        trainer.state.checkpoint_path = Some(path.clone());
        save_checkpoint(path, &trainer.denoiser, Some(&trainer.optimizer), &trainer.state)?;
    }
    Ok(trainer.state.clone())
}
