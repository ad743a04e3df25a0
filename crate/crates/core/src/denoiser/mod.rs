//! Noise-prediction network `eps(x_t, t)` and its training loop.

pub mod checkpoint;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::diffusion::ScheduleParams;
use crate::nn::{Geometry, ParamTable, Tensor, UNet, UNetSpec};
use crate::rng;
use crate::tensor::{ImageTensor, ValueRange};
use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use train::{
    eps_loss_and_grad, train, train_step, NoisyBatch, PatchSource, TrainOptions, TrainState,
    Trainable, Trainer,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub input_rank: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
    pub patch_shape: Vec<usize>,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            input_rank: 2,
            base_channels: 32,
            depth: 3,
            time_embed_dim: 128,
            patch_shape: vec![64, 64],
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !matches!(self.input_rank, 2 | 3) {
            return bad(format!("input_rank must be 2 or 3, got {}", self.input_rank));
        }
        if self.base_channels == 0 || self.depth == 0 {
            return bad("base_channels and depth must be positive".into());
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return bad(format!(
                "time_embed_dim must be a positive even number, got {}",
                self.time_embed_dim
            ));
        }
        if self.patch_shape.len() != self.input_rank {
            return bad(format!(
                "patch_shape {:?} does not have rank {}",
                self.patch_shape, self.input_rank
            ));
        }
        self.check_input_shape(&self.patch_shape)
    }

    /// Shapes the fully convolutional network accepts: right rank and every
    /// pooled axis divisible by `2^depth`.
    pub fn check_input_shape(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != self.input_rank {
            return Err(Error::shape(&self.patch_shape, shape));
        }
        let factor = 1usize << self.depth;
        for &edge in shape {
            if edge == 0 || edge % factor != 0 {
                return Err(Error::InvalidConfig(format!(
                    "edge length {edge} in {shape:?} is not divisible by 2^depth = {factor}"
                )));
            }
        }
        Ok(())
    }

    pub fn unet_spec(&self) -> UNetSpec {
        UNetSpec {
            rank: self.input_rank,
            base_channels: self.base_channels,
            depth: self.depth,
            time_embed_dim: self.time_embed_dim,
        }
    }
}

/// Anything that can estimate the noise in `x_t`.
pub trait NoisePredictor: Sync {
    fn predict_noise(&self, x_t: &ImageTensor, t: usize) -> Result<ImageTensor>;

    /// Identifier of the schedule the predictor was trained under, if known.
    fn schedule_id(&self) -> Option<String> {
        None
    }
}

/// U-Net structure plus its parameter values.
#[derive(Debug)]
pub struct Denoiser {
    config: DenoiserConfig,
    net: UNet,
    params: Vec<f32>,
    init_seed: u64,
    schedule: Option<ScheduleParams>,
}

pub fn init_denoiser(config: DenoiserConfig, seed: u64) -> Result<Denoiser> {
    config.validate()?;
    let net = UNet::new(config.unet_spec());
    let params = net.init_params(&mut rng::seeded(seed));
    Ok(Denoiser {
        config,
        net,
        params,
        init_seed: seed,
        schedule: None,
    })
}

impl Denoiser {
    pub(crate) fn from_parts(
        config: DenoiserConfig,
        params: Vec<f32>,
        init_seed: u64,
        schedule: Option<ScheduleParams>,
    ) -> Result<Self> {
        config.validate()?;
        let net = UNet::new(config.unet_spec());
        if params.len() != net.param_count() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                net.param_count(),
                params.len()
            )));
        }
        Ok(Self {
            config,
            net,
            params,
            init_seed,
            schedule,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn net(&self) -> &UNet {
        &self.net
    }

    pub fn param_table(&self) -> &ParamTable {
        self.net.param_table()
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    /// Schedule the parameters were trained under; `None` before any training.
    pub fn schedule(&self) -> Option<&ScheduleParams> {
        self.schedule.as_ref()
    }

    pub fn bind_schedule(&mut self, params: ScheduleParams) {
        self.schedule = Some(params);
    }

    /// Noise estimate for one image at step `t`.
    pub fn denoise(&self, x_t: &ImageTensor, t: usize) -> Result<ImageTensor> {
        Ok(self.denoise_batch(std::slice::from_ref(x_t), &[t])?.remove(0))
    }

    /// Noise estimates for same-shaped images, one step per image.
    pub fn denoise_batch(&self, xs: &[ImageTensor], steps: &[usize]) -> Result<Vec<ImageTensor>> {
        let first = xs.first().ok_or(Error::EmptyInput("denoise batch"))?;
        if steps.len() != xs.len() {
            return Err(Error::InvalidParameter(format!(
                "{} images but {} steps",
                xs.len(),
                steps.len()
            )));
        }
        let shape = first.shape().to_vec();
        self.config.check_input_shape(&shape)?;
        if let Some(&t) = steps.iter().find(|&&t| t == 0) {
            return Err(Error::StepOutOfRange {
                t,
                min: 1,
                max: self.schedule.map_or(usize::MAX, |s| s.steps),
            });
        }
        let mut flat = Vec::with_capacity(xs.len() * first.len());
        for x in xs {
            x.ensure_same_shape(&shape)?;
            flat.extend(x.data().iter().map(|&v| v as f32));
        }
        let input = Tensor::from_vec(xs.len(), 1, Geometry::from_shape(&shape), flat);
        let out = self.net.forward(&self.params, &input, steps);
        out.data
            .chunks(first.len())
            .map(|c| {
                ImageTensor::new(
                    shape.clone(),
                    c.iter().map(|&v| f64::from(v)).collect(),
                    ValueRange::Model,
                )
            })
            .collect()
    }
}

impl NoisePredictor for Denoiser {
    fn predict_noise(&self, x_t: &ImageTensor, t: usize) -> Result<ImageTensor> {
        self.denoise(x_t, t)
    }

    fn schedule_id(&self) -> Option<String> {
        self.schedule.map(|s| s.id())
    }
}
