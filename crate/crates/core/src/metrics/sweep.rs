use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::quality::{histogram_similarity, psnr, zncc, HIST_BINS, HIST_RANGE};
use crate::denoiser::NoisePredictor;
use crate::diffusion::{forward_sample, NoiseSchedule};
use crate::pipeline::{check_schedule_binding, denormalize, generate_pair, normalize, GenerationConfig};
use crate::rng::{self, derive_seed, stream};
use crate::sketch::{SimParams, SketchStyle};
use crate::tensor::{ImageTensor, LabelMask, ValueRange};
use crate::{Error, Result};

/// Operating point highlighted in every report.
pub const RECOMMENDED: (usize, f64) = (400, 1.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub t_starts: Vec<usize>,
    pub sigmas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub style: SketchStyle,
    /// Intensity ranges used to render sketches from the reference masks.
    pub sim: SimParams,
    pub bins: usize,
    pub hist_range: (f64, f64),
    /// Worker threads; 0 uses all cores.
    pub jobs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            t_starts: vec![100, 400, 1000],
            sigmas: vec![0.0, 1.0, 2.0],
            seeds: vec![0],
            style: SketchStyle::Nuclei,
            sim: SimParams::default(),
            bins: HIST_BINS,
            hist_range: HIST_RANGE,
            jobs: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub t_start: usize,
    pub sigma: f64,
    pub samples: usize,
    /// Mean PSNR in dB over samples with finite PSNR.
    pub psnr_db: f64,
    /// Samples whose PSNR was infinite (exact reconstruction).
    pub psnr_infinite: usize,
    pub zncc: f64,
    pub hist_similarity: f64,
    pub recommended: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub grid: Vec<SweepCell>,
    pub samples_per_cell: usize,
    pub seeds: Vec<u64>,
    pub schedule_id: String,
    pub checkpoint_id: Option<String>,
    /// `(t_start, sigma)` of the recommended operating point.
    pub recommended: (usize, f64),
    pub recommended_in_grid: bool,
}

impl SweepReport {
    pub fn cell(&self, t_start: usize, sigma: f64) -> Option<&SweepCell> {
        self.grid.iter().find(|c| c.t_start == t_start && c.sigma == sigma)
    }

    /// One row per grid cell.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t_start,sigma,samples,psnr_db,psnr_infinite,zncc,hist_similarity,recommended\n");
        for c in &self.grid {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                c.t_start, c.sigma, c.samples, c.psnr_db, c.psnr_infinite, c.zncc, c.hist_similarity, c.recommended
            )
            .expect("write to string");
        }
        s
    }
}

struct Sample {
    psnr: f64,
    zncc: f64,
    hist: f64,
}

/// Evaluates every `(t_start, sigma)` cell on every reference pair and seed.
///
/// For each sample the sketch of the reference mask and the reference image
/// are both noised to `t_start` and their histograms compared; the chain is
/// then run from the sketch side and the result scored against the reference
/// with PSNR and ZNCC. References are in model range `[-1, 1]`.
pub fn sweep(
    denoiser: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    reference_images: &[ImageTensor],
    reference_masks: &[LabelMask],
    config: &SweepConfig,
    checkpoint_id: Option<String>,
) -> Result<SweepReport> {
    if reference_images.is_empty() || reference_images.len() != reference_masks.len() {
        return Err(Error::InvalidParameter(format!(
            "need paired references, got {} images and {} masks",
            reference_images.len(),
            reference_masks.len()
        )));
    }
    for (img, m) in reference_images.iter().zip(reference_masks) {
        img.ensure_same_shape(m.shape())?;
    }
    if config.t_starts.is_empty() || config.sigmas.is_empty() || config.seeds.is_empty() {
        return Err(Error::InvalidParameter("sweep grids and seed list must be non-empty".into()));
    }
    for &t in &config.t_starts {
        schedule.check_step(t, 1)?;
    }
    for &s in &config.sigmas {
        if !(s >= 0.0 && s.is_finite()) {
            return Err(Error::InvalidParameter(format!("blur sigma must be >= 0, got {s}")));
        }
    }
    check_schedule_binding(denoiser, schedule)?;

    let cells: Vec<(usize, f64)> = config
        .t_starts
        .iter()
        .flat_map(|&t| config.sigmas.iter().map(move |&s| (t, s)))
        .collect();
    let per_cell = reference_images.len() * config.seeds.len();
    let jobs: Vec<(usize, usize, u64)> = (0..cells.len())
        .flat_map(|c| {
            (0..reference_images.len()).flat_map(move |r| config.seeds.iter().map(move |&s| (c, r, s)))
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let samples: Vec<Sample> = pool.install(|| {
        jobs.par_iter()
            .map(|&(c, r, seed)| {
                let (t_start, sigma) = cells[c];
                let sample_seed = derive_seed(seed, r as u64);
                let gen = GenerationConfig {
                    t_start,
                    sigma,
                    seed: sample_seed,
                    clamp_output: true,
                };
                let pair = generate_pair(denoiser, schedule, &reference_masks[r], config.style, &config.sim, &gen)?;
                let sketch_side = normalize(&pair.sketch);
                let shape = sketch_side.shape().to_vec();
                let mut rm = rng::seeded(derive_seed(sample_seed, stream::FORWARD_NOISE));
                let x_m = forward_sample(&sketch_side, t_start, &ImageTensor::standard_normal(&shape, &mut rm)?, schedule)?;
                let mut ri = rng::seeded(derive_seed(sample_seed, stream::IMAGE_NOISE));
                let real = reference_images[r].clone().with_range(ValueRange::Model);
                let x_i = forward_sample(&real, t_start, &ImageTensor::standard_normal(&shape, &mut ri)?, schedule)?;
                let hist = histogram_similarity(&x_m, &x_i, config.bins, config.hist_range)?;
                let real_unit = denormalize(&real);
                Ok(Sample {
                    psnr: psnr(&real_unit, &pair.image, 1.0, None)?.value(),
                    zncc: zncc(&real_unit, &pair.image, None)?,
                    hist,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let grid = cells
        .iter()
        .enumerate()
        .map(|(c, &(t_start, sigma))| {
            let s = &samples[c * per_cell..(c + 1) * per_cell];
            let finite: Vec<f64> = s.iter().map(|x| x.psnr).filter(|v| v.is_finite()).collect();
            let mean = |v: &mut dyn Iterator<Item = f64>| v.sum::<f64>() / per_cell as f64;
            SweepCell {
                t_start,
                sigma,
                samples: per_cell,
                psnr_db: if finite.is_empty() {
                    f64::INFINITY
                } else {
                    finite.iter().sum::<f64>() / finite.len() as f64
                },
                psnr_infinite: per_cell - finite.len(),
                zncc: mean(&mut s.iter().map(|x| x.zncc)),
                hist_similarity: mean(&mut s.iter().map(|x| x.hist)),
                recommended: (t_start, sigma) == RECOMMENDED,
            }
        })
        .collect::<Vec<_>>();
    let recommended_in_grid = grid.iter().any(|c| c.recommended);
    Ok(SweepReport {
        grid,
        samples_per_cell: per_cell,
        seeds: config.seeds.clone(),
        schedule_id: schedule.id(),
        checkpoint_id,
        recommended: RECOMMENDED,
        recommended_in_grid,
    })
}
