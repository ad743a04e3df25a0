//! Sketch-conditioned generation: blur, normalize, noise to `t_start`, run the
//! truncated reverse chain, export image/mask pairs.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::NoisePredictor;
use crate::diffusion::{forward_sample, sample_chain, NoiseSchedule, SamplerConfig};
use crate::io::{self, TiffData};
use crate::rng::{self, derive_seed, stream};
use crate::sketch::{
    blur_sketch, mask_to_sketch, simulate_membrane_mask, simulate_nuclei_mask, SimParams, Sketch,
    SketchStyle,
};
use crate::tensor::{ImageTensor, LabelMask, ValueRange};
use crate::{Error, Result};

pub const DATASET_FORMAT: &str = "s2m-dataset-1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub t_start: usize,
    pub sigma: f64,
    pub seed: u64,
    /// Clamp exported intensities to `[0, 1]`.
    pub clamp_output: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            t_start: 400,
            sigma: 1.0,
            seed: 0,
            clamp_output: true,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        schedule.check_step(self.t_start, 1)?;
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "blur sigma must be >= 0, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// `[0, 1]` sketch intensities to model range: `2v - 1`.
pub fn normalize(sketch: &Sketch) -> ImageTensor {
    sketch
        .intensity
        .map(|v| 2.0 * v - 1.0)
        .with_range(ValueRange::Model)
}

/// Model range back to `[0, 1]`: `(v + 1) / 2`.
pub fn denormalize(x: &ImageTensor) -> ImageTensor {
    x.map(|v| (v + 1.0) / 2.0).with_range(ValueRange::Unit)
}

/// Fails if the predictor is bound to a schedule other than `schedule`.
pub fn check_schedule_binding(denoiser: &dyn NoisePredictor, schedule: &NoiseSchedule) -> Result<()> {
    match denoiser.schedule_id() {
        Some(id) if id != schedule.id() => Err(Error::ScheduleMismatch {
            checkpoint: id,
            supplied: schedule.id(),
        }),
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedPair {
    /// Generated intensities in `[0, 1]` (unless clamping is disabled).
    pub image: ImageTensor,
    pub mask: LabelMask,
    /// The blurred sketch the chain started from.
    pub sketch: Sketch,
}

/// Runs the truncated reverse chain from a noised, blurred sketch of `mask`.
/// The mask is returned untouched.
pub fn generate_pair(
    denoiser: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    mask: &LabelMask,
    style: SketchStyle,
    sim: &SimParams,
    config: &GenerationConfig,
) -> Result<GeneratedPair> {
    config.validate(schedule)?;
    check_schedule_binding(denoiser, schedule)?;
    let raw = mask_to_sketch(mask, style, sim, derive_seed(config.seed, stream::SKETCH))?;
    let sketch = blur_sketch(&raw, config.sigma)?;
    let x0 = normalize(&sketch);
    let mut noise_rng = rng::seeded(derive_seed(config.seed, stream::FORWARD_NOISE));
    let noise = ImageTensor::standard_normal(x0.shape(), &mut noise_rng)?;
    let x_start = forward_sample(&x0, config.t_start, &noise, schedule)?;
    let x_hat = sample_chain(
        |x, t| denoiser.predict_noise(x, t),
        &x_start,
        config.t_start,
        schedule,
        derive_seed(config.seed, stream::CHAIN),
        &SamplerConfig::default(),
    )?;
    let mut image = denormalize(&x_hat);
    if config.clamp_output {
        image = image.map(|v| v.clamp(0.0, 1.0));
    }
    Ok(GeneratedPair {
        image,
        mask: mask.clone(),
        sketch,
    })
}

pub fn simulate_mask(style: SketchStyle, sim: &SimParams) -> Result<(LabelMask, bool)> {
    let s = match style {
        SketchStyle::Nuclei => simulate_nuclei_mask(sim)?,
        SketchStyle::Membrane => simulate_membrane_mask(sim)?,
    };
    let under = s.under_placed();
    Ok((s.mask, under))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub sketch: PathBuf,
    pub seed: u64,
    pub generation: GenerationConfig,
    pub sim_params: SimParams,
    pub instance_count: usize,
    /// Fewer instances were placed than requested.
    pub under_placed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub created_unix: u64,
    pub schedule_id: String,
    pub checkpoint_id: Option<String>,
    pub style: SketchStyle,
    pub n_samples: usize,
    pub generation: GenerationConfig,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone)]
pub struct DatasetRequest {
    pub sim: SimParams,
    pub style: SketchStyle,
    pub n_samples: usize,
    pub config: GenerationConfig,
    pub out_dir: PathBuf,
    /// Worker threads; 0 uses all cores.
    pub jobs: usize,
    pub checkpoint_id: Option<String>,
}

fn file_name(i: usize, n: usize) -> String {
    let width = n.saturating_sub(1).to_string().len().max(4);
    format!("{i:0width$}.tif")
}

/// Simulates `n_samples` masks and generates one image per mask. Sample `i`
/// uses seed `derive_seed(config.seed, i)`, so any subset can be regenerated
/// independently. On failure every file written by this call is removed.
pub fn generate_dataset(
    denoiser: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    req: &DatasetRequest,
) -> Result<DatasetManifest> {
    if req.n_samples == 0 {
        return Err(Error::InvalidParameter("n_samples must be >= 1".into()));
    }
    req.config.validate(schedule)?;
    req.sim.validate()?;
    check_schedule_binding(denoiser, schedule)?;

    let existed = req.out_dir.exists();
    let written = std::sync::Mutex::new(Vec::<PathBuf>::new());
    let result = (|| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(req.jobs)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
        let entries = pool.install(|| {
            (0..req.n_samples)
                .into_par_iter()
                .map(|i| {
                    let seed = derive_seed(req.config.seed, i as u64);
                    let sim = req.sim.with_seed(derive_seed(seed, stream::MASK));
                    let (mask, under_placed) = simulate_mask(req.style, &sim)?;
                    let config = GenerationConfig { seed, ..req.config };
                    let pair = generate_pair(denoiser, schedule, &mask, req.style, &sim, &config)?;
                    let name = file_name(i, req.n_samples);
                    let rel = |kind: &str| PathBuf::from(kind).join(&name);
                    let entry = ManifestEntry {
                        image: rel("images"),
                        mask: rel("masks"),
                        sketch: rel("sketches"),
                        seed,
                        generation: config,
                        sim_params: sim,
                        instance_count: pair.mask.instance_count(),
                        under_placed,
                    };
                    let abs = |p: &Path| req.out_dir.join(p);
                    io::write_float_tiff(&abs(&entry.image), &pair.image)?;
                    written.lock().expect("lock").push(abs(&entry.image));
                    io::write_mask_tiff(&abs(&entry.mask), &pair.mask)?;
                    written.lock().expect("lock").push(abs(&entry.mask));
                    io::write_float_tiff(&abs(&entry.sketch), &pair.sketch.intensity)?;
                    written.lock().expect("lock").push(abs(&entry.sketch));
                    log::debug!("sample {i} written");
                    Ok(entry)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let manifest = DatasetManifest {
            format: DATASET_FORMAT.to_string(),
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            schedule_id: schedule.id(),
            checkpoint_id: req.checkpoint_id.clone(),
            style: req.style,
            n_samples: req.n_samples,
            generation: req.config,
            entries,
        };
        io::write_json(&req.out_dir.join("manifest.json"), &manifest)?;
        Ok(manifest)
    })();
    if result.is_err() {
        if existed {
            for p in written.into_inner().expect("lock") {
                let _ = fs::remove_file(p);
            }
        } else {
            let _ = fs::remove_dir_all(&req.out_dir);
        }
    }
    result
}

/// Summary of a successful dataset check.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetCheck {
    pub pairs: usize,
    pub shapes: BTreeSet<Vec<usize>>,
}

/// Loader-style consistency check of an exported dataset: every manifest
/// entry's files exist, images are `f32`, masks `u16`, sketches `f32`, shapes
/// agree within each entry, and `images/` and `masks/` hold exactly the
/// manifest's files.
pub fn check_dataset(dir: &Path) -> Result<DatasetCheck> {
    let manifest: DatasetManifest = io::read_json(&dir.join("manifest.json"))?;
    let bad = |m: String| Err(Error::InvalidParameter(format!("{}: {m}", dir.display())));
    if manifest.format != DATASET_FORMAT {
        return bad(format!("unknown format `{}`", manifest.format));
    }
    if manifest.entries.len() != manifest.n_samples {
        return bad(format!(
            "{} entries for {} samples",
            manifest.entries.len(),
            manifest.n_samples
        ));
    }
    let mut shapes = BTreeSet::new();
    for e in &manifest.entries {
        let (is, image) = io::read_tiff(&dir.join(&e.image))?;
        let (ms, mask) = io::read_tiff(&dir.join(&e.mask))?;
        let (ss, sketch) = io::read_tiff(&dir.join(&e.sketch))?;
        let dtypes = (image.dtype(), mask.dtype(), sketch.dtype());
        if dtypes != ("f32", "u16", "f32") {
            return bad(format!("{}: unexpected dtypes {dtypes:?}", e.image.display()));
        }
        if is != ms || is != ss {
            return bad(format!(
                "{}: shapes differ (image {is:?}, mask {ms:?}, sketch {ss:?})",
                e.image.display()
            ));
        }
        if let TiffData::F32(v) = &image {
            if v.iter().any(|x| !x.is_finite()) {
                return bad(format!("{}: non-finite intensities", e.image.display()));
            }
        }
        shapes.insert(is);
    }
    for kind in ["images", "masks"] {
        let listed: BTreeSet<PathBuf> = manifest
            .entries
            .iter()
            .map(|e| if kind == "images" { e.image.clone() } else { e.mask.clone() })
            .collect();
        let on_disk: BTreeSet<PathBuf> = fs::read_dir(dir.join(kind))?
            .map(|d| d.map(|d| PathBuf::from(kind).join(d.file_name())))
            .collect::<std::io::Result<_>>()?;
        if listed != on_disk {
            return bad(format!("{kind}/ does not match the manifest"));
        }
    }
    Ok(DatasetCheck {
        pairs: manifest.entries.len(),
        shapes,
    })
}
