//! Stand-in "real" image corpus: procedurally generated textured blobs with
//! known instance masks, plus patch sources over in-memory or on-disk images.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::PatchSource;
use crate::io;
use crate::rng::{self, derive_seed, SeededRng};
use crate::sketch::{gaussian_filter, simulate_nuclei_mask, SimParams};
use crate::tensor::{validate_shape, ImageTensor, LabelMask, ValueRange};
use crate::{Error, Result};

/// Recipe of the toy corpus. The defaults are the pinned corpus used for the
/// reference training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyParams {
    pub image_count: usize,
    pub structures: SimParams,
    /// Correlation length of the intra-object texture, in pixels.
    pub texture_sigma: f64,
    /// Relative intensity modulation of the texture.
    pub texture_amplitude: f64,
    /// Optical blur applied to the rendered scene.
    pub psf_sigma: f64,
    /// Standard deviation of additive sensor noise, in `[0, 1]` intensity units.
    pub sensor_noise: f64,
    pub seed: u64,
}

impl Default for ToyParams {
    fn default() -> Self {
        Self {
            image_count: 32,
            structures: SimParams {
                image_shape: vec![128, 128],
                instance_count: (14, 24),
                radius: (5.0, 9.0),
                eccentricity: (1.0, 1.5),
                foreground: (0.5, 0.9),
                background: (0.08, 0.2),
                ..SimParams::default()
            },
            texture_sigma: 1.5,
            texture_amplitude: 0.3,
            psf_sigma: 1.0,
            sensor_noise: 0.03,
            seed: 0x70_1C,
        }
    }
}

impl ToyParams {
    /// Short stable tag used to name cache directories.
    pub fn tag(&self) -> String {
        let json = serde_json::to_string(self).expect("serializable");
        let h = json
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3));
        format!("toy-{h:016x}")
    }
}

fn unit_noise(shape: &[usize], sigma: f64, rng: &mut SeededRng) -> Vec<f64> {
    let n: usize = shape.iter().product();
    let white: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let smooth = gaussian_filter(&white, shape, sigma);
    let mean = smooth.iter().sum::<f64>() / n as f64;
    let sd = (smooth.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    smooth.into_iter().map(|v| (v - mean) / sd.max(1e-12)).collect()
}

/// Min-max maps `data` onto `[-1, 1]`; constant data maps to 0.
pub fn minmax_to_model(data: &[f64]) -> Vec<f64> {
    let (lo, hi) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi > lo {
        data.iter().map(|v| 2.0 * (v - lo) / (hi - lo) - 1.0).collect()
    } else {
        vec![0.0; data.len()]
    }
}

/// One toy image in model range together with its instance mask.
pub fn toy_image(params: &ToyParams, index: u64) -> Result<(ImageTensor, LabelMask)> {
    let seed = derive_seed(params.seed, index);
    let sim = simulate_nuclei_mask(&params.structures.with_seed(derive_seed(seed, 0)))?;
    let mask = sim.mask;
    let shape = mask.shape().to_vec();
    let mut rng = rng::seeded(derive_seed(seed, 1));
    let s = &params.structures;
    let bg = rng.random_range(s.background.0..=s.background.1);
    let max_id = mask.instance_ids().last().copied().unwrap_or(0) as usize;
    let levels: Vec<f64> = (0..=max_id)
        .map(|id| if id == 0 { bg } else { rng.random_range(s.foreground.0..=s.foreground.1) })
        .collect();
    let texture = unit_noise(&shape, params.texture_sigma, &mut rng);
    let scene: Vec<f64> = mask
        .labels()
        .iter()
        .zip(&texture)
        .map(|(&l, &t)| levels[l as usize] * (1.0 + params.texture_amplitude * t))
        .collect();
    let optics = gaussian_filter(&scene, &shape, params.psf_sigma);
    let noisy: Vec<f64> = optics
        .into_iter()
        .map(|v| v + params.sensor_noise * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let image = ImageTensor::new(shape, minmax_to_model(&noisy), ValueRange::Model)?;
    Ok((image, mask))
}

/// Images in model range (optionally with masks) served as random crops.
#[derive(Debug, Clone)]
pub struct ImageCorpus {
    pub images: Vec<ImageTensor>,
    pub masks: Option<Vec<LabelMask>>,
    patch_shape: Vec<usize>,
}

impl ImageCorpus {
    pub fn new(images: Vec<ImageTensor>, masks: Option<Vec<LabelMask>>, patch_shape: Vec<usize>) -> Result<Self> {
        validate_shape(&patch_shape)?;
        if images.is_empty() {
            return Err(Error::EmptyInput("image corpus"));
        }
        for img in &images {
            let fits = img.rank() == patch_shape.len()
                && img.shape().iter().zip(&patch_shape).all(|(a, b)| a >= b);
            if !fits {
                return Err(Error::InvalidParameter(format!(
                    "image of shape {:?} cannot hold a {:?} patch",
                    img.shape(),
                    patch_shape
                )));
            }
        }
        if let Some(m) = &masks {
            if m.len() != images.len() || m.iter().zip(&images).any(|(m, i)| m.shape() != i.shape()) {
                return Err(Error::InvalidParameter("masks do not pair with images".into()));
            }
        }
        Ok(Self {
            images,
            masks,
            patch_shape,
        })
    }

    /// The toy corpus, generated in memory.
    pub fn toy(params: &ToyParams, patch_shape: Vec<usize>) -> Result<Self> {
        let (images, masks) = (0..params.image_count as u64)
            .map(|i| toy_image(params, i))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        Self::new(images, Some(masks), patch_shape)
    }

    /// The toy corpus, read from `cache/<tag>/` if present, otherwise generated
    /// and written there as TIFF pairs.
    pub fn toy_cached(params: &ToyParams, patch_shape: Vec<usize>, cache: &Path) -> Result<Self> {
        let dir = cache.join(params.tag());
        let path = |kind: &str, i: usize| dir.join(kind).join(format!("{i:04}.tif"));
        let complete = dir.join("params.json").is_file();
        if complete {
            let mut images = Vec::with_capacity(params.image_count);
            let mut masks = Vec::with_capacity(params.image_count);
            for i in 0..params.image_count {
                images.push(io::read_image_tiff(&path("images", i), ValueRange::Model)?);
                masks.push(io::read_mask_tiff(&path("masks", i))?);
            }
            return Self::new(images, Some(masks), patch_shape);
        }
        let corpus = Self::toy(params, patch_shape)?;
        for (i, img) in corpus.images.iter().enumerate() {
            io::write_float_tiff(&path("images", i), img)?;
        }
        for (i, m) in corpus.masks.iter().flatten().enumerate() {
            io::write_mask_tiff(&path("masks", i), m)?;
        }
        io::write_json(&dir.join("params.json"), params)?;
        // Reload so cached and fresh runs see identical (f32-rounded) values.
        Self::toy_cached(params, corpus.patch_shape, cache)
    }

    /// Every readable `.tif`/`.tiff` file in `dir`, min-max normalized per
    /// image. Unreadable files are skipped and returned in the second slot.
    pub fn from_tiff_dir(dir: &Path, patch_shape: Vec<usize>) -> Result<(Self, Vec<(PathBuf, String)>)> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("tif") || e.eq_ignore_ascii_case("tiff"))
            })
            .collect();
        files.sort();
        let mut images = Vec::new();
        let mut skipped = Vec::new();
        for f in files {
            match io::read_image_tiff(&f, ValueRange::Unit) {
                Ok(img) => {
                    let data = minmax_to_model(img.data());
                    images.push(ImageTensor::new(img.shape().to_vec(), data, ValueRange::Model)?);
                }
                Err(e) => {
                    log::warn!("skipping unreadable image {}: {e}", f.display());
                    skipped.push((f, e.to_string()));
                }
            }
        }
        if images.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "no readable TIFF images in {} ({} skipped)",
                dir.display(),
                skipped.len()
            )));
        }
        Ok((Self::new(images, None, patch_shape)?, skipped))
    }

    /// Random crop origin for image `i`.
    fn origin(&self, i: usize, rng: &mut SeededRng) -> Vec<usize> {
        self.images[i]
            .shape()
            .iter()
            .zip(&self.patch_shape)
            .map(|(&n, &p)| rng.random_range(0..=n - p))
            .collect()
    }

    /// Pixel indices of the crop with the given origin, in row-major order.
    fn crop_indices(&self, i: usize, origin: &[usize]) -> Vec<usize> {
        let shape = self.images[i].shape();
        let ps = &self.patch_shape;
        let n: usize = ps.iter().product();
        let mut out = Vec::with_capacity(n);
        let mut idx = vec![0usize; ps.len()];
        for _ in 0..n {
            let flat = idx
                .iter()
                .zip(origin)
                .zip(shape)
                .fold(0, |acc, ((&k, &o), &s)| acc * s + k + o);
            out.push(flat);
            for ax in (0..ps.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < ps[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        out
    }

    /// Random paired crops of images and masks (masks required).
    pub fn sample_pairs(&self, count: usize, rng: &mut SeededRng) -> Result<Vec<(ImageTensor, LabelMask)>> {
        let masks = self
            .masks
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("corpus has no masks".into()))?;
        (0..count)
            .map(|_| {
                let i = rng.random_range(0..self.images.len());
                let idx = self.crop_indices(i, &self.origin(i, rng));
                let img = ImageTensor::new(
                    self.patch_shape.clone(),
                    idx.iter().map(|&k| self.images[i].data()[k]).collect(),
                    ValueRange::Model,
                )?;
                let m = LabelMask::new(
                    self.patch_shape.clone(),
                    idx.iter().map(|&k| masks[i].labels()[k]).collect(),
                )?;
                Ok((img, m))
            })
            .collect()
    }
}

impl PatchSource for ImageCorpus {
    fn patch_shape(&self) -> &[usize] {
        &self.patch_shape
    }

    fn sample_patches(&self, count: usize, rng: &mut SeededRng) -> Result<Vec<ImageTensor>> {
        (0..count)
            .map(|_| {
                let i = rng.random_range(0..self.images.len());
                let idx = self.crop_indices(i, &self.origin(i, rng));
                ImageTensor::new(
                    self.patch_shape.clone(),
                    idx.iter().map(|&k| self.images[i].data()[k]).collect(),
                    ValueRange::Model,
                )
            })
            .collect()
    }
}
