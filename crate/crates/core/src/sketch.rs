//! Simulated cellular structures and their coarse sketch renderings.
//!
//! Nuclei are packed as non-overlapping filled ellipses (ellipsoids in 3D);
//! membranes are a nearest-centre (Voronoi) tessellation whose region borders
//! are drawn as bright bands. Every output is a pure function of its
//! parameters and seed.

use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{for_each_face_neighbor, strides, validate_shape, ImageTensor, LabelMask, ValueRange};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SketchStyle {
    Nuclei,
    Membrane,
}

impl FromStr for SketchStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nuclei" => Ok(SketchStyle::Nuclei),
            "membrane" => Ok(SketchStyle::Membrane),
            _ => Err(Error::UnknownStyle(s.to_string())),
        }
    }
}

impl std::fmt::Display for SketchStyle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SketchStyle::Nuclei => "nuclei",
            SketchStyle::Membrane => "membrane",
        })
    }
}

/// Structure simulation and sketch rendering parameters. Ranges are inclusive `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimParams {
    pub image_shape: Vec<usize>,
    pub instance_count: (usize, usize),
    /// Equivalent radius in pixels; the ellipse keeps the area of this circle.
    pub radius: (f64, f64),
    /// Major/minor axis ratio, `1` is a circle.
    pub eccentricity: (f64, f64),
    pub foreground: (f64, f64),
    pub background: (f64, f64),
    pub membrane_thickness: usize,
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            image_shape: vec![64, 64],
            instance_count: (6, 12),
            radius: (4.0, 7.0),
            eccentricity: (1.0, 1.6),
            foreground: (0.55, 0.95),
            background: (0.05, 0.15),
            membrane_thickness: 1,
            max_attempts: 200,
            seed: 0,
        }
    }
}

fn check_range(name: &str, (lo, hi): (f64, f64), min: f64, max: f64) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && min <= lo && lo <= hi && hi <= max) {
        return Err(Error::InvalidParameter(format!(
            "{name} range [{lo}, {hi}] must satisfy {min} <= lo <= hi <= {max}"
        )));
    }
    Ok(())
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        validate_shape(&self.image_shape)?;
        let (lo, hi) = self.instance_count;
        if lo > hi || hi > u16::MAX as usize {
            return Err(Error::InvalidParameter(format!(
                "instance count range [{lo}, {hi}] must be ordered and at most {}",
                u16::MAX
            )));
        }
        check_range("radius", self.radius, 1.0, f64::MAX)?;
        check_range("eccentricity", self.eccentricity, 1.0, f64::MAX)?;
        check_range("foreground intensity", self.foreground, 0.0, 1.0)?;
        check_range("background intensity", self.background, 0.0, 1.0)?;
        if self.membrane_thickness == 0 {
            return Err(Error::InvalidParameter("membrane thickness must be >= 1 px".into()));
        }
        if self.max_attempts == 0 {
            return Err(Error::InvalidParameter("max placement attempts must be >= 1".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Simulated mask plus placement bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Simulated {
    pub mask: LabelMask,
    pub requested: usize,
    pub placed: usize,
}

impl Simulated {
    pub fn under_placed(&self) -> bool {
        self.placed < self.requested
    }
}

/// Pads a 2D shape to `[1, H, W]`.
fn dims3(shape: &[usize]) -> [usize; 3] {
    match shape {
        [h, w] => [1, *h, *w],
        [d, h, w] => [*d, *h, *w],
        _ => unreachable!("validated rank"),
    }
}

struct Ellipsoid {
    center: [f64; 3],
    /// Rows are the principal axes in `(z, y, x)` coordinates.
    axes: [[f64; 3]; 3],
    semi: [f64; 3],
}

impl Ellipsoid {
    fn random<R: Rng + ?Sized>(rng: &mut R, dims: [usize; 3], rank: usize, params: &SimParams) -> Self {
        let r = uniform(rng, params.radius);
        let e = uniform(rng, params.eccentricity);
        let (semi, axes) = if rank == 2 {
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let (s, c) = theta.sin_cos();
            (
                [1.0, r * e.sqrt(), r / e.sqrt()],
                [[1.0, 0.0, 0.0], [0.0, c, s], [0.0, -s, c]],
            )
        } else {
            (
                [r * e.powf(2.0 / 3.0), r * e.powf(-1.0 / 3.0), r * e.powf(-1.0 / 3.0)],
                random_rotation(rng),
            )
        };
        let extent = semi[1].max(semi[2]).max(if rank == 3 { semi[0] } else { 0.0 });
        let mut center = [0.0; 3];
        for axis in 0..3 {
            if rank == 2 && axis == 0 {
                continue;
            }
            let n = dims[axis] as f64;
            center[axis] = if n - 1.0 > 2.0 * extent {
                rng.random_range(extent..=(n - 1.0 - extent))
            } else {
                rng.random_range(0.0..n)
            };
        }
        Self { center, axes, semi }
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let mut acc = 0.0;
        for (axis, s) in self.axes.iter().zip(self.semi) {
            let proj = axis[0] * d[0] + axis[1] * d[1] + axis[2] * d[2];
            acc += (proj / s).powi(2);
        }
        acc <= 1.0
    }

    /// Flat indices of the voxels inside the ellipsoid, clipped to the field.
    fn rasterize(&self, dims: [usize; 3]) -> Vec<usize> {
        let reach = self.semi.iter().cloned().fold(0.0, f64::max).ceil() as isize + 1;
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for axis in 0..3 {
            let c = self.center[axis].round() as isize;
            lo[axis] = (c - reach).max(0) as usize;
            hi[axis] = ((c + reach).min(dims[axis] as isize - 1)).max(0) as usize;
        }
        let mut out = Vec::new();
        for z in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for x in lo[2]..=hi[2] {
                    if self.contains([z as f64, y as f64, x as f64]) {
                        out.push((z * dims[1] + y) * dims[2] + x);
                    }
                }
            }
        }
        out
    }
}

/// Rotation matrix from a uniformly random unit quaternion.
fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> [[f64; 3]; 3] {
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let tau = 2.0 * std::f64::consts::PI;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (w, x, y, z) = (
        a * (tau * u2).sin(),
        a * (tau * u2).cos(),
        b * (tau * u3).sin(),
        b * (tau * u3).cos(),
    );
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
        [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
        [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Packs randomly placed, randomly oriented ellipses/ellipsoids without overlap.
/// Instances that cannot be placed within `max_attempts` are skipped and
/// reported through [`Simulated::placed`].
pub fn simulate_nuclei_mask(params: &SimParams) -> Result<Simulated> {
    params.validate()?;
    let mut rng = rng::seeded(params.seed);
    let requested = rng.random_range(params.instance_count.0..=params.instance_count.1);
    let shape = &params.image_shape;
    let dims = dims3(shape);
    let rank = shape.len();
    let mut mask = LabelMask::background(shape)?;
    let mut placed = 0usize;
    for _ in 0..requested {
        for _ in 0..params.max_attempts {
            let voxels = Ellipsoid::random(&mut rng, dims, rank, params).rasterize(dims);
            let labels = mask.labels_mut();
            if !voxels.is_empty() && voxels.iter().all(|&i| labels[i] == 0) {
                placed += 1;
                for i in voxels {
                    labels[i] = placed as u16;
                }
                break;
            }
        }
    }
    if placed < requested {
        log::warn!("placed {placed} of {requested} nuclei (seed {})", params.seed);
    }
    Ok(Simulated {
        mask,
        requested,
        placed,
    })
}

/// Space-filling tessellation: every voxel takes the id of its nearest centre,
/// ties going to the lowest id. Centres are distinct voxels, so every region is
/// non-empty and exactly `K` regions are produced.
pub fn simulate_membrane_mask(params: &SimParams) -> Result<Simulated> {
    params.validate()?;
    let mut rng = rng::seeded(params.seed);
    let shape = &params.image_shape;
    let total: usize = shape.iter().product();
    let lo = params.instance_count.0.max(1);
    let hi = params.instance_count.1.max(1).min(total);
    let requested = rng.random_range(lo.min(hi)..=hi);
    let centres: Vec<Vec<usize>> = index::sample(&mut rng, total, requested)
        .into_iter()
        .map(|flat| unravel(shape, flat))
        .collect();
    let mut mask = LabelMask::background(shape)?;
    for (flat, label) in mask.labels_mut().iter_mut().enumerate() {
        let p = unravel(shape, flat);
        let mut best = (usize::MAX, 0u16);
        for (i, c) in centres.iter().enumerate() {
            let d2: usize = p.iter().zip(c).map(|(&a, &b)| a.abs_diff(b).pow(2)).sum();
            if d2 < best.0 {
                best = (d2, (i + 1) as u16);
            }
        }
        *label = best.1;
    }
    Ok(Simulated {
        mask,
        requested,
        placed: requested,
    })
}

fn unravel(shape: &[usize], mut flat: usize) -> Vec<usize> {
    let st = strides(shape);
    st.iter()
        .map(|&s| {
            let c = flat / s;
            flat %= s;
            c
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sketch {
    /// Intensities in `[0, 1]`.
    pub intensity: ImageTensor,
    pub style: SketchStyle,
    /// Total Gaussian blur applied so far, in pixels.
    pub sigma_applied: f64,
}

impl Sketch {
    pub fn shape(&self) -> &[usize] {
        self.intensity.shape()
    }
}

/// Renders a label mask as a coarse intensity sketch.
///
/// `Nuclei` fills every instance with its own foreground intensity on a
/// uniform background. `Membrane` draws the bands where labels change (face
/// neighbourhood, widened to `membrane_thickness`) at one foreground intensity.
pub fn mask_to_sketch(mask: &LabelMask, style: SketchStyle, params: &SimParams, seed: u64) -> Result<Sketch> {
    if mask.is_empty() {
        return Err(Error::EmptyInput("mask"));
    }
    check_range("foreground intensity", params.foreground, 0.0, 1.0)?;
    check_range("background intensity", params.background, 0.0, 1.0)?;
    let mut rng = rng::seeded(seed);
    let bg = uniform(&mut rng, params.background);
    let data: Vec<f64> = match style {
        SketchStyle::Nuclei => {
            let ids = mask.instance_ids();
            let max_id = ids.last().copied().unwrap_or(0) as usize;
            let mut level = vec![bg; max_id + 1];
            for id in ids {
                level[id as usize] = uniform(&mut rng, params.foreground);
            }
            mask.labels().iter().map(|&l| level[l as usize]).collect()
        }
        SketchStyle::Membrane => {
            if params.membrane_thickness == 0 {
                return Err(Error::InvalidParameter("membrane thickness must be >= 1 px".into()));
            }
            let fg = uniform(&mut rng, params.foreground);
            let band = dilate(mask.shape(), mask.boundary(), params.membrane_thickness - 1);
            band.iter().map(|&b| if b { fg } else { bg }).collect()
        }
    };
    Ok(Sketch {
        intensity: ImageTensor::new(mask.shape().to_vec(), data, ValueRange::Unit)?,
        style,
        sigma_applied: 0.0,
    })
}

fn dilate(shape: &[usize], mut set: Vec<bool>, iterations: usize) -> Vec<bool> {
    for _ in 0..iterations {
        let prev = set.clone();
        for (i, flag) in set.iter_mut().enumerate() {
            if !*flag {
                for_each_face_neighbor(shape, i, |j| *flag |= prev[j]);
            }
        }
    }
    set
}

/// Normalised 1D Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let w: Vec<f64> = (-r..=r)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

/// Separable Gaussian filter over every axis of `shape` with reflect padding.
pub fn gaussian_filter(data: &[f64], shape: &[usize], sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return data.to_vec();
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let st = strides(shape);
    let mut cur = data.to_vec();
    for (axis, &n) in shape.iter().enumerate() {
        let stride = st[axis];
        let mut next = vec![0.0; cur.len()];
        let mut line = vec![0.0; n];
        for start in 0..cur.len() {
            // first element of each line along `axis`
            if !(start / stride).is_multiple_of(n) {
                continue;
            }
            for (i, v) in line.iter_mut().enumerate() {
                *v = cur[start + i * stride];
            }
            for i in 0..n {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    acc += w * line[reflect(i as isize + k as isize - r, n)];
                }
                next[start + i * stride] = acc;
            }
        }
        cur = next;
    }
    cur
}

/// Gaussian smoothing of a sketch; `sigma = 0` returns it unchanged.
pub fn blur_sketch(sketch: &Sketch, sigma: f64) -> Result<Sketch> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!("blur sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(sketch.clone());
    }
    let blurred: Vec<f64> = gaussian_filter(sketch.intensity.data(), sketch.shape(), sigma)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    Ok(Sketch {
        intensity: ImageTensor::new(sketch.shape().to_vec(), blurred, ValueRange::Unit)?,
        style: sketch.style,
        sigma_applied: sketch.sigma_applied.hypot(sigma),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(shape: &[usize]) -> SimParams {
        SimParams {
            image_shape: shape.to_vec(),
            ..SimParams::default()
        }
    }

    #[test]
    fn zero_instances_gives_background() {
        let p = SimParams {
            instance_count: (0, 0),
            ..params(&[32, 32])
        };
        let sim = simulate_nuclei_mask(&p).unwrap();
        assert_eq!(sim.mask.foreground_count(), 0);
        assert_eq!((sim.requested, sim.placed), (0, 0));
    }

    #[test]
    fn nuclei_are_disjoint_and_deterministic() {
        for shape in [vec![64, 64], vec![16, 32, 32]] {
            let p = SimParams {
                seed: 11,
                ..params(&shape)
            };
            let a = simulate_nuclei_mask(&p).unwrap();
            let b = simulate_nuclei_mask(&p).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.mask.instance_count(), a.placed);
            assert_eq!(a.mask.instance_ids(), (1..=a.placed as u16).collect::<Vec<_>>());
        }
    }

    #[test]
    fn crowded_field_reports_under_placement() {
        let p = SimParams {
            image_shape: vec![16, 16],
            instance_count: (40, 40),
            radius: (4.0, 4.0),
            max_attempts: 20,
            ..SimParams::default()
        };
        let sim = simulate_nuclei_mask(&p).unwrap();
        assert!(sim.under_placed());
        assert!(sim.placed >= 1);
    }

    #[test]
    fn membrane_single_seed_covers_field() {
        let p = SimParams {
            instance_count: (1, 1),
            ..params(&[20, 24])
        };
        let sim = simulate_membrane_mask(&p).unwrap();
        assert!(sim.mask.labels().iter().all(|&l| l == 1));
    }

    #[test]
    fn unknown_style_is_rejected() {
        assert!(matches!("cytoplasm".parse::<SketchStyle>(), Err(Error::UnknownStyle(_))));
        assert_eq!("Membrane".parse::<SketchStyle>().unwrap(), SketchStyle::Membrane);
    }

    #[test]
    fn invalid_params_rejected() {
        let bad = [
            SimParams { radius: (0.5, 2.0), ..SimParams::default() },
            SimParams { membrane_thickness: 0, ..SimParams::default() },
            SimParams { foreground: (0.9, 0.5), ..SimParams::default() },
            SimParams { instance_count: (3, 2), ..SimParams::default() },
            SimParams { image_shape: vec![8], ..SimParams::default() },
        ];
        for p in bad {
            assert!(simulate_nuclei_mask(&p).is_err(), "{p:?}");
        }
    }

    #[test]
    fn constant_background_sketch() {
        let mask = LabelMask::background(&[8, 8]).unwrap();
        let p = SimParams {
            background: (0.05, 0.05),
            ..SimParams::default()
        };
        let s = mask_to_sketch(&mask, SketchStyle::Nuclei, &p, 3).unwrap();
        assert!(s.intensity.data().iter().all(|&v| v == 0.05));
    }

    #[test]
    fn single_instance_sketch_levels() {
        let mut labels = vec![0u16; 25];
        for i in [6, 7, 8, 11, 12, 13] {
            labels[i] = 1;
        }
        let mask = LabelMask::new(vec![5, 5], labels.clone()).unwrap();
        let p = SimParams {
            foreground: (0.8, 0.8),
            background: (0.1, 0.1),
            ..SimParams::default()
        };
        let s = mask_to_sketch(&mask, SketchStyle::Nuclei, &p, 0).unwrap();
        for (v, l) in s.intensity.data().iter().zip(&labels) {
            assert_eq!(*v, if *l == 1 { 0.8 } else { 0.1 });
        }
    }

    #[test]
    fn thicker_membranes_cover_more() {
        let p = SimParams {
            instance_count: (5, 5),
            seed: 2,
            ..params(&[40, 40])
        };
        let mask = simulate_membrane_mask(&p).unwrap().mask;
        let count = |t: usize| {
            let q = SimParams {
                membrane_thickness: t,
                foreground: (1.0, 1.0),
                background: (0.0, 0.0),
                ..p.clone()
            };
            let s = mask_to_sketch(&mask, SketchStyle::Membrane, &q, 0).unwrap();
            s.intensity.data().iter().filter(|&&v| v == 1.0).count()
        };
        assert!(count(1) < count(2) && count(2) < count(3));
    }

    #[test]
    fn reflect_indexing() {
        let got: Vec<usize> = (-4..8).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0]);
        assert_eq!(reflect(-1, 1), 0);
    }

    #[test]
    fn blur_rejects_negative_sigma() {
        let mask = LabelMask::background(&[4, 4]).unwrap();
        let s = mask_to_sketch(&mask, SketchStyle::Nuclei, &SimParams::default(), 0).unwrap();
        assert!(blur_sketch(&s, -0.5).is_err());
        assert!(blur_sketch(&s, f64::NAN).is_err());
    }
}
