use serde::{Deserialize, Serialize};

use crate::tensor::{ImageTensor, LabelMask};
use crate::{Error, Result};

/// Peak signal-to-noise ratio; `Infinite` when the evaluated MSE is exactly zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Psnr {
    Db(f64),
    Infinite,
}

impl Psnr {
    pub fn is_infinite(&self) -> bool {
        matches!(self, Psnr::Infinite)
    }

    /// Decibels, `f64::INFINITY` for the infinite case.
    pub fn value(&self) -> f64 {
        match *self {
            Psnr::Db(v) => v,
            Psnr::Infinite => f64::INFINITY,
        }
    }
}

/// Indices of the evaluation region: all pixels, or those with a nonzero label.
fn region_indices(len: usize, shape: &[usize], region: Option<&LabelMask>) -> Result<Vec<usize>> {
    match region {
        None => Ok((0..len).collect()),
        Some(m) => {
            if m.shape() != shape {
                return Err(Error::shape(shape, m.shape()));
            }
            let idx: Vec<usize> = m
                .labels()
                .iter()
                .enumerate()
                .filter(|(_, &l)| l > 0)
                .map(|(i, _)| i)
                .collect();
            if idx.is_empty() {
                return Err(Error::EmptyRegion);
            }
            Ok(idx)
        }
    }
}

pub fn psnr(
    reference: &ImageTensor,
    test: &ImageTensor,
    max_val: f64,
    region: Option<&LabelMask>,
) -> Result<Psnr> {
    reference.ensure_same_shape(test.shape())?;
    if !(max_val > 0.0 && max_val.is_finite()) {
        return Err(Error::InvalidParameter(format!("max_val must be > 0, got {max_val}")));
    }
    let idx = region_indices(reference.len(), reference.shape(), region)?;
    let (a, b) = (reference.data(), test.data());
    let mse = idx.iter().map(|&i| (a[i] - b[i]).powi(2)).sum::<f64>() / idx.len() as f64;
    if mse == 0.0 {
        return Ok(Psnr::Infinite);
    }
    Ok(Psnr::Db(10.0 * (max_val * max_val / mse).log10()))
}

/// Zero-normalized cross-correlation over the region, clamped to `[-1, 1]`.
pub fn zncc(a: &ImageTensor, b: &ImageTensor, region: Option<&LabelMask>) -> Result<f64> {
    a.ensure_same_shape(b.shape())?;
    let idx = region_indices(a.len(), a.shape(), region)?;
    let n = idx.len() as f64;
    let (da, db) = (a.data(), b.data());
    let ma = idx.iter().map(|&i| da[i]).sum::<f64>() / n;
    let mb = idx.iter().map(|&i| db[i]).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for &i in &idx {
        let (x, y) = (da[i] - ma, db[i] - mb);
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    // constant inputs leave rounding residue after mean subtraction
    let flat = |ss: f64, m: f64| ss <= n * (64.0 * f64::EPSILON * m.abs()).powi(2);
    if flat(saa, ma) || flat(sbb, mb) {
        return Err(Error::ZeroVariance);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Default binning interval for histogram comparisons of noised model-range data.
pub const HIST_RANGE: (f64, f64) = (-4.0, 4.0);
pub const HIST_BINS: usize = 64;

fn histogram(data: &[f64], bins: usize, (lo, hi): (f64, f64)) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    let width = (hi - lo) / bins as f64;
    for &v in data {
        let k = ((v - lo) / width).floor();
        // Values outside the interval land in the edge bins.
        let k = if k.is_nan() { 0 } else { k.clamp(0.0, (bins - 1) as f64) as usize };
        h[k] += 1.0;
    }
    let n = data.len() as f64;
    h.iter_mut().for_each(|c| *c /= n);
    h
}

/// Histogram intersection `sum_k min(p_k, q_k)` of the normalized histograms.
pub fn histogram_similarity(a: &ImageTensor, b: &ImageTensor, bins: usize, range: (f64, f64)) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("histogram operand"));
    }
    if bins < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 bins, got {bins}")));
    }
    if !(range.0 < range.1 && range.0.is_finite() && range.1.is_finite()) {
        return Err(Error::InvalidParameter(format!("invalid histogram range {range:?}")));
    }
    let (p, q) = (histogram(a.data(), bins, range), histogram(b.data(), bins, range));
    let s: f64 = p.iter().zip(&q).map(|(x, y)| x.min(*y)).sum();
    Ok(s.clamp(0.0, 1.0))
}
