//! Scalar image fields and instance label masks.
//!
//! Shapes are `[H, W]` for 2D and `[D, H, W]` for 3D, stored row-major with
//! the last axis fastest.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nominal intensity interval a field is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueRange {
    /// File and sketch domain, `[0, 1]`.
    Unit,
    /// Model domain, `[-1, 1]` before noising.
    Model,
}

/// Which domain a noisy state originated from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    /// Real (or toy stand-in) microscopy images.
    Image,
    /// Sketches rendered from label masks.
    Sketch,
}

pub(crate) fn validate_shape(shape: &[usize]) -> Result<usize> {
    if !(2..=3).contains(&shape.len()) {
        return Err(Error::InvalidParameter(format!(
            "rank must be 2 or 3, got shape {shape:?}"
        )));
    }
    if shape.contains(&0) {
        return Err(Error::InvalidParameter(format!(
            "shape {shape:?} has an empty axis"
        )));
    }
    Ok(shape.iter().product())
}

/// Row-major strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Calls `f` with the flat index of every face neighbour (4-neighbourhood in
/// 2D, 6-neighbourhood in 3D) of `index`.
pub(crate) fn for_each_face_neighbor(shape: &[usize], index: usize, mut f: impl FnMut(usize)) {
    let st = strides(shape);
    let mut rem = index;
    for (axis, &stride) in st.iter().enumerate() {
        let coord = rem / stride;
        rem %= stride;
        if coord > 0 {
            f(index - stride);
        }
        if coord + 1 < shape[axis] {
            f(index + stride);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    range: ValueRange,
}

impl ImageTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>, range: ValueRange) -> Result<Self> {
        let len = validate_shape(&shape)?;
        if data.len() != len {
            return Err(Error::InvalidParameter(format!(
                "data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "non-finite value {} at index {i}",
                data[i]
            )));
        }
        Ok(Self { shape, data, range })
    }

    pub fn filled(shape: &[usize], value: f64, range: ValueRange) -> Result<Self> {
        let len = validate_shape(shape)?;
        Self::new(shape.to_vec(), vec![value; len], range)
    }

    pub fn zeros(shape: &[usize], range: ValueRange) -> Result<Self> {
        Self::filled(shape, 0.0, range)
    }

    /// Independent standard-normal draws.
    pub fn standard_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Self> {
        let len = validate_shape(shape)?;
        let data = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        Ok(Self {
            shape: shape.to_vec(),
            data,
            range: ValueRange::Model,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn with_range(mut self, range: ValueRange) -> Self {
        self.range = range;
        self
    }

    pub fn ensure_same_shape(&self, other: &[usize]) -> Result<()> {
        if self.shape != other {
            return Err(Error::shape(&self.shape, other));
        }
        Ok(())
    }

    /// Element-wise map. Panics in debug builds if `f` produces non-finite values.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self {
            shape: self.shape.clone(),
            data,
            range: self.range,
        }
    }

    /// Element-wise combination of two equally shaped fields.
    pub fn zip_map(&self, other: &ImageTensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.ensure_same_shape(other.shape())?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self {
            shape: self.shape.clone(),
            data,
            range: self.range,
        })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn max_abs_diff(&self, other: &ImageTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Instance label field; 0 is background, instances are `1..=K`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMask {
    shape: Vec<usize>,
    labels: Vec<u16>,
}

impl LabelMask {
    pub fn new(shape: Vec<usize>, labels: Vec<u16>) -> Result<Self> {
        let len = validate_shape(&shape)?;
        if labels.len() != len {
            return Err(Error::InvalidParameter(format!(
                "label count {} does not match shape {shape:?}",
                labels.len()
            )));
        }
        Ok(Self { shape, labels })
    }

    pub fn background(shape: &[usize]) -> Result<Self> {
        let len = validate_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            labels: vec![0; len],
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub(crate) fn labels_mut(&mut self) -> &mut [u16] {
        &mut self.labels
    }

    /// Sorted distinct non-zero instance ids.
    pub fn instance_ids(&self) -> Vec<u16> {
        self.labels
            .iter()
            .copied()
            .filter(|&l| l != 0)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn instance_count(&self) -> usize {
        self.instance_ids().len()
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    /// Pixels that have a face neighbour carrying a different label.
    pub fn boundary(&self) -> Vec<bool> {
        let mut out = vec![false; self.labels.len()];
        for (i, flag) in out.iter_mut().enumerate() {
            let l = self.labels[i];
            for_each_face_neighbor(&self.shape, i, |j| {
                if self.labels[j] != l {
                    *flag = true;
                }
            });
        }
        out
    }
}
