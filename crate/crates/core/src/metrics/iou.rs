use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::tensor::LabelMask;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// `(truth id, IoU with its matched prediction)`, ascending by id; 0 when unmatched.
    pub per_instance: Vec<(u16, f64)>,
    /// Mean over truth instances. With no truth instances this is 1 when the
    /// prediction is empty too, else 0.
    pub mean: f64,
    pub match_threshold: f64,
    /// Truth instances whose matched IoU reaches `match_threshold`.
    pub matched: usize,
}

/// Greedy one-to-one matching in descending IoU order (ties by truth id, then
/// predicted id); each instance is used at most once.
pub fn instance_iou(pred: &LabelMask, truth: &LabelMask, match_threshold: f64) -> Result<IouReport> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape(truth.shape(), pred.shape()));
    }
    let mut area_p: HashMap<u16, usize> = HashMap::new();
    let mut area_t: HashMap<u16, usize> = HashMap::new();
    let mut inter: HashMap<(u16, u16), usize> = HashMap::new();
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        if p > 0 {
            *area_p.entry(p).or_default() += 1;
        }
        if t > 0 {
            *area_t.entry(t).or_default() += 1;
        }
        if p > 0 && t > 0 {
            *inter.entry((t, p)).or_default() += 1;
        }
    }
    let mut pairs: Vec<(f64, u16, u16)> = inter
        .iter()
        .map(|(&(t, p), &i)| (i as f64 / (area_t[&t] + area_p[&p] - i) as f64, t, p))
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut best: HashMap<u16, f64> = HashMap::new();
    let mut used = std::collections::HashSet::new();
    for (iou, t, p) in pairs {
        if !best.contains_key(&t) && !used.contains(&p) {
            best.insert(t, iou);
            used.insert(p);
        }
    }
    let mut per_instance: Vec<(u16, f64)> = area_t
        .keys()
        .map(|&t| (t, best.get(&t).copied().unwrap_or(0.0)))
        .collect();
    per_instance.sort_by_key(|&(t, _)| t);
    let mean = if per_instance.is_empty() {
        if area_p.is_empty() {
            1.0
        } else {
            0.0
        }
    } else {
        per_instance.iter().map(|&(_, v)| v).sum::<f64>() / per_instance.len() as f64
    };
    let matched = per_instance.iter().filter(|&&(_, v)| v >= match_threshold && v > 0.0).count();
    Ok(IouReport {
        per_instance,
        mean,
        match_threshold,
        matched,
    })
}
