//! Mask IoU and Average Recall over IoU thresholds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `|a ∩ b| / |a ∪ b|`; two empty masks score 1.
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("mask sizes {} vs {}", pred.len(), gt.len())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Elementwise union of the annotations grounding one phrase.
pub fn merge_plural(masks: &[Vec<bool>]) -> Result<Vec<bool>> {
    let first = masks.first().ok_or_else(|| Error::Contract("merge of no masks".into()))?;
    let mut out = first.clone();
    for m in &masks[1..] {
        if m.len() != out.len() {
            return Err(Error::Shape("masks to merge differ in size".into()));
        }
        out.iter_mut().zip(m).for_each(|(a, &b)| *a |= b);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iou: f64,
    pub stuff: bool,
    pub plural: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecallCurve {
    pub thresholds: Vec<f64>,
    pub recall: Vec<f64>,
    /// Trapezoidal area under `recall(τ)`.
    pub area: f64,
}

/// `0.00, 0.01, …, 1.00`.
pub fn default_thresholds() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

/// Fraction of records with IoU ≥ τ at each threshold, and its trapezoidal area.
pub fn average_recall(records: &[EvalRecord], thresholds: &[f64]) -> Result<RecallCurve> {
    if records.is_empty() {
        return Err(Error::Contract("average recall of no records".into()));
    }
    if thresholds.len() < 2 || thresholds.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Param("thresholds must be increasing with at least two entries".into()));
    }
    let n = records.len() as f64;
    let recall: Vec<f64> = thresholds
        .iter()
        .map(|&tau| records.iter().filter(|r| r.iou >= tau).count() as f64 / n)
        .collect();
    let area = thresholds
        .windows(2)
        .zip(recall.windows(2))
        .map(|(t, r)| (t[1] - t[0]) * (r[0] + r[1]) / 2.0)
        .sum();
    Ok(RecallCurve { thresholds: thresholds.to_vec(), recall, area })
}

/// Overall curve plus the things/stuff and singular/plural splits; a split
/// with no records has no curve.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoryCurves {
    pub overall: RecallCurve,
    pub things: Option<RecallCurve>,
    pub stuff: Option<RecallCurve>,
    pub singulars: Option<RecallCurve>,
    pub plurals: Option<RecallCurve>,
}

impl CategoryCurves {
    pub fn compute(records: &[EvalRecord], thresholds: &[f64]) -> Result<Self> {
        let split = |f: fn(&EvalRecord) -> bool| -> Result<Option<RecallCurve>> {
            let sub: Vec<EvalRecord> = records.iter().copied().filter(&f).collect();
            if sub.is_empty() {
                Ok(None)
            } else {
                average_recall(&sub, thresholds).map(Some)
            }
        };
        Ok(Self {
            overall: average_recall(records, thresholds)?,
            things: split(|r| !r.stuff)?,
            stuff: split(|r| r.stuff)?,
            singulars: split(|r| !r.plural)?,
            plurals: split(|r| r.plural)?,
        })
    }

    /// Areas in the column order overall, things, stuff, singulars, plurals.
    pub fn areas(&self) -> [Option<f64>; 5] {
        let a = |c: &Option<RecallCurve>| c.as_ref().map(|c| c.area);
        [Some(self.overall.area), a(&self.things), a(&self.stuff), a(&self.singulars), a(&self.plurals)]
    }
}
