//! Referring-segmentation metrics: IoU, mIoU and precision at IoU thresholds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::imaging::Mask;
use crate::model::Model;
use crate::ris::binarize;
use crate::tensor::Tensor;

/// IoU thresholds reported as `P@t`.
pub const PRECISION_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// `|pred & gt| / |pred | gt|`, and 1 when both masks are empty.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::Shape {
            op: "iou",
            lhs: vec![pred.height(), pred.width()],
            rhs: vec![gt.height(), gt.width()],
        });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_sample_iou: Vec<f64>,
    #[serde(rename = "mIoU")]
    pub miou: f64,
    /// Keyed by the threshold printed with one decimal, e.g. `"0.7"`.
    pub precision_at: BTreeMap<String, f64>,
}

pub fn threshold_key(t: f64) -> String {
    format!("{t:.1}")
}

impl MetricsReport {
    pub fn from_ious(ious: Vec<f64>) -> Result<Self> {
        if ious.is_empty() {
            return Err(Error::invalid("cannot aggregate an empty IoU list"));
        }
        if let Some(bad) = ious.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("IoU {bad} outside [0, 1]")));
        }
        let n = ious.len() as f64;
        let miou = ious.iter().sum::<f64>() / n;
        let precision_at = PRECISION_THRESHOLDS
            .iter()
            .map(|&t| {
                let hits = ious.iter().filter(|&&v| v > t).count();
                (threshold_key(t), hits as f64 / n)
            })
            .collect();
        Ok(MetricsReport {
            per_sample_iou: ious,
            miou,
            precision_at,
        })
    }

    pub fn precision(&self, t: f64) -> Option<f64> {
        self.precision_at.get(&threshold_key(t)).copied()
    }

    /// `P@0.5 .. P@0.9` in threshold order.
    pub fn precisions(&self) -> Vec<f64> {
        PRECISION_THRESHOLDS
            .iter()
            .map(|&t| self.precision(t).unwrap_or(f64::NAN))
            .collect()
    }
}

/// Anything that maps a sample to per-pixel foreground probabilities.
pub trait MaskPredictor {
    /// `[1, 1, H, W]` (or `[H, W]`) probabilities for `sample`.
    fn predict_prob(&self, sample: &Sample) -> Result<Tensor>;
}

impl MaskPredictor for Model {
    fn predict_prob(&self, sample: &Sample) -> Result<Tensor> {
        Ok(self.infer(&sample.vis, &sample.ir, &sample.embedding)?.prob)
    }
}

/// Per-sample IoU of `prob > threshold` against the ground truth, in input order.
pub fn evaluate<P: MaskPredictor + ?Sized>(predictor: &P, samples: &[Sample], threshold: f64) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluation needs at least one sample"));
    }
    let ious = samples
        .iter()
        .map(|s| {
            let pred = binarize(&predictor.predict_prob(s)?, threshold)?;
            iou(&pred, &s.mask)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_ious(ious)
}
