//! Accuracy, box regression error and detection-error taxonomy.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::synth::{BoxCoords, Dataset};

pub const CORRECT_IOU: f64 = 0.5;
pub const BACKGROUND_IOU: f64 = 0.3;

/// Intersection over union of two center-format boxes `(cx, cy, w, h)`.
pub fn iou(a: &BoxCoords, b: &BoxCoords) -> Result<f64> {
    for bx in [a, b] {
        if !(bx[2] > 0.0 && bx[3] > 0.0) || bx.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("box {bx:?} needs finite coordinates and positive size")));
        }
    }
    let span = |c: f64, s: f64| (c - s / 2.0, c + s / 2.0);
    let (ax0, ax1) = span(a[0], a[2]);
    let (ay0, ay1) = span(a[1], a[3]);
    let (bx0, bx1) = span(b[0], b[2]);
    let (by0, by1) = span(b[1], b[3]);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionType {
    Correct,
    MisLocalization,
    Background,
}

pub fn classify_detection(iou: f64) -> Result<DetectionType> {
    if !(0.0..=1.0).contains(&iou) {
        return Err(Error::invalid(format!("IoU must lie in [0, 1], got {iou}")));
    }
    Ok(if iou >= CORRECT_IOU {
        DetectionType::Correct
    } else if iou >= BACKGROUND_IOU {
        DetectionType::MisLocalization
    } else {
        DetectionType::Background
    })
}

/// Fractions of correctly classified samples per detection type.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorHistogram {
    pub counted: usize,
    pub correct: f64,
    pub mis_localization: f64,
    pub background: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub samples: usize,
    pub accuracy: f64,
    /// Mean over samples of the squared box error summed over coordinates.
    pub loc_mse: f64,
    pub mean_iou: f64,
    pub errors: ErrorHistogram,
}

/// Source and target test-split summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub source: EvalSummary,
    pub target: EvalSummary,
}

pub fn evaluate(model: &Model, data: &Dataset) -> Result<EvalSummary> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    if data.dim != model.config.input_dim {
        return Err(Error::Shape {
            op: "evaluate",
            lhs: vec![data.len(), data.dim],
            rhs: vec![0, model.config.input_dim],
        });
    }
    if let Some(s) = data.samples.iter().find(|s| s.y >= model.config.classes) {
        return Err(Error::invalid(format!(
            "label {} out of range for a {}-class model",
            s.y, model.config.classes
        )));
    }
    let (probs, boxes) = model.predict(&data.all_features())?;
    summarize(&probs, &boxes, data)
}

/// Scores class probabilities (`n x classes`) and boxes (`n x 4`) against
/// the labels of `data`.
pub fn summarize(probs: &Tensor, boxes: &Tensor, data: &Dataset) -> Result<EvalSummary> {
    let n = data.len();
    if n == 0 || probs.dims2().map(|d| d.0) != Some(n) || boxes.shape() != [n, 4] {
        return Err(Error::Shape {
            op: "summarize",
            lhs: probs.shape().to_vec(),
            rhs: boxes.shape().to_vec(),
        });
    }
    let mut correct = 0usize;
    let mut sq = 0.0;
    let mut iou_sum = 0.0;
    let mut hist = [0usize; 3];
    for (i, s) in data.samples.iter().enumerate() {
        let p = probs.row(i);
        let pred = p
            .iter()
            .enumerate()
            .fold(0, |best, (c, &v)| if v > p[best] { c } else { best });
        let b: BoxCoords = boxes.row(i).try_into().expect("four box coordinates");
        sq += b.iter().zip(&s.bbox).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
        // a degenerate predicted box overlaps nothing
        let overlap = if b[2] > 0.0 && b[3] > 0.0 { iou(&b, &s.bbox)? } else { 0.0 };
        iou_sum += overlap;
        if pred == s.y {
            correct += 1;
            hist[classify_detection(overlap)? as usize] += 1;
        }
    }
    let n = data.len() as f64;
    let frac = |k: usize| if correct == 0 { 0.0 } else { k as f64 / correct as f64 };
    Ok(EvalSummary {
        samples: data.len(),
        accuracy: correct as f64 / n,
        loc_mse: sq / n,
        mean_iou: iou_sum / n,
        errors: ErrorHistogram {
            counted: correct,
            correct: frac(hist[0]),
            mis_localization: frac(hist[1]),
            background: frac(hist[2]),
        },
    })
}
