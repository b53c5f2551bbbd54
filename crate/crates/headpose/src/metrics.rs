//! Evaluation metrics: per-angle pose MAE, normalized mean landmark error,
//! and the occlusion precision-recall sweep.

use crate::error::{Error, Result};
use crate::geometry::angle_error;

/// Per-angle mean absolute pose errors in degrees, plus their mean. Angle
/// differences wrap around, so 179 vs -179 counts as 2 degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseMae {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub mean: f64,
}

/// MAE over a batch of (yaw, pitch, roll, ...) pose vectors. Only the three
/// angles enter; the reported mean is the mean of the three per-angle MAEs.
pub fn pose_mae(pred: &[[f64; 6]], gt: &[[f64; 6]]) -> Result<PoseMae> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(Error::Degenerate(format!(
            "MAE needs equal nonzero counts, got {} and {}",
            pred.len(),
            gt.len()
        )));
    }
    let n = pred.len() as f64;
    let mut sums = [0.0; 3];
    for (p, g) in pred.iter().zip(gt) {
        for k in 0..3 {
            sums[k] += angle_error(p[k], g[k]);
        }
    }
    let (yaw, pitch, roll) = (sums[0] / n, sums[1] / n, sums[2] / n);
    Ok(PoseMae {
        yaw,
        pitch,
        roll,
        mean: (yaw + pitch + roll) / 3.0,
    })
}

/// Normalization choice for the landmark error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalizer {
    /// Distance between the eye pupils.
    Pupils,
    /// Bounding box height.
    Height,
}

/// Normalized mean landmark error in percent: per face, the mask-weighted
/// mean landmark distance over the face's normalizer `d`, averaged over
/// faces and scaled by 100.
pub fn shape_nme(
    pred: &[Vec<[f64; 2]>],
    gt: &[Vec<[f64; 2]>],
    masks: &[Vec<bool>],
    norms: &[f64],
) -> Result<f64> {
    let n = pred.len();
    if n == 0 || gt.len() != n || masks.len() != n || norms.len() != n {
        return Err(Error::Degenerate("NME needs equal nonzero counts".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        if norms[i] <= 0.0 {
            return Err(Error::Degenerate(format!("normalizer of face {i} is {}", norms[i])));
        }
        let annotated = masks[i].iter().filter(|&&m| m).count();
        if annotated == 0 {
            return Err(Error::Degenerate(format!("face {i} has no annotated landmarks")));
        }
        let w = 1.0 / annotated as f64;
        for l in 0..gt[i].len() {
            if masks[i][l] {
                let dx = pred[i][l][0] - gt[i][l][0];
                let dy = pred[i][l][1] - gt[i][l][1];
                total += w * (dx * dx + dy * dy).sqrt() / norms[i];
            }
        }
    }
    Ok(100.0 * total / n as f64)
}

/// One point of the occlusion precision-recall curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Sweep every distinct score threshold (prediction positive when
/// `score >= threshold`), returning curve points from the most to the least
/// conservative threshold.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<PrPoint>> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Degenerate("PR curve needs matching nonzero scores and labels".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Degenerate("PR curve needs at least one positive and one negative label".into()));
    }
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut points = Vec::with_capacity(thresholds.len());
    for t in thresholds {
        let mut tp = 0usize;
        let mut fp = 0usize;
        for (&s, &l) in scores.iter().zip(labels) {
            if s >= t {
                if l {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / positives as f64;
        points.push(PrPoint {
            threshold: t,
            precision,
            recall,
        });
    }
    Ok(points)
}

/// Maximum recall (percent) among operating points whose precision reaches
/// the target; 0 when no threshold qualifies.
pub fn recall_at_precision(scores: &[f64], labels: &[bool], precision_target: f64) -> Result<f64> {
    let curve = pr_curve(scores, labels)?;
    let best = curve
        .iter()
        .filter(|p| p.precision >= precision_target)
        .map(|p| p.recall)
        .fold(0.0f64, f64::max);
    Ok(100.0 * best)
}
