//! The four training losses and their combination.
//!
//! Two pose losses attach to the bottleneck heads: a direct Euclidean loss on
//! the 6 pose parameters, and an alignment loss that projects the mean 3D
//! face through the predicted pose and measures the masked distance to the
//! annotated landmarks. Heatmaps and visibilities train with masked
//! cross-entropy. All four are batch sums; the trainer divides by the batch
//! size before each optimizer step so the learning rate keeps its usual
//! meaning.
//!
//! Per-sample landmark terms carry weights `mask[l] / popcount(mask)`, which
//! sum to one per sample, so annotating fewer landmarks never changes a
//! sample's overall influence. Each loss returns its value together with the
//! gradient with respect to the prediction, verified against central finite
//! differences in the tests.

use crate::error::{Error, Result};
use crate::geometry::{project, project_jacobian, Camera, MeanFace3D, PoseParams};
use crate::tensor::Tensor;

/// Keeps cross-entropy finite when a softmax output underflows.
pub const LOG_CLAMP: f64 = 1e-12;

/// Weights of the four loss terms in the combined objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub pose_l2: f64,
    pub pose_align: f64,
    pub heatmap: f64,
    pub visibility: f64,
}

impl LossWeights {
    pub fn new(pose_l2: f64, pose_align: f64, heatmap: f64, visibility: f64) -> Result<Self> {
        for (name, v) in [
            ("pose_l2", pose_l2),
            ("pose_align", pose_align),
            ("heatmap", heatmap),
            ("visibility", visibility),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("loss weight {name} must be positive and finite, got {v}")));
            }
        }
        Ok(LossWeights {
            pose_l2,
            pose_align,
            heatmap,
            visibility,
        })
    }

    pub fn uniform() -> Self {
        LossWeights {
            pose_l2: 1.0,
            pose_align: 1.0,
            heatmap: 1.0,
            visibility: 1.0,
        }
    }
}

/// Inverse-magnitude weight calibration: given the converged single-task
/// loss magnitudes, choose weights so every weighted term contributes the
/// same amount, normalized to sum 1.
pub fn calibrate_weights(magnitudes: [f64; 4]) -> Result<LossWeights> {
    for m in magnitudes {
        if !(m > 0.0 && m.is_finite()) {
            return Err(Error::InvalidConfig(format!("loss magnitude must be positive, got {m}")));
        }
    }
    let inv: Vec<f64> = magnitudes.iter().map(|m| 1.0 / m).collect();
    let norm: f64 = inv.iter().sum();
    LossWeights::new(inv[0] / norm, inv[1] / norm, inv[2] / norm, inv[3] / norm)
}

/// Values of the four loss terms over a batch, as raw sums.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub pose_l2: f64,
    pub pose_align: f64,
    pub heatmap_ce: f64,
    pub visibility_ce: f64,
}

impl LossBreakdown {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.pose_l2 * self.pose_l2
            + w.pose_align * self.pose_align
            + w.heatmap * self.heatmap_ce
            + w.visibility * self.visibility_ce
    }

    /// Rescale every term, e.g. by 1/batch for per-sample means.
    pub fn scaled(&self, factor: f64) -> LossBreakdown {
        LossBreakdown {
            pose_l2: self.pose_l2 * factor,
            pose_align: self.pose_align * factor,
            heatmap_ce: self.heatmap_ce * factor,
            visibility_ce: self.visibility_ce * factor,
        }
    }

    pub fn add(&mut self, other: &LossBreakdown) {
        self.pose_l2 += other.pose_l2;
        self.pose_align += other.pose_align;
        self.heatmap_ce += other.heatmap_ce;
        self.visibility_ce += other.visibility_ce;
    }
}

fn check_finite(values: &[[f64; 6]], what: &str) -> Result<()> {
    for v in values {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(what.into()));
        }
    }
    Ok(())
}

/// Euclidean pose loss: sum over the batch of the L2 distance between the
/// predicted and ground-truth parameter 6-vectors. Returns the loss and its
/// gradient with respect to the predictions.
pub fn loss_pose_l2(pred: &[[f64; 6]], gt: &[[f64; 6]]) -> Result<(f64, Vec<[f64; 6]>)> {
    if pred.len() != gt.len() {
        return Err(Error::shape("loss_pose_l2", format!("{} poses", gt.len()), format!("{}", pred.len())));
    }
    check_finite(pred, "predicted pose")?;
    check_finite(gt, "ground-truth pose")?;
    let mut value = 0.0;
    let mut grads = vec![[0.0; 6]; pred.len()];
    for ((p, g), grad) in pred.iter().zip(gt).zip(&mut grads) {
        let mut sq = 0.0;
        for k in 0..6 {
            sq += (g[k] - p[k]) * (g[k] - p[k]);
        }
        let norm = sq.sqrt();
        value += norm;
        if norm > 0.0 {
            for k in 0..6 {
                grad[k] = (p[k] - g[k]) / norm;
            }
        }
    }
    Ok((value, grads))
}

/// Alignment target of one sample: annotated landmark coordinates and the
/// annotation mask.
#[derive(Debug, Clone, Copy)]
pub struct AlignTarget<'a> {
    pub landmarks: &'a [[f64; 2]],
    pub mask: &'a [bool],
}

fn mask_weight(mask: &[bool]) -> Result<f64> {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Degenerate("sample with all-zero landmark mask".into()));
    }
    Ok(1.0 / count as f64)
}

/// Alignment pose loss: project the mean face through each predicted pose
/// and sum the mask-weighted distances to the annotated landmarks.
pub fn loss_pose_align(
    pred: &[[f64; 6]],
    targets: &[AlignTarget],
    model: &MeanFace3D,
    camera: &Camera,
) -> Result<(f64, Vec<[f64; 6]>)> {
    if pred.len() != targets.len() {
        return Err(Error::shape("loss_pose_align", format!("{} samples", targets.len()), format!("{}", pred.len())));
    }
    let mut value = 0.0;
    let mut grads = vec![[0.0; 6]; pred.len()];
    for ((p, target), grad) in pred.iter().zip(targets).zip(&mut grads) {
        if target.landmarks.len() != model.len() || target.mask.len() != model.len() {
            return Err(Error::shape(
                "loss_pose_align",
                format!("{} landmarks", model.len()),
                format!("{}", target.landmarks.len()),
            ));
        }
        let w = mask_weight(target.mask)?;
        let pose = PoseParams::from_raw(*p);
        let proj = project(&pose, model, camera)?;
        let jac = project_jacobian(&pose, model, camera)?;
        for l in 0..model.len() {
            if !target.mask[l] {
                continue;
            }
            let dx = proj.points()[l][0] - target.landmarks[l][0];
            let dy = proj.points()[l][1] - target.landmarks[l][1];
            let r = (dx * dx + dy * dy).sqrt();
            value += w * r;
            if r > 0.0 {
                for k in 0..6 {
                    grad[k] += w * (dx * jac[l][0][k] + dy * jac[l][1][k]) / r;
                }
            }
        }
    }
    Ok((value, grads))
}

/// Ground-truth heatmap stored sparsely: only the pixels inside the Gaussian
/// window carry probability mass. Entries are (row-major pixel index, value)
/// and sum to 1.
#[derive(Debug, Clone, Default)]
pub struct SparseHeatmap {
    pub entries: Vec<(usize, f64)>,
}

impl SparseHeatmap {
    pub fn sum(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v).sum()
    }

    /// Expand to a dense row-major grid.
    pub fn to_dense(&self, size: usize) -> Vec<f64> {
        let mut grid = vec![0.0; size * size];
        for &(p, v) in &self.entries {
            grid[p] = v;
        }
        grid
    }
}

/// Isotropic Gaussian ground-truth heatmap centered on a landmark, truncated
/// at 3 sigma and renormalized to sum exactly 1. Landmarks outside the grid
/// produce an empty map (their mask is expected to be off).
pub fn gaussian_heatmap(center: [f64; 2], size: usize, sigma: f64) -> SparseHeatmap {
    let radius = (3.0 * sigma).ceil() as isize;
    let cx = center[0].round() as isize;
    let cy = center[1].round() as isize;
    let mut entries = Vec::new();
    let mut total = 0.0;
    for y in (cy - radius).max(0)..=(cy + radius).min(size as isize - 1) {
        for x in (cx - radius).max(0)..=(cx + radius).min(size as isize - 1) {
            let dx = x as f64 - center[0];
            let dy = y as f64 - center[1];
            let d2 = dx * dx + dy * dy;
            if d2 <= (3.0 * sigma) * (3.0 * sigma) {
                let v = (-d2 / (2.0 * sigma * sigma)).exp();
                entries.push(((y as usize) * size + x as usize, v));
                total += v;
            }
        }
    }
    if total > 0.0 {
        for (_, v) in &mut entries {
            *v /= total;
        }
    }
    SparseHeatmap { entries }
}

/// Masked heatmap cross-entropy over a batch.
///
/// `pred` has shape [N, S, S, L] with per-channel softmax outputs; `gt[i][l]`
/// is the sparse ground-truth map of landmark l in sample i. Logs are clamped
/// at [`LOG_CLAMP`]. Returns the loss and its gradient with respect to
/// `pred`.
pub fn loss_heatmap_ce(
    pred: &Tensor,
    gt: &[Vec<SparseHeatmap>],
    masks: &[Vec<bool>],
) -> Result<(f64, Tensor)> {
    let shape = pred.shape();
    if shape.len() != 4 || shape[1] != shape[2] {
        return Err(Error::shape("loss_heatmap_ce", "[N, S, S, L]", format!("{shape:?}")));
    }
    let (n, s, l_count) = (shape[0], shape[1], shape[3]);
    if gt.len() != n || masks.len() != n {
        return Err(Error::shape(
            "loss_heatmap_ce",
            format!("{n} samples"),
            format!("{} gt, {} masks", gt.len(), masks.len()),
        ));
    }
    let mut value = 0.0;
    let mut grad = Tensor::zeros(shape);
    let pd = pred.data();
    let gd = grad.data_mut();
    for i in 0..n {
        let w = mask_weight(&masks[i])?;
        for l in 0..l_count {
            if !masks[i][l] {
                continue;
            }
            for &(pixel, gt_v) in &gt[i][l].entries {
                let idx = (i * s * s + pixel) * l_count + l;
                let h = pd[idx];
                value += w * -gt_v * h.max(LOG_CLAMP).ln();
                if h > LOG_CLAMP {
                    gd[idx] += w * -gt_v / h;
                }
            }
        }
    }
    Ok((value, grad))
}

/// Masked 2-class visibility cross-entropy over a batch.
///
/// `pred` has shape [N, 1, 1, 2L] with per-pair softmax outputs; `gt[i][l]`
/// is the one-hot (visible, occluded) target.
pub fn loss_visibility_ce(
    pred: &Tensor,
    gt: &[Vec<[f64; 2]>],
    masks: &[Vec<bool>],
) -> Result<(f64, Tensor)> {
    let shape = pred.shape();
    if shape.len() != 4 || shape[3] % 2 != 0 {
        return Err(Error::shape("loss_visibility_ce", "[N, 1, 1, 2L]", format!("{shape:?}")));
    }
    let (n, l_count) = (shape[0], shape[3] / 2);
    if gt.len() != n || masks.len() != n {
        return Err(Error::shape(
            "loss_visibility_ce",
            format!("{n} samples"),
            format!("{} gt, {} masks", gt.len(), masks.len()),
        ));
    }
    let mut value = 0.0;
    let mut grad = Tensor::zeros(shape);
    let pd = pred.data();
    let gd = grad.data_mut();
    for i in 0..n {
        let w = mask_weight(&masks[i])?;
        for l in 0..l_count {
            if !masks[i][l] {
                continue;
            }
            for p in 0..2 {
                let idx = i * 2 * l_count + 2 * l + p;
                let gt_v = gt[i][l][p];
                if gt_v != 0.0 {
                    let v = pd[idx];
                    value += w * -gt_v * v.max(LOG_CLAMP).ln();
                    if v > LOG_CLAMP {
                        gd[idx] += w * -gt_v / v;
                    }
                }
            }
        }
    }
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn pose_l2_zero_for_exact_prediction() {
        let poses = vec![[10.0, -5.0, 3.0, 1.0, 2.0, 30.0]; 4];
        let (v, g) = loss_pose_l2(&poses, &poses).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn pose_l2_unit_vector_difference() {
        let gt = [[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]];
        let pred = [[0.0; 6]];
        let (v, _) = loss_pose_l2(&pred, &gt).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pose_l2_matches_hand_computed_sum() {
        let pred = [
            [1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            [-1.0, 1.0, -1.0, 1.0, -1.0, 1.0],
        ];
        let gt = [
            [1.5, 2.0, 3.0, 4.0, 5.0, 6.0],
            [3.0, 4.0, 0.0, 0.0, 0.0, 0.0],
            [-1.0, 1.0, -1.0, 1.0, -1.0, 2.0],
        ];
        // Independent scalar computation: ||d1|| = 0.5, ||d2|| = 5, ||d3|| = 1.
        let expected = 0.5 + 5.0 + 1.0;
        let (v, _) = loss_pose_l2(&pred, &gt).unwrap();
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn pose_l2_gradient_matches_finite_differences() {
        let mut r = rng(1);
        let pred: Vec<[f64; 6]> = (0..3).map(|_| std::array::from_fn(|_| r.gen_range(-2.0..2.0))).collect();
        let gt: Vec<[f64; 6]> = (0..3).map(|_| std::array::from_fn(|_| r.gen_range(-2.0..2.0))).collect();
        let (_, grad) = loss_pose_l2(&pred, &gt).unwrap();
        let eps = 1e-6;
        for i in 0..3 {
            for k in 0..6 {
                let mut hi = pred.clone();
                let mut lo = pred.clone();
                hi[i][k] += eps;
                lo[i][k] -= eps;
                let num = (loss_pose_l2(&hi, &gt).unwrap().0 - loss_pose_l2(&lo, &gt).unwrap().0) / (2.0 * eps);
                let rel = (num - grad[i][k]).abs() / num.abs().max(grad[i][k].abs()).max(1e-8);
                assert!(rel < 1e-4);
            }
        }
    }

    #[test]
    fn pose_l2_rejects_non_finite() {
        let bad = [[f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0]];
        let good = [[0.0; 6]];
        assert!(loss_pose_l2(&bad, &good).is_err());
    }

    #[test]
    fn align_loss_zero_when_landmarks_are_the_projection() {
        let model = MeanFace3D::bundled();
        let camera = Camera::ScaledOrthographic;
        let pose = [12.0, -8.0, 5.0, 32.0, 30.0, 25.0];
        let proj = project(&PoseParams::from_raw(pose), &model, &camera).unwrap();
        let mask = vec![true; model.len()];
        let target = AlignTarget {
            landmarks: proj.points(),
            mask: &mask,
        };
        let (v, g) = loss_pose_align(&[pose], &[target], &model, &camera).unwrap();
        assert!(v.abs() < 1e-12);
        assert!(g[0].iter().all(|&x| x.abs() < 1e-12));
    }

    #[test]
    fn align_loss_masking_renormalizes_terms() {
        let model = MeanFace3D::bundled();
        let camera = Camera::ScaledOrthographic;
        let pose = [5.0, 10.0, -3.0, 32.0, 32.0, 28.0];
        let proj = project(&PoseParams::from_raw(pose), &model, &camera).unwrap();
        // Displace every landmark by a known per-landmark offset.
        let mut r = rng(3);
        let landmarks: Vec<[f64; 2]> = proj
            .points()
            .iter()
            .map(|p| [p[0] + r.gen_range(-3.0..3.0), p[1] + r.gen_range(-3.0..3.0)])
            .collect();
        let mut mask = vec![true; model.len()];
        mask[4] = false;
        mask[17] = false;
        let (v, _) = loss_pose_align(
            &[pose],
            &[AlignTarget { landmarks: &landmarks, mask: &mask }],
            &model,
            &camera,
        )
        .unwrap();
        // Term-by-term oracle with explicit renormalization.
        let annotated = mask.iter().filter(|&&m| m).count() as f64;
        let mut expected = 0.0;
        for l in 0..model.len() {
            if !mask[l] {
                continue;
            }
            let dx = proj.points()[l][0] - landmarks[l][0];
            let dy = proj.points()[l][1] - landmarks[l][1];
            expected += (dx * dx + dy * dy).sqrt() / annotated;
        }
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn align_loss_is_positively_homogeneous_in_residuals() {
        let model = MeanFace3D::bundled();
        let camera = Camera::ScaledOrthographic;
        let pose = [0.0, 0.0, 0.0, 0.0, 0.0, 30.0];
        let proj = project(&PoseParams::from_raw(pose), &model, &camera).unwrap();
        let mut r = rng(9);
        let offsets: Vec<[f64; 2]> = (0..model.len()).map(|_| [r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0)]).collect();
        let mask = vec![true; model.len()];
        let shifted = |f: f64| -> Vec<[f64; 2]> {
            proj.points()
                .iter()
                .zip(&offsets)
                .map(|(p, o)| [p[0] + f * o[0], p[1] + f * o[1]])
                .collect()
        };
        let one = shifted(1.0);
        let two = shifted(2.0);
        let (v1, _) = loss_pose_align(&[pose], &[AlignTarget { landmarks: &one, mask: &mask }], &model, &camera).unwrap();
        let (v2, _) = loss_pose_align(&[pose], &[AlignTarget { landmarks: &two, mask: &mask }], &model, &camera).unwrap();
        assert!((v2 - 2.0 * v1).abs() < 1e-10);
    }

    #[test]
    fn align_loss_rejects_all_zero_mask() {
        let model = MeanFace3D::bundled();
        let landmarks = vec![[0.0, 0.0]; model.len()];
        let mask = vec![false; model.len()];
        let err = loss_pose_align(
            &[[0.0, 0.0, 0.0, 0.0, 0.0, 1.0]],
            &[AlignTarget { landmarks: &landmarks, mask: &mask }],
            &model,
            &Camera::ScaledOrthographic,
        )
        .unwrap_err();
        assert!(err.to_string().contains("mask"));
    }

    #[test]
    fn align_gradient_matches_finite_differences() {
        let model = MeanFace3D::bundled();
        let camera = Camera::ScaledOrthographic;
        let mut r = rng(21);
        let pose: [f64; 6] = [
            r.gen_range(-30.0..30.0),
            r.gen_range(-30.0..30.0),
            r.gen_range(-30.0..30.0),
            r.gen_range(-5.0..5.0),
            r.gen_range(-5.0..5.0),
            r.gen_range(20.0..40.0),
        ];
        let landmarks: Vec<[f64; 2]> = (0..model.len()).map(|_| [r.gen_range(-20.0..20.0), r.gen_range(-20.0..20.0)]).collect();
        let mut mask = vec![true; model.len()];
        mask[2] = false;
        let target = AlignTarget { landmarks: &landmarks, mask: &mask };
        let (_, grad) = loss_pose_align(&[pose], &[target], &model, &camera).unwrap();
        let eps = 1e-6;
        for k in 0..6 {
            let mut hi = pose;
            let mut lo = pose;
            hi[k] += eps;
            lo[k] -= eps;
            let vh = loss_pose_align(&[hi], &[AlignTarget { landmarks: &landmarks, mask: &mask }], &model, &camera).unwrap().0;
            let vl = loss_pose_align(&[lo], &[AlignTarget { landmarks: &landmarks, mask: &mask }], &model, &camera).unwrap().0;
            let num = (vh - vl) / (2.0 * eps);
            let rel = (num - grad[0][k]).abs() / num.abs().max(grad[0][k].abs()).max(1e-8);
            assert!(rel < 1e-4, "param {k}: analytic {} numeric {num}", grad[0][k]);
        }
    }

    #[test]
    fn gaussian_heatmap_sums_to_one_and_peaks_at_center() {
        let hm = gaussian_heatmap([10.3, 20.7], 64, 1.5);
        assert!((hm.sum() - 1.0).abs() < 1e-12);
        let dense = hm.to_dense(64);
        let peak = dense
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(peak, 21 * 64 + 10);
    }

    #[test]
    fn heatmap_ce_zero_for_matching_deltas() {
        // gt is a delta at p*, prediction puts probability 1 there.
        let size = 8;
        let l = 2;
        let mut pred = Tensor::zeros(&[1, size, size, l]);
        let p_star = 3 * size + 5;
        for ch in 0..l {
            pred.data_mut()[p_star * l + ch] = 1.0;
        }
        let gt = vec![vec![
            SparseHeatmap { entries: vec![(p_star, 1.0)] },
            SparseHeatmap { entries: vec![(p_star, 1.0)] },
        ]];
        let masks = vec![vec![true; l]];
        let (v, _) = loss_heatmap_ce(&pred, &gt, &masks).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn heatmap_ce_uniform_prediction_costs_ln_pixel_count() {
        // One-hot gt against a uniform prediction over a 256x256 grid.
        let size = 256;
        let l = 3;
        let pred = Tensor::filled(&[1, size, size, l], 1.0 / (size * size) as f64);
        let gt: Vec<Vec<SparseHeatmap>> = vec![(0..l)
            .map(|ch| SparseHeatmap { entries: vec![(ch * 100 + 7, 1.0)] })
            .collect()];
        let masks = vec![vec![true; l]];
        let (v, _) = loss_heatmap_ce(&pred, &gt, &masks).unwrap();
        // Every annotated term costs ln(65536); the per-sample weights sum
        // to 1 over the three landmarks.
        let expected = ((size * size) as f64).ln();
        assert!((v - expected).abs() < 1e-6, "{v} vs {expected}");
        assert!((expected - 11.0904).abs() < 1e-4);
    }

    #[test]
    fn heatmap_ce_matches_dense_double_sum_oracle() {
        let size = 16;
        let l = 4;
        let n = 2;
        let mut r = rng(40);
        // Random positive prediction, normalized per channel.
        let mut pred = Tensor::zeros(&[n, size, size, l]);
        for v in pred.data_mut() {
            *v = r.gen_range(0.01..1.0);
        }
        for i in 0..n {
            for ch in 0..l {
                let mut sum = 0.0;
                for p in 0..size * size {
                    sum += pred.data()[(i * size * size + p) * l + ch];
                }
                for p in 0..size * size {
                    pred.data_mut()[(i * size * size + p) * l + ch] /= sum;
                }
            }
        }
        let gt: Vec<Vec<SparseHeatmap>> = (0..n)
            .map(|_| {
                (0..l)
                    .map(|_| gaussian_heatmap([r.gen_range(3.0..12.0), r.gen_range(3.0..12.0)], size, 1.0))
                    .collect()
            })
            .collect();
        let masks: Vec<Vec<bool>> = (0..n).map(|i| (0..l).map(|ch| !(i == 1 && ch == 2)).collect()).collect();
        let (v, _) = loss_heatmap_ce(&pred, &gt, &masks).unwrap();

        // Dense oracle: full double sum over all pixels.
        let mut expected = 0.0;
        for i in 0..n {
            let w = 1.0 / masks[i].iter().filter(|&&m| m).count() as f64;
            for ch in 0..l {
                if !masks[i][ch] {
                    continue;
                }
                let dense = gt[i][ch].to_dense(size);
                for (p, &gtv) in dense.iter().enumerate() {
                    if gtv > 0.0 {
                        let h = pred.data()[(i * size * size + p) * l + ch];
                        expected += w * -gtv * h.max(LOG_CLAMP).ln();
                    }
                }
            }
        }
        assert!((v - expected).abs() < 1e-9);
    }

    #[test]
    fn heatmap_ce_gradient_matches_finite_differences() {
        let size = 6;
        let l = 2;
        let mut r = rng(41);
        let mut pred = Tensor::zeros(&[1, size, size, l]);
        for v in pred.data_mut() {
            *v = r.gen_range(0.05..1.0);
        }
        let gt = vec![vec![
            gaussian_heatmap([2.0, 3.0], size, 1.0),
            gaussian_heatmap([4.0, 1.0], size, 1.0),
        ]];
        let masks = vec![vec![true, true]];
        let (_, grad) = loss_heatmap_ce(&pred, &gt, &masks).unwrap();
        let eps = 1e-7;
        for idx in 0..pred.len() {
            let mut hi = pred.clone();
            let mut lo = pred.clone();
            hi.data_mut()[idx] += eps;
            lo.data_mut()[idx] -= eps;
            let num = (loss_heatmap_ce(&hi, &gt, &masks).unwrap().0 - loss_heatmap_ce(&lo, &gt, &masks).unwrap().0) / (2.0 * eps);
            let ana = grad.data()[idx];
            let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-8);
            assert!(rel < 1e-4, "index {idx}: analytic {ana} numeric {num}");
        }
    }

    #[test]
    fn visibility_ce_zero_for_one_hot_match() {
        let pred = Tensor::from_vec(&[1, 1, 1, 4], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let gt = vec![vec![[1.0, 0.0], [0.0, 1.0]]];
        let masks = vec![vec![true, true]];
        let (v, _) = loss_visibility_ce(&pred, &gt, &masks).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn visibility_ce_uniform_prediction_costs_ln_two() {
        let pred = Tensor::from_vec(&[1, 1, 1, 2], vec![0.5, 0.5]).unwrap();
        let gt = vec![vec![[0.0, 1.0]]];
        let masks = vec![vec![true]];
        let (v, _) = loss_visibility_ce(&pred, &gt, &masks).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn visibility_ce_matches_direct_sum_oracle() {
        let l = 5;
        let n = 3;
        let mut r = rng(50);
        let mut pred = Tensor::zeros(&[n, 1, 1, 2 * l]);
        for pair in pred.data_mut().chunks_mut(2) {
            let a = r.gen_range(0.05..0.95);
            pair[0] = a;
            pair[1] = 1.0 - a;
        }
        let gt: Vec<Vec<[f64; 2]>> = (0..n)
            .map(|_| (0..l).map(|_| if r.gen_bool(0.5) { [1.0, 0.0] } else { [0.0, 1.0] }).collect())
            .collect();
        let masks: Vec<Vec<bool>> = (0..n)
            .map(|_| (0..l).map(|_| r.gen_bool(0.8)).collect::<Vec<bool>>())
            .map(|m| if m.iter().any(|&x| x) { m } else { vec![true; l] })
            .collect();
        let (v, _) = loss_visibility_ce(&pred, &gt, &masks).unwrap();
        let mut expected = 0.0;
        for i in 0..n {
            let w = 1.0 / masks[i].iter().filter(|&&m| m).count() as f64;
            for lm in 0..l {
                if masks[i][lm] {
                    for p in 0..2 {
                        let h = pred.data()[i * 2 * l + 2 * lm + p];
                        expected += w * -gt[i][lm][p] * h.max(LOG_CLAMP).ln();
                    }
                }
            }
        }
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn visibility_ce_gradient_matches_finite_differences() {
        let l = 3;
        let mut r = rng(51);
        let mut pred = Tensor::zeros(&[2, 1, 1, 2 * l]);
        for v in pred.data_mut() {
            *v = r.gen_range(0.05..0.95);
        }
        let gt: Vec<Vec<[f64; 2]>> = (0..2)
            .map(|_| (0..l).map(|_| if r.gen_bool(0.5) { [1.0, 0.0] } else { [0.0, 1.0] }).collect())
            .collect();
        let masks = vec![vec![true, false, true], vec![true, true, true]];
        let (_, grad) = loss_visibility_ce(&pred, &gt, &masks).unwrap();
        let eps = 1e-7;
        for idx in 0..pred.len() {
            let mut hi = pred.clone();
            let mut lo = pred.clone();
            hi.data_mut()[idx] += eps;
            lo.data_mut()[idx] -= eps;
            let num = (loss_visibility_ce(&hi, &gt, &masks).unwrap().0
                - loss_visibility_ce(&lo, &gt, &masks).unwrap().0)
                / (2.0 * eps);
            let ana = grad.data()[idx];
            let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-8);
            assert!(rel < 1e-4, "index {idx}: analytic {ana} numeric {num}");
        }
    }

    #[test]
    fn masked_terms_do_not_depend_on_their_predictions() {
        // Flip the prediction of a masked landmark; the loss may not change.
        let size = 8;
        let l = 3;
        let mut r = rng(60);
        let mut pred = Tensor::zeros(&[1, size, size, l]);
        for v in pred.data_mut() {
            *v = r.gen_range(0.01..1.0);
        }
        let gt: Vec<Vec<SparseHeatmap>> = vec![(0..l).map(|_| gaussian_heatmap([4.0, 4.0], size, 1.0)).collect()];
        let masks = vec![vec![true, false, true]];
        let (v1, _) = loss_heatmap_ce(&pred, &gt, &masks).unwrap();
        for p in 0..size * size {
            pred.data_mut()[p * l + 1] = r.gen_range(0.01..1.0);
        }
        let (v2, _) = loss_heatmap_ce(&pred, &gt, &masks).unwrap();
        assert_eq!(v1, v2);
    }

    #[test]
    fn total_loss_is_linear_in_weights() {
        let breakdown = LossBreakdown {
            pose_l2: 2.0,
            pose_align: 3.0,
            heatmap_ce: 5.0,
            visibility_ce: 7.0,
        };
        let w = LossWeights::uniform();
        assert_eq!(breakdown.total(&w), 17.0);
        // Weights (2, ~0, ~0, ~0) give exactly twice the first term.
        let w2 = LossWeights::new(2.0, 1e-12, 1e-12, 1e-12).unwrap();
        assert!((breakdown.total(&w2) - 4.0).abs() < 1e-10);
        // Random case assembled from independently computed parts.
        let w3 = LossWeights::new(0.3, 0.25, 0.2, 0.25).unwrap();
        let expected = 0.3 * 2.0 + 0.25 * 3.0 + 0.2 * 5.0 + 0.25 * 7.0;
        assert!((breakdown.total(&w3) - expected).abs() < 1e-14);
    }

    #[test]
    fn calibration_equal_magnitudes_gives_quarter_weights() {
        let w = calibrate_weights([3.7, 3.7, 3.7, 3.7]).unwrap();
        for v in [w.pose_l2, w.pose_align, w.heatmap, w.visibility] {
            assert!((v - 0.25).abs() < 1e-14);
        }
    }

    #[test]
    fn calibration_is_inverse_proportional() {
        let w = calibrate_weights([1.0, 2.0, 4.0, 8.0]).unwrap();
        // Oracle: inverses (1, 1/2, 1/4, 1/8) normalized by their sum.
        let norm = 1.0 + 0.5 + 0.25 + 0.125;
        assert!((w.pose_l2 - 1.0 / norm).abs() < 1e-14);
        assert!((w.pose_align - 0.5 / norm).abs() < 1e-14);
        assert!((w.heatmap - 0.25 / norm).abs() < 1e-14);
        assert!((w.visibility - 0.125 / norm).abs() < 1e-14);
        let sum = w.pose_l2 + w.pose_align + w.heatmap + w.visibility;
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn calibration_balances_weighted_magnitudes() {
        let mags = [0.37, 11.0, 2.5, 140.0];
        let w = calibrate_weights(mags).unwrap();
        let products = [
            w.pose_l2 * mags[0],
            w.pose_align * mags[1],
            w.heatmap * mags[2],
            w.visibility * mags[3],
        ];
        for p in &products[1..] {
            assert!((p - products[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn calibration_rejects_non_positive_magnitudes() {
        assert!(calibrate_weights([1.0, 0.0, 1.0, 1.0]).is_err());
        assert!(calibrate_weights([1.0, -2.0, 1.0, 1.0]).is_err());
    }
}
