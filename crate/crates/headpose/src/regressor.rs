//! The occlusion-aware landmark regressor: a coarse-to-fine cascade of
//! gradient-boosted regression trees that refines the rigid landmark
//! initialization using features read from the heatmaps.
//!
//! Every tree is anchored at one landmark: its split features probe only
//! that landmark's heatmap and its leaf increments move only that landmark's
//! two coordinates. That makes the occlusion rule exact: when a landmark is
//! flagged occluded, all trees anchored there are skipped, and with every
//! landmark occluded the prediction collapses to the rigid initialization,
//! a valid face shape by construction.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{pose_to_visibility, project, Camera, MeanFace3D, PoseParams, Shape2D};
use crate::model::HeatmapStack;

/// A heatmap probe: anchor landmark plus a pixel offset relative to the
/// current estimate of that landmark. Offsets are bounded by their stage's
/// radius (coarse stages look far, fine stages nearby).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeIndexedFeature {
    pub anchor: usize,
    pub offset: [f64; 2],
}

/// One internal split: the difference of two probes (same anchor) compared
/// against a threshold; `< threshold` goes left.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitNode {
    pub a: ShapeIndexedFeature,
    pub b: ShapeIndexedFeature,
    pub threshold: f64,
}

/// Depth-d binary regression tree in heap layout: 2^d - 1 splits, 2^d
/// leaves. Leaves hold full 2L increments, nonzero only at the anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTree {
    pub anchor: usize,
    pub depth: usize,
    pub splits: Vec<SplitNode>,
    pub leaves: Vec<Vec<f64>>,
}

impl RegressionTree {
    /// Route to a leaf for the given heatmaps and stage-input shape.
    pub fn leaf_index(&self, heatmaps: &HeatmapStack, shape: &[[f64; 2]]) -> usize {
        let mut node = 0usize;
        for _ in 0..self.depth {
            let split = &self.splits[node];
            let va = probe(heatmaps, shape, &split.a);
            let vb = probe(heatmaps, shape, &split.b);
            node = if va - vb < split.threshold { 2 * node + 1 } else { 2 * node + 2 };
        }
        node - self.splits.len()
    }
}

/// Nearest-pixel heatmap lookup at `shape[anchor] + offset`; reads outside
/// the grid return 0.
fn probe(heatmaps: &HeatmapStack, shape: &[[f64; 2]], f: &ShapeIndexedFeature) -> f64 {
    let x = (shape[f.anchor][0] + f.offset[0]).round() as isize;
    let y = (shape[f.anchor][1] + f.offset[1]).round() as isize;
    let s = heatmaps.size as isize;
    if x < 0 || x >= s || y < 0 || y >= s {
        0.0
    } else {
        heatmaps.at(f.anchor, x as usize, y as usize)
    }
}

/// Evaluate a feature list against one sample.
pub fn extract_features(heatmaps: &HeatmapStack, shape: &Shape2D, features: &[ShapeIndexedFeature]) -> Vec<f64> {
    features.iter().map(|f| probe(heatmaps, shape.points(), f)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CascadeConfig {
    /// Cascade stages S.
    pub stages: usize,
    /// Trees per stage T, allocated round-robin over landmarks.
    pub trees_per_stage: usize,
    /// Tree depth d.
    pub depth: usize,
    /// Shrinkage applied to every tree's increment.
    pub shrinkage: f64,
    /// Candidate feature pool size per stage, and split candidates per node.
    pub feature_pool: usize,
    /// First and last stage probe radii as fractions of `face_size`.
    pub radius_start: f64,
    pub radius_end: f64,
    /// Reference face size in pixels, scales the probe radii.
    pub face_size: f64,
    pub seed: u64,
}

impl CascadeConfig {
    /// Desk-scale defaults for a given face size in pixels.
    pub fn toy(face_size: f64, seed: u64) -> Self {
        CascadeConfig {
            stages: 10,
            trees_per_stage: 32,
            depth: 4,
            shrinkage: 0.1,
            feature_pool: 400,
            radius_start: 0.2,
            radius_end: 0.02,
            face_size,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.trees_per_stage == 0 || self.depth == 0 {
            return Err(Error::InvalidConfig("cascade needs stages, trees and depth >= 1".into()));
        }
        if !(self.shrinkage > 0.0 && self.shrinkage <= 1.0) {
            return Err(Error::InvalidConfig(format!("shrinkage must be in (0, 1], got {}", self.shrinkage)));
        }
        if self.stages > 1 && !(self.radius_start > self.radius_end && self.radius_end > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "radii must decrease strictly: start {} end {}",
                self.radius_start, self.radius_end
            )));
        }
        if self.feature_pool < 2 {
            return Err(Error::InvalidConfig("feature pool must hold at least 2 features".into()));
        }
        if self.face_size <= 0.0 {
            return Err(Error::InvalidConfig(format!("face_size must be positive, got {}", self.face_size)));
        }
        Ok(())
    }

    /// Probe radius of stage `s` in pixels: geometric interpolation from
    /// `radius_start` down to `radius_end`, times the face size.
    pub fn stage_radius(&self, stage: usize) -> f64 {
        let frac = if self.stages == 1 {
            self.radius_start
        } else {
            let t = stage as f64 / (self.stages - 1) as f64;
            self.radius_start * (self.radius_end / self.radius_start).powf(t)
        };
        frac * self.face_size
    }
}

/// One training example for the cascade.
#[derive(Debug, Clone, Copy)]
pub struct CascadeSample<'a> {
    pub heatmaps: &'a HeatmapStack,
    pub gt_shape: &'a [[f64; 2]],
    /// Annotation mask; masked landmarks never influence split scores or
    /// leaf values.
    pub mask: &'a [bool],
    /// Rigid initialization x0.
    pub initial: &'a [[f64; 2]],
    /// Visibility gate per landmark: false skips trees anchored there.
    pub visible: &'a [bool],
}

/// Trained cascade plus the per-stage mean residual norms observed during
/// training (index 0 is the residual of the initialization).
#[derive(Debug, Clone, PartialEq)]
pub struct Cascade {
    pub config: CascadeConfig,
    pub num_landmarks: usize,
    pub stages: Vec<Vec<RegressionTree>>,
    pub stage_residuals: Vec<f64>,
}

/// Rigid initialization of the refinement: project the mean face through
/// the pose, and combine pose-driven self-occlusion with the network's
/// occlusion probabilities (occluded when either source says so).
pub fn initialize_shape(
    pose: &PoseParams,
    model: &MeanFace3D,
    camera: &Camera,
    occlusion_prob: Option<&[f64]>,
) -> Result<(Shape2D, Vec<bool>)> {
    let shape = project(pose, model, camera)?;
    let self_visible = pose_to_visibility(pose, model);
    let visible = match occlusion_prob {
        Some(probs) => {
            if probs.len() != model.len() {
                return Err(Error::shape(
                    "initialize_shape",
                    format!("{} occlusion probabilities", model.len()),
                    format!("{}", probs.len()),
                ));
            }
            self_visible.iter().zip(probs).map(|(&sv, &p)| sv && p <= 0.5).collect()
        }
        None => self_visible,
    };
    Ok((shape, visible))
}

fn mean_residual_norm(current: &[Vec<[f64; 2]>], samples: &[CascadeSample]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (cur, sample) in current.iter().zip(samples) {
        for l in 0..cur.len() {
            if sample.mask[l] {
                let dx = sample.gt_shape[l][0] - cur[l][0];
                let dy = sample.gt_shape[l][1] - cur[l][1];
                total += (dx * dx + dy * dy).sqrt();
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

struct Candidate {
    a: usize,
    b: usize,
    threshold: f64,
}

/// Fit the cascade by greedy gradient boosting on the masked residuals
/// `gt - x^(s-1)`. Deterministic for a fixed config seed.
pub fn train_cascade(samples: &[CascadeSample], config: &CascadeConfig) -> Result<Cascade> {
    config.validate()?;
    if samples.len() < 2 {
        return Err(Error::Degenerate(format!(
            "cascade training needs >= 2 samples, got {}",
            samples.len()
        )));
    }
    let num_landmarks = samples[0].gt_shape.len();
    for s in samples {
        if s.gt_shape.len() != num_landmarks
            || s.initial.len() != num_landmarks
            || s.mask.len() != num_landmarks
            || s.visible.len() != num_landmarks
            || s.heatmaps.count != num_landmarks
        {
            return Err(Error::shape(
                "train_cascade",
                format!("{num_landmarks} landmarks"),
                "mismatched sample",
            ));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut current: Vec<Vec<[f64; 2]>> = samples.iter().map(|s| s.initial.to_vec()).collect();
    let mut stages = Vec::with_capacity(config.stages);
    let mut stage_residuals = vec![mean_residual_norm(&current, samples)];

    for stage in 0..config.stages {
        let radius = config.stage_radius(stage);
        // Per-anchor feature pool for this stage; values are probed once per
        // sample at the frozen stage-input shape, exactly what prediction
        // will recompute.
        let per_anchor = (config.feature_pool / num_landmarks).max(2);
        let pool: Vec<Vec<ShapeIndexedFeature>> = (0..num_landmarks)
            .map(|anchor| {
                (0..per_anchor)
                    .map(|_| {
                        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                        let dist = radius * rng.gen_range(0.0_f64..1.0).sqrt();
                        ShapeIndexedFeature {
                            anchor,
                            offset: [dist * angle.cos(), dist * angle.sin()],
                        }
                    })
                    .collect()
            })
            .collect();
        let stage_input = current.clone();
        let values: Vec<Vec<Vec<f64>>> = samples
            .iter()
            .zip(&stage_input)
            .map(|(s, shape)| {
                pool.iter()
                    .map(|feats| feats.iter().map(|f| probe(s.heatmaps, shape, f)).collect())
                    .collect()
            })
            .collect();

        let mut residuals: Vec<Vec<[f64; 2]>> = samples
            .iter()
            .zip(&current)
            .map(|(s, cur)| {
                (0..num_landmarks)
                    .map(|l| [s.gt_shape[l][0] - cur[l][0], s.gt_shape[l][1] - cur[l][1]])
                    .collect()
            })
            .collect();

        let mut trees = Vec::with_capacity(config.trees_per_stage);
        for t in 0..config.trees_per_stage {
            let anchor = t % num_landmarks;
            let (tree, leaf_of_sample) =
                fit_tree(anchor, config, &pool[anchor], &values, &residuals, samples, &mut rng);
            // Boosting update: shrunk, visibility-gated leaf increments move
            // the running shapes and residuals.
            for (i, sample) in samples.iter().enumerate() {
                if !sample.visible[anchor] {
                    continue;
                }
                let inc = &tree.leaves[leaf_of_sample[i]];
                let dx = config.shrinkage * inc[2 * anchor];
                let dy = config.shrinkage * inc[2 * anchor + 1];
                current[i][anchor][0] += dx;
                current[i][anchor][1] += dy;
                residuals[i][anchor][0] -= dx;
                residuals[i][anchor][1] -= dy;
            }
            trees.push(tree);
        }
        stages.push(trees);
        stage_residuals.push(mean_residual_norm(&current, samples));
    }

    Ok(Cascade {
        config: *config,
        num_landmarks,
        stages,
        stage_residuals,
    })
}

/// Grow one tree breadth-first; returns it together with each sample's leaf
/// assignment. `values[i][j]` is pool feature j of sample i for this anchor.
fn fit_tree(
    anchor: usize,
    config: &CascadeConfig,
    pool: &[ShapeIndexedFeature],
    values: &[Vec<Vec<f64>>],
    residuals: &[Vec<[f64; 2]>],
    samples: &[CascadeSample],
    rng: &mut ChaCha8Rng,
) -> (RegressionTree, Vec<usize>) {
    let n = values.len();
    let num_splits = (1 << config.depth) - 1;
    let num_leaves = 1 << config.depth;
    let num_landmarks = residuals[0].len();

    let mut splits = Vec::with_capacity(num_splits);
    let mut node_samples: Vec<Vec<usize>> = vec![Vec::new(); num_splits + num_leaves];
    node_samples[0] = (0..n).collect();

    for node in 0..num_splits {
        let here = std::mem::take(&mut node_samples[node]);
        let candidate = best_split(anchor, config, pool, values, residuals, samples, &here, rng);
        let (mut left, mut right) = (Vec::new(), Vec::new());
        for &i in &here {
            let diff = values[i][anchor][candidate.a] - values[i][anchor][candidate.b];
            if diff < candidate.threshold {
                left.push(i);
            } else {
                right.push(i);
            }
        }
        node_samples[2 * node + 1] = left;
        node_samples[2 * node + 2] = right;
        splits.push(SplitNode {
            a: pool[candidate.a],
            b: pool[candidate.b],
            threshold: candidate.threshold,
        });
    }

    let mut leaf_of_sample = vec![0usize; n];
    let mut leaves = Vec::with_capacity(num_leaves);
    for leaf in 0..num_leaves {
        let members = &node_samples[num_splits + leaf];
        for &i in members {
            leaf_of_sample[i] = leaf;
        }
        let mut mean = [0.0; 2];
        let mut count = 0usize;
        for &i in members {
            if samples[i].mask[anchor] {
                mean[0] += residuals[i][anchor][0];
                mean[1] += residuals[i][anchor][1];
                count += 1;
            }
        }
        let mut increment = vec![0.0; 2 * num_landmarks];
        if count > 0 {
            increment[2 * anchor] = mean[0] / count as f64;
            increment[2 * anchor + 1] = mean[1] / count as f64;
        }
        leaves.push(increment);
    }

    (
        RegressionTree {
            anchor,
            depth: config.depth,
            splits,
            leaves,
        },
        leaf_of_sample,
    )
}

/// Choose the variance-reduction-maximizing candidate among `feature_pool`
/// random (pair, threshold) draws; an exponential prior on the pair's
/// spatial separation favors nearby probes. Strictly-greater comparison
/// keeps the earliest best candidate, so the search is deterministic.
#[allow(clippy::too_many_arguments)]
fn best_split(
    anchor: usize,
    config: &CascadeConfig,
    pool: &[ShapeIndexedFeature],
    values: &[Vec<Vec<f64>>],
    residuals: &[Vec<[f64; 2]>],
    samples: &[CascadeSample],
    here: &[usize],
    rng: &mut ChaCha8Rng,
) -> Candidate {
    let lambda = (config.stage_radius(0) / 2.0).max(1e-9);
    let mut best = Candidate {
        a: 0,
        b: 1.min(pool.len() - 1),
        threshold: 0.0,
    };
    let mut best_score = f64::NEG_INFINITY;
    for _ in 0..config.feature_pool {
        let (a, b) = {
            let mut pick = (0, 1.min(pool.len() - 1));
            for _ in 0..20 {
                let a = rng.gen_range(0..pool.len());
                let b = rng.gen_range(0..pool.len());
                if a == b {
                    continue;
                }
                pick = (a, b);
                let dx = pool[a].offset[0] - pool[b].offset[0];
                let dy = pool[a].offset[1] - pool[b].offset[1];
                let dist = (dx * dx + dy * dy).sqrt();
                if rng.gen_range(0.0..1.0) < (-dist / lambda).exp() {
                    break;
                }
            }
            pick
        };
        // Threshold from a random member's observed difference keeps the
        // split informative for the data reaching this node.
        let threshold = if here.is_empty() {
            0.0
        } else {
            let i = here[rng.gen_range(0..here.len())];
            values[i][anchor][a] - values[i][anchor][b]
        };

        // Variance reduction on the anchor's residual over annotated
        // samples: maximize sum over children of |sum|^2 / count.
        let mut left_sum = [0.0; 2];
        let mut right_sum = [0.0; 2];
        let (mut nl, mut nr) = (0usize, 0usize);
        for &i in here {
            if !samples[i].mask[anchor] {
                continue;
            }
            let diff = values[i][anchor][a] - values[i][anchor][b];
            if diff < threshold {
                left_sum[0] += residuals[i][anchor][0];
                left_sum[1] += residuals[i][anchor][1];
                nl += 1;
            } else {
                right_sum[0] += residuals[i][anchor][0];
                right_sum[1] += residuals[i][anchor][1];
                nr += 1;
            }
        }
        let mut score = 0.0;
        if nl > 0 {
            score += (left_sum[0] * left_sum[0] + left_sum[1] * left_sum[1]) / nl as f64;
        }
        if nr > 0 {
            score += (right_sum[0] * right_sum[0] + right_sum[1] * right_sum[1]) / nr as f64;
        }
        if score > best_score {
            best_score = score;
            best = Candidate { a, b, threshold };
        }
    }
    best
}

impl Cascade {
    /// Refine an initialization. `visible[l] = false` drops the updates of
    /// every tree anchored at landmark l; with all landmarks occluded the
    /// result is exactly `x0`.
    pub fn predict(&self, heatmaps: &HeatmapStack, x0: &Shape2D, visible: &[bool]) -> Result<Shape2D> {
        if x0.len() != self.num_landmarks || visible.len() != self.num_landmarks || heatmaps.count != self.num_landmarks {
            return Err(Error::shape(
                "Cascade::predict",
                format!("{} landmarks", self.num_landmarks),
                format!("{} points, {} flags, {} maps", x0.len(), visible.len(), heatmaps.count),
            ));
        }
        let mut shape = x0.points().to_vec();
        for trees in &self.stages {
            // Features index the stage-input shape, frozen before any of
            // the stage's trees move it.
            let stage_input = shape.clone();
            for tree in trees {
                if !visible[tree.anchor] {
                    continue;
                }
                let leaf = tree.leaf_index(heatmaps, &stage_input);
                let inc = &tree.leaves[leaf];
                shape[tree.anchor][0] += self.config.shrinkage * inc[2 * tree.anchor];
                shape[tree.anchor][1] += self.config.shrinkage * inc[2 * tree.anchor + 1];
            }
        }
        Ok(Shape2D(shape))
    }

    /// Serialize to the binary cascade format: magic "OERT", config block,
    /// then per-tree nodes and leaves, all integers and floats little-endian.
    /// Round trips are bit-exact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(b"OERT")?;
        for v in [
            self.num_landmarks as u32,
            self.config.stages as u32,
            self.config.trees_per_stage as u32,
            self.config.depth as u32,
            self.config.feature_pool as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in [
            self.config.shrinkage,
            self.config.radius_start,
            self.config.radius_end,
            self.config.face_size,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.config.seed.to_le_bytes())?;
        w.write_all(&(self.stage_residuals.len() as u32).to_le_bytes())?;
        for v in &self.stage_residuals {
            w.write_all(&v.to_le_bytes())?;
        }
        for trees in &self.stages {
            for tree in trees {
                w.write_all(&(tree.anchor as u32).to_le_bytes())?;
                for split in &tree.splits {
                    for f in [&split.a, &split.b] {
                        w.write_all(&(f.anchor as u32).to_le_bytes())?;
                        w.write_all(&f.offset[0].to_le_bytes())?;
                        w.write_all(&f.offset[1].to_le_bytes())?;
                    }
                    w.write_all(&split.threshold.to_le_bytes())?;
                }
                for leaf in &tree.leaves {
                    for v in leaf {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"OERT" {
            return Err(Error::Format(format!("bad cascade magic {magic:?}")));
        }
        let num_landmarks = read_u32(&mut r)? as usize;
        let stages_n = read_u32(&mut r)? as usize;
        let trees_per_stage = read_u32(&mut r)? as usize;
        let depth = read_u32(&mut r)? as usize;
        let feature_pool = read_u32(&mut r)? as usize;
        let shrinkage = read_f64(&mut r)?;
        let radius_start = read_f64(&mut r)?;
        let radius_end = read_f64(&mut r)?;
        let face_size = read_f64(&mut r)?;
        let mut seed_bytes = [0u8; 8];
        r.read_exact(&mut seed_bytes)?;
        let seed = u64::from_le_bytes(seed_bytes);
        let residual_count = read_u32(&mut r)? as usize;
        let mut stage_residuals = Vec::with_capacity(residual_count);
        for _ in 0..residual_count {
            stage_residuals.push(read_f64(&mut r)?);
        }
        let config = CascadeConfig {
            stages: stages_n,
            trees_per_stage,
            depth,
            shrinkage,
            feature_pool,
            radius_start,
            radius_end,
            face_size,
            seed,
        };
        let num_splits = (1 << depth) - 1;
        let num_leaves = 1 << depth;
        let mut stages = Vec::with_capacity(stages_n);
        for _ in 0..stages_n {
            let mut trees = Vec::with_capacity(trees_per_stage);
            for _ in 0..trees_per_stage {
                let anchor = read_u32(&mut r)? as usize;
                let mut splits = Vec::with_capacity(num_splits);
                for _ in 0..num_splits {
                    let a_anchor = read_u32(&mut r)? as usize;
                    let a_off = [read_f64(&mut r)?, read_f64(&mut r)?];
                    let b_anchor = read_u32(&mut r)? as usize;
                    let b_off = [read_f64(&mut r)?, read_f64(&mut r)?];
                    let threshold = read_f64(&mut r)?;
                    splits.push(SplitNode {
                        a: ShapeIndexedFeature { anchor: a_anchor, offset: a_off },
                        b: ShapeIndexedFeature { anchor: b_anchor, offset: b_off },
                        threshold,
                    });
                }
                let mut leaves = Vec::with_capacity(num_leaves);
                for _ in 0..num_leaves {
                    let mut leaf = Vec::with_capacity(2 * num_landmarks);
                    for _ in 0..2 * num_landmarks {
                        leaf.push(read_f64(&mut r)?);
                    }
                    leaves.push(leaf);
                }
                trees.push(RegressionTree { anchor, depth, splits, leaves });
            }
            stages.push(trees);
        }
        Ok(Cascade {
            config,
            num_landmarks,
            stages,
            stage_residuals,
        })
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}
