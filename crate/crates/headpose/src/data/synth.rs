//! Synthetic face dataset: textured background, a pose-shaded head disk,
//! per-landmark color-coded blobs and feature edges, optional occluder
//! patches, with exact ground truth by construction.
//!
//! Sample i draws all randomness from stream i of a counter-based RNG seeded
//! with the dataset seed, so generation is deterministic and order-independent.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{hsv_to_rgb, FaceAnnotation, Image, LandmarkAnnotation, TrainSample, Visibility};
use crate::error::{Error, Result};
use crate::geometry::{pose_to_visibility, project, Camera, MeanFace3D, PoseParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub count: usize,
    pub seed: u64,
    pub image_size: usize,
    /// Half-ranges of the uniform angle distributions, degrees.
    pub yaw_range: f64,
    pub pitch_range: f64,
    pub roll_range: f64,
    /// Magnitude of the smooth non-rigid landmark perturbation, pixels.
    pub deformation: f64,
    /// Per-landmark probability of a synthetic occlusion patch.
    pub occlusion_rate: f64,
}

impl SynthConfig {
    pub fn new(count: usize, seed: u64) -> Self {
        SynthConfig {
            count,
            seed,
            image_size: 64,
            yaw_range: 60.0,
            pitch_range: 45.0,
            roll_range: 40.0,
            deformation: 1.5,
            occlusion_rate: 0.15,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidConfig("synthetic dataset needs count >= 1".into()));
        }
        if self.image_size < 16 {
            return Err(Error::InvalidConfig(format!("image_size too small: {}", self.image_size)));
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) {
            return Err(Error::InvalidConfig(format!("occlusion_rate must be in [0, 1], got {}", self.occlusion_rate)));
        }
        Ok(())
    }
}

/// Distinctive per-landmark color, stable across datasets: golden-angle hue
/// spacing keeps all 21 landmarks distinguishable.
pub fn landmark_color(l: usize) -> [f64; 3] {
    let hue = (l as f64 * 137.508).rem_euclid(360.0);
    hsv_to_rgb([hue, 0.85, 0.95])
}

/// Feature chains of the bundled 21-point face, drawn as edges when both
/// endpoints are visible.
const EDGE_CHAINS: &[&[usize]] = &[
    &[0, 1, 2],    // left brow
    &[3, 4, 5],    // right brow
    &[6, 7, 8],    // left eye
    &[9, 10, 11],  // right eye
    &[13, 14, 15], // nose
    &[17, 18, 19], // mouth
];

/// Generate a fully labeled synthetic dataset over the bundled mean face.
/// Ground truth (pose, landmarks, visibility, mask) is exact by
/// construction; deformation 0 makes landmarks equal the rigid projection.
pub fn generate_synthetic_dataset(config: &SynthConfig, model: &MeanFace3D) -> Result<Vec<TrainSample>> {
    config.validate()?;
    (0..config.count).map(|i| generate_sample(config, model, i)).collect()
}

fn generate_sample(config: &SynthConfig, model: &MeanFace3D, index: usize) -> Result<TrainSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64 + 1);
    let s = config.image_size as f64;
    let half = (s - 1.0) / 2.0;

    let pose = PoseParams::new(
        rng.gen_range(-config.yaw_range..=config.yaw_range),
        rng.gen_range(-config.pitch_range..=config.pitch_range),
        rng.gen_range(-config.roll_range..=config.roll_range),
        half + rng.gen_range(-0.05..0.05) * s,
        half + rng.gen_range(-0.05..0.05) * s,
        s * 0.55 / model.extent() * rng.gen_range(0.88..1.12),
    )?;

    let rigid = project(&pose, model, &Camera::ScaledOrthographic)?;

    // Smooth low-frequency deformation: two random sinusoidal fields over
    // the model surface per image axis, so nearby landmarks move together.
    let mut field = [[([0.0; 3], 0.0, 0.0); 2]; 2];
    for axis in &mut field {
        for comp in axis.iter_mut() {
            let dir: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt().max(1e-9);
            let freq = rng.gen_range(2.0..5.0);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            *comp = ([dir[0] / norm * freq, dir[1] / norm * freq, dir[2] / norm * freq], phase, 1.0);
        }
    }
    let deform = |axis: usize, p: &[f64; 3]| -> f64 {
        let mut v = 0.0;
        for (w, phase, _) in &field[axis] {
            v += (w[0] * p[0] + w[1] * p[1] + w[2] * p[2] + phase).sin();
        }
        config.deformation * v / 2.0
    };
    let landmarks: Vec<[f64; 2]> = rigid
        .points()
        .iter()
        .zip(model.points())
        .map(|(p2, p3)| [p2[0] + deform(0, p3), p2[1] + deform(1, p3)])
        .collect();

    let self_visible = pose_to_visibility(&pose, model);
    let synth_occluded: Vec<bool> = (0..model.len()).map(|_| rng.gen_bool(config.occlusion_rate)).collect();
    let visibility: Vec<[f64; 2]> = (0..model.len())
        .map(|l| {
            if !self_visible[l] || synth_occluded[l] {
                [0.0, 1.0]
            } else {
                [1.0, 0.0]
            }
        })
        .collect();
    let mask: Vec<bool> = landmarks
        .iter()
        .map(|p| p[0] >= -0.5 && p[0] <= s - 0.5 && p[1] >= -0.5 && p[1] <= s - 0.5)
        .collect();

    let mut image = render_background(config.image_size, &mut rng);
    render_head(&mut image, &pose, model);
    render_edges(&mut image, &landmarks, &self_visible, &synth_occluded, pose.scale);
    for l in 0..model.len() {
        if self_visible[l] && !synth_occluded[l] && mask[l] {
            render_blob(&mut image, landmarks[l], landmark_color(l), (0.035 * pose.scale).max(1.2));
        }
    }
    for l in 0..model.len() {
        if synth_occluded[l] && mask[l] {
            let side = rng.gen_range(0.10..0.18) * s;
            let color = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            let jx = rng.gen_range(-2.0..2.0);
            let jy = rng.gen_range(-2.0..2.0);
            image.fill_rect(landmarks[l][0] - side / 2.0 + jx, landmarks[l][1] - side / 2.0 + jy, side, side, color);
        }
    }

    Ok(TrainSample {
        image,
        pose: pose.to_array(),
        landmarks,
        visibility,
        mask,
    })
}

fn render_background(size: usize, rng: &mut ChaCha8Rng) -> Image {
    let mut img = Image::new(size, size);
    // Two low-frequency sinusoid products per channel.
    let coef: Vec<[f64; 6]> = (0..3)
        .map(|_| std::array::from_fn(|_| rng.gen_range(-0.12..0.12)))
        .collect();
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let mut rgb = [0.0; 3];
            for c in 0..3 {
                let k = &coef[c];
                rgb[c] = (0.42
                    + k[0] * (k[1] * xf + k[2] * yf).sin()
                    + k[3] * (k[4] * xf + k[5] * yf).sin())
                .clamp(0.0, 1.0);
            }
            img.set(x, y, rgb);
        }
    }
    img
}

/// Soft head disk with a brightness gradient that encodes the yaw/pitch
/// direction, giving the encoder a holistic pose cue independent of the
/// landmark constellation.
fn render_head(img: &mut Image, pose: &PoseParams, model: &MeanFace3D) {
    let radius = 0.62 * pose.scale * model.extent() / 2.0 * 1.25;
    let (cx, cy) = (pose.tx, pose.ty);
    let gx = -(pose.yaw.to_radians().sin()) * 0.28;
    let gy = -(pose.pitch.to_radians().sin()) * 0.28;
    let skin = [0.78, 0.62, 0.5];
    let size = img.width();
    for y in 0..size {
        for x in 0..size {
            let dx = (x as f64 - cx) / radius;
            let dy = (y as f64 - cy) / radius;
            let d2 = dx * dx + dy * dy;
            if d2 < 1.0 {
                let shade = (0.85 + gx * dx + gy * dy).clamp(0.3, 1.2);
                let alpha = (1.0 - d2).min(0.25) / 0.25; // soft rim
                let rgb = [skin[0] * shade, skin[1] * shade, skin[2] * shade];
                img.blend_add(x, y, rgb, alpha.clamp(0.0, 1.0));
            }
        }
    }
}

fn render_blob(img: &mut Image, center: [f64; 2], color: [f64; 3], sigma: f64) {
    let r = (3.0 * sigma).ceil() as isize;
    let (cx, cy) = (center[0], center[1]);
    let size = img.width() as isize;
    for y in ((cy as isize) - r).max(0)..=((cy as isize) + r).min(size - 1) {
        for x in ((cx as isize) - r).max(0)..=((cx as isize) + r).min(size - 1) {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            let a = (-d2 / (2.0 * sigma * sigma)).exp();
            if a > 0.01 {
                img.blend_add(x as usize, y as usize, color, a * 0.95);
            }
        }
    }
}

fn render_edges(img: &mut Image, landmarks: &[[f64; 2]], self_visible: &[bool], occluded: &[bool], scale: f64) {
    let width = (0.012 * scale).max(0.6);
    for chain in EDGE_CHAINS {
        for pair in chain.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if self_visible[a] && self_visible[b] && !occluded[a] && !occluded[b] {
                draw_soft_segment(img, landmarks[a], landmarks[b], [0.08, 0.05, 0.05], width);
            }
        }
    }
}

fn draw_soft_segment(img: &mut Image, a: [f64; 2], b: [f64; 2], color: [f64; 3], width: f64) {
    let size = img.width() as isize;
    let (minx, maxx) = (a[0].min(b[0]) - 2.0 * width, a[0].max(b[0]) + 2.0 * width);
    let (miny, maxy) = (a[1].min(b[1]) - 2.0 * width, a[1].max(b[1]) + 2.0 * width);
    let len2 = (b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2);
    for y in (miny.floor() as isize).max(0)..=(maxy.ceil() as isize).min(size - 1) {
        for x in (minx.floor() as isize).max(0)..=(maxx.ceil() as isize).min(size - 1) {
            let p = [x as f64, y as f64];
            let t = if len2 == 0.0 {
                0.0
            } else {
                (((p[0] - a[0]) * (b[0] - a[0]) + (p[1] - a[1]) * (b[1] - a[1])) / len2).clamp(0.0, 1.0)
            };
            let qx = a[0] + t * (b[0] - a[0]);
            let qy = a[1] + t * (b[1] - a[1]);
            let d2 = (p[0] - qx).powi(2) + (p[1] - qy).powi(2);
            let alpha = (-d2 / (2.0 * width * width)).exp();
            if alpha > 0.05 {
                img.blend_add(x as usize, y as usize, color, alpha * 0.8);
            }
        }
    }
}

/// Write a generated dataset to `dir`: `images/img_NNNNN.ppm`, an
/// `annotations.txt` in the standard format, and a `truth.txt` sidecar with
/// the exact pose labels (6 floats per face).
pub fn write_synth_dataset(dir: &Path, samples: &[TrainSample]) -> Result<()> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images)?;
    let mut annotations = Vec::with_capacity(samples.len());
    let mut truth = String::new();
    for (i, sample) in samples.iter().enumerate() {
        let name = format!("images/img_{i:05}.ppm");
        sample.image.write_ppm(&dir.join(&name))?;
        let s = sample.image.width() as f64;
        // The rendered image is the crop; the box is the centered square
        // whose 30% enlargement spans the full image.
        let side = s / 1.3;
        let origin = (s - side) / 2.0;
        annotations.push(FaceAnnotation {
            image_path: name,
            bbox: [origin, origin, side, side],
            landmarks: sample
                .landmarks
                .iter()
                .zip(&sample.visibility)
                .zip(&sample.mask)
                .map(|((p, vis), &m)| LandmarkAnnotation {
                    x: p[0],
                    y: p[1],
                    vis: if !m {
                        Visibility::Unlabeled
                    } else if vis[1] > 0.5 {
                        Visibility::Occluded
                    } else {
                        Visibility::Visible
                    },
                })
                .collect(),
        });
        let p = sample.pose;
        truth.push_str(&format!("{} {} {} {} {} {}\n", p[0], p[1], p[2], p[3], p[4], p[5]));
    }
    super::save_annotations(&dir.join("annotations.txt"), &annotations)?;
    std::fs::write(dir.join("truth.txt"), truth)?;
    Ok(())
}

/// Parse a pose file: one `yaw pitch roll tx ty s` line per face.
pub fn load_pose_file(path: &Path) -> Result<Vec<[f64; 6]>> {
    let text = std::fs::read_to_string(path)?;
    let mut poses = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(Error::Parse {
                line: lineno + 1,
                message: format!("expected 6 pose values, got {}", fields.len()),
            });
        }
        let mut pose = [0.0; 6];
        for (k, f) in fields.iter().enumerate() {
            pose[k] = f.parse().map_err(|e| Error::Parse {
                line: lineno + 1,
                message: format!("bad pose value `{f}`: {e}"),
            })?;
        }
        poses.push(pose);
    }
    Ok(poses)
}

pub fn save_pose_file(path: &Path, poses: &[[f64; 6]]) -> Result<()> {
    let mut out = String::new();
    for p in poses {
        out.push_str(&format!("{} {} {} {} {} {}\n", p[0], p[1], p[2], p[3], p[4], p[5]));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Load a dataset written by [`write_synth_dataset`]. Poses come from
/// `pose_file` when given (e.g. a pose-label output), otherwise from
/// `truth.txt`.
pub fn load_synth_dataset(dir: &Path, pose_file: Option<&Path>) -> Result<Vec<TrainSample>> {
    let annotations = super::load_annotations(&dir.join("annotations.txt"))?;
    let default_truth = dir.join("truth.txt");
    let poses = load_pose_file(pose_file.unwrap_or(&default_truth))?;
    if poses.len() != annotations.len() {
        return Err(Error::Format(format!(
            "{} pose labels for {} annotated faces",
            poses.len(),
            annotations.len()
        )));
    }
    annotations
        .iter()
        .zip(poses)
        .map(|(face, pose)| {
            let image = Image::read_ppm(&dir.join(&face.image_path))?;
            Ok(TrainSample {
                image,
                pose,
                landmarks: face.landmarks.iter().map(|l| [l.x, l.y]).collect(),
                visibility: face.landmarks.iter().map(|l| l.vis.one_hot()).collect(),
                mask: face.mask(),
            })
        })
        .collect()
}
