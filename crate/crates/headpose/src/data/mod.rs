//! Annotation ingestion, face cropping, augmentation, pose labeling, and the
//! synthetic dataset generator.
//!
//! Annotation file format (text): a header line `MTPOSE <L>`, then per face
//! one line `image_path x y w h` followed by L lines `lx ly vis` with
//! vis 1 = visible, 0 = occluded, -1 = unlabeled. Unlabeled landmarks get
//! mask 0 everywhere downstream.

mod image;
pub mod synth;

pub use image::{hsv_to_rgb, rgb_to_hsv, Image};
pub use synth::{generate_synthetic_dataset, SynthConfig};

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{posit_solve, Camera, MeanFace3D, PoseParams, Shape2D};

/// Per-landmark annotation state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Visibility {
    Visible,
    Occluded,
    Unlabeled,
}

impl Visibility {
    pub fn flag(self) -> i32 {
        match self {
            Visibility::Visible => 1,
            Visibility::Occluded => 0,
            Visibility::Unlabeled => -1,
        }
    }

    pub fn from_flag(flag: i32) -> Option<Self> {
        match flag {
            1 => Some(Visibility::Visible),
            0 => Some(Visibility::Occluded),
            -1 => Some(Visibility::Unlabeled),
            _ => None,
        }
    }

    /// One-hot (visible, occluded) target; unlabeled landmarks default to
    /// visible but are masked out of every loss.
    pub fn one_hot(self) -> [f64; 2] {
        match self {
            Visibility::Occluded => [0.0, 1.0],
            _ => [1.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandmarkAnnotation {
    pub x: f64,
    pub y: f64,
    pub vis: Visibility,
}

/// One annotated face: source image, bounding box, landmark records.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceAnnotation {
    pub image_path: String,
    /// (x, y, w, h) in source image pixels.
    pub bbox: [f64; 4],
    pub landmarks: Vec<LandmarkAnnotation>,
}

impl FaceAnnotation {
    pub fn mask(&self) -> Vec<bool> {
        self.landmarks.iter().map(|l| l.vis != Visibility::Unlabeled).collect()
    }

    pub fn shape(&self) -> Shape2D {
        Shape2D(self.landmarks.iter().map(|l| [l.x, l.y]).collect())
    }
}

/// Parse an annotation file. Malformed lines are reported with their line
/// number; the landmark count must match the header.
pub fn load_annotations(path: &Path) -> Result<Vec<FaceAnnotation>> {
    parse_annotations(&std::fs::read_to_string(path)?)
}

pub fn parse_annotations(text: &str) -> Result<Vec<FaceAnnotation>> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (header_line, header) = lines.next().ok_or_else(|| Error::Format("empty annotation file".into()))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("MTPOSE") {
        return Err(Error::Parse {
            line: header_line,
            message: "expected header `MTPOSE <L>`".into(),
        });
    }
    let num_landmarks: usize = parts
        .next()
        .ok_or_else(|| Error::Parse {
            line: header_line,
            message: "header missing landmark count".into(),
        })?
        .parse()
        .map_err(|e| Error::Parse {
            line: header_line,
            message: format!("bad landmark count: {e}"),
        })?;

    let mut faces = Vec::new();
    while let Some((lineno, line)) = lines.next() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected `image_path x y w h`, got {} fields", fields.len()),
            });
        }
        let mut nums = [0.0; 4];
        for (k, f) in fields[1..].iter().enumerate() {
            nums[k] = f.parse().map_err(|e| Error::Parse {
                line: lineno,
                message: format!("bad box value `{f}`: {e}"),
            })?;
        }
        if nums[2] <= 0.0 || nums[3] <= 0.0 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("bounding box must have positive extent, got {}x{}", nums[2], nums[3]),
            });
        }
        let mut landmarks = Vec::with_capacity(num_landmarks);
        for _ in 0..num_landmarks {
            let (lm_line, lm) = lines.next().ok_or_else(|| {
                Error::Format(format!(
                    "face starting at line {lineno} truncated: {} of {num_landmarks} landmarks",
                    landmarks.len()
                ))
            })?;
            let lm_fields: Vec<&str> = lm.split_whitespace().collect();
            if lm_fields.len() != 3 {
                return Err(Error::Parse {
                    line: lm_line,
                    message: format!("expected `lx ly vis`, got {} fields", lm_fields.len()),
                });
            }
            let x: f64 = lm_fields[0].parse().map_err(|e| Error::Parse {
                line: lm_line,
                message: format!("bad landmark x: {e}"),
            })?;
            let y: f64 = lm_fields[1].parse().map_err(|e| Error::Parse {
                line: lm_line,
                message: format!("bad landmark y: {e}"),
            })?;
            let flag: i32 = lm_fields[2].parse().map_err(|e| Error::Parse {
                line: lm_line,
                message: format!("bad visibility flag: {e}"),
            })?;
            let vis = Visibility::from_flag(flag).ok_or_else(|| Error::Parse {
                line: lm_line,
                message: format!("visibility flag must be 1, 0 or -1, got {flag}"),
            })?;
            landmarks.push(LandmarkAnnotation { x, y, vis });
        }
        faces.push(FaceAnnotation {
            image_path: fields[0].to_string(),
            bbox: nums,
            landmarks,
        });
    }
    Ok(faces)
}

pub fn save_annotations(path: &Path, faces: &[FaceAnnotation]) -> Result<()> {
    let num_landmarks = faces.first().map_or(0, |f| f.landmarks.len());
    let mut out = String::new();
    writeln!(out, "MTPOSE {num_landmarks}").unwrap();
    for f in faces {
        writeln!(out, "{} {} {} {} {}", f.image_path, f.bbox[0], f.bbox[1], f.bbox[2], f.bbox[3]).unwrap();
        for lm in &f.landmarks {
            writeln!(out, "{} {} {}", lm.x, lm.y, lm.vis.flag()).unwrap();
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Similarity map from source image coordinates to crop coordinates,
/// recorded so predictions can be mapped back.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropTransform {
    /// Source-space center of the crop.
    pub center: [f64; 2],
    /// Crop pixels per source pixel along each axis.
    pub scale: [f64; 2],
    /// Output crop side.
    pub size: usize,
}

impl CropTransform {
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let half = (self.size as f64 - 1.0) / 2.0;
        [
            (p[0] - self.center[0]) * self.scale[0] + half,
            (p[1] - self.center[1]) * self.scale[1] + half,
        ]
    }

    pub fn invert(&self, p: [f64; 2]) -> [f64; 2] {
        let half = (self.size as f64 - 1.0) / 2.0;
        [
            (p[0] - half) / self.scale[0] + self.center[0],
            (p[1] - half) / self.scale[1] + self.center[1],
        ]
    }
}

/// Crop a face: the annotation box is enlarged by 30% about its center,
/// cut out with zero padding, and resized to `size`x`size`. Landmarks map
/// through the same transform.
pub fn crop_face(
    image: &Image,
    annotation: &FaceAnnotation,
    size: usize,
) -> Result<(Image, Vec<[f64; 2]>, CropTransform)> {
    let [bx, by, bw, bh] = annotation.bbox;
    if bw <= 0.0 || bh <= 0.0 {
        return Err(Error::Degenerate(format!("bounding box {bw}x{bh}")));
    }
    let transform = CropTransform {
        center: [bx + bw / 2.0, by + bh / 2.0],
        scale: [size as f64 / (1.3 * bw), size as f64 / (1.3 * bh)],
        size,
    };
    let mut crop = Image::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let src = transform.invert([x as f64, y as f64]);
            crop.set(x, y, image.sample_bilinear(src[0], src[1]));
        }
    }
    let landmarks = annotation
        .landmarks
        .iter()
        .map(|l| transform.apply([l.x, l.y]))
        .collect();
    Ok((crop, landmarks, transform))
}

/// One rectangle drawn over the crop to simulate an occluder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Occluder {
    /// (x, y, w, h) in crop pixels.
    pub rect: [f64; 4],
    pub color: [f64; 3],
}

impl Occluder {
    pub fn covers(&self, p: [f64; 2]) -> bool {
        p[0] >= self.rect[0]
            && p[0] <= self.rect[0] + self.rect[2]
            && p[1] >= self.rect[1]
            && p[1] <= self.rect[1] + self.rect[3]
    }
}

/// Augmentation parameters; [`AugmentParams::sample`] draws them from the
/// standard ranges, [`AugmentParams::identity`] leaves the sample unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    /// In-plane rotation, degrees.
    pub rotation: f64,
    /// Isotropic scale factor.
    pub scale: f64,
    /// Translation in crop pixels.
    pub translation: [f64; 2],
    pub mirror: bool,
    /// Multipliers for the H, S, V channels.
    pub hsv: [f64; 3],
    pub occluders: Vec<Occluder>,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            rotation: 0.0,
            scale: 1.0,
            translation: [0.0, 0.0],
            mirror: false,
            hsv: [1.0, 1.0, 1.0],
            occluders: Vec::new(),
        }
    }

    /// Random draw: rotation +-45 degrees, scale +-15%, translation +-5% of
    /// the crop per axis, mirroring, HSV multipliers in [0.5, 1.5], and 1-3
    /// occluder rectangles of 10-30% of the crop side each.
    pub fn sample<R: Rng>(rng: &mut R, crop_size: usize) -> Self {
        let s = crop_size as f64;
        let n_occ = rng.gen_range(1..=3);
        let occluders = (0..n_occ)
            .map(|_| {
                let w = rng.gen_range(0.10..0.30) * s;
                let h = rng.gen_range(0.10..0.30) * s;
                Occluder {
                    rect: [rng.gen_range(0.0..(s - w)), rng.gen_range(0.0..(s - h)), w, h],
                    color: [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)],
                }
            })
            .collect();
        AugmentParams {
            rotation: rng.gen_range(-45.0..45.0),
            scale: rng.gen_range(0.85..1.15),
            translation: [rng.gen_range(-0.05..0.05) * s, rng.gen_range(-0.05..0.05) * s],
            mirror: rng.gen_bool(0.5),
            hsv: std::array::from_fn(|_| rng.gen_range(0.5..1.5)),
            occluders,
        }
    }
}

/// One training sample after cropping and augmentation.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image: Image,
    /// Ground-truth pose label (yaw, pitch, roll, tx, ty, scale) in crop
    /// coordinates.
    pub pose: [f64; 6],
    pub landmarks: Vec<[f64; 2]>,
    /// One-hot (visible, occluded) targets.
    pub visibility: Vec<[f64; 2]>,
    /// Annotation mask: false excludes the landmark from losses and metrics.
    pub mask: Vec<bool>,
}

/// Apply geometric and photometric augmentation to a cropped sample.
///
/// The identical affine map transforms the image sampling grid and the
/// landmark coordinates. Landmarks pushed outside the crop get mask 0 (never
/// the other way around); occluder rectangles flip covered landmarks'
/// ground-truth visibility to occluded while keeping them annotated.
/// Mirroring remaps landmark order through `mirror_map`.
pub fn augment(
    image: &Image,
    landmarks: &[[f64; 2]],
    mask: &[bool],
    visibility: &[[f64; 2]],
    params: &AugmentParams,
    mirror_map: &[usize],
) -> (Image, Vec<[f64; 2]>, Vec<bool>, Vec<[f64; 2]>) {
    let size = image.width();
    let half = (size as f64 - 1.0) / 2.0;
    let (sin, cos) = (params.rotation * std::f64::consts::PI / 180.0).sin_cos();
    let msign = if params.mirror { -1.0 } else { 1.0 };
    // p' = R * diag(scale) * mirror * (p - c) + c + t
    let fwd = |p: [f64; 2]| -> [f64; 2] {
        let x = (p[0] - half) * params.scale * msign;
        let y = (p[1] - half) * params.scale;
        [
            cos * x - sin * y + half + params.translation[0],
            sin * x + cos * y + half + params.translation[1],
        ]
    };
    let inv = |p: [f64; 2]| -> [f64; 2] {
        let x = p[0] - half - params.translation[0];
        let y = p[1] - half - params.translation[1];
        let rx = (cos * x + sin * y) / params.scale * msign;
        let ry = (-sin * x + cos * y) / params.scale;
        [rx + half, ry + half]
    };

    let mut out = Image::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let src = inv([x as f64, y as f64]);
            let mut rgb = image.sample_bilinear(src[0], src[1]);
            if params.hsv != [1.0, 1.0, 1.0] {
                let hsv = rgb_to_hsv(rgb);
                rgb = hsv_to_rgb([
                    (hsv[0] * params.hsv[0]).rem_euclid(360.0),
                    (hsv[1] * params.hsv[1]).clamp(0.0, 1.0),
                    (hsv[2] * params.hsv[2]).clamp(0.0, 1.0),
                ]);
            }
            out.set(x, y, rgb);
        }
    }
    for occ in &params.occluders {
        out.fill_rect(occ.rect[0], occ.rect[1], occ.rect[2], occ.rect[3], occ.color);
    }

    let count = landmarks.len();
    let mut new_landmarks = vec![[0.0; 2]; count];
    let mut new_mask = vec![false; count];
    let mut new_vis = vec![[1.0, 0.0]; count];
    for l in 0..count {
        // Mirrored samples pull their data from the swapped landmark.
        let src = if params.mirror { mirror_map[l] } else { l };
        let p = fwd(landmarks[src]);
        new_landmarks[l] = p;
        new_vis[l] = visibility[src];
        let inside = p[0] >= -0.5 && p[0] <= size as f64 - 0.5 && p[1] >= -0.5 && p[1] <= size as f64 - 0.5;
        new_mask[l] = mask[src] && inside;
        if params.occluders.iter().any(|o| o.covers(p)) {
            new_vis[l] = [0.0, 1.0];
        }
    }
    (out, new_landmarks, new_mask, new_vis)
}

/// How a pose label changes under the geometric part of [`augment`].
///
/// Mirroring a laterally symmetric model negates yaw and roll (landmark
/// order is swapped by the augmentation itself); in-plane rotation adds to
/// roll; scaling multiplies the projection scale; the translation follows
/// the same point map as the landmarks.
pub fn transform_pose_label(pose: [f64; 6], params: &AugmentParams, size: usize) -> [f64; 6] {
    let half = (size as f64 - 1.0) / 2.0;
    let m = if params.mirror { -1.0 } else { 1.0 };
    let (sin, cos) = (params.rotation * std::f64::consts::PI / 180.0).sin_cos();
    let tx = (pose[3] - half) * m * params.scale;
    let ty = (pose[4] - half) * params.scale;
    [
        m * pose[0],
        pose[1],
        m * pose[2] + params.rotation,
        cos * tx - sin * ty + half + params.translation[0],
        sin * tx + cos * ty + half + params.translation[1],
        pose[5] * params.scale,
    ]
}

/// Pose labels from annotated landmark correspondences, one result per face;
/// faces with fewer than 4 annotated landmarks (or degenerate geometry) come
/// back as errors so callers can flag and exclude them.
pub fn compute_pose_labels(
    annotations: &[FaceAnnotation],
    model: &MeanFace3D,
    camera: &Camera,
) -> Vec<Result<PoseParams>> {
    annotations
        .iter()
        .map(|face| {
            if face.landmarks.len() != model.len() {
                return Err(Error::shape(
                    "compute_pose_labels",
                    format!("{} landmarks", model.len()),
                    format!("{}", face.landmarks.len()),
                ));
            }
            posit_solve(&face.shape(), &face.mask(), model, camera)
        })
        .collect()
}

/// Deterministic shuffled split into train and validation parts; disjoint
/// and exhaustive, with floor(n * fraction) training samples.
pub fn split_train_val<T>(samples: Vec<T>, fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if samples.len() < 2 {
        return Err(Error::Degenerate(format!("cannot split {} samples", samples.len())));
    }
    if !(0.0 < fraction && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("split fraction must be in (0, 1), got {fraction}")));
    }
    let n = samples.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indexed: Vec<(usize, T)> = samples.into_iter().enumerate().collect();
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        indexed.swap(i, j);
    }
    let n_train = (((n as f64) * fraction).floor() as usize).clamp(1, n - 1);
    let mut train = Vec::with_capacity(n_train);
    let mut val = Vec::with_capacity(n - n_train);
    for (rank, (_, s)) in indexed.into_iter().enumerate() {
        if rank < n_train {
            train.push(s);
        } else {
            val.push(s);
        }
    }
    Ok((train, val))
}
