//! Rigid pose machinery: Euler angle conventions, the camera projection, an
//! iterative pose-from-correspondences solver, and pose-driven self-occlusion
//! prediction.
//!
//! Conventions, used everywhere in this crate:
//! - model and image axes: x right, y down, z toward the camera;
//! - yaw rotates about the vertical (y) axis, pitch about the lateral (x)
//!   axis, roll about the optical (z) axis;
//! - rotations compose as `R = Rz(roll) * Rx(pitch) * Ry(yaw)`;
//! - angles are degrees in (-180, 180].
//!
//! Pose error metrics are convention-sensitive, so any comparison against
//! numbers produced elsewhere must translate into this convention first.

use crate::error::{Error, Result};

const DEG: f64 = std::f64::consts::PI / 180.0;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Landmark set as L (x, y) image points.
#[derive(Debug, Clone, PartialEq)]
pub struct Shape2D(pub Vec<[f64; 2]>);

impl Shape2D {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.0
    }
}

/// The six rigid pose parameters: three Euler angles in degrees plus the
/// image-plane translation (pixels) and the model-to-pixels scale, which acts
/// as inverse depth under scaled orthography.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseParams {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub tx: f64,
    pub ty: f64,
    pub scale: f64,
}

impl PoseParams {
    /// A validated pose: angles wrapped into (-180, 180], positive scale.
    pub fn new(yaw: f64, pitch: f64, roll: f64, tx: f64, ty: f64, scale: f64) -> Result<Self> {
        for (name, v) in [("yaw", yaw), ("pitch", pitch), ("roll", roll), ("tx", tx), ("ty", ty), ("scale", scale)] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("pose {name}")));
            }
        }
        if scale <= 0.0 {
            return Err(Error::InvalidConfig(format!("pose scale must be positive, got {scale}")));
        }
        Ok(PoseParams {
            yaw: wrap_angle(yaw),
            pitch: wrap_angle(pitch),
            roll: wrap_angle(roll),
            tx,
            ty,
            scale,
        })
    }

    /// Unchecked pose, for raw network outputs that may not yet satisfy the
    /// pose invariants.
    pub fn from_raw(v: [f64; 6]) -> Self {
        PoseParams {
            yaw: v[0],
            pitch: v[1],
            roll: v[2],
            tx: v[3],
            ty: v[4],
            scale: v[5],
        }
    }

    pub fn to_array(self) -> [f64; 6] {
        [self.yaw, self.pitch, self.roll, self.tx, self.ty, self.scale]
    }

    pub fn rotation(&self) -> Mat3 {
        euler_to_rotation(self.yaw, self.pitch, self.roll)
    }
}

/// Wrap an angle in degrees into (-180, 180].
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(360.0);
    if r > 180.0 {
        r - 360.0
    } else {
        r
    }
}

/// Smallest angular distance between two angles in degrees, in [0, 180].
pub fn angle_error(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    r
}

pub fn mat_apply(m: &Mat3, v: &Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm3(v: &Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn normalize3(v: &Vec3) -> Vec3 {
    let n = norm3(v);
    [v[0] / n, v[1] / n, v[2] / n]
}

fn rot_y(deg: f64) -> Mat3 {
    let (s, c) = (deg * DEG).sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_x(deg: f64) -> Mat3 {
    let (s, c) = (deg * DEG).sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_z(deg: f64) -> Mat3 {
    let (s, c) = (deg * DEG).sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Rotation matrix for the crate's Euler convention,
/// `Rz(roll) * Rx(pitch) * Ry(yaw)`.
pub fn euler_to_rotation(yaw: f64, pitch: f64, roll: f64) -> Mat3 {
    mat_mul(&rot_z(roll), &mat_mul(&rot_x(pitch), &rot_y(yaw)))
}

/// Inverse of [`euler_to_rotation`]. Away from gimbal lock (|pitch| = 90)
/// the round trip is exact to ~1e-9 degrees.
pub fn rotation_to_euler(r: &Mat3) -> (f64, f64, f64) {
    let pitch = r[2][1].clamp(-1.0, 1.0).asin();
    let yaw = (-r[2][0]).atan2(r[2][2]);
    let roll = (-r[0][1]).atan2(r[1][1]);
    (yaw / DEG, pitch / DEG, roll / DEG)
}

/// Camera model behind the projection. Scaled orthography is the default;
/// the perspective variant exists for sensitivity experiments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Camera {
    ScaledOrthographic,
    Perspective { focal: f64, cx: f64, cy: f64 },
}

impl Camera {
    pub fn perspective(focal: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(focal > 0.0 && focal.is_finite()) {
            return Err(Error::InvalidConfig(format!("focal length must be positive, got {focal}")));
        }
        Ok(Camera::Perspective { focal, cx, cy })
    }
}

/// Mean 3D face: L model points centered at their centroid, semantic ids,
/// and outward unit surface normals for self-occlusion tests.
#[derive(Debug, Clone)]
pub struct MeanFace3D {
    ids: Vec<String>,
    points: Vec<Vec3>,
    normals: Vec<Vec3>,
}

impl MeanFace3D {
    /// Builds a model, recentering points at their centroid and normalizing
    /// the normals. Requires at least 4 points.
    pub fn new(ids: Vec<String>, points: Vec<Vec3>, normals: Vec<Vec3>) -> Result<Self> {
        if points.len() < 4 {
            return Err(Error::Degenerate(format!("mean face needs at least 4 points, got {}", points.len())));
        }
        if ids.len() != points.len() || normals.len() != points.len() {
            return Err(Error::InvalidConfig("mean face ids/points/normals lengths differ".into()));
        }
        let n = points.len() as f64;
        let mut centroid = [0.0; 3];
        for p in &points {
            for k in 0..3 {
                centroid[k] += p[k] / n;
            }
        }
        let points = points
            .into_iter()
            .map(|p| [p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]])
            .collect();
        let normals = normals.iter().map(normalize3).collect();
        Ok(MeanFace3D { ids, points, normals })
    }

    /// The bundled synthetic 21-landmark face.
    pub fn bundled() -> Self {
        Self::from_text(include_str!("../assets/mean_face_21.txt")).expect("bundled mean face parses")
    }

    /// Parse the text format: one `id x y z nx ny nz` line per landmark,
    /// `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut ids = Vec::new();
        let mut points = Vec::new();
        let mut normals = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 7 {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: format!("expected `id x y z nx ny nz`, got {} fields", fields.len()),
                });
            }
            let mut vals = [0.0; 6];
            for (k, f) in fields[1..].iter().enumerate() {
                vals[k] = f.parse::<f64>().map_err(|e| Error::Parse {
                    line: lineno + 1,
                    message: format!("bad number `{f}`: {e}"),
                })?;
            }
            ids.push(fields[0].to_string());
            points.push([vals[0], vals[1], vals[2]]);
            normals.push([vals[3], vals[4], vals[5]]);
        }
        Self::new(ids, points, normals)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn normals(&self) -> &[Vec3] {
        &self.normals
    }

    /// Largest coordinate span across the three axes, in model units. The
    /// projected face covers roughly `extent * pose.scale` pixels.
    pub fn extent(&self) -> f64 {
        let mut span = 0.0f64;
        for k in 0..3 {
            let lo = self.points.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
            let hi = self.points.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
            span = span.max(hi - lo);
        }
        span
    }

    /// Index map swapping left and right landmarks, derived from the `l`/`r`
    /// tokens in the ids; landmarks without a side map to themselves.
    pub fn mirror_map(&self) -> Vec<usize> {
        let swap_id = |id: &str| -> String {
            id.split('_')
                .map(|tok| match tok {
                    "l" => "r",
                    "r" => "l",
                    other => other,
                })
                .collect::<Vec<_>>()
                .join("_")
        };
        self.ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let swapped = swap_id(id);
                self.ids.iter().position(|other| *other == swapped).unwrap_or(i)
            })
            .collect()
    }
}

/// Project the model through a pose: `x = s * drop_z(R X) + (tx, ty)` under
/// scaled orthography, or a pinhole division in perspective mode.
pub fn project(pose: &PoseParams, model: &MeanFace3D, camera: &Camera) -> Result<Shape2D> {
    let r = pose.rotation();
    let mut out = Vec::with_capacity(model.len());
    match camera {
        Camera::ScaledOrthographic => {
            for p in model.points() {
                let q = mat_apply(&r, p);
                out.push([pose.scale * q[0] + pose.tx, pose.scale * q[1] + pose.ty]);
            }
        }
        Camera::Perspective { focal, cx, cy } => {
            // tz = f / s places the model so that the scaled-orthographic and
            // perspective projections agree at the model origin.
            let tz = focal / pose.scale;
            let t = [pose.tx / pose.scale, pose.ty / pose.scale, tz];
            for p in model.points() {
                let q = mat_apply(&r, p);
                let depth = q[2] + t[2];
                if depth <= 0.0 {
                    return Err(Error::Degenerate(format!("point at or behind the camera plane (depth {depth:.4})")));
                }
                out.push([cx + focal * (q[0] + t[0]) / depth, cy + focal * (q[1] + t[1]) / depth]);
            }
        }
    }
    Ok(Shape2D(out))
}

/// Per-landmark 2x6 Jacobian of the projection with respect to
/// (yaw, pitch, roll, tx, ty, scale). Angle derivatives are per degree.
pub fn project_jacobian(pose: &PoseParams, model: &MeanFace3D, camera: &Camera) -> Result<Vec<[[f64; 6]; 2]>> {
    let ry = rot_y(pose.yaw);
    let rx = rot_x(pose.pitch);
    let rz = rot_z(pose.roll);
    let r = mat_mul(&rz, &mat_mul(&rx, &ry));

    // d/d(deg) of the elementary rotations.
    let dry = {
        let (s, c) = (pose.yaw * DEG).sin_cos();
        [[-s * DEG, 0.0, c * DEG], [0.0, 0.0, 0.0], [-c * DEG, 0.0, -s * DEG]]
    };
    let drx = {
        let (s, c) = (pose.pitch * DEG).sin_cos();
        [[0.0, 0.0, 0.0], [0.0, -s * DEG, -c * DEG], [0.0, c * DEG, -s * DEG]]
    };
    let drz = {
        let (s, c) = (pose.roll * DEG).sin_cos();
        [[-s * DEG, -c * DEG, 0.0], [c * DEG, -s * DEG, 0.0], [0.0, 0.0, 0.0]]
    };
    let dr_dyaw = mat_mul(&rz, &mat_mul(&rx, &dry));
    let dr_dpitch = mat_mul(&rz, &mat_mul(&drx, &ry));
    let dr_droll = mat_mul(&drz, &mat_mul(&rx, &ry));

    let mut jac = Vec::with_capacity(model.len());
    match camera {
        Camera::ScaledOrthographic => {
            for p in model.points() {
                let q = mat_apply(&r, p);
                let dq = [mat_apply(&dr_dyaw, p), mat_apply(&dr_dpitch, p), mat_apply(&dr_droll, p)];
                let mut j = [[0.0; 6]; 2];
                for (k, d) in dq.iter().enumerate() {
                    j[0][k] = pose.scale * d[0];
                    j[1][k] = pose.scale * d[1];
                }
                j[0][3] = 1.0;
                j[1][4] = 1.0;
                j[0][5] = q[0];
                j[1][5] = q[1];
                jac.push(j);
            }
        }
        Camera::Perspective { focal, .. } => {
            let s = pose.scale;
            let tz = focal / s;
            for p in model.points() {
                let q = mat_apply(&r, p);
                let u = q[0] + pose.tx / s;
                let v = q[1] + pose.ty / s;
                let w = q[2] + tz;
                if w <= 0.0 {
                    return Err(Error::Degenerate("point at or behind the camera plane".into()));
                }
                let dq = [mat_apply(&dr_dyaw, p), mat_apply(&dr_dpitch, p), mat_apply(&dr_droll, p)];
                let mut j = [[0.0; 6]; 2];
                // x = f u / w: angles move q; translation moves u or v alone;
                // scale moves both the offsets and the depth.
                for (k, d) in dq.iter().enumerate() {
                    j[0][k] = focal * (d[0] * w - u * d[2]) / (w * w);
                    j[1][k] = focal * (d[1] * w - v * d[2]) / (w * w);
                }
                j[0][3] = focal / (s * w);
                j[1][4] = focal / (s * w);
                let du_ds = -pose.tx / (s * s);
                let dv_ds = -pose.ty / (s * s);
                let dw_ds = -focal / (s * s);
                j[0][5] = focal * (du_ds * w - u * dw_ds) / (w * w);
                j[1][5] = focal * (dv_ds * w - v * dw_ds) / (w * w);
                jac.push(j);
            }
        }
    }
    Ok(jac)
}

/// Landmark visibility from head pose alone: a landmark is visible when its
/// rotated outward normal still faces the camera.
pub fn pose_to_visibility(pose: &PoseParams, model: &MeanFace3D) -> Vec<bool> {
    let r = pose.rotation();
    model
        .normals()
        .iter()
        .map(|n| mat_apply(&r, n)[2] > 0.0)
        .collect()
}

/// Solve a 4x4 linear system by Gaussian elimination with partial pivoting.
/// Near-zero pivots signal rank deficiency (collinear or coplanar points).
fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Result<[f64; 4]> {
    let scale = a
        .iter()
        .flatten()
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
        .max(1e-300);
    for col in 0..4 {
        let pivot_row = (col..4)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[pivot_row][col].abs() < 1e-10 * scale {
            return Err(Error::Degenerate(
                "rank-deficient correspondences (collinear or coplanar landmarks)".into(),
            ));
        }
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        for row in col + 1..4 {
            let f = a[row][col] / a[col][col];
            for k in col..4 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 4];
    for row in (0..4).rev() {
        let mut acc = b[row];
        for k in row + 1..4 {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Ok(x)
}

/// One pose-from-orthography-and-scaling step: least-squares fit of the two
/// scaled rotation rows plus translation to the (possibly depth-corrected)
/// image points.
fn pos_step(points_2d: &[[f64; 2]], model_pts: &[Vec3]) -> Result<PoseParams> {
    // Normal equations for [X | 1] a = u, shared by both image axes.
    let mut ata = [[0.0; 4]; 4];
    let mut atx = [0.0; 4];
    let mut aty = [0.0; 4];
    for (uv, p) in points_2d.iter().zip(model_pts) {
        let row = [p[0], p[1], p[2], 1.0];
        for i in 0..4 {
            for j in 0..4 {
                ata[i][j] += row[i] * row[j];
            }
            atx[i] += row[i] * uv[0];
            aty[i] += row[i] * uv[1];
        }
    }
    let a = solve4(ata, atx)?;
    let b = solve4(ata, aty)?;

    let i_vec = [a[0], a[1], a[2]];
    let j_vec = [b[0], b[1], b[2]];
    let s1 = norm3(&i_vec);
    let s2 = norm3(&j_vec);
    if s1 < 1e-12 || s2 < 1e-12 {
        return Err(Error::Degenerate("vanishing scale in pose fit".into()));
    }
    let scale = 0.5 * (s1 + s2);
    let r1 = normalize3(&i_vec);
    let r2 = normalize3(&j_vec);
    let r3 = normalize3(&cross(&r1, &r2));
    let r2 = cross(&r3, &r1);
    let r = [
        [r1[0], r1[1], r1[2]],
        [r2[0], r2[1], r2[2]],
        [r3[0], r3[1], r3[2]],
    ];
    let (yaw, pitch, roll) = rotation_to_euler(&r);
    PoseParams::new(yaw, pitch, roll, a[3], b[3], scale)
}

/// Recover the rigid pose from 2D-3D landmark correspondences.
///
/// Under the scaled-orthographic camera a single least-squares fit is exact;
/// in perspective mode the fit is iterated with depth corrections until the
/// pose changes by less than 1e-6 (or 100 iterations, reported as an error
/// carrying the last iterate).
///
/// `mask[l] = false` drops landmark `l` from the fit; at least 4 annotated,
/// non-coplanar correspondences are required.
pub fn posit_solve(
    landmarks_2d: &Shape2D,
    mask: &[bool],
    model: &MeanFace3D,
    camera: &Camera,
) -> Result<PoseParams> {
    if landmarks_2d.len() != model.len() || mask.len() != model.len() {
        return Err(Error::shape(
            "posit_solve",
            format!("{} landmarks", model.len()),
            format!("{} points, {} mask flags", landmarks_2d.len(), mask.len()),
        ));
    }
    let mut pts2d = Vec::new();
    let mut pts3d = Vec::new();
    for ((p2, p3), &keep) in landmarks_2d.points().iter().zip(model.points()).zip(mask) {
        if keep {
            if !(p2[0].is_finite() && p2[1].is_finite()) {
                return Err(Error::NonFinite("2D landmark".into()));
            }
            pts2d.push(*p2);
            pts3d.push(*p3);
        }
    }
    if pts2d.len() < 4 {
        return Err(Error::Degenerate(format!(
            "need at least 4 annotated correspondences, got {}",
            pts2d.len()
        )));
    }

    match camera {
        Camera::ScaledOrthographic => pos_step(&pts2d, &pts3d),
        Camera::Perspective { focal, cx, cy } => {
            let centered: Vec<[f64; 2]> = pts2d.iter().map(|p| [p[0] - cx, p[1] - cy]).collect();
            let mut corrected = centered.clone();
            let mut pose = pos_step(&corrected, &pts3d)?;
            let mut last_change = f64::INFINITY;
            for _ in 0..100 {
                let r = pose.rotation();
                let tz = focal / pose.scale;
                for (c, (orig, p3)) in corrected.iter_mut().zip(centered.iter().zip(&pts3d)) {
                    let eps = mat_apply(&r, p3)[2] / tz;
                    c[0] = orig[0] * (1.0 + eps);
                    c[1] = orig[1] * (1.0 + eps);
                }
                let next = pos_step(&corrected, &pts3d)?;
                last_change = pose
                    .to_array()
                    .iter()
                    .zip(next.to_array())
                    .map(|(a, b)| if a.is_finite() && b.is_finite() { angle_error(*a, b).min((a - b).abs()) } else { f64::INFINITY })
                    .fold(0.0f64, f64::max);
                pose = next;
                if last_change < 1e-6 {
                    return PoseParams::new(pose.yaw, pose.pitch, pose.roll, pose.tx + cx, pose.ty + cy, pose.scale);
                }
            }
            Err(Error::PositNotConverged {
                iterations: 100,
                last_change,
                yaw: pose.yaw,
                pitch: pose.pitch,
                roll: pose.roll,
                tx: pose.tx + cx,
                ty: pose.ty + cy,
                scale: pose.scale,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> PoseParams {
        PoseParams::new(
            rng.gen_range(-60.0..60.0),
            rng.gen_range(-60.0..60.0),
            rng.gen_range(-60.0..60.0),
            rng.gen_range(-20.0..20.0),
            rng.gen_range(-20.0..20.0),
            rng.gen_range(20.0..60.0),
        )
        .unwrap()
    }

    #[test]
    fn euler_identity() {
        let r = euler_to_rotation(0.0, 0.0, 0.0);
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((r[i][j] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn opposite_yaws_compose_to_identity() {
        let r = mat_mul(&euler_to_rotation(90.0, 0.0, 0.0), &euler_to_rotation(-90.0, 0.0, 0.0));
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((r[i][j] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rotation_is_orthonormal_with_unit_determinant() {
        for seed in 0..20 {
            let mut r = rng(seed);
            let m = euler_to_rotation(
                r.gen_range(-180.0..180.0),
                r.gen_range(-89.0..89.0),
                r.gen_range(-180.0..180.0),
            );
            // R R^T = I
            for i in 0..3 {
                for j in 0..3 {
                    let dot = (0..3).map(|k| m[i][k] * m[j][k]).sum::<f64>();
                    let expected = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - expected).abs() < 1e-12);
                }
            }
            let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
            assert!((det - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn euler_round_trip_away_from_gimbal_lock() {
        for seed in 0..50 {
            let mut r = rng(seed);
            let (yaw, pitch, roll) = (
                r.gen_range(-179.0..179.0),
                r.gen_range(-85.0..85.0),
                r.gen_range(-179.0..179.0),
            );
            let m = euler_to_rotation(yaw, pitch, roll);
            let (y2, p2, r2) = rotation_to_euler(&m);
            assert!(angle_error(yaw, y2) < 1e-9, "yaw {yaw} -> {y2}");
            assert!(angle_error(pitch, p2) < 1e-9, "pitch {pitch} -> {p2}");
            assert!(angle_error(roll, r2) < 1e-9, "roll {roll} -> {r2}");
        }
    }

    #[test]
    fn identity_projection_returns_model_xy() {
        let model = MeanFace3D::bundled();
        let pose = PoseParams::new(0.0, 0.0, 0.0, 0.0, 0.0, 1.0).unwrap();
        let proj = project(&pose, &model, &Camera::ScaledOrthographic).unwrap();
        for (p2, p3) in proj.points().iter().zip(model.points()) {
            assert!((p2[0] - p3[0]).abs() < 1e-15);
            assert!((p2[1] - p3[1]).abs() < 1e-15);
        }
    }

    #[test]
    fn mirrored_yaw_mirrors_the_projection() {
        let model = MeanFace3D::bundled();
        let swap = model.mirror_map();
        for &yaw in &[15.0, 40.0, 72.0] {
            let plus = project(
                &PoseParams::new(yaw, 0.0, 0.0, 0.0, 0.0, 30.0).unwrap(),
                &model,
                &Camera::ScaledOrthographic,
            )
            .unwrap();
            let minus = project(
                &PoseParams::new(-yaw, 0.0, 0.0, 0.0, 0.0, 30.0).unwrap(),
                &model,
                &Camera::ScaledOrthographic,
            )
            .unwrap();
            for (l, &m) in swap.iter().enumerate() {
                // landmark l at +yaw is the x-mirror of its partner at -yaw
                assert!((plus.points()[l][0] + minus.points()[m][0]).abs() < 1e-9);
                assert!((plus.points()[l][1] - minus.points()[m][1]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn projection_matches_direct_arithmetic_oracle() {
        // Oracle: the closed-form combined rotation matrix, written out
        // entry by entry, applied with explicit scalar arithmetic.
        let model = MeanFace3D::bundled();
        for seed in 0..10 {
            let mut r = rng(seed + 100);
            let pose = random_pose(&mut r);
            let (sa, ca) = (pose.yaw * DEG).sin_cos();
            let (sb, cb) = (pose.pitch * DEG).sin_cos();
            let (sg, cg) = (pose.roll * DEG).sin_cos();
            let m = [
                [cg * ca - sg * sb * sa, -sg * cb, cg * sa + sg * sb * ca],
                [sg * ca + cg * sb * sa, cg * cb, sg * sa - cg * sb * ca],
                [-cb * sa, sb, cb * ca],
            ];
            let proj = project(&pose, &model, &Camera::ScaledOrthographic).unwrap();
            for (p2, p3) in proj.points().iter().zip(model.points()) {
                let qx = m[0][0] * p3[0] + m[0][1] * p3[1] + m[0][2] * p3[2];
                let qy = m[1][0] * p3[0] + m[1][1] * p3[1] + m[1][2] * p3[2];
                let ex = pose.scale * qx + pose.tx;
                let ey = pose.scale * qy + pose.ty;
                assert!((p2[0] - ex).abs() < 1e-10);
                assert!((p2[1] - ey).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn projection_jacobian_matches_finite_differences() {
        let model = MeanFace3D::bundled();
        for camera in [
            Camera::ScaledOrthographic,
            Camera::perspective(500.0, 32.0, 32.0).unwrap(),
        ] {
            let mut r = rng(7);
            for _ in 0..5 {
                let pose = random_pose(&mut r);
                let jac = project_jacobian(&pose, &model, &camera).unwrap();
                let eps = 1e-5;
                for k in 0..6 {
                    let mut lo = pose.to_array();
                    let mut hi = pose.to_array();
                    lo[k] -= eps;
                    hi[k] += eps;
                    let plo = project(&PoseParams::from_raw(lo), &model, &camera).unwrap();
                    let phi = project(&PoseParams::from_raw(hi), &model, &camera).unwrap();
                    for l in 0..model.len() {
                        for axis in 0..2 {
                            let num = (phi.points()[l][axis] - plo.points()[l][axis]) / (2.0 * eps);
                            let ana = jac[l][axis][k];
                            let rel = (num - ana).abs() / ana.abs().max(num.abs()).max(1e-8);
                            assert!(rel < 1e-4, "camera {camera:?} param {k} landmark {l}: {ana} vs {num}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn posit_recovers_synthetic_poses() {
        let model = MeanFace3D::bundled();
        let camera = Camera::ScaledOrthographic;
        let mask = vec![true; model.len()];
        for seed in 0..100 {
            let mut r = rng(seed + 500);
            let pose = PoseParams::new(
                r.gen_range(-60.0..60.0),
                r.gen_range(-60.0..60.0),
                r.gen_range(-90.0..90.0),
                r.gen_range(-30.0..30.0),
                r.gen_range(-30.0..30.0),
                r.gen_range(20.0..60.0),
            )
            .unwrap();
            let proj = project(&pose, &model, &camera).unwrap();
            let got = posit_solve(&proj, &mask, &model, &camera).unwrap();
            assert!(angle_error(got.yaw, pose.yaw) < 0.5);
            assert!(angle_error(got.pitch, pose.pitch) < 0.5);
            assert!(angle_error(got.roll, pose.roll) < 0.5);
            assert!((got.scale - pose.scale).abs() / pose.scale < 0.01);
        }
    }

    #[test]
    fn posit_frontal_symmetric_face_gives_zero_angles() {
        let model = MeanFace3D::bundled();
        let pose = PoseParams::new(0.0, 0.0, 0.0, 32.0, 32.0, 28.0).unwrap();
        let proj = project(&pose, &model, &Camera::ScaledOrthographic).unwrap();
        let got = posit_solve(&proj, &vec![true; model.len()], &model, &Camera::ScaledOrthographic).unwrap();
        assert!(got.yaw.abs() < 1e-6);
        assert!(got.pitch.abs() < 1e-6);
        assert!(got.roll.abs() < 1e-6);
    }

    #[test]
    fn posit_rejects_degenerate_correspondences() {
        let model = MeanFace3D::bundled();
        let camera = Camera::ScaledOrthographic;
        let pose = PoseParams::new(10.0, -5.0, 3.0, 0.0, 0.0, 30.0).unwrap();
        let proj = project(&pose, &model, &camera).unwrap();

        // Only 3 annotated points.
        let mut mask = vec![false; model.len()];
        for m in mask.iter_mut().take(3) {
            *m = true;
        }
        assert!(matches!(
            posit_solve(&proj, &mask, &model, &camera),
            Err(Error::Degenerate(_))
        ));

        // Collinear 3D points (a synthetic degenerate model).
        let line = MeanFace3D::new(
            (0..5).map(|i| format!("p{i}")).collect(),
            (0..5).map(|i| [i as f64, 2.0 * i as f64, 0.5 * i as f64]).collect(),
            vec![[0.0, 0.0, 1.0]; 5],
        )
        .unwrap();
        let pts = Shape2D((0..5).map(|i| [i as f64, i as f64]).collect());
        assert!(matches!(
            posit_solve(&pts, &[true; 5], &line, &camera),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn posit_perspective_recovers_poses_with_depth_correction() {
        let model = MeanFace3D::bundled();
        let camera = Camera::perspective(400.0, 128.0, 128.0).unwrap();
        let mask = vec![true; model.len()];
        for seed in 0..20 {
            let mut r = rng(seed + 900);
            let pose = PoseParams::new(
                r.gen_range(-45.0..45.0),
                r.gen_range(-45.0..45.0),
                r.gen_range(-45.0..45.0),
                r.gen_range(-20.0..20.0),
                r.gen_range(-20.0..20.0),
                r.gen_range(25.0..50.0),
            )
            .unwrap();
            let proj = project(&pose, &model, &camera).unwrap();
            let got = posit_solve(&proj, &mask, &model, &camera).unwrap();
            assert!(angle_error(got.yaw, pose.yaw) < 0.5, "seed {seed}");
            assert!(angle_error(got.pitch, pose.pitch) < 0.5);
            assert!(angle_error(got.roll, pose.roll) < 0.5);
            assert!((got.scale - pose.scale).abs() / pose.scale < 0.01);
        }
    }

    #[test]
    fn reprojection_of_recovered_pose_is_a_retraction() {
        let model = MeanFace3D::bundled();
        let camera = Camera::ScaledOrthographic;
        let mask = vec![true; model.len()];
        for seed in 0..30 {
            let mut r = rng(seed + 1300);
            let pose = random_pose(&mut r);
            let proj = project(&pose, &model, &camera).unwrap();
            let got = posit_solve(&proj, &mask, &model, &camera).unwrap();
            let reproj = project(&got, &model, &camera).unwrap();
            for (a, b) in reproj.points().iter().zip(proj.points()) {
                let err = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                assert!(err <= 1e-3, "reprojection error {err}");
            }
        }
    }

    #[test]
    fn posit_is_equivariant_to_in_plane_rotation() {
        let model = MeanFace3D::bundled();
        let camera = Camera::ScaledOrthographic;
        let mask = vec![true; model.len()];
        let mut r = rng(1700);
        for _ in 0..10 {
            let pose = PoseParams::new(
                r.gen_range(-40.0..40.0),
                r.gen_range(-40.0..40.0),
                r.gen_range(-40.0..40.0),
                0.0,
                0.0,
                30.0,
            )
            .unwrap();
            let phi: f64 = r.gen_range(-90.0..90.0);
            let proj = project(&pose, &model, &camera).unwrap();
            let (s, c) = (phi * DEG).sin_cos();
            let rotated = Shape2D(
                proj.points()
                    .iter()
                    .map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]])
                    .collect(),
            );
            let got = posit_solve(&rotated, &mask, &model, &camera).unwrap();
            assert!(
                angle_error(got.roll, pose.roll + phi) < 0.5,
                "roll {} + {phi} -> {}",
                pose.roll,
                got.roll
            );
        }
    }

    #[test]
    fn frontal_pose_sees_all_landmarks() {
        let model = MeanFace3D::bundled();
        let pose = PoseParams::new(0.0, 0.0, 0.0, 0.0, 0.0, 1.0).unwrap();
        let vis = pose_to_visibility(&pose, &model);
        assert_eq!(vis.len(), 21);
        assert!(vis.iter().all(|&v| v));
    }

    #[test]
    fn extreme_yaw_occludes_far_side() {
        let model = MeanFace3D::bundled();
        let pose = PoseParams::new(90.0, 0.0, 0.0, 0.0, 0.0, 1.0).unwrap();
        let vis = pose_to_visibility(&pose, &model);
        // Oracle: rotate each normal explicitly and test its z sign.
        let r = euler_to_rotation(90.0, 0.0, 0.0);
        for (l, n) in model.normals().iter().enumerate() {
            let expected = mat_apply(&r, n)[2] > 0.0;
            assert_eq!(vis[l], expected, "landmark {}", model.ids()[l]);
        }
        // At yaw +90 the whole +x side of the face turns away.
        let ear_r = model.ids().iter().position(|s| s == "ear_r").unwrap();
        let eye_r_out = model.ids().iter().position(|s| s == "eye_r_out").unwrap();
        assert!(!vis[ear_r]);
        assert!(!vis[eye_r_out]);
        let ear_l = model.ids().iter().position(|s| s == "ear_l").unwrap();
        assert!(vis[ear_l]);
    }

    #[test]
    fn visibility_mirror_symmetry_in_yaw() {
        let model = MeanFace3D::bundled();
        let swap = model.mirror_map();
        for &yaw in &[10.0, 35.0, 60.0, 85.0] {
            let plus = pose_to_visibility(&PoseParams::new(yaw, 0.0, 0.0, 0.0, 0.0, 1.0).unwrap(), &model);
            let minus = pose_to_visibility(&PoseParams::new(-yaw, 0.0, 0.0, 0.0, 0.0, 1.0).unwrap(), &model);
            for (l, &m) in swap.iter().enumerate() {
                assert_eq!(plus[l], minus[m], "yaw {yaw}, landmark {}", model.ids()[l]);
            }
        }
    }

    #[test]
    fn visibility_is_monotone_in_yaw() {
        let model = MeanFace3D::bundled();
        let mut previous: Option<Vec<bool>> = None;
        for step in 0..=18 {
            let yaw = step as f64 * 5.0;
            let vis = pose_to_visibility(&PoseParams::new(yaw, 0.0, 0.0, 0.0, 0.0, 1.0).unwrap(), &model);
            if let Some(prev) = &previous {
                for l in 0..model.len() {
                    assert!(
                        !vis[l] || prev[l],
                        "landmark {} visible at yaw {yaw} but not at {}",
                        model.ids()[l],
                        yaw - 5.0
                    );
                }
            }
            previous = Some(vis);
        }
    }

    #[test]
    fn angle_error_cases() {
        assert_eq!(angle_error(10.0, 7.0), 3.0);
        // Oracle: |179 - (-179)| mod 360 = 358, min(358, 2) = 2.
        assert!((angle_error(179.0, -179.0) - 2.0).abs() < 1e-12);
        for theta in [-540.0, -180.0, 0.0, 33.3, 180.0, 719.0] {
            assert_eq!(angle_error(theta, theta), 0.0);
        }
    }

    #[test]
    fn wrap_angle_lands_in_half_open_interval() {
        for a in [-900.0, -180.0, -179.9, 0.0, 179.9, 180.0, 180.1, 900.0] {
            let w = wrap_angle(a);
            assert!(w > -180.0 && w <= 180.0, "{a} -> {w}");
            assert!(angle_error(a, w) < 1e-9);
        }
    }

    #[test]
    fn mean_face_asset_is_symmetric_and_centered() {
        let model = MeanFace3D::bundled();
        assert_eq!(model.len(), 21);
        let mut centroid = [0.0; 3];
        for p in model.points() {
            for k in 0..3 {
                centroid[k] += p[k];
            }
        }
        for c in centroid {
            assert!(c.abs() < 1e-12);
        }
        let swap = model.mirror_map();
        for (l, &m) in swap.iter().enumerate() {
            let (a, b) = (model.points()[l], model.points()[m]);
            assert!((a[0] + b[0]).abs() < 1e-12);
            assert!((a[1] - b[1]).abs() < 1e-12);
            assert!((a[2] - b[2]).abs() < 1e-12);
        }
        for n in model.normals() {
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            assert!((len - 1.0).abs() < 1e-12);
            assert!(n[2] > 0.0, "frontal visibility requires outward normals with positive z");
        }
    }

    #[test]
    fn mean_face_parser_reports_bad_lines() {
        let text = "# header\nok 0 0 0 0 0 1\nbad 1 2 3\n";
        match MeanFace3D::from_text(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
