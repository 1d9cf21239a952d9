//! Deterministic synthetic scenes and the newline-delimited dataset format.
//!
//! Every scene is a pure function of `(seed, index)`. Randomness comes from
//! ChaCha8 seeded with `seed` and positioned on a per-scene stream, so scenes
//! can be generated in any order or in parallel and still match bit for bit.
//! Stream `3·index` drives the ground truth, `3·index + 1` the observation
//! noise and `3·index + 2` the segmentation-mask corruption.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{project_points, CameraError, CameraIntrinsics};
use crate::kinematics::{
    base_keypoints, base_pose_from_root, holistic_keypoints, JointState, KeypointFrame,
    KeypointSet, KinematicsError, RigidPose, RobotModel,
};
use crate::render::{pose_capsules, rasterize_silhouette, write_pgm, BinaryMask, RenderError};
use crate::rotation::{is_rotation, matrix_to_r6, r6_to_matrix, Rotation6D, RotationError};

pub const SCHEMA_VERSION: u32 = 1;

/// Tolerance of the stored-frame cross-checks, mm (and px for projections).
pub const FRAME_TOLERANCE: f64 = 1e-6;

const PLACEMENT_RETRIES: usize = 200;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("scene {index}: no camera placement satisfied the constraints after {attempts} attempts")]
    Placement { index: u64, attempts: usize },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: frame inconsistency: {detail}")]
    FrameInconsistency { line: usize, detail: String },
    #[error("unsupported schema version {0}")]
    Schema(u32),
    #[error("record does not match robot model: {0}")]
    ModelMismatch(String),
    #[error("negative noise sigma {0}")]
    NegativeSigma(f64),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Rotation(#[from] RotationError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    pub scenes: u64,
    /// Camera distance to the aim point, mm.
    pub distance_mm: [f64; 2],
    /// Camera elevation above the base x-y plane, degrees.
    pub elevation_deg: [f64; 2],
    pub azimuth_deg: [f64; 2],
    /// Uniform jitter of the aim point around the root keypoint, mm.
    pub aim_jitter_mm: f64,
    pub noise_px: f64,
    pub noise_mm: f64,
    /// Probability that a scene is framed with part of the robot outside the image.
    pub truncation_prob: f64,
    /// Fewest in-frame keypoints a truncated scene may keep.
    pub min_inframe: usize,
    /// Per-pixel flip probability applied to the segmentation masks.
    pub mask_corruption: f64,
    pub with_masks: bool,
    /// Smallest allowed keypoint depth, mm.
    pub near_mm: f64,
    pub intrinsics: CameraIntrinsics,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scenes: 100,
            distance_mm: [1800.0, 2800.0],
            elevation_deg: [5.0, 45.0],
            azimuth_deg: [-180.0, 180.0],
            aim_jitter_mm: 50.0,
            noise_px: 0.0,
            noise_mm: 0.0,
            truncation_prob: 0.0,
            min_inframe: 4,
            mask_corruption: 0.0,
            with_masks: false,
            near_mm: 100.0,
            intrinsics: CameraIntrinsics::centered(615.0, 615.0, 640, 480).expect("valid default intrinsics"),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        let range = |name: &str, r: [f64; 2]| -> Result<(), SynthError> {
            if r[0].is_finite() && r[1].is_finite() && r[0] < r[1] {
                Ok(())
            } else {
                Err(SynthError::InvalidConfig(format!("{name} range {:?} is empty or degenerate", r)))
            }
        };
        range("distance_mm", self.distance_mm)?;
        range("elevation_deg", self.elevation_deg)?;
        range("azimuth_deg", self.azimuth_deg)?;
        if self.distance_mm[0] <= 0.0 {
            return bad("distance_mm must be positive".into());
        }
        if self.elevation_deg[0] < -89.0 || self.elevation_deg[1] > 89.0 {
            return bad("elevation_deg must stay within [-89, 89]".into());
        }
        for (name, v) in [("noise_px", self.noise_px), ("noise_mm", self.noise_mm), ("aim_jitter_mm", self.aim_jitter_mm)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        for (name, v) in [("truncation_prob", self.truncation_prob), ("mask_corruption", self.mask_corruption)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if !(self.near_mm > 0.0) {
            return bad("near_mm must be positive".into());
        }
        self.intrinsics.validate()?;
        Ok(())
    }
}

/// One scene: ground truth in every frame plus observations. Angles are
/// degrees, lengths millimeters; the rotation is stored row-major and as 6D.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub schema_version: u32,
    pub scene_id: u64,
    pub robot: String,
    pub seed: u64,
    pub q: Vec<f64>,
    pub rotation: [[f64; 3]; 3],
    pub rotation_6d: [f64; 6],
    pub translation: [f64; 3],
    pub depth: f64,
    pub intrinsics: CameraIntrinsics,
    pub root_index: usize,
    pub keypoints_root_relative: Vec<[f64; 3]>,
    pub keypoints_lifted: Vec<[f64; 3]>,
    pub keypoints_fk: Vec<[f64; 3]>,
    pub keypoints_2d: Vec<[f64; 2]>,
    pub in_frame: Vec<bool>,
    pub inframe_count: usize,
    pub truncated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observed_2d: Option<Vec<[f64; 2]>>,
    /// Noisy root-relative keypoints.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observed_3d: Option<Vec<[f64; 3]>>,
    /// Mask path relative to the dataset file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

fn to_vecs(v: &[[f64; 3]]) -> Vec<Vector3<f64>> {
    v.iter().map(|p| Vector3::from(*p)).collect()
}

fn to_arrays(v: &[Vector3<f64>]) -> Vec<[f64; 3]> {
    v.iter().map(|p| [p.x, p.y, p.z]).collect()
}

impl SceneRecord {
    pub fn joint_state(&self) -> JointState {
        JointState::new(self.q.clone())
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.rotation[r][c])
    }

    pub fn translation_vector(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    pub fn fk_keypoints(&self) -> KeypointSet {
        KeypointSet::new(to_vecs(&self.keypoints_fk), KeypointFrame::FkAbsolute)
    }

    pub fn lifted_keypoints(&self) -> KeypointSet {
        KeypointSet::new(to_vecs(&self.keypoints_lifted), KeypointFrame::LiftedAbsolute)
    }

    pub fn root_relative_keypoints(&self) -> KeypointSet {
        KeypointSet::new(to_vecs(&self.keypoints_root_relative), KeypointFrame::RootRelative)
    }

    /// Observed 2D keypoints, falling back to the exact projections.
    pub fn observations_2d(&self) -> Vec<Vector2<f64>> {
        self.observed_2d
            .as_ref()
            .unwrap_or(&self.keypoints_2d)
            .iter()
            .map(|p| Vector2::from(*p))
            .collect()
    }

    /// Observed root-relative 3D keypoints, falling back to the exact ones.
    pub fn observations_3d(&self) -> KeypointSet {
        let src = self.observed_3d.as_ref().unwrap_or(&self.keypoints_root_relative);
        KeypointSet::new(to_vecs(src), KeypointFrame::RootRelative)
    }

    /// Cross-checks the redundant frames against each other.
    pub fn check_consistency(&self) -> Result<(), String> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(format!("schema version {}", self.schema_version));
        }
        let n = self.keypoints_fk.len();
        for (name, len) in [
            ("keypoints_root_relative", self.keypoints_root_relative.len()),
            ("keypoints_lifted", self.keypoints_lifted.len()),
            ("keypoints_2d", self.keypoints_2d.len()),
            ("in_frame", self.in_frame.len()),
        ] {
            if len != n {
                return Err(format!("{name} has {len} entries, expected {n}"));
            }
        }
        for (name, len) in [
            ("observed_2d", self.observed_2d.as_ref().map(Vec::len)),
            ("observed_3d", self.observed_3d.as_ref().map(Vec::len)),
        ] {
            if let Some(len) = len {
                if len != n {
                    return Err(format!("{name} has {len} entries, expected {n}"));
                }
            }
        }
        if self.root_index >= n {
            return Err(format!("root index {} out of range", self.root_index));
        }
        let r = self.rotation_matrix();
        if !is_rotation(&r, FRAME_TOLERANCE) {
            return Err("rotation matrix is not orthonormal".into());
        }
        let r6 = r6_to_matrix(&Rotation6D::from_array(self.rotation_6d)).map_err(|e| e.to_string())?;
        if (r6 - r).amax() > FRAME_TOLERANCE {
            return Err("6D rotation disagrees with the rotation matrix".into());
        }
        let t = self.translation_vector();
        if t.z != self.depth {
            return Err("depth differs from translation z".into());
        }
        let lift = Vector3::new(0.0, 0.0, self.depth);
        for i in 0..n {
            let rr = Vector3::from(self.keypoints_root_relative[i]);
            let lifted = Vector3::from(self.keypoints_lifted[i]);
            let fk = Vector3::from(self.keypoints_fk[i]);
            if (rr + lift - lifted).amax() > FRAME_TOLERANCE {
                return Err(format!("keypoint {i}: lifted differs from root-relative + depth"));
            }
            if (lifted - fk).amax() > FRAME_TOLERANCE {
                return Err(format!("keypoint {i}: lifted differs from fk"));
            }
        }
        if (Vector3::from(self.keypoints_lifted[self.root_index]) - t).amax() > FRAME_TOLERANCE {
            return Err("translation differs from the lifted root keypoint".into());
        }
        let proj = project_points(&to_vecs(&self.keypoints_fk), &self.intrinsics).map_err(|e| e.to_string())?;
        for (i, p) in proj.iter().enumerate() {
            if (p.uv - Vector2::from(self.keypoints_2d[i])).amax() > FRAME_TOLERANCE {
                return Err(format!("keypoint {i}: 2D point differs from projection"));
            }
            if p.in_frame != self.in_frame[i] {
                return Err(format!("keypoint {i}: in-frame flag differs from recomputation"));
            }
        }
        let count = self.in_frame.iter().filter(|b| **b).count();
        if count != self.inframe_count {
            return Err(format!("inframe_count {} but {count} flags set", self.inframe_count));
        }
        Ok(())
    }
}

/// Checks the stored FK keypoints against the model's kinematics.
pub fn validate_against_model(record: &SceneRecord, model: &RobotModel) -> Result<(), SynthError> {
    if record.robot != model.name() {
        return Err(SynthError::ModelMismatch(format!(
            "scene {} is for robot {:?}, model is {:?}",
            record.scene_id,
            record.robot,
            model.name()
        )));
    }
    if record.q.len() != model.dof() || record.keypoints_fk.len() != model.n_keypoints() {
        return Err(SynthError::ModelMismatch(format!(
            "scene {} has {} joints and {} keypoints, model has {} and {}",
            record.scene_id,
            record.q.len(),
            record.keypoints_fk.len(),
            model.dof(),
            model.n_keypoints()
        )));
    }
    if record.root_index != model.root_keypoint() {
        return Err(SynthError::ModelMismatch(format!(
            "scene {} root keypoint {} differs from model root {}",
            record.scene_id,
            record.root_index,
            model.root_keypoint()
        )));
    }
    let fk = holistic_keypoints(model, &record.joint_state(), &record.rotation_matrix(), &record.translation_vector())?;
    for (i, (a, b)) in fk.points.iter().zip(&record.keypoints_fk).enumerate() {
        if (a - Vector3::from(*b)).amax() > FRAME_TOLERANCE {
            return Err(SynthError::FrameInconsistency {
                line: record.scene_id as usize + 1,
                detail: format!("scene {}: keypoint {i} differs from forward kinematics", record.scene_id),
            });
        }
    }
    Ok(())
}

pub fn scene_rng(seed: u64, index: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_mul(3).wrapping_add(purpose));
    rng
}

/// Camera placement in the robot base frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPlacement {
    /// Base-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// Camera center in the base frame.
    pub center: Vector3<f64>,
}

impl CameraPlacement {
    /// Rotation whose optical axis points from `center` to `target`, with the
    /// image up direction aligned to base +z.
    pub fn look_at(center: Vector3<f64>, target: Vector3<f64>) -> Self {
        let z = (target - center).normalize();
        let x = z.cross(&Vector3::z()).normalize();
        let y = z.cross(&x);
        Self {
            rotation: Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]),
            center,
        }
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * (p - self.center)
    }

    /// Transform from this camera's frame into `other`'s.
    pub fn relative_to(&self, other: &CameraPlacement) -> RigidPose {
        RigidPose::new(
            other.rotation * self.rotation.transpose(),
            other.rotation * (self.center - other.center),
        )
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    rng.gen_range(r[0]..r[1])
}

fn sample_joint_state(model: &RobotModel, rng: &mut ChaCha8Rng) -> JointState {
    JointState::new(
        model
            .state_joints()
            .map(|j| {
                let l = j.effective_limits();
                if l.lower < l.upper {
                    rng.gen_range(l.lower..l.upper)
                } else {
                    l.lower
                }
            })
            .collect(),
    )
}

fn sample_placement(config: &GenConfig, target: Vector3<f64>, rng: &mut ChaCha8Rng) -> CameraPlacement {
    let dist = uniform(rng, config.distance_mm);
    let el = uniform(rng, config.elevation_deg).to_radians();
    let az = uniform(rng, config.azimuth_deg).to_radians();
    let center = target + dist * Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
    CameraPlacement::look_at(center, target)
}

fn jitter(rng: &mut ChaCha8Rng, amount: f64) -> Vector3<f64> {
    if amount > 0.0 {
        Vector3::new(
            rng.gen_range(-amount..amount),
            rng.gen_range(-amount..amount),
            rng.gen_range(-amount..amount),
        )
    } else {
        Vector3::zeros()
    }
}

/// Pans and tilts the camera about its own center.
fn pan_tilt(p: &CameraPlacement, pan_deg: f64, tilt_deg: f64) -> CameraPlacement {
    let pan = crate::rotation::axis_angle(Vector3::y(), pan_deg);
    let tilt = crate::rotation::axis_angle(Vector3::x(), tilt_deg);
    CameraPlacement {
        rotation: tilt * pan * p.rotation,
        center: p.center,
    }
}

struct Framing {
    count: usize,
}

fn framing(points: &[Vector3<f64>], config: &GenConfig) -> Option<Framing> {
    if points.iter().any(|p| p.z < config.near_mm) {
        return None;
    }
    let proj = project_points(points, &config.intrinsics).ok()?;
    let count = proj.iter().filter(|p| p.in_frame).count();
    Some(Framing { count })
}

/// Places a camera so that the framing requirement holds. Truncated scenes
/// pan and tilt away from the robot until some keypoints leave the image.
fn place_camera(
    config: &GenConfig,
    base_points: &[Vector3<f64>],
    root: Vector3<f64>,
    truncated: bool,
    rng: &mut ChaCha8Rng,
) -> Option<CameraPlacement> {
    let n = base_points.len();
    let min_in = config.min_inframe.min(n.saturating_sub(1)).max(1);
    let half_fov = |extent: u32, f: f64| (0.5 * extent as f64 / f).atan().to_degrees();
    let max_pan = half_fov(config.intrinsics.width, config.intrinsics.fx);
    let max_tilt = half_fov(config.intrinsics.height, config.intrinsics.fy);
    for _ in 0..PLACEMENT_RETRIES {
        let target = root + jitter(rng, config.aim_jitter_mm);
        let mut cam = sample_placement(config, target, rng);
        if truncated {
            let pan = rng.gen_range(-max_pan..max_pan);
            let tilt = rng.gen_range(-max_tilt..max_tilt);
            cam = pan_tilt(&cam, pan, tilt);
        }
        let pts: Vec<Vector3<f64>> = base_points.iter().map(|p| cam.to_camera(p)).collect();
        let Some(f) = framing(&pts, config) else { continue };
        let ok = if truncated {
            f.count < n && f.count >= min_in
        } else {
            f.count == n
        };
        if ok {
            return Some(cam);
        }
    }
    None
}

fn build_record(
    model: &RobotModel,
    config: &GenConfig,
    index: u64,
    q: &JointState,
    cam: &CameraPlacement,
    truncated: bool,
) -> Result<SceneRecord, SynthError> {
    let x = base_keypoints(model, q)?;
    let root_index = model.root_keypoint();
    let t = cam.to_camera(&x[root_index]);
    let r = cam.rotation;
    let fk = holistic_keypoints(model, q, &r, &t)?;
    let depth = t.z;
    let lift = Vector3::new(0.0, 0.0, depth);
    let root_relative: Vec<Vector3<f64>> = fk.points.iter().map(|p| p - lift).collect();
    let lifted: Vec<Vector3<f64>> = root_relative.iter().map(|p| p + lift).collect();
    let proj = project_points(&fk.points, &config.intrinsics)?;
    let in_frame: Vec<bool> = proj.iter().map(|p| p.in_frame).collect();
    let keypoints_2d: Vec<[f64; 2]> = proj.iter().map(|p| [p.uv.x, p.uv.y]).collect();
    Ok(SceneRecord {
        schema_version: SCHEMA_VERSION,
        scene_id: index,
        robot: model.name().to_string(),
        seed: config.seed,
        q: q.values().to_vec(),
        rotation: [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]),
        rotation_6d: matrix_to_r6(&r)?.to_array(),
        translation: [t.x, t.y, t.z],
        depth,
        intrinsics: config.intrinsics,
        root_index,
        keypoints_root_relative: to_arrays(&root_relative),
        keypoints_lifted: to_arrays(&lifted),
        keypoints_fk: to_arrays(&fk.points),
        inframe_count: in_frame.iter().filter(|b| **b).count(),
        keypoints_2d: keypoints_2d.clone(),
        in_frame,
        truncated,
        observed_2d: Some(keypoints_2d),
        observed_3d: Some(to_arrays(&root_relative)),
        mask: None,
    })
}

fn sample_pose(
    model: &RobotModel,
    config: &GenConfig,
    index: u64,
    rng: &mut ChaCha8Rng,
    truncated: bool,
) -> Result<(JointState, CameraPlacement), SynthError> {
    for _ in 0..PLACEMENT_RETRIES {
        let q = sample_joint_state(model, rng);
        let x = base_keypoints(model, &q)?;
        if let Some(cam) = place_camera(config, &x, x[model.root_keypoint()], truncated, rng) {
            return Ok((q, cam));
        }
    }
    Err(SynthError::Placement {
        index,
        attempts: PLACEMENT_RETRIES * PLACEMENT_RETRIES,
    })
}

/// Samples scene `index`; fully determined by `(config.seed, index)`.
pub fn sample_scene(model: &RobotModel, config: &GenConfig, index: u64) -> Result<SceneRecord, SynthError> {
    config.validate()?;
    let mut rng = scene_rng(config.seed, index, 0);
    let truncated = config.truncation_prob > 0.0 && rng.gen_bool(config.truncation_prob);
    let (q, cam) = sample_pose(model, config, index, &mut rng, truncated)?;
    let record = build_record(model, config, index, &q, &cam, truncated)?;
    if config.noise_px > 0.0 || config.noise_mm > 0.0 {
        let mut noise = scene_rng(config.seed, index, 1);
        return add_observation_noise(&record, config.noise_px, config.noise_mm, &mut noise);
    }
    Ok(record)
}

/// Adds isotropic Gaussian noise to the observations; ground truth is untouched.
pub fn add_observation_noise<R: Rng>(
    record: &SceneRecord,
    sigma_px: f64,
    sigma_mm: f64,
    rng: &mut R,
) -> Result<SceneRecord, SynthError> {
    for s in [sigma_px, sigma_mm] {
        if !(s >= 0.0) {
            return Err(SynthError::NegativeSigma(s));
        }
    }
    let mut out = record.clone();
    let px = Normal::new(0.0, sigma_px).expect("non-negative sigma");
    let mm = Normal::new(0.0, sigma_mm).expect("non-negative sigma");
    let obs2 = record.observed_2d.clone().unwrap_or_else(|| record.keypoints_2d.clone());
    let obs3 = record
        .observed_3d
        .clone()
        .unwrap_or_else(|| record.keypoints_root_relative.clone());
    out.observed_2d = Some(if sigma_px > 0.0 {
        obs2.iter().map(|p| p.map(|v| v + px.sample(rng))).collect()
    } else {
        obs2
    });
    out.observed_3d = Some(if sigma_mm > 0.0 {
        obs3.iter().map(|p| p.map(|v| v + mm.sample(rng))).collect()
    } else {
        obs3
    });
    Ok(out)
}

/// Segmentation mask for a scene: the rendered silhouette with a fraction of
/// pixels flipped.
pub fn scene_mask(model: &RobotModel, record: &SceneRecord, corruption: f64) -> Result<BinaryMask, SynthError> {
    let q = record.joint_state();
    let pose = base_pose_from_root(model, &q, &record.rotation_matrix(), &record.translation_vector())?;
    let caps = pose_capsules(model, &q, &pose)?;
    let mut mask = rasterize_silhouette(&caps, &record.intrinsics).mask;
    if corruption > 0.0 {
        let mut rng = scene_rng(record.seed, record.scene_id, 2);
        for px in mask.pixels_mut() {
            if rng.gen_bool(corruption) {
                *px = !*px;
            }
        }
    }
    Ok(mask)
}

/// Directory holding a dataset's masks, next to the dataset file.
pub fn mask_dir(dataset: &Path) -> PathBuf {
    let stem = dataset.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    dataset.with_file_name(format!("{stem}_masks"))
}

/// Renders and writes masks for every record, filling in `record.mask`.
pub fn write_masks(
    model: &RobotModel,
    records: &mut [SceneRecord],
    dataset: &Path,
    corruption: f64,
) -> Result<(), SynthError> {
    let dir = mask_dir(dataset);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let dir_name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    for r in records.iter_mut() {
        let mask = scene_mask(model, r, corruption)?;
        let name = format!("{:06}.pgm", r.scene_id);
        let mut buf = Vec::new();
        write_pgm(&mask, &mut buf)?;
        atomic_write(&dir.join(&name), &buf)?;
        r.mask = Some(format!("{dir_name}/{name}"));
    }
    Ok(())
}

/// Writes through a temporary sibling file and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), SynthError> {
    let file_name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Serializes records as one JSON object per line.
pub fn dataset_to_string<T: Serialize>(records: &[T]) -> String {
    let mut s = String::new();
    for r in records {
        s += &serde_json::to_string(r).expect("records serialize");
        s.push('\n');
    }
    s
}

pub fn write_dataset(records: &[SceneRecord], path: &Path) -> Result<(), SynthError> {
    atomic_write(path, dataset_to_string(records).as_bytes())
}

/// Parses newline-delimited records; blank lines are skipped.
pub fn parse_lines<T: for<'de> Deserialize<'de>, R: BufRead>(input: R) -> Result<Vec<(usize, T)>, SynthError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| SynthError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| SynthError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        out.push((line_no, rec));
    }
    Ok(out)
}

pub fn read_dataset_from<R: BufRead>(input: R) -> Result<Vec<SceneRecord>, SynthError> {
    parse_lines::<SceneRecord, _>(input)?
        .into_iter()
        .map(|(line, r)| {
            if r.schema_version != SCHEMA_VERSION {
                return Err(SynthError::Schema(r.schema_version));
            }
            r.check_consistency()
                .map_err(|detail| SynthError::FrameInconsistency { line, detail })?;
            Ok(r)
        })
        .collect()
}

pub fn read_dataset(path: &Path) -> Result<Vec<SceneRecord>, SynthError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    read_dataset_from(BufReader::new(f))
}

/// Two views of the same robot configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoViewScene {
    pub view_a: SceneRecord,
    pub view_b: SceneRecord,
    /// Maps camera-a coordinates to camera-b coordinates.
    pub a_to_b: RigidPose,
}

/// Both views keep every keypoint in frame.
pub fn sample_two_view(model: &RobotModel, config: &GenConfig, index: u64) -> Result<TwoViewScene, SynthError> {
    config.validate()?;
    let mut rng = scene_rng(config.seed, index, 0);
    for _ in 0..PLACEMENT_RETRIES {
        let q = sample_joint_state(model, &mut rng);
        let x = base_keypoints(model, &q)?;
        let root = x[model.root_keypoint()];
        let Some(cam_a) = place_camera(config, &x, root, false, &mut rng) else { continue };
        let Some(cam_b) = place_camera(config, &x, root, false, &mut rng) else { continue };
        let mut view_a = build_record(model, config, index, &q, &cam_a, false)?;
        let mut view_b = build_record(model, config, index, &q, &cam_b, false)?;
        if config.noise_px > 0.0 || config.noise_mm > 0.0 {
            let mut noise = scene_rng(config.seed, index, 1);
            view_a = add_observation_noise(&view_a, config.noise_px, config.noise_mm, &mut noise)?;
            view_b = add_observation_noise(&view_b, config.noise_px, config.noise_mm, &mut noise)?;
        }
        return Ok(TwoViewScene {
            view_a,
            view_b,
            a_to_b: cam_a.relative_to(&cam_b),
        });
    }
    Err(SynthError::Placement {
        index,
        attempts: PLACEMENT_RETRIES,
    })
}
