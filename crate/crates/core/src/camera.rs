//! Pinhole projection, keypoint bounding boxes and the root-depth
//! decomposition.
//!
//! The coarse depth normalizes the robot's real extent by its apparent size,
//! `d_c = sqrt(fx · fy · A_real / A_bbox)`, and a correction factor refines it,
//! `d = λ · d_c`. Root-relative keypoints keep absolute x/y and store z relative
//! to the root depth, so lifting them is a pure z shift: `P'_i = P^r_i + (0, 0, d)`
//! and the camera-to-robot translation is the lifted root keypoint.

use nalgebra::{Matrix2x3, Vector2, Vector3};
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::kinematics::{base_keypoints, JointState, KeypointFrame, KeypointSet, RobotModel};

/// Padding applied around keypoint boxes unless a caller says otherwise.
pub const DEFAULT_BBOX_PADDING: f64 = 20.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("point {index} is behind camera (z = {z})")]
    BehindCamera { index: usize, z: f64 },
    #[error("areas must be positive (A_real = {a_real}, A_bbox = {a_bbox})")]
    NonPositiveArea { a_real: f64, a_bbox: f64 },
    #[error("non-positive depth {0}")]
    NonPositiveDepth(f64),
    #[error("root index {index} out of range for {len} keypoints")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("expected {expected:?} keypoints, got {actual:?}")]
    WrongFrame {
        expected: KeypointFrame,
        actual: KeypointFrame,
    },
    #[error("no in-frame points")]
    NoPointsInFrame,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, CameraError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Principal point at the image center.
    pub fn centered(fx: f64, fy: f64, width: u32, height: u32) -> Result<Self, CameraError> {
        Self::new(fx, fy, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(CameraError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx = {}, fy = {})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(CameraError::InvalidIntrinsics(format!(
                "image size must be positive ({}x{})",
                self.width, self.height
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(CameraError::InvalidIntrinsics("non-finite principal point".into()));
        }
        Ok(())
    }

    pub fn in_frame(&self, uv: &Vector2<f64>) -> bool {
        uv.x >= 0.0 && uv.x < self.width as f64 && uv.y >= 0.0 && uv.y < self.height as f64
    }

    /// Pixel coordinates of a camera-frame point; no depth check.
    pub fn project_point(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// `∂(u, v)/∂(x, y, z)` at `p`.
    pub fn projection_jacobian(&self, p: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / p.z;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * p.x * iz * iz,
            0.0,
            self.fy * iz,
            -self.fy * p.y * iz * iz,
        )
    }

    /// Camera-frame point at depth `z` along the ray through `uv`.
    pub fn back_project(&self, uv: &Vector2<f64>, z: f64) -> Vector3<f64> {
        Vector3::new((uv.x - self.cx) * z / self.fx, (uv.y - self.cy) * z / self.fy, z)
    }
}

impl<'de> Deserialize<'de> for CameraIntrinsics {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            fx: f64,
            fy: f64,
            cx: Option<f64>,
            cy: Option<f64>,
            width: u32,
            height: u32,
        }
        let r = Raw::deserialize(d)?;
        let k = CameraIntrinsics {
            fx: r.fx,
            fy: r.fy,
            cx: r.cx.unwrap_or(r.width as f64 / 2.0),
            cy: r.cy.unwrap_or(r.height as f64 / 2.0),
            width: r.width,
            height: r.height,
        };
        k.validate().map_err(serde::de::Error::custom)?;
        Ok(k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub uv: Vector2<f64>,
    pub in_frame: bool,
}

/// Projects camera-frame points; every point must have positive depth.
pub fn project(
    points: &KeypointSet,
    k: &CameraIntrinsics,
) -> Result<Vec<Projection>, CameraError> {
    project_points(&points.points, k)
}

pub fn project_points(
    points: &[Vector3<f64>],
    k: &CameraIntrinsics,
) -> Result<Vec<Projection>, CameraError> {
    points
        .iter()
        .enumerate()
        .map(|(index, p)| {
            if !(p.z > 0.0) {
                return Err(CameraError::BehindCamera { index, z: p.z });
            }
            let uv = k.project_point(p);
            Ok(Projection {
                uv,
                in_frame: k.in_frame(&uv),
            })
        })
        .collect()
}

pub fn coarse_depth(k: &CameraIntrinsics, a_real: f64, a_bbox: f64) -> Result<f64, CameraError> {
    if !(a_real > 0.0 && a_bbox > 0.0) {
        return Err(CameraError::NonPositiveArea { a_real, a_bbox });
    }
    Ok((k.fx * k.fy * a_real / a_bbox).sqrt())
}

/// Root depth with its coarse seed and correction factor; `depth = lambda * coarse` exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthEstimate {
    pub coarse: f64,
    pub lambda: f64,
    pub depth: f64,
}

pub fn refine_depth(lambda: f64, coarse: f64) -> Result<DepthEstimate, CameraError> {
    if !(coarse > 0.0) {
        return Err(CameraError::NonPositiveDepth(coarse));
    }
    let depth = lambda * coarse;
    if !(depth > 0.0) {
        return Err(CameraError::NonPositiveDepth(depth));
    }
    Ok(DepthEstimate {
        coarse,
        lambda,
        depth,
    })
}

/// Lifts root-relative keypoints by the root depth. Returns the lifted set and
/// the translation (the lifted root keypoint).
pub fn lift_keypoints(
    root_relative: &KeypointSet,
    depth: f64,
    root_index: usize,
) -> Result<(KeypointSet, Vector3<f64>), CameraError> {
    if root_relative.frame != KeypointFrame::RootRelative {
        return Err(CameraError::WrongFrame {
            expected: KeypointFrame::RootRelative,
            actual: root_relative.frame,
        });
    }
    if root_index >= root_relative.len() {
        return Err(CameraError::IndexOutOfRange {
            index: root_index,
            len: root_relative.len(),
        });
    }
    let offset = Vector3::new(0.0, 0.0, depth);
    let lifted: Vec<_> = root_relative.points.iter().map(|p| p + offset).collect();
    let t = lifted[root_index];
    Ok((KeypointSet::new(lifted, KeypointFrame::LiftedAbsolute), t))
}

/// Inverse of [`lift_keypoints`]: subtracts the depth from every z.
pub fn root_relative_from_absolute(points: &KeypointSet, depth: f64) -> KeypointSet {
    let offset = Vector3::new(0.0, 0.0, depth);
    KeypointSet::new(
        points.points.iter().map(|p| p - offset).collect(),
        KeypointFrame::RootRelative,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: Vector2<f64>,
    pub max: Vector2<f64>,
}

impl BoundingBox {
    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
}

/// Box around the in-frame points, grown by `padding` pixels on every side and
/// clipped to the image.
pub fn keypoint_bbox(
    points: &[Projection],
    padding: f64,
    k: &CameraIntrinsics,
) -> Result<BoundingBox, CameraError> {
    let mut inside = points.iter().filter(|p| p.in_frame).map(|p| p.uv);
    let first = inside.next().ok_or(CameraError::NoPointsInFrame)?;
    let (mut min, mut max) = (first, first);
    for uv in inside {
        min = min.inf(&uv);
        max = max.sup(&uv);
    }
    let pad = Vector2::repeat(padding);
    let lo = Vector2::zeros();
    let hi = Vector2::new(k.width as f64, k.height as f64);
    Ok(BoundingBox {
        min: (min - pad).sup(&lo),
        max: (max + pad).inf(&hi),
    })
}

/// Real-world area of the robot used by the coarse depth: the x-y extent of
/// the zero-state keypoints in the base frame. A keypoint layout that is flat
/// in x or y falls back to the square of its largest extent.
pub fn real_area(model: &RobotModel) -> f64 {
    let pts = base_keypoints(model, &JointState::zeros(model)).expect("zero state has model dof");
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in &pts {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let ext = hi - lo;
    let area = ext.x * ext.y;
    if area >= 1.0 {
        area
    } else {
        let m = ext.max();
        m * m
    }
}
