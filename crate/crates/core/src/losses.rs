//! Supervision losses and their analytic gradients.
//!
//! Ground-truth terms: depth (L1), joint, rotation (Frobenius), translation,
//! and the two keypoint terms that add a 3D norm (mm) to a 2D reprojection
//! norm (px). Self-supervision terms: FK/lifted keypoint consistency and
//! `1 − IoU` between a rendered and a segmented mask.
//!
//! Norms over keypoints are taken over the flattened `3N` / `2N` vectors. The
//! joint norm mixes degrees and millimeters exactly as the state vector does.
//! At a zero residual (or at the L1 kink) gradients return the zero subgradient.

use std::fmt::Write as _;

use nalgebra::{DVector, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{project_points, CameraError, CameraIntrinsics};
use crate::fmt::sig6;
use crate::kinematics::{
    holistic_jacobian_internal, JointKind, JointState, KeypointFrame, KeypointSet, KinematicsError,
    RobotModel,
};
use crate::render::{intersection_union, BinaryMask, RenderError};
use crate::rotation::{ensure_rotation, r6_to_matrix, r6_to_matrix_jacobian, Rotation6D, RotationError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("expected {expected:?} keypoints, got {actual:?}")]
    WrongFrame {
        expected: KeypointFrame,
        actual: KeypointFrame,
    },
    #[error(transparent)]
    Rotation(#[from] RotationError),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Render(#[from] RenderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight on the two keypoint terms of the ground-truth total.
    pub kpts: f64,
    /// Weight on the mask term of the self-supervised total.
    pub mc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { kpts: 10.0, mc: 1.0 }
    }
}

fn same_len(a: usize, b: usize) -> Result<(), LossError> {
    if a == b {
        Ok(())
    } else {
        Err(LossError::LengthMismatch(a, b))
    }
}

fn expect_frame(set: &KeypointSet, expected: KeypointFrame) -> Result<(), LossError> {
    if set.frame == expected {
        Ok(())
    } else {
        Err(LossError::WrongFrame {
            expected,
            actual: set.frame,
        })
    }
}

/// `|d − d̂|` in mm.
pub fn depth_loss(d: f64, d_hat: f64) -> f64 {
    (d - d_hat).abs()
}

pub fn joint_loss(q: &JointState, q_hat: &JointState) -> Result<f64, LossError> {
    same_len(q.len(), q_hat.len())?;
    Ok(q.values()
        .iter()
        .zip(q_hat.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// Frobenius norm of `R − R̂`.
pub fn rot_loss(r: &Matrix3<f64>, r_hat: &Matrix3<f64>) -> Result<f64, LossError> {
    ensure_rotation(r)?;
    ensure_rotation(r_hat)?;
    Ok((r - r_hat).norm())
}

pub fn trans_loss(t: &Vector3<f64>, t_hat: &Vector3<f64>) -> f64 {
    (t - t_hat).norm()
}

/// The 3D (mm) and 2D (px) halves of a keypoint term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeypointTerm {
    pub norm_3d: f64,
    pub norm_2d: f64,
}

impl KeypointTerm {
    pub fn total(&self) -> f64 {
        self.norm_3d + self.norm_2d
    }
}

fn keypoint_term(
    gt: &KeypointSet,
    pred: &KeypointSet,
    k: &CameraIntrinsics,
) -> Result<KeypointTerm, LossError> {
    same_len(gt.len(), pred.len())?;
    let p = project_points(&gt.points, k)?;
    let p_hat = project_points(&pred.points, k)?;
    let norm_3d = gt
        .points
        .iter()
        .zip(&pred.points)
        .map(|(a, b)| (a - b).norm_squared())
        .sum::<f64>()
        .sqrt();
    let norm_2d = p
        .iter()
        .zip(&p_hat)
        .map(|(a, b)| (a.uv - b.uv).norm_squared())
        .sum::<f64>()
        .sqrt();
    Ok(KeypointTerm { norm_3d, norm_2d })
}

/// FK keypoint term `‖P − P̂‖ + ‖p − p̂‖`.
pub fn kpts_loss(
    gt: &KeypointSet,
    pred: &KeypointSet,
    k: &CameraIntrinsics,
) -> Result<KeypointTerm, LossError> {
    expect_frame(gt, KeypointFrame::FkAbsolute)?;
    expect_frame(pred, KeypointFrame::FkAbsolute)?;
    keypoint_term(gt, pred, k)
}

/// Lifted keypoint term `‖P' − P̂'‖ + ‖p' − p̂'‖`.
pub fn kpts_loss_prime(
    gt: &KeypointSet,
    pred: &KeypointSet,
    k: &CameraIntrinsics,
) -> Result<KeypointTerm, LossError> {
    expect_frame(gt, KeypointFrame::LiftedAbsolute)?;
    expect_frame(pred, KeypointFrame::LiftedAbsolute)?;
    keypoint_term(gt, pred, k)
}

/// Component values feeding the ground-truth total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GtComponents {
    pub joint: f64,
    pub rot: f64,
    pub trans: f64,
    pub kpts: f64,
    pub kpts_prime: f64,
}

/// `L_joint + L_rot + L_trans + λ (L_kpts + L'_kpts)`; the depth term is not part of it.
pub fn gt_total(c: &GtComponents, w: &LossWeights) -> f64 {
    c.joint + c.rot + c.trans + w.kpts * (c.kpts + c.kpts_prime)
}

/// `‖P̂ − P̂'‖` between FK keypoints and lifted keypoints.
pub fn keypoint_consistency(fk: &KeypointSet, lifted: &KeypointSet) -> Result<f64, LossError> {
    expect_frame(fk, KeypointFrame::FkAbsolute)?;
    expect_frame(lifted, KeypointFrame::LiftedAbsolute)?;
    same_len(fk.len(), lifted.len())?;
    Ok(fk
        .points
        .iter()
        .zip(&lifted.points)
        .map(|(a, b)| (a - b).norm_squared())
        .sum::<f64>()
        .sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskConsistency {
    pub loss: f64,
    /// Both masks were empty; the loss is reported as 0.
    pub both_empty: bool,
}

/// `1 − |M_render ∧ M_seg| / |M_render ∨ M_seg|`.
pub fn mask_consistency(render: &BinaryMask, seg: &BinaryMask) -> Result<MaskConsistency, LossError> {
    let (inter, union) = intersection_union(render, seg)?;
    if union == 0 {
        log::warn!("mask consistency evaluated on two empty masks");
        return Ok(MaskConsistency {
            loss: 0.0,
            both_empty: true,
        });
    }
    Ok(MaskConsistency {
        loss: 1.0 - inter as f64 / union as f64,
        both_empty: false,
    })
}

/// `L_kc + λ_mc · L_mc`.
pub fn self_total(kc: f64, mc: f64, w: &LossWeights) -> f64 {
    kc + w.mc * mc
}

/// Every term plus both totals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub depth: f64,
    pub joint: f64,
    pub rot: f64,
    pub trans: f64,
    pub kpts: f64,
    pub kpts_prime: f64,
    pub kc: f64,
    pub mc: f64,
    pub gt_total: f64,
    pub self_total: f64,
}

impl LossReport {
    /// Flat `key = value` block, six significant digits.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("depth", self.depth),
            ("joint", self.joint),
            ("rot", self.rot),
            ("trans", self.trans),
            ("kpts", self.kpts),
            ("kpts_prime", self.kpts_prime),
            ("kc", self.kc),
            ("mc", self.mc),
            ("gt_total", self.gt_total),
            ("self_total", self.self_total),
        ] {
            let _ = writeln!(s, "{k} = {}", sig6(v));
        }
        s
    }
}

/// Network-style predictions: the regressed state plus the root-relative
/// keypoints that get lifted by the predicted depth.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub q: JointState,
    pub r6: Rotation6D,
    pub translation: Vector3<f64>,
    pub depth: f64,
    pub root_relative: KeypointSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub q: JointState,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub depth: f64,
    pub fk: KeypointSet,
    pub lifted: KeypointSet,
}

#[derive(Debug, Clone, Copy)]
pub struct LossContext<'a> {
    pub model: &'a RobotModel,
    pub intrinsics: &'a CameraIntrinsics,
    pub weights: LossWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    Depth,
    Joint,
    Rot,
    Trans,
    Kpts,
    KptsPrime,
    Consistency,
    GtTotal,
    /// The mask term is piecewise constant in the parameters and contributes
    /// a zero gradient.
    SelfTotal,
}

impl LossTerm {
    pub const ALL: [LossTerm; 9] = [
        LossTerm::Depth,
        LossTerm::Joint,
        LossTerm::Rot,
        LossTerm::Trans,
        LossTerm::Kpts,
        LossTerm::KptsPrime,
        LossTerm::Consistency,
        LossTerm::GtTotal,
        LossTerm::SelfTotal,
    ];
}

struct Evaluated {
    fk: KeypointSet,
    lifted: KeypointSet,
    /// `∂P̂/∂(q, r6, t)` with joint columns per public unit.
    fk_jac: nalgebra::DMatrix<f64>,
}

fn evaluate_prediction(ctx: &LossContext<'_>, pred: &Prediction) -> Result<Evaluated, LossError> {
    expect_frame(&pred.root_relative, KeypointFrame::RootRelative)?;
    same_len(pred.root_relative.len(), ctx.model.n_keypoints())?;
    let qi = pred.q.to_internal(ctx.model)?;
    let (points, mut fk_jac) = holistic_jacobian_internal(ctx.model, &qi, &pred.r6, &pred.translation)?;
    for (s, kind) in ctx.model.joint_kinds().iter().enumerate() {
        if *kind == JointKind::Revolute {
            let scale = kind.to_internal_scale();
            fk_jac.column_mut(s).scale_mut(scale);
        }
    }
    let offset = Vector3::new(0.0, 0.0, pred.depth);
    let lifted = pred.root_relative.points.iter().map(|p| p + offset).collect();
    Ok(Evaluated {
        fk: KeypointSet::new(points, KeypointFrame::FkAbsolute),
        lifted: KeypointSet::new(lifted, KeypointFrame::LiftedAbsolute),
        fk_jac,
    })
}

/// Evaluates every term; `mc` is the externally computed mask term.
pub fn evaluate_losses(
    ctx: &LossContext<'_>,
    pred: &Prediction,
    gt: &GroundTruth,
    mc: f64,
) -> Result<LossReport, LossError> {
    let ev = evaluate_prediction(ctx, pred)?;
    let rot = rot_loss(&gt.rotation, &r6_to_matrix(&pred.r6)?)?;
    let comps = GtComponents {
        joint: joint_loss(&gt.q, &pred.q)?,
        rot,
        trans: trans_loss(&gt.translation, &pred.translation),
        kpts: kpts_loss(&gt.fk, &ev.fk, ctx.intrinsics)?.total(),
        kpts_prime: kpts_loss_prime(&gt.lifted, &ev.lifted, ctx.intrinsics)?.total(),
    };
    let kc = keypoint_consistency(&ev.fk, &ev.lifted)?;
    Ok(LossReport {
        depth: depth_loss(gt.depth, pred.depth),
        joint: comps.joint,
        rot: comps.rot,
        trans: comps.trans,
        kpts: comps.kpts,
        kpts_prime: comps.kpts_prime,
        kc,
        mc,
        gt_total: gt_total(&comps, &ctx.weights),
        self_total: self_total(kc, mc, &ctx.weights),
    })
}

/// Length of the gradient vector: `J + 6 + 3 + 1`.
pub fn parameter_count(model: &RobotModel) -> usize {
    model.dof() + 10
}

/// `v / ‖v‖`, or zero at the kink.
fn unit_or_zero(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// Gradient of one term with respect to `(q̂, r6, t̂, d̂)`; `q̂` in public units
/// (degrees / mm), matching the units the joint loss is measured in.
pub fn loss_gradient(
    ctx: &LossContext<'_>,
    term: LossTerm,
    pred: &Prediction,
    gt: &GroundTruth,
) -> Result<DVector<f64>, LossError> {
    let j = ctx.model.dof();
    let n = parameter_count(ctx.model);
    let (i_r6, i_t, i_d) = (j, j + 6, j + 9);
    let mut g = DVector::zeros(n);
    let ev = evaluate_prediction(ctx, pred)?;
    let k = ctx.intrinsics;

    // gradient of ‖P̂ − target‖ + ‖p̂ − p_target‖ with respect to the FK points
    let point_term_grad = |pred_pts: &[Vector3<f64>], target: &[Vector3<f64>]| -> Result<Vec<Vector3<f64>>, LossError> {
        let d3: Vec<f64> = pred_pts
            .iter()
            .zip(target)
            .flat_map(|(a, b)| (a - b).iter().copied().collect::<Vec<_>>())
            .collect();
        let u3 = unit_or_zero(&d3);
        let pp = project_points(pred_pts, k)?;
        let pt = project_points(target, k)?;
        let d2: Vec<f64> = pp
            .iter()
            .zip(&pt)
            .flat_map(|(a, b)| {
                let d: Vector2<f64> = a.uv - b.uv;
                [d.x, d.y]
            })
            .collect();
        let u2 = unit_or_zero(&d2);
        Ok(pred_pts
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let g3 = Vector3::new(u3[3 * i], u3[3 * i + 1], u3[3 * i + 2]);
                let jp = k.projection_jacobian(p);
                g3 + jp.transpose() * Vector2::new(u2[2 * i], u2[2 * i + 1])
            })
            .collect())
    };

    let add_through_fk = |g: &mut DVector<f64>, dpoints: &[Vector3<f64>], scale: f64| {
        let flat = DVector::from_iterator(3 * dpoints.len(), dpoints.iter().flat_map(|p| [p.x, p.y, p.z]));
        let contrib = ev.fk_jac.transpose() * flat;
        for c in 0..(j + 9) {
            g[c] += scale * contrib[c];
        }
    };

    let add_term = |g: &mut DVector<f64>, term: LossTerm, scale: f64| -> Result<(), LossError> {
        match term {
            LossTerm::Depth => {
                let diff = pred.depth - gt.depth;
                g[i_d] += scale * if diff > 0.0 { 1.0 } else if diff < 0.0 { -1.0 } else { 0.0 };
            }
            LossTerm::Joint => {
                same_len(gt.q.len(), pred.q.len())?;
                let d: Vec<f64> = pred.q.values().iter().zip(gt.q.values()).map(|(a, b)| a - b).collect();
                for (s, v) in unit_or_zero(&d).into_iter().enumerate() {
                    g[s] += scale * v;
                }
            }
            LossTerm::Rot => {
                let r_hat = r6_to_matrix(&pred.r6)?;
                let diff = r_hat - gt.rotation;
                let norm = diff.norm();
                if norm > 0.0 {
                    for (m, dr) in r6_to_matrix_jacobian(&pred.r6)?.iter().enumerate() {
                        g[i_r6 + m] += scale * diff.dot(dr) / norm;
                    }
                }
            }
            LossTerm::Trans => {
                let d = pred.translation - gt.translation;
                let u = unit_or_zero(d.as_slice());
                for a in 0..3 {
                    g[i_t + a] += scale * u[a];
                }
            }
            LossTerm::Kpts => {
                same_len(gt.fk.len(), ev.fk.len())?;
                let dp = point_term_grad(&ev.fk.points, &gt.fk.points)?;
                add_through_fk(g, &dp, scale);
            }
            LossTerm::KptsPrime => {
                same_len(gt.lifted.len(), ev.lifted.len())?;
                let dp = point_term_grad(&ev.lifted.points, &gt.lifted.points)?;
                g[i_d] += scale * dp.iter().map(|v| v.z).sum::<f64>();
            }
            LossTerm::Consistency => {
                let d: Vec<f64> = ev
                    .fk
                    .points
                    .iter()
                    .zip(&ev.lifted.points)
                    .flat_map(|(a, b)| (a - b).iter().copied().collect::<Vec<_>>())
                    .collect();
                let u = unit_or_zero(&d);
                let dp: Vec<Vector3<f64>> = u.chunks(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect();
                add_through_fk(g, &dp, scale);
                g[i_d] -= scale * dp.iter().map(|v| v.z).sum::<f64>();
            }
            LossTerm::GtTotal | LossTerm::SelfTotal => unreachable!("expanded by caller"),
        }
        Ok(())
    };

    match term {
        LossTerm::GtTotal => {
            add_term(&mut g, LossTerm::Joint, 1.0)?;
            add_term(&mut g, LossTerm::Rot, 1.0)?;
            add_term(&mut g, LossTerm::Trans, 1.0)?;
            add_term(&mut g, LossTerm::Kpts, ctx.weights.kpts)?;
            add_term(&mut g, LossTerm::KptsPrime, ctx.weights.kpts)?;
        }
        LossTerm::SelfTotal => add_term(&mut g, LossTerm::Consistency, 1.0)?,
        t => add_term(&mut g, t, 1.0)?,
    }
    Ok(g)
}

/// Scalar value of one term at `pred` (with `mc` held at the given value).
pub fn loss_value(
    ctx: &LossContext<'_>,
    term: LossTerm,
    pred: &Prediction,
    gt: &GroundTruth,
    mc: f64,
) -> Result<f64, LossError> {
    let r = evaluate_losses(ctx, pred, gt, mc)?;
    Ok(match term {
        LossTerm::Depth => r.depth,
        LossTerm::Joint => r.joint,
        LossTerm::Rot => r.rot,
        LossTerm::Trans => r.trans,
        LossTerm::Kpts => r.kpts,
        LossTerm::KptsPrime => r.kpts_prime,
        LossTerm::Consistency => r.kc,
        LossTerm::GtTotal => r.gt_total,
        LossTerm::SelfTotal => r.self_total,
    })
}

/// Flattens `(q̂, r6, t̂, d̂)` in gradient order.
pub fn pack_parameters(pred: &Prediction) -> Vec<f64> {
    let mut v = pred.q.values().to_vec();
    v.extend(pred.r6.to_array());
    v.extend(pred.translation.iter());
    v.push(pred.depth);
    v
}

/// Inverse of [`pack_parameters`], keeping `pred.root_relative`.
pub fn unpack_parameters(pred: &Prediction, params: &[f64]) -> Prediction {
    let j = pred.q.len();
    Prediction {
        q: JointState::new(params[..j].to_vec()),
        r6: Rotation6D::from_slice(&params[j..j + 6]),
        translation: Vector3::new(params[j + 6], params[j + 7], params[j + 8]),
        depth: params[j + 9],
        root_relative: pred.root_relative.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation::axis_angle;
    use approx::assert_relative_eq;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn fk(points: Vec<Vector3<f64>>) -> KeypointSet {
        KeypointSet::new(points, KeypointFrame::FkAbsolute)
    }

    #[test]
    fn depth_examples() {
        assert_eq!(depth_loss(1000.0, 1000.0), 0.0);
        assert_eq!(depth_loss(1000.0, 1100.0), 100.0);
        assert_eq!(depth_loss(1100.0, 1000.0), 100.0);
    }

    #[test]
    fn joint_examples() {
        let z = JointState::new(vec![0.0; 4]);
        assert_eq!(joint_loss(&z, &z).unwrap(), 0.0);
        assert_eq!(joint_loss(&z, &JointState::new(vec![1.0, 0.0, 0.0, 0.0])).unwrap(), 1.0);
        assert_eq!(joint_loss(&z, &JointState::new(vec![3.0, 4.0, 0.0, 0.0])).unwrap(), 5.0);
        assert!(matches!(
            joint_loss(&z, &JointState::new(vec![0.0])),
            Err(LossError::LengthMismatch(4, 1))
        ));
    }

    #[test]
    fn rot_trans_examples() {
        let i = Matrix3::identity();
        assert_eq!(rot_loss(&i, &i).unwrap(), 0.0);
        let flip = axis_angle(Vector3::z(), 180.0);
        assert_relative_eq!(rot_loss(&i, &flip).unwrap(), 8f64.sqrt(), epsilon = 1e-12);
        assert!(matches!(rot_loss(&i, &(i * 2.0)), Err(LossError::Rotation(_))));
        assert_eq!(trans_loss(&Vector3::zeros(), &Vector3::new(0.0, 0.0, 50.0)), 50.0);
    }

    #[test]
    fn keypoint_term_examples() {
        let k = cam();
        let a = fk(vec![Vector3::new(0.0, 0.0, 1000.0)]);
        assert_eq!(kpts_loss(&a, &a, &k).unwrap().total(), 0.0);

        let along_ray = fk(vec![Vector3::new(0.0, 0.0, 1100.0)]);
        let t = kpts_loss(&a, &along_ray, &k).unwrap();
        assert_eq!((t.norm_3d, t.norm_2d, t.total()), (100.0, 0.0, 100.0));

        let sideways = fk(vec![Vector3::new(10.0, 0.0, 1000.0)]);
        let t = kpts_loss(&a, &sideways, &k).unwrap();
        assert_relative_eq!(t.norm_3d, 10.0);
        assert_relative_eq!(t.norm_2d, 5.0);
        assert_relative_eq!(t.total(), 15.0);

        let lifted = KeypointSet::new(a.points.clone(), KeypointFrame::LiftedAbsolute);
        assert_eq!(kpts_loss_prime(&lifted, &lifted, &k).unwrap().total(), 0.0);
        assert!(matches!(kpts_loss_prime(&a, &lifted, &k), Err(LossError::WrongFrame { .. })));
        assert!(matches!(
            kpts_loss(&a, &fk(vec![Vector3::new(0.0, 0.0, 1.0); 2]), &k),
            Err(LossError::LengthMismatch(1, 2))
        ));
        assert!(matches!(
            kpts_loss(&a, &fk(vec![Vector3::new(0.0, 0.0, -1.0)]), &k),
            Err(LossError::Camera(CameraError::BehindCamera { .. }))
        ));
    }

    #[test]
    fn gt_total_examples() {
        let w = LossWeights::default();
        assert_eq!(gt_total(&GtComponents::default(), &w), 0.0);
        let ones = GtComponents { joint: 1.0, rot: 1.0, trans: 1.0, kpts: 1.0, kpts_prime: 1.0 };
        assert_eq!(gt_total(&ones, &w), 23.0);
        let no_kp = LossWeights { kpts: 0.0, ..w };
        assert_eq!(gt_total(&ones, &no_kp), 3.0);
    }

    #[test]
    fn consistency_examples() {
        let p = vec![Vector3::new(1.0, 2.0, 900.0), Vector3::new(-5.0, 0.0, 1000.0)];
        let lifted = |v: &Vec<Vector3<f64>>| KeypointSet::new(v.clone(), KeypointFrame::LiftedAbsolute);
        assert_eq!(keypoint_consistency(&fk(p.clone()), &lifted(&p)).unwrap(), 0.0);
        let mut q = p.clone();
        q[1] += Vector3::new(0.0, 30.0, 40.0);
        assert_eq!(keypoint_consistency(&fk(p.clone()), &lifted(&q)).unwrap(), 50.0);
        let shift = Vector3::new(7.0, -8.0, 9.0);
        let ps: Vec<_> = p.iter().map(|v| v + shift).collect();
        let qs: Vec<_> = q.iter().map(|v| v + shift).collect();
        assert_relative_eq!(keypoint_consistency(&fk(ps), &lifted(&qs)).unwrap(), 50.0, epsilon = 1e-12);
    }

    fn block(u0: u32, u1: u32, v0: u32, v1: u32) -> BinaryMask {
        BinaryMask::from_fn(40, 40, |u, v| (u0..u1).contains(&u) && (v0..v1).contains(&v))
    }

    #[test]
    fn mask_examples() {
        let a = block(0, 10, 0, 10);
        assert_eq!(mask_consistency(&a, &a).unwrap().loss, 0.0);
        assert_eq!(mask_consistency(&a, &block(20, 30, 20, 30)).unwrap().loss, 1.0);
        // 100-pixel squares overlapping on a 5×10 strip
        let b = block(5, 15, 0, 10);
        let mc = mask_consistency(&a, &b).unwrap();
        assert!((mc.loss - 2.0 / 3.0).abs() <= 1e-12);
        assert_eq!(mask_consistency(&b, &a).unwrap(), mc);
        let empty = BinaryMask::new(40, 40);
        let e = mask_consistency(&empty, &empty).unwrap();
        assert_eq!((e.loss, e.both_empty), (0.0, true));
        // translating both masks together leaves the loss unchanged
        let moved = mask_consistency(&block(10, 20, 12, 22), &block(15, 25, 12, 22)).unwrap();
        assert_eq!(moved.loss, mc.loss);
    }

    #[test]
    fn self_total_examples() {
        let w = LossWeights::default();
        assert_eq!(self_total(0.0, 0.0, &w), 0.0);
        assert_eq!(self_total(2.0, 3.0, &w), 5.0);
        assert_eq!(self_total(2.0, 3.0, &LossWeights { mc: 0.0, ..w }), 2.0);
    }

    #[test]
    fn report_kv_block() {
        let r = LossReport {
            depth: 1.0, joint: 2.0, rot: 0.5, trans: 3.0, kpts: 0.25, kpts_prime: 0.125,
            kc: 4.0, mc: 0.1, gt_total: 9.25, self_total: 4.1,
        };
        let kv = r.to_kv();
        assert!(kv.starts_with("depth = 1\njoint = 2\n"));
        assert!(kv.contains("self_total = 4.1\n"));
        assert_eq!(kv.lines().count(), 10);
    }

    fn gradient_fixture(seed: u64) -> (RobotModel, Prediction, GroundTruth) {
        use rand::{Rng, SeedableRng};
        let model = crate::kinematics::parse_robot_description(
            &crate::kinematics::tests::random_chain(seed, 7),
        )
        .unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let rand_q = |rng: &mut rand_chacha::ChaCha8Rng| {
            JointState::new(
                model
                    .state_joints()
                    .map(|j| {
                        let l = j.effective_limits();
                        rng.gen_range(l.lower * 0.5..l.upper * 0.5)
                    })
                    .collect(),
            )
        };
        let q_gt = rand_q(&mut rng);
        let q_hat = rand_q(&mut rng);
        let r_gt = axis_angle(Vector3::new(0.3, -1.0, 0.2), 40.0);
        let t_gt = Vector3::new(30.0, -20.0, 4000.0);
        let fk_gt = crate::kinematics::holistic_keypoints(&model, &q_gt, &r_gt, &t_gt).unwrap();
        let lifted_gt = KeypointSet::new(fk_gt.points.clone(), KeypointFrame::LiftedAbsolute);
        let r6 = Rotation6D::from_array([0.9, 0.2, -0.1, 0.1, 1.1, 0.3]);
        let t_hat = Vector3::new(45.0, -5.0, 3900.0);
        let rr = fk_gt
            .points
            .iter()
            .map(|p| p - Vector3::new(0.0, 0.0, t_gt.z) + Vector3::new(rng.gen_range(-20.0..20.0), 3.0, -4.0))
            .collect();
        let pred = Prediction {
            q: q_hat,
            r6,
            translation: t_hat,
            depth: 3950.0,
            root_relative: KeypointSet::new(rr, KeypointFrame::RootRelative),
        };
        let gt = GroundTruth {
            q: q_gt,
            rotation: r_gt,
            translation: t_gt,
            depth: t_gt.z,
            fk: fk_gt,
            lifted: lifted_gt,
        };
        (model, pred, gt)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let k = cam();
        for seed in [3, 11, 29] {
            let (model, pred, gt) = gradient_fixture(seed);
            let ctx = LossContext { model: &model, intrinsics: &k, weights: LossWeights::default() };
            let x0 = pack_parameters(&pred);
            for term in LossTerm::ALL {
                let g = loss_gradient(&ctx, term, &pred, &gt).unwrap();
                assert_eq!(g.len(), parameter_count(&model));
                for c in 0..x0.len() {
                    let h = 1e-5 * x0[c].abs().max(1.0);
                    let mut xp = x0.clone();
                    let mut xm = x0.clone();
                    xp[c] += h;
                    xm[c] -= h;
                    let fp = loss_value(&ctx, term, &unpack_parameters(&pred, &xp), &gt, 0.25).unwrap();
                    let fm = loss_value(&ctx, term, &unpack_parameters(&pred, &xm), &gt, 0.25).unwrap();
                    let fd = (fp - fm) / (2.0 * h);
                    let tol = 1e-5 * fd.abs().max(g[c].abs()).max(1e-2);
                    assert!((fd - g[c]).abs() <= tol, "seed {seed} {term:?} param {c}: fd {fd} vs {}", g[c]);
                }
            }
        }
    }

    #[test]
    fn gradients_vanish_at_ground_truth() {
        let k = cam();
        let (model, mut pred, gt) = gradient_fixture(5);
        pred.q = gt.q.clone();
        pred.r6 = crate::rotation::matrix_to_r6(&gt.rotation).unwrap();
        pred.translation = gt.translation;
        pred.depth = gt.depth;
        pred.root_relative = KeypointSet::new(
            gt.fk.points.iter().map(|p| p - Vector3::new(0.0, 0.0, gt.depth)).collect(),
            KeypointFrame::RootRelative,
        );
        let ctx = LossContext { model: &model, intrinsics: &k, weights: LossWeights::default() };
        let r = evaluate_losses(&ctx, &pred, &gt, 0.0).unwrap();
        assert!(r.gt_total < 1e-9 && r.self_total < 1e-9, "{r:?}");
        for term in [LossTerm::Depth, LossTerm::Joint, LossTerm::Trans] {
            assert!(loss_gradient(&ctx, term, &pred, &gt).unwrap().iter().all(|v| *v == 0.0));
        }
    }
}
