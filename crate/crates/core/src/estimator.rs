//! Levenberg–Marquardt recovery of joint state and camera-to-robot pose.
//!
//! Parameters are `(q, r6, t)` with revolute joints in radians internally.
//! Stacked residuals:
//!
//! * reprojection (px) of every visible keypoint,
//! * shape (mm): `(P_i − t) − (P^r_i − P^r_root)` against observed root-relative
//!   keypoints, for visible keypoints when the root is visible,
//! * consistency (mm): `P_i − (P^r_i + (0, 0, t_z))` for visible keypoints.
//!
//! Each residual group is scaled by the square root of its weight.

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{coarse_depth, keypoint_bbox, real_area, CameraError, CameraIntrinsics, Projection};
use crate::kinematics::{
    holistic_jacobian_internal, JointKind, JointState, KeypointFrame, KeypointSet, KinematicsError, RigidPose,
    RobotModel,
};
use crate::rotation::{axis_angle, geodesic_angle, matrix_to_r6, r6_to_matrix, Rotation6D, RotationError};
use crate::synth::SceneRecord;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("{visible} visible keypoints, at least {required} required")]
    Underconstrained { visible: usize, required: usize },
    #[error("no visible keypoints")]
    NoVisibleKeypoints,
    #[error("observation count {actual} does not match the model's {expected} keypoints")]
    ObservationCount { expected: usize, actual: usize },
    #[error("known joint state has {actual} values, model has {expected} joints")]
    KnownJointLength { expected: usize, actual: usize },
    #[error("known joint state required")]
    MissingKnownJoints,
    #[error("negative or non-finite residual weight {0}")]
    InvalidWeight(f64),
    #[error("invalid fit config: {0}")]
    InvalidConfig(String),
    #[error("cannot fuse results for different robots: {0} vs {1}")]
    ModelMismatch(String, String),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Rotation(#[from] RotationError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResidualWeights {
    pub reprojection: f64,
    pub root_relative: f64,
    pub consistency: f64,
}

impl Default for ResidualWeights {
    fn default() -> Self {
        Self {
            reprojection: 1.0,
            root_relative: 0.2,
            consistency: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitProblem<'a> {
    pub model: &'a RobotModel,
    pub intrinsics: CameraIntrinsics,
    pub observed_2d: Vec<Vector2<f64>>,
    pub visible: Vec<bool>,
    /// Root-relative keypoints: camera-frame x/y, z relative to the root depth.
    pub observed_3d: Option<KeypointSet>,
    pub known_q: Option<JointState>,
    pub weights: ResidualWeights,
}

impl<'a> FitProblem<'a> {
    pub fn new(model: &'a RobotModel, intrinsics: CameraIntrinsics, observed_2d: Vec<Vector2<f64>>, visible: Vec<bool>) -> Self {
        Self {
            model,
            intrinsics,
            observed_2d,
            visible,
            observed_3d: None,
            known_q: None,
            weights: ResidualWeights::default(),
        }
    }

    pub fn with_observed_3d(mut self, points: KeypointSet) -> Self {
        self.observed_3d = Some(points);
        self
    }

    pub fn with_known_q(mut self, q: JointState) -> Self {
        self.known_q = Some(q);
        self
    }

    pub fn with_weights(mut self, weights: ResidualWeights) -> Self {
        self.weights = weights;
        self
    }

    /// Observations of a stored scene. Only in-frame keypoints are visible.
    pub fn from_record(model: &'a RobotModel, record: &SceneRecord, use_3d: bool) -> Self {
        let p = Self::new(model, record.intrinsics, record.observations_2d(), record.in_frame.clone());
        if use_3d {
            p.with_observed_3d(record.observations_3d())
        } else {
            p
        }
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|v| **v).count()
    }

    fn root_visible(&self) -> bool {
        self.visible[self.model.root_keypoint()]
    }

    pub fn validate(&self) -> Result<(), EstimatorError> {
        let n = self.model.n_keypoints();
        for len in [self.observed_2d.len(), self.visible.len()] {
            if len != n {
                return Err(EstimatorError::ObservationCount { expected: n, actual: len });
            }
        }
        if let Some(o) = &self.observed_3d {
            if o.len() != n {
                return Err(EstimatorError::ObservationCount { expected: n, actual: o.len() });
            }
            if o.frame != KeypointFrame::RootRelative {
                return Err(CameraError::WrongFrame {
                    expected: KeypointFrame::RootRelative,
                    actual: o.frame,
                }
                .into());
            }
        }
        if let Some(q) = &self.known_q {
            if q.len() != self.model.dof() {
                return Err(EstimatorError::KnownJointLength {
                    expected: self.model.dof(),
                    actual: q.len(),
                });
            }
        }
        for w in [self.weights.reprojection, self.weights.root_relative, self.weights.consistency] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(EstimatorError::InvalidWeight(w));
            }
        }
        let visible = self.visible_count();
        if visible == 0 {
            return Err(EstimatorError::NoVisibleKeypoints);
        }
        let required = if self.known_q.is_some() { 3 } else { 4 };
        if visible < required {
            return Err(EstimatorError::Underconstrained { visible, required });
        }
        if self.known_q.is_none() && visible < 6 {
            log::warn!("only {visible} visible keypoints; joint state may be poorly constrained");
        }
        Ok(())
    }

    fn residual_count(&self) -> usize {
        let vis = self.visible_count();
        let mut m = 2 * vis;
        if self.observed_3d.is_some() {
            if self.weights.root_relative > 0.0 && self.root_visible() {
                m += 3 * vis;
            }
            if self.weights.consistency > 0.0 {
                m += 3 * vis;
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub max_iterations: usize,
    pub damping_init: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    pub step_tolerance: f64,
    pub relative_tolerance: f64,
    pub starts: usize,
    pub seed: u64,
    /// Iteration budget of each partial-keypoint stage before the full descent.
    pub stage_iterations: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            damping_init: 1e-3,
            damping_up: 10.0,
            damping_down: 0.1,
            step_tolerance: 1e-8,
            relative_tolerance: 1e-10,
            starts: 8,
            seed: 0,
            stage_iterations: 30,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), EstimatorError> {
        let bad = |m: &str| Err(EstimatorError::InvalidConfig(m.to_string()));
        if self.max_iterations == 0 || self.starts == 0 {
            return bad("max_iterations and starts must be positive");
        }
        if !(self.damping_init > 0.0 && self.step_tolerance > 0.0 && self.relative_tolerance > 0.0) {
            return bad("damping and tolerances must be positive");
        }
        if !(self.damping_up > 1.0) || !(self.damping_down > 0.0 && self.damping_down < 1.0) {
            return bad("damping_up must exceed 1 and damping_down must lie in (0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Converged,
    /// Damping grew without finding a decrease.
    Stalled,
    MaxIterations,
    Diverged,
}

impl FitStatus {
    pub fn is_success(self) -> bool {
        matches!(self, FitStatus::Converged | FitStatus::Stalled)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartDiagnostics {
    pub start: usize,
    pub initial_residual: f64,
    pub final_residual: f64,
    pub iterations: usize,
    pub status: FitStatus,
    /// Residual norm after every accepted step, starting with the initial one.
    #[serde(skip)]
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub robot: String,
    pub q: JointState,
    pub rotation_6d: [f64; 6],
    /// Row-major.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    /// Root depth; always `translation[2]`.
    pub depth: f64,
    /// Residual norm at the returned estimate.
    pub residual: f64,
    pub iterations: usize,
    pub status: FitStatus,
    pub underconstrained: bool,
    pub starts: Vec<StartDiagnostics>,
}

impl FitResult {
    fn from_parts(
        model: &RobotModel,
        q: JointState,
        r: &Matrix3<f64>,
        t: Vector3<f64>,
        residual: f64,
        iterations: usize,
        status: FitStatus,
    ) -> Result<Self, EstimatorError> {
        Ok(Self {
            robot: model.name().to_string(),
            q,
            rotation_6d: matrix_to_r6(r)?.to_array(),
            rotation: [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]),
            translation: [t.x, t.y, t.z],
            depth: t.z,
            residual,
            iterations,
            status,
            underconstrained: false,
            starts: Vec::new(),
        })
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.rotation[r][c])
    }

    pub fn translation_vector(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }
}

/// One line of a results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFit {
    pub scene_id: u64,
    pub result: FitResult,
}

/// A starting point for the solver in public units.
#[derive(Debug, Clone, PartialEq)]
pub struct StartPoint {
    pub q: JointState,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// The 24 rotations of the cube, ordered so each next one is as far as
/// possible from those already chosen. The first is the identity.
pub fn start_rotations() -> Vec<Matrix3<f64>> {
    let mut all = Vec::with_capacity(24);
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    for p in perms {
        for signs in 0..8u32 {
            let s = [0, 1, 2].map(|k| if signs >> k & 1 == 1 { -1.0 } else { 1.0 });
            let m = Matrix3::from_fn(|r, c| if c == p[r] { s[r] } else { 0.0 });
            if m.determinant() > 0.0 {
                all.push(m);
            }
        }
    }
    let mut chosen = vec![all.remove(0)];
    while !all.is_empty() {
        let (best, _) = all
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let d = chosen.iter().map(|c| geodesic_angle(c, m)).fold(f64::INFINITY, f64::min);
                (i, d)
            })
            .fold((0, f64::NEG_INFINITY), |acc, (i, d)| if d > acc.1 + 1e-9 { (i, d) } else { acc });
        chosen.push(all.remove(best));
    }
    chosen
}

fn start_rotation(seed: u64, start_index: usize) -> Matrix3<f64> {
    let fixed = start_rotations();
    if start_index < fixed.len() {
        return fixed[start_index];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(start_index as u64);
    let axis = loop {
        let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            break v;
        }
    };
    axis_angle(axis, rng.gen_range(0.0..180.0))
}

/// Deterministic starting guess for one multi-start slot.
pub fn initialize(problem: &FitProblem<'_>, start_index: usize, seed: u64) -> Result<StartPoint, EstimatorError> {
    let k = &problem.intrinsics;
    let projections: Vec<Projection> = problem
        .observed_2d
        .iter()
        .zip(&problem.visible)
        .filter(|(_, v)| **v)
        .map(|(uv, _)| Projection { uv: *uv, in_frame: true })
        .collect();
    if projections.is_empty() {
        return Err(EstimatorError::NoVisibleKeypoints);
    }
    let bbox = keypoint_bbox(&projections, 0.0, k)?;
    // a degenerate box (collinear or single point) still needs a finite seed
    let area = bbox.area().max(1.0);
    let z = coarse_depth(k, real_area(problem.model), area)?;
    let centroid = projections.iter().fold(Vector2::zeros(), |acc, p| acc + p.uv) / projections.len() as f64;
    let translation = k.back_project(&centroid, z);
    let q = problem
        .known_q
        .clone()
        .unwrap_or_else(|| JointState::midpoint(problem.model));
    Ok(StartPoint {
        q,
        rotation: start_rotation(seed, start_index),
        translation,
    })
}

struct Evaluation {
    residual: DVector<f64>,
    jacobian: DMatrix<f64>,
}

struct Solver<'p, 'm> {
    problem: &'p FitProblem<'m>,
    free_q: bool,
    dof: usize,
    min_depth: f64,
}

impl<'p, 'm> Solver<'p, 'm> {
    fn n_params(&self) -> usize {
        if self.free_q {
            self.dof + 9
        } else {
            9
        }
    }

    fn unpack(&self, x: &DVector<f64>, fixed_q: &[f64]) -> (Vec<f64>, Rotation6D, Vector3<f64>) {
        let off = if self.free_q { self.dof } else { 0 };
        let q = if self.free_q { x.as_slice()[..self.dof].to_vec() } else { fixed_q.to_vec() };
        let r6 = Rotation6D::from_slice(&x.as_slice()[off..off + 6]);
        let t = Vector3::new(x[off + 6], x[off + 7], x[off + 8]);
        (q, r6, t)
    }

    /// Residuals and Jacobian, or `None` when a keypoint is not in front of the camera.
    fn evaluate(&self, x: &DVector<f64>, fixed_q: &[f64], with_jacobian: bool) -> Result<Option<Evaluation>, EstimatorError> {
        let p = self.problem;
        let (q, r6, t) = self.unpack(x, fixed_q);
        let (points, full_jac) = holistic_jacobian_internal(p.model, &q, &r6, &t)?;
        if points.iter().any(|pt| !(pt.z > self.min_depth)) {
            return Ok(None);
        }
        // columns of the full (q, r6, t) Jacobian that are free parameters
        let col0 = if self.free_q { 0 } else { self.dof };
        let np = self.n_params();
        let dp = |i: usize, a: usize| full_jac.view((3 * i + a, col0), (1, np)).clone_owned();

        let m = p.residual_count();
        let mut r = DVector::zeros(m);
        let mut jac = if with_jacobian { DMatrix::zeros(m, np) } else { DMatrix::zeros(0, 0) };
        let mut row = 0;
        let k = &p.intrinsics;
        let w2 = p.weights.reprojection.sqrt();
        for i in 0..points.len() {
            if !p.visible[i] {
                continue;
            }
            let uv = k.project_point(&points[i]);
            let e = (uv - p.observed_2d[i]) * w2;
            r[row] = e.x;
            r[row + 1] = e.y;
            if with_jacobian {
                let jp = k.projection_jacobian(&points[i]) * w2;
                for a in 0..2 {
                    let mut acc = DMatrix::zeros(1, np);
                    for b in 0..3 {
                        acc += dp(i, b) * jp[(a, b)];
                    }
                    jac.row_mut(row + a).copy_from(&acc);
                }
            }
            row += 2;
        }
        if let Some(obs) = &p.observed_3d {
            let root = p.model.root_keypoint();
            if p.weights.root_relative > 0.0 && p.root_visible() {
                let w = p.weights.root_relative.sqrt();
                for i in 0..points.len() {
                    if !p.visible[i] {
                        continue;
                    }
                    let e = ((points[i] - t) - (obs.points[i] - obs.points[root])) * w;
                    for a in 0..3 {
                        r[row + a] = e[a];
                        if with_jacobian {
                            let mut d = dp(i, a);
                            let tcol = np - 3 + a;
                            d[tcol] -= 1.0;
                            jac.row_mut(row + a).copy_from(&(d * w));
                        }
                    }
                    row += 3;
                }
            }
            if p.weights.consistency > 0.0 {
                let w = p.weights.consistency.sqrt();
                let lift = Vector3::new(0.0, 0.0, t.z);
                for i in 0..points.len() {
                    if !p.visible[i] {
                        continue;
                    }
                    let e = (points[i] - (obs.points[i] + lift)) * w;
                    for a in 0..3 {
                        r[row + a] = e[a];
                        if with_jacobian {
                            let mut d = dp(i, a);
                            if a == 2 {
                                d[np - 1] -= 1.0;
                            }
                            jac.row_mut(row + a).copy_from(&(d * w));
                        }
                    }
                    row += 3;
                }
            }
        }
        debug_assert_eq!(row, m);
        Ok(Some(Evaluation { residual: r, jacobian: jac }))
    }

    /// Re-orthonormalizes the rotation block and projects joints onto their limits.
    fn project(&self, x: &mut DVector<f64>) -> Result<(), EstimatorError> {
        let off = if self.free_q { self.dof } else { 0 };
        let r6 = Rotation6D::from_slice(&x.as_slice()[off..off + 6]);
        let canonical = matrix_to_r6(&r6_to_matrix(&r6)?)?.to_array();
        for (k, v) in canonical.iter().enumerate() {
            x[off + k] = *v;
        }
        if self.free_q {
            for (s, joint) in self.problem.model.state_joints().enumerate() {
                let l = joint.effective_limits();
                let scale = joint.kind.to_internal_scale();
                x[s] = x[s].clamp(l.lower * scale, l.upper * scale);
            }
        }
        Ok(())
    }
}

/// Slides the translation away from the camera along its ray until every
/// keypoint lies in front of it.
fn push_in_front(solver: &Solver<'_, '_>, x: &mut DVector<f64>, fixed_q: &[f64]) -> Result<(), EstimatorError> {
    let off = if solver.free_q { solver.dof } else { 0 };
    for _ in 0..40 {
        if solver.evaluate(x, fixed_q, false)?.is_some() {
            return Ok(());
        }
        for a in 0..3 {
            x[off + 6 + a] *= 1.5;
        }
    }
    Ok(())
}

fn pack(free_q: bool, q_internal: &[f64], r: &Matrix3<f64>, t: &Vector3<f64>) -> Result<DVector<f64>, EstimatorError> {
    let mut v = Vec::new();
    if free_q {
        v.extend_from_slice(q_internal);
    }
    v.extend(matrix_to_r6(r)?.to_array());
    v.extend(t.iter());
    Ok(DVector::from_vec(v))
}

struct StartOutcome {
    x: DVector<f64>,
    diag: StartDiagnostics,
}

fn run_lm(
    solver: &Solver<'_, '_>,
    config: &FitConfig,
    mut x: DVector<f64>,
    fixed_q: &[f64],
    start: usize,
) -> Result<StartOutcome, EstimatorError> {
    solver.project(&mut x)?;
    push_in_front(solver, &mut x, fixed_q)?;
    let diverged = |x: DVector<f64>, iterations| StartOutcome {
        x,
        diag: StartDiagnostics {
            start,
            initial_residual: f64::INFINITY,
            final_residual: f64::INFINITY,
            iterations,
            status: FitStatus::Diverged,
            trace: Vec::new(),
        },
    };
    let Some(mut ev) = solver.evaluate(&x, fixed_q, true)? else {
        return Ok(diverged(x, 0));
    };
    let mut cost = ev.residual.norm_squared();
    let initial = cost.sqrt();
    let mut trace = vec![initial];
    let mut mu = config.damping_init;
    let mut status = FitStatus::MaxIterations;
    let mut iterations = 0;
    let np = solver.n_params();
    while iterations < config.max_iterations {
        iterations += 1;
        if cost == 0.0 {
            status = FitStatus::Converged;
            break;
        }
        let jtj = ev.jacobian.transpose() * &ev.jacobian;
        let g = ev.jacobian.transpose() * &ev.residual;
        let max_diag = (0..np).map(|i| jtj[(i, i)]).fold(0.0, f64::max).max(1e-12);
        let mut a = jtj.clone();
        for i in 0..np {
            a[(i, i)] += mu * (jtj[(i, i)] + 1e-9 * max_diag);
        }
        let Some(chol) = a.cholesky() else {
            mu *= config.damping_up;
            continue;
        };
        let delta = -chol.solve(&g);
        let mut x_new = &x + &delta;
        solver.project(&mut x_new)?;
        let accepted = match solver.evaluate(&x_new, fixed_q, false)? {
            Some(trial) => {
                let c = trial.residual.norm_squared();
                (c < cost).then_some(c)
            }
            None => None,
        };
        match accepted {
            Some(new_cost) => {
                let step = (&x_new - &x).norm();
                let rel = (cost - new_cost) / cost;
                x = x_new;
                cost = new_cost;
                trace.push(cost.sqrt());
                mu = (mu * config.damping_down).max(1e-15);
                ev = solver.evaluate(&x, fixed_q, true)?.expect("accepted point is valid");
                if step < config.step_tolerance || rel < config.relative_tolerance {
                    status = FitStatus::Converged;
                    break;
                }
            }
            None => {
                mu *= config.damping_up;
                if mu > 1e16 {
                    status = FitStatus::Stalled;
                    break;
                }
            }
        }
    }
    if !cost.is_finite() {
        return Ok(diverged(x, iterations));
    }
    Ok(StartOutcome {
        x,
        diag: StartDiagnostics {
            start,
            initial_residual: initial,
            final_residual: cost.sqrt(),
            iterations,
            status,
            trace,
        },
    })
}

fn solve(problem: &FitProblem<'_>, config: &FitConfig, free_q: bool) -> Result<FitResult, EstimatorError> {
    problem.validate()?;
    config.validate()?;
    let model = problem.model;
    let solver = Solver {
        problem,
        free_q,
        dof: model.dof(),
        min_depth: 1.0,
    };
    let fixed_q = match (&problem.known_q, free_q) {
        (Some(q), false) => q.to_internal(model)?,
        _ => Vec::new(),
    };
    let mut outcomes = Vec::with_capacity(config.starts);
    for s in 0..config.starts {
        let start = initialize(problem, s, config.seed)?;
        outcomes.push(descend(&solver, config, &start, &fixed_q, s, config.stage_iterations)?);
    }
    finish(&solver, problem, outcomes, &fixed_q)
}

/// One start. With free joints the descent is first continued over growing
/// sets of keypoints, ordered by how many joints move them. Joints that a stage
/// brings into play are tried at a few spread values and the best branch kept.
fn descend(
    solver: &Solver<'_, '_>,
    config: &FitConfig,
    start: &StartPoint,
    fixed_q: &[f64],
    index: usize,
    stage_iterations: usize,
) -> Result<StartOutcome, EstimatorError> {
    let problem = solver.problem;
    let model = problem.model;
    let q0 = start.q.to_internal(model)?;
    let mut x = pack(solver.free_q, &q0, &start.rotation, &start.translation)?;
    let mut spent = 0;
    if solver.free_q && stage_iterations > 0 {
        let depth: Vec<usize> = (0..model.n_keypoints()).map(|k| model.keypoint_joints(k).len()).collect();
        let mut levels: Vec<usize> = depth
            .iter()
            .zip(&problem.visible)
            .filter(|(_, v)| **v)
            .map(|(d, _)| *d)
            .collect();
        levels.sort_unstable();
        levels.dedup();
        let stage_config = FitConfig {
            max_iterations: stage_iterations,
            ..config.clone()
        };
        let mut active = vec![false; model.dof()];
        for level in levels {
            let visible: Vec<bool> = problem.visible.iter().zip(&depth).map(|(v, d)| *v && *d <= level).collect();
            if visible.iter().filter(|v| **v).count() < 3 {
                continue;
            }
            let mut fresh = Vec::new();
            for k in (0..visible.len()).filter(|&k| visible[k]) {
                for &j in model.keypoint_joints(k) {
                    if !active[j] {
                        active[j] = true;
                        fresh.push(j);
                    }
                }
            }
            let sub = FitProblem { visible, ..problem.clone() };
            let staged = Solver { problem: &sub, ..*solver };
            let mut best: Option<StartOutcome> = None;
            for candidate in branch_candidates(model, &x, &fresh) {
                let out = run_lm(&staged, &stage_config, candidate, fixed_q, index)?;
                spent += out.diag.iterations;
                if best.as_ref().map_or(true, |b| out.diag.final_residual < b.diag.final_residual) {
                    best = Some(out);
                }
            }
            match best {
                Some(b) if b.diag.status != FitStatus::Diverged => x = b.x,
                _ => break,
            }
        }
    }
    let mut out = run_lm(solver, config, x, fixed_q, index)?;
    out.diag.iterations += spent;
    Ok(out)
}

const BRANCH_CANDIDATES_MAX: usize = 16;

/// Copies of `x` with the `fresh` joints set to values spread over their
/// limits. Only the last fresh joint varies when the full grid is too large.
fn branch_candidates(model: &RobotModel, x: &DVector<f64>, fresh: &[usize]) -> Vec<DVector<f64>> {
    let grid = |j: usize| -> Vec<f64> {
        let spec = model.state_joint(j);
        let l = spec.effective_limits();
        if !l.is_bounded() {
            return vec![x[j]];
        }
        let scale = spec.kind.to_internal_scale();
        let m = if spec.kind == JointKind::Revolute { 4 } else { 3 };
        (0..m)
            .map(|i| (l.lower + (i as f64 + 0.5) * (l.upper - l.lower) / m as f64) * scale)
            .collect()
    };
    let mut grids: Vec<(usize, Vec<f64>)> = fresh.iter().map(|&j| (j, grid(j))).collect();
    if grids.iter().map(|(_, g)| g.len()).product::<usize>() > BRANCH_CANDIDATES_MAX {
        let last = grids.len() - 1;
        for (j, g) in grids.iter_mut().take(last) {
            *g = vec![x[*j]];
        }
    }
    let mut out = vec![x.clone()];
    for (j, values) in grids {
        out = out
            .iter()
            .flat_map(|base| {
                values.iter().map(move |&v| {
                    let mut c = base.clone();
                    c[j] = v;
                    c
                })
            })
            .collect();
    }
    out
}

fn finish(
    solver: &Solver<'_, '_>,
    problem: &FitProblem<'_>,
    outcomes: Vec<StartOutcome>,
    fixed_q: &[f64],
) -> Result<FitResult, EstimatorError> {
    let model = problem.model;
    // strict comparison keeps the lowest start index on ties
    let best = outcomes
        .iter()
        .enumerate()
        .fold(0, |b, (i, o)| if o.diag.final_residual < outcomes[b].diag.final_residual { i } else { b });
    let chosen = &outcomes[best];
    let (q_int, r6, t) = solver.unpack(&chosen.x, fixed_q);
    let q = match &problem.known_q {
        Some(q) if !solver.free_q => q.clone(),
        _ => JointState::from_internal(model, &q_int)?,
    };
    let all_diverged = outcomes.iter().all(|o| o.diag.status == FitStatus::Diverged);
    let mut result = FitResult::from_parts(
        model,
        q,
        &r6_to_matrix(&r6)?,
        t,
        chosen.diag.final_residual,
        chosen.diag.iterations,
        if all_diverged { FitStatus::Diverged } else { chosen.diag.status },
    )?;
    result.underconstrained = problem.residual_count() < solver.n_params();
    if result.underconstrained {
        log::warn!(
            "{} residuals for {} parameters; solution is not unique",
            problem.residual_count(),
            solver.n_params()
        );
    }
    result.starts = outcomes.into_iter().map(|o| o.diag).collect();
    Ok(result)
}

/// Jointly recovers `q`, `R` and `t`.
pub fn fit(problem: &FitProblem<'_>, config: &FitConfig) -> Result<FitResult, EstimatorError> {
    solve(problem, config, problem.known_q.is_none())
}

/// Recovers `R` and `t` with the joint state held at `problem.known_q`.
pub fn fit_known_joints(problem: &FitProblem<'_>, config: &FitConfig) -> Result<FitResult, EstimatorError> {
    if problem.known_q.is_none() {
        return Err(EstimatorError::MissingKnownJoints);
    }
    solve(problem, config, false)
}

/// Runs a single LM descent from an explicit start (joints free unless known).
pub fn fit_from(problem: &FitProblem<'_>, config: &FitConfig, start: &StartPoint) -> Result<FitResult, EstimatorError> {
    problem.validate()?;
    config.validate()?;
    let model = problem.model;
    let free_q = problem.known_q.is_none();
    let solver = Solver {
        problem,
        free_q,
        dof: model.dof(),
        min_depth: 1.0,
    };
    let fixed_q = if free_q { Vec::new() } else { problem.known_q.as_ref().expect("checked").to_internal(model)? };
    let outcome = descend(&solver, config, start, &fixed_q, 0, 0)?;
    finish(&solver, problem, vec![outcome], &fixed_q)
}

/// Residual norm of the problem at a given state.
pub fn residual_norm(problem: &FitProblem<'_>, q: &JointState, r: &Matrix3<f64>, t: &Vector3<f64>) -> Result<f64, EstimatorError> {
    problem.validate()?;
    let model = problem.model;
    let solver = Solver {
        problem,
        free_q: true,
        dof: model.dof(),
        min_depth: f64::NEG_INFINITY,
    };
    let x = pack(true, &q.to_internal(model)?, r, t)?;
    Ok(solver
        .evaluate(&x, &[], false)?
        .map(|e| e.residual.norm())
        .unwrap_or(f64::INFINITY))
}

/// Fuses two single-view results into view b's camera frame: joint states
/// are averaged, translations are averaged after mapping `a`'s into frame b,
/// and the rotation is taken from `b`.
pub fn fuse_two_view(a: &FitResult, b: &FitResult, a_to_b: &RigidPose) -> Result<FitResult, EstimatorError> {
    if a.robot != b.robot || a.q.len() != b.q.len() {
        return Err(EstimatorError::ModelMismatch(a.robot.clone(), b.robot.clone()));
    }
    crate::rotation::ensure_rotation(&a_to_b.rotation)?;
    let q = JointState::new(a.q.values().iter().zip(b.q.values()).map(|(x, y)| 0.5 * (x + y)).collect());
    let ta = a_to_b.apply(&a.translation_vector());
    let t = 0.5 * (ta + b.translation_vector());
    Ok(FitResult {
        robot: b.robot.clone(),
        q,
        rotation_6d: b.rotation_6d,
        rotation: b.rotation,
        translation: [t.x, t.y, t.z],
        depth: t.z,
        residual: b.residual,
        iterations: 0,
        status: if a.status.is_success() && b.status.is_success() { FitStatus::Converged } else { b.status },
        underconstrained: a.underconstrained && b.underconstrained,
        starts: Vec::new(),
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::kinematics::{holistic_keypoints, parse_robot_description};
    use crate::synth::{sample_scene, GenConfig};
    use approx::assert_relative_eq;

    pub(crate) fn arm() -> RobotModel {
        parse_robot_description(
            r#"<robot name="arm">
            <link name="base"/><link name="l1"/><link name="l2"/><link name="l3"/><link name="l4"/>
            <joint name="j1" type="revolute"><parent link="base"/><child link="l1"/>
              <origin xyz="0 0 300"/><axis xyz="0 0 1"/><limit lower="-170" upper="170"/></joint>
            <joint name="j2" type="revolute"><parent link="l1"/><child link="l2"/>
              <origin xyz="0 0 100"/><axis xyz="0 1 0"/><limit lower="-100" upper="100"/></joint>
            <joint name="j3" type="revolute"><parent link="l2"/><child link="l3"/>
              <origin xyz="0 0 400"/><axis xyz="0 1 0"/><limit lower="-120" upper="120"/></joint>
            <joint name="j4" type="prismatic"><parent link="l3"/><child link="l4"/>
              <origin xyz="0 0 300"/><axis xyz="0 0 1"/><limit lower="0" upper="80"/></joint>
            <keypoint name="k0" link="base" xyz="0 0 0"/>
            <keypoint name="k1" link="base" xyz="150 0 0"/>
            <keypoint name="k2" link="l1" xyz="0 0 50"/>
            <keypoint name="k3" link="l2" xyz="0 0 200"/>
            <keypoint name="k4" link="l3" xyz="0 0 0"/>
            <keypoint name="k5" link="l3" xyz="0 0 150"/>
            <keypoint name="k6" link="l4" xyz="0 0 0"/>
            <keypoint name="k7" link="l4" xyz="60 0 20"/>
            </robot>"#,
        )
        .unwrap()
    }

    fn gen() -> GenConfig {
        GenConfig {
            seed: 3,
            distance_mm: [1500.0, 2500.0],
            ..GenConfig::default()
        }
    }

    #[test]
    fn start_set_begins_with_identity_and_is_distinct() {
        let s = start_rotations();
        assert_eq!(s.len(), 24);
        assert_eq!(s[0], Matrix3::identity());
        for i in 0..24 {
            for j in 0..i {
                assert!(geodesic_angle(&s[i], &s[j]) > 1.0);
            }
        }
        assert_relative_eq!(geodesic_angle(&s[0], &s[1]), 180.0, epsilon = 1e-9);
    }

    #[test]
    fn initialization_is_deterministic_and_uses_area_depth() {
        let m = arm();
        let rec = sample_scene(&m, &gen(), 0).unwrap();
        let p = FitProblem::from_record(&m, &rec, false);
        let a = initialize(&p, 0, 0).unwrap();
        assert_eq!(a, initialize(&p, 0, 0).unwrap());
        assert_eq!(a.rotation, Matrix3::identity());
        assert_eq!(a.q, JointState::midpoint(&m));
        assert_eq!(initialize(&p, 30, 5).unwrap(), initialize(&p, 30, 5).unwrap());

        // a box whose area equals A_real·fx·fy/1000² seeds 1000 mm
        let k = CameraIntrinsics::centered(500.0, 500.0, 2000, 2000).unwrap();
        let side = (real_area(&m) * 500.0 * 500.0).sqrt() / 1000.0;
        let corners = [(0.0, 0.0), (side, 0.0), (0.0, side), (side, side)];
        let mut obs: Vec<Vector2<f64>> = corners.iter().map(|(u, v)| Vector2::new(800.0 + u, 800.0 + v)).collect();
        obs.resize(m.n_keypoints(), Vector2::new(800.0, 800.0));
        let p = FitProblem::new(&m, k, obs, vec![true; m.n_keypoints()]);
        assert_relative_eq!(initialize(&p, 0, 0).unwrap().translation.z, 1000.0, epsilon = 1e-9);
    }

    #[test]
    fn noiseless_recovery() {
        let m = arm();
        let mut ok = 0;
        for i in 0..10 {
            let rec = sample_scene(&m, &gen(), i).unwrap();
            let p = FitProblem::from_record(&m, &rec, true);
            let r = fit(&p, &FitConfig::default()).unwrap();
            assert_eq!(r.depth, r.translation[2]);
            let rot_err = geodesic_angle(&r.rotation_matrix(), &rec.rotation_matrix());
            let t_err = (r.translation_vector() - rec.translation_vector()).norm();
            let q_ok = r.q.values().iter().zip(&rec.q).all(|(a, b)| (a - b).abs() < 0.5);
            if rot_err < 0.5 && t_err < 1.0 && q_ok {
                ok += 1;
            }
            for s in &r.starts {
                assert!(s.trace.windows(2).all(|w| w[1] <= w[0]), "residual increased");
            }
        }
        assert!(ok >= 9, "{ok}/10 recovered");
    }

    #[test]
    fn start_at_solution_converges_immediately() {
        let m = arm();
        let rec = sample_scene(&m, &gen(), 4).unwrap();
        let p = FitProblem::from_record(&m, &rec, true);
        let start = StartPoint {
            q: rec.joint_state(),
            rotation: rec.rotation_matrix(),
            translation: rec.translation_vector(),
        };
        let r = fit_from(&p, &FitConfig::default(), &start).unwrap();
        assert!(r.iterations <= 2, "{} iterations", r.iterations);
        assert!(r.residual < 1e-6);
    }

    #[test]
    fn known_joints_recovery_and_validation() {
        let m = arm();
        let rec = sample_scene(&m, &gen(), 7).unwrap();
        let p = FitProblem::from_record(&m, &rec, false).with_known_q(rec.joint_state());
        let gt_res = residual_norm(&p, &rec.joint_state(), &rec.rotation_matrix(), &rec.translation_vector()).unwrap();
        assert!(gt_res < 1e-9);
        let r = fit_known_joints(&p, &FitConfig::default()).unwrap();
        assert_eq!(r.q, rec.joint_state());
        assert!(geodesic_angle(&r.rotation_matrix(), &rec.rotation_matrix()) < 0.1);
        assert!((r.translation_vector() - rec.translation_vector()).norm() < 0.5);

        let bad = FitProblem::from_record(&m, &rec, false).with_known_q(JointState::new(vec![0.0; 2]));
        assert!(matches!(fit_known_joints(&bad, &FitConfig::default()), Err(EstimatorError::KnownJointLength { .. })));
        let none = FitProblem::from_record(&m, &rec, false);
        assert!(matches!(fit_known_joints(&none, &FitConfig::default()), Err(EstimatorError::MissingKnownJoints)));
    }

    #[test]
    fn too_few_visible_keypoints_is_rejected() {
        let m = arm();
        let rec = sample_scene(&m, &gen(), 1).unwrap();
        let mut p = FitProblem::from_record(&m, &rec, false);
        p.visible = (0..m.n_keypoints()).map(|i| i < 3).collect();
        assert!(matches!(fit(&p, &FitConfig::default()), Err(EstimatorError::Underconstrained { visible: 3, required: 4 })));
    }

    #[test]
    fn fit_is_bit_deterministic() {
        let m = arm();
        let rec = sample_scene(&m, &GenConfig { noise_px: 2.0, noise_mm: 5.0, ..gen() }, 2).unwrap();
        let p = FitProblem::from_record(&m, &rec, true);
        let cfg = FitConfig { starts: 3, ..FitConfig::default() };
        assert_eq!(fit(&p, &cfg).unwrap(), fit(&p, &cfg).unwrap());
    }

    #[test]
    fn permuted_keypoints_give_the_same_fit() {
        let m = arm();
        let rec = sample_scene(&m, &gen(), 5).unwrap();
        let order = [3, 0, 7, 5, 1, 6, 2, 4];
        let pm = m.with_keypoint_order(&order).unwrap();
        let p = FitProblem::from_record(&m, &rec, true);
        let mut pp = FitProblem::new(
            &pm,
            rec.intrinsics,
            order.iter().map(|&i| p.observed_2d[i]).collect(),
            order.iter().map(|&i| p.visible[i]).collect(),
        );
        let o3 = p.observed_3d.as_ref().unwrap();
        pp = pp.with_observed_3d(KeypointSet::new(order.iter().map(|&i| o3.points[i]).collect(), KeypointFrame::RootRelative));
        let cfg = FitConfig { starts: 4, ..FitConfig::default() };
        let a = fit(&p, &cfg).unwrap();
        let b = fit(&pp, &cfg).unwrap();
        for (x, y) in a.q.values().iter().zip(b.q.values()) {
            assert!((x - y).abs() < 1e-9);
        }
        assert!((a.translation_vector() - b.translation_vector()).amax() < 1e-9);
        assert!((a.rotation_matrix() - b.rotation_matrix()).amax() < 1e-9);
    }

    fn result(q: Vec<f64>, t: [f64; 3], r: Matrix3<f64>) -> FitResult {
        let m = arm();
        let mut res = FitResult::from_parts(&m, JointState::new(q), &r, Vector3::from(t), 0.0, 1, FitStatus::Converged).unwrap();
        res.robot = "arm".into();
        res
    }

    #[test]
    fn two_view_fusion_examples() {
        let r = axis_angle(Vector3::new(1.0, 2.0, 0.5), 30.0);
        let a = result(vec![10.0, 0.0, 0.0, 5.0], [1.0, 2.0, 1000.0], r);
        let same = fuse_two_view(&a, &a, &RigidPose::identity()).unwrap();
        assert_eq!((same.q.clone(), same.translation, same.rotation), (a.q.clone(), a.translation, a.rotation));

        let b = result(vec![20.0, 0.0, 0.0, 5.0], [1.0, 2.0, 1000.0], Matrix3::identity());
        let f = fuse_two_view(&a, &b, &RigidPose::identity()).unwrap();
        assert_eq!(f.q.values()[0], 15.0);
        assert_eq!(f.rotation, b.rotation);

        let rel = RigidPose::new(axis_angle(Vector3::y(), 20.0), Vector3::new(100.0, 0.0, 50.0));
        let tb = rel.apply(&a.translation_vector());
        let b2 = result(b.q.values().to_vec(), [tb.x, tb.y, tb.z], Matrix3::identity());
        let f2 = fuse_two_view(&a, &b2, &rel).unwrap();
        assert!((f2.translation_vector() - tb).norm() < 1e-9);

        let mut other = b.clone();
        other.robot = "other".into();
        assert!(matches!(fuse_two_view(&a, &other, &rel), Err(EstimatorError::ModelMismatch(..))));
    }

    #[test]
    fn result_fk_matches_root_anchoring() {
        let m = arm();
        let rec = sample_scene(&m, &gen(), 8).unwrap();
        let p = FitProblem::from_record(&m, &rec, true);
        let r = fit(&p, &FitConfig::default()).unwrap();
        let fk = holistic_keypoints(&m, &r.q, &r.rotation_matrix(), &r.translation_vector()).unwrap();
        assert!((fk.points[m.root_keypoint()] - r.translation_vector()).norm() < 1e-9);
    }
}
