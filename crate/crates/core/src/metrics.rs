//! ADD/AUC evaluation, mean errors and truncation-stratified tables.
//!
//! All reductions run sequentially in record order so that reports are
//! bit-reproducible regardless of how records were produced.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fmt::sig6;
use crate::estimator::FitResult;
use crate::kinematics::{holistic_keypoints, JointKind, KeypointFrame, KeypointSet, RobotModel};
use crate::rotation::{euler_angle_errors, geodesic_angle, wrapped_angle_diff};
use crate::synth::SceneRecord;

pub const DEFAULT_AUC_THRESHOLD: f64 = 100.0;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("keypoint count mismatch: {0} vs {1}")]
    CountMismatch(usize, usize),
    #[error("expected fk_absolute keypoints")]
    WrongFrame,
    #[error("empty input to {0}")]
    Empty(&'static str),
    #[error("scene {scene_id}: {detail}")]
    SceneMismatch { scene_id: u64, detail: String },
    #[error("invalid value {value} in {what}")]
    InvalidValue { what: &'static str, value: f64 },
}

/// Mean per-keypoint Euclidean distance, mm.
pub fn add_distance(pred: &KeypointSet, gt: &KeypointSet) -> Result<f64, MetricsError> {
    if pred.frame != KeypointFrame::FkAbsolute || gt.frame != KeypointFrame::FkAbsolute {
        return Err(MetricsError::WrongFrame);
    }
    if pred.len() != gt.len() {
        return Err(MetricsError::CountMismatch(pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Err(MetricsError::Empty("add_distance"));
    }
    let sum: f64 = pred.points.iter().zip(&gt.points).map(|(a, b)| (a - b).norm()).sum();
    Ok(sum / pred.len() as f64)
}

/// Area under the ADD accuracy curve on `[0, max]`, in percent.
///
/// The empirical curve `t ↦ |{v < t}| / n` is a step function, so its integral
/// is `Σ (max − min(v, max)) / n`.
pub fn auc(values: &[f64], max: f64) -> Result<f64, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Empty("auc"));
    }
    if !(max > 0.0 && max.is_finite()) {
        return Err(MetricsError::InvalidValue { what: "auc threshold", value: max });
    }
    let mut sorted = values.to_vec();
    for &v in &sorted {
        if !(v >= 0.0) {
            return Err(MetricsError::InvalidValue { what: "ADD", value: v });
        }
    }
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let covered: f64 = sorted.iter().map(|&v| (max - v.min(max)).max(0.0)).sum();
    Ok(covered / max / n * 100.0)
}

fn mean(values: &[f64], what: &'static str) -> Result<f64, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Empty(what));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

pub fn mean_add(values: &[f64]) -> Result<f64, MetricsError> {
    mean(values, "mean_add")
}

pub fn median(values: &[f64]) -> Result<f64, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Empty("median"));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    Ok(if s.len() % 2 == 1 { s[m] } else { 0.5 * (s[m - 1] + s[m]) })
}

/// Per-kind joint error means; a kind with no joints is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointErrorMeans {
    /// Degrees.
    pub revolute: Option<f64>,
    /// Millimeters.
    pub prismatic: Option<f64>,
}

/// Averages absolute joint errors separately for revolute and prismatic joints.
pub fn mean_joint_error(errors: &[(JointKind, f64)]) -> Result<JointErrorMeans, MetricsError> {
    if errors.is_empty() {
        return Err(MetricsError::Empty("mean_joint_error"));
    }
    let pick = |kind: JointKind| -> Vec<f64> {
        errors.iter().filter(|(k, _)| *k == kind).map(|(_, e)| e.abs()).collect()
    };
    let rev = pick(JointKind::Revolute);
    let pri = pick(JointKind::Prismatic);
    Ok(JointErrorMeans {
        revolute: (!rev.is_empty()).then(|| rev.iter().sum::<f64>() / rev.len() as f64),
        prismatic: (!pri.is_empty()).then(|| pri.iter().sum::<f64>() / pri.len() as f64),
    })
}

pub fn mean_rotation_error(errors: &[f64]) -> Result<f64, MetricsError> {
    mean(errors, "mean_rotation_error")
}

pub fn mean_depth_error(errors: &[f64]) -> Result<f64, MetricsError> {
    mean(errors, "mean_depth_error")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub scene_id: u64,
    /// Millimeters.
    pub add: f64,
    /// Signed per-joint errors in public units, with their kinds.
    pub joint_errors: Vec<(JointKind, f64)>,
    /// Absolute Euler-angle errors, degrees.
    pub rotation_errors: [f64; 3],
    /// Geodesic rotation error, degrees.
    pub geodesic_error: f64,
    /// `|d̂ − d|`, mm.
    pub depth_error: f64,
    pub translation_error: f64,
    pub inframe: usize,
}

impl EvalRecord {
    /// Scores a fit against its scene's ground truth. Revolute joint errors
    /// are wrapped to [-180°, 180°].
    pub fn from_fit(model: &RobotModel, scene: &SceneRecord, fit: &FitResult) -> Result<Self, MetricsError> {
        let mismatch = |detail: String| MetricsError::SceneMismatch {
            scene_id: scene.scene_id,
            detail,
        };
        if fit.robot != scene.robot || fit.q.len() != scene.q.len() {
            return Err(mismatch(format!("result for robot {} with {} joints", fit.robot, fit.q.len())));
        }
        let r_hat = fit.rotation_matrix();
        let r = scene.rotation_matrix();
        let pred = holistic_keypoints(model, &fit.q, &r_hat, &fit.translation_vector())
            .map_err(|e| mismatch(e.to_string()))?;
        let joint_errors = model
            .joint_kinds()
            .into_iter()
            .zip(fit.q.values().iter().zip(&scene.q))
            .map(|(kind, (p, g))| {
                let e = match kind {
                    JointKind::Revolute => {
                        let d = wrapped_angle_diff(*p, *g);
                        if (p - g).rem_euclid(360.0) < 180.0 { d } else { -d }
                    }
                    _ => p - g,
                };
                (kind, e)
            })
            .collect();
        Ok(Self {
            scene_id: scene.scene_id,
            add: add_distance(&pred, &scene.fk_keypoints())?,
            joint_errors,
            rotation_errors: euler_angle_errors(&r_hat, &r).errors,
            geodesic_error: geodesic_angle(&r_hat, &r),
            depth_error: (fit.depth - scene.depth).abs(),
            translation_error: (fit.translation_vector() - scene.translation_vector()).norm(),
            inframe: scene.inframe_count,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StratumRow {
    pub inframe_kps: usize,
    pub images: usize,
    pub auc: f64,
    pub mean_add: f64,
}

/// Groups records by in-frame keypoint count, most visible first.
pub fn stratify_by_inframe(records: &[EvalRecord]) -> Vec<StratumRow> {
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in records {
        groups.entry(r.inframe).or_default().push(r.add);
    }
    groups
        .into_iter()
        .rev()
        .map(|(k, adds)| StratumRow {
            inframe_kps: k,
            images: adds.len(),
            auc: auc(&adds, DEFAULT_AUC_THRESHOLD).expect("non-empty group"),
            mean_add: mean_add(&adds).expect("non-empty group"),
        })
        .collect()
}

pub fn strata_csv(rows: &[StratumRow]) -> String {
    let mut s = String::from("inframe_kps,images,auc,mean_add\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.inframe_kps, r.images, sig6(r.auc), sig6(r.mean_add));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenes: usize,
    pub auc: f64,
    pub mean_add: f64,
    pub median_add: f64,
    pub mean_joint_error_revolute: Option<f64>,
    pub mean_joint_error_prismatic: Option<f64>,
    pub mean_rotation_error: f64,
    pub mean_geodesic_error: f64,
    pub mean_translation_error: f64,
    pub mean_depth_error: f64,
    pub strata: Vec<StratumRow>,
}

impl MetricsReport {
    pub fn from_records(records: &[EvalRecord]) -> Result<Self, MetricsError> {
        if records.is_empty() {
            return Err(MetricsError::Empty("metrics report"));
        }
        let adds: Vec<f64> = records.iter().map(|r| r.add).collect();
        let joints: Vec<(JointKind, f64)> =
            records.iter().flat_map(|r| r.joint_errors.iter().copied()).collect();
        let joint_means = if joints.is_empty() {
            JointErrorMeans { revolute: None, prismatic: None }
        } else {
            mean_joint_error(&joints)?
        };
        let euler: Vec<f64> = records.iter().flat_map(|r| r.rotation_errors).collect();
        let collect = |f: fn(&EvalRecord) -> f64| records.iter().map(f).collect::<Vec<_>>();
        Ok(Self {
            scenes: records.len(),
            auc: auc(&adds, DEFAULT_AUC_THRESHOLD)?,
            mean_add: mean_add(&adds)?,
            median_add: median(&adds)?,
            mean_joint_error_revolute: joint_means.revolute,
            mean_joint_error_prismatic: joint_means.prismatic,
            mean_rotation_error: mean_rotation_error(&euler)?,
            mean_geodesic_error: mean(&collect(|r| r.geodesic_error), "geodesic")?,
            mean_translation_error: mean(&collect(|r| r.translation_error), "translation")?,
            mean_depth_error: mean_depth_error(&collect(|r| r.depth_error))?,
            strata: stratify_by_inframe(records),
        })
    }

    /// Flat `key = value` text; absent per-kind means print as `nan`.
    pub fn to_kv(&self) -> String {
        let opt = |v: Option<f64>| v.map(sig6).unwrap_or_else(|| "nan".into());
        let mut s = String::new();
        let _ = writeln!(s, "scenes = {}", self.scenes);
        let _ = writeln!(s, "auc = {}", sig6(self.auc));
        let _ = writeln!(s, "mean_add = {}", sig6(self.mean_add));
        let _ = writeln!(s, "median_add = {}", sig6(self.median_add));
        let _ = writeln!(s, "mean_joint_error_revolute = {}", opt(self.mean_joint_error_revolute));
        let _ = writeln!(s, "mean_joint_error_prismatic = {}", opt(self.mean_joint_error_prismatic));
        let _ = writeln!(s, "mean_rotation_error = {}", sig6(self.mean_rotation_error));
        let _ = writeln!(s, "mean_geodesic_error = {}", sig6(self.mean_geodesic_error));
        let _ = writeln!(s, "mean_translation_error = {}", sig6(self.mean_translation_error));
        let _ = writeln!(s, "mean_depth_error = {}", sig6(self.mean_depth_error));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn set(points: &[[f64; 3]]) -> KeypointSet {
        KeypointSet::new(
            points.iter().map(|p| Vector3::from(*p)).collect(),
            KeypointFrame::FkAbsolute,
        )
    }

    fn riemann_auc(values: &[f64], max: f64, steps: usize) -> f64 {
        let dt = max / steps as f64;
        let n = values.len() as f64;
        (0..steps)
            .map(|i| {
                let t = (i as f64 + 0.5) * dt;
                values.iter().filter(|&&v| v < t).count() as f64 / n * dt
            })
            .sum::<f64>()
            / max
            * 100.0
    }

    #[test]
    fn add_examples() {
        let a = set(&[[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]]);
        assert_eq!(add_distance(&a, &a).unwrap(), 0.0);
        let b = set(&[[0.0, 50.0, 0.0], [10.0, 50.0, 0.0]]);
        assert_eq!(add_distance(&a, &b).unwrap(), 50.0);
        let c = set(&[[30.0, 0.0, 0.0], [10.0, 0.0, 50.0]]);
        assert_eq!(add_distance(&a, &c).unwrap(), 40.0);
        assert_eq!(add_distance(&a, &set(&[[0.0; 3]])), Err(MetricsError::CountMismatch(2, 1)));
        let lifted = KeypointSet::new(a.points.clone(), KeypointFrame::LiftedAbsolute);
        assert_eq!(add_distance(&a, &lifted), Err(MetricsError::WrongFrame));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.0; 10], 100.0).unwrap(), 100.0);
        assert_eq!(auc(&[50.0; 10], 100.0).unwrap(), 50.0);
        assert_eq!(auc(&[100.0, 150.0, 1e9], 100.0).unwrap(), 0.0);
        assert_eq!(auc(&[], 100.0), Err(MetricsError::Empty("auc")));
        assert!(auc(&[-1.0], 100.0).is_err());
    }

    #[test]
    fn mean_examples() {
        assert_eq!(mean_add(&[7.0]).unwrap(), 7.0);
        assert_eq!(mean_add(&[10.0, 30.0]).unwrap(), 20.0);
        assert!(mean_add(&[]).is_err());
        let m = mean_joint_error(&[
            (JointKind::Revolute, 2.0),
            (JointKind::Revolute, -4.0),
            (JointKind::Prismatic, 3.0),
        ])
        .unwrap();
        assert_eq!((m.revolute, m.prismatic), (Some(3.0), Some(3.0)));
        let only_rev = mean_joint_error(&[(JointKind::Revolute, 1.0)]).unwrap();
        assert_eq!(only_rev.prismatic, None);
        assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]).unwrap(), 2.5);
    }

    fn record(id: u64, add: f64, inframe: usize) -> EvalRecord {
        EvalRecord {
            scene_id: id,
            add,
            joint_errors: vec![(JointKind::Revolute, 1.0)],
            rotation_errors: [0.0; 3],
            geodesic_error: 0.0,
            depth_error: 0.0,
            translation_error: 0.0,
            inframe,
        }
    }

    #[test]
    fn stratification_examples() {
        let all = vec![record(0, 5.0, 7), record(1, 15.0, 7)];
        assert_eq!(stratify_by_inframe(&all).len(), 1);

        let mixed = vec![record(0, 0.0, 7), record(1, 100.0, 5), record(2, 0.0, 7), record(3, 100.0, 5)];
        let rows = stratify_by_inframe(&mixed);
        assert_eq!(
            rows,
            vec![
                StratumRow { inframe_kps: 7, images: 2, auc: 100.0, mean_add: 0.0 },
                StratumRow { inframe_kps: 5, images: 2, auc: 0.0, mean_add: 100.0 },
            ]
        );
        assert_eq!(strata_csv(&rows), "inframe_kps,images,auc,mean_add\n7,2,100,0\n5,2,0,100\n");
    }

    #[test]
    fn report_text() {
        let r = MetricsReport::from_records(&[record(0, 50.0, 7), record(1, 50.0, 7)]).unwrap();
        let kv = r.to_kv();
        assert!(kv.contains("auc = 50\n"));
        assert!(kv.contains("mean_add = 50\n"));
        assert!(kv.contains("mean_joint_error_prismatic = nan\n"));
        assert!(MetricsReport::from_records(&[]).is_err());
    }

    #[test]
    fn closed_form_matches_riemann_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let n = rng.gen_range(1..60);
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..160.0)).collect();
            let exact = auc(&v, 100.0).unwrap();
            assert!((exact - riemann_auc(&v, 100.0, 100_000)).abs() < 0.01);
        }
    }

    proptest! {
        #[test]
        fn auc_non_increasing(v in prop::collection::vec(0.0..200.0f64, 1..30), idx in 0usize..30, bump in 0.0..50.0f64) {
            let i = idx % v.len();
            let mut w = v.clone();
            w[i] += bump;
            prop_assert!(auc(&w, 100.0).unwrap() <= auc(&v, 100.0).unwrap() + 1e-12);
        }

        #[test]
        fn add_triangle_inequality(
            a in prop::collection::vec(prop::array::uniform3(-500.0..500.0f64), 1..8),
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut jitter = |p: &[f64; 3]| [0, 1, 2].map(|k| p[k] + rng.gen_range(-100.0..100.0));
            let b: Vec<[f64; 3]> = a.iter().map(&mut jitter).collect();
            let c: Vec<[f64; 3]> = a.iter().map(&mut jitter).collect();
            let (sa, sb, sc) = (set(&a), set(&b), set(&c));
            let ac = add_distance(&sa, &sc).unwrap();
            let ab = add_distance(&sa, &sb).unwrap();
            let bc = add_distance(&sb, &sc).unwrap();
            prop_assert!(ac <= ab + bc + 1e-9);
        }

        #[test]
        fn aggregate_auc_within_strata(adds in prop::collection::vec((0.0..150.0f64, 4usize..8), 1..40)) {
            let recs: Vec<EvalRecord> = adds.iter().enumerate().map(|(i, (a, k))| record(i as u64, *a, *k)).collect();
            let rows = stratify_by_inframe(&recs);
            let all = auc(&recs.iter().map(|r| r.add).collect::<Vec<_>>(), 100.0).unwrap();
            let lo = rows.iter().map(|r| r.auc).fold(f64::INFINITY, f64::min);
            let hi = rows.iter().map(|r| r.auc).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(all >= lo - 1e-9 && all <= hi + 1e-9);
            prop_assert_eq!(rows.iter().map(|r| r.images).sum::<usize>(), recs.len());
        }
    }

    #[test]
    fn scoring_a_fit_against_its_scene() {
        use crate::estimator::{fit, FitConfig, FitProblem};
        use crate::synth::{sample_scene, GenConfig};
        let model = crate::estimator::tests::arm();
        let scene = sample_scene(&model, &GenConfig::default(), 3).unwrap();
        let problem = FitProblem::from_record(&model, &scene, true);
        let mut result = fit(&problem, &FitConfig::default()).unwrap();
        let rec = EvalRecord::from_fit(&model, &scene, &result).unwrap();
        assert!(rec.add < 1e-6 && rec.geodesic_error < 1e-6 && rec.translation_error < 1e-6);
        assert_eq!(rec.inframe, scene.inframe_count);

        result.q.0[0] = scene.q[0] + 350.0;
        let rec = EvalRecord::from_fit(&model, &scene, &result).unwrap();
        assert!((rec.joint_errors[0].1 + 10.0).abs() < 1e-6);

        result.robot = "other".into();
        assert!(matches!(
            EvalRecord::from_fit(&model, &scene, &result),
            Err(MetricsError::SceneMismatch { scene_id: 3, .. })
        ));
    }

}
