use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use holopose::estimator::{fit as fit_scene, fit_known_joints, FitProblem, FitStatus, SceneFit};
use holopose::fmt::sig6;
use holopose::kinematics::{base_pose_from_root, parse_robot_description, RobotModel};
use holopose::losses::{evaluate_losses, mask_consistency, GroundTruth, LossContext, LossWeights, Prediction};
use holopose::metrics::{strata_csv, EvalRecord, MetricsReport};
use holopose::render::{pose_capsules, rasterize_silhouette, read_pgm, BinaryMask};
use holopose::rotation::Rotation6D;
use holopose::synth::{
    atomic_write, dataset_to_string, parse_lines, read_dataset, sample_scene, scene_mask, validate_against_model,
    write_dataset, write_masks, GenConfig, SceneRecord,
};
use rayon::prelude::*;

use crate::config::{load_or_default, FitSettings};
use crate::error::CliError;
use crate::manifest::RunManifest;
use crate::{EvalArgs, FitArgs, GenerateArgs, InspectArgs, ReportArgs};

pub fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(CliError::runtime)
}

fn load_robot(path: &Path) -> Result<RobotModel, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read robot file {}: {e}", path.display())))?;
    parse_robot_description(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn load_dataset(path: &Path, model: &RobotModel) -> Result<Vec<SceneRecord>, CliError> {
    let records = read_dataset(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    for r in &records {
        validate_against_model(r, model).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    }
    Ok(records)
}

fn load_results(path: &Path) -> Result<Vec<SceneFit>, CliError> {
    let f = fs::File::open(path)
        .map_err(|e| CliError::Usage(format!("cannot read results {}: {e}", path.display())))?;
    let lines = parse_lines::<SceneFit, _>(BufReader::new(f))
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Ok(lines.into_iter().map(|(_, r)| r).collect())
}

/// Logs `label done/total` roughly every tenth of the work.
struct Progress {
    label: &'static str,
    total: usize,
    done: AtomicUsize,
}

impl Progress {
    fn new(label: &'static str, total: usize) -> Self {
        Self {
            label,
            total,
            done: AtomicUsize::new(0),
        }
    }

    fn tick(&self) {
        let n = self.done.fetch_add(1, Ordering::Relaxed) + 1;
        let step = (self.total / 10).max(1);
        if n % step == 0 || n == self.total {
            log::info!("{} {n}/{}", self.label, self.total);
        }
    }
}

pub fn generate(args: GenerateArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let model = load_robot(&args.robot)?;
    let mut config: GenConfig = load_or_default(args.config.as_deref())?;
    args.overrides.apply(&mut config);
    config.validate().map_err(CliError::usage)?;
    let progress = Progress::new("generate", config.scenes as usize);
    let mut records = (0..config.scenes)
        .into_par_iter()
        .map(|i| {
            let r = sample_scene(&model, &config, i);
            progress.tick();
            r
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(CliError::runtime)?;
    if config.with_masks {
        write_masks(&model, &mut records, &args.out, config.mask_corruption).map_err(CliError::runtime)?;
    }
    write_dataset(&records, &args.out).map_err(CliError::runtime)?;
    RunManifest::new("generate", Some(config.seed), &config)
        .input("robot", &args.robot)
        .output(&args.out)
        .finish(started, &args.out)
}

pub fn fit(args: FitArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let model = load_robot(&args.robot)?;
    let mut settings: FitSettings = load_or_default(args.config.as_deref())?;
    args.overrides.apply(&mut settings);
    settings.solver.validate().map_err(CliError::usage)?;
    let records = load_dataset(&args.dataset, &model)?;
    let progress = Progress::new("fit", records.len());
    let mut fits = records
        .par_iter()
        .map(|rec| {
            let problem = FitProblem::from_record(&model, rec, settings.use_3d).with_weights(settings.weights);
            let result = if settings.known_joints {
                fit_known_joints(&problem.with_known_q(rec.joint_state()), &settings.solver)
            } else {
                fit_scene(&problem, &settings.solver)
            };
            progress.tick();
            result
                .map(|result| SceneFit {
                    scene_id: rec.scene_id,
                    result,
                })
                .map_err(|e| CliError::Runtime(format!("scene {}: {e}", rec.scene_id)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    fits.sort_by_key(|f| f.scene_id);
    atomic_write(&args.out, dataset_to_string(&fits).as_bytes()).map_err(CliError::runtime)?;
    RunManifest::new("fit", Some(settings.solver.seed), &settings)
        .input("robot", &args.robot)
        .input("dataset", &args.dataset)
        .output(&args.out)
        .finish(started, &args.out)
}

fn list(ids: &[u64]) -> String {
    const SHOWN: usize = 20;
    let mut s = ids.iter().take(SHOWN).map(u64::to_string).collect::<Vec<_>>().join(", ");
    if ids.len() > SHOWN {
        let _ = write!(s, ", … ({} more)", ids.len() - SHOWN);
    }
    s
}

/// Pairs every scene with its fit, in scene-id order. Both sides must hold
/// the same ids exactly once.
fn pair_by_id<'a>(
    records: &'a [SceneRecord],
    fits: &'a [SceneFit],
) -> Result<Vec<(&'a SceneRecord, &'a SceneFit)>, CliError> {
    let mut by_id: BTreeMap<u64, &SceneFit> = BTreeMap::new();
    let mut duplicates = BTreeSet::new();
    for f in fits {
        if by_id.insert(f.scene_id, f).is_some() {
            duplicates.insert(f.scene_id);
        }
    }
    let scene_ids: BTreeSet<u64> = records.iter().map(|r| r.scene_id).collect();
    let no_result: Vec<u64> = scene_ids.iter().filter(|id| !by_id.contains_key(id)).copied().collect();
    let no_scene: Vec<u64> = by_id.keys().filter(|id| !scene_ids.contains(id)).copied().collect();
    let mut problems = Vec::new();
    if !no_result.is_empty() {
        problems.push(format!("scenes without results: {}", list(&no_result)));
    }
    if !no_scene.is_empty() {
        problems.push(format!("results without scenes: {}", list(&no_scene)));
    }
    if !duplicates.is_empty() {
        problems.push(format!("duplicate results: {}", list(&duplicates.into_iter().collect::<Vec<_>>())));
    }
    if !problems.is_empty() {
        return Err(CliError::Usage(format!("scene id mismatch; {}", problems.join("; "))));
    }
    if records.is_empty() {
        return Err(CliError::usage("no scenes in common between dataset and results"));
    }
    let mut pairs: Vec<_> = records.iter().map(|r| (r, by_id[&r.scene_id])).collect();
    pairs.sort_by_key(|(r, _)| r.scene_id);
    Ok(pairs)
}

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let model = load_robot(&args.robot)?;
    let records = load_dataset(&args.dataset, &model)?;
    let fits = load_results(&args.results)?;
    let pairs = pair_by_id(&records, &fits)?;
    let evals = pairs
        .iter()
        .map(|(scene, f)| EvalRecord::from_fit(&model, scene, &f.result).map_err(CliError::usage))
        .collect::<Result<Vec<_>, _>>()?;
    let report = MetricsReport::from_records(&evals).map_err(CliError::runtime)?;
    let csv = args.csv.clone().unwrap_or_else(|| {
        let mut name = args.out.file_name().unwrap_or_default().to_os_string();
        name.push(".strata.csv");
        args.out.with_file_name(name)
    });
    atomic_write(&args.out, report.to_kv().as_bytes()).map_err(CliError::runtime)?;
    atomic_write(&csv, strata_csv(&report.strata).as_bytes()).map_err(CliError::runtime)?;
    RunManifest::new("eval", None, &serde_json::json!({}))
        .input("robot", &args.robot)
        .input("dataset", &args.dataset)
        .input("results", &args.results)
        .output(&args.out)
        .output(&csv)
        .finish(started, &args.out)
}

/// The scene's segmentation mask: its mask file when present, otherwise the
/// clean ground-truth silhouette.
fn segmentation(model: &RobotModel, dataset: &Path, scene: &SceneRecord) -> Result<BinaryMask, CliError> {
    match &scene.mask {
        Some(rel) => {
            let path: PathBuf = dataset.parent().unwrap_or(Path::new("")).join(rel);
            let f = fs::File::open(&path)
                .map_err(|e| CliError::Usage(format!("cannot read mask {}: {e}", path.display())))?;
            read_pgm(BufReader::new(f)).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
        }
        None => scene_mask(model, scene, 0.0).map_err(CliError::runtime),
    }
}

pub fn report(args: ReportArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let model = load_robot(&args.robot)?;
    let mut weights: LossWeights = load_or_default(args.config.as_deref())?;
    args.apply(&mut weights);
    let records = load_dataset(&args.dataset, &model)?;
    let fits = load_results(&args.results)?;
    let pairs = pair_by_id(&records, &fits)?;
    let blocks = pairs
        .par_iter()
        .map(|(scene, f)| {
            let r = &f.result;
            let k = scene.intrinsics;
            let ctx = LossContext {
                model: &model,
                intrinsics: &k,
                weights,
            };
            let pred = Prediction {
                q: r.q.clone(),
                r6: Rotation6D::from_array(r.rotation_6d),
                translation: r.translation_vector(),
                depth: r.depth,
                root_relative: scene.observations_3d(),
            };
            let gt = GroundTruth {
                q: scene.joint_state(),
                rotation: scene.rotation_matrix(),
                translation: scene.translation_vector(),
                depth: scene.depth,
                fk: scene.fk_keypoints(),
                lifted: scene.lifted_keypoints(),
            };
            let fail = |e: &dyn std::fmt::Display| CliError::Runtime(format!("scene {}: {e}", scene.scene_id));
            let pose = base_pose_from_root(&model, &r.q, &r.rotation_matrix(), &r.translation_vector())
                .map_err(|e| fail(&e))?;
            let caps = pose_capsules(&model, &r.q, &pose).map_err(|e| fail(&e))?;
            let rendered = rasterize_silhouette(&caps, &k).mask;
            let mc = mask_consistency(&rendered, &segmentation(&model, &args.dataset, scene)?)
                .map_err(|e| fail(&e))?
                .loss;
            let losses = evaluate_losses(&ctx, &pred, &gt, mc).map_err(|e| fail(&e))?;
            Ok(format!("scene_id = {}\n{}", scene.scene_id, losses.to_kv()))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    atomic_write(&args.out, blocks.join("\n").as_bytes()).map_err(CliError::runtime)?;
    RunManifest::new("report", None, &weights)
        .input("robot", &args.robot)
        .input("dataset", &args.dataset)
        .input("results", &args.results)
        .output(&args.out)
        .finish(started, &args.out)
}

fn dataset_summary(records: &[SceneRecord]) -> String {
    let mut s = String::new();
    let robots: BTreeSet<&str> = records.iter().map(|r| r.robot.as_str()).collect();
    let _ = writeln!(s, "scenes = {}", records.len());
    let _ = writeln!(s, "robot = {}", robots.into_iter().collect::<Vec<_>>().join(","));
    let _ = writeln!(s, "truncated = {}", records.iter().filter(|r| r.truncated).count());
    let _ = writeln!(s, "noisy = {}", records.iter().filter(|r| r.observed_2d.is_some()).count());
    let _ = writeln!(s, "masks = {}", records.iter().filter(|r| r.mask.is_some()).count());
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for r in records {
        *counts.entry(r.inframe_count).or_default() += 1;
    }
    for (k, n) in counts.iter().rev() {
        let _ = writeln!(s, "inframe_{k} = {n}");
    }
    s
}

fn results_summary(fits: &[SceneFit]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "results = {}", fits.len());
    for status in [FitStatus::Converged, FitStatus::Stalled, FitStatus::MaxIterations, FitStatus::Diverged] {
        let n = fits.iter().filter(|f| f.result.status == status).count();
        let name = serde_json::to_value(status).expect("status serializes");
        let _ = writeln!(s, "{} = {n}", name.as_str().unwrap_or_default());
    }
    if !fits.is_empty() {
        let mean = fits.iter().map(|f| f.result.residual).sum::<f64>() / fits.len() as f64;
        let _ = writeln!(s, "mean_residual = {}", sig6(mean));
    }
    s
}

pub fn inspect(args: InspectArgs) -> Result<(), CliError> {
    let text = if let Some(p) = &args.robot {
        load_robot(p)?.canonical_dump()
    } else if let Some(p) = &args.dataset {
        let records = read_dataset(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
        dataset_summary(&records)
    } else if let Some(p) = &args.results {
        results_summary(&load_results(p)?)
    } else {
        unreachable!("clap requires one input")
    };
    print!("{text}");
    Ok(())
}
