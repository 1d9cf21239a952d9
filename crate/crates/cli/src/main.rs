mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use holopose::camera::CameraIntrinsics;
use holopose::estimator::FitConfig;
use holopose::losses::LossWeights;
use holopose::synth::GenConfig;

use crate::config::FitSettings;

/// Synthetic holistic robot pose pipelines: generate scenes, fit them, score the fits.
#[derive(Debug, Parser)]
#[command(name = "holopose", version)]
struct Cli {
    /// Worker threads; 0 uses all available cores.
    #[arg(long, global = true, env = "HOLOPOSE_THREADS")]
    threads: Option<usize>,
    /// Only report warnings and errors on standard error.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a synthetic dataset.
    Generate(GenerateArgs),
    /// Recover joint state and camera pose for every scene of a dataset.
    Fit(FitArgs),
    /// Score fit results against the dataset ground truth.
    Eval(EvalArgs),
    /// Per-scene loss terms of fit results.
    Report(ReportArgs),
    /// Summarize a robot description, dataset or results file.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub robot: PathBuf,
    #[arg(short, long)]
    pub out: PathBuf,
    /// TOML config (or a run manifest) overridden by the flags below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: GenOverrides,
}

#[derive(Debug, Default, Args)]
pub struct GenOverrides {
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// [default: 100]
    #[arg(long)]
    pub scenes: Option<u64>,
    /// Camera distance range MIN,MAX in mm [default: 1800,2800]
    #[arg(long, value_parser = range)]
    pub distance_mm: Option<[f64; 2]>,
    /// Camera elevation range MIN,MAX in degrees [default: 5,45]
    #[arg(long, value_parser = range, allow_hyphen_values = true)]
    pub elevation_deg: Option<[f64; 2]>,
    /// Camera azimuth range MIN,MAX in degrees [default: -180,180]
    #[arg(long, value_parser = range, allow_hyphen_values = true)]
    pub azimuth_deg: Option<[f64; 2]>,
    /// [default: 50]
    #[arg(long)]
    pub aim_jitter_mm: Option<f64>,
    /// 2D observation noise sigma, px [default: 0]
    #[arg(long)]
    pub noise_px: Option<f64>,
    /// 3D observation noise sigma, mm [default: 0]
    #[arg(long)]
    pub noise_mm: Option<f64>,
    /// [default: 0]
    #[arg(long)]
    pub truncation_prob: Option<f64>,
    /// [default: 4]
    #[arg(long)]
    pub min_inframe: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    pub mask_corruption: Option<f64>,
    /// Write segmentation masks next to the dataset.
    #[arg(long)]
    pub with_masks: bool,
    /// [default: 100]
    #[arg(long)]
    pub near_mm: Option<f64>,
    /// [default: 615]
    #[arg(long)]
    pub fx: Option<f64>,
    /// [default: 615]
    #[arg(long)]
    pub fy: Option<f64>,
    /// [default: width / 2]
    #[arg(long)]
    pub cx: Option<f64>,
    /// [default: height / 2]
    #[arg(long)]
    pub cy: Option<f64>,
    /// [default: 640]
    #[arg(long)]
    pub width: Option<u32>,
    /// [default: 480]
    #[arg(long)]
    pub height: Option<u32>,
}

fn range(s: &str) -> Result<[f64; 2], String> {
    let (a, b) = s.split_once(',').ok_or("expected MIN,MAX")?;
    let num = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    Ok([num(a)?, num(b)?])
}

fn set<T: Copy>(v: Option<T>, into: &mut T) {
    if let Some(v) = v {
        *into = v;
    }
}

impl GenOverrides {
    pub fn apply(&self, c: &mut GenConfig) {
        set(self.seed, &mut c.seed);
        set(self.scenes, &mut c.scenes);
        set(self.distance_mm, &mut c.distance_mm);
        set(self.elevation_deg, &mut c.elevation_deg);
        set(self.azimuth_deg, &mut c.azimuth_deg);
        set(self.aim_jitter_mm, &mut c.aim_jitter_mm);
        set(self.noise_px, &mut c.noise_px);
        set(self.noise_mm, &mut c.noise_mm);
        set(self.truncation_prob, &mut c.truncation_prob);
        set(self.min_inframe, &mut c.min_inframe);
        set(self.mask_corruption, &mut c.mask_corruption);
        c.with_masks |= self.with_masks;
        set(self.near_mm, &mut c.near_mm);
        let k = &mut c.intrinsics;
        let resized = self.width.is_some() || self.height.is_some();
        let mut next = CameraIntrinsics {
            fx: self.fx.unwrap_or(k.fx),
            fy: self.fy.unwrap_or(k.fy),
            width: self.width.unwrap_or(k.width),
            height: self.height.unwrap_or(k.height),
            ..*k
        };
        next.cx = self.cx.unwrap_or(if resized { next.width as f64 / 2.0 } else { k.cx });
        next.cy = self.cy.unwrap_or(if resized { next.height as f64 / 2.0 } else { k.cy });
        *k = next;
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub robot: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(short, long)]
    pub out: PathBuf,
    /// TOML config (or a run manifest) overridden by the flags below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: FitOverrides,
}

#[derive(Debug, Default, Args)]
pub struct FitOverrides {
    /// Hold the joint state at the ground truth and solve for the pose only.
    #[arg(long)]
    pub known_joints: bool,
    /// Fit the 2D observations only.
    #[arg(long)]
    pub no_3d: bool,
    /// [default: 200]
    #[arg(long)]
    pub max_iterations: Option<usize>,
    /// [default: 0.001]
    #[arg(long)]
    pub damping_init: Option<f64>,
    /// [default: 10]
    #[arg(long)]
    pub damping_up: Option<f64>,
    /// [default: 0.1]
    #[arg(long)]
    pub damping_down: Option<f64>,
    /// [default: 1e-8]
    #[arg(long)]
    pub step_tolerance: Option<f64>,
    /// [default: 1e-10]
    #[arg(long)]
    pub relative_tolerance: Option<f64>,
    /// [default: 8]
    #[arg(long)]
    pub starts: Option<usize>,
    /// Seed of the start rotations beyond the fixed set [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// [default: 30]
    #[arg(long)]
    pub stage_iterations: Option<usize>,
    /// [default: 1]
    #[arg(long)]
    pub reprojection_weight: Option<f64>,
    /// [default: 0.2]
    #[arg(long)]
    pub root_relative_weight: Option<f64>,
    /// [default: 0.2]
    #[arg(long)]
    pub consistency_weight: Option<f64>,
}

impl FitOverrides {
    pub fn apply(&self, s: &mut FitSettings) {
        s.known_joints |= self.known_joints;
        if self.no_3d {
            s.use_3d = false;
        }
        let c: &mut FitConfig = &mut s.solver;
        set(self.max_iterations, &mut c.max_iterations);
        set(self.damping_init, &mut c.damping_init);
        set(self.damping_up, &mut c.damping_up);
        set(self.damping_down, &mut c.damping_down);
        set(self.step_tolerance, &mut c.step_tolerance);
        set(self.relative_tolerance, &mut c.relative_tolerance);
        set(self.starts, &mut c.starts);
        set(self.seed, &mut c.seed);
        set(self.stage_iterations, &mut c.stage_iterations);
        set(self.reprojection_weight, &mut s.weights.reprojection);
        set(self.root_relative_weight, &mut s.weights.root_relative);
        set(self.consistency_weight, &mut s.weights.consistency);
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub robot: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub results: PathBuf,
    /// Metrics report (`key = value` lines).
    #[arg(short, long)]
    pub out: PathBuf,
    /// Per-stratum CSV [default: <out>.strata.csv]
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub robot: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub results: PathBuf,
    #[arg(short, long)]
    pub out: PathBuf,
    /// TOML config (or a run manifest) overridden by the flags below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Keypoint weight of the ground-truth total [default: 10]
    #[arg(long)]
    pub kpts_weight: Option<f64>,
    /// Mask weight of the self-supervised total [default: 1]
    #[arg(long)]
    pub mc_weight: Option<f64>,
}

impl ReportArgs {
    pub fn apply(&self, w: &mut LossWeights) {
        set(self.kpts_weight, &mut w.kpts);
        set(self.mc_weight, &mut w.mc);
    }
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct InspectArgs {
    #[arg(long)]
    pub robot: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub results: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = commands::thread_pool(cli.threads).and_then(|pool| {
        pool.install(|| match cli.command {
            Command::Generate(a) => commands::generate(a),
            Command::Fit(a) => commands::fit(a),
            Command::Eval(a) => commands::eval(a),
            Command::Report(a) => commands::report(a),
            Command::Inspect(a) => commands::inspect(a),
        })
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_override_config() {
        let cli = Cli::parse_from([
            "holopose", "generate", "--robot", "r.urdf", "-o", "d.ndl", "--seed", "7", "--elevation-deg", "-10,20",
            "--width", "320", "--azimuth-deg", "-90,-10",
        ]);
        let Command::Generate(a) = cli.command else { panic!() };
        let mut c = GenConfig::default();
        a.overrides.apply(&mut c);
        assert_eq!(c.seed, 7);
        assert_eq!(c.elevation_deg, [-10.0, 20.0]);
        assert_eq!((c.intrinsics.width, c.intrinsics.cx), (320, 160.0));
        assert_eq!(c.azimuth_deg, [-90.0, -10.0]);
        assert_eq!(c.scenes, 100);
        assert!(range("1").is_err() && range("a,2").is_err());
    }
}
