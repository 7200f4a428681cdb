//! Command-line front end: `synth`, `calibrate`, `evaluate`, `sweep`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::cloud_io::{read_cloud, stamp_cloud, validate_ranges, write_cloud, write_trajectory, CloudFormat, RangeLimits};
use crate::cloud_io::{read_trajectory, MotorStampedCloud};
use crate::config::{Mode, RunConfig};
use crate::error::{CalibError, ErrorClass, Result};
use crate::eval::{comparison_table, evaluate_extrinsics, parameter_sweep, read_regions, regions_for_scene, EvalRegion, GridSpec};
use crate::geometry::{ExtrinsicParams, MotorTrajectory, Vec3};
use crate::pipeline::{calibrate, initial_extrinsics};
use crate::report::{cost_trace_csv, load_extrinsics, param_trace_csv, write_text, CalibrationReport, GroundTruth};
use crate::synth::{make_room_scene, make_sparse_scene, simulate_scan, SceneModel, SensorSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_INPUT: i32 = 3;
pub const EXIT_DEGENERATE: i32 = 4;
pub const EXIT_NOT_CONVERGED: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "motorcal", version, about = "Extrinsic calibration of a LiDAR spinning on a motor axis")]
pub struct Cli {
    /// Seed for every random choice (overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Calibration mode (overrides the config file).
    #[arg(long, global = true, value_enum)]
    pub mode: Option<Mode>,
    /// Worker threads, 0 for all cores (overrides the config file).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a scan and write cloud, trajectory and ground-truth sidecar.
    Synth(SynthArgs),
    /// Estimate roll, pitch, tx, ty from a cloud and its motor trajectory.
    Calibrate(CalibrateArgs),
    /// Plane-fitting error of a cloud under one or two extrinsic estimates.
    Evaluate(EvaluateArgs),
    /// Calibrate over a grid of voxel sizes and planarity thresholds.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FileFormat {
    Csv,
    Lmc,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// `room`, `clutter` (room plus spheres), `sparse`, or a scene TOML file.
    #[arg(long, default_value = "room")]
    pub scene: String,
    /// Sensor TOML file; defaults to the built-in pattern.
    #[arg(long)]
    pub sensor: Option<PathBuf>,
    #[arg(long, default_value_t = 2.0, allow_hyphen_values = true)]
    pub roll_deg: f64,
    #[arg(long, default_value_t = -1.5, allow_hyphen_values = true)]
    pub pitch_deg: f64,
    #[arg(long, default_value_t = 0.05, allow_hyphen_values = true)]
    pub tx: f64,
    #[arg(long, default_value_t = -0.03, allow_hyphen_values = true)]
    pub ty: f64,
    /// Range noise standard deviation, meters (overrides the sensor file).
    #[arg(long)]
    pub noise: Option<f64>,
    /// Scan duration, seconds.
    #[arg(long, default_value_t = 2.0)]
    pub duration: f64,
    /// Motor revolutions over the scan.
    #[arg(long, default_value_t = 1.0)]
    pub revolutions: f64,
    /// Encoder samples in the written trajectory.
    #[arg(long, default_value_t = 2001)]
    pub trajectory_samples: usize,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: FileFormat,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// File name stem for the three outputs.
    #[arg(long, default_value = "scan")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub cloud: PathBuf,
    #[arg(long)]
    pub trajectory: PathBuf,
    /// Directory for `report.toml`, `cost_trace.csv` and `param_trace.csv`.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub cloud: PathBuf,
    #[arg(long)]
    pub trajectory: PathBuf,
    /// Report or sidecar holding `[extrinsics]`, or `identity`. Give twice for a comparison.
    #[arg(long = "ext", required = true, num_args = 1)]
    pub ext: Vec<String>,
    /// Region CSV, or a ground-truth sidecar whose regions are used. Omit for planar-voxel scoring.
    #[arg(long)]
    pub regions: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub cloud: PathBuf,
    #[arg(long)]
    pub trajectory: PathBuf,
    /// TOML with `voxel_sizes` and `planarity_thresholds` lists.
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long)]
    pub regions: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Config file (if any) with flag overrides applied.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(m) = cli.mode {
        cfg.mode = m;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CalibError::io(dir, e))
}

fn load_stamped(cloud: &Path, trajectory: &Path, cfg: &RunConfig) -> Result<(MotorStampedCloud, MotorTrajectory)> {
    let traj = read_trajectory(trajectory)?;
    let records = read_cloud(cloud, CloudFormat::from_path(cloud)?)?;
    validate_ranges(
        &records,
        RangeLimits {
            min: cfg.range_min,
            max: cfg.range_max,
        },
    )?;
    let id = cloud.display().to_string();
    let stamped = stamp_cloud(id, &records, &traj)?;
    if stamped.dropped > 0 {
        eprintln!("dropped {} records outside the trajectory span", stamped.dropped);
    }
    Ok((stamped.cloud, traj))
}

fn load_regions(path: Option<&Path>) -> Result<Vec<EvalRegion>> {
    match path {
        None => Ok(Vec::new()),
        Some(p) if p.extension().is_some_and(|e| e == "toml") => Ok(GroundTruth::load(p)?.regions()),
        Some(p) => read_regions(p),
    }
}

fn scene_from_arg(arg: &str, seed: u64) -> Result<SceneModel> {
    match arg {
        "room" => make_room_scene(10.0, 8.0, 3.0),
        "clutter" => {
            let mut scene = make_room_scene(10.0, 8.0, 3.0)?;
            scene.add_clutter(25, Vec3::new(-5.0, -3.0, -1.0), Vec3::new(4.0, 4.0, 1.5), (0.15, 0.6), seed);
            Ok(scene)
        }
        "sparse" => make_sparse_scene(6, 20, seed),
        path => SceneModel::load(Path::new(path)),
    }
}

pub fn cmd_synth(args: &SynthArgs, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let scene = scene_from_arg(&args.scene, cfg.seed)?;
    let mut sensor = match &args.sensor {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CalibError::io(p, e))?;
            toml::from_str::<SensorSpec>(&text).map_err(|e| CalibError::Parse {
                path: p.clone(),
                line: 0,
                message: e.to_string(),
            })?
        }
        None => SensorSpec::default(),
    };
    if let Some(n) = args.noise {
        sensor.range_noise_sigma = n;
    }
    let ext_true = ExtrinsicParams {
        yaw_fixed: cfg.yaw_fixed,
        tz_fixed: cfg.tz_fixed,
        ..ExtrinsicParams::from_degrees(args.roll_deg, args.pitch_deg, args.tx, args.ty)
    };
    let traj = MotorTrajectory::constant_rate(args.duration, args.revolutions, args.trajectory_samples)?;
    let cloud = cfg.install(|| simulate_scan(&scene, &sensor, &traj, &ext_true, cfg.seed))??;

    create_dir(&args.out_dir)?;
    let (ext, format) = match args.format {
        FileFormat::Csv => ("csv", CloudFormat::Csv),
        FileFormat::Lmc => ("lmc", CloudFormat::Binary),
    };
    let cloud_path = args.out_dir.join(format!("{}.{ext}", args.name));
    let traj_path = args.out_dir.join(format!("{}_trajectory.csv", args.name));
    let truth_path = args.out_dir.join(format!("{}_truth.toml", args.name));
    write_cloud(&cloud.to_records(), &cloud_path, format)?;
    write_trajectory(&traj, &traj_path)?;
    let truth = GroundTruth {
        extrinsics: ext_true,
        seed: cfg.seed,
        range_noise_sigma: sensor.range_noise_sigma,
        region: Vec::new(),
    }
    .with_regions(&regions_for_scene(&scene, 0.6, 0.3));
    write_text(&truth_path, &truth.to_toml())?;
    Ok(vec![cloud_path, traj_path, truth_path])
}

/// Runs a calibration and writes its report; returns whether it converged.
pub fn cmd_calibrate(args: &CalibrateArgs, cfg: &RunConfig) -> Result<bool> {
    let (cloud, traj) = load_stamped(&args.cloud, &args.trajectory, cfg)?;
    let result = calibrate(&cloud, Some(&traj), &initial_extrinsics(cfg), cfg)?;
    create_dir(&args.out_dir)?;
    write_text(
        &args.out_dir.join("report.toml"),
        &CalibrationReport::new(&result, cfg).to_toml(),
    )?;
    write_text(&args.out_dir.join("cost_trace.csv"), &cost_trace_csv(&result))?;
    write_text(&args.out_dir.join("param_trace.csv"), &param_trace_csv(&result))?;
    Ok(result.converged)
}

fn ext_from_arg(arg: &str, cfg: &RunConfig) -> Result<ExtrinsicParams> {
    if arg == "identity" {
        Ok(initial_extrinsics(cfg))
    } else {
        load_extrinsics(Path::new(arg))
    }
}

pub fn cmd_evaluate(args: &EvaluateArgs, cfg: &RunConfig) -> Result<()> {
    if args.ext.len() > 2 {
        return Err(CalibError::Validation("at most two --ext estimates can be compared".into()));
    }
    let (cloud, _) = load_stamped(&args.cloud, &args.trajectory, cfg)?;
    let regions = load_regions(args.regions.as_deref())?;
    let exts = args
        .ext
        .iter()
        .map(|a| ext_from_arg(a, cfg))
        .collect::<Result<Vec<_>>>()?;
    let reports = cfg.install(|| {
        exts.iter()
            .map(|e| evaluate_extrinsics(&cloud, e, &regions, cfg))
            .collect::<Vec<_>>()
    })?;
    create_dir(&args.out_dir)?;
    let mut echo = format!("# regions = {}\n", regions.len());
    for (i, (r, a)) in reports.iter().zip(&args.ext).enumerate() {
        let name = ["a", "b"][i];
        write_text(&args.out_dir.join(format!("plane_fit_{name}.csv")), &r.to_csv())?;
        echo.push_str(&format!("# {name} = {a}\n"));
    }
    if let [a, b] = reports.as_slice() {
        write_text(&args.out_dir.join("comparison.csv"), &comparison_table(a, b, "a", "b"))?;
    }
    write_text(&args.out_dir.join("config.toml"), &format!("{echo}{}", cfg.to_toml()))
}

pub fn cmd_sweep(args: &SweepArgs, cfg: &RunConfig) -> Result<()> {
    let grid = GridSpec::load(&args.grid)?;
    let (cloud, traj) = load_stamped(&args.cloud, &args.trajectory, cfg)?;
    let regions = load_regions(args.regions.as_deref())?;
    let result = parameter_sweep(&cloud, Some(&traj), &grid, &initial_extrinsics(cfg), &regions, cfg)?;
    write_text(&args.out, &result.to_csv())?;
    let echo = args.out.with_extension("config.toml");
    write_text(&echo, &cfg.to_toml())
}

fn error_exit(e: &CalibError) -> i32 {
    let (class, code) = match e.class() {
        ErrorClass::Input => ("input", EXIT_INPUT),
        ErrorClass::DegenerateGeometry => ("degenerate_geometry", EXIT_DEGENERATE),
    };
    eprintln!("error_class={class}");
    eprintln!("error: {e}");
    code
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let cfg = match resolve_config(&cli) {
        Ok(c) => c,
        Err(e) => return error_exit(&e),
    };
    let outcome = match &cli.command {
        Command::Synth(a) => cmd_synth(a, &cfg).map(|files| {
            for f in files {
                println!("{}", f.display());
            }
            true
        }),
        Command::Calibrate(a) => cmd_calibrate(a, &cfg),
        Command::Evaluate(a) => cmd_evaluate(a, &cfg).map(|_| true),
        Command::Sweep(a) => cmd_sweep(a, &cfg).map(|_| true),
    };
    match outcome {
        Ok(true) => EXIT_OK,
        Ok(false) => {
            eprintln!("error_class=not_converged");
            EXIT_NOT_CONVERGED
        }
        Err(e) => error_exit(&e),
    }
}
