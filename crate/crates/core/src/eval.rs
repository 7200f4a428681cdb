//! Accuracy metrics and experiment harness.
//!
//! The accuracy metric is the mean squared orthogonal distance of a region's
//! points to their own least-squares plane. Reports carry both the mean squared
//! distance (m^2) and its square root (m).

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::{Matrix3, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud_io::MotorStampedCloud;
use crate::config::{Mode, RunConfig};
use crate::correspondences::base_frame_points;
use crate::error::{CalibError, Result};
use crate::geometry::{ExtrinsicParams, MotorTrajectory, Vec3};
use crate::pipeline::run_calibration;
use crate::primitives::{planarity, voxel_index, MIN_VOXEL_SUPPORT};
use crate::synth::SceneModel;

/// Eigen-decomposition of the unweighted scatter matrix, eigenvalues descending.
fn scatter(points: &[Vec3]) -> (Vec3, [f64; 3], Vec3) {
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vec3>() / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
    let vals = idx.map(|i| eig.eigenvalues[i].max(0.0));
    let normal = eig.eigenvectors.column(idx[2]).into_owned();
    (centroid, vals, normal)
}

/// Mean squared distance of `points` to their best-fit plane, m^2.
pub fn plane_fitting_error(points: &[Vec3]) -> Result<f64> {
    if points.len() < 3 {
        return Err(CalibError::DegenerateFit(format!(
            "need at least 3 points, got {}",
            points.len()
        )));
    }
    let (centroid, vals, normal) = scatter(points);
    if vals[1] <= 1e-12 * vals[0] || vals[0] == 0.0 {
        return Err(CalibError::DegenerateFit("points are collinear or coincident".into()));
    }
    let sum: f64 = points.iter().map(|p| normal.dot(&(p - centroid)).powi(2)).sum();
    Ok(sum / points.len() as f64)
}

/// Axis-aligned evaluation box in the base frame.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRegion {
    pub name: String,
    pub min: Vec3,
    pub max: Vec3,
}

impl EvalRegion {
    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

/// Parses `name,xmin,ymin,zmin,xmax,ymax,zmax` lines. Blank lines and `#` comments
/// are skipped, as is a header line starting with `name`.
pub fn parse_regions(text: &str, path: &Path) -> Result<Vec<EvalRegion>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (out.is_empty() && line.starts_with("name")) {
            continue;
        }
        let err = |message: String| CalibError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 7 {
            return Err(err(format!("expected 7 fields, got {}", fields.len())));
        }
        let mut v = [0.0; 6];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| err(format!("bad number {f:?}")))?;
        }
        if (0..3).any(|k| v[k] > v[k + 3]) {
            return Err(err("region min exceeds max".into()));
        }
        out.push(EvalRegion {
            name: fields[0].to_string(),
            min: Vec3::new(v[0], v[1], v[2]),
            max: Vec3::new(v[3], v[4], v[5]),
        });
    }
    Ok(out)
}

pub fn read_regions(path: &Path) -> Result<Vec<EvalRegion>> {
    let text = std::fs::read_to_string(path).map_err(|e| CalibError::io(path, e))?;
    parse_regions(&text, path)
}

pub fn format_regions(regions: &[EvalRegion]) -> String {
    let mut s = String::from("name,xmin,ymin,zmin,xmax,ymax,zmax\n");
    for r in regions {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.name, r.min.x, r.min.y, r.min.z, r.max.x, r.max.y, r.max.z
        );
    }
    s
}

/// One box per scene patch: the central `fraction` of the rectangle, padded by
/// `slack` along the normal.
pub fn regions_for_scene(scene: &SceneModel, fraction: f64, slack: f64) -> Vec<EvalRegion> {
    scene
        .planes
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let u = p.axis_u * p.half_extents[0] * fraction;
            let v = p.axis_v() * p.half_extents[1] * fraction;
            let w = p.normal * slack;
            let mut lo = Vec3::repeat(f64::INFINITY);
            let mut hi = Vec3::repeat(f64::NEG_INFINITY);
            for su in [-1.0, 1.0] {
                for sv in [-1.0, 1.0] {
                    for sw in [-1.0, 1.0] {
                        let c = p.center + u * su + v * sv + w * sw;
                        lo = lo.inf(&c);
                        hi = hi.sup(&c);
                    }
                }
            }
            EvalRegion {
                name: format!("plane{i}"),
                min: lo,
                max: hi,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionError {
    pub name: String,
    pub points: usize,
    /// `None` when the region holds too few or degenerate points.
    pub mse: Option<f64>,
}

impl RegionError {
    pub fn rms(&self) -> Option<f64> {
        self.mse.map(f64::sqrt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlaneFitReport {
    pub regions: Vec<RegionError>,
    /// Mean of the per-region mean squared distances over scored regions, m^2.
    pub aggregate_mse: f64,
    pub scored: usize,
}

impl PlaneFitReport {
    fn from_regions(regions: Vec<RegionError>) -> Self {
        let scored: Vec<f64> = regions.iter().filter_map(|r| r.mse).collect();
        let aggregate_mse = if scored.is_empty() {
            f64::NAN
        } else {
            scored.iter().sum::<f64>() / scored.len() as f64
        };
        Self {
            scored: scored.len(),
            regions,
            aggregate_mse,
        }
    }

    pub fn aggregate_rms(&self) -> f64 {
        self.aggregate_mse.sqrt()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("region,points,mse_m2,rms_m,status\n");
        for r in &self.regions {
            match r.mse {
                Some(m) => {
                    let _ = writeln!(s, "{},{},{},{},ok", r.name, r.points, m, m.sqrt());
                }
                None => {
                    let _ = writeln!(s, "{},{},,,too_few_points", r.name, r.points);
                }
            }
        }
        let _ = writeln!(
            s,
            "aggregate,{},{},{},{}",
            self.regions.iter().map(|r| r.points).sum::<usize>(),
            self.aggregate_mse,
            self.aggregate_rms(),
            if self.scored > 0 { "ok" } else { "empty" }
        );
        s
    }
}

/// Scores each region on the points it contains.
pub fn evaluate_regions(base_points: &[Vec3], regions: &[EvalRegion]) -> PlaneFitReport {
    let scored = regions
        .par_iter()
        .map(|r| {
            let pts: Vec<Vec3> = base_points.iter().filter(|p| r.contains(p)).copied().collect();
            RegionError {
                name: r.name.clone(),
                points: pts.len(),
                mse: plane_fitting_error(&pts).ok(),
            }
        })
        .collect();
    PlaneFitReport::from_regions(scored)
}

/// Region-free scoring: every voxel with enough points whose planarity reaches
/// `planarity_min` is scored as its own region.
pub fn evaluate_planar_voxels(base_points: &[Vec3], voxel_size: f64, planarity_min: f64) -> PlaneFitReport {
    let mut cells: std::collections::BTreeMap<[i64; 3], Vec<Vec3>> = Default::default();
    for p in base_points {
        cells.entry(voxel_index(p, voxel_size)).or_default().push(*p);
    }
    let cells: Vec<([i64; 3], Vec<Vec3>)> = cells
        .into_iter()
        .filter(|(_, pts)| pts.len() >= MIN_VOXEL_SUPPORT)
        .collect();
    let scored = cells
        .par_iter()
        .filter_map(|(idx, pts)| {
            let (_, vals, _) = scatter(pts);
            let sv = vals.map(f64::sqrt);
            if planarity(sv) < planarity_min {
                return None;
            }
            Some(RegionError {
                name: format!("voxel_{}_{}_{}", idx[0], idx[1], idx[2]),
                points: pts.len(),
                mse: Some(plane_fitting_error(pts).ok()?),
            })
        })
        .collect();
    PlaneFitReport::from_regions(scored)
}

/// Scores a cloud under `ext`, either on `regions` or, when none are given, on planar voxels.
pub fn evaluate_extrinsics(
    cloud: &MotorStampedCloud,
    ext: &ExtrinsicParams,
    regions: &[EvalRegion],
    cfg: &RunConfig,
) -> PlaneFitReport {
    let pts = base_frame_points(cloud, ext);
    if regions.is_empty() {
        evaluate_planar_voxels(&pts, cfg.eval_voxel_size, cfg.planarity_min)
    } else {
        evaluate_regions(&pts, regions)
    }
}

/// Side-by-side rows of two reports over the same regions:
/// `region,points_a,mse_a_m2,rms_a_m,points_b,mse_b_m2,rms_b_m,diff_mse_m2`.
pub fn comparison_table(a: &PlaneFitReport, b: &PlaneFitReport, label_a: &str, label_b: &str) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let mut s = format!(
        "region,points_{label_a},mse_{label_a}_m2,rms_{label_a}_m,points_{label_b},mse_{label_b}_m2,rms_{label_b}_m,diff_mse_m2\n"
    );
    let mut names: Vec<&str> = a.regions.iter().map(|r| r.name.as_str()).collect();
    for r in &b.regions {
        if !names.contains(&r.name.as_str()) {
            names.push(&r.name);
        }
    }
    for name in names {
        let ra = a.regions.iter().find(|r| r.name == name);
        let rb = b.regions.iter().find(|r| r.name == name);
        let ma = ra.and_then(|r| r.mse);
        let mb = rb.and_then(|r| r.mse);
        let diff = ma.zip(mb).map(|(x, y)| y - x);
        let _ = writeln!(
            s,
            "{name},{},{},{},{},{},{},{}",
            ra.map_or(0, |r| r.points),
            opt(ma),
            opt(ma.map(f64::sqrt)),
            rb.map_or(0, |r| r.points),
            opt(mb),
            opt(mb.map(f64::sqrt)),
            opt(diff)
        );
    }
    let _ = writeln!(
        s,
        "aggregate,,{},{},,{},{},{}",
        a.aggregate_mse,
        a.aggregate_rms(),
        b.aggregate_mse,
        b.aggregate_rms(),
        b.aggregate_mse - a.aggregate_mse
    );
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchOutcome {
    pub batch: usize,
    pub ext: Option<ExtrinsicParams>,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Dispersion {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeStability {
    pub mode: Mode,
    pub batches: Vec<BatchOutcome>,
    /// roll, pitch, tx, ty over batches that produced an estimate.
    pub parameters: [Dispersion; 4],
}

impl ModeStability {
    pub fn failures(&self) -> usize {
        self.batches.iter().filter(|b| b.ext.is_none() || !b.converged).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    pub limo: ModeStability,
    pub vanilla: ModeStability,
}

pub const PARAMETER_NAMES: [&str; 4] = ["roll", "pitch", "tx", "ty"];

impl StabilityReport {
    /// `mode,parameter,mean,std,batches_used,failures`; angles in radians.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("mode,parameter,mean,std,batches_used,failures\n");
        for m in [&self.limo, &self.vanilla] {
            let used = m.batches.iter().filter(|b| b.ext.is_some()).count();
            for (name, d) in PARAMETER_NAMES.iter().zip(&m.parameters) {
                let _ = writeln!(s, "{},{name},{},{},{used},{}", m.mode, d.mean, d.std, m.failures());
            }
        }
        s
    }
}

fn dispersion(values: &[f64]) -> Dispersion {
    let n = values.len();
    if n == 0 {
        return Dispersion {
            mean: f64::NAN,
            std: f64::NAN,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Dispersion { mean, std }
}

fn mode_stability(
    batches: &[(MotorStampedCloud, Option<MotorTrajectory>)],
    ext_init: &ExtrinsicParams,
    cfg: &RunConfig,
) -> ModeStability {
    let outcomes: Vec<BatchOutcome> = batches
        .iter()
        .enumerate()
        .map(|(i, (cloud, traj))| match run_calibration(cloud, traj.as_ref(), ext_init, cfg) {
            Ok(r) => BatchOutcome {
                batch: i,
                ext: Some(r.ext),
                converged: r.converged,
                error: None,
            },
            Err(e) => BatchOutcome {
                batch: i,
                ext: None,
                converged: false,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let estimates: Vec<[f64; 4]> = outcomes.iter().filter_map(|o| o.ext.map(|e| e.as_array())).collect();
    let parameters = std::array::from_fn(|k| dispersion(&estimates.iter().map(|e| e[k]).collect::<Vec<_>>()));
    ModeStability {
        mode: cfg.mode,
        batches: outcomes,
        parameters,
    }
}

/// Calibrates every batch in both modes and reports per-parameter dispersion.
/// Failed or non-converged batches are listed, never dropped silently.
pub fn stability_analysis(
    batches: &[(MotorStampedCloud, Option<MotorTrajectory>)],
    ext_init: &ExtrinsicParams,
    cfg: &RunConfig,
) -> Result<StabilityReport> {
    if batches.len() < 2 {
        return Err(CalibError::Validation(format!(
            "stability analysis needs at least 2 batches, got {}",
            batches.len()
        )));
    }
    cfg.validate()?;
    cfg.install(|| StabilityReport {
        limo: mode_stability(batches, ext_init, &cfg.with_mode(Mode::Limo)),
        vanilla: mode_stability(batches, ext_init, &cfg.with_mode(Mode::Vanilla)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub voxel_sizes: Vec<f64>,
    pub planarity_thresholds: Vec<f64>,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.voxel_sizes.is_empty() || self.planarity_thresholds.is_empty() {
            return Err(CalibError::Validation("sweep grid must be non-empty".into()));
        }
        if self.voxel_sizes.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(CalibError::Validation("voxel sizes must be > 0".into()));
        }
        if self.planarity_thresholds.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CalibError::Validation("planarity thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CalibError::io(path, e))?;
        let spec: Self = toml::from_str(&text).map_err(|e| CalibError::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum CellOutcome {
    Done {
        /// Aggregate mean squared distance, m^2.
        error_mse: f64,
        runtime_secs: f64,
        converged: bool,
        correspondences: usize,
        residual_evaluations: u64,
    },
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub voxel_size: f64,
    pub planarity_min: f64,
    pub outcome: CellOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepGrid {
    pub voxel_sizes: Vec<f64>,
    pub planarity_thresholds: Vec<f64>,
    /// Row-major: voxel size outer, threshold inner.
    pub cells: Vec<SweepCell>,
}

impl SweepGrid {
    pub fn cell(&self, voxel: usize, threshold: usize) -> &SweepCell {
        &self.cells[voxel * self.planarity_thresholds.len() + threshold]
    }

    /// `voxel_size,planarity_min,status,error_mse_m2,error_rms_m,runtime_s,converged,correspondences,residual_evaluations`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "voxel_size,planarity_min,status,error_mse_m2,error_rms_m,runtime_s,converged,correspondences,residual_evaluations\n",
        );
        for c in &self.cells {
            match &c.outcome {
                CellOutcome::Done {
                    error_mse,
                    runtime_secs,
                    converged,
                    correspondences,
                    residual_evaluations,
                } => {
                    let _ = writeln!(
                        s,
                        "{},{},ok,{},{},{},{},{},{}",
                        c.voxel_size,
                        c.planarity_min,
                        error_mse,
                        error_mse.sqrt(),
                        runtime_secs,
                        converged,
                        correspondences,
                        residual_evaluations
                    );
                }
                CellOutcome::Failed(msg) => {
                    let msg = msg.replace([',', '\n'], ";");
                    let _ = writeln!(s, "{},{},failed: {msg},,,,,,", c.voxel_size, c.planarity_min);
                }
            }
        }
        s
    }
}

/// Calibrates once per (voxel size, planarity threshold) cell. Cells run
/// concurrently on the configured pool; failures are recorded in their cell.
pub fn parameter_sweep(
    cloud: &MotorStampedCloud,
    trajectory: Option<&MotorTrajectory>,
    grid: &GridSpec,
    ext_init: &ExtrinsicParams,
    regions: &[EvalRegion],
    cfg: &RunConfig,
) -> Result<SweepGrid> {
    grid.validate()?;
    cfg.validate()?;
    let jobs: Vec<(f64, f64)> = grid
        .voxel_sizes
        .iter()
        .flat_map(|v| grid.planarity_thresholds.iter().map(move |p| (*v, *p)))
        .collect();
    let cells = cfg.install(|| {
        jobs.par_iter()
            .map(|&(voxel_size, planarity_min)| {
                let cell_cfg = RunConfig {
                    voxel_size,
                    planarity_min,
                    ..cfg.clone()
                };
                let started = Instant::now();
                let outcome = match run_calibration(cloud, trajectory, ext_init, &cell_cfg) {
                    Ok(r) => {
                        let runtime_secs = started.elapsed().as_secs_f64();
                        let report = evaluate_extrinsics(cloud, &r.ext, regions, cfg);
                        CellOutcome::Done {
                            error_mse: report.aggregate_mse,
                            runtime_secs,
                            converged: r.converged,
                            correspondences: r.batch_stats.last().map_or(0, |b| b.correspondences),
                            residual_evaluations: r.residual_evaluations,
                        }
                    }
                    Err(e) => CellOutcome::Failed(e.to_string()),
                };
                SweepCell {
                    voxel_size,
                    planarity_min,
                    outcome,
                }
            })
            .collect()
    })?;
    Ok(SweepGrid {
        voxel_sizes: grid.voxel_sizes.clone(),
        planarity_thresholds: grid.planarity_thresholds.clone(),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rot_x, rot_z};
    use proptest::prelude::*;

    fn grid_points(h: f64) -> Vec<Vec3> {
        let mut pts = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
                pts.push(Vec3::new(i as f64 * 0.1, j as f64 * 0.1, 2.0 + sign * h));
            }
        }
        pts
    }

    #[test]
    fn coplanar_is_zero() {
        assert!(plane_fitting_error(&grid_points(0.0)).unwrap() < 1e-18);
    }

    #[test]
    fn alternating_offsets_give_h_squared() {
        let h = 0.01;
        assert!((plane_fitting_error(&grid_points(h)).unwrap() - h * h).abs() < 1e-15);
    }

    #[test]
    fn collinear_and_tiny_sets_rejected() {
        let line: Vec<Vec3> = (0..10).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(plane_fitting_error(&line), Err(CalibError::DegenerateFit(_))));
        assert!(plane_fitting_error(&line[..2]).is_err());
    }

    #[test]
    fn region_file_round_trip() {
        let regions = vec![
            EvalRegion { name: "a".into(), min: Vec3::new(-1.0, -2.0, 0.0), max: Vec3::new(1.0, 2.0, 0.5) },
            EvalRegion { name: "b".into(), min: Vec3::new(0.0, 0.0, 0.0), max: Vec3::new(0.125, 3.0, 1.0) },
        ];
        let text = format_regions(&regions);
        assert_eq!(parse_regions(&text, Path::new("r.csv")).unwrap(), regions);
        assert!(parse_regions("a,1,2,3\n", Path::new("r.csv")).is_err());
        assert!(parse_regions("a,1,0,0,0,1,1\n", Path::new("r.csv")).is_err());
    }

    #[test]
    fn region_with_few_points_is_flagged() {
        let regions = vec![EvalRegion { name: "empty".into(), min: Vec3::repeat(10.0), max: Vec3::repeat(11.0) }];
        let report = evaluate_regions(&grid_points(0.01), &regions);
        assert_eq!(report.regions[0].mse, None);
        assert_eq!(report.scored, 0);
        assert!(report.to_csv().contains("too_few_points"));
    }

    #[test]
    fn identical_reports_compare_to_zero() {
        let regions = vec![EvalRegion { name: "all".into(), min: Vec3::repeat(-5.0), max: Vec3::repeat(5.0) }];
        let report = evaluate_regions(&grid_points(0.01), &regions);
        let table = comparison_table(&report, &report, "a", "b");
        let row = table.lines().nth(1).unwrap();
        assert!(row.ends_with(",0"), "{row}");
    }

    #[test]
    fn dispersion_of_identical_values_is_zero() {
        let d = dispersion(&[0.3, 0.3, 0.3]);
        assert_eq!(d.std, 0.0);
        assert_eq!(d.mean, 0.3);
        let d = dispersion(&[1.0, 3.0]);
        assert!((d.std - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn grid_validation() {
        let g = GridSpec { voxel_sizes: vec![], planarity_thresholds: vec![0.5] };
        assert!(g.validate().is_err());
        let g = GridSpec { voxel_sizes: vec![1.0], planarity_thresholds: vec![1.5] };
        assert!(g.validate().is_err());
    }

    #[test]
    fn scene_regions_cover_patch_centres() {
        let scene = crate::synth::make_room_scene(8.0, 6.0, 3.0).unwrap();
        let regions = regions_for_scene(&scene, 0.6, 0.3);
        assert_eq!(regions.len(), scene.planes.len());
        for (r, p) in regions.iter().zip(&scene.planes) {
            assert!(r.contains(&p.center));
        }
    }

    proptest! {
        #[test]
        fn error_is_isometry_invariant(a in -3.0f64..3.0, b in -1.5f64..1.5, tx in -10.0f64..10.0, h in 0.001f64..0.1) {
            let pts = grid_points(h);
            let r = rot_z(a) * rot_x(b);
            let t = Vec3::new(tx, -tx, 0.5 * tx);
            let moved: Vec<Vec3> = pts.iter().map(|p| r * p + t).collect();
            let e0 = plane_fitting_error(&pts).unwrap();
            let e1 = plane_fitting_error(&moved).unwrap();
            prop_assert!((e0 - e1).abs() <= 1e-12 * e0, "{} vs {}", e0, e1);
        }
    }
}
