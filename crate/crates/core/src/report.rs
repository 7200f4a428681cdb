//! Report, trace and ground-truth sidecar files.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{Mode, RunConfig};
use crate::error::{CalibError, Result};
use crate::eval::EvalRegion;
use crate::geometry::{ExtrinsicParams, Vec3};
use crate::solver::SolveResult;

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CalibError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultSummary {
    pub mode: Mode,
    pub converged: bool,
    pub final_cost: f64,
    pub time_offset: f64,
    pub residual_count: usize,
    pub residual_rms_m: f64,
    pub residual_median_abs_m: f64,
    pub inlier_fraction: f64,
    pub residual_evaluations: u64,
    pub inner_iterations: usize,
    pub outer_iterations: usize,
    pub correspondences: usize,
    pub trimmed_correspondences: usize,
    pub homogenized_primitives: usize,
    pub information_condition: f64,
    pub extraction_secs: f64,
    pub association_secs: f64,
    pub solve_secs: f64,
}

/// The calibration report: estimate, summary and the resolved configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub extrinsics: ExtrinsicParams,
    pub result: ResultSummary,
    pub config: RunConfig,
}

impl CalibrationReport {
    pub fn new(result: &SolveResult, config: &RunConfig) -> Self {
        let last = result.batch_stats.last().cloned().unwrap_or_default();
        Self {
            extrinsics: result.ext,
            result: ResultSummary {
                mode: config.mode,
                converged: result.converged,
                final_cost: result.final_cost,
                time_offset: result.time_offset,
                residual_count: result.residual_stats.count,
                residual_rms_m: result.residual_stats.rms,
                residual_median_abs_m: result.residual_stats.median_abs,
                inlier_fraction: result.residual_stats.inlier_fraction,
                residual_evaluations: result.residual_evaluations,
                inner_iterations: result.inner_iterations,
                outer_iterations: result.param_trace.len(),
                correspondences: last.correspondences,
                trimmed_correspondences: last.trimmed,
                homogenized_primitives: last.homogenized,
                information_condition: result.information_condition,
                extraction_secs: result.timings.extraction_secs,
                association_secs: result.timings.association_secs,
                solve_secs: result.timings.solve_secs,
            },
            config: config.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }
}

/// `outer,iteration,cost,lambda`.
pub fn cost_trace_csv(result: &SolveResult) -> String {
    let mut s = String::from("outer,iteration,cost,lambda\n");
    for r in &result.cost_trace {
        let _ = writeln!(s, "{},{},{},{}", r.outer, r.iteration, r.cost, r.lambda);
    }
    s
}

/// `outer,roll,pitch,tx,ty,time_offset,cost,correspondences`; angles in radians.
pub fn param_trace_csv(result: &SolveResult) -> String {
    let mut s = String::from("outer,roll,pitch,tx,ty,time_offset,cost,correspondences\n");
    for r in &result.param_trace {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.outer, r.ext.roll, r.ext.pitch, r.ext.tx, r.ext.ty, r.time_offset, r.cost, r.correspondences
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionEntry {
    pub name: String,
    pub min: [f64; 3],
    pub max: [f64; 3],
}

/// Ground truth written next to a synthetic scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub extrinsics: ExtrinsicParams,
    pub seed: u64,
    pub range_noise_sigma: f64,
    #[serde(default)]
    pub region: Vec<RegionEntry>,
}

impl GroundTruth {
    pub fn regions(&self) -> Vec<EvalRegion> {
        self.region
            .iter()
            .map(|r| EvalRegion {
                name: r.name.clone(),
                min: Vec3::from(r.min),
                max: Vec3::from(r.max),
            })
            .collect()
    }

    pub fn with_regions(mut self, regions: &[EvalRegion]) -> Self {
        self.region = regions
            .iter()
            .map(|r| RegionEntry {
                name: r.name.clone(),
                min: r.min.into(),
                max: r.max.into(),
            })
            .collect();
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("ground truth serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CalibError::io(path, e))?;
        toml::from_str(&text).map_err(|e| parse_error(path, e))
    }
}

fn parse_error(path: &Path, e: toml::de::Error) -> CalibError {
    CalibError::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    }
}

/// Reads the `[extrinsics]` table of a calibration report or a ground-truth sidecar.
pub fn load_extrinsics(path: &Path) -> Result<ExtrinsicParams> {
    let text = std::fs::read_to_string(path).map_err(|e| CalibError::io(path, e))?;
    let table: toml::Table = toml::from_str(&text).map_err(|e| parse_error(path, e))?;
    let value = table.get("extrinsics").cloned().ok_or_else(|| CalibError::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: "missing [extrinsics] table".into(),
    })?;
    let ext: ExtrinsicParams = value.try_into().map_err(|e| parse_error(path, e))?;
    ext.validate()?;
    Ok(ext)
}
