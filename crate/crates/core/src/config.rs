//! Run configuration: every tunable with its default, loaded from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::correspondences::AssociationParams;
use crate::error::{CalibError, Result};
use crate::primitives::{DistanceWeighting, ExtractionParams, MIN_VOXEL_SUPPORT};
use crate::solver::{JacobianForm, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Distance-weighted planarity weights and normal homogenization.
    #[default]
    Limo,
    /// Uniform weights, no distance weighting, no homogenization.
    Vanilla,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Limo => "limo",
            Mode::Vanilla => "vanilla",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    /// Worker threads; 0 uses all cores.
    pub workers: usize,

    /// Kernel voxel edge, meters.
    pub voxel_size: f64,
    pub min_voxel_support: usize,
    pub gamma: f64,
    pub k_max: usize,
    pub planarity_min: f64,
    /// `sigma0 / sigma2` ceiling; omitted means no ceiling.
    pub cond_max: Option<f64>,
    /// Polar bin width for normal homogenization, degrees.
    pub bin_width_deg: f64,

    /// Minimum motor-angle gap between paired observations, degrees.
    pub min_angle_gap_deg: f64,
    /// Maximum partner distance to the primitive plane, meters.
    pub r_corr: f64,
    /// Partner search radius around the anchor, meters.
    pub partner_radius: f64,
    pub pairs_per_primitive: usize,

    pub huber_delta: f64,
    pub max_inner_iterations: usize,
    pub max_outer_iterations: usize,
    pub relative_cost_tolerance: f64,
    pub outer_rotation_tolerance: f64,
    pub outer_translation_tolerance: f64,
    pub lm_initial_lambda: f64,
    pub lm_lambda_up: f64,
    pub lm_lambda_down: f64,
    pub jacobian_form: JacobianForm,
    pub estimate_time_offset: bool,
    pub time_offset_init: f64,
    /// Outer step (radians) below which pairs are held fixed and only normals refitted; 0 disables.
    pub freeze_rotation: f64,
    /// Outer step (meters) below which pairs are held fixed; 0 disables.
    pub freeze_translation: f64,
    /// Robust standard deviations beyond which frozen pairs are left out; 0 disables.
    pub trim_sigma: f64,

    /// Held-fixed mount yaw, radians.
    pub yaw_fixed: f64,
    /// Held-fixed mount offset along the motor axis, meters.
    pub tz_fixed: f64,

    /// Accepted sensor range window for input clouds, meters.
    pub range_min: f64,
    pub range_max: f64,
    /// Voxel edge for region-free evaluation, meters.
    pub eval_voxel_size: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let solver = SolverConfig::default();
        let extraction = ExtractionParams::default();
        let assoc = AssociationParams::default();
        Self {
            mode: Mode::Limo,
            seed: 0,
            workers: 0,
            voxel_size: extraction.voxel_size,
            min_voxel_support: MIN_VOXEL_SUPPORT,
            gamma: extraction.gamma,
            k_max: extraction.k_max,
            planarity_min: 0.5,
            cond_max: None,
            bin_width_deg: 10.0,
            min_angle_gap_deg: assoc.min_angle_gap.to_degrees().round(),
            r_corr: assoc.max_plane_distance,
            partner_radius: assoc.search_radius,
            pairs_per_primitive: assoc.pairs_per_primitive,
            huber_delta: solver.huber_delta,
            max_inner_iterations: solver.max_inner_iterations,
            max_outer_iterations: solver.max_outer_iterations,
            relative_cost_tolerance: solver.relative_cost_tolerance,
            outer_rotation_tolerance: solver.outer_rotation_tolerance,
            outer_translation_tolerance: solver.outer_translation_tolerance,
            lm_initial_lambda: solver.lm_initial_lambda,
            lm_lambda_up: solver.lm_lambda_up,
            lm_lambda_down: solver.lm_lambda_down,
            jacobian_form: solver.jacobian_form,
            estimate_time_offset: solver.estimate_time_offset,
            time_offset_init: solver.time_offset_init,
            freeze_rotation: solver.freeze_rotation,
            freeze_translation: solver.freeze_translation,
            trim_sigma: solver.trim_sigma,
            yaw_fixed: 0.0,
            tz_fixed: 0.0,
            range_min: 0.1,
            range_max: 40.0,
            eval_voxel_size: 1.0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CalibError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CalibError::Validation(m) => CalibError::Parse {
                path: path.to_path_buf(),
                line: 0,
                message: m,
            },
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CalibError::Validation(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let positive = [
            ("voxel_size", self.voxel_size),
            ("gamma", self.gamma),
            ("bin_width_deg", self.bin_width_deg),
            ("r_corr", self.r_corr),
            ("partner_radius", self.partner_radius),
            ("eval_voxel_size", self.eval_voxel_size),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                bad.push(format!("{name} must be > 0 (got {v})"));
            }
        }
        if !(0.0..=1.0).contains(&self.planarity_min) {
            bad.push(format!("planarity_min must be in [0, 1] (got {})", self.planarity_min));
        }
        if let Some(c) = self.cond_max {
            if !(c >= 1.0) {
                bad.push(format!("cond_max must be >= 1 (got {c})"));
            }
        }
        if (180.0 / self.bin_width_deg).fract().abs() > 1e-9 {
            bad.push(format!("bin_width_deg must divide 180 (got {})", self.bin_width_deg));
        }
        if !(0.0..=180.0).contains(&self.min_angle_gap_deg) {
            bad.push(format!("min_angle_gap_deg must be in [0, 180] (got {})", self.min_angle_gap_deg));
        }
        if self.k_max < 3 {
            bad.push("k_max must be >= 3".into());
        }
        if self.min_voxel_support < 1 {
            bad.push("min_voxel_support must be >= 1".into());
        }
        if self.pairs_per_primitive < 1 {
            bad.push("pairs_per_primitive must be >= 1".into());
        }
        if !(self.range_min >= 0.0 && self.range_max > self.range_min) {
            bad.push("range window must satisfy 0 <= range_min < range_max".into());
        }
        if !self.yaw_fixed.is_finite() || !self.tz_fixed.is_finite() {
            bad.push("yaw_fixed and tz_fixed must be finite".into());
        }
        if let Err(CalibError::Validation(m)) = self.solver().validate() {
            bad.push(m);
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(CalibError::Validation(bad.join("; ")))
        }
    }

    pub fn solver(&self) -> SolverConfig {
        SolverConfig {
            huber_delta: self.huber_delta,
            max_inner_iterations: self.max_inner_iterations,
            max_outer_iterations: self.max_outer_iterations,
            relative_cost_tolerance: self.relative_cost_tolerance,
            outer_rotation_tolerance: self.outer_rotation_tolerance,
            outer_translation_tolerance: self.outer_translation_tolerance,
            lm_initial_lambda: self.lm_initial_lambda,
            lm_lambda_up: self.lm_lambda_up,
            lm_lambda_down: self.lm_lambda_down,
            jacobian_form: self.jacobian_form,
            estimate_time_offset: self.estimate_time_offset,
            time_offset_init: self.time_offset_init,
            freeze_rotation: self.freeze_rotation,
            freeze_translation: self.freeze_translation,
            trim_sigma: self.trim_sigma,
        }
    }

    pub fn extraction(&self) -> ExtractionParams {
        ExtractionParams {
            voxel_size: self.voxel_size,
            min_voxel_support: self.min_voxel_support,
            gamma: self.gamma,
            k_max: self.k_max,
            distance_weighting: match self.mode {
                Mode::Limo => DistanceWeighting::Linear,
                Mode::Vanilla => DistanceWeighting::Uniform,
            },
        }
    }

    pub fn association(&self) -> AssociationParams {
        AssociationParams {
            min_angle_gap: self.min_angle_gap_deg.to_radians(),
            max_plane_distance: self.r_corr,
            search_radius: self.partner_radius,
            pairs_per_primitive: self.pairs_per_primitive,
        }
    }

    pub fn with_mode(&self, mode: Mode) -> Self {
        Self {
            mode,
            ..self.clone()
        }
    }

    /// Runs `f` on a pool with the configured worker count.
    pub fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| CalibError::Validation(format!("thread pool: {e}")))?;
        Ok(pool.install(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.min_angle_gap_deg, 30.0);
        assert_eq!(cfg.r_corr, 0.3);
        assert_eq!(cfg.k_max, 50);
        assert_eq!(cfg.gamma, 0.01);
        assert_eq!(cfg.relative_cost_tolerance, 1e-6);
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_toml("mode = \"vanilla\"\nvoxel_size = 2.0\ncond_max = 100.0\n").unwrap();
        assert_eq!(cfg.mode, Mode::Vanilla);
        assert_eq!(cfg.voxel_size, 2.0);
        assert_eq!(cfg.cond_max, Some(100.0));
        assert_eq!(cfg.extraction().distance_weighting, DistanceWeighting::Uniform);
        assert_eq!(cfg.huber_delta, 0.05);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("voxel_sise = 2.0\n").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml("voxel_size = -1.0\n").is_err());
        assert!(RunConfig::from_toml("bin_width_deg = 7.0\n").is_err());
        assert!(RunConfig::from_toml("planarity_min = 1.5\n").is_err());
        assert!(RunConfig::from_toml("max_inner_iterations = 0\n").is_err());
    }
}
