//! Robust weighted least squares over `(roll, pitch, tx, ty)`.
//!
//! The cost is `sum_i w_i * rho(r_i^2)` with a Huber `rho`, minimized by
//! Levenberg-Marquardt on the dense 4x4 (or 5x5 with the optional time offset)
//! normal equations. An outer loop re-extracts primitives and re-associates
//! pairs under each new estimate until the parameters stop moving.
//!
//! Rotation Jacobians are derived for a right perturbation `R_LM * Exp(delta)`
//! and mapped onto roll and pitch through the Euler basis
//! `d R / d roll = R [e_x]x`, `d R / d pitch = R [Rx(roll)^T e_y]x`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correspondences::Correspondence;
use crate::error::{CalibError, Result};
use crate::geometry::{rot_z, skew, ExtrinsicParams, Mount, MotorTrajectory, Vec3};

/// Which analytic rotation Jacobian to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum JacobianForm {
    /// `n^T [-R_MB(t_m) R_LM [p_m]x + R_MB(t_n) R_LM [p_n]x]`, exact for any mount.
    #[default]
    Exact,
    /// `n^T [-R_MB(t_m) [p_m]x + R_MB(t_n) [p_n]x]`, exact only when `R_LM = I`.
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// Huber threshold on the residual, meters. `f64::INFINITY` gives plain least squares.
    pub huber_delta: f64,
    pub max_inner_iterations: usize,
    pub max_outer_iterations: usize,
    /// Inner loop stops once an accepted step lowers the cost by less than this fraction.
    pub relative_cost_tolerance: f64,
    /// Outer loop stops once roll/pitch move less than this (radians) ...
    pub outer_rotation_tolerance: f64,
    /// ... and tx/ty less than this (meters).
    pub outer_translation_tolerance: f64,
    pub lm_initial_lambda: f64,
    pub lm_lambda_up: f64,
    pub lm_lambda_down: f64,
    pub jacobian_form: JacobianForm,
    /// Also estimate a global time offset added to point timestamps.
    pub estimate_time_offset: bool,
    pub time_offset_init: f64,
    /// Once an outer step moves roll/pitch less than this (radians) and tx/ty less
    /// than `freeze_translation`, later outer iterations keep the pairs and
    /// neighbourhoods fixed and only refit normals. A step that stops shrinking within
    /// ten times these bounds also freezes. Zero disables freezing.
    pub freeze_rotation: f64,
    pub freeze_translation: f64,
    /// While the association is frozen, pairs whose residual exceeds this many robust
    /// standard deviations (1.4826 x median |r|) are left out of the solve. Zero disables.
    pub trim_sigma: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            huber_delta: 0.05,
            max_inner_iterations: 50,
            max_outer_iterations: 30,
            relative_cost_tolerance: 1e-6,
            outer_rotation_tolerance: 1e-6,
            outer_translation_tolerance: 1e-5,
            lm_initial_lambda: 1e-4,
            lm_lambda_up: 10.0,
            lm_lambda_down: 0.5,
            jacobian_form: JacobianForm::Exact,
            estimate_time_offset: false,
            time_offset_init: 0.0,
            freeze_rotation: 1e-4,
            freeze_translation: 1e-3,
            trim_sigma: 3.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.huber_delta > 0.0
            && self.max_inner_iterations >= 1
            && self.max_outer_iterations >= 1
            && self.relative_cost_tolerance > 0.0
            && self.outer_rotation_tolerance > 0.0
            && self.outer_translation_tolerance > 0.0
            && self.lm_initial_lambda > 0.0
            && self.lm_lambda_up > 1.0
            && self.lm_lambda_down > 0.0
            && self.lm_lambda_down < 1.0
            && self.time_offset_init.is_finite()
            && self.freeze_rotation >= 0.0
            && self.freeze_translation >= 0.0
            && self.trim_sigma >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(CalibError::Validation(format!("invalid solver config: {self:?}")))
        }
    }
}

/// `n^T [R_MB(t_m) - R_MB(t_n)]`, the derivative with respect to `t_LM`.
pub fn translation_row(c: &Correspondence, angle_n: f64, angle_m: f64) -> Vec3 {
    let d = rot_z(angle_m).into_inner() - rot_z(angle_n).into_inner();
    d.transpose() * c.normal
}

pub fn jacobian_translation(c: &Correspondence, traj: &MotorTrajectory) -> Vec3 {
    translation_row(
        c,
        traj.angle_at_clamped(c.time_n),
        traj.angle_at_clamped(c.time_m),
    )
}

/// Derivative of the residual with respect to a right perturbation of `R_LM`.
pub fn rotation_row(c: &Correspondence, mount: &Mount, angle_n: f64, angle_m: f64, form: JacobianForm) -> Vec3 {
    let rm = rot_z(angle_m).into_inner();
    let rn = rot_z(angle_n).into_inner();
    let (am, an) = match form {
        JacobianForm::Exact => (rm * mount.rotation, rn * mount.rotation),
        JacobianForm::Paper => (rm, rn),
    };
    let m = -am * skew(&c.point_m) + an * skew(&c.point_n);
    m.transpose() * c.normal
}

pub fn jacobian_rotation(c: &Correspondence, ext: &ExtrinsicParams, traj: &MotorTrajectory, form: JacobianForm) -> Vec3 {
    rotation_row(
        c,
        &ext.mount(),
        traj.angle_at_clamped(c.time_n),
        traj.angle_at_clamped(c.time_m),
        form,
    )
}

/// Tangent directions of roll and pitch in the right-perturbation space of `R_LM`.
pub fn euler_basis(ext: &ExtrinsicParams) -> [Vec3; 2] {
    let (s, c) = ext.roll.sin_cos();
    [Vec3::x(), Vec3::new(0.0, c, -s)]
}

/// Full `[d/droll, d/dpitch, d/dtx, d/dty]` row of one residual.
pub fn parameter_row(c: &Correspondence, ext: &ExtrinsicParams, angle_n: f64, angle_m: f64, form: JacobianForm) -> [f64; 4] {
    let mount = ext.mount();
    let rot = rotation_row(c, &mount, angle_n, angle_m, form);
    let trans = translation_row(c, angle_n, angle_m);
    let [b_roll, b_pitch] = euler_basis(ext);
    [rot.dot(&b_roll), rot.dot(&b_pitch), trans.x, trans.y]
}

/// Huber loss on a squared residual `s`: `s` inside the threshold, linear growth outside.
pub fn huber(s: f64, delta: f64) -> f64 {
    if s <= delta * delta {
        s
    } else {
        2.0 * delta * s.sqrt() - delta * delta
    }
}

/// First derivative of [`huber`] with respect to `s`.
fn huber_slope(s: f64, delta: f64) -> f64 {
    if s <= delta * delta {
        1.0
    } else {
        delta / s.sqrt()
    }
}

pub fn robust_cost(residuals: &[f64], weights: &[f64], delta: f64) -> f64 {
    residuals
        .iter()
        .zip(weights)
        .map(|(r, w)| w * huber(r * r, delta))
        .sum()
}

/// Per-outer-iteration provider of correspondences under a given estimate.
pub trait CorrespondenceProvider {
    fn correspondences(&self, ext: &ExtrinsicParams) -> Result<CorrespondenceBatch>;

    /// Same pairs as `previous` with normals and weights refitted under `ext`.
    /// `None` when the provider cannot refit.
    fn refit(&self, _previous: &CorrespondenceBatch, _ext: &ExtrinsicParams) -> Option<Result<CorrespondenceBatch>> {
        None
    }

    /// Needed only when the time offset is estimated.
    fn trajectory(&self) -> Option<&MotorTrajectory> {
        None
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BatchStats {
    pub kernels: usize,
    pub k: usize,
    pub candidates: usize,
    pub filtered: usize,
    pub homogenized: usize,
    pub correspondences: usize,
    /// Pairs left out of the solve by residual trimming.
    pub trimmed: usize,
}

/// Where a pair's normal came from, so it can be refitted without re-association.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSupport {
    pub anchor_index: usize,
    pub neighbors: Vec<usize>,
    /// Kernel center minus anchor, base frame.
    pub kernel_offset: Vec3,
}

#[derive(Debug, Clone, Default)]
pub struct CorrespondenceBatch {
    pub correspondences: Vec<Correspondence>,
    /// Parallel to `correspondences`, or empty.
    pub support: Vec<PairSupport>,
    pub stats: BatchStats,
    pub extraction_secs: f64,
    pub association_secs: f64,
}

/// A provider that always returns the same pairs.
#[derive(Debug, Clone)]
pub struct FixedCorrespondences {
    pub correspondences: Vec<Correspondence>,
    pub trajectory: Option<MotorTrajectory>,
}

impl CorrespondenceProvider for FixedCorrespondences {
    fn correspondences(&self, _ext: &ExtrinsicParams) -> Result<CorrespondenceBatch> {
        Ok(CorrespondenceBatch {
            stats: BatchStats {
                correspondences: self.correspondences.len(),
                ..BatchStats::default()
            },
            correspondences: self.correspondences.clone(),
            ..CorrespondenceBatch::default()
        })
    }

    fn trajectory(&self) -> Option<&MotorTrajectory> {
        self.trajectory.as_ref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostRecord {
    pub outer: usize,
    pub iteration: usize,
    pub cost: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParamRecord {
    pub outer: usize,
    pub ext: ExtrinsicParams,
    pub time_offset: f64,
    pub cost: f64,
    pub correspondences: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ResidualStats {
    pub count: usize,
    pub rms: f64,
    pub median_abs: f64,
    /// Fraction of residuals inside the Huber threshold.
    pub inlier_fraction: f64,
}

impl ResidualStats {
    pub fn from_residuals(residuals: &[f64], delta: f64) -> Self {
        if residuals.is_empty() {
            return Self::default();
        }
        let n = residuals.len();
        let rms = (residuals.iter().map(|r| r * r).sum::<f64>() / n as f64).sqrt();
        let mut abs: Vec<f64> = residuals.iter().map(|r| r.abs()).collect();
        abs.sort_by(f64::total_cmp);
        let median_abs = if n % 2 == 1 {
            abs[n / 2]
        } else {
            0.5 * (abs[n / 2 - 1] + abs[n / 2])
        };
        let inliers = abs.iter().filter(|r| **r <= delta).count();
        Self {
            count: n,
            rms,
            median_abs,
            inlier_fraction: inliers as f64 / n as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct StageTimings {
    pub extraction_secs: f64,
    pub association_secs: f64,
    pub solve_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveResult {
    pub ext: ExtrinsicParams,
    pub time_offset: f64,
    pub final_cost: f64,
    pub converged: bool,
    pub cost_trace: Vec<CostRecord>,
    pub param_trace: Vec<ParamRecord>,
    pub residual_stats: ResidualStats,
    /// Residual evaluations over all cost and Jacobian passes.
    pub residual_evaluations: u64,
    pub inner_iterations: usize,
    pub batch_stats: Vec<BatchStats>,
    pub timings: StageTimings,
    /// Ratio of largest to smallest eigenvalue of the Jacobi-scaled `J^T W J` at the end.
    pub information_condition: f64,
    /// Outer iteration from which the association was held fixed.
    pub frozen_from: Option<usize>,
}

/// Parameter vector layout: roll, pitch, tx, ty, then the optional time offset.
struct Problem<'a> {
    corrs: &'a [Correspondence],
    template: ExtrinsicParams,
    traj: Option<&'a MotorTrajectory>,
    estimate_tau: bool,
    form: JacobianForm,
    delta: f64,
}

const TAU_STEP: f64 = 1e-5;

impl Problem<'_> {
    fn dims(&self) -> usize {
        if self.estimate_tau {
            5
        } else {
            4
        }
    }

    fn ext(&self, x: &DVector<f64>) -> ExtrinsicParams {
        self.template.with_array([x[0], x[1], x[2], x[3]])
    }

    fn tau(&self, x: &DVector<f64>) -> f64 {
        if self.estimate_tau {
            x[4]
        } else {
            0.0
        }
    }

    fn angles(&self, c: &Correspondence, tau: f64) -> (f64, f64) {
        match (self.estimate_tau, self.traj) {
            (true, Some(traj)) => (
                traj.angle_at_clamped(c.time_n + tau),
                traj.angle_at_clamped(c.time_m + tau),
            ),
            _ => (c.angle_n, c.angle_m),
        }
    }

    fn residuals(&self, x: &DVector<f64>) -> Vec<f64> {
        let mount = self.ext(x).mount();
        let tau = self.tau(x);
        self.corrs
            .par_iter()
            .map(|c| {
                let (an, am) = self.angles(c, tau);
                c.residual_at(&mount, an, am)
            })
            .collect()
    }

    fn cost(&self, residuals: &[f64]) -> f64 {
        residuals
            .iter()
            .zip(self.corrs)
            .map(|(r, c)| c.weight * huber(r * r, self.delta))
            .sum()
    }

    /// Residuals and Jacobian rows, assembled in parallel and reduced in a fixed order.
    fn linearize(&self, x: &DVector<f64>) -> Linearization {
        let ext = self.ext(x);
        let mount = ext.mount();
        let tau = self.tau(x);
        let dims = self.dims();
        let rows: Vec<(f64, [f64; 5])> = self
            .corrs
            .par_iter()
            .map(|c| {
                let (an, am) = self.angles(c, tau);
                let r = c.residual_at(&mount, an, am);
                let p = parameter_row(c, &ext, an, am, self.form);
                let mut row = [p[0], p[1], p[2], p[3], 0.0];
                if self.estimate_tau {
                    let (an_p, am_p) = self.angles(c, tau + TAU_STEP);
                    let (an_m, am_m) = self.angles(c, tau - TAU_STEP);
                    row[4] = (c.residual_at(&mount, an_p, am_p) - c.residual_at(&mount, an_m, am_m))
                        / (2.0 * TAU_STEP);
                }
                (r, row)
            })
            .collect();
        let mut h = DMatrix::zeros(dims, dims);
        let mut g = DVector::zeros(dims);
        let mut residuals = Vec::with_capacity(rows.len());
        for ((r, row), c) in rows.iter().zip(self.corrs) {
            let w = c.weight * huber_slope(r * r, self.delta);
            for i in 0..dims {
                g[i] += w * row[i] * r;
                for j in 0..=i {
                    h[(i, j)] += w * row[i] * row[j];
                }
            }
            residuals.push(*r);
        }
        for i in 0..dims {
            for j in 0..i {
                h[(j, i)] = h[(i, j)];
            }
        }
        let evals = if self.estimate_tau { 3 } else { 1 } * rows.len() as u64;
        let cost = self.cost(&residuals);
        Linearization {
            h,
            g,
            cost,
            residuals,
            evals,
        }
    }
}

struct Linearization {
    h: DMatrix<f64>,
    g: DVector<f64>,
    cost: f64,
    residuals: Vec<f64>,
    evals: u64,
}

/// Eigen-analysis of the Jacobi-scaled information matrix. Returns the condition
/// ratio, or the null direction (in unscaled parameter space) when rank-deficient.
fn check_rank(h: &DMatrix<f64>) -> std::result::Result<f64, Vec<f64>> {
    const RANK_TOL: f64 = 1e-10;
    let n = h.nrows();
    let diag: Vec<f64> = (0..n).map(|i| h[(i, i)]).collect();
    let dmax = diag.iter().copied().fold(0.0, f64::max);
    if !(dmax > 0.0) {
        let mut v = vec![0.0; n];
        v[0] = 1.0;
        return Err(v);
    }
    if let Some(i) = diag.iter().position(|d| *d <= RANK_TOL * RANK_TOL * dmax) {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        return Err(v);
    }
    let scale: Vec<f64> = diag.iter().map(|d| 1.0 / d.sqrt()).collect();
    let scaled = DMatrix::from_fn(n, n, |i, j| h[(i, j)] * scale[i] * scale[j]);
    let eig = SymmetricEigen::new(scaled);
    let (imin, lmin) = eig
        .eigenvalues
        .iter()
        .copied()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    let lmax = eig.eigenvalues.iter().copied().fold(f64::MIN, f64::max);
    if lmin <= RANK_TOL * lmax {
        let v: Vec<f64> = (0..n).map(|i| eig.eigenvectors[(i, imin)] * scale[i]).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        return Err(v.into_iter().map(|x| x / norm).collect());
    }
    Ok(lmax / lmin)
}

struct InnerOutcome {
    x: DVector<f64>,
    cost: f64,
    converged: bool,
    iterations: usize,
    evals: u64,
    residuals: Vec<f64>,
    condition: f64,
}

/// Below this cost the problem is solved to numerical precision.
const COST_FLOOR: f64 = 1e-28;

fn levenberg_marquardt(
    problem: &Problem<'_>,
    x0: DVector<f64>,
    cfg: &SolverConfig,
    outer: usize,
    trace: &mut Vec<CostRecord>,
) -> Result<InnerOutcome> {
    let dims = problem.dims();
    let mut x = x0;
    let mut lin = problem.linearize(&x);
    let mut evals = lin.evals;
    let condition = check_rank(&lin.h).map_err(|null_direction| CalibError::DegenerateGeometry {
        dof: dims,
        null_direction,
    })?;
    let mut lambda = cfg.lm_initial_lambda;
    trace.push(CostRecord {
        outer,
        iteration: 0,
        cost: lin.cost,
        lambda,
    });
    let mut converged = false;
    let mut iterations = 0;

    'outer: while iterations < cfg.max_inner_iterations {
        if lin.cost <= COST_FLOOR * problem.corrs.len() as f64 {
            converged = true;
            break;
        }
        iterations += 1;
        let dmax = (0..dims).map(|i| lin.h[(i, i)]).fold(0.0, f64::max);
        loop {
            let mut a = lin.h.clone();
            for i in 0..dims {
                a[(i, i)] += lambda * lin.h[(i, i)].max(1e-12 * dmax);
            }
            let step = a.cholesky().map(|ch| ch.solve(&(-&lin.g)));
            let Some(dx) = step else {
                lambda *= cfg.lm_lambda_up;
                continue;
            };
            let x_try = &x + &dx;
            let r_try = problem.residuals(&x_try);
            evals += r_try.len() as u64;
            let cost_try = problem.cost(&r_try);
            if cost_try < lin.cost {
                let rel = (lin.cost - cost_try) / lin.cost;
                x = x_try;
                lambda = (lambda * cfg.lm_lambda_down).max(1e-15);
                lin = problem.linearize(&x);
                evals += lin.evals;
                trace.push(CostRecord {
                    outer,
                    iteration: iterations,
                    cost: lin.cost,
                    lambda,
                });
                if rel < cfg.relative_cost_tolerance {
                    converged = true;
                    break 'outer;
                }
                break;
            }
            lambda *= cfg.lm_lambda_up;
            if lambda > 1e12 {
                // No descent direction left at working precision.
                converged = true;
                break 'outer;
            }
        }
    }
    Ok(InnerOutcome {
        x,
        cost: lin.cost,
        converged,
        iterations,
        evals,
        residuals: lin.residuals,
        condition,
    })
}

/// Marks pairs beyond `trim_sigma` robust standard deviations at `x` in `dropped` and
/// returns the survivors, or `None` when nothing is dropped. Marks accumulate over calls
/// so the kept set only shrinks. New marks are discarded when they would drop more than
/// half the pairs or leave a rank-deficient problem.
fn trim_outliers(
    corrs: &[Correspondence],
    dropped: &mut Vec<bool>,
    x: &DVector<f64>,
    template: ExtrinsicParams,
    traj: Option<&MotorTrajectory>,
    cfg: &SolverConfig,
) -> Option<Vec<Correspondence>> {
    const MIN_THRESHOLD: f64 = 1e-3;
    dropped.resize(corrs.len(), false);
    let probe = Problem {
        corrs,
        template,
        traj,
        estimate_tau: cfg.estimate_time_offset,
        form: cfg.jacobian_form,
        delta: cfg.huber_delta,
    };
    let abs: Vec<f64> = probe.residuals(x).iter().map(|r| r.abs()).collect();
    let mut live: Vec<f64> = abs.iter().zip(dropped.iter()).filter(|(_, d)| !**d).map(|(r, _)| *r).collect();
    live.sort_by(f64::total_cmp);
    let keep = |mask: &[bool]| -> Vec<Correspondence> {
        corrs.iter().zip(mask).filter(|(_, d)| !**d).map(|(c, _)| *c).collect()
    };
    if let Some(&median) = live.get(live.len() / 2) {
        let threshold = (cfg.trim_sigma * 1.4826 * median).max(MIN_THRESHOLD);
        let mask: Vec<bool> = dropped.iter().zip(&abs).map(|(d, r)| *d || *r > threshold).collect();
        if mask != *dropped {
            let kept = keep(&mask);
            let rank_ok = check_rank(&Problem { corrs: &kept, ..probe }.linearize(x).h).is_ok();
            if 2 * kept.len() >= corrs.len() && rank_ok {
                *dropped = mask;
            }
        }
    }
    dropped.contains(&true).then(|| keep(dropped))
}

/// Re-association that stops shrinking its step within this many freeze tolerances is
/// frozen as if it had met them.
const STALL_FREEZE_SCALE: f64 = 10.0;

/// Runs the outer re-association loop with an inner LM solve per iteration.
pub fn solve<P: CorrespondenceProvider + ?Sized>(
    provider: &P,
    ext_init: &ExtrinsicParams,
    cfg: &SolverConfig,
) -> Result<SolveResult> {
    cfg.validate()?;
    ext_init.validate()?;
    if cfg.estimate_time_offset && provider.trajectory().is_none() {
        return Err(CalibError::Validation(
            "time offset estimation needs a motor trajectory".into(),
        ));
    }
    let mut ext = *ext_init;
    let mut tau = if cfg.estimate_time_offset {
        cfg.time_offset_init
    } else {
        0.0
    };
    let mut cost_trace = Vec::new();
    let mut param_trace = Vec::new();
    let mut batch_stats = Vec::new();
    let mut timings = StageTimings::default();
    let mut evals = 0u64;
    let mut inner_total = 0;
    let mut converged = false;
    let mut final_cost = f64::NAN;
    let mut residual_stats = ResidualStats::default();
    let mut condition = f64::NAN;
    let mut frozen: Option<CorrespondenceBatch> = None;
    let mut frozen_from = None;
    let mut dropped = Vec::new();
    let mut previous_step = f64::INFINITY;

    for outer in 0..cfg.max_outer_iterations {
        let refitted = frozen.as_ref().and_then(|prev| provider.refit(prev, &ext)).transpose()?;
        let is_refit = refitted.is_some();
        let batch = match refitted {
            Some(b) => b,
            None => provider.correspondences(&ext)?,
        };
        timings.extraction_secs += batch.extraction_secs;
        timings.association_secs += batch.association_secs;
        let dims = if cfg.estimate_time_offset { 5 } else { 4 };
        let mut x0 = DVector::from_column_slice(&ext.as_array());
        if cfg.estimate_time_offset {
            x0 = x0.push(tau);
        }
        if !is_refit {
            dropped.clear();
        }
        let trimmed = if is_refit && cfg.trim_sigma > 0.0 {
            trim_outliers(&batch.correspondences, &mut dropped, &x0, ext, provider.trajectory(), cfg)
        } else {
            None
        };
        let corrs = trimmed.as_deref().unwrap_or(&batch.correspondences);
        if corrs.len() < dims {
            return Err(CalibError::DegenerateGeometry {
                dof: dims,
                null_direction: Vec::new(),
            });
        }
        let started = Instant::now();
        let problem = Problem {
            corrs,
            template: ext,
            traj: provider.trajectory(),
            estimate_tau: cfg.estimate_time_offset,
            form: cfg.jacobian_form,
            delta: cfg.huber_delta,
        };
        let inner = levenberg_marquardt(&problem, x0, cfg, outer, &mut cost_trace)?;
        timings.solve_secs += started.elapsed().as_secs_f64();

        let new_ext = problem.ext(&inner.x);
        new_ext.validate()?;
        let new_tau = problem.tau(&inner.x);
        evals += inner.evals;
        inner_total += inner.iterations;
        final_cost = inner.cost;
        condition = inner.condition;
        residual_stats = ResidualStats::from_residuals(&inner.residuals, cfg.huber_delta);
        param_trace.push(ParamRecord {
            outer,
            ext: new_ext,
            time_offset: new_tau,
            cost: inner.cost,
            correspondences: corrs.len(),
        });
        batch_stats.push(BatchStats {
            correspondences: corrs.len(),
            trimmed: batch.correspondences.len() - corrs.len(),
            ..batch.stats.clone()
        });

        let d = [
            new_ext.roll - ext.roll,
            new_ext.pitch - ext.pitch,
            new_ext.tx - ext.tx,
            new_ext.ty - ext.ty,
        ];
        ext = new_ext;
        tau = new_tau;
        let settled = d[0].abs() < cfg.outer_rotation_tolerance
            && d[1].abs() < cfg.outer_rotation_tolerance
            && d[2].abs() < cfg.outer_translation_tolerance
            && d[3].abs() < cfg.outer_translation_tolerance;
        if settled && inner.converged {
            converged = true;
            break;
        }
        // Outer step in units of the freeze tolerances.
        let step = (d[0].abs().max(d[1].abs()) / cfg.freeze_rotation)
            .max(d[2].abs().max(d[3].abs()) / cfg.freeze_translation);
        let stalled = step < STALL_FREEZE_SCALE && step >= previous_step;
        previous_step = step;
        if frozen.is_some() || ((step < 1.0 || stalled) && !batch.support.is_empty()) {
            frozen_from.get_or_insert(outer + 1);
            frozen = Some(batch);
        }
    }

    Ok(SolveResult {
        ext,
        time_offset: tau,
        final_cost,
        converged,
        cost_trace,
        param_trace,
        residual_stats,
        residual_evaluations: evals,
        inner_iterations: inner_total,
        batch_stats,
        timings,
        information_condition: condition,
        frozen_from,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn corr(n: Vec3, pn: Vec3, an: f64, pm: Vec3, am: f64) -> Correspondence {
        Correspondence {
            normal: n.normalize(),
            point_n: pn,
            time_n: 0.0,
            angle_n: an,
            point_m: pm,
            time_m: 0.0,
            angle_m: am,
            weight: 1.0,
        }
    }

    fn residual_of(c: &Correspondence, ext: &ExtrinsicParams) -> f64 {
        c.residual(&ext.mount())
    }

    #[test]
    fn translation_row_cases() {
        let c = corr(Vec3::x(), Vec3::zeros(), 0.7, Vec3::zeros(), 0.7);
        assert_eq!(translation_row(&c, 0.7, 0.7), Vec3::zeros());
        let c = corr(Vec3::x(), Vec3::zeros(), 0.0, Vec3::zeros(), std::f64::consts::PI);
        let row = translation_row(&c, 0.0, std::f64::consts::PI);
        assert!((row - Vec3::new(-2.0, 0.0, 0.0)).norm() < 1e-12);
        // finite-difference check of the same entry
        let h = 1e-6;
        let plus = residual_of(&c, &ExtrinsicParams::new(0.0, 0.0, h, 0.0));
        let minus = residual_of(&c, &ExtrinsicParams::new(0.0, 0.0, -h, 0.0));
        assert!(((plus - minus) / (2.0 * h) + 2.0).abs() < 1e-8);
    }

    #[test]
    fn translation_row_has_no_z_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let n = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let c = corr(n, Vec3::zeros(), rng.random_range(-7.0..7.0), Vec3::zeros(), rng.random_range(-7.0..7.0));
            assert_eq!(translation_row(&c, c.angle_n, c.angle_m).z, 0.0);
        }
    }

    #[test]
    fn rotation_row_zero_cases() {
        let ext = ExtrinsicParams::from_degrees(2.0, 1.0, 0.0, 0.0);
        let p = Vec3::new(3.0, -1.0, 2.0);
        let c = corr(Vec3::new(0.2, 0.3, 0.9), p, 1.1, p, 1.1);
        assert!(rotation_row(&c, &ext.mount(), 1.1, 1.1, JacobianForm::Exact).norm() < 1e-15);
        let c = corr(Vec3::new(0.2, 0.3, 0.9), Vec3::zeros(), 0.1, Vec3::zeros(), 2.1);
        assert_eq!(rotation_row(&c, &ext.mount(), 0.1, 2.1, JacobianForm::Exact), Vec3::zeros());
    }

    #[test]
    fn paper_form_agrees_at_identity_mount() {
        let ext = ExtrinsicParams::new(0.0, 0.0, 0.1, -0.2);
        let c = corr(Vec3::new(0.2, 0.3, 0.9), Vec3::new(1.0, 2.0, 3.0), 0.3, Vec3::new(-2.0, 0.5, 1.0), 2.0);
        let a = rotation_row(&c, &ext.mount(), 0.3, 2.0, JacobianForm::Exact);
        let b = rotation_row(&c, &ext.mount(), 0.3, 2.0, JacobianForm::Paper);
        assert!((a - b).norm() < 1e-15);
    }

    #[test]
    fn huber_limits() {
        let r = [0.01, -0.2, 3.0];
        let w = [1.0, 0.5, 0.7];
        let plain: f64 = r.iter().zip(&w).map(|(r, w)| w * (r * r)).sum();
        assert_eq!(robust_cost(&r, &w, f64::INFINITY), plain);
        assert!(robust_cost(&r, &w, 0.05) < plain);
        assert_eq!(huber(0.0025, 0.05), 0.0025);
        assert!((huber(0.01, 0.05) - (2.0 * 0.05 * 0.1 - 0.0025)).abs() < 1e-15);
    }

    #[test]
    fn residual_stats_median() {
        let s = ResidualStats::from_residuals(&[0.1, -0.3, 0.2, 1.0], 0.5);
        assert_eq!(s.count, 4);
        assert!((s.median_abs - 0.25).abs() < 1e-15);
        assert_eq!(s.inlier_fraction, 0.75);
    }

    /// Correspondences from an exact synthetic configuration: random planes, points
    /// generated on them under `truth`, paired across motor angles.
    fn synthetic_pairs(truth: &ExtrinsicParams, n: usize, seed: u64) -> Vec<Correspondence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mount = truth.mount();
        let inv_rot = mount.rotation.transpose();
        (0..n)
            .map(|_| {
                let normal = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
                let center = Vec3::new(rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0), rng.random_range(-2.0..2.0));
                let e1 = normal.cross(&Vec3::new(0.3, 0.5, 0.7)).normalize();
                let e2 = normal.cross(&e1);
                let bn = center + e1 * rng.random_range(-0.3..0.3) + e2 * rng.random_range(-0.3..0.3);
                let bm = center + e1 * rng.random_range(-0.3..0.3) + e2 * rng.random_range(-0.3..0.3);
                let an: f64 = rng.random_range(0.0..6.28);
                let am: f64 = an + rng.random_range(0.6..5.6);
                let to_l = |b: Vec3, a: f64| inv_rot * (rot_z(a).inverse() * b - mount.translation);
                corr(normal, to_l(bn, an), an, to_l(bm, am), am)
            })
            .collect()
    }

    #[test]
    fn recovers_truth_from_exact_pairs() {
        let truth = ExtrinsicParams::from_degrees(2.0, -1.5, 0.05, -0.03);
        let provider = FixedCorrespondences {
            correspondences: synthetic_pairs(&truth, 400, 1),
            trajectory: None,
        };
        let res = solve(&provider, &ExtrinsicParams::identity(), &SolverConfig::default()).unwrap();
        assert!(res.converged);
        assert!((res.ext.roll - truth.roll).abs() < 1e-9);
        assert!((res.ext.pitch - truth.pitch).abs() < 1e-9);
        assert!((res.ext.tx - truth.tx).abs() < 1e-9);
        assert!((res.ext.ty - truth.ty).abs() < 1e-9);
    }

    #[test]
    fn accepted_costs_never_increase() {
        let truth = ExtrinsicParams::from_degrees(4.0, 3.0, 0.1, 0.08);
        let mut pairs = synthetic_pairs(&truth, 300, 2);
        // a few gross outliers
        for c in pairs.iter_mut().step_by(17) {
            c.point_m += c.normal * 0.5;
        }
        let provider = FixedCorrespondences {
            correspondences: pairs,
            trajectory: None,
        };
        let cfg = SolverConfig {
            max_outer_iterations: 1,
            ..SolverConfig::default()
        };
        let res = solve(&provider, &ExtrinsicParams::identity(), &cfg).unwrap();
        assert!(res.cost_trace.len() > 2);
        assert!(res.cost_trace.windows(2).all(|w| w[1].cost <= w[0].cost));
    }

    #[test]
    fn starting_at_truth_takes_at_most_two_iterations() {
        let truth = ExtrinsicParams::from_degrees(2.0, -1.5, 0.05, -0.03);
        let mut pairs = synthetic_pairs(&truth, 300, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for c in pairs.iter_mut() {
            c.point_m *= 1.0 + rng.random_range(-1e-3..1e-3);
        }
        let provider = FixedCorrespondences {
            correspondences: pairs,
            trajectory: None,
        };
        let cfg = SolverConfig {
            max_outer_iterations: 1,
            ..SolverConfig::default()
        };
        let res = solve(&provider, &truth, &cfg).unwrap();
        assert!(res.inner_iterations <= 2, "{}", res.inner_iterations);
    }

    #[test]
    fn horizontal_plane_only_is_degenerate() {
        let truth = ExtrinsicParams::identity();
        let pairs: Vec<_> = synthetic_pairs(&truth, 50, 5)
            .into_iter()
            .map(|mut c| {
                c.normal = Vec3::z();
                c.point_n.z = -1.2;
                c.point_m.z = -1.2;
                c
            })
            .collect();
        let provider = FixedCorrespondences {
            correspondences: pairs,
            trajectory: None,
        };
        match solve(&provider, &truth, &SolverConfig::default()) {
            Err(CalibError::DegenerateGeometry { null_direction, .. }) => {
                // null space lies in the translation block
                assert!(null_direction[0].abs() < 1e-9 && null_direction[1].abs() < 1e-9);
            }
            other => panic!("expected degenerate geometry, got {other:?}"),
        }
    }

    #[test]
    fn too_few_pairs_rejected() {
        let truth = ExtrinsicParams::identity();
        let provider = FixedCorrespondences {
            correspondences: synthetic_pairs(&truth, 3, 6),
            trajectory: None,
        };
        assert!(matches!(
            solve(&provider, &truth, &SolverConfig::default()),
            Err(CalibError::DegenerateGeometry { .. })
        ));
    }

    /// Pushes the partner of every listed pair `offset` meters off its plane.
    fn displace(pairs: &mut [Correspondence], which: impl Iterator<Item = usize>, truth: &ExtrinsicParams, offset: f64) {
        let inv_rot = truth.mount().rotation.transpose();
        for i in which {
            let c = &mut pairs[i];
            c.point_m += inv_rot * (rot_z(c.angle_m).inverse() * c.normal) * offset;
        }
    }

    #[test]
    fn trimming_drops_off_plane_pairs_and_remembers_them() {
        let truth = ExtrinsicParams::from_degrees(2.0, -1.5, 0.05, -0.03);
        let clean = synthetic_pairs(&truth, 100, 4);
        let mut pairs = clean.clone();
        displace(&mut pairs, (0..100).step_by(20), &truth, 0.05);
        let x = DVector::from_column_slice(&truth.as_array());
        let cfg = SolverConfig::default();
        let mut dropped = Vec::new();
        let kept = trim_outliers(&pairs, &mut dropped, &x, truth, None, &cfg).unwrap();
        assert_eq!(kept.len(), 95);
        assert_eq!((0..100).filter(|&i| dropped[i]).collect::<Vec<_>>(), vec![0, 20, 40, 60, 80]);
        let kept = trim_outliers(&clean, &mut dropped, &x, truth, None, &cfg).unwrap();
        assert_eq!(kept.len(), 95);
    }

    #[test]
    fn trimming_never_drops_the_majority() {
        let truth = ExtrinsicParams::from_degrees(2.0, -1.5, 0.05, -0.03);
        let mut pairs = synthetic_pairs(&truth, 100, 5);
        displace(&mut pairs, 0..60, &truth, 0.05);
        let x = DVector::from_column_slice(&truth.as_array());
        let mut dropped = Vec::new();
        assert!(trim_outliers(&pairs, &mut dropped, &x, truth, None, &SolverConfig::default()).is_none());
        assert!(dropped.iter().all(|d| !d));
    }

    #[test]
    fn time_offset_needs_trajectory() {
        let truth = ExtrinsicParams::identity();
        let provider = FixedCorrespondences {
            correspondences: synthetic_pairs(&truth, 30, 6),
            trajectory: None,
        };
        let cfg = SolverConfig {
            estimate_time_offset: true,
            ..SolverConfig::default()
        };
        assert!(matches!(solve(&provider, &truth, &cfg), Err(CalibError::Validation(_))));
    }

    fn fd_residual(c: &Correspondence, ext: &ExtrinsicParams, k: usize, h: f64) -> f64 {
        let shifted = |d: f64| {
            let mut v = ext.as_array();
            v[k] += d;
            residual_of(c, &ext.with_array(v))
        };
        (shifted(h) - shifted(-h)) / (2.0 * h)
    }

    #[test]
    fn mount_axis_directions_are_fixed_by_other_columns() {
        // tz has a zero column; the yaw column equals a plane-rotation term plus a
        // combination of the tx and ty columns
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let mut ext = ExtrinsicParams::new(
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
            );
            ext.yaw_fixed = rng.random_range(-3.0..3.0);
            ext.tz_fixed = rng.random_range(-0.3..0.3);
            let n = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let pn = Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-2.0..2.0));
            let pm = Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-2.0..2.0));
            let c = corr(n, pn, rng.random_range(-3.0..3.0), pm, rng.random_range(-3.0..3.0));
            let h = 1e-6;
            let with = |f: &dyn Fn(&mut ExtrinsicParams)| {
                let mut e = ext;
                f(&mut e);
                residual_of(&c, &e)
            };
            let tz = (with(&|e| e.tz_fixed += h) - with(&|e| e.tz_fixed -= h)) / (2.0 * h);
            assert!(tz.abs() < 1e-8, "tz column {tz}");

            let yaw = (with(&|e| e.yaw_fixed += h) - with(&|e| e.yaw_fixed -= h)) / (2.0 * h);
            let mount = ext.mount();
            let bm = mount.apply(&c.point_m, &rot_z(c.angle_m));
            let bn = mount.apply(&c.point_n, &rot_z(c.angle_n));
            let plane_rotation = c.normal.dot(&Vec3::z().cross(&(bm - bn)));
            let t = translation_row(&c, c.angle_n, c.angle_m);
            let expected = plane_rotation + ext.ty * t.x - ext.tx * t.y;
            assert!((yaw - expected).abs() < 1e-6 * (1.0 + expected.abs()), "{yaw} vs {expected}");
        }
    }

    proptest::proptest! {
        #[test]
        fn parameter_row_matches_central_differences(
            roll in -0.4f64..0.4, pitch in -0.4f64..0.4, tx in -0.5f64..0.5, ty in -0.5f64..0.5,
            yaw in -3.1f64..3.1,
            n in proptest::array::uniform3(-1.0f64..1.0),
            pn in proptest::array::uniform3(-8.0f64..8.0),
            pm in proptest::array::uniform3(-8.0f64..8.0),
            an in -7.0f64..7.0, am in -7.0f64..7.0,
        ) {
            let normal = Vec3::from(n);
            proptest::prop_assume!(normal.norm() > 0.1);
            let mut ext = ExtrinsicParams::new(roll, pitch, tx, ty);
            ext.yaw_fixed = yaw;
            let c = corr(normal, Vec3::from(pn), an, Vec3::from(pm), am);
            let row = parameter_row(&c, &ext, an, am, JacobianForm::Exact);
            for (k, analytic) in row.iter().enumerate() {
                let fd = fd_residual(&c, &ext, k, 1e-6);
                let tol = (1e-5 * fd.abs()).max(1e-8);
                proptest::prop_assert!((analytic - fd).abs() <= tol, "column {}: {} vs {}", k, analytic, fd);
            }
        }
    }
}
