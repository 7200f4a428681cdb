//! Wires extraction, filtering, homogenization and association into a
//! correspondence provider, and runs complete calibrations.

use std::time::Instant;

use crate::cloud_io::MotorStampedCloud;
use crate::config::{Mode, RunConfig};
use rayon::prelude::*;

use crate::correspondences::{associate_indexed, base_frame_points, AssociationParams, Correspondence};
use crate::error::{CalibError, Result};
use crate::geometry::{rot_z, ExtrinsicParams, MotorTrajectory, Vec3};
use crate::primitives::{
    extract_candidates, filter_primitives, fit_plane_weighted, homogenize_normals, ExtractionParams, PlanePrimitive,
};
use crate::solver::{solve, BatchStats, CorrespondenceBatch, CorrespondenceProvider, PairSupport, SolveResult};
use crate::spatial::KdTree;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSettings {
    pub extraction: ExtractionParams,
    pub planarity_min: f64,
    pub cond_max: Option<f64>,
    pub bin_width_deg: f64,
    pub homogenize: bool,
    pub uniform_weights: bool,
    pub association: AssociationParams,
    pub seed: u64,
}

impl PipelineSettings {
    pub fn from_config(cfg: &RunConfig) -> Self {
        let limo = cfg.mode == Mode::Limo;
        Self {
            extraction: cfg.extraction(),
            planarity_min: cfg.planarity_min,
            cond_max: cfg.cond_max,
            bin_width_deg: cfg.bin_width_deg,
            homogenize: limo,
            uniform_weights: !limo,
            association: cfg.association(),
            seed: cfg.seed,
        }
    }
}

pub struct Pipeline<'a> {
    pub cloud: &'a MotorStampedCloud,
    pub trajectory: Option<&'a MotorTrajectory>,
    pub settings: PipelineSettings,
}

/// Primitives extracted under one extrinsic estimate, with intermediate counts.
pub struct PrimitiveSet {
    pub primitives: Vec<PlanePrimitive>,
    pub stats: BatchStats,
    pub base_points: Vec<Vec3>,
    pub tree: KdTree,
}

impl<'a> Pipeline<'a> {
    pub fn new(cloud: &'a MotorStampedCloud, trajectory: Option<&'a MotorTrajectory>, cfg: &RunConfig) -> Self {
        Self {
            cloud,
            trajectory,
            settings: PipelineSettings::from_config(cfg),
        }
    }

    pub fn primitives(&self, ext: &ExtrinsicParams) -> Result<PrimitiveSet> {
        let s = &self.settings;
        let base_points = base_frame_points(self.cloud, ext);
        let tree = KdTree::build(base_points.clone());
        let (candidates, ex) = extract_candidates(self.cloud, &base_points, &tree, &s.extraction)?;
        let n_candidates = candidates.len();
        let mut prims = filter_primitives(candidates, s.planarity_min, s.cond_max);
        let n_filtered = prims.len();
        if s.uniform_weights {
            for p in &mut prims {
                p.weight = 1.0;
            }
        }
        if s.homogenize {
            prims = homogenize_normals(prims, s.bin_width_deg, s.seed)?;
        }
        if prims.is_empty() {
            return Err(CalibError::EmptyInput(format!(
                "no primitive passed planarity >= {}",
                s.planarity_min
            )));
        }
        let stats = BatchStats {
            kernels: ex.kernels,
            k: ex.k,
            candidates: n_candidates,
            filtered: n_filtered,
            homogenized: prims.len(),
            correspondences: 0,
            trimmed: 0,
        };
        Ok(PrimitiveSet {
            primitives: prims,
            stats,
            base_points,
            tree,
        })
    }
}

impl CorrespondenceProvider for Pipeline<'_> {
    fn correspondences(&self, ext: &ExtrinsicParams) -> Result<CorrespondenceBatch> {
        let t0 = Instant::now();
        let set = self.primitives(ext)?;
        let t1 = Instant::now();
        let indexed = associate_indexed(
            self.cloud,
            &set.base_points,
            &set.tree,
            &set.primitives,
            &self.settings.association,
        )?;
        let t2 = Instant::now();
        let support = indexed
            .iter()
            .map(|ic| {
                let plane = &set.primitives[ic.primitive].plane;
                PairSupport {
                    anchor_index: plane.anchor_index,
                    neighbors: plane.neighbors.clone(),
                    kernel_offset: plane.kernel_center - plane.anchor,
                }
            })
            .collect();
        Ok(CorrespondenceBatch {
            stats: BatchStats {
                correspondences: indexed.len(),
                ..set.stats
            },
            correspondences: indexed.into_iter().map(|ic| ic.correspondence).collect(),
            support,
            extraction_secs: (t1 - t0).as_secs_f64(),
            association_secs: (t2 - t1).as_secs_f64(),
        })
    }

    fn refit(&self, previous: &CorrespondenceBatch, ext: &ExtrinsicParams) -> Option<Result<CorrespondenceBatch>> {
        if previous.support.len() != previous.correspondences.len() {
            return None;
        }
        let started = Instant::now();
        let mount = ext.mount();
        let base = |i: usize| {
            let p = &self.cloud.points[i];
            mount.apply(&p.point, &rot_z(p.angle))
        };
        let weighting = self.settings.extraction.distance_weighting;
        let uniform = self.settings.uniform_weights;
        let refitted: Result<Vec<Correspondence>> = previous
            .correspondences
            .par_iter()
            .zip(&previous.support)
            .map(|(c, s)| {
                let pts: Vec<Vec3> = s.neighbors.iter().map(|&i| base(i)).collect();
                let center = base(s.anchor_index) + s.kernel_offset;
                let fit = fit_plane_weighted(&pts, &center, weighting)?;
                Ok(Correspondence {
                    normal: fit.normal,
                    weight: if uniform { 1.0 } else { fit.alpha },
                    ..*c
                })
            })
            .collect();
        Some(refitted.map(|correspondences| CorrespondenceBatch {
            correspondences,
            support: previous.support.clone(),
            stats: previous.stats.clone(),
            extraction_secs: started.elapsed().as_secs_f64(),
            association_secs: 0.0,
        }))
    }

    fn trajectory(&self) -> Option<&MotorTrajectory> {
        self.trajectory
    }
}

/// Initial estimate for a run: identity roll/pitch/tx/ty with the configured fixed yaw and tz.
pub fn initial_extrinsics(cfg: &RunConfig) -> ExtrinsicParams {
    ExtrinsicParams {
        yaw_fixed: cfg.yaw_fixed,
        tz_fixed: cfg.tz_fixed,
        ..ExtrinsicParams::identity()
    }
}

/// Full calibration in the configured mode, on the configured worker pool.
pub fn calibrate(
    cloud: &MotorStampedCloud,
    trajectory: Option<&MotorTrajectory>,
    ext_init: &ExtrinsicParams,
    cfg: &RunConfig,
) -> Result<SolveResult> {
    cfg.validate()?;
    cfg.install(|| run_calibration(cloud, trajectory, ext_init, cfg))?
}

/// As [`calibrate`], but on the current rayon pool.
pub fn run_calibration(
    cloud: &MotorStampedCloud,
    trajectory: Option<&MotorTrajectory>,
    ext_init: &ExtrinsicParams,
    cfg: &RunConfig,
) -> Result<SolveResult> {
    let pipeline = Pipeline::new(cloud, trajectory, cfg);
    solve(&pipeline, ext_init, &cfg.solver())
}

/// The baseline: same pipeline with uniform weights and no homogenization.
pub fn vanilla_solve(
    cloud: &MotorStampedCloud,
    trajectory: Option<&MotorTrajectory>,
    ext_init: &ExtrinsicParams,
    cfg: &RunConfig,
) -> Result<SolveResult> {
    calibrate(cloud, trajectory, ext_init, &cfg.with_mode(Mode::Vanilla))
}
