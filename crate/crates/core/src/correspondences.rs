//! Cross-angle point pairs on shared planes.
//!
//! Every primitive contributes a pair: its anchor point (observed at motor
//! angle `theta_n`) and the nearest cloud point seen at least `min_angle_gap`
//! away in motor angle that still lies close to the primitive's plane. The
//! residual is the displacement between the two base-frame points projected
//! onto the primitive normal, which vanishes for any in-plane offset.

use std::f64::consts::{PI, TAU};

use rayon::prelude::*;

use crate::cloud_io::MotorStampedCloud;
use crate::error::{CalibError, Result};
use crate::geometry::{rot_z, ExtrinsicParams, Mount, MotorTrajectory, Vec3};
use crate::primitives::PlanePrimitive;
use crate::spatial::KdTree;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    /// Unit plane normal in the base frame.
    pub normal: Vec3,
    /// LiDAR-frame observations.
    pub point_n: Vec3,
    pub time_n: f64,
    pub angle_n: f64,
    pub point_m: Vec3,
    pub time_m: f64,
    pub angle_m: f64,
    pub weight: f64,
}

impl Correspondence {
    /// Residual using the motor angles stored on the correspondence.
    #[inline]
    pub fn residual(&self, mount: &Mount) -> f64 {
        self.residual_at(mount, self.angle_n, self.angle_m)
    }

    #[inline]
    pub fn residual_at(&self, mount: &Mount, angle_n: f64, angle_m: f64) -> f64 {
        let pm = mount.apply(&self.point_m, &rot_z(angle_m));
        let pn = mount.apply(&self.point_n, &rot_z(angle_n));
        self.normal.dot(&(pm - pn))
    }

    /// The same pair with the two observations swapped.
    pub fn swapped(&self) -> Self {
        Self {
            point_n: self.point_m,
            time_n: self.time_m,
            angle_n: self.angle_m,
            point_m: self.point_n,
            time_m: self.time_n,
            angle_m: self.angle_n,
            ..*self
        }
    }
}

/// `n^T [p_B(t_m) - p_B(t_n)]` with motor angles looked up on `traj`.
pub fn residual(c: &Correspondence, ext: &ExtrinsicParams, traj: &MotorTrajectory) -> f64 {
    c.residual_at(
        &ext.mount(),
        traj.angle_at_clamped(c.time_n),
        traj.angle_at_clamped(c.time_m),
    )
}

/// Wraps an angle difference into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    if w > PI {
        w - TAU
    } else {
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssociationParams {
    /// Minimum motor-angle separation between the two observations, radians.
    pub min_angle_gap: f64,
    /// Maximum distance of the partner to the primitive's plane, meters.
    pub max_plane_distance: f64,
    /// Partners are only searched within this radius of the anchor, meters.
    pub search_radius: f64,
    pub pairs_per_primitive: usize,
}

impl Default for AssociationParams {
    fn default() -> Self {
        Self {
            min_angle_gap: 30f64.to_radians(),
            max_plane_distance: 0.3,
            search_radius: 1.0,
            pairs_per_primitive: 1,
        }
    }
}

/// A correspondence together with the primitive it came from and the partner's cloud index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexedCorrespondence {
    pub primitive: usize,
    pub partner_index: usize,
    pub correspondence: Correspondence,
}

/// Pairs primitives with cross-angle partners, given base-frame points and their index.
pub fn associate(
    cloud: &MotorStampedCloud,
    base_points: &[Vec3],
    tree: &KdTree,
    primitives: &[PlanePrimitive],
    params: &AssociationParams,
) -> Result<Vec<Correspondence>> {
    Ok(associate_indexed(cloud, base_points, tree, primitives, params)?
        .into_iter()
        .map(|c| c.correspondence)
        .collect())
}

/// As [`associate`], keeping track of where each pair came from.
pub fn associate_indexed(
    cloud: &MotorStampedCloud,
    base_points: &[Vec3],
    tree: &KdTree,
    primitives: &[PlanePrimitive],
    params: &AssociationParams,
) -> Result<Vec<IndexedCorrespondence>> {
    let per_primitive: Vec<Vec<IndexedCorrespondence>> = primitives
        .par_iter()
        .enumerate()
        .map(|(pi, prim)| {
            let anchor_idx = prim.plane.anchor_index;
            let anchor = base_points[anchor_idx];
            let n = prim.plane.normal;
            let theta_n = cloud.points[anchor_idx].angle;
            let partners = tree.knn_filtered(
                &anchor,
                params.pairs_per_primitive,
                params.search_radius * params.search_radius,
                |j| {
                    wrap_angle(cloud.points[j].angle - theta_n).abs() >= params.min_angle_gap
                        && n.dot(&(base_points[j] - anchor)).abs() <= params.max_plane_distance
                },
            );
            let a = &cloud.points[anchor_idx];
            partners
                .into_iter()
                .map(|nb| {
                    let b = &cloud.points[nb.index];
                    IndexedCorrespondence {
                        primitive: pi,
                        partner_index: nb.index,
                        correspondence: Correspondence {
                            normal: n,
                            point_n: a.point,
                            time_n: a.time,
                            angle_n: a.angle,
                            point_m: b.point,
                            time_m: b.time,
                            angle_m: b.angle,
                            weight: prim.weight,
                        },
                    }
                })
                .collect()
        })
        .collect();
    let out: Vec<IndexedCorrespondence> = per_primitive.into_iter().flatten().collect();
    if out.is_empty() {
        return Err(CalibError::InsufficientOverlap);
    }
    Ok(out)
}

/// Maps every cloud point into the base frame under `ext`.
pub fn base_frame_points(cloud: &MotorStampedCloud, ext: &ExtrinsicParams) -> Vec<Vec3> {
    let mount = ext.mount();
    cloud
        .points
        .par_iter()
        .map(|p| mount.apply(&p.point, &rot_z(p.angle)))
        .collect()
}

/// Convenience wrapper that builds the base-frame index itself.
pub fn build_correspondences(
    cloud: &MotorStampedCloud,
    primitives: &[PlanePrimitive],
    ext: &ExtrinsicParams,
    params: &AssociationParams,
) -> Result<Vec<Correspondence>> {
    if primitives.is_empty() {
        return Err(CalibError::EmptyInput("no primitives to associate".into()));
    }
    ext.validate()?;
    let pts = base_frame_points(cloud, ext);
    let tree = KdTree::build(pts.clone());
    associate(cloud, &pts, &tree, primitives, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(n: Vec3, pn: Vec3, an: f64, pm: Vec3, am: f64) -> Correspondence {
        Correspondence {
            normal: n.normalize(),
            point_n: pn,
            time_n: an,
            angle_n: an,
            point_m: pm,
            time_m: am,
            angle_m: am,
            weight: 1.0,
        }
    }

    #[test]
    fn identical_observations_give_zero() {
        let c = pair(Vec3::z(), Vec3::new(1.0, 2.0, 3.0), 0.4, Vec3::new(1.0, 2.0, 3.0), 0.4);
        let ext = ExtrinsicParams::from_degrees(2.0, -1.0, 0.1, 0.2);
        assert_eq!(c.residual(&ext.mount()), 0.0);
    }

    #[test]
    fn in_plane_offset_vanishes_and_normal_offset_is_measured() {
        let ext = ExtrinsicParams::identity();
        let n = Vec3::new(0.0, 0.0, 1.0);
        let c = pair(n, Vec3::new(1.0, 0.0, 2.0), 0.0, Vec3::new(-0.3, 4.0, 2.0), 0.0);
        assert!(c.residual(&ext.mount()).abs() < 1e-12);
        let c = pair(n, Vec3::new(1.0, 0.0, 2.0), 0.0, Vec3::new(1.0, 0.0, 2.01), 0.0);
        assert!((c.residual(&ext.mount()) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn trajectory_lookup_matches_stored_angles() {
        let traj = MotorTrajectory::new(vec![(0.0, 0.0), (2.0, 4.0)]).unwrap();
        let ext = ExtrinsicParams::from_degrees(1.0, 2.0, 0.05, -0.02);
        let mut c = pair(Vec3::x(), Vec3::new(3.0, 1.0, 0.0), 0.0, Vec3::new(2.0, -1.0, 0.5), 0.0);
        c.time_n = 0.25;
        c.angle_n = 0.5;
        c.time_m = 1.5;
        c.angle_m = 3.0;
        assert_eq!(residual(&c, &ext, &traj), c.residual(&ext.mount()));
    }

    #[test]
    fn wrap_range() {
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(-TAU - 0.1) + 0.1).abs() < 1e-12);
        assert_eq!(wrap_angle(PI), PI);
    }

    proptest! {
        #[test]
        fn swap_is_antisymmetric(nx in -1.0f64..1.0, ny in -1.0f64..1.0, nz in 0.1f64..1.0,
                                 a in -3.0f64..3.0, b in -3.0f64..3.0,
                                 px in -5.0f64..5.0, py in -5.0f64..5.0, qz in -2.0f64..2.0,
                                 roll in -0.3f64..0.3, pitch in -0.3f64..0.3) {
            let c = pair(Vec3::new(nx, ny, nz), Vec3::new(px, py, 1.0), a, Vec3::new(py, px, qz), b);
            let m = ExtrinsicParams::new(roll, pitch, 0.03, -0.07).mount();
            prop_assert!((c.residual(&m) + c.swapped().residual(&m)).abs() < 1e-12);
        }

        #[test]
        fn in_plane_displacement_is_invisible(u in -3.0f64..3.0, v in -3.0f64..3.0, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            // Build two LiDAR points whose base-frame images differ only in-plane.
            let ext = ExtrinsicParams::from_degrees(1.5, -2.0, 0.04, 0.01);
            let n = Vec3::new(0.3, -0.2, 0.9).normalize();
            let e1 = n.cross(&Vec3::x()).normalize();
            let e2 = n.cross(&e1);
            let base_n = Vec3::new(2.0, 1.0, 0.5);
            let base_m = base_n + e1 * u + e2 * v;
            let pn = crate::geometry::inverse_transform_point(&base_n, &ext, &rot_z(a));
            let pm = crate::geometry::inverse_transform_point(&base_m, &ext, &rot_z(b));
            let c = pair(n, pn, a, pm, b);
            prop_assert!(c.residual(&ext.mount()).abs() < 1e-12);
        }
    }
}
