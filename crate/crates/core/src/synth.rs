//! Synthetic scans of parametric scenes with a known mounting transform.
//!
//! Rays are cast in the LiDAR frame, pushed into the base frame with the true
//! extrinsic and the motor angle at the ray's timestamp, intersected with the
//! scene, and the hit range (plus Gaussian range noise) is written back along
//! the LiDAR-frame ray. With zero noise, transforming an emitted point with the
//! true extrinsic lands it exactly on the surface it came from.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud_io::{MotorStampedCloud, StampedPoint};
use crate::error::{CalibError, Result};
use crate::geometry::{rot_z, ExtrinsicParams, MotorTrajectory, Vec3};

/// A bounded planar rectangle.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub center: Vec3,
    pub normal: Vec3,
    /// In-plane axis for the first half-extent; the second axis is `normal x axis_u`.
    pub axis_u: Vec3,
    pub half_extents: [f64; 2],
}

impl Patch {
    /// Builds a patch, picking a canonical in-plane axis.
    pub fn new(center: Vec3, normal: Vec3, half_extents: [f64; 2]) -> Result<Self> {
        let n = normal.try_normalize(1e-12).ok_or_else(|| {
            CalibError::Validation("patch normal must be non-zero".into())
        })?;
        let helper = if n.z.abs() < 0.9 { Vec3::z() } else { Vec3::x() };
        let axis_u = helper.cross(&n).normalize();
        Self::with_axis(center, n, axis_u, half_extents)
    }

    pub fn with_axis(center: Vec3, normal: Vec3, axis_u: Vec3, half_extents: [f64; 2]) -> Result<Self> {
        let patch = Self {
            center,
            normal: normal.normalize(),
            axis_u: (axis_u - normal.normalize() * normal.normalize().dot(&axis_u)).normalize(),
            half_extents,
        };
        patch.validate()?;
        Ok(patch)
    }

    pub fn axis_v(&self) -> Vec3 {
        self.normal.cross(&self.axis_u)
    }

    pub fn validate(&self) -> Result<()> {
        if (self.normal.norm() - 1.0).abs() > 1e-12 {
            return Err(CalibError::Validation("patch normal must be unit length".into()));
        }
        if self.half_extents.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
            return Err(CalibError::Validation(format!(
                "patch half extents must be positive, got {:?}",
                self.half_extents
            )));
        }
        if self.normal.dot(&self.axis_u).abs() > 1e-9 {
            return Err(CalibError::Validation("patch axis_u must be orthogonal to its normal".into()));
        }
        Ok(())
    }

    /// Signed distance of `p` to the infinite plane through the patch.
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(&(p - self.center))
    }

    fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        let denom = self.normal.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = self.normal.dot(&(self.center - origin)) / denom;
        if t <= 0.0 {
            return None;
        }
        let local = origin + dir * t - self.center;
        let inside = local.dot(&self.axis_u).abs() <= self.half_extents[0]
            && local.dot(&self.axis_v()).abs() <= self.half_extents[1];
        inside.then_some(t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sphere {
    pub center: Vec3,
    pub radius: f64,
}

impl Sphere {
    fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        let oc = origin - self.center;
        let b = oc.dot(dir);
        let c = oc.norm_squared() - self.radius * self.radius;
        let disc = b * b - c;
        if disc < 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        [-b - sq, -b + sq].into_iter().find(|t| *t > 0.0)
    }
}

/// Planar patches plus optional clutter spheres, all in the base frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SceneModel {
    pub planes: Vec<Patch>,
    pub spheres: Vec<Sphere>,
}

/// Which scene surface a simulated point came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SurfaceId {
    Plane(usize),
    Sphere(usize),
}

impl SceneModel {
    pub fn validate(&self) -> Result<()> {
        for p in &self.planes {
            p.validate()?;
        }
        if self.spheres.iter().any(|s| !(s.radius > 0.0)) {
            return Err(CalibError::Validation("sphere radius must be positive".into()));
        }
        Ok(())
    }

    /// Closest hit along a unit ray.
    pub fn cast(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, SurfaceId)> {
        let planes = self
            .planes
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.intersect(origin, dir).map(|t| (t, SurfaceId::Plane(i))));
        let spheres = self
            .spheres
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.intersect(origin, dir).map(|t| (t, SurfaceId::Sphere(i))));
        planes.chain(spheres).min_by(|a, b| a.0.total_cmp(&b.0))
    }

    /// Scatters `count` spheres with centers inside `[lo, hi]` and radii in `radius`.
    pub fn add_clutter(&mut self, count: usize, lo: Vec3, hi: Vec3, radius: (f64, f64), seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..count {
            let center = Vec3::new(
                rng.random_range(lo.x..=hi.x),
                rng.random_range(lo.y..=hi.y),
                rng.random_range(lo.z..=hi.z),
            );
            let r = rng.random_range(radius.0..=radius.1);
            self.spheres.push(Sphere { center, radius: r });
        }
    }

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
        let file: SceneFile =
            toml::from_str(text).map_err(|e| CalibError::Validation(format!("scene file: {e}")))?;
        let planes = file
            .plane
            .into_iter()
            .map(|p| {
                let center = Vec3::from(p.center);
                let normal = Vec3::from(p.normal);
                match p.axis_u {
                    Some(u) => Patch::with_axis(center, normal, Vec3::from(u), p.half_extents),
                    None => Patch::new(center, normal, p.half_extents),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let spheres = file
            .sphere
            .into_iter()
            .map(|s| Sphere {
                center: Vec3::from(s.center),
                radius: s.radius,
            })
            .collect();
        let scene = Self { planes, spheres };
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_toml(&self) -> String {
        let file = SceneFile {
            plane: self
                .planes
                .iter()
                .map(|p| PlaneSpec {
                    center: p.center.into(),
                    normal: p.normal.into(),
                    axis_u: Some(p.axis_u.into()),
                    half_extents: p.half_extents,
                })
                .collect(),
            sphere: self
                .spheres
                .iter()
                .map(|s| SphereSpec {
                    center: s.center.into(),
                    radius: s.radius,
                })
                .collect(),
        };
        toml::to_string(&file).expect("scene serializes")
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    #[serde(default)]
    plane: Vec<PlaneSpec>,
    #[serde(default)]
    sphere: Vec<SphereSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlaneSpec {
    center: [f64; 3],
    normal: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    axis_u: Option<[f64; 3]>,
    half_extents: [f64; 2],
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SphereSpec {
    center: [f64; 3],
    radius: f64,
}

/// Axis-aligned room: floor, ceiling and four walls, normals pointing out of the room.
///
/// The base origin (motor axis) sits at 40% of the room height and is offset from
/// the room center by `(-0.07 w, 0.05 d)` so opposite walls are at different ranges.
pub fn make_room_scene(width: f64, depth: f64, height: f64) -> Result<SceneModel> {
    if [width, depth, height].iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(CalibError::Validation(format!(
            "room dimensions must be positive, got {width} x {depth} x {height}"
        )));
    }
    let c = Vec3::new(-0.07 * width, 0.05 * depth, 0.1 * height);
    let (hw, hd, hh) = (width / 2.0, depth / 2.0, height / 2.0);
    let planes = vec![
        Patch::with_axis(c - Vec3::z() * hh, -Vec3::z(), Vec3::x(), [hw, hd])?,
        Patch::with_axis(c + Vec3::z() * hh, Vec3::z(), Vec3::x(), [hw, hd])?,
        Patch::with_axis(c - Vec3::x() * hw, -Vec3::x(), Vec3::y(), [hd, hh])?,
        Patch::with_axis(c + Vec3::x() * hw, Vec3::x(), Vec3::y(), [hd, hh])?,
        Patch::with_axis(c - Vec3::y() * hd, -Vec3::y(), Vec3::x(), [hw, hh])?,
        Patch::with_axis(c + Vec3::y() * hd, Vec3::y(), Vec3::x(), [hw, hh])?,
    ];
    Ok(SceneModel {
        planes,
        spheres: Vec::new(),
    })
}

/// Sparse outdoor-like scene: a few randomly oriented patches facing the sensor
/// roughly, plus clutter spheres.
pub fn make_sparse_scene(n_planes: usize, n_clutter: usize, seed: u64) -> Result<SceneModel> {
    if n_planes == 0 {
        return Err(CalibError::Validation("sparse scene needs at least one plane".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut planes = Vec::with_capacity(n_planes);
    for _ in 0..n_planes {
        let azimuth = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let dist = rng.random_range(4.0..12.0);
        let center = Vec3::new(dist * azimuth.cos(), dist * azimuth.sin(), rng.random_range(-0.5..1.0));
        let tilt: f64 = rng.random_range(-0.5..0.5);
        let swing = rng.random_range(-0.6..0.6);
        let facing = -Vec3::new((azimuth + swing).cos(), (azimuth + swing).sin(), 0.0);
        let normal = (facing * tilt.cos() + Vec3::z() * tilt.sin()).normalize();
        let half = [rng.random_range(1.5..4.0), rng.random_range(1.0..2.5)];
        planes.push(Patch::new(center, normal, half)?);
    }
    let mut scene = SceneModel {
        planes,
        spheres: Vec::new(),
    };
    let clutter_seed = rng.random::<u64>();
    scene.add_clutter(
        n_clutter,
        Vec3::new(-10.0, -10.0, -1.0),
        Vec3::new(10.0, 10.0, 1.5),
        (0.2, 0.8),
        clutter_seed,
    );
    Ok(scene)
}

/// Simplified scan pattern: each sweep fires `elevation_lines` beams across the
/// elevation window at `rays_per_line` azimuths. Successive sweeps shift both the
/// azimuth start and the elevation lines by a golden-ratio fraction of one spacing
/// so the pattern does not repeat.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorSpec {
    pub azimuth_fov_deg: f64,
    pub elevation_fov_deg: f64,
    pub elevation_center_deg: f64,
    pub elevation_lines: usize,
    pub rays_per_line: usize,
    /// seconds per sweep
    pub sweep_period: f64,
    /// meters, standard deviation along the ray
    pub range_noise_sigma: f64,
    pub range_min: f64,
    pub range_max: f64,
}

impl Default for SensorSpec {
    fn default() -> Self {
        Self {
            azimuth_fov_deg: 360.0,
            elevation_fov_deg: 59.0,
            elevation_center_deg: 0.0,
            elevation_lines: 16,
            rays_per_line: 1000,
            sweep_period: 0.1,
            range_noise_sigma: 0.0,
            range_min: 0.1,
            range_max: 40.0,
        }
    }
}

impl SensorSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.azimuth_fov_deg > 0.0
            && self.azimuth_fov_deg <= 360.0
            && self.elevation_fov_deg > 0.0
            && self.elevation_fov_deg <= 180.0
            && self.elevation_lines > 0
            && self.rays_per_line > 0
            && self.sweep_period > 0.0
            && self.range_noise_sigma >= 0.0
            && self.range_min >= 0.0
            && self.range_max > self.range_min;
        if ok {
            Ok(())
        } else {
            Err(CalibError::Validation(format!("invalid sensor spec: {self:?}")))
        }
    }

    fn rays_per_sweep(&self) -> usize {
        self.elevation_lines * self.rays_per_line
    }
}

/// A simulated scan together with the surface each point was sampled from.
#[derive(Debug, Clone)]
pub struct LabeledScan {
    pub cloud: MotorStampedCloud,
    pub labels: Vec<SurfaceId>,
}

pub fn simulate_scan(
    scene: &SceneModel,
    sensor: &SensorSpec,
    traj: &MotorTrajectory,
    ext_true: &ExtrinsicParams,
    seed: u64,
) -> Result<MotorStampedCloud> {
    simulate_labeled_scan(scene, sensor, traj, ext_true, seed).map(|s| s.cloud)
}

pub fn simulate_labeled_scan(
    scene: &SceneModel,
    sensor: &SensorSpec,
    traj: &MotorTrajectory,
    ext_true: &ExtrinsicParams,
    seed: u64,
) -> Result<LabeledScan> {
    scene.validate()?;
    sensor.validate()?;
    ext_true.validate()?;
    if traj.swept_angle() < TAU - 1e-9 {
        return Err(CalibError::Validation(format!(
            "trajectory sweeps {:.3} rad, need at least one full revolution",
            traj.swept_angle()
        )));
    }
    let span = traj.end() - traj.start();
    let sweeps = (span / sensor.sweep_period + 1e-9).floor() as usize;
    if sweeps == 0 {
        return Err(CalibError::Validation(
            "trajectory shorter than one sensor sweep".into(),
        ));
    }
    let noise = if sensor.range_noise_sigma > 0.0 {
        Some(Normal::new(0.0, sensor.range_noise_sigma).map_err(|e| CalibError::Validation(e.to_string()))?)
    } else {
        None
    };
    let mount = ext_true.mount();

    let per_sweep: Vec<Vec<(StampedPoint, SurfaceId)>> = (0..sweeps)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            simulate_sweep(scene, sensor, traj, &mount, k, noise.as_ref(), &mut rng)
        })
        .collect();

    let total: usize = per_sweep.iter().map(Vec::len).sum();
    let mut points = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for (p, l) in per_sweep.into_iter().flatten() {
        points.push(p);
        labels.push(l);
    }
    if points.is_empty() {
        return Err(CalibError::EmptyInput("no ray intersected the scene".into()));
    }
    Ok(LabeledScan {
        cloud: MotorStampedCloud::new("synthetic", points)?,
        labels,
    })
}

const GOLDEN: f64 = 0.618_033_988_749_894_9;
const SILVER: f64 = 0.414_213_562_373_095_1;

fn simulate_sweep(
    scene: &SceneModel,
    sensor: &SensorSpec,
    traj: &MotorTrajectory,
    mount: &crate::geometry::Mount,
    k: usize,
    noise: Option<&Normal<f64>>,
    rng: &mut ChaCha8Rng,
) -> Vec<(StampedPoint, SurfaceId)> {
    let n_rays = sensor.rays_per_sweep();
    let t0 = traj.start() + k as f64 * sensor.sweep_period;
    let az_off = (k as f64 * GOLDEN).fract();
    let el_off = (0.5 + k as f64 * SILVER).fract();
    let az_fov = sensor.azimuth_fov_deg.to_radians();
    let el_fov = sensor.elevation_fov_deg.to_radians();
    let el_lo = sensor.elevation_center_deg.to_radians() - el_fov / 2.0;
    let az_step = az_fov / sensor.rays_per_line as f64;
    let el_step = el_fov / sensor.elevation_lines as f64;
    let elevations: Vec<(f64, f64)> = (0..sensor.elevation_lines)
        .map(|l| (el_lo + (l as f64 + el_off) * el_step).sin_cos())
        .collect();

    let mut out = Vec::with_capacity(n_rays);
    for a in 0..sensor.rays_per_line {
        let (saz, caz) = (-az_fov / 2.0 + (a as f64 + az_off) * az_step).sin_cos();
        for (l, &(sel, cel)) in elevations.iter().enumerate() {
            let j = a * sensor.elevation_lines + l;
            let t = t0 + sensor.sweep_period * j as f64 / n_rays as f64;
            let angle = traj.angle_at_clamped(t);
            let motor = rot_z(angle);
            let dir_l = Vec3::new(cel * caz, cel * saz, sel);
            let origin = motor * mount.translation;
            let dir_b = motor * (mount.rotation * dir_l);
            let Some((range, surface)) = scene.cast(&origin, &dir_b) else {
                continue;
            };
            if range < sensor.range_min || range > sensor.range_max {
                continue;
            }
            let measured = match noise {
                Some(n) => range + n.sample(rng),
                None => range,
            };
            out.push((
                StampedPoint {
                    point: dir_l * measured,
                    time: t,
                    angle,
                },
                surface,
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::transform_point;

    fn small_sensor(sigma: f64) -> SensorSpec {
        SensorSpec {
            elevation_lines: 8,
            rays_per_line: 200,
            range_noise_sigma: sigma,
            ..SensorSpec::default()
        }
    }

    fn one_rev() -> MotorTrajectory {
        MotorTrajectory::constant_rate(1.0, 1.0, 101).unwrap()
    }

    fn surface_distance(scene: &SceneModel, id: SurfaceId, p: &Vec3) -> f64 {
        match id {
            SurfaceId::Plane(i) => scene.planes[i].signed_distance(p),
            SurfaceId::Sphere(i) => (p - scene.spheres[i].center).norm() - scene.spheres[i].radius,
        }
    }

    /// Brute-force RMS of point-to-source-surface distances after mapping with `ext`.
    fn rms_to_surfaces(scene: &SceneModel, scan: &LabeledScan, ext: &ExtrinsicParams) -> f64 {
        let sum: f64 = scan
            .cloud
            .points
            .iter()
            .zip(&scan.labels)
            .map(|(p, id)| {
                let b = transform_point(&p.point, ext, &rot_z(p.angle));
                surface_distance(scene, *id, &b).powi(2)
            })
            .sum();
        (sum / scan.labels.len() as f64).sqrt()
    }

    #[test]
    fn room_layout() {
        let room = make_room_scene(10.0, 8.0, 3.0).unwrap();
        assert_eq!(room.planes.len(), 6);
        let center = (room.planes[0].center + room.planes[1].center) / 2.0;
        for p in &room.planes {
            assert!(p.normal.dot(&(p.center - center)) > 0.0, "normals point out of the room");
        }
        for pair in room.planes.chunks(2) {
            assert!((pair[0].normal + pair[1].normal).norm() < 1e-15);
        }
        assert!(room.planes[0].normal.dot(&room.planes[2].normal).abs() < 1e-15);
        assert!(room.planes[2].normal.dot(&room.planes[4].normal).abs() < 1e-15);
        assert!(make_room_scene(0.0, 8.0, 3.0).is_err());
    }

    #[test]
    fn sparse_scene_contract() {
        let one = make_sparse_scene(1, 0, 5).unwrap();
        assert_eq!((one.planes.len(), one.spheres.len()), (1, 0));
        let a = make_sparse_scene(4, 20, 9).unwrap();
        assert_eq!((a.planes.len(), a.spheres.len()), (4, 20));
        assert_eq!(a, make_sparse_scene(4, 20, 9).unwrap());
        assert_ne!(a, make_sparse_scene(4, 20, 10).unwrap());
        assert!(make_sparse_scene(0, 3, 1).is_err());
    }

    #[test]
    fn noiseless_identity_points_lie_on_sources() {
        let room = make_room_scene(10.0, 8.0, 3.0).unwrap();
        let ext = ExtrinsicParams::identity();
        let scan = simulate_labeled_scan(&room, &small_sensor(0.0), &one_rev(), &ext, 1).unwrap();
        assert!(scan.cloud.len() > 10_000);
        for (p, id) in scan.cloud.points.iter().zip(&scan.labels) {
            let b = transform_point(&p.point, &ext, &rot_z(p.angle));
            assert!(surface_distance(&room, *id, &b).abs() < 1e-9);
        }
    }

    #[test]
    fn miscalibration_shows_up_only_under_wrong_extrinsics() {
        let room = make_room_scene(10.0, 8.0, 3.0).unwrap();
        let ext = ExtrinsicParams::from_degrees(2.0, -1.5, 0.05, -0.03);
        let scan = simulate_labeled_scan(&room, &small_sensor(0.0), &one_rev(), &ext, 1).unwrap();
        let max_true = scan
            .cloud
            .points
            .iter()
            .zip(&scan.labels)
            .map(|(p, id)| surface_distance(&room, *id, &transform_point(&p.point, &ext, &rot_z(p.angle))).abs())
            .fold(0.0, f64::max);
        assert!(max_true < 1e-9);
        assert!(rms_to_surfaces(&room, &scan, &ExtrinsicParams::identity()) > 0.01);
    }

    #[test]
    fn roll_perturbation_increases_misfit_monotonically() {
        let room = make_room_scene(10.0, 8.0, 3.0).unwrap();
        let ext = ExtrinsicParams::from_degrees(2.0, -1.5, 0.05, -0.03);
        let scan = simulate_labeled_scan(&room, &small_sensor(0.0), &one_rev(), &ext, 3).unwrap();
        let mut last = rms_to_surfaces(&room, &scan, &ext);
        for deg in [0.25, 0.5, 1.0] {
            let off = ExtrinsicParams {
                roll: ext.roll + f64::to_radians(deg),
                ..ext
            };
            let rms = rms_to_surfaces(&room, &scan, &off);
            assert!(rms > last, "{deg} deg: {rms} <= {last}");
            last = rms;
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let room = make_room_scene(10.0, 8.0, 3.0).unwrap();
        let ext = ExtrinsicParams::from_degrees(1.0, 1.0, 0.02, 0.0);
        let a = simulate_scan(&room, &small_sensor(0.01), &one_rev(), &ext, 42).unwrap();
        let b = simulate_scan(&room, &small_sensor(0.01), &one_rev(), &ext, 42).unwrap();
        let c = simulate_scan(&room, &small_sensor(0.01), &one_rev(), &ext, 43).unwrap();
        assert!(a.points.iter().zip(&b.points).all(|(x, y)| x.point.x.to_bits() == y.point.x.to_bits()));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn range_noise_statistics() {
        let room = make_room_scene(10.0, 8.0, 3.0).unwrap();
        let ext = ExtrinsicParams::from_degrees(2.0, -1.5, 0.05, -0.03);
        let sigma = 0.005;
        let sensor = SensorSpec {
            range_noise_sigma: sigma,
            ..SensorSpec::default()
        };
        let traj = MotorTrajectory::constant_rate(1.6, 1.0, 161).unwrap();
        let scan = simulate_labeled_scan(&room, &sensor, &traj, &ext, 11).unwrap();
        assert!(scan.cloud.len() >= 100_000);
        // Range noise projects onto the surface normal by cos(incidence); undo
        // that per point so the statistic targets sigma itself.
        let scaled: Vec<f64> = scan
            .cloud
            .points
            .iter()
            .zip(&scan.labels)
            .filter_map(|(p, id)| {
                let SurfaceId::Plane(i) = id else { return None };
                let b = transform_point(&p.point, &ext, &rot_z(p.angle));
                let motor = rot_z(p.angle);
                let dir = (motor * (ext.rotation() * p.point.normalize())).normalize();
                let cos = dir.dot(&room.planes[*i].normal).abs();
                Some(room.planes[*i].signed_distance(&b) / cos)
            })
            .collect();
        let n = scaled.len() as f64;
        let mean = scaled.iter().sum::<f64>() / n;
        let std = (scaled.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((std - sigma).abs() < 0.1 * sigma, "std {std}");
    }

    #[test]
    fn empty_scene_and_short_trajectory() {
        let scene = SceneModel {
            planes: vec![Patch::new(Vec3::new(0.0, 0.0, 100.0), Vec3::z(), [1.0, 1.0]).unwrap()],
            spheres: vec![],
        };
        let err = simulate_scan(&scene, &small_sensor(0.0), &one_rev(), &ExtrinsicParams::identity(), 0);
        assert!(matches!(err, Err(CalibError::EmptyInput(_))));
        let half = MotorTrajectory::constant_rate(1.0, 0.5, 11).unwrap();
        let room = make_room_scene(10.0, 8.0, 3.0).unwrap();
        assert!(simulate_scan(&room, &small_sensor(0.0), &half, &ExtrinsicParams::identity(), 0).is_err());
    }

    #[test]
    fn scene_file_round_trip() {
        let mut scene = make_room_scene(6.0, 5.0, 3.0).unwrap();
        scene.add_clutter(3, Vec3::repeat(-1.0), Vec3::repeat(1.0), (0.1, 0.3), 7);
        let text = scene.to_toml();
        let back = SceneModel::from_toml(&text).unwrap();
        assert_eq!(back.planes.len(), 6);
        assert_eq!(back.spheres, scene.spheres);
        for (a, b) in back.planes.iter().zip(&scene.planes) {
            assert!((a.center - b.center).norm() < 1e-12 && (a.normal - b.normal).norm() < 1e-12);
        }
        let bad = "[[plane]]\ncenter=[0,0,0]\nnormal=[0,0,1]\nhalf_extents=[1,1]\ncolour=1\n";
        assert!(SceneModel::from_toml(bad).is_err());
        let minimal = "[[plane]]\ncenter=[0,0,0]\nnormal=[0,0,2]\nhalf_extents=[1,0.5]\n";
        let s = SceneModel::from_toml(minimal).unwrap();
        assert!((s.planes[0].normal.norm() - 1.0).abs() < 1e-15);
    }
}
