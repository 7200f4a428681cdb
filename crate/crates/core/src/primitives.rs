//! Weighted planar primitives.
//!
//! Extraction runs in the base frame under the current extrinsic estimate:
//! voxel kernels, an adaptive kNN neighbourhood per kernel over the full cloud,
//! a distance-weighted plane fit, planarity/condition filtering, and finally
//! normal homogenization so that no single orientation dominates the problem.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cloud_io::MotorStampedCloud;
use crate::error::{CalibError, Result};
use crate::geometry::Vec3;
use crate::spatial::KdTree;

/// Voxels with fewer points than this produce no kernel.
pub const MIN_VOXEL_SUPPORT: usize = 10;
/// Smallest neighbourhood a plane can be fitted to.
pub const MIN_NEIGHBORS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelKernel {
    /// Centroid of the member points.
    pub center: Vec3,
    pub voxel: [i64; 3],
    pub count: usize,
}

pub fn voxel_index(p: &Vec3, voxel_size: f64) -> [i64; 3] {
    [
        (p.x / voxel_size).floor() as i64,
        (p.y / voxel_size).floor() as i64,
        (p.z / voxel_size).floor() as i64,
    ]
}

/// Groups points into cubic voxels and returns one kernel per voxel holding at
/// least `min_support` points, ordered by voxel index.
pub fn voxel_downsample(points: &[Vec3], voxel_size: f64, min_support: usize) -> Result<Vec<VoxelKernel>> {
    if !(voxel_size > 0.0) || !voxel_size.is_finite() {
        return Err(CalibError::Validation(format!(
            "voxel size must be positive, got {voxel_size}"
        )));
    }
    let mut cells: HashMap<[i64; 3], (Vec3, usize)> = HashMap::new();
    for p in points {
        let e = cells.entry(voxel_index(p, voxel_size)).or_insert((Vec3::zeros(), 0));
        e.0 += p;
        e.1 += 1;
    }
    let mut kernels: Vec<VoxelKernel> = cells
        .into_iter()
        .filter(|(_, (_, n))| *n >= min_support)
        .map(|(voxel, (sum, count))| VoxelKernel {
            center: sum / count as f64,
            voxel,
            count,
        })
        .collect();
    if kernels.is_empty() {
        return Err(CalibError::EmptyResult { min_support });
    }
    kernels.sort_by(|a, b| a.voxel.cmp(&b.voxel));
    Ok(kernels)
}

/// Neighbourhood size `min(k_max, floor(gamma * total))`, never below three.
pub fn adaptive_k(total_points: usize, gamma: f64, k_max: usize) -> usize {
    let scaled = (gamma * total_points as f64).floor().max(0.0) as usize;
    k_max.min(scaled).max(MIN_NEIGHBORS)
}

/// How neighbours are weighted inside a local plane fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceWeighting {
    /// `1 - sqrt(d_i / d_max)` with `d` the squared distance to the kernel center.
    Linear,
    Uniform,
}

pub fn distance_weights(neighbors: &[Vec3], center: &Vec3, weighting: DistanceWeighting) -> Vec<f64> {
    match weighting {
        DistanceWeighting::Uniform => vec![1.0; neighbors.len()],
        DistanceWeighting::Linear => {
            let d: Vec<f64> = neighbors.iter().map(|p| (p - center).norm_squared()).collect();
            let d_max = d.iter().copied().fold(0.0, f64::max);
            if d_max == 0.0 {
                return vec![1.0; neighbors.len()];
            }
            d.iter().map(|di| 1.0 - (di / d_max).sqrt()).collect()
        }
    }
}

/// `2 (s1 - s2) / (s0 + s1 + s2)` for descending singular values.
pub fn planarity(singular_values: [f64; 3]) -> f64 {
    let [s0, s1, s2] = singular_values;
    let sum = s0 + s1 + s2;
    if sum <= 0.0 {
        return 0.0;
    }
    2.0 * (s1 - s2) / sum
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneFit {
    /// Unit normal, oriented toward the base origin.
    pub normal: Vec3,
    /// Weighted centroid of the neighbourhood.
    pub centroid: Vec3,
    /// Descending singular values of the weighted covariance.
    pub singular_values: [f64; 3],
    pub alpha: f64,
}

/// Fits a plane to a neighbourhood with distance weights relative to `kernel_center`.
///
/// The normal is the singular vector of the weighted covariance belonging to the
/// smallest singular value, flipped so it faces the sensor (base origin).
pub fn fit_plane_weighted(
    neighbors: &[Vec3],
    kernel_center: &Vec3,
    weighting: DistanceWeighting,
) -> Result<PlaneFit> {
    if neighbors.len() < MIN_NEIGHBORS {
        return Err(CalibError::DegenerateFit(format!(
            "need at least {MIN_NEIGHBORS} neighbours, got {}",
            neighbors.len()
        )));
    }
    let weights = distance_weights(neighbors, kernel_center, weighting);
    let wsum: f64 = weights.iter().sum();
    if !(wsum > 0.0) {
        return Err(CalibError::DegenerateFit("all neighbour weights vanish".into()));
    }
    let centroid = neighbors
        .iter()
        .zip(&weights)
        .fold(Vec3::zeros(), |acc, (p, w)| acc + p * *w)
        / wsum;
    let mut cov = Matrix3::zeros();
    for (p, w) in neighbors.iter().zip(&weights) {
        let d = p - centroid;
        cov += d * d.transpose() * *w;
    }
    cov /= wsum;

    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let singular_values = order.map(|i| eig.eigenvalues[i].max(0.0));
    if singular_values[0] <= 0.0 {
        return Err(CalibError::DegenerateFit("neighbourhood points coincide".into()));
    }
    if singular_values[1] <= 1e-12 * singular_values[0] {
        return Err(CalibError::DegenerateFit("neighbourhood points are collinear".into()));
    }
    let mut normal: Vec3 = eig.eigenvectors.column(order[2]).into_owned();
    normal.normalize_mut();
    if normal.dot(&(-centroid)) < 0.0 {
        normal = -normal;
    }
    Ok(PlaneFit {
        normal,
        centroid,
        singular_values,
        alpha: planarity(singular_values),
    })
}

/// A fitted local plane, before filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneCandidate {
    pub kernel_center: Vec3,
    /// Index (into the cloud) of the supporting neighbour closest to the kernel center.
    pub anchor_index: usize,
    /// Base-frame position of the anchor under the extrinsic used for extraction.
    pub anchor: Vec3,
    pub normal: Vec3,
    pub singular_values: [f64; 3],
    pub alpha: f64,
    pub mean_time: f64,
    pub mean_angle: f64,
    pub support: usize,
    /// Cloud indices of the neighbourhood used for the fit.
    pub neighbors: Vec<usize>,
}

impl PlaneCandidate {
    /// `sigma0 / sigma2`, infinite for an exactly flat neighbourhood.
    pub fn condition_number(&self) -> f64 {
        let [s0, _, s2] = self.singular_values;
        if s2 > 0.0 {
            s0 / s2
        } else {
            f64::INFINITY
        }
    }
}

/// A retained plane with its weight in the global cost.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanePrimitive {
    pub plane: PlaneCandidate,
    pub weight: f64,
}

/// Keeps candidates with `alpha >= planarity_min` and, when `cond_max` is set,
/// `sigma0 / sigma2 <= cond_max`. Retained primitives are weighted by `alpha`.
pub fn filter_primitives(
    candidates: Vec<PlaneCandidate>,
    planarity_min: f64,
    cond_max: Option<f64>,
) -> Vec<PlanePrimitive> {
    candidates
        .into_iter()
        .filter(|c| c.alpha >= planarity_min)
        .filter(|c| cond_max.is_none_or(|m| c.condition_number() <= m))
        .map(|plane| PlanePrimitive {
            weight: plane.alpha,
            plane,
        })
        .collect()
}

/// Polar angles of a unit normal: `theta = acos(n_z)` in `[0, pi]`,
/// `phi = atan2(n_y, n_x)` in `[-pi, pi]`.
pub fn normal_to_polar(n: &Vec3) -> (f64, f64) {
    (n.z.clamp(-1.0, 1.0).acos(), n.y.atan2(n.x))
}

/// `(theta_bin, phi_bin)` for a bin width in degrees.
pub fn polar_bin(n: &Vec3, bin_width_deg: f64) -> (usize, usize) {
    let w = bin_width_deg.to_radians();
    let n_theta = (180.0 / bin_width_deg).round() as usize;
    let n_phi = 2 * n_theta;
    let (theta, phi) = normal_to_polar(n);
    let tb = ((theta / w).floor() as usize).min(n_theta - 1);
    let pb = (((phi + PI) / w).floor() as usize).min(n_phi - 1);
    (tb, pb)
}

fn check_bin_width(bin_width_deg: f64) -> Result<()> {
    let bins = 180.0 / bin_width_deg;
    if !(bin_width_deg > 0.0) || (bins - bins.round()).abs() > 1e-9 {
        return Err(CalibError::Validation(format!(
            "bin width {bin_width_deg} deg must divide 180 evenly"
        )));
    }
    Ok(())
}

/// Count of primitives per occupied polar bin, in bin order.
pub fn bin_counts(primitives: &[PlanePrimitive], bin_width_deg: f64) -> BTreeMap<(usize, usize), usize> {
    let mut counts = BTreeMap::new();
    for p in primitives {
        *counts.entry(polar_bin(&p.plane.normal, bin_width_deg)).or_insert(0) += 1;
    }
    counts
}

/// Caps every polar bin at `ceil(A)`, `A` being the mean count over non-empty bins,
/// by seeded uniform subsampling without replacement. Survivors keep their order.
///
/// Each primitive draws a seeded random priority from its anchor index and a bin keeps
/// its `ceil(A)` lowest priorities, so small changes to a bin's membership between
/// re-extractions leave the rest of the selection unchanged.
pub fn homogenize_normals(
    primitives: Vec<PlanePrimitive>,
    bin_width_deg: f64,
    seed: u64,
) -> Result<Vec<PlanePrimitive>> {
    check_bin_width(bin_width_deg)?;
    if primitives.is_empty() {
        return Ok(primitives);
    }
    let mut bins: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, p) in primitives.iter().enumerate() {
        bins.entry(polar_bin(&p.plane.normal, bin_width_deg)).or_default().push(i);
    }
    let mean = primitives.len() as f64 / bins.len() as f64;
    let cap = mean.ceil() as usize;
    let mut keep = vec![true; primitives.len()];
    for members in bins.values() {
        if members.len() as f64 > mean && members.len() > cap {
            let mut ranked: Vec<(u64, usize)> = members
                .iter()
                .map(|&m| (selection_priority(seed, primitives[m].plane.anchor_index), m))
                .collect();
            ranked.sort_unstable();
            for &(_, m) in &ranked[cap..] {
                keep[m] = false;
            }
        }
    }
    Ok(primitives
        .into_iter()
        .zip(keep)
        .filter_map(|(p, k)| k.then_some(p))
        .collect())
}

fn selection_priority(seed: u64, anchor_index: usize) -> u64 {
    let stream = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ anchor_index as u64;
    ChaCha8Rng::seed_from_u64(stream).next_u64()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractionParams {
    pub voxel_size: f64,
    pub min_voxel_support: usize,
    pub gamma: f64,
    pub k_max: usize,
    pub distance_weighting: DistanceWeighting,
}

impl Default for ExtractionParams {
    fn default() -> Self {
        Self {
            voxel_size: 1.0,
            min_voxel_support: MIN_VOXEL_SUPPORT,
            gamma: 0.01,
            k_max: 50,
            distance_weighting: DistanceWeighting::Linear,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExtractionStats {
    pub kernels: usize,
    pub k: usize,
    pub degenerate_fits: usize,
}

/// Fits one candidate plane per voxel kernel.
///
/// `base_points[i]` must be `cloud.points[i]` mapped into the base frame, and
/// `tree` must index exactly `base_points`.
pub fn extract_candidates(
    cloud: &MotorStampedCloud,
    base_points: &[Vec3],
    tree: &KdTree,
    params: &ExtractionParams,
) -> Result<(Vec<PlaneCandidate>, ExtractionStats)> {
    let kernels = voxel_downsample(base_points, params.voxel_size, params.min_voxel_support)?;
    let k = adaptive_k(base_points.len(), params.gamma, params.k_max);
    let fits: Vec<Option<PlaneCandidate>> = kernels
        .par_iter()
        .map(|kernel| {
            let nn = tree.knn(&kernel.center, k);
            let pts: Vec<Vec3> = nn.iter().map(|n| base_points[n.index]).collect();
            let fit = fit_plane_weighted(&pts, &kernel.center, params.distance_weighting).ok()?;
            let anchor_index = nn[0].index;
            let inv = 1.0 / nn.len() as f64;
            let mean_time = nn.iter().map(|n| cloud.points[n.index].time).sum::<f64>() * inv;
            let mean_angle = nn.iter().map(|n| cloud.points[n.index].angle).sum::<f64>() * inv;
            Some(PlaneCandidate {
                kernel_center: kernel.center,
                anchor_index,
                anchor: base_points[anchor_index],
                normal: fit.normal,
                singular_values: fit.singular_values,
                alpha: fit.alpha,
                mean_time,
                mean_angle,
                support: nn.len(),
                neighbors: nn.iter().map(|n| n.index).collect(),
            })
        })
        .collect();
    let degenerate_fits = fits.iter().filter(|f| f.is_none()).count();
    let stats = ExtractionStats {
        kernels: kernels.len(),
        k,
        degenerate_fits,
    };
    Ok((fits.into_iter().flatten().collect(), stats))
}

/// Debug dump: `ax,ay,az,nx,ny,nz,alpha,weight,theta_bin,phi_bin`.
pub fn write_primitives_csv(primitives: &[PlanePrimitive], bin_width_deg: f64, path: &Path) -> Result<()> {
    let mut out = String::from("ax,ay,az,nx,ny,nz,alpha,weight,theta_bin,phi_bin\n");
    for p in primitives {
        let (tb, pb) = polar_bin(&p.plane.normal, bin_width_deg);
        let (a, n) = (p.plane.anchor, p.plane.normal);
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{tb},{pb}\n",
            a.x, a.y, a.z, n.x, n.y, n.z, p.plane.alpha, p.weight
        ));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| CalibError::io(path, e))
}
