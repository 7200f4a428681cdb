//! Frames and the motor motion model.
//!
//! Three frames are involved: the base `{B}` (robot body), the motor output
//! `{M}` which spins about the base z-axis, and the LiDAR `{L}` rigidly
//! mounted on the motor. A LiDAR point maps to the base frame through
//!
//! ```text
//! p_B(t) = R_MB(t) * (R_LM * p_L + t_LM)
//! ```
//!
//! where `R_MB(t)` is the motor rotation about z by the encoder angle and
//! `(R_LM, t_LM)` is the mounting extrinsic. `R_LM` is composed as
//! `Rz(yaw) * Ry(pitch) * Rx(roll)` everywhere in this crate.

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};

pub type Vec3 = Vector3<f64>;
pub type Rot3 = Rotation3<f64>;

/// Rotation about the x-axis, built entry by entry so the fixed axis stays exact.
pub fn rot_x(angle: f64) -> Rot3 {
    let (s, c) = angle.sin_cos();
    Rot3::from_matrix_unchecked(Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c))
}

pub fn rot_y(angle: f64) -> Rot3 {
    let (s, c) = angle.sin_cos();
    Rot3::from_matrix_unchecked(Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c))
}

/// Rotation about z. The third row and column are exactly `(0, 0, 1)`, which keeps
/// the z-translation Jacobian identically zero.
pub fn rot_z(angle: f64) -> Rot3 {
    let (s, c) = angle.sin_cos();
    Rot3::from_matrix_unchecked(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
}

/// Skew-symmetric cross-product matrix: `skew(v) * w == v.cross(&w)`.
pub fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// LiDAR-to-motor mounting transform.
///
/// Only `roll`, `pitch`, `tx` and `ty` are estimated. Yaw is indistinguishable from
/// an encoder offset and a shift along the motor axis never changes the relative
/// geometry of scans, so both are held at configured constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtrinsicParams {
    /// radians
    pub roll: f64,
    /// radians
    pub pitch: f64,
    /// meters
    pub tx: f64,
    /// meters
    pub ty: f64,
    /// radians, held fixed
    #[serde(default)]
    pub yaw_fixed: f64,
    /// meters, held fixed
    #[serde(default)]
    pub tz_fixed: f64,
}

impl Default for ExtrinsicParams {
    fn default() -> Self {
        Self::identity()
    }
}

impl ExtrinsicParams {
    pub fn identity() -> Self {
        Self {
            roll: 0.0,
            pitch: 0.0,
            tx: 0.0,
            ty: 0.0,
            yaw_fixed: 0.0,
            tz_fixed: 0.0,
        }
    }

    pub fn new(roll: f64, pitch: f64, tx: f64, ty: f64) -> Self {
        Self {
            roll,
            pitch,
            tx,
            ty,
            ..Self::identity()
        }
    }

    pub fn from_degrees(roll_deg: f64, pitch_deg: f64, tx: f64, ty: f64) -> Self {
        Self::new(roll_deg.to_radians(), pitch_deg.to_radians(), tx, ty)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.roll,
            self.pitch,
            self.tx,
            self.ty,
            self.yaw_fixed,
            self.tz_fixed,
        ];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(CalibError::Validation(format!(
                "non-finite extrinsic parameters: {self:?}"
            )));
        }
        let limit = std::f64::consts::FRAC_PI_2;
        if self.roll.abs() >= limit || self.pitch.abs() >= limit {
            return Err(CalibError::Validation(format!(
                "roll/pitch must stay within (-pi/2, pi/2): roll={}, pitch={}",
                self.roll, self.pitch
            )));
        }
        Ok(())
    }

    /// `R_LM = Rz(yaw_fixed) * Ry(pitch) * Rx(roll)`.
    pub fn rotation(&self) -> Rot3 {
        rot_z(self.yaw_fixed) * rot_y(self.pitch) * rot_x(self.roll)
    }

    /// `t_LM = (tx, ty, tz_fixed)`.
    pub fn translation(&self) -> Vec3 {
        Vec3::new(self.tx, self.ty, self.tz_fixed)
    }

    pub fn mount(&self) -> Mount {
        Mount {
            rotation: self.rotation().into_inner(),
            translation: self.translation(),
        }
    }

    /// Estimated parameters as `[roll, pitch, tx, ty]`.
    pub fn as_array(&self) -> [f64; 4] {
        [self.roll, self.pitch, self.tx, self.ty]
    }

    pub fn with_array(&self, v: [f64; 4]) -> Self {
        Self {
            roll: v[0],
            pitch: v[1],
            tx: v[2],
            ty: v[3],
            ..*self
        }
    }
}

/// A precomputed mounting transform, `p_M = rotation * p_L + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mount {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Mount {
    #[inline]
    pub fn apply(&self, p_lidar: &Vec3, motor: &Rot3) -> Vec3 {
        motor * (self.rotation * p_lidar + self.translation)
    }
}

/// Maps a LiDAR-frame point into the base frame for a given motor rotation.
pub fn transform_point(p_lidar: &Vec3, ext: &ExtrinsicParams, motor: &Rot3) -> Vec3 {
    ext.mount().apply(p_lidar, motor)
}

/// Inverse of [`transform_point`]: base-frame point back into the LiDAR frame.
pub fn inverse_transform_point(p_base: &Vec3, ext: &ExtrinsicParams, motor: &Rot3) -> Vec3 {
    let r = ext.rotation();
    r.inverse() * (motor.inverse() * p_base - ext.translation())
}

/// Unwraps a sequence of angles in place so successive differences stay within (-pi, pi].
pub fn unwrap_angles(angles: &mut [f64]) {
    use std::f64::consts::{PI, TAU};
    let mut offset = 0.0;
    for i in 1..angles.len() {
        let raw_prev = angles[i - 1] - offset;
        let raw = angles[i];
        let diff = raw - raw_prev;
        if diff < -PI {
            offset += TAU;
        } else if diff > PI {
            offset -= TAU;
        }
        angles[i] = raw + offset;
    }
}

/// Encoder log: `(timestamp, unwrapped angle)` samples with strictly increasing time.
#[derive(Debug, Clone, PartialEq)]
pub struct MotorTrajectory {
    times: Vec<f64>,
    angles: Vec<f64>,
}

impl MotorTrajectory {
    /// Builds a trajectory from samples already ordered by time and unwrapped.
    pub fn new(samples: Vec<(f64, f64)>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(CalibError::Validation(format!(
                "trajectory needs at least 2 samples, got {}",
                samples.len()
            )));
        }
        if samples.iter().any(|(t, a)| !t.is_finite() || !a.is_finite()) {
            return Err(CalibError::Validation(
                "trajectory contains non-finite samples".into(),
            ));
        }
        for w in samples.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(CalibError::Validation(format!(
                    "trajectory timestamps must be strictly increasing ({} then {})",
                    w[0].0, w[1].0
                )));
            }
        }
        let (times, angles) = samples.into_iter().unzip();
        Ok(Self { times, angles })
    }

    /// Sorts raw encoder samples by time, rejects duplicate stamps and unwraps angles.
    pub fn from_raw(mut samples: Vec<(f64, f64)>) -> Result<Self> {
        samples.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in samples.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(CalibError::Validation(format!(
                    "duplicate trajectory timestamp {}",
                    w[0].0
                )));
            }
        }
        let mut angles: Vec<f64> = samples.iter().map(|s| s.1).collect();
        unwrap_angles(&mut angles);
        let samples = samples.iter().zip(angles).map(|(s, a)| (s.0, a)).collect();
        Self::new(samples)
    }

    /// A motor turning at constant rate, sampled `samples` times over `[0, duration]`.
    pub fn constant_rate(duration: f64, revolutions: f64, samples: usize) -> Result<Self> {
        if duration <= 0.0 || samples < 2 {
            return Err(CalibError::Validation(
                "constant-rate trajectory needs duration > 0 and >= 2 samples".into(),
            ));
        }
        let total = revolutions * std::f64::consts::TAU;
        let n = samples - 1;
        Self::new(
            (0..=n)
                .map(|i| {
                    let f = i as f64 / n as f64;
                    (f * duration, f * total)
                })
                .collect(),
        )
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn samples(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times.iter().copied().zip(self.angles.iter().copied())
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start() && t <= self.end()
    }

    /// Total angle swept between the first and last sample, in radians.
    pub fn swept_angle(&self) -> f64 {
        (self.angles.last().unwrap() - self.angles[0]).abs()
    }

    /// Linearly interpolated encoder angle at time `t`.
    pub fn angle_at(&self, t: f64) -> Result<f64> {
        if !self.contains(t) {
            return Err(CalibError::OutOfRange {
                t,
                start: self.start(),
                end: self.end(),
            });
        }
        Ok(self.interpolate(t))
    }

    /// Like [`angle_at`](Self::angle_at) but holds the end angles outside the span.
    pub fn angle_at_clamped(&self, t: f64) -> f64 {
        self.interpolate(t.clamp(self.start(), self.end()))
    }

    fn interpolate(&self, t: f64) -> f64 {
        // first index with time > t
        let hi = self.times.partition_point(|&s| s <= t);
        if hi == 0 {
            return self.angles[0];
        }
        if hi >= self.times.len() {
            return *self.angles.last().unwrap();
        }
        let lo = hi - 1;
        let (t0, t1) = (self.times[lo], self.times[hi]);
        let (a0, a1) = (self.angles[lo], self.angles[hi]);
        if t == t0 {
            return a0;
        }
        a0 + (a1 - a0) * (t - t0) / (t1 - t0)
    }
}

/// Rotation of the motor relative to the base at time `t`.
pub fn motor_rotation(traj: &MotorTrajectory, t: f64) -> Result<Rot3> {
    Ok(rot_z(traj.angle_at(t)?))
}
