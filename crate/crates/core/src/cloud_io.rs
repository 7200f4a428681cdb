//! Point cloud and encoder log ingestion.
//!
//! Cloud formats:
//! - text CSV `x,y,z,t`, one record per line, optional header line;
//! - packed little-endian binary: magic `LMC1`, `u64` record count, then
//!   `count` records of four `f64` (`x, y, z, t`).
//!
//! Trajectories are text CSV `t,angle_rad`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{CalibError, Result};
use crate::geometry::{MotorTrajectory, Vec3};

const MAGIC: &[u8; 4] = b"LMC1";
const RECORD_BYTES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawScanRecord {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Sensor clock, seconds.
    pub t: f64,
}

impl RawScanRecord {
    pub fn point(&self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    pub fn range(&self) -> f64 {
        self.point().norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    Csv,
    Binary,
}

impl CloudFormat {
    /// `.csv` selects text, `.lmc` selects binary.
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => Ok(CloudFormat::Csv),
            Some(e) if e.eq_ignore_ascii_case("lmc") => Ok(CloudFormat::Binary),
            _ => Err(CalibError::Validation(format!(
                "cannot infer cloud format from {} (expected .csv or .lmc)",
                path.display()
            ))),
        }
    }
}

/// A single point with its acquisition time and the motor angle at that time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StampedPoint {
    /// LiDAR frame, meters.
    pub point: Vec3,
    pub time: f64,
    /// Unwrapped motor angle, radians.
    pub angle: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotorStampedCloud {
    pub source_id: String,
    pub points: Vec<StampedPoint>,
}

impl MotorStampedCloud {
    pub fn new(source_id: impl Into<String>, points: Vec<StampedPoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(CalibError::EmptyInput("stamped cloud has no points".into()));
        }
        Ok(Self {
            source_id: source_id.into(),
            points,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_records(&self) -> Vec<RawScanRecord> {
        self.points
            .iter()
            .map(|p| RawScanRecord {
                x: p.point.x,
                y: p.point.y,
                z: p.point.z,
                t: p.time,
            })
            .collect()
    }
}

/// Sensor range window used by [`validate_ranges`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeLimits {
    pub min: f64,
    pub max: f64,
}

impl Default for RangeLimits {
    fn default() -> Self {
        Self { min: 0.1, max: 40.0 }
    }
}

pub fn validate_ranges(records: &[RawScanRecord], limits: RangeLimits) -> Result<()> {
    for (i, r) in records.iter().enumerate() {
        let range = r.range();
        if !(limits.min..=limits.max).contains(&range) {
            return Err(CalibError::Validation(format!(
                "record {i} has range {range} m outside [{}, {}] m",
                limits.min, limits.max
            )));
        }
    }
    Ok(())
}

pub fn read_cloud(path: &Path, format: CloudFormat) -> Result<Vec<RawScanRecord>> {
    let records = match format {
        CloudFormat::Csv => read_cloud_csv(path)?,
        CloudFormat::Binary => read_cloud_binary(path)?,
    };
    if records.is_empty() {
        return Err(CalibError::EmptyInput(format!(
            "{} contains no records",
            path.display()
        )));
    }
    Ok(records)
}

pub fn write_cloud(records: &[RawScanRecord], path: &Path, format: CloudFormat) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| CalibError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = match format {
        CloudFormat::Csv => {
            let mut res = writeln!(w, "x,y,z,t");
            for r in records {
                if res.is_err() {
                    break;
                }
                res = writeln!(w, "{},{},{},{}", r.x, r.y, r.z, r.t);
            }
            res
        }
        CloudFormat::Binary => {
            let mut buf = Vec::with_capacity(12 + records.len() * RECORD_BYTES);
            buf.extend_from_slice(MAGIC);
            buf.extend_from_slice(&(records.len() as u64).to_le_bytes());
            for r in records {
                for v in [r.x, r.y, r.z, r.t] {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            w.write_all(&buf)
        }
    };
    res.and_then(|_| w.flush()).map_err(|e| CalibError::io(path, e))
}

fn parse_row<const N: usize>(path: &Path, line_no: usize, line: &str) -> Result<[f64; N]> {
    let mut out = [0.0; N];
    let mut fields = line.split(',').map(str::trim);
    for (i, slot) in out.iter_mut().enumerate() {
        let field = fields.next().ok_or_else(|| CalibError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: format!("expected {N} fields, found {i}"),
        })?;
        let v: f64 = field.parse().map_err(|_| CalibError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: format!("field {} is not a number: {field:?}", i + 1),
        })?;
        if !v.is_finite() {
            return Err(CalibError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("record has non-finite field {}: {field}", i + 1),
            });
        }
        *slot = v;
    }
    if fields.next().is_some() {
        return Err(CalibError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: format!("expected {N} fields, found more"),
        });
    }
    Ok(out)
}

/// Yields `(line number, line)` for data lines, skipping blanks and a leading header.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .enumerate()
        .filter(|(k, (_, l))| {
            // Only the first non-blank line may be a header.
            !(*k == 0 && l.chars().next().is_some_and(|c| c.is_ascii_alphabetic()))
        })
        .map(|(_, x)| x)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CalibError::io(path, e))
}

fn read_cloud_csv(path: &Path) -> Result<Vec<RawScanRecord>> {
    let text = read_text(path)?;
    data_lines(&text)
        .map(|(n, line)| {
            let [x, y, z, t] = parse_row::<4>(path, n, line)?;
            Ok(RawScanRecord { x, y, z, t })
        })
        .collect()
}

fn read_cloud_binary(path: &Path) -> Result<Vec<RawScanRecord>> {
    let bytes = fs::read(path).map_err(|e| CalibError::io(path, e))?;
    let parse_err = |message: String| CalibError::Parse {
        path: path.to_path_buf(),
        line: 0,
        message,
    };
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(parse_err("missing LMC1 header".into()));
    }
    let count = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if Some(body.len()) != count.checked_mul(RECORD_BYTES) {
        return Err(parse_err(format!(
            "header declares {count} records but body holds {} bytes",
            body.len()
        )));
    }
    body.chunks_exact(RECORD_BYTES)
        .enumerate()
        .map(|(i, chunk)| {
            let f = |k: usize| f64::from_le_bytes(chunk[k * 8..k * 8 + 8].try_into().unwrap());
            let r = RawScanRecord {
                x: f(0),
                y: f(1),
                z: f(2),
                t: f(3),
            };
            if [r.x, r.y, r.z, r.t].iter().any(|v| !v.is_finite()) {
                return Err(parse_err(format!("record {i} has non-finite fields")));
            }
            Ok(r)
        })
        .collect()
}

pub fn read_trajectory(path: &Path) -> Result<MotorTrajectory> {
    let text = read_text(path)?;
    let samples = data_lines(&text)
        .map(|(n, line)| parse_row::<2>(path, n, line).map(|[t, a]| (t, a)))
        .collect::<Result<Vec<_>>>()?;
    MotorTrajectory::from_raw(samples)
}

pub fn write_trajectory(traj: &MotorTrajectory, path: &Path) -> Result<()> {
    let mut out = String::from("t,angle_rad\n");
    for (t, a) in traj.samples() {
        out.push_str(&format!("{t},{a}\n"));
    }
    fs::write(path, out).map_err(|e| CalibError::io(path, e))
}

/// Result of [`stamp_cloud`]: the stamped cloud plus how many records fell outside
/// the encoder span and were dropped.
#[derive(Debug, Clone)]
pub struct StampOutcome {
    pub cloud: MotorStampedCloud,
    pub dropped: usize,
}

/// Attaches the interpolated motor angle to every record inside the trajectory span.
/// Records outside the span are dropped rather than extrapolated.
pub fn stamp_cloud(
    source_id: impl Into<String>,
    records: &[RawScanRecord],
    traj: &MotorTrajectory,
) -> Result<StampOutcome> {
    let mut points = Vec::with_capacity(records.len());
    let mut dropped = 0;
    for r in records {
        match traj.angle_at(r.t) {
            Ok(angle) => points.push(StampedPoint {
                point: r.point(),
                time: r.t,
                angle,
            }),
            Err(_) => dropped += 1,
        }
    }
    if points.is_empty() {
        return Err(CalibError::EmptyInput(format!(
            "all {} records fall outside the trajectory span",
            records.len()
        )));
    }
    Ok(StampOutcome {
        cloud: MotorStampedCloud::new(source_id, points)?,
        dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;

    fn records() -> Vec<RawScanRecord> {
        vec![
            RawScanRecord { x: 1.0, y: 2.0, z: 3.0, t: 0.0 },
            RawScanRecord { x: -0.125, y: 1e-7, z: 4.5, t: 0.5 },
            RawScanRecord { x: 0.1 + 0.2, y: -3.3, z: 2.0 / 3.0, t: 1.0 },
        ]
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        write_cloud(&records(), &path, CloudFormat::Csv).unwrap();
        let back = read_cloud(&path, CloudFormat::Csv).unwrap();
        assert_eq!(back, records());
    }

    #[test]
    fn binary_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.lmc");
        write_cloud(&records(), &path, CloudFormat::Binary).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"LMC1");
        assert_eq!(u64::from_le_bytes(bytes[4..12].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 12 + 3 * 32);
        let back = read_cloud(&path, CloudFormat::Binary).unwrap();
        for (a, b) in back.iter().zip(records()) {
            assert_eq!(a.x.to_bits(), b.x.to_bits());
            assert_eq!(a.t.to_bits(), b.t.to_bits());
        }
    }

    #[test]
    fn headerless_csv_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        fs::write(&path, "1,2,3,0\n\n4,5,6,1\n").unwrap();
        assert_eq!(read_cloud(&path, CloudFormat::Csv).unwrap().len(), 2);
    }

    #[test]
    fn nan_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        fs::write(&path, "x,y,z,t\n1,2,3,0\n1,NaN,3,0.1\n").unwrap();
        match read_cloud(&path, CloudFormat::Csv) {
            Err(CalibError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_and_empty_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        fs::write(&path, "1,2,3\n").unwrap();
        assert!(matches!(
            read_cloud(&path, CloudFormat::Csv),
            Err(CalibError::Parse { line: 1, .. })
        ));
        fs::write(&path, "x,y,z,t\n").unwrap();
        assert!(matches!(
            read_cloud(&path, CloudFormat::Csv),
            Err(CalibError::EmptyInput(_))
        ));
        let bin = dir.path().join("c.lmc");
        fs::write(&bin, b"LMC1\x05\0\0\0\0\0\0\0").unwrap();
        assert!(matches!(
            read_cloud(&bin, CloudFormat::Binary),
            Err(CalibError::Parse { .. })
        ));
    }

    #[test]
    fn format_from_extension() {
        assert_eq!(CloudFormat::from_path(Path::new("a.csv")).unwrap(), CloudFormat::Csv);
        assert_eq!(CloudFormat::from_path(Path::new("a.LMC")).unwrap(), CloudFormat::Binary);
        assert!(CloudFormat::from_path(Path::new("a.pcd")).is_err());
    }

    #[test]
    fn range_validation() {
        let mut r = records();
        assert!(validate_ranges(&r, RangeLimits::default()).is_ok());
        r[0].x = 50.0;
        assert!(validate_ranges(&r, RangeLimits::default()).is_err());
    }

    #[test]
    fn trajectory_unwraps_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        fs::write(&path, "t,angle_rad\n0,6.2\n1,0.1\n2,0.3\n").unwrap();
        let traj = read_trajectory(&path).unwrap();
        let angles: Vec<f64> = traj.samples().map(|s| s.1).collect();
        // Oracle: add 2pi whenever the raw step drops by more than pi.
        let expected = [6.2, 0.1 + TAU, 0.3 + TAU];
        for (a, e) in angles.iter().zip(expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn trajectory_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        fs::write(&path, "0,1\n").unwrap();
        assert!(matches!(read_trajectory(&path), Err(CalibError::Validation(_))));
        fs::write(&path, "0,1\n0,2\n").unwrap();
        assert!(matches!(read_trajectory(&path), Err(CalibError::Validation(_))));
        fs::write(&path, "0,0\n1,0.5\n2,1.0\n").unwrap();
        let angles: Vec<f64> = read_trajectory(&path).unwrap().samples().map(|s| s.1).collect();
        assert_eq!(angles, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn stamping() {
        let traj = MotorTrajectory::new(vec![(0.0, 0.0), (1.0, 2.0), (2.0, 3.0)]).unwrap();
        let recs = vec![
            RawScanRecord { x: 1.0, y: 0.0, z: 0.0, t: 1.0 },
            RawScanRecord { x: 2.0, y: 0.0, z: 0.0, t: 5.0 },
            RawScanRecord { x: 3.0, y: 0.0, z: 0.0, t: 1.5 },
        ];
        let out = stamp_cloud("s", &recs, &traj).unwrap();
        assert_eq!(out.dropped, 1);
        assert_eq!(out.cloud.len(), 2);
        assert_eq!(out.cloud.points[0].angle, 2.0);
        assert_eq!(out.cloud.points[1].angle, 2.5);
        assert_eq!(out.cloud.points[1].point.x, 3.0);

        let outside = vec![RawScanRecord { x: 1.0, y: 0.0, z: 0.0, t: -1.0 }];
        assert!(matches!(
            stamp_cloud("s", &outside, &traj),
            Err(CalibError::EmptyInput(_))
        ));
    }
}
