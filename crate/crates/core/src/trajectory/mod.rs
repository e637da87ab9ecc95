//! Time-stamped segment pose sequences and their CSV representation.
//!
//! CSV layout, one row per segment per frame:
//!
//! ```text
//! t,seg,x,y,z,qw,qx,qy,qz
//! ```
//!
//! `seg` is 1-based. Lines starting with `#` are comments. Values are SI.

mod align;
mod filter;

pub use align::{align, AlignError};
pub use filter::{butterworth_lowpass, ButterworthDesign, FilterError};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

use crate::real::Real;

/// Default motion-capture rate, Hz.
pub const DEFAULT_RATE_HZ: f64 = 120.0;

/// Spacing tolerance for uniform sampling, seconds.
pub const SPACING_TOL: f64 = 1e-6;

/// Unit-norm tolerance for stored quaternions.
pub const QUAT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose<T: Real = f64> {
    pub position: Vector3<T>,
    pub orientation: UnitQuaternion<T>,
}

impl<T: Real> Pose<T> {
    pub fn new(position: Vector3<T>, orientation: UnitQuaternion<T>) -> Self {
        Self { position, orientation }
    }

    pub fn from_position(position: Vector3<T>) -> Self {
        Self { position, orientation: UnitQuaternion::identity() }
    }

    /// `[qw, qx, qy, qz]`
    pub fn quat_wxyz(&self) -> [T; 4] {
        let q = self.orientation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn cast<U: Real>(&self) -> Pose<U> {
        let c = |x: T| U::lit(x.as_f64());
        let q = self.orientation.quaternion();
        Pose {
            position: Vector3::new(c(self.position.x), c(self.position.y), c(self.position.z)),
            orientation: UnitQuaternion::new_normalize(Quaternion::new(c(q.w), c(q.i), c(q.j), c(q.k))),
        }
    }
}

/// Wire form of a pose: position in meters and a `[w, x, y, z]` quaternion.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseRepr<T> {
    position: [T; 3],
    orientation: [T; 4],
}

impl<T: Real + Serialize> Serialize for Pose<T> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let p = self.position;
        PoseRepr { position: [p.x, p.y, p.z], orientation: self.quat_wxyz() }.serialize(s)
    }
}

impl<'de, T: Real + Deserialize<'de>> Deserialize<'de> for Pose<T> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = PoseRepr::<T>::deserialize(d)?;
        let [w, x, y, z] = r.orientation;
        let q = Quaternion::new(w, x, y, z);
        if !(q.norm() > T::zero()) {
            return Err(serde::de::Error::custom("orientation quaternion must be nonzero"));
        }
        let [px, py, pz] = r.position;
        let orientation = if (q.norm() - T::one()).abs() < T::lit(QUAT_TOL) {
            UnitQuaternion::new_unchecked(q)
        } else {
            UnitQuaternion::new_normalize(q)
        };
        Ok(Pose::new(Vector3::new(px, py, pz), orientation))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame<T: Real = f64> {
    pub t: T,
    pub poses: Vec<Pose<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T: Real = f64> {
    pub rate_hz: T,
    pub frames: Vec<Frame<T>>,
}

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("frame at t={t}: missing segment {segment}")]
    MissingSegment { t: f64, segment: usize },
    #[error("time is not increasing at frame {index} (t={t})")]
    NonMonotoneTime { index: usize, t: f64 },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl<T: Real> Trajectory<T> {
    pub fn new(rate_hz: T) -> Self {
        Self { rate_hz, frames: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn n_segments(&self) -> usize {
        self.frames.first().map_or(0, |f| f.poses.len())
    }

    pub fn first(&self) -> Option<&Frame<T>> {
        self.frames.first()
    }

    pub fn last(&self) -> Option<&Frame<T>> {
        self.frames.last()
    }

    pub fn start_time(&self) -> T {
        self.frames.first().map_or(T::zero(), |f| f.t)
    }

    pub fn end_time(&self) -> T {
        self.frames.last().map_or(T::zero(), |f| f.t)
    }

    /// Checks strictly increasing, uniformly spaced time stamps, a constant
    /// segment count and unit quaternions.
    pub fn validate(&self) -> Result<(), TrajectoryError> {
        let n = self.n_segments();
        let dt = T::one() / self.rate_hz;
        for (i, f) in self.frames.iter().enumerate() {
            if f.poses.len() != n {
                return Err(TrajectoryError::Invalid(format!(
                    "frame {i} has {} segments, expected {n}",
                    f.poses.len()
                )));
            }
            if i > 0 {
                let step = f.t - self.frames[i - 1].t;
                if !(step > T::zero()) {
                    return Err(TrajectoryError::NonMonotoneTime { index: i, t: f.t.as_f64() });
                }
                if (step - dt).abs().as_f64() > SPACING_TOL {
                    return Err(TrajectoryError::Invalid(format!(
                        "frame {i}: spacing {} differs from 1/rate",
                        step.as_f64()
                    )));
                }
            }
            for p in &f.poses {
                if (p.orientation.quaternion().norm().as_f64() - 1.0).abs() > QUAT_TOL {
                    return Err(TrajectoryError::Invalid(format!("frame {i}: non-unit quaternion")));
                }
            }
        }
        Ok(())
    }

    /// Adds independent Gaussian noise of standard deviation `std` (meters)
    /// to every position coordinate.
    pub fn with_position_noise<R: rand::Rng>(&self, std: f64, rng: &mut R) -> Self {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut out = self.clone();
        for f in &mut out.frames {
            for p in &mut f.poses {
                for k in 0..3 {
                    p.position[k] += T::lit(normal.sample(rng));
                }
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> Trajectory<U> {
        Trajectory {
            rate_hz: U::lit(self.rate_hz.as_f64()),
            frames: self
                .frames
                .iter()
                .map(|f| Frame { t: U::lit(f.t.as_f64()), poses: f.poses.iter().map(|p| p.cast()).collect() })
                .collect(),
        }
    }
}

pub const CSV_HEADER: &str = "t,seg,x,y,z,qw,qx,qy,qz";

impl Trajectory<f64> {
    /// Renders the trajectory as CSV text.
    ///
    /// Numbers use the shortest representation that parses back to the same
    /// `f64`, so save/load is lossless.
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(64 * self.len() * self.n_segments().max(1));
        s.push_str(CSV_HEADER);
        s.push('\n');
        for f in &self.frames {
            for (i, p) in f.poses.iter().enumerate() {
                let q = p.quat_wxyz();
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{},{}",
                    f.t,
                    i + 1,
                    p.position.x,
                    p.position.y,
                    p.position.z,
                    q[0],
                    q[1],
                    q[2],
                    q[3]
                );
            }
        }
        s
    }

    /// Parses CSV text. Rows of one frame may list segments in any order;
    /// the rate is inferred from the time stamps (default 120 Hz for a single frame).
    pub fn from_csv(text: &str) -> Result<Self, TrajectoryError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
            .filter(|(_, l)| !l.trim_start().starts_with('#'));
        match lines.next() {
            Some((_, h)) if h.trim() == CSV_HEADER => {}
            Some((line, _)) => {
                return Err(TrajectoryError::Parse { line, message: format!("expected header `{CSV_HEADER}`") })
            }
            None => return Err(TrajectoryError::Parse { line: 1, message: "empty file".into() }),
        }
        // (t, rows) grouped by consecutive equal time stamps.
        let mut groups: Vec<(f64, Vec<(usize, Pose<f64>)>)> = Vec::new();
        for (line, l) in lines {
            if l.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = l.split(',').map(str::trim).collect();
            if fields.len() != 9 {
                return Err(TrajectoryError::Parse {
                    line,
                    message: format!("expected 9 fields, found {}", fields.len()),
                });
            }
            let num = |k: usize| -> Result<f64, TrajectoryError> {
                fields[k]
                    .parse::<f64>()
                    .map_err(|e| TrajectoryError::Parse { line, message: format!("field {}: {e}", k + 1) })
            };
            let t = num(0)?;
            let seg: usize = fields[1]
                .parse()
                .map_err(|e| TrajectoryError::Parse { line, message: format!("segment index: {e}") })?;
            if seg == 0 {
                return Err(TrajectoryError::Parse { line, message: "segment index is 1-based".into() });
            }
            let position = Vector3::new(num(2)?, num(3)?, num(4)?);
            let q = Quaternion::new(num(5)?, num(6)?, num(7)?, num(8)?);
            if (q.norm() - 1.0).abs() > QUAT_TOL {
                return Err(TrajectoryError::Parse { line, message: "quaternion is not unit norm".into() });
            }
            let pose = Pose::new(position, UnitQuaternion::new_unchecked(q));
            match groups.last_mut() {
                Some((gt, rows)) if *gt == t => rows.push((seg, pose)),
                Some((gt, _)) if t < *gt => {
                    return Err(TrajectoryError::NonMonotoneTime { index: groups.len(), t });
                }
                _ => groups.push((t, vec![(seg, pose)])),
            }
        }
        if groups.is_empty() {
            return Err(TrajectoryError::Parse { line: 2, message: "no data rows".into() });
        }
        let n = groups.iter().map(|(_, r)| r.iter().map(|(s, _)| *s).max().unwrap_or(0)).max().unwrap_or(0);
        let mut frames = Vec::with_capacity(groups.len());
        for (t, mut rows) in groups {
            rows.sort_by_key(|(s, _)| *s);
            for (k, (s, _)) in rows.iter().enumerate() {
                if *s != k + 1 {
                    return Err(TrajectoryError::MissingSegment { t, segment: k + 1 });
                }
            }
            if rows.len() != n {
                return Err(TrajectoryError::MissingSegment { t, segment: rows.len() + 1 });
            }
            frames.push(Frame { t, poses: rows.into_iter().map(|(_, p)| p).collect() });
        }
        let rate_hz = if frames.len() > 1 {
            (frames.len() - 1) as f64 / (frames[frames.len() - 1].t - frames[0].t)
        } else {
            DEFAULT_RATE_HZ
        };
        // Snap to the nominal rate when the stamps came from it.
        let rate_hz = if (rate_hz - rate_hz.round()).abs() < 1e-6 { rate_hz.round() } else { rate_hz };
        let traj = Trajectory { rate_hz, frames };
        traj.validate()?;
        Ok(traj)
    }

    pub fn load_csv(path: &Path) -> Result<Self, TrajectoryError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| TrajectoryError::Io { path: path.display().to_string(), source })?;
        Self::from_csv(&text)
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), TrajectoryError> {
        std::fs::write(path, self.to_csv())
            .map_err(|source| TrajectoryError::Io { path: path.display().to_string(), source })
    }
}

/// Base-to-segment distances `‖P1 − Pi‖` for `i = 2..N`.
pub fn base_distances<T: Real>(poses: &[Pose<T>]) -> Vec<T> {
    let base = poses[0].position;
    poses[1..].iter().map(|p| (p.position - base).norm()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(frames: usize, segs: usize) -> Trajectory {
        let mut t = Trajectory::new(120.0);
        for f in 0..frames {
            let poses = (0..segs)
                .map(|s| {
                    Pose::new(
                        Vector3::new(0.1 * s as f64, 0.01 * f as f64, 1.0 / 3.0 + s as f64),
                        UnitQuaternion::from_euler_angles(0.1 * f as f64, 0.2, -0.3 * s as f64),
                    )
                })
                .collect();
            t.frames.push(Frame { t: f as f64 / 120.0, poses });
        }
        t
    }

    #[test]
    fn empty_file_is_line_one_error() {
        match Trajectory::from_csv("") {
            Err(TrajectoryError::Parse { line: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn save_load_round_trip() {
        let t = sample(2, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        t.save_csv(&path).unwrap();
        let back = Trajectory::load_csv(&path).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn shuffled_segments_load_sorted() {
        let t = sample(2, 3);
        let csv = t.to_csv();
        let mut lines: Vec<&str> = csv.lines().collect();
        // Reverse segment order inside each frame.
        lines[1..4].reverse();
        lines[4..7].reverse();
        let shuffled = lines.join("\n");
        let back = Trajectory::from_csv(&shuffled).unwrap();
        // Sort oracle: segment k of every frame carries the x value 0.1·(k−1).
        for f in &back.frames {
            let xs: Vec<f64> = f.poses.iter().map(|p| p.position.x).collect();
            let mut sorted = xs.clone();
            sorted.sort_by(f64::total_cmp);
            assert_eq!(xs, sorted);
        }
        assert_eq!(back, t);
    }

    #[test]
    fn comments_skipped_and_errors_reported() {
        let t = sample(2, 2);
        let with_comment = format!("# captured on bench\n{}", t.to_csv());
        assert_eq!(Trajectory::from_csv(&with_comment).unwrap(), t);

        let csv = t.to_csv();
        let missing: Vec<&str> = csv.lines().filter(|l| !l.contains(",2,") || l.starts_with("0,")).collect();
        assert!(matches!(Trajectory::from_csv(&missing.join("\n")), Err(TrajectoryError::MissingSegment { .. })));

        let bad = csv.replacen("0,1,", "0,1,abc,", 1);
        assert!(matches!(Trajectory::from_csv(&bad), Err(TrajectoryError::Parse { line: 2, .. })));

        let lines: Vec<&str> = csv.lines().collect();
        let backwards = [lines[0], lines[3], lines[4], lines[1], lines[2]].join("\n");
        assert!(matches!(Trajectory::from_csv(&backwards), Err(TrajectoryError::NonMonotoneTime { .. })));
    }

    #[test]
    fn distances_from_base() {
        let poses = [
            Pose::from_position(Vector3::new(0.0, 0.0, 0.0)),
            Pose::from_position(Vector3::new(3.0, 4.0, 0.0)),
            Pose::from_position(Vector3::new(0.0, 0.0, -2.0)),
        ];
        assert_eq!(base_distances(&poses), vec![5.0, 2.0]);
    }
}
