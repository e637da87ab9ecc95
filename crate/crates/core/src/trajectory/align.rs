use nalgebra::UnitQuaternion;
use thiserror::Error;

use super::{Frame, Pose, Trajectory};
use crate::real::Real;

#[derive(Debug, Error, PartialEq)]
pub enum AlignError {
    #[error("cannot align an empty trajectory")]
    Empty,
    #[error("trajectories do not overlap in time ([{0}, {1}] vs [{2}, {3}])")]
    NoOverlap(f64, f64, f64, f64),
    #[error("segment counts differ ({0} vs {1})")]
    SegmentMismatch(usize, usize),
}

fn interpolate<T: Real>(a: &Frame<T>, b: &Frame<T>, t: T) -> Vec<Pose<T>> {
    let span = b.t - a.t;
    let w = if span > T::zero() { (t - a.t) / span } else { T::zero() };
    a.poses
        .iter()
        .zip(&b.poses)
        .map(|(p, q)| {
            let position = p.position + (q.position - p.position) * w;
            let qa = *p.orientation.quaternion();
            let mut qb = *q.orientation.quaternion();
            if qa.dot(&qb) < T::zero() {
                qb = -qb;
            }
            let orientation = UnitQuaternion::new_normalize(qa * (T::one() - w) + qb * w);
            Pose { position, orientation }
        })
        .collect()
}

/// Crops both trajectories to their common time window and resamples `sim`
/// at the time stamps of `real` (linear positions, normalized linear
/// quaternions). Both outputs have the same frame count and time stamps.
pub fn align<T: Real>(sim: &Trajectory<T>, real: &Trajectory<T>) -> Result<(Trajectory<T>, Trajectory<T>), AlignError> {
    if sim.is_empty() || real.is_empty() {
        return Err(AlignError::Empty);
    }
    if sim.n_segments() != real.n_segments() {
        return Err(AlignError::SegmentMismatch(sim.n_segments(), real.n_segments()));
    }
    let lo = sim.start_time().max(real.start_time());
    let hi = sim.end_time().min(real.end_time());
    let real_frames: Vec<&Frame<T>> = real.frames.iter().filter(|f| f.t >= lo && f.t <= hi).collect();
    if lo > hi || real_frames.is_empty() {
        return Err(AlignError::NoOverlap(
            sim.start_time().as_f64(),
            sim.end_time().as_f64(),
            real.start_time().as_f64(),
            real.end_time().as_f64(),
        ));
    }
    let mut out_sim = Trajectory::new(real.rate_hz);
    let mut out_real = Trajectory::new(real.rate_hz);
    let mut k = 0;
    for f in real_frames {
        while k + 1 < sim.frames.len() && sim.frames[k + 1].t <= f.t {
            k += 1;
        }
        let a = &sim.frames[k];
        let poses = if a.t == f.t || k + 1 == sim.frames.len() {
            a.poses.clone()
        } else {
            interpolate(a, &sim.frames[k + 1], f.t)
        };
        out_sim.frames.push(Frame { t: f.t, poses });
        out_real.frames.push(f.clone());
    }
    Ok((out_sim, out_real))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;

    fn linear(rate: f64, t0: f64, t1: f64) -> Trajectory {
        let mut t = Trajectory::new(rate);
        let n = ((t1 - t0) * rate).round() as usize;
        for i in 0..=n {
            let time = t0 + i as f64 / rate;
            let poses = (0..3)
                .map(|s| {
                    Pose::new(
                        Vector3::new(0.3 * time + s as f64, -0.2 * time, 0.05 * s as f64),
                        UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 0.1 * s as f64),
                    )
                })
                .collect();
            t.frames.push(Frame { t: time, poses });
        }
        t
    }

    #[test]
    fn identical_inputs_unchanged() {
        let t = linear(120.0, 0.0, 1.0);
        let (a, b) = align(&t, &t).unwrap();
        assert_eq!(a, t);
        assert_eq!(b, t);
    }

    #[test]
    fn resamples_fast_sim_onto_mocap_clock() {
        let sim = linear(1000.0, 0.0, 2.0);
        let real = linear(120.0, 0.5, 3.0);
        let (a, b) = align(&sim, &real).unwrap();
        assert_eq!(a.len(), b.len());
        assert_eq!(a.rate_hz, 120.0);
        assert!(b.start_time() >= 0.5 && b.end_time() <= 2.0 + 1e-12);
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.t, fb.t);
            // Motion is linear in time, so interpolation is exact.
            for (pa, pb) in fa.poses.iter().zip(&fb.poses) {
                assert_relative_eq!(pa.position, pb.position, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn alignment_is_a_projection() {
        let sim = linear(1000.0, 0.0, 2.0);
        let real = linear(120.0, 0.5, 3.0);
        let (a, b) = align(&sim, &real).unwrap();
        let (a2, b2) = align(&a, &b).unwrap();
        assert_eq!(a2, a);
        assert_eq!(b2, b);
    }

    #[test]
    fn disjoint_windows_fail() {
        let sim = linear(120.0, 0.0, 1.0);
        let real = linear(120.0, 2.0, 3.0);
        assert!(matches!(align(&sim, &real), Err(AlignError::NoOverlap(..))));
        assert_eq!(align(&Trajectory::new(120.0), &real), Err(AlignError::Empty));
    }
}
