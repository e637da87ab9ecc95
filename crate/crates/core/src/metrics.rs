//! Shape-based losses and error metrics.
//!
//! Everything here compares the distances `d_i = ‖P_1 − P_i‖` from the base
//! segment centroid to every other centroid, so the losses ignore where the
//! arm sits in the world and only see its internal shape.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::real::Real;
use crate::trajectory::{base_distances, Pose, Trajectory, SPACING_TOL};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("segment counts differ ({0} vs {1})")]
    Segments(usize, usize),
    #[error("at least two segments are required, got {0}")]
    TooFewSegments(usize),
    #[error("frame counts differ ({0} vs {1})")]
    Frames(usize, usize),
    #[error("frame {index} is not aligned ({sim} s vs {real} s)")]
    Unaligned { index: usize, sim: f64, real: f64 },
    #[error("nothing to compare")]
    Empty,
    #[error("invalid loss config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub delta_pos: f64,
    pub delta_vel: f64,
    pub epsilon: f64,
    pub w_pos: f64,
    pub w_vel: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { delta_pos: 1.0, delta_vel: 1.0, epsilon: 1e-6, w_pos: 0.7, w_vel: 0.3 }
    }
}

impl LossConfig {
    /// Position-only weighting.
    pub fn position_only() -> Self {
        Self { w_pos: 1.0, w_vel: 0.0, ..Self::default() }
    }

    pub fn velocity_enabled(&self) -> bool {
        self.w_vel > 0.0
    }

    pub fn validate(&self) -> Result<(), MetricError> {
        let mut bad = Vec::new();
        for (name, v) in [("delta_pos", self.delta_pos), ("delta_vel", self.delta_vel), ("epsilon", self.epsilon)] {
            if !(v > 0.0 && v.is_finite()) {
                bad.push(format!("{name} must be positive"));
            }
        }
        for (name, v) in [("w_pos", self.w_pos), ("w_vel", self.w_vel)] {
            if !(0.0..=1.0).contains(&v) {
                bad.push(format!("{name} must lie in [0, 1]"));
            }
        }
        if (self.w_pos + self.w_vel - 1.0).abs() > 1e-12 {
            bad.push(format!("w_pos + w_vel must be 1, got {}", self.w_pos + self.w_vel));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(MetricError::Config(bad.join("; ")))
        }
    }
}

/// Huber penalty: quadratic inside `±delta`, linear outside.
#[inline]
pub fn huber<T: Real>(r: T, delta: T) -> T {
    let a = r.abs();
    if a <= delta {
        T::lit(0.5) * r * r
    } else {
        delta * (a - T::lit(0.5) * delta)
    }
}

/// Mean Huber penalty of the relative residuals `(a_i − b_i)/(|b_i| + ε)`.
fn relative_huber<T: Real>(a: &[T], b: &[T], delta: T, eps: T) -> T {
    let sum = a.iter().zip(b).map(|(&s, &r)| huber((s - r) / (r.abs() + eps), delta)).fold(T::zero(), |x, y| x + y);
    sum / T::count(a.len())
}

fn check_segments(a: usize, b: usize) -> Result<(), MetricError> {
    if a != b {
        return Err(MetricError::Segments(a, b));
    }
    if a < 2 {
        return Err(MetricError::TooFewSegments(a));
    }
    Ok(())
}

/// Equilibrium shape loss between two pose sets.
pub fn static_loss<T: Real>(sim: &[Pose<T>], real: &[Pose<T>], cfg: &LossConfig) -> Result<T, MetricError> {
    check_segments(sim.len(), real.len())?;
    Ok(static_loss_distances(&base_distances(sim), &base_distances(real), cfg))
}

/// [`static_loss`] on precomputed base distances `d_2..d_N`.
pub fn static_loss_distances<T: Real>(sim: &[T], real: &[T], cfg: &LossConfig) -> T {
    relative_huber(sim, real, T::lit(cfg.delta_pos), T::lit(cfg.epsilon))
}

/// Static loss per condition, averaged over conditions.
pub fn static_loss_mean<T: Real>(pairs: &[(&[Pose<T>], &[Pose<T>])], cfg: &LossConfig) -> Result<T, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut total = T::zero();
    for (s, r) in pairs {
        total += static_loss(s, r, cfg)?;
    }
    Ok(total / T::count(pairs.len()))
}

fn check_aligned<T: Real>(sim: &Trajectory<T>, real: &Trajectory<T>) -> Result<(), MetricError> {
    if sim.is_empty() || real.is_empty() {
        return Err(MetricError::Empty);
    }
    if sim.len() != real.len() {
        return Err(MetricError::Frames(sim.len(), real.len()));
    }
    check_segments(sim.n_segments(), real.n_segments())?;
    for (index, (a, b)) in sim.frames.iter().zip(&real.frames).enumerate() {
        if (a.t - b.t).abs() > T::lit(SPACING_TOL) {
            return Err(MetricError::Unaligned { index, sim: a.t.as_f64(), real: b.t.as_f64() });
        }
    }
    Ok(())
}

fn distance_series<T: Real>(traj: &Trajectory<T>) -> Vec<Vec<T>> {
    traj.frames.iter().map(|f| base_distances(&f.poses)).collect()
}

/// Time-averaged weighted position and velocity loss on aligned trajectories.
pub fn dynamic_loss<T: Real>(sim: &Trajectory<T>, real: &Trajectory<T>, cfg: &LossConfig) -> Result<T, MetricError> {
    check_aligned(sim, real)?;
    let ds = distance_series(sim);
    let dr = distance_series(real);
    let (dp, dv, eps) = (T::lit(cfg.delta_pos), T::lit(cfg.delta_vel), T::lit(cfg.epsilon));
    let (wp, wv) = (T::lit(cfg.w_pos), T::lit(cfg.w_vel));
    let mut total = T::zero();
    let mut vs = vec![T::zero(); ds[0].len()];
    let mut vr = vs.clone();
    for t in 0..ds.len() {
        let mut frame = wp * relative_huber(&ds[t], &dr[t], dp, eps);
        if t > 0 && cfg.w_vel > 0.0 {
            for i in 0..vs.len() {
                vs[i] = ds[t][i] - ds[t - 1][i];
                vr[i] = dr[t][i] - dr[t - 1][i];
            }
            frame += wv * relative_huber(&vs, &vr, dv, eps);
        }
        total += frame;
    }
    Ok(total / T::count(ds.len()))
}

/// Dynamic loss per trial, averaged over trials.
pub fn dynamic_loss_mean<T: Real>(
    pairs: &[(&Trajectory<T>, &Trajectory<T>)],
    cfg: &LossConfig,
) -> Result<T, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut total = T::zero();
    for (s, r) in pairs {
        total += dynamic_loss(s, r, cfg)?;
    }
    Ok(total / T::count(pairs.len()))
}

/// Mean absolute base-distance discrepancy over all frames and segments,
/// in meters.
pub fn internal_error<T: Real>(sim: &Trajectory<T>, real: &Trajectory<T>) -> Result<T, MetricError> {
    check_aligned(sim, real)?;
    let mut total = T::zero();
    let mut count = 0usize;
    for (a, b) in sim.frames.iter().zip(&real.frames) {
        for (x, y) in base_distances(&a.poses).into_iter().zip(base_distances(&b.poses)) {
            total += (x - y).abs();
            count += 1;
        }
    }
    Ok(total / T::count(count))
}
