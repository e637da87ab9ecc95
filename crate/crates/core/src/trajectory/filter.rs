//! Zero-phase Butterworth low-pass filtering.

use nalgebra::{Quaternion, UnitQuaternion};
use thiserror::Error;

use super::Trajectory;
use crate::real::Real;

#[derive(Debug, Error, PartialEq)]
pub enum FilterError {
    #[error("cutoff {cutoff} Hz must lie in (0, {nyquist}) Hz")]
    CutoffOutOfRange { cutoff: f64, nyquist: f64 },
    #[error("unsupported filter order {0}; expected 2 or 4")]
    Order(usize),
}

/// One second-order section `b0 + b1 z⁻¹ + b2 z⁻² / 1 + a1 z⁻¹ + a2 z⁻²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad<T> {
    pub b: [T; 3],
    pub a: [T; 2],
}

impl<T: Real> Biquad<T> {
    /// Direct-form II transposed run over `x` in place, starting from the
    /// steady state for a constant input equal to `x[0]`.
    fn run(&self, x: &mut [T]) {
        let [b0, b1, b2] = self.b;
        let [a1, a2] = self.a;
        let x0 = match x.first() {
            Some(&v) => v,
            None => return,
        };
        // Steady state of a unit-DC-gain section driven by x0.
        let mut z2 = x0 * (b2 - a2);
        let mut z1 = x0 * (b1 - a1) + z2;
        for v in x.iter_mut() {
            let input = *v;
            let y = b0 * input + z1;
            z1 = b1 * input - a1 * y + z2;
            z2 = b2 * input - a2 * y;
            *v = y;
        }
    }
}

/// Digital Butterworth low-pass as a cascade of biquads (bilinear transform
/// with frequency pre-warping).
#[derive(Debug, Clone, PartialEq)]
pub struct ButterworthDesign<T = f64> {
    pub order: usize,
    pub sections: Vec<Biquad<T>>,
}

impl<T: Real> ButterworthDesign<T> {
    pub fn lowpass(order: usize, cutoff_hz: T, rate_hz: T) -> Result<Self, FilterError> {
        let nyquist = rate_hz * T::lit(0.5);
        if !(cutoff_hz > T::zero() && cutoff_hz < nyquist) {
            return Err(FilterError::CutoffOutOfRange { cutoff: cutoff_hz.as_f64(), nyquist: nyquist.as_f64() });
        }
        if order != 2 && order != 4 {
            return Err(FilterError::Order(order));
        }
        let k = (T::pi() * cutoff_hz / rate_hz).tan();
        let k2 = k * k;
        let two = T::lit(2.0);
        let sections = (1..=order / 2)
            .map(|i| {
                let angle = T::pi() * T::count(2 * i - 1) / T::count(2 * order);
                let q = T::one() / (two * angle.cos());
                let norm = T::one() / (T::one() + k / q + k2);
                let b0 = k2 * norm;
                Biquad { b: [b0, two * b0, b0], a: [two * (k2 - T::one()) * norm, (T::one() - k / q + k2) * norm] }
            })
            .collect();
        Ok(Self { order, sections })
    }

    /// Forward then backward pass over `signal`, with odd reflection padding
    /// at both ends to suppress start-up transients.
    pub fn filtfilt(&self, signal: &[T]) -> Vec<T> {
        let n = signal.len();
        if n < 2 {
            return signal.to_vec();
        }
        let pad = (3 * (self.order + 1)).min(n - 1);
        let two = T::lit(2.0);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| two * signal[0] - signal[i]));
        ext.extend_from_slice(signal);
        ext.extend((1..=pad).map(|i| two * signal[n - 1] - signal[n - 1 - i]));
        for s in &self.sections {
            s.run(&mut ext);
        }
        ext.reverse();
        for s in &self.sections {
            s.run(&mut ext);
        }
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}

/// Zero-phase low-pass of every position coordinate and quaternion
/// component; quaternions are renormalized afterwards.
pub fn butterworth_lowpass<T: Real>(
    traj: &Trajectory<T>,
    cutoff_hz: T,
    order: usize,
) -> Result<Trajectory<T>, FilterError> {
    let design = ButterworthDesign::lowpass(order, cutoff_hz, traj.rate_hz)?;
    let mut out = traj.clone();
    let frames = traj.frames.len();
    for seg in 0..traj.n_segments() {
        let mut quats: Vec<Quaternion<T>> =
            traj.frames.iter().map(|f| *f.poses[seg].orientation.quaternion()).collect();
        // Keep consecutive quaternions in one hemisphere.
        for i in 1..quats.len() {
            if quats[i].dot(&quats[i - 1]) < T::zero() {
                quats[i] = -quats[i];
            }
        }
        let mut series = vec![T::zero(); frames];
        for k in 0..3 {
            for (i, f) in traj.frames.iter().enumerate() {
                series[i] = f.poses[seg].position[k];
            }
            for (f, v) in out.frames.iter_mut().zip(design.filtfilt(&series)) {
                f.poses[seg].position[k] = v;
            }
        }
        let mut filtered = vec![Quaternion::identity(); frames];
        for k in 0..4 {
            for (i, q) in quats.iter().enumerate() {
                series[i] = q.coords[k];
            }
            for (q, v) in filtered.iter_mut().zip(design.filtfilt(&series)) {
                q.coords[k] = v;
            }
        }
        for (f, q) in out.frames.iter_mut().zip(filtered) {
            f.poses[seg].orientation = UnitQuaternion::new_normalize(q);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{Frame, Pose};
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use std::f64::consts::PI;

    /// Magnitude response of the digital Butterworth low-pass designed by
    /// the bilinear transform: |H|² = 1 / (1 + (tan(πf/fs)/tan(πfc/fs))^(2N)).
    fn analytic_gain(order: usize, f: f64, fc: f64, fs: f64) -> f64 {
        let ratio = (PI * f / fs).tan() / (PI * fc / fs).tan();
        (1.0 / (1.0 + ratio.powi(2 * order as i32))).sqrt()
    }

    fn response(design: &ButterworthDesign<f64>, f: f64, fs: f64) -> f64 {
        // Evaluate the cascade transfer function at z = e^{jω}.
        let w = 2.0 * PI * f / fs;
        let z1 = nalgebra::Complex::new(w.cos(), -w.sin());
        let z2 = z1 * z1;
        design
            .sections
            .iter()
            .map(|s| ((z1 * s.b[1] + z2 * s.b[2] + s.b[0]) / (z1 * s.a[0] + z2 * s.a[1] + 1.0)).norm())
            .product()
    }

    #[test]
    fn design_matches_analytic_magnitude() {
        for order in [2, 4] {
            let d = ButterworthDesign::lowpass(order, 10.0, 120.0).unwrap();
            for f in [0.0, 1.0, 5.0, 10.0, 20.0, 40.0, 59.0] {
                assert_relative_eq!(response(&d, f, 120.0), analytic_gain(order, f, 10.0, 120.0), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(matches!(ButterworthDesign::<f64>::lowpass(2, 0.0, 120.0), Err(FilterError::CutoffOutOfRange { .. })));
        assert!(matches!(ButterworthDesign::<f64>::lowpass(2, 60.0, 120.0), Err(FilterError::CutoffOutOfRange { .. })));
        assert_eq!(ButterworthDesign::<f64>::lowpass(3, 10.0, 120.0), Err(FilterError::Order(3)));
    }

    #[test]
    fn constant_signal_unchanged() {
        let d = ButterworthDesign::lowpass(4, 10.0, 120.0).unwrap();
        let y = d.filtfilt(&vec![3.25f64; 200]);
        for v in y {
            assert!((v - 3.25).abs() < 1e-6);
        }
    }

    #[test]
    fn slow_sinusoid_preserved() {
        let fs = 120.0;
        let fc = 10.0;
        let f = fc / 10.0;
        for order in [2, 4] {
            let d = ButterworthDesign::lowpass(order, fc, fs).unwrap();
            let x: Vec<f64> = (0..1200).map(|i| (2.0 * PI * f * i as f64 / fs).sin()).collect();
            let y = d.filtfilt(&x);
            // Zero-phase: gain is |H|² at the tone.
            let expected = analytic_gain(order, f, fc, fs).powi(2);
            assert!((expected - 1.0).abs() < 0.01);
            let peak = y[200..1000].iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!((peak - expected).abs() < 0.01, "order {order}: peak {peak}");
        }
    }

    #[test]
    fn nyquist_tone_removed() {
        let fs = 120.0;
        let d = ButterworthDesign::lowpass(2, fs / 8.0, fs).unwrap();
        let x: Vec<f64> = (0..240).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let y = d.filtfilt(&x);
        let analytic = analytic_gain(2, fs / 2.0 - 1e-9, fs / 8.0, fs).powi(2);
        assert!(analytic < 1e-12);
        // The first and last samples carry the padding transient.
        let peak = y[20..220].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(peak < 0.05, "peak {peak}");
    }

    #[test]
    fn trajectory_filter_keeps_timestamps_and_unit_quaternions() {
        let mut t = Trajectory::new(120.0);
        for i in 0..100 {
            let noise = if i % 2 == 0 { 0.01 } else { -0.01 };
            let poses = vec![
                Pose::new(Vector3::new(noise, 0.0, 0.0), UnitQuaternion::from_euler_angles(noise, 0.0, 0.1)),
                Pose::new(Vector3::new(0.0, 1.0 + noise, 0.0), UnitQuaternion::identity()),
            ];
            t.frames.push(Frame { t: i as f64 / 120.0, poses });
        }
        let out = butterworth_lowpass(&t, 10.0, 2).unwrap();
        assert_eq!(out.len(), t.len());
        for (a, b) in out.frames.iter().zip(&t.frames) {
            assert_eq!(a.t, b.t);
            for p in &a.poses {
                assert_relative_eq!(p.orientation.quaternion().norm(), 1.0, epsilon = 1e-12);
            }
        }
        assert!(out.frames[50].poses[0].position.x.abs() < 1e-3);
        out.validate().unwrap();
    }
}
