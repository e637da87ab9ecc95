//! Geometry, physical parameters and the assembled arm model.
//!
//! The arm is a chain of `n` rigid segments whose dimensions shrink by a
//! constant ratio `alpha` from base to tip. Segment `i` (1-based) has length
//! `L0·alpha^(i-1)`, tendon anchor radius `r0·alpha^(i-1)` and mass
//! `m0·alpha^(3(i-1))`. Each segment hangs from a two-axis elastic joint at
//! its proximal end; joint 1 sits on the mount.

use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::real::Real;

/// Number of cables routed along the arm.
pub const TENDON_COUNT: usize = 3;

/// Angular stations of the three cables around the backbone, radians.
pub const TENDON_STATIONS: [f64; TENDON_COUNT] =
    [0.0, 2.0 * std::f64::consts::FRAC_PI_3, 4.0 * std::f64::consts::FRAC_PI_3];

/// Unit direction of each cable station in the segment cross-section.
///
/// Stations 2 and 3 are exact mirror images about the x axis so that
/// symmetric dual-cable actuation stays planar to the last bit.
pub fn tendon_station_dirs<T: Real>() -> [[T; 2]; TENDON_COUNT] {
    let c = T::lit(-0.5);
    let s = T::lit(0.75f64.sqrt());
    [[T::one(), T::zero()], [c, s], [c, -s]]
}

/// Total length of the default prototype, meters.
pub const PROTOTYPE_LENGTH: f64 = 0.507;

#[derive(Debug, Error)]
pub enum ArmError {
    #[error("invalid arm description: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("parameter file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parameter file {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Stiffness of joint `i` (1-based) under the cubic scaling law.
pub fn scaled_stiffness<T: Real>(k0: T, alpha: T, i: usize) -> Result<T, ArmError> {
    if i < 1 {
        return Err(ArmError::Domain(format!("joint index must be >= 1, got {i}")));
    }
    if !(alpha > T::zero() && alpha < T::one()) {
        return Err(ArmError::Domain(format!("scale ratio must lie in (0,1), got {}", alpha.as_f64())));
    }
    if !(k0 > T::zero()) {
        return Err(ArmError::Domain(format!("base stiffness must be positive, got {}", k0.as_f64())));
    }
    Ok(k0 * alpha.powi(3 * (i as i32 - 1)))
}

/// Viscous coefficient giving damping ratio `zeta` for stiffness `k` and mass `m`.
pub fn damping_from_ratio<T: Real>(zeta: T, k: T, m: T) -> Result<T, ArmError> {
    if zeta < T::zero() || !(k > T::zero()) || !(m > T::zero()) {
        return Err(ArmError::Domain(format!(
            "damping_from_ratio needs zeta >= 0 and k, m > 0 (zeta={}, k={}, m={})",
            zeta.as_f64(),
            k.as_f64(),
            m.as_f64()
        )));
    }
    Ok(T::lit(2.0) * zeta * (k * m).sqrt())
}

/// Critically damped velocity gain for proportional gain `kp` moving `m_ref`.
pub fn init_kv<T: Real>(kp: T, m_ref: T) -> Result<T, ArmError> {
    if !(kp > T::zero()) || !(m_ref > T::zero()) {
        return Err(ArmError::Domain(format!(
            "init_kv needs kp, m_ref > 0 (kp={}, m_ref={})",
            kp.as_f64(),
            m_ref.as_f64()
        )));
    }
    Ok(T::lit(2.0) * (kp * m_ref).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmGeometry<T = f64> {
    pub n_segments: usize,
    /// Length of the base segment, meters.
    pub base_length: T,
    /// Tendon anchor radius of the base segment, meters.
    pub base_radius: T,
    /// Constant shrink ratio between consecutive segments.
    pub scale_ratio: T,
    /// Mass of the base segment, kilograms.
    pub base_mass: T,
}

impl<T: Real> ArmGeometry<T> {
    /// Geometry of `n` segments with ratio `alpha` scaled to a given total length.
    pub fn with_total_length(n: usize, alpha: T, total: T, base_radius: T, base_mass: T) -> Self {
        let base_length = total * (T::one() - alpha) / (T::one() - alpha.powi(n as i32));
        Self { n_segments: n, base_length, base_radius, scale_ratio: alpha, base_mass }
    }

    /// The 18-segment prototype (50.7 cm, alpha = 0.85).
    pub fn prototype() -> Self {
        Self::with_total_length(18, T::lit(0.85), T::lit(PROTOTYPE_LENGTH), T::lit(0.035), T::lit(0.01))
    }

    /// Reduced 8-segment configuration used for quick experiments and tests.
    pub fn desk() -> Self {
        Self::with_total_length(8, T::lit(0.85), T::lit(PROTOTYPE_LENGTH), T::lit(0.035), T::lit(0.01))
    }

    fn scale(&self, i: usize, power: i32) -> T {
        self.scale_ratio.powi(power * (i as i32 - 1))
    }

    /// Length of segment `i` (1-based).
    pub fn segment_length(&self, i: usize) -> T {
        self.base_length * self.scale(i, 1)
    }

    pub fn anchor_radius(&self, i: usize) -> T {
        self.base_radius * self.scale(i, 1)
    }

    pub fn segment_mass(&self, i: usize) -> T {
        self.base_mass * self.scale(i, 3)
    }

    /// Backbone length `L0·(1-alpha^n)/(1-alpha)`.
    pub fn total_length(&self) -> T {
        let a = self.scale_ratio;
        self.base_length * (T::one() - a.powi(self.n_segments as i32)) / (T::one() - a)
    }

    pub fn total_mass(&self) -> T {
        (1..=self.n_segments).map(|i| self.segment_mass(i)).fold(T::zero(), |a, b| a + b)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.n_segments < 2 {
            v.push(format!("n_segments must be >= 2, got {}", self.n_segments));
        }
        if !(self.scale_ratio > T::zero() && self.scale_ratio < T::one()) {
            v.push(format!("alpha must lie in (0,1), got {}", self.scale_ratio.as_f64()));
        }
        for (name, x) in [("L0", self.base_length), ("r0", self.base_radius), ("m0", self.base_mass)] {
            if !(x > T::zero()) || !x.finite() {
                v.push(format!("{name} must be positive, got {}", x.as_f64()));
            }
        }
        v
    }

    pub fn cast<U: Real>(&self) -> ArmGeometry<U> {
        ArmGeometry {
            n_segments: self.n_segments,
            base_length: U::lit(self.base_length.as_f64()),
            base_radius: U::lit(self.base_radius.as_f64()),
            scale_ratio: U::lit(self.scale_ratio.as_f64()),
            base_mass: U::lit(self.base_mass.as_f64()),
        }
    }
}

impl Default for ArmGeometry<f64> {
    fn default() -> Self {
        Self::prototype()
    }
}

/// The identifiable parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmParameters<T = f64> {
    /// Stiffness of the base joint, N·m/rad.
    pub base_stiffness: T,
    /// Per-joint corrections on top of the scaling law.
    pub stiffness_multipliers: Vec<T>,
    pub damping_ratio: T,
    pub damping_multipliers: Vec<T>,
    /// Capstan friction coefficient of the cables.
    pub tendon_friction: T,
    /// Actuator proportional gain, N/m.
    pub kp: T,
    /// Actuator velocity gain, N·s/m.
    pub kv: T,
    /// Maximum cable tension, N.
    pub force_range: T,
    /// First-order actuator lag, s.
    pub tau_m: T,
}

impl<T: Real> ArmParameters<T> {
    /// Desk-scale reference values; these are not measured on hardware.
    pub fn reference(geometry: &ArmGeometry<T>) -> Self {
        let n = geometry.n_segments;
        let kp = T::lit(500.0);
        let kv = init_kv(kp, geometry.total_mass()).unwrap_or_else(|_| T::lit(1.0));
        Self {
            base_stiffness: T::lit(0.05),
            stiffness_multipliers: vec![T::one(); n],
            damping_ratio: T::lit(0.15),
            damping_multipliers: vec![T::one(); n],
            tendon_friction: T::lit(0.1),
            kp,
            kv,
            force_range: T::lit(40.0),
            tau_m: T::lit(0.05),
        }
    }

    pub fn violations(&self, n_segments: usize) -> Vec<String> {
        let mut v = Vec::new();
        for (name, x) in [
            ("K0", self.base_stiffness),
            ("zeta", self.damping_ratio),
            ("kp", self.kp),
            ("kv", self.kv),
            ("F_range", self.force_range),
            ("tau_m", self.tau_m),
        ] {
            if !(x > T::zero()) || !x.finite() {
                v.push(format!("{name} must be positive, got {}", x.as_f64()));
            }
        }
        if !(self.tendon_friction >= T::zero()) || !self.tendon_friction.finite() {
            v.push(format!("mu_t must be >= 0, got {}", self.tendon_friction.as_f64()));
        }
        let lo = T::lit(0.9 - 1e-12);
        let hi = T::lit(1.1 + 1e-12);
        for (name, m) in
            [("stiffness multipliers", &self.stiffness_multipliers), ("damping multipliers", &self.damping_multipliers)]
        {
            if m.len() != n_segments {
                v.push(format!("{name}: expected {n_segments} entries, got {}", m.len()));
            }
            for (i, &c) in m.iter().enumerate() {
                if !(c >= lo && c <= hi) {
                    v.push(format!("{name}[{i}] = {} outside [0.9, 1.1]", c.as_f64()));
                }
            }
        }
        v
    }

    pub fn cast<U: Real>(&self) -> ArmParameters<U> {
        let c = |x: T| U::lit(x.as_f64());
        ArmParameters {
            base_stiffness: c(self.base_stiffness),
            stiffness_multipliers: self.stiffness_multipliers.iter().map(|&x| c(x)).collect(),
            damping_ratio: c(self.damping_ratio),
            damping_multipliers: self.damping_multipliers.iter().map(|&x| c(x)).collect(),
            tendon_friction: c(self.tendon_friction),
            kp: c(self.kp),
            kv: c(self.kv),
            force_range: c(self.force_range),
            tau_m: c(self.tau_m),
        }
    }
}

/// Per-segment quantities precomputed for the simulator.
#[derive(Debug, Clone)]
pub struct Segment<T> {
    pub length: T,
    pub anchor_radius: T,
    pub mass: T,
    /// Principal inertia about the centroid (bending, bending, axial), kg·m².
    pub inertia: [T; 3],
    pub stiffness: T,
    pub damping: T,
}

/// Immutable assembled model; shareable across simulation instances.
#[derive(Debug, Clone)]
pub struct ArmModel<T = f64> {
    geometry: ArmGeometry<T>,
    params: ArmParameters<T>,
    segments: Vec<Segment<T>>,
    straight_tendon_lengths: [T; TENDON_COUNT],
}

/// Assembles a model, reporting every violated invariant at once.
pub fn build_arm<T: Real>(geometry: ArmGeometry<T>, params: ArmParameters<T>) -> Result<ArmModel<T>, ArmError> {
    let mut v = geometry.violations();
    v.extend(params.violations(geometry.n_segments));
    if !v.is_empty() {
        return Err(ArmError::Invalid(v));
    }
    let alpha = geometry.scale_ratio;
    let segments = (1..=geometry.n_segments)
        .map(|i| {
            let length = geometry.segment_length(i);
            let r = geometry.anchor_radius(i);
            let mass = geometry.segment_mass(i);
            let stiffness = params.stiffness_multipliers[i - 1] * scaled_stiffness(params.base_stiffness, alpha, i)?;
            let damping =
                params.damping_multipliers[i - 1] * damping_from_ratio(params.damping_ratio, stiffness, mass)?;
            let twelfth = T::one() / T::lit(12.0);
            let bend = mass * (T::lit(3.0) * r * r + length * length) * twelfth;
            let axial = mass * r * r * T::lit(0.5);
            Ok(Segment { length, anchor_radius: r, mass, inertia: [bend, bend, axial], stiffness, damping })
        })
        .collect::<Result<Vec<_>, ArmError>>()?;
    let mut model = ArmModel { geometry, params, segments, straight_tendon_lengths: [T::zero(); TENDON_COUNT] };
    let zeros = vec![T::zero(); 2 * model.n_joints()];
    model.straight_tendon_lengths = crate::dynamics::tendon_length(&model, &zeros);
    Ok(model)
}

impl<T: Real> ArmModel<T> {
    pub fn geometry(&self) -> &ArmGeometry<T> {
        &self.geometry
    }

    pub fn params(&self) -> &ArmParameters<T> {
        &self.params
    }

    pub fn segments(&self) -> &[Segment<T>] {
        &self.segments
    }

    pub fn n_joints(&self) -> usize {
        self.segments.len()
    }

    /// Number of generalized coordinates (two bending angles per joint).
    pub fn n_coords(&self) -> usize {
        2 * self.segments.len()
    }

    pub fn stiffness(&self) -> Vec<T> {
        self.segments.iter().map(|s| s.stiffness).collect()
    }

    pub fn damping(&self) -> Vec<T> {
        self.segments.iter().map(|s| s.damping).collect()
    }

    pub fn total_length(&self) -> T {
        self.geometry.total_length()
    }

    pub fn total_mass(&self) -> T {
        self.geometry.total_mass()
    }

    /// Cable lengths of the straight arm; also the actuator reference.
    pub fn straight_tendon_lengths(&self) -> [T; TENDON_COUNT] {
        self.straight_tendon_lengths
    }

    /// Same geometry with a different parameter set.
    pub fn with_params(&self, params: ArmParameters<T>) -> Result<Self, ArmError> {
        build_arm(self.geometry.clone(), params)
    }
}

/// Joint coordinates, velocities and actuator state of one simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmState<T = f64> {
    /// Interleaved `[bend_x1, bend_y1, bend_x2, ...]`, radians.
    pub theta: Vec<T>,
    pub theta_dot: Vec<T>,
    /// Internal length state of the three cable actuators, meters.
    pub tendon_act_lengths: [T; TENDON_COUNT],
    pub sim_time: T,
}

impl<T: Real> ArmState<T> {
    /// Straight arm at rest with actuators at the straight cable lengths.
    pub fn rest(model: &ArmModel<T>) -> Self {
        let n = model.n_coords();
        Self {
            theta: vec![T::zero(); n],
            theta_dot: vec![T::zero(); n],
            tendon_act_lengths: model.straight_tendon_lengths(),
            sim_time: T::zero(),
        }
    }

    pub fn max_speed(&self) -> T {
        self.theta_dot.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

/// On-disk parameter file. Field names are part of the file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamFile {
    pub geometry: GeometrySection,
    pub stiffness: StiffnessSection,
    pub damping: DampingSection,
    pub control: ControlSection,
    #[serde(default)]
    pub meta: MetaSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometrySection {
    pub n_segments: usize,
    #[serde(rename = "L0")]
    pub l0: f64,
    pub r0: f64,
    pub alpha: f64,
    pub m0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StiffnessSection {
    #[serde(rename = "K0")]
    pub k0: f64,
    pub multipliers: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DampingSection {
    pub zeta: f64,
    pub multipliers: Vec<f64>,
    pub mu_t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSection {
    pub kp: f64,
    pub kv: f64,
    #[serde(rename = "F_range")]
    pub f_range: f64,
    pub tau_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaSection {
    pub version: String,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for MetaSection {
    fn default() -> Self {
        Self { version: env!("CARGO_PKG_VERSION").to_string(), seed: None }
    }
}

impl ParamFile {
    pub fn new(geometry: &ArmGeometry<f64>, params: &ArmParameters<f64>, seed: Option<u64>) -> Self {
        Self {
            geometry: GeometrySection {
                n_segments: geometry.n_segments,
                l0: geometry.base_length,
                r0: geometry.base_radius,
                alpha: geometry.scale_ratio,
                m0: geometry.base_mass,
            },
            stiffness: StiffnessSection {
                k0: params.base_stiffness,
                multipliers: params.stiffness_multipliers.clone(),
            },
            damping: DampingSection {
                zeta: params.damping_ratio,
                multipliers: params.damping_multipliers.clone(),
                mu_t: params.tendon_friction,
            },
            control: ControlSection { kp: params.kp, kv: params.kv, f_range: params.force_range, tau_m: params.tau_m },
            meta: MetaSection { seed, ..MetaSection::default() },
        }
    }

    pub fn geometry(&self) -> ArmGeometry<f64> {
        ArmGeometry {
            n_segments: self.geometry.n_segments,
            base_length: self.geometry.l0,
            base_radius: self.geometry.r0,
            scale_ratio: self.geometry.alpha,
            base_mass: self.geometry.m0,
        }
    }

    pub fn params(&self) -> ArmParameters<f64> {
        ArmParameters {
            base_stiffness: self.stiffness.k0,
            stiffness_multipliers: self.stiffness.multipliers.clone(),
            damping_ratio: self.damping.zeta,
            damping_multipliers: self.damping.multipliers.clone(),
            tendon_friction: self.damping.mu_t,
            kp: self.control.kp,
            kv: self.control.kv,
            force_range: self.control.f_range,
            tau_m: self.control.tau_m,
        }
    }

    pub fn build<T: Real>(&self) -> Result<ArmModel<T>, ArmError> {
        build_arm(self.geometry().cast(), self.params().cast())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("parameter file serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, ArmError> {
        let p = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ArmError::Io { path: p.clone(), source })?;
        Self::from_json(&text).map_err(|source| ArmError::Parse { path: p, source })
    }

    pub fn save(&self, path: &Path) -> Result<(), ArmError> {
        std::fs::write(path, self.to_json() + "\n")
            .map_err(|source| ArmError::Io { path: path.display().to_string(), source })
    }
}
