//! Staged identification: stiffness from static tilts, damping and friction
//! from free releases, actuator parameters from actuation cycles.

use std::sync::atomic::{AtomicUsize, Ordering};

use log::{debug, info};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::de::{de_minimize, DeConfig, DeError, FnObjective};
use crate::arm::{build_arm, init_kv, ArmError, ArmGeometry, ArmModel, ArmParameters, ParamFile};
use crate::dynamics::{run_protocol, ExperimentProtocol, SimConfig, SimError};
use crate::metrics::{dynamic_loss, internal_error, static_loss, LossConfig, MetricError};
use crate::trajectory::{align, butterworth_lowpass, Pose, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stiffness,
    Damping,
    Control,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Stiffness, Stage::Damping, Stage::Control];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Stiffness => "stiffness",
            Stage::Damping => "damping",
            Stage::Control => "control",
        }
    }

    pub fn parse(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }

    fn index(self) -> u64 {
        self as u64 + 1
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum IdentError {
    #[error("stage {stage}: no {what} recordings supplied")]
    MissingData { stage: Stage, what: &'static str },
    #[error("stage {stage}: {source}")]
    Optimizer { stage: Stage, source: DeError },
    #[error("stage {stage}: every candidate failed to simulate")]
    AllFailed { stage: Stage },
    #[error("stages must run in order stiffness, damping, control; got {0:?}")]
    StageOrder(Vec<Stage>),
    #[error("invalid identification config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ArmError),
    #[error("recording {index} of {what}: {message}")]
    Recording { what: &'static str, index: usize, message: String },
}

/// A measured (or synthesized) trajectory plus the single-condition protocol
/// that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub protocol: ExperimentProtocol,
    pub trajectory: Trajectory,
}

/// Recordings for all three stages plus a held-out free release.
#[derive(Debug, Clone, Default)]
pub struct DatasetBundle {
    pub static_tilt: Vec<Recording>,
    pub free_release: Vec<Recording>,
    pub actuation: Vec<Recording>,
    pub held_out: Option<Recording>,
}

/// Which experiments to run when synthesizing a bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub static_tilt: ExperimentProtocol,
    pub free_release: Vec<ExperimentProtocol>,
    pub actuation: ExperimentProtocol,
    pub held_out: Option<ExperimentProtocol>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            static_tilt: ExperimentProtocol::StaticTilt { angles_deg: vec![0.0, 30.0, 60.0, 90.0], hold_s: 1.0 },
            free_release: vec![ExperimentProtocol::FreeRelease {
                initial_contraction_mm: 80.0,
                direction_deg: 180.0,
                tilt_deg: 0.0,
                duration_s: 3.0,
            }],
            actuation: ExperimentProtocol::ActuationCycle {
                levels_mm: vec![20.0, 40.0, 60.0, 80.0, 100.0],
                direction_deg: 0.0,
                tilt_deg: 0.0,
                curl_s: 1.5,
                release_s: 1.5,
            },
            held_out: Some(ExperimentProtocol::FreeRelease {
                initial_contraction_mm: 100.0,
                direction_deg: 180.0,
                tilt_deg: 0.0,
                duration_s: 3.6,
            }),
        }
    }
}

fn record_all(model: &ArmModel, protocols: &[ExperimentProtocol], sim: &SimConfig) -> Result<Vec<Recording>, SimError> {
    let mut out = Vec::new();
    for p in protocols.iter().flat_map(|p| p.conditions()) {
        let mut trajs = run_protocol(model, &p, sim)?;
        out.push(Recording { protocol: p, trajectory: trajs.remove(0) });
    }
    Ok(out)
}

impl DatasetBundle {
    /// Runs every experiment of `spec` on `model`. With `noise`, adds
    /// Gaussian noise of that standard deviation (meters) to every marker
    /// position using a generator seeded with `seed`.
    pub fn synthesize(
        model: &ArmModel,
        spec: &DatasetSpec,
        sim: &SimConfig,
        noise: Option<f64>,
        seed: u64,
    ) -> Result<Self, SimError> {
        let mut bundle = Self {
            static_tilt: record_all(model, std::slice::from_ref(&spec.static_tilt), sim)?,
            free_release: record_all(model, &spec.free_release, sim)?,
            actuation: record_all(model, std::slice::from_ref(&spec.actuation), sim)?,
            held_out: match &spec.held_out {
                Some(p) => record_all(model, std::slice::from_ref(p), sim)?.into_iter().next(),
                None => None,
            },
        };
        if let Some(std) = noise {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for r in bundle.recordings_mut() {
                r.trajectory = r.trajectory.with_position_noise(std, &mut rng);
            }
        }
        Ok(bundle)
    }

    fn recordings_mut(&mut self) -> impl Iterator<Item = &mut Recording> {
        self.static_tilt
            .iter_mut()
            .chain(self.free_release.iter_mut())
            .chain(self.actuation.iter_mut())
            .chain(self.held_out.iter_mut())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    pub cutoff_hz: f64,
    pub order: usize,
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self { cutoff_hz: 10.0, order: 2 }
    }
}

/// Search box for every identified scalar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamBounds {
    #[serde(rename = "K0")]
    pub k0: (f64, f64),
    pub zeta: (f64, f64),
    pub mu_t: (f64, f64),
    pub kp: (f64, f64),
    pub kv: (f64, f64),
    #[serde(rename = "F_range")]
    pub f_range: (f64, f64),
    pub tau_m: (f64, f64),
}

impl Default for ParamBounds {
    fn default() -> Self {
        Self {
            k0: (0.005, 0.5),
            zeta: (0.01, 1.0),
            mu_t: (0.0, 0.5),
            kp: (50.0, 5000.0),
            kv: (0.1, 50.0),
            f_range: (1.0, 150.0),
            tau_m: (0.005, 0.5),
        }
    }
}

impl ParamBounds {
    fn named(&self) -> [(&'static str, (f64, f64)); 7] {
        [
            ("K0", self.k0),
            ("zeta", self.zeta),
            ("mu_t", self.mu_t),
            ("kp", self.kp),
            ("kv", self.kv),
            ("F_range", self.f_range),
            ("tau_m", self.tau_m),
        ]
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, (lo, hi)) in self.named() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(format!("bounds.{name} must satisfy lo < hi, got [{lo}, {hi}]"));
            }
        }
        if self.mu_t.0 < 0.0 {
            return Err("bounds.mu_t must be non-negative".into());
        }
        for (name, (lo, _)) in self.named() {
            if name != "mu_t" && lo <= 0.0 {
                return Err(format!("bounds.{name} must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentConfig {
    pub seed: u64,
    pub loss: LossConfig,
    pub sim: SimConfig,
    pub coarse: DeConfig,
    pub fine: DeConfig,
    pub bounds: ParamBounds,
    /// Half-width of the per-joint multiplier box.
    pub fine_range: f64,
    pub fine_passes: bool,
    /// Optimize kv alongside kp; otherwise kv follows `init_kv(kp, m)`.
    pub co_optimize_kv: bool,
    /// Low-pass applied to recorded data before fitting.
    pub filter: Option<FilterSpec>,
    pub stages: Vec<Stage>,
}

impl Default for IdentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            loss: LossConfig::default(),
            sim: SimConfig { settle_damping_ratio: Some(0.7), settle_dt: Some(5e-3), ..SimConfig::default() },
            coarse: DeConfig::default(),
            fine: DeConfig::fine(0),
            bounds: ParamBounds::default(),
            fine_range: 0.1,
            fine_passes: true,
            co_optimize_kv: true,
            filter: Some(FilterSpec::default()),
            stages: Stage::ALL.to_vec(),
        }
    }
}

impl IdentConfig {
    pub fn validate(&self) -> Result<(), IdentError> {
        let cfg = |e: String| IdentError::Config(e);
        self.loss.validate().map_err(|e| cfg(e.to_string()))?;
        self.sim.validate().map_err(|e| cfg(e.to_string()))?;
        self.coarse.validate().map_err(|e| cfg(format!("coarse: {e}")))?;
        self.fine.validate().map_err(|e| cfg(format!("fine: {e}")))?;
        self.bounds.validate().map_err(cfg)?;
        if !(self.fine_range > 0.0 && self.fine_range <= 0.1) {
            return Err(cfg(format!("fine_range must lie in (0, 0.1], got {}", self.fine_range)));
        }
        if self.stages.is_empty() || self.stages.windows(2).any(|w| w[0] >= w[1]) {
            return Err(IdentError::StageOrder(self.stages.clone()));
        }
        Ok(())
    }

    fn de(&self, base: &DeConfig, stage: Stage, fine: bool) -> DeConfig {
        let k = stage.index() * 2 + fine as u64;
        DeConfig { seed: self.seed.wrapping_add(k.wrapping_mul(0x9E37_79B9_7F4A_7C15)), ..base.clone() }
    }
}

/// One DE pass of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutput {
    pub stage: Stage,
    pub pass: String,
    pub names: Vec<String>,
    pub best: Vec<f64>,
    pub best_loss: f64,
    /// Loss of the starting point (the first seeded member).
    pub start_loss: f64,
    pub trace: Vec<f64>,
    pub evaluations: usize,
    pub failed_evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolLoss {
    pub protocol: String,
    pub before: Option<f64>,
    pub after: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentReport {
    pub e_internal_before_m: Option<f64>,
    pub e_internal_after_m: Option<f64>,
    pub e_internal_ratio: Option<f64>,
    pub held_out_frames: usize,
    pub losses: Vec<ProtocolLoss>,
    pub velocity_term_enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentResult {
    pub stages: Vec<StageOutput>,
    pub initial: ParamFile,
    pub parameters: ParamFile,
    pub report: IdentReport,
    pub config: IdentConfig,
}

/// Multiplies every identifiable scalar by an independent log-uniform
/// factor in `[lo, hi]`.
pub fn perturb_parameters(params: &ArmParameters, seed: u64, lo: f64, hi: f64) -> ArmParameters {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = (lo.ln(), hi.ln());
    let mut f = || rng.gen_range(a..=b).exp();
    let mut p = params.clone();
    p.base_stiffness *= f();
    p.damping_ratio *= f();
    p.tendon_friction *= f();
    p.kp *= f();
    p.kv *= f();
    p.force_range *= f();
    p.tau_m *= f();
    p
}

/// Preprocessed real data and everything needed to score a candidate.
struct Problem<'a> {
    geometry: &'a ArmGeometry,
    cfg: &'a IdentConfig,
    static_real: Vec<(ExperimentProtocol, Vec<Pose>)>,
    free: Vec<Recording>,
    actuation: Vec<Recording>,
}

/// Mean positions over the final `window` seconds of a settled trajectory.
fn equilibrium(traj: &Trajectory, window: f64) -> Vec<Pose> {
    let end = traj.end_time();
    let tail: Vec<_> = traj.frames.iter().filter(|f| f.t >= end - window - 1e-9).collect();
    let n = tail.len() as f64;
    (0..traj.n_segments())
        .map(|s| {
            let sum = tail.iter().fold(Vector3::zeros(), |acc, f| acc + f.poses[s].position);
            Pose::new(sum / n, tail.last().expect("non-empty").poses[s].orientation)
        })
        .collect()
}

fn failure<E: std::fmt::Display>(e: E) -> f64 {
    debug!("candidate rejected: {e}");
    f64::INFINITY
}

impl<'a> Problem<'a> {
    fn model(&self, params: &ArmParameters) -> Result<ArmModel, ArmError> {
        build_arm(self.geometry.clone(), params.clone())
    }

    fn static_loss(&self, params: &ArmParameters) -> f64 {
        let model = match self.model(params) {
            Ok(m) => m,
            Err(e) => return failure(e),
        };
        let mut total = 0.0;
        for (protocol, real) in &self.static_real {
            let sim = match run_protocol(&model, protocol, &self.cfg.sim) {
                Ok(mut t) => equilibrium(&t.remove(0), 0.0),
                Err(e) => return failure(e),
            };
            match static_loss(&sim, real, &self.cfg.loss) {
                Ok(l) => total += l,
                Err(e) => return failure(e),
            }
        }
        total / self.static_real.len() as f64
    }

    fn dynamic(&self, params: &ArmParameters, recordings: &[Recording]) -> f64 {
        let model = match self.model(params) {
            Ok(m) => m,
            Err(e) => return failure(e),
        };
        let mut total = 0.0;
        for rec in recordings {
            match trajectory_loss(&model, rec, &self.cfg.sim, &self.cfg.loss) {
                Ok(l) => total += l,
                Err(e) => return failure(e),
            }
        }
        total / recordings.len() as f64
    }
}

#[derive(Debug, Error)]
enum EvalError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Align(#[from] crate::trajectory::AlignError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

fn simulate_aligned(model: &ArmModel, rec: &Recording, sim: &SimConfig) -> Result<(Trajectory, Trajectory), EvalError> {
    let simulated = run_protocol(model, &rec.protocol, sim)?.remove(0);
    Ok(align(&simulated, &rec.trajectory)?)
}

fn trajectory_loss(model: &ArmModel, rec: &Recording, sim: &SimConfig, loss: &LossConfig) -> Result<f64, EvalError> {
    let (s, r) = simulate_aligned(model, rec, sim)?;
    Ok(dynamic_loss(&s, &r, loss)?)
}

fn filtered(recs: &[Recording], filter: Option<FilterSpec>, what: &'static str) -> Result<Vec<Recording>, IdentError> {
    recs.iter()
        .enumerate()
        .map(|(index, r)| {
            if r.protocol.trajectory_count() != 1 {
                return Err(IdentError::Recording {
                    what,
                    index,
                    message: "protocol must describe one condition".into(),
                });
            }
            let trajectory = match filter {
                Some(f) if r.trajectory.len() > 1 => butterworth_lowpass(&r.trajectory, f.cutoff_hz, f.order)
                    .map_err(|e| IdentError::Recording { what, index, message: e.to_string() })?,
                _ => r.trajectory.clone(),
            };
            Ok(Recording { protocol: r.protocol.clone(), trajectory })
        })
        .collect()
}

struct Pass<'p> {
    stage: Stage,
    fine: bool,
    names: Vec<String>,
    bounds: Vec<(f64, f64)>,
    start: Vec<f64>,
    apply: Box<dyn Fn(&ArmParameters, &[f64]) -> ArmParameters + Sync + 'p>,
}

fn run_pass(
    pass: Pass<'_>,
    params: &ArmParameters,
    score: &(dyn Fn(&ArmParameters) -> f64 + Sync),
    de: &DeConfig,
) -> Result<(ArmParameters, StageOutput), IdentError> {
    let failures = AtomicUsize::new(0);
    let objective = FnObjective {
        dim: pass.bounds.len(),
        f: |x: &[f64]| {
            let v = score(&(pass.apply)(params, x));
            if !v.is_finite() {
                failures.fetch_add(1, Ordering::Relaxed);
            }
            v
        },
    };
    let result = de_minimize(&objective, &pass.bounds, de, std::slice::from_ref(&pass.start))
        .map_err(|source| IdentError::Optimizer { stage: pass.stage, source })?;
    if !result.best_value.is_finite() {
        return Err(IdentError::AllFailed { stage: pass.stage });
    }
    let label = if pass.fine { "fine" } else { "coarse" };
    info!("{} {label}: loss {:.6e} -> {:.6e}", pass.stage, result.trace[0], result.best_value);
    let updated = (pass.apply)(params, &result.best);
    let start_loss = score(&(pass.apply)(params, &clip(&pass.start, &pass.bounds)));
    Ok((
        updated,
        StageOutput {
            stage: pass.stage,
            pass: label.to_string(),
            names: pass.names,
            best: result.best,
            best_loss: result.best_value,
            start_loss,
            trace: result.trace,
            evaluations: result.evaluations,
            failed_evaluations: failures.into_inner(),
        },
    ))
}

fn clip(x: &[f64], bounds: &[(f64, f64)]) -> Vec<f64> {
    x.iter().zip(bounds).map(|(v, (lo, hi))| v.clamp(*lo, *hi)).collect()
}

fn multiplier_names(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

/// Runs the configured stages in order, each starting from the parameters
/// the previous one produced.
pub fn run_pipeline(
    data: &DatasetBundle,
    geometry: &ArmGeometry,
    initial: &ArmParameters,
    cfg: &IdentConfig,
) -> Result<IdentResult, IdentError> {
    cfg.validate()?;
    build_arm(geometry.clone(), initial.clone())?;
    let n = geometry.n_segments;
    for &stage in &cfg.stages {
        let (what, empty) = match stage {
            Stage::Stiffness => ("static_tilt", data.static_tilt.is_empty()),
            Stage::Damping => ("free_release", data.free_release.is_empty()),
            Stage::Control => ("actuation", data.actuation.is_empty()),
        };
        if empty {
            return Err(IdentError::MissingData { stage, what });
        }
    }
    let static_recs = filtered(&data.static_tilt, cfg.filter, "static_tilt")?;
    let problem = Problem {
        geometry,
        cfg,
        static_real: static_recs
            .into_iter()
            .map(|r| {
                let window = match r.protocol {
                    ExperimentProtocol::StaticTilt { hold_s, .. } => hold_s + cfg.sim.settle_hold,
                    _ => 0.0,
                };
                let sim_protocol = match r.protocol {
                    ExperimentProtocol::StaticTilt { angles_deg, .. } => {
                        ExperimentProtocol::StaticTilt { angles_deg, hold_s: 0.0 }
                    }
                    p => p,
                };
                (sim_protocol, equilibrium(&r.trajectory, window))
            })
            .collect(),
        free: filtered(&data.free_release, cfg.filter, "free_release")?,
        actuation: filtered(&data.actuation, cfg.filter, "actuation")?,
    };
    let held_out = match &data.held_out {
        Some(r) => filtered(std::slice::from_ref(r), cfg.filter, "held_out")?.pop(),
        None => None,
    };

    let fine_box = vec![(1.0 - cfg.fine_range, 1.0 + cfg.fine_range); n];
    let b = &cfg.bounds;
    let m_ref = geometry.total_mass();
    let mut params = initial.clone();
    let mut stages = Vec::new();

    for &stage in &cfg.stages {
        let (coarse, fine): (Pass, Option<Pass>) = match stage {
            Stage::Stiffness => (
                Pass {
                    stage,
                    fine: false,
                    names: vec!["K0".into()],
                    bounds: vec![b.k0],
                    start: vec![params.base_stiffness],
                    apply: Box::new(|p, x| ArmParameters { base_stiffness: x[0], ..p.clone() }),
                },
                Some(Pass {
                    stage,
                    fine: true,
                    names: multiplier_names("c", n),
                    bounds: fine_box.clone(),
                    start: vec![1.0; n],
                    apply: Box::new(|p, x| ArmParameters { stiffness_multipliers: x.to_vec(), ..p.clone() }),
                }),
            ),
            Stage::Damping => (
                Pass {
                    stage,
                    fine: false,
                    names: vec!["zeta".into(), "mu_t".into()],
                    bounds: vec![b.zeta, b.mu_t],
                    start: vec![params.damping_ratio, params.tendon_friction],
                    apply: Box::new(|p, x| ArmParameters { damping_ratio: x[0], tendon_friction: x[1], ..p.clone() }),
                },
                Some(Pass {
                    stage,
                    fine: true,
                    names: multiplier_names("b", n),
                    bounds: fine_box.clone(),
                    start: vec![1.0; n],
                    apply: Box::new(|p, x| ArmParameters { damping_multipliers: x.to_vec(), ..p.clone() }),
                }),
            ),
            Stage::Control => {
                let kv0 = init_kv(params.kp, m_ref)?;
                let pass = if cfg.co_optimize_kv {
                    Pass {
                        stage,
                        fine: false,
                        names: vec!["kp".into(), "F_range".into(), "tau_m".into(), "kv".into()],
                        bounds: vec![b.kp, b.f_range, b.tau_m, b.kv],
                        start: vec![params.kp, params.force_range, params.tau_m, kv0],
                        apply: Box::new(|p, x| ArmParameters {
                            kp: x[0],
                            force_range: x[1],
                            tau_m: x[2],
                            kv: x[3],
                            ..p.clone()
                        }),
                    }
                } else {
                    Pass {
                        stage,
                        fine: false,
                        names: vec!["kp".into(), "F_range".into(), "tau_m".into()],
                        bounds: vec![b.kp, b.f_range, b.tau_m],
                        start: vec![params.kp, params.force_range, params.tau_m],
                        apply: Box::new(move |p, x| ArmParameters {
                            kp: x[0],
                            force_range: x[1],
                            tau_m: x[2],
                            kv: init_kv(x[0], m_ref).unwrap_or(f64::NAN),
                            ..p.clone()
                        }),
                    }
                };
                (pass, None)
            }
        };
        let score: Box<dyn Fn(&ArmParameters) -> f64 + Sync> = match stage {
            Stage::Stiffness => Box::new(|p| problem.static_loss(p)),
            Stage::Damping => Box::new(|p| problem.dynamic(p, &problem.free)),
            Stage::Control => Box::new(|p| problem.dynamic(p, &problem.actuation)),
        };
        let (next, out) = run_pass(coarse, &params, score.as_ref(), &cfg.de(&cfg.coarse, stage, false))?;
        params = next;
        stages.push(out);
        if let (Some(fine), true) = (fine, cfg.fine_passes) {
            let (next, out) = run_pass(fine, &params, score.as_ref(), &cfg.de(&cfg.fine, stage, true))?;
            params = next;
            stages.push(out);
        }
    }

    let report = report(&problem, held_out.as_ref(), initial, &params)?;
    Ok(IdentResult {
        stages,
        initial: ParamFile::new(geometry, initial, Some(cfg.seed)),
        parameters: ParamFile::new(geometry, &params, Some(cfg.seed)),
        report,
        config: cfg.clone(),
    })
}

/// Dynamic loss of `model` on one recording, after time alignment.
pub fn recording_loss(
    model: &ArmModel,
    rec: &Recording,
    sim: &SimConfig,
    loss: &LossConfig,
) -> Result<f64, Box<dyn std::error::Error + Send + Sync>> {
    Ok(trajectory_loss(model, rec, sim, loss)?)
}

/// Internal error of `model` on one recording.
pub fn recording_internal_error(
    model: &ArmModel,
    rec: &Recording,
    sim: &SimConfig,
) -> Result<f64, Box<dyn std::error::Error + Send + Sync>> {
    let (s, r) = simulate_aligned(model, rec, sim)?;
    Ok(internal_error(&s, &r)?)
}

fn report(
    problem: &Problem<'_>,
    held_out: Option<&Recording>,
    before: &ArmParameters,
    after: &ArmParameters,
) -> Result<IdentReport, IdentError> {
    let cfg = problem.cfg;
    let finite = |v: f64| v.is_finite().then_some(v);
    let (mb, ma) = (problem.model(before)?, problem.model(after)?);
    let e = |m: &ArmModel| held_out.and_then(|r| recording_internal_error(m, r, &cfg.sim).ok());
    let (eb, ea) = (e(&mb), e(&ma));
    let mut losses = Vec::new();
    if !problem.static_real.is_empty() {
        losses.push(ProtocolLoss {
            protocol: "static_tilt".into(),
            before: finite(problem.static_loss(before)),
            after: finite(problem.static_loss(after)),
        });
    }
    for (name, recs) in [("free_release", &problem.free), ("actuation_cycle", &problem.actuation)] {
        if !recs.is_empty() {
            losses.push(ProtocolLoss {
                protocol: name.into(),
                before: finite(problem.dynamic(before, recs)),
                after: finite(problem.dynamic(after, recs)),
            });
        }
    }
    Ok(IdentReport {
        e_internal_before_m: eb,
        e_internal_after_m: ea,
        e_internal_ratio: match (eb, ea) {
            (Some(b), Some(a)) if b > 0.0 => Some(a / b),
            _ => None,
        },
        held_out_frames: held_out.map_or(0, |r| r.trajectory.len()),
        losses,
        velocity_term_enabled: cfg.loss.velocity_enabled(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk() -> (ArmGeometry, ArmParameters, ArmModel) {
        let g = ArmGeometry::desk();
        let p = ArmParameters::reference(&g);
        let m = build_arm(g.clone(), p.clone()).unwrap();
        (g, p, m)
    }

    fn stiffness_only(seed: u64) -> IdentConfig {
        IdentConfig {
            seed,
            coarse: DeConfig { max_gens: 25, ..DeConfig::default() },
            fine: DeConfig { max_gens: 4, population: Some(8), ..DeConfig::default() },
            stages: vec![Stage::Stiffness],
            ..IdentConfig::default()
        }
    }

    fn static_bundle(m: &ArmModel, cfg: &IdentConfig, noise: Option<f64>) -> DatasetBundle {
        let spec = DatasetSpec { free_release: vec![], held_out: None, ..DatasetSpec::default() };
        let mut b = DatasetBundle::synthesize(m, &spec, &cfg.sim, noise, 5).unwrap();
        b.actuation.clear();
        b
    }

    fn k0_error(r: &IdentResult) -> f64 {
        (r.stages[0].best[0] - 0.05).abs() / 0.05
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(Stage::parse(s.name()), Some(s));
        }
        assert_eq!(Stage::parse("gains"), None);
    }

    #[test]
    fn perturbation_stays_in_factor_range() {
        let (_, p, _) = desk();
        for seed in 0..20 {
            let q = perturb_parameters(&p, seed, 0.3, 3.0);
            for (a, b) in [
                (q.base_stiffness, p.base_stiffness),
                (q.damping_ratio, p.damping_ratio),
                (q.tendon_friction, p.tendon_friction),
                (q.kp, p.kp),
                (q.kv, p.kv),
                (q.force_range, p.force_range),
                (q.tau_m, p.tau_m),
            ] {
                assert!((0.3..=3.0).contains(&(a / b)));
            }
            assert_eq!(q, perturb_parameters(&p, seed, 0.3, 3.0));
        }
    }

    #[test]
    fn stiffness_recovered_from_clean_data() {
        let (g, p, m) = desk();
        let cfg = stiffness_only(3);
        let data = static_bundle(&m, &cfg, None);
        let init = ArmParameters { base_stiffness: 0.12, ..p };
        let r = run_pipeline(&data, &g, &init, &cfg).unwrap();
        assert!(k0_error(&r) < 0.1, "K0 = {}", r.stages[0].best[0]);
        assert_eq!(r.stages.len(), 2);
        assert!(r.stages[1].best_loss <= r.stages[0].best_loss);
        for s in &r.stages {
            assert!(s.trace.windows(2).all(|w| w[1] <= w[0]));
            assert_eq!(s.failed_evaluations, 0);
        }
        assert!(r.parameters.build::<f64>().is_ok());
    }

    #[test]
    fn stiffness_recovered_from_noisy_data() {
        let (g, p, m) = desk();
        let cfg = stiffness_only(4);
        let data = static_bundle(&m, &cfg, Some(1e-3));
        let init = ArmParameters { base_stiffness: 0.02, ..p };
        let r = run_pipeline(&data, &g, &init, &cfg).unwrap();
        assert!(k0_error(&r) < 0.25, "K0 = {}", r.stages[0].best[0]);
    }

    #[test]
    fn inconsistent_data_leaves_a_loss_floor() {
        let (g, p, m) = desk();
        let cfg = IdentConfig { fine_passes: false, ..stiffness_only(6) };
        let mut data = static_bundle(&m, &cfg, None);
        for r in &mut data.static_tilt {
            for f in &mut r.trajectory.frames {
                for pose in &mut f.poses {
                    pose.position *= 2.0;
                }
            }
        }
        let r = run_pipeline(&data, &g, &p, &cfg).unwrap();
        assert!(r.stages[0].best_loss > 1e-4, "{}", r.stages[0].best_loss);
        assert!(r.report.losses[0].after.unwrap() > 1e-4);
    }

    #[test]
    fn reruns_are_identical() {
        let (g, p, m) = desk();
        let cfg = IdentConfig {
            coarse: DeConfig { max_gens: 3, population: Some(6), ..DeConfig::default() },
            fine: DeConfig { max_gens: 2, population: Some(6), ..DeConfig::default() },
            ..stiffness_only(9)
        };
        let data = static_bundle(&m, &cfg, None);
        let init = ArmParameters { base_stiffness: 0.03, ..p };
        let a = run_pipeline(&data, &g, &init, &cfg).unwrap();
        let b = run_pipeline(&data, &g, &init, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_damping_data_stops_before_running() {
        let (g, p, m) = desk();
        let cfg = IdentConfig::default();
        let data = static_bundle(&m, &cfg, None);
        let err = run_pipeline(&data, &g, &p, &cfg).unwrap_err();
        assert!(matches!(err, IdentError::MissingData { stage: Stage::Damping, .. }), "{err}");
        assert!(err.to_string().contains("damping"));
    }

    #[test]
    fn config_errors() {
        let (g, p, m) = desk();
        let data = static_bundle(&m, &IdentConfig::default(), None);
        let out_of_order = IdentConfig { stages: vec![Stage::Damping, Stage::Stiffness], ..IdentConfig::default() };
        assert!(matches!(run_pipeline(&data, &g, &p, &out_of_order), Err(IdentError::StageOrder(_))));
        let wide = IdentConfig { fine_range: 0.5, ..IdentConfig::default() };
        assert!(matches!(run_pipeline(&data, &g, &p, &wide), Err(IdentError::Config(_))));
        let mut bounds = ParamBounds::default();
        bounds.kp = (10.0, 1.0);
        let bad = IdentConfig { bounds, ..IdentConfig::default() };
        assert!(matches!(run_pipeline(&data, &g, &p, &bad), Err(IdentError::Config(_))));
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = IdentConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: IdentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let partial: IdentConfig = serde_json::from_str(r#"{"seed": 4, "stages": ["stiffness"]}"#).unwrap();
        assert_eq!(partial.seed, 4);
        assert_eq!(partial.stages, vec![Stage::Stiffness]);
        assert!(serde_json::from_str::<IdentConfig>(r#"{"sed": 4}"#).is_err());
    }
}
