//! Command implementations behind the `spiraltwin` binary.
//!
//! Structured settings come from a JSON config file; flags only carry paths,
//! seeds, ports and the identification stage. Every command that writes to
//! an output directory also writes `manifest.json` listing its files.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use spiraltwin::dynamics::{run_protocol, ExperimentProtocol};
use spiraltwin::ident::{
    perturb_parameters, run_pipeline, DatasetBundle, DatasetSpec, FilterSpec, IdentConfig, IdentError, Recording, Stage,
};
use spiraltwin::kinematics::{
    build_reach_map, evaluate_ik, fk_sim_config, gen_ik_dataset, rigid_reach_map, train_ik, DatasetConfig, JointVector,
    MlpIkModel, ReachMap, ReachSampling, RigidArm, RigidReachConfig, TrainConfig,
};
use spiraltwin::metrics::{dynamic_loss, internal_error, LossConfig};
use spiraltwin::teleop::{default_ready_joints, AssetBuildConfig, TeleopAssets, TeleopConfig, TeleopSession};
use spiraltwin::trajectory::{align, butterworth_lowpass};
use spiraltwin::{build_arm, ArmGeometry, ArmModel, ArmParameters, ParamFile, SimConfig, Trajectory};
use thiserror::Error;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, bad or missing config, missing input files.
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn runtime(msg: impl Into<String>) -> CliError {
    CliError::Runtime(msg.into())
}

/// JSON pointer of a deserialization error path.
fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    out
}

/// Parses JSON, reporting failures with the JSON pointer of the offending value.
pub fn parse_config<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let pointer = json_pointer(e.path());
        let at = if pointer.is_empty() { "/".to_string() } else { pointer };
        usage(format!("{origin}: at {at}: {}", e.inner()))
    })
}

fn read_input(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// Loads a config file, or the defaults when no path is given.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    match path {
        Some(p) => parse_config(&read_input(p)?, &p.display().to_string()),
        None => Ok(T::default()),
    }
}

fn require_config<T: DeserializeOwned>(path: Option<&Path>, command: &str) -> Result<T, CliError> {
    let p = path.ok_or_else(|| usage(format!("{command} needs --config")))?;
    parse_config(&read_input(p)?, &p.display().to_string())
}

/// Relative paths in a config are taken from the config file's directory.
fn resolve(config: Option<&Path>, p: &Path) -> PathBuf {
    match config.and_then(Path::parent) {
        Some(dir) if p.is_relative() => dir.join(p),
        _ => p.to_path_buf(),
    }
}

/// Writes through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).and_then(|_| fs::rename(&tmp, path)).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub output_dir: String,
    pub seed: Option<u64>,
    pub started_unix_s: f64,
    pub finished_unix_s: f64,
    pub version: String,
    /// Files written, relative to the output directory.
    pub outputs: Vec<String>,
}

/// Output directory that records every file written to it.
pub struct OutDir {
    dir: PathBuf,
    files: Vec<String>,
    started: f64,
}

impl OutDir {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new(), started: unix_now() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| runtime(format!("{}: {e}", parent.display())))?;
        }
        write_atomic(&path, bytes)?;
        self.files.push(name.to_string());
        Ok(path)
    }

    pub fn finish(self, command: &str, config: Option<&Path>, seed: Option<u64>) -> Result<RunManifest, CliError> {
        let manifest = RunManifest {
            command: command.into(),
            config_path: config.map(|p| p.display().to_string()),
            output_dir: self.dir.display().to_string(),
            seed,
            started_unix_s: self.started,
            finished_unix_s: unix_now(),
            version: env!("CARGO_PKG_VERSION").into(),
            outputs: self.files,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_atomic(&self.dir.join("manifest.json"), text.as_bytes())?;
        Ok(manifest)
    }
}

/// Flags shared by the batch commands.
#[derive(Debug, Clone, Default)]
pub struct RunArgs {
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl RunArgs {
    fn out_dir(&self, command: &str) -> Result<OutDir, CliError> {
        let dir = self.out.as_deref().ok_or_else(|| usage(format!("{command} needs --out")))?;
        OutDir::create(dir)
    }
}

/// Arm model from a parameter file, or the desk arm with reference parameters.
fn load_model(config: Option<&Path>, file: Option<&Path>) -> Result<ArmModel, CliError> {
    match file {
        Some(f) => {
            let path = resolve(config, f);
            let pf = ParamFile::load(&path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            pf.build().map_err(|e| usage(format!("{}: {e}", path.display())))
        }
        None => {
            let g = ArmGeometry::desk();
            let p = ArmParameters::reference(&g);
            build_arm(g, p).map_err(|e| runtime(e.to_string()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub protocol: ExperimentProtocol,
    #[serde(default)]
    pub param_file: Option<PathBuf>,
    #[serde(default)]
    pub sim: SimConfig,
    /// Standard deviation of Gaussian marker noise, meters.
    #[serde(default)]
    pub noise_std_m: Option<f64>,
}

/// Runs the configured protocol and writes one CSV per condition.
pub fn cmd_simulate(args: &RunArgs) -> Result<RunManifest, CliError> {
    let cfg: SimulateConfig = require_config(args.config.as_deref(), "simulate")?;
    let model = load_model(args.config.as_deref(), cfg.param_file.as_deref())?;
    cfg.sim.validate().map_err(|e| usage(format!("sim: {e}")))?;
    let seed = args.seed.unwrap_or(0);
    let mut out = args.out_dir("simulate")?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let name = cfg.protocol.name();
    let trajectories = run_protocol(&model, &cfg.protocol, &cfg.sim).map_err(|e| runtime(format!("{name}: {e}")))?;
    for (k, traj) in trajectories.iter().enumerate() {
        let traj = match cfg.noise_std_m {
            Some(std) => traj.with_position_noise(std, &mut rng),
            None => traj.clone(),
        };
        out.write(&format!("{name}_{k:02}.csv"), traj.to_csv().as_bytes())?;
    }
    out.finish("simulate", args.config.as_deref(), Some(seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleEntry {
    pub protocol: ExperimentProtocol,
    pub csv: PathBuf,
}

/// On-disk dataset: single-condition protocols with their CSV recordings.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BundleFile {
    pub static_tilt: Vec<BundleEntry>,
    pub free_release: Vec<BundleEntry>,
    pub actuation: Vec<BundleEntry>,
    pub held_out: Option<BundleEntry>,
}

/// Reads a bundle file and the CSVs it lists, relative to its directory.
pub fn load_bundle(path: &Path) -> Result<DatasetBundle, CliError> {
    let file: BundleFile = parse_config(&read_input(path)?, &path.display().to_string())?;
    let load = |e: &BundleEntry| -> Result<Recording, CliError> {
        let csv = resolve(Some(path), &e.csv);
        let trajectory = Trajectory::load_csv(&csv).map_err(|err| usage(format!("{}: {err}", csv.display())))?;
        Ok(Recording { protocol: e.protocol.clone(), trajectory })
    };
    let all = |v: &[BundleEntry]| v.iter().map(load).collect::<Result<Vec<_>, _>>();
    Ok(DatasetBundle {
        static_tilt: all(&file.static_tilt)?,
        free_release: all(&file.free_release)?,
        actuation: all(&file.actuation)?,
        held_out: file.held_out.as_ref().map(load).transpose()?,
    })
}

/// Writes `bundle.json` and one CSV per recording under `prefix`.
pub fn save_bundle(out: &mut OutDir, prefix: &str, bundle: &DatasetBundle) -> Result<(), CliError> {
    let mut file = BundleFile::default();
    let save = |out: &mut OutDir, what: &str, k: usize, r: &Recording| -> Result<BundleEntry, CliError> {
        let name = format!("{what}_{k:02}.csv");
        out.write(&format!("{prefix}/{name}"), r.trajectory.to_csv().as_bytes())?;
        Ok(BundleEntry { protocol: r.protocol.clone(), csv: name.into() })
    };
    for (k, r) in bundle.static_tilt.iter().enumerate() {
        file.static_tilt.push(save(out, "static_tilt", k, r)?);
    }
    for (k, r) in bundle.free_release.iter().enumerate() {
        file.free_release.push(save(out, "free_release", k, r)?);
    }
    for (k, r) in bundle.actuation.iter().enumerate() {
        file.actuation.push(save(out, "actuation", k, r)?);
    }
    if let Some(r) = &bundle.held_out {
        file.held_out = Some(save(out, "held_out", 0, r)?);
    }
    let text = serde_json::to_string_pretty(&file).expect("bundle serializes");
    out.write(&format!("{prefix}/bundle.json"), text.as_bytes())?;
    Ok(())
}

fn default_perturb() -> [f64; 2] {
    [0.3, 3.0]
}

/// Synthetic dataset recorded from known parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwinSpec {
    /// Ground-truth parameters; the desk arm with reference parameters when absent.
    #[serde(default)]
    pub truth_param_file: Option<PathBuf>,
    #[serde(default)]
    pub spec: DatasetSpec,
    #[serde(default)]
    pub noise_std_m: Option<f64>,
    /// Range of the log-uniform factors applied to the truth for the initial guess.
    #[serde(default = "default_perturb")]
    pub perturb: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Path to a bundle file.
    Bundle(PathBuf),
    Twin(TwinSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentifyConfig {
    pub dataset: DatasetSource,
    /// Starting parameters. Required for bundles; overrides the perturbed truth for twins.
    #[serde(default)]
    pub initial_param_file: Option<PathBuf>,
    #[serde(default)]
    pub ident: IdentConfig,
}

fn stage_flag(name: &str) -> Result<Stage, CliError> {
    Stage::parse(name).ok_or_else(|| {
        let valid: Vec<&str> = Stage::ALL.iter().map(|s| s.name()).collect();
        usage(format!("unknown stage `{name}`; valid stages: {}", valid.join(", ")))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifySummary {
    pub e_internal_before_m: Option<f64>,
    pub e_internal_after_m: Option<f64>,
    pub e_internal_ratio: Option<f64>,
    pub runtime_s: f64,
    pub stages: Vec<String>,
}

/// Runs identification and writes the parameter file, report and loss traces.
pub fn cmd_identify(args: &RunArgs, stage: Option<&str>) -> Result<(RunManifest, IdentifySummary), CliError> {
    let config = args.config.as_deref();
    let mut cfg: IdentifyConfig = require_config(config, "identify")?;
    if let Some(name) = stage {
        cfg.ident.stages = vec![stage_flag(name)?];
    }
    if let Some(seed) = args.seed {
        cfg.ident.seed = seed;
    }
    let seed = cfg.ident.seed;
    cfg.ident.validate().map_err(|e| usage(e.to_string()))?;
    let mut out = args.out_dir("identify")?;

    let (data, geometry, initial) = match &cfg.dataset {
        DatasetSource::Bundle(path) => {
            let data = load_bundle(&resolve(config, path))?;
            let file = cfg
                .initial_param_file
                .as_deref()
                .ok_or_else(|| usage("at /initial_param_file: required when the dataset is a bundle"))?;
            let model = load_model(config, Some(file))?;
            (data, model.geometry().clone(), model.params().clone())
        }
        DatasetSource::Twin(twin) => {
            let truth = load_model(config, twin.truth_param_file.as_deref())?;
            let [lo, hi] = twin.perturb;
            if !(lo > 0.0 && hi >= lo) {
                return Err(usage("at /dataset/twin/perturb: need 0 < lo <= hi"));
            }
            let data = DatasetBundle::synthesize(&truth, &twin.spec, &cfg.ident.sim, twin.noise_std_m, seed)
                .map_err(|e| runtime(format!("dataset synthesis: {e}")))?;
            save_bundle(&mut out, "dataset", &data)?;
            let initial = match cfg.initial_param_file.as_deref() {
                Some(f) => load_model(config, Some(f))?.params().clone(),
                None => perturb_parameters(truth.params(), seed, lo, hi),
            };
            (data, truth.geometry().clone(), initial)
        }
    };

    let started = std::time::Instant::now();
    let result = run_pipeline(&data, &geometry, &initial, &cfg.ident).map_err(|e| match e {
        IdentError::Config(_) | IdentError::StageOrder(_) => usage(e.to_string()),
        other => runtime(format!("identification failed: {other}")),
    })?;
    let runtime_s = started.elapsed().as_secs_f64();

    out.write("params.json", result.parameters.to_json().as_bytes())?;
    out.write("initial_params.json", result.initial.to_json().as_bytes())?;
    let report = serde_json::to_string_pretty(&result).expect("result serializes");
    out.write("report.json", report.as_bytes())?;
    for s in &result.stages {
        let mut csv = String::from("generation,best_loss\n");
        for (g, l) in s.trace.iter().enumerate() {
            csv.push_str(&format!("{g},{l:e}\n"));
        }
        out.write(&format!("trace_{}_{}.csv", s.stage.name(), s.pass), csv.as_bytes())?;
    }
    let summary = IdentifySummary {
        e_internal_before_m: result.report.e_internal_before_m,
        e_internal_after_m: result.report.e_internal_after_m,
        e_internal_ratio: result.report.e_internal_ratio,
        runtime_s,
        stages: result.stages.iter().map(|s| format!("{}:{}", s.stage.name(), s.pass)).collect(),
    };
    let manifest = out.finish("identify", config, Some(seed))?;
    Ok((manifest, summary))
}

fn default_tolerance() -> f64 {
    0.05
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IkConfig {
    #[serde(default)]
    pub param_file: Option<PathBuf>,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Score validation poses by forward settling the predicted lengths.
    #[serde(default = "default_true")]
    pub fk_check: bool,
    /// Tip error bound as a fraction of the arm length.
    #[serde(default = "default_tolerance")]
    pub tolerance_frac: f64,
}

impl Default for IkConfig {
    fn default() -> Self {
        Self {
            param_file: None,
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            fk_check: true,
            tolerance_frac: default_tolerance(),
        }
    }
}

/// Generates the IK dataset, trains the network and scores it.
pub fn cmd_ik(args: &RunArgs) -> Result<(RunManifest, serde_json::Value), CliError> {
    let config = args.config.as_deref();
    let mut cfg: IkConfig = load_config(config)?;
    if let Some(seed) = args.seed {
        cfg.dataset.seed = seed;
        cfg.train.seed = seed;
    }
    let model = load_model(config, cfg.param_file.as_deref())?;
    let mut out = args.out_dir("ik")?;
    let data = gen_ik_dataset(&model, &cfg.dataset).map_err(|e| usage_or_runtime(e.to_string(), &e))?;
    data.save(&out.path("dataset")).map_err(|e| runtime(e.to_string()))?;
    out.files.extend(["dataset/train.csv".to_string(), "dataset/val.csv".to_string()]);
    let (mut ik, report) =
        train_ik(&data.train, &data.val, &cfg.train).map_err(|e| usage_or_runtime(e.to_string(), &e))?;
    ik.set_actuation_bounds(&model, cfg.dataset.max_contraction_m);
    out.write("ik_model.json", ik.to_json().as_bytes())?;
    let evaluation = if cfg.fk_check && !data.val.is_empty() {
        Some(
            evaluate_ik(&ik, &model, &data.val, cfg.tolerance_frac, &fk_sim_config())
                .map_err(|e| runtime(e.to_string()))?,
        )
    } else {
        None
    };
    let metrics = serde_json::json!({
        "train_samples": data.train.len(),
        "val_samples": data.val.len(),
        "skipped": data.skipped,
        "final_train_mse": report.final_train(),
        "final_val_mse": report.final_val(),
        "fk": evaluation,
    });
    out.write("ik_metrics.json", serde_json::to_string_pretty(&metrics).unwrap().as_bytes())?;
    let manifest = out.finish("ik", config, Some(cfg.dataset.seed))?;
    Ok((manifest, metrics))
}

fn usage_or_runtime(msg: String, e: &spiraltwin::kinematics::KinematicsError) -> CliError {
    use spiraltwin::kinematics::KinematicsError as K;
    match e {
        K::Config(_) | K::Command(_) | K::Empty => usage(msg),
        _ => runtime(msg),
    }
}

fn default_angles() -> Vec<f64> {
    vec![0.0, 60.0, 120.0]
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigidMapSection {
    pub arm: RigidArm,
    pub reach: RigidReachConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReachmapConfig {
    #[serde(default)]
    pub param_file: Option<PathBuf>,
    #[serde(default)]
    pub sampling: ReachSampling,
    #[serde(default = "default_angles")]
    pub angles_deg: Vec<f64>,
    #[serde(default = "default_rigid")]
    pub rigid: Option<RigidMapSection>,
}

fn default_rigid() -> Option<RigidMapSection> {
    Some(RigidMapSection::default())
}

impl Default for ReachmapConfig {
    fn default() -> Self {
        Self {
            param_file: None,
            sampling: ReachSampling::default(),
            angles_deg: default_angles(),
            rigid: default_rigid(),
        }
    }
}

pub fn soft_map_name(angle_deg: f64) -> String {
    format!("soft_map_{angle_deg:03.0}.json")
}

/// Builds soft-arm maps at the configured gravity angles and the rigid map.
pub fn cmd_reachmap(args: &RunArgs) -> Result<(RunManifest, serde_json::Value), CliError> {
    let config = args.config.as_deref();
    let mut cfg: ReachmapConfig = load_config(config)?;
    if let Some(seed) = args.seed {
        if let Some(r) = cfg.rigid.as_mut() {
            r.reach.seed = seed;
        }
    }
    if cfg.angles_deg.is_empty() {
        return Err(usage("at /angles_deg: at least one angle is required"));
    }
    let model = load_model(config, cfg.param_file.as_deref())?;
    let mut out = args.out_dir("reachmap")?;
    let mut summary = serde_json::Map::new();
    for &deg in &cfg.angles_deg {
        let map = build_reach_map(&model, deg.to_radians(), &cfg.sampling, &fk_sim_config())
            .map_err(|e| usage_or_runtime(e.to_string(), &e))?;
        let name = soft_map_name(deg);
        summary.insert(
            name.clone(),
            serde_json::json!({"occupied": map.occupied_count(), "unconverged": map.unconverged}),
        );
        out.write(&name, map.to_json().as_bytes())?;
    }
    if let Some(r) = &cfg.rigid {
        let map = rigid_reach_map(&r.arm, &r.reach).map_err(|e| usage_or_runtime(e.to_string(), &e))?;
        summary.insert("rigid_map.json".into(), serde_json::json!({"occupied": map.occupied_count()}));
        out.write("rigid_map.json", map.to_json().as_bytes())?;
    }
    let seed = cfg.rigid.as_ref().map(|r| r.reach.seed);
    let manifest = out.finish("reachmap", config, seed)?;
    Ok((manifest, serde_json::Value::Object(summary)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub e_internal_m: f64,
    pub dynamic_loss: f64,
    pub frames: usize,
}

/// Internal error and dynamic loss of `simulated` against `reference`.
pub fn cmd_eval(simulated: &Path, reference: &Path, config: Option<&Path>) -> Result<EvalReport, CliError> {
    let loss: LossConfig = load_config(config)?;
    loss.validate().map_err(|e| usage(e.to_string()))?;
    let load = |p: &Path| Trajectory::load_csv(p).map_err(|e| usage(format!("{}: {e}", p.display())));
    let (s, r) = (load(simulated)?, load(reference)?);
    let (s, r) = align(&s, &r).map_err(|e| runtime(e.to_string()))?;
    Ok(EvalReport {
        e_internal_m: internal_error(&s, &r).map_err(|e| runtime(e.to_string()))?,
        dynamic_loss: dynamic_loss(&s, &r, &loss).map_err(|e| runtime(e.to_string()))?,
        frames: s.len(),
    })
}

/// Zero-phase Butterworth low-pass of every position channel.
pub fn cmd_filter(input: &Path, output: &Path, config: Option<&Path>) -> Result<(), CliError> {
    let spec: FilterSpec = load_config(config)?;
    let traj = Trajectory::load_csv(input).map_err(|e| usage(format!("{}: {e}", input.display())))?;
    let filtered = butterworth_lowpass(&traj, spec.cutoff_hz, spec.order).map_err(|e| usage(e.to_string()))?;
    write_atomic(output, filtered.to_csv().as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub port: u16,
    /// Execution playback speed relative to real time.
    pub playback_rate: f64,
    /// Identified parameters used for planning and preview.
    pub param_file: Option<PathBuf>,
    /// Parameters of the stand-in physical arm; the preview parameters when absent.
    pub physical_param_file: Option<PathBuf>,
    pub ik_model: Option<PathBuf>,
    pub soft_maps: Vec<PathBuf>,
    pub rigid_map: Option<PathBuf>,
    pub rigid_arm: RigidArm,
    pub initial_joints: Option<[f64; 7]>,
    pub teleop: TeleopConfig,
    /// Used for whichever of the IK model and maps are not given as files.
    pub build: AssetBuildConfig,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            port: 8765,
            playback_rate: 1.0,
            param_file: None,
            physical_param_file: None,
            ik_model: None,
            soft_maps: Vec::new(),
            rigid_map: None,
            rigid_arm: RigidArm::default(),
            initial_joints: None,
            teleop: TeleopConfig::default(),
            build: AssetBuildConfig::default(),
        }
    }
}

/// Loads or builds everything the teleoperation session needs.
pub fn serve_session(config: Option<&Path>, cfg: &ServeConfig, seed: Option<u64>) -> Result<TeleopSession, CliError> {
    let mut build = cfg.build.clone();
    if let Some(s) = seed {
        build.dataset.seed = s;
        build.train.seed = s;
        build.rigid_reach.seed = s;
    }
    let preview_model = load_model(config, cfg.param_file.as_deref())?;
    let physical_model = match &cfg.physical_param_file {
        Some(f) => load_model(config, Some(f))?,
        None => preview_model.clone(),
    };
    let load_map = |p: &Path| {
        let path = resolve(config, p);
        ReachMap::load(&path).map_err(|e| usage(format!("{}: {e}", path.display())))
    };
    let rigid_map = match &cfg.rigid_map {
        Some(p) => load_map(p)?,
        None => {
            log::info!("building the rigid reachability map");
            rigid_reach_map(&cfg.rigid_arm, &build.rigid_reach).map_err(|e| usage_or_runtime(e.to_string(), &e))?
        }
    };
    let soft_maps = if cfg.soft_maps.is_empty() {
        log::info!("building soft reachability maps");
        spiraltwin::kinematics::default_map_angles()
            .into_iter()
            .map(|a| build_reach_map(&preview_model, a, &build.soft_sampling, &fk_sim_config()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| runtime(e.to_string()))?
    } else {
        cfg.soft_maps.iter().map(|p| load_map(p)).collect::<Result<Vec<_>, _>>()?
    };
    let ik = match &cfg.ik_model {
        Some(p) => {
            let path = resolve(config, p);
            MlpIkModel::load(&path).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => {
            log::info!("training the inverse kinematics network");
            let data =
                gen_ik_dataset(&preview_model, &build.dataset).map_err(|e| usage_or_runtime(e.to_string(), &e))?;
            let (mut ik, _) =
                train_ik(&data.train, &data.val, &build.train).map_err(|e| usage_or_runtime(e.to_string(), &e))?;
            ik.set_actuation_bounds(&preview_model, build.dataset.max_contraction_m);
            ik
        }
    };
    let assets = TeleopAssets {
        rigid_arm: cfg.rigid_arm.clone(),
        rigid_map,
        soft_maps,
        ik,
        preview_model,
        physical_model,
        initial_joints: cfg
            .initial_joints
            .map(|q| JointVector::from_column_slice(&q))
            .unwrap_or_else(default_ready_joints),
    };
    TeleopSession::new(assets, cfg.teleop).map_err(usage)
}

/// Prepares the session and serves it until the process ends. Prints the
/// bound address on stdout once listening.
pub fn cmd_serve(args: &RunArgs, port: Option<u16>) -> Result<(), CliError> {
    let config = args.config.as_deref();
    let mut cfg: ServeConfig = load_config(config)?;
    if let Some(p) = port {
        cfg.port = p;
    }
    let session = serve_session(config, &cfg, args.seed)?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| runtime(e.to_string()))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(("0.0.0.0", cfg.port))
            .await
            .map_err(|e| runtime(format!("port {}: {e}", cfg.port)))?;
        let server_cfg = spiraltwin_server::ServerConfig { port: cfg.port, playback_rate: cfg.playback_rate };
        let handle = spiraltwin_server::spawn(listener, session, &server_cfg).map_err(|e| usage(e.to_string()))?;
        println!("listening on {}", handle.local_addr);
        use std::io::Write as _;
        let _ = std::io::stdout().flush();
        handle.wait().await;
        Ok(())
    })
}
