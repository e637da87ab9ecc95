use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::IkSample;
use super::soft::soft_fk;
use super::KinematicsError;
use crate::arm::{ArmModel, TENDON_COUNT};
use crate::dynamics::{SimConfig, TendonCommand};
use crate::trajectory::Pose;
use rayon::prelude::*;

pub const INPUT_DIM: usize = 8;
pub const DEFAULT_HIDDEN: usize = 64;

/// Fully connected IK network, ReLU hidden layers and a linear output.
///
/// Inputs are standardized with the stored per-input statistics; the output
/// layer predicts standardized cable lengths, which are then scaled back and
/// clamped to `[output_min, output_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpIkModel {
    pub layer_sizes: Vec<usize>,
    pub activation: String,
    /// Per layer, row-major `[out][in]`.
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub output_mean: Vec<f64>,
    pub output_std: Vec<f64>,
    pub output_min: Vec<f64>,
    pub output_max: Vec<f64>,
    #[serde(default)]
    pub note: String,
}

impl MlpIkModel {
    /// He-initialized network with identity normalization.
    pub fn new(hidden: usize, seed: u64) -> Self {
        let sizes = vec![INPUT_DIM, hidden, hidden, hidden, TENDON_COUNT];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = sizes
            .windows(2)
            .map(|w| {
                let bound = (6.0 / w[0] as f64).sqrt();
                (0..w[1]).map(|_| (0..w[0]).map(|_| rng.gen_range(-bound..bound)).collect()).collect()
            })
            .collect();
        let biases = sizes[1..].iter().map(|&n| vec![0.0; n]).collect();
        Self {
            layer_sizes: sizes,
            activation: "relu".into(),
            weights,
            biases,
            input_mean: vec![0.0; INPUT_DIM],
            input_std: vec![1.0; INPUT_DIM],
            output_mean: vec![0.0; TENDON_COUNT],
            output_std: vec![1.0; TENDON_COUNT],
            output_min: vec![f64::MIN; TENDON_COUNT],
            output_max: vec![f64::MAX; TENDON_COUNT],
            note: format!("three hidden layers of width {hidden}"),
        }
    }

    /// Clamp bounds for cables bent by at most `max_contraction` meters.
    pub fn set_actuation_bounds(&mut self, model: &ArmModel, max_contraction: f64) {
        let straight = model.straight_tendon_lengths();
        self.output_min = straight.iter().map(|l| l - max_contraction).collect();
        self.output_max = straight.iter().map(|l| l + max_contraction).collect();
    }

    pub fn validate(&self) -> Result<(), KinematicsError> {
        let s = &self.layer_sizes;
        let bad = |m: String| Err(KinematicsError::Format(m));
        if s.len() < 2 || s[0] != INPUT_DIM || s[s.len() - 1] != TENDON_COUNT {
            return bad(format!("layer sizes must run from {INPUT_DIM} to {TENDON_COUNT}, got {s:?}"));
        }
        if self.activation != "relu" {
            return bad(format!("unsupported activation `{}`", self.activation));
        }
        if self.weights.len() != s.len() - 1 || self.biases.len() != s.len() - 1 {
            return bad("one weight matrix and bias vector per layer expected".into());
        }
        for (l, w) in s.windows(2).enumerate() {
            if self.weights[l].len() != w[1]
                || self.weights[l].iter().any(|r| r.len() != w[0])
                || self.biases[l].len() != w[1]
            {
                return bad(format!("layer {l} is not {}x{}", w[1], w[0]));
            }
        }
        for (name, v, n) in [
            ("input_mean", &self.input_mean, INPUT_DIM),
            ("input_std", &self.input_std, INPUT_DIM),
            ("output_mean", &self.output_mean, TENDON_COUNT),
            ("output_std", &self.output_std, TENDON_COUNT),
            ("output_min", &self.output_min, TENDON_COUNT),
            ("output_max", &self.output_max, TENDON_COUNT),
        ] {
            if v.len() != n {
                return bad(format!("{name} must have {n} entries"));
            }
        }
        if self.input_std.iter().chain(&self.output_std).any(|s| !(*s > 0.0)) {
            return bad("standard deviations must be positive".into());
        }
        Ok(())
    }

    /// Forward pass on a raw 8-vector, without clamping.
    pub fn forward_raw(&self, input: &[f64; INPUT_DIM]) -> [f64; TENDON_COUNT] {
        let mut a: Vec<f64> =
            input.iter().zip(self.input_mean.iter().zip(&self.input_std)).map(|(x, (m, s))| (x - m) / s).collect();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            a = w
                .iter()
                .zip(b)
                .map(|(row, bias)| {
                    let z = row.iter().zip(&a).fold(*bias, |acc, (wi, ai)| acc + wi * ai);
                    if l < last {
                        z.max(0.0)
                    } else {
                        z
                    }
                })
                .collect();
        }
        let mut out = [0.0; TENDON_COUNT];
        for i in 0..TENDON_COUNT {
            out[i] = a[i] * self.output_std[i] + self.output_mean[i];
        }
        out
    }

    /// Cable lengths for a tip pose at gravity angle `theta_g`, clamped to
    /// the actuation bounds.
    pub fn infer(&self, theta_g: f64, pose: &Pose) -> [f64; TENDON_COUNT] {
        let p = pose.position;
        let [w, x, y, z] = pose.quat_wxyz();
        let mut out = self.forward_raw(&[theta_g, p.x, p.y, p.z, w, x, y, z]);
        for i in 0..TENDON_COUNT {
            out[i] = out[i].max(self.output_min[i]).min(self.output_max[i]);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, KinematicsError> {
        let m: Self = serde_json::from_str(text).map_err(|e| KinematicsError::Format(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, KinematicsError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), KinematicsError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden: usize,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { hidden: DEFAULT_HIDDEN, lr: 1e-3, batch: 64, epochs: 200, seed: 0 }
    }
}

/// Mean squared cable-length errors, m², before training and after each epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_mse: Vec<f64>,
    pub val_mse: Vec<f64>,
}

impl TrainReport {
    pub fn final_train(&self) -> f64 {
        *self.train_mse.last().expect("at least the initial loss")
    }

    pub fn final_val(&self) -> Option<f64> {
        self.val_mse.last().copied()
    }
}

fn mean_std(columns: impl Iterator<Item = Vec<f64>>, n: usize) -> (Vec<f64>, Vec<f64>) {
    columns
        .map(|c| {
            let mean = c.iter().sum::<f64>() / n as f64;
            let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let std = var.sqrt();
            (mean, if std > 1e-12 { std } else { 1.0 })
        })
        .unzip()
}

struct Dense {
    w: Vec<DMatrix<f64>>,
    b: Vec<DVector<f64>>,
}

impl Dense {
    fn from_model(m: &MlpIkModel) -> Self {
        Self {
            w: m.weights.iter().map(|rows| DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])).collect(),
            b: m.biases.iter().map(|b| DVector::from_column_slice(b)).collect(),
        }
    }

    fn write_back(&self, m: &mut MlpIkModel) {
        for (l, w) in self.w.iter().enumerate() {
            m.weights[l] = (0..w.nrows()).map(|i| w.row(i).iter().copied().collect()).collect();
            m.biases[l] = self.b[l].iter().copied().collect();
        }
    }

    /// Activations of every layer for a batch stored column-wise.
    fn forward(&self, x: DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let mut acts = vec![x];
        let last = self.w.len() - 1;
        for (l, (w, b)) in self.w.iter().zip(&self.b).enumerate() {
            let mut z = w * acts.last().expect("input");
            for mut col in z.column_iter_mut() {
                col += b;
            }
            if l < last {
                z.apply(|v| *v = v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }

    /// Mean squared error and its gradients for one batch.
    fn gradients(&self, x: DMatrix<f64>, y: &DMatrix<f64>) -> (f64, Vec<DMatrix<f64>>, Vec<DVector<f64>>) {
        let acts = self.forward(x);
        let n = y.ncols() as f64;
        let k = y.nrows() as f64;
        let diff = acts.last().expect("output") - y;
        let loss = diff.norm_squared() / (n * k);
        let mut delta = diff * (2.0 / (n * k));
        let mut gw = vec![DMatrix::zeros(0, 0); self.w.len()];
        let mut gb = vec![DVector::zeros(0); self.w.len()];
        for l in (0..self.w.len()).rev() {
            gw[l] = &delta * acts[l].transpose();
            gb[l] = delta.column_sum();
            if l > 0 {
                let mut back = self.w[l].transpose() * &delta;
                back.zip_apply(&acts[l], |g, a| {
                    if a <= 0.0 {
                        *g = 0.0
                    }
                });
                delta = back;
            }
        }
        (loss, gw, gb)
    }
}

struct Adam {
    mw: Vec<DMatrix<f64>>,
    vw: Vec<DMatrix<f64>>,
    mb: Vec<DVector<f64>>,
    vb: Vec<DVector<f64>>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(net: &Dense) -> Self {
        let zw = || net.w.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect::<Vec<_>>();
        let zb = || net.b.iter().map(|b| DVector::zeros(b.len())).collect::<Vec<_>>();
        Self { mw: zw(), vw: zw(), mb: zb(), vb: zb(), t: 0 }
    }

    fn step(&mut self, net: &mut Dense, gw: &[DMatrix<f64>], gb: &[DVector<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        };
        for l in 0..net.w.len() {
            for (((p, m), v), g) in
                net.w[l].iter_mut().zip(self.mw[l].iter_mut()).zip(self.vw[l].iter_mut()).zip(gw[l].iter())
            {
                update(p, m, v, *g);
            }
            for (((p, m), v), g) in
                net.b[l].iter_mut().zip(self.mb[l].iter_mut()).zip(self.vb[l].iter_mut()).zip(gb[l].iter())
            {
                update(p, m, v, *g);
            }
        }
    }
}

fn batch_matrices(model: &MlpIkModel, rows: &[&IkSample]) -> (DMatrix<f64>, DMatrix<f64>) {
    let x =
        DMatrix::from_fn(INPUT_DIM, rows.len(), |i, j| (rows[j].input()[i] - model.input_mean[i]) / model.input_std[i]);
    let y = DMatrix::from_fn(TENDON_COUNT, rows.len(), |i, j| {
        (rows[j].lengths[i] - model.output_mean[i]) / model.output_std[i]
    });
    (x, y)
}

/// Mean squared cable-length error over `rows`, m², before clamping.
pub fn length_mse(model: &MlpIkModel, rows: &[IkSample]) -> f64 {
    if rows.is_empty() {
        return f64::NAN;
    }
    let sum: f64 = rows
        .iter()
        .map(|r| {
            let p = model.forward_raw(&r.input());
            p.iter().zip(&r.lengths).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        })
        .sum();
    sum / (rows.len() * TENDON_COUNT) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IkEvaluation {
    pub samples: usize,
    /// Tip error bound, meters.
    pub tolerance_m: f64,
    pub within_tolerance: usize,
    pub fraction_within: f64,
    pub median_error_m: f64,
    pub max_error_m: f64,
    /// Forward settles that timed out; their last state is still scored.
    pub unconverged: usize,
}

/// Settles `arm` under the predicted lengths for every sample and compares
/// the tip with the sample position. The tolerance is `tolerance_frac` of
/// the arm length.
pub fn evaluate_ik(
    ik: &MlpIkModel,
    arm: &ArmModel,
    rows: &[IkSample],
    tolerance_frac: f64,
    sim: &SimConfig,
) -> Result<IkEvaluation, KinematicsError> {
    if rows.is_empty() {
        return Err(KinematicsError::Empty);
    }
    let results = rows
        .par_iter()
        .map(|r| {
            let cmd = TendonCommand::new(ik.infer(r.theta_g, &r.pose));
            soft_fk(arm, &cmd, r.theta_g, sim).map(|fk| ((fk.tip.position - r.pose.position).norm(), fk.converged))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut errors: Vec<f64> = results.iter().map(|r| r.0).collect();
    errors.sort_by(f64::total_cmp);
    let tolerance_m = tolerance_frac * arm.total_length();
    let within_tolerance = errors.iter().filter(|e| **e <= tolerance_m).count();
    Ok(IkEvaluation {
        samples: rows.len(),
        tolerance_m,
        within_tolerance,
        fraction_within: within_tolerance as f64 / rows.len() as f64,
        median_error_m: errors[errors.len() / 2],
        max_error_m: errors[errors.len() - 1],
        unconverged: results.iter().filter(|r| !r.1).count(),
    })
}

/// Trains a fresh network on `train` with Adam and mini-batch MSE. The
/// returned model still carries unbounded clamps; set them with
/// [`MlpIkModel::set_actuation_bounds`].
pub fn train_ik(
    train: &[IkSample],
    val: &[IkSample],
    cfg: &TrainConfig,
) -> Result<(MlpIkModel, TrainReport), KinematicsError> {
    if train.is_empty() {
        return Err(KinematicsError::Empty);
    }
    if cfg.hidden == 0 || cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(KinematicsError::Config("hidden, batch and lr must be positive".into()));
    }
    let mut model = MlpIkModel::new(cfg.hidden, cfg.seed);
    let n = train.len();
    (model.input_mean, model.input_std) =
        mean_std((0..INPUT_DIM).map(|i| train.iter().map(|r| r.input()[i]).collect()), n);
    (model.output_mean, model.output_std) =
        mean_std((0..TENDON_COUNT).map(|i| train.iter().map(|r| r.lengths[i]).collect()), n);

    let mut net = Dense::from_model(&model);
    let mut adam = Adam::new(&net);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..n).collect();
    let mut report = TrainReport { train_mse: vec![length_mse(&model, train)], val_mse: Vec::new() };
    if !val.is_empty() {
        report.val_mse.push(length_mse(&model, val));
    }
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let rows: Vec<&IkSample> = chunk.iter().map(|&i| &train[i]).collect();
            let (x, y) = batch_matrices(&model, &rows);
            let (_, gw, gb) = net.gradients(x, &y);
            adam.step(&mut net, &gw, &gb, cfg.lr);
        }
        net.write_back(&mut model);
        let tl = length_mse(&model, train);
        report.train_mse.push(tl);
        if !val.is_empty() {
            let vl = length_mse(&model, val);
            report.val_mse.push(vl);
            if !vl.is_finite() {
                return Err(KinematicsError::Diverged { epoch, train_mse: tl, val_mse: vl });
            }
        }
        if !tl.is_finite() {
            return Err(KinematicsError::Diverged { epoch, train_mse: tl, val_mse: f64::NAN });
        }
        log::debug!("epoch {epoch}: train {tl:.3e}");
    }
    Ok((model, report))
}
