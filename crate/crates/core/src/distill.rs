//! Knowledge-distillation loss, lambda scheduling, and soft-label analytics.
//!
//! The training loss mixes a hard term (cross-entropy against the ground
//! truth at temperature 1) with a soft term (cross-entropy of the student's
//! tempered softmax against the teacher's tempered softmax):
//!
//! ```text
//! loss = (1 - lambda) * H(y, softmax(z_S, 1))
//!      + lambda       * H(softmax(z_T, tau), softmax(z_S, tau))
//! ```
//!
//! Teacher logits are gradient-blocked. The temperature applies only inside
//! the soft term, so `lambda = 0` reproduces conventional hard-label
//! training exactly. An optional `tau^2` factor on the soft term is off by
//! default.
//!
//! The gradual-soft-loss-reducing schedule starts at equal mixing and decays
//! the soft share linearly to zero over the training horizon.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::Float;
use crate::models::{Checkpoint, Model};
use crate::quantizer::{compute_delta_stddev, quantize_b};
use crate::tensor::{Tape, Tensor, Var};

/// Loss-weighting policy for the soft term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "lowercase", deny_unknown_fields)]
pub enum LambdaSpec {
    /// Fixed mixing weight at every step.
    Constant { value: f64 },
    /// Gradual soft-loss reducing: start at `lambda0` and decay linearly to
    /// zero over the training horizon.
    Gslr { lambda0: f64 },
}

impl LambdaSpec {
    pub fn validate(&self) -> Result<()> {
        let v = match self {
            LambdaSpec::Constant { value } => *value,
            LambdaSpec::Gslr { lambda0 } => *lambda0,
        };
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::domain(format!("lambda must lie in [0, 1], got {v}")));
        }
        Ok(())
    }
}

/// Distillation hyperparameters. The hard term always runs at temperature 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub tau: f64,
    pub lambda: LambdaSpec,
    #[serde(default)]
    pub tau_squared_scaling: bool,
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::domain(format!("tau must be > 0, got {}", self.tau)));
        }
        self.lambda.validate()
    }
}

/// Linear GSLR decay: `lambda0 * max(0, 1 - step / horizon)`.
pub fn gslr_lambda(step: u64, lambda0: f64, horizon: u64) -> Result<f64> {
    if horizon == 0 {
        return Err(Error::domain("gslr horizon must be > 0".to_string()));
    }
    if !(0.0..=1.0).contains(&lambda0) {
        return Err(Error::domain(format!("lambda0 must lie in [0, 1], got {lambda0}")));
    }
    let frac = 1.0 - step as f64 / horizon as f64;
    Ok(lambda0 * frac.max(0.0))
}

/// Per-step lambda evaluation for a whole run.
#[derive(Clone, Debug)]
pub struct LambdaSchedule {
    spec: LambdaSpec,
    horizon: u64,
}

impl LambdaSchedule {
    /// `horizon` is the total number of optimizer steps in the run; only the
    /// GSLR policy consumes it.
    pub fn new(spec: LambdaSpec, horizon: u64) -> Result<Self> {
        spec.validate()?;
        if matches!(spec, LambdaSpec::Gslr { .. }) && horizon == 0 {
            return Err(Error::domain("gslr horizon must be > 0".to_string()));
        }
        Ok(LambdaSchedule { spec, horizon })
    }

    pub fn at(&self, step: u64) -> f64 {
        match self.spec {
            LambdaSpec::Constant { value } => value,
            LambdaSpec::Gslr { lambda0 } => {
                gslr_lambda(step, lambda0, self.horizon).expect("validated at construction")
            }
        }
    }
}

/// Build the distillation loss on `tape`. `student_logits` and
/// `teacher_logits` are `[N, C]`; `labels` holds the N ground-truth class
/// ids. Teacher logits are detached before the soft term, so no gradient
/// reaches them even if they require one.
pub fn kd_loss<E: Float>(
    tape: &mut Tape<E>,
    student_logits: Var,
    teacher_logits: Var,
    labels: &[usize],
    tau: E,
    lambda: E,
    tau_squared_scaling: bool,
) -> Result<Var> {
    if !(lambda >= E::ZERO && lambda <= E::ONE) {
        return Err(Error::domain(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    if !(tau > E::ZERO) {
        return Err(Error::domain(format!("tau must be > 0, got {tau}")));
    }
    let s_shape = tape.value(student_logits).shape().to_vec();
    let t_shape = tape.value(teacher_logits).shape().to_vec();
    if s_shape.len() != 2 || t_shape != s_shape {
        return Err(Error::dim(format!(
            "kd_loss: expected matching [N, C] logits, got {s_shape:?} and {t_shape:?}"
        )));
    }
    if labels.len() != s_shape[0] {
        return Err(Error::dim(format!(
            "kd_loss: {} labels for batch of {}",
            labels.len(),
            s_shape[0]
        )));
    }
    let classes = s_shape[1];

    // Hard term at temperature 1.
    let onehot = tape.constant(Tensor::one_hot(labels, classes)?);
    let student_p1 = tape.softmax_t(student_logits, E::ONE)?;
    let hard_rows = tape.cross_entropy(onehot, student_p1)?;
    let hard = tape.mean_all(hard_rows);

    // Soft term at the distillation temperature, teacher gradient-blocked.
    let teacher_detached = tape.detach(teacher_logits);
    let teacher_p = tape.softmax_t(teacher_detached, tau)?;
    let student_p = tape.softmax_t(student_logits, tau)?;
    let soft_rows = tape.cross_entropy(teacher_p, student_p)?;
    let soft = tape.mean_all(soft_rows);

    let soft_coeff = if tau_squared_scaling { lambda * tau * tau } else { lambda };
    let hard_scaled = tape.scale(hard, E::ONE - lambda);
    let soft_scaled = tape.scale(soft, soft_coeff);
    tape.add(hard_scaled, soft_scaled)
}

/// Per-example entropy (nats) and peak probability of tempered soft labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabelStats {
    pub entropy: Vec<f64>,
    pub peak: Vec<f64>,
    pub mean_entropy: f64,
    pub mean_peak: f64,
}

/// Statistics of `softmax(logits / tau)` per example.
pub fn soft_label_stats<E: Float>(logits: &Tensor<E>, tau: f64) -> Result<SoftLabelStats> {
    if tau <= 0.0 {
        return Err(Error::domain(format!("tau must be > 0, got {tau}")));
    }
    if logits.shape().len() != 2 {
        return Err(Error::dim(format!("expected [N, C] logits, got {:?}", logits.shape())));
    }
    let n = logits.shape()[0];
    let mut entropy = Vec::with_capacity(n);
    let mut peak = Vec::with_capacity(n);
    for r in 0..n {
        let p = tempered_row(logits.row(r), tau);
        let mut h = 0.0;
        let mut mx = 0.0f64;
        for &v in &p {
            if v > 0.0 {
                h -= v * v.ln();
            }
            mx = mx.max(v);
        }
        entropy.push(h);
        peak.push(mx);
    }
    let mean_entropy = entropy.iter().sum::<f64>() / n.max(1) as f64;
    let mean_peak = peak.iter().sum::<f64>() / n.max(1) as f64;
    Ok(SoftLabelStats { entropy, peak, mean_entropy, mean_peak })
}

/// Mean tempered distribution over the examples carrying a given label
/// (the histogram shape of that class's soft labels).
pub fn class_mean_distribution<E: Float>(
    logits: &Tensor<E>,
    labels: &[usize],
    class_id: usize,
    tau: f64,
) -> Result<Vec<f64>> {
    if tau <= 0.0 {
        return Err(Error::domain(format!("tau must be > 0, got {tau}")));
    }
    if logits.shape().len() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::dim(format!(
            "expected [N, C] logits with N == len(labels), got {:?} and {}",
            logits.shape(),
            labels.len()
        )));
    }
    let classes = logits.shape()[1];
    let mut acc = vec![0.0f64; classes];
    let mut count = 0usize;
    for (r, &y) in labels.iter().enumerate() {
        if y != class_id {
            continue;
        }
        for (a, v) in acc.iter_mut().zip(tempered_row(logits.row(r), tau)) {
            *a += v;
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::domain(format!("no examples carry label {class_id}")));
    }
    for a in &mut acc {
        *a /= count as f64;
    }
    Ok(acc)
}

fn tempered_row<E: Float>(row: &[E], tau: f64) -> Vec<f64> {
    let mut mx = f64::NEG_INFINITY;
    for &v in row {
        mx = mx.max(v.to_f64());
    }
    let mut p: Vec<f64> = row.iter().map(|&v| ((v.to_f64() - mx) / tau).exp()).collect();
    let sum: f64 = p.iter().sum();
    for v in &mut p {
        *v /= sum;
    }
    p
}

/// Write per-example tempered distributions as
/// `example_id,class_id,probability` rows.
pub fn write_histogram_csv<E: Float>(path: &Path, logits: &Tensor<E>, tau: f64) -> Result<()> {
    if logits.shape().len() != 2 {
        return Err(Error::dim(format!("expected [N, C] logits, got {:?}", logits.shape())));
    }
    let mut out = Vec::new();
    writeln!(out, "example_id,class_id,probability").expect("vec write");
    for r in 0..logits.shape()[0] {
        for (c, p) in tempered_row(logits.row(r), tau).into_iter().enumerate() {
            writeln!(out, "{r},{c},{p}").expect("vec write");
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Write `(tau, mean_entropy, mean_peak)` summary rows.
pub fn write_summary_csv(path: &Path, rows: &[(f64, f64, f64)]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "tau,mean_entropy,mean_peak").expect("vec write");
    for (tau, me, mp) in rows {
        writeln!(out, "{tau},{me},{mp}").expect("vec write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// How a teacher checkpoint is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum TeacherMode {
    Float,
    Quantized { bits: u32 },
}

/// A teacher prepared for evaluation: model instantiated from its
/// checkpoint, weights optionally passed through the b-bit quantizer
/// (std-dev step size, per layer).
pub struct Teacher<E: Float> {
    model: Model<E>,
}

impl<E: Float> Teacher<E> {
    pub fn from_checkpoint(ckpt: &Checkpoint, mode: TeacherMode) -> Result<Self> {
        let mut model: Model<E> = ckpt.instantiate()?;
        if let TeacherMode::Quantized { bits } = mode {
            for i in 0..model.num_params() {
                if !model.param(i).quantizable {
                    continue;
                }
                let delta = compute_delta_stddev(&model.param(i).tensor, bits)?;
                let q = quantize_b(&model.param(i).tensor, bits, delta)?;
                model.param_mut(i).tensor = q;
            }
        }
        Ok(Teacher { model })
    }

    /// Evaluation-mode forward; no gradients are retained.
    pub fn forward(&self, inputs: &Tensor<E>) -> Result<Tensor<E>> {
        self.model.infer(inputs)
    }

    pub fn model(&self) -> &Model<E> {
        &self.model
    }
}

/// One-shot teacher evaluation (see [`Teacher`] for batched reuse).
pub fn teacher_forward<E: Float>(
    ckpt: &Checkpoint,
    inputs: &Tensor<E>,
    mode: TeacherMode,
) -> Result<Tensor<E>> {
    Teacher::from_checkpoint(ckpt, mode)?.forward(inputs)
}
