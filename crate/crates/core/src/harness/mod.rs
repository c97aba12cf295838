//! Training loops, the sweep runner, and experiment bookkeeping.
//!
//! One engine drives every run. Per step it regenerates the quantized image
//! of each shadow weight with the epoch's step sizes, runs the forward and
//! backward passes on the quantized image, and applies the raw gradients to
//! the full-precision masters (straight through). Per epoch it recomputes
//! the step sizes and evaluates test accuracy with quantized weights.
//!
//! Teacher training and student pretraining are the same hard-label loop at
//! different specs. Distillation fine-tuning starts from a pretrained
//! student checkpoint, pulls teacher logits from a per-run cache (or a live
//! teacher when augmentation makes inputs vary), and mixes the soft term
//! per the lambda schedule. A step whose lambda is exactly zero builds the
//! identical tape a hard-label step builds, so the constant-zero policy is
//! bitwise the hard baseline.
//!
//! Sweep cells (`lambda policy x tau x teacher width x seed`) run on a
//! worker pool; only the writer thread touches the results store, and
//! records land in canonical cell order. Completed cells are skipped on
//! resume unless forced. A cell whose loss goes non-finite is recorded as
//! failed and the sweep moves on.

pub mod report;
pub mod store;

pub use store::{CellInfo, EpochStats, ResultsStore, RunRecord, RunStatus, SoftLabelSnapshot};

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::time::Instant;

use crate::config::{LrSchedule, OptimConfig, RunConfig, TeacherConfig};
use crate::data::{augment_flip_crop, epoch_batches, DataPair, Dataset};
use crate::distill::{
    kd_loss, soft_label_stats, DistillConfig, LambdaSchedule, LambdaSpec, Teacher, TeacherMode,
};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::models::{
    build, save_checkpoint, Checkpoint, CheckpointMeta, Model, ModelSpec,
};
use crate::quantizer::{compute_delta, quantize, ste_backward, QuantizerSpec};
use crate::rng::Rng;
use crate::tensor::{SgdMomentum, Tape, Tensor, Var};

const BN_MOMENTUM: f64 = 0.1;
const EVAL_BATCH: usize = 256;

// ---- quantization state ----

/// Per-layer step sizes for one epoch. `None` marks params that stay full
/// precision (biases, norm affines, exempted layers).
pub struct QuantState<E> {
    spec: QuantizerSpec,
    pub deltas: Vec<Option<E>>,
}

impl<E: Float> QuantState<E> {
    /// Recompute per-layer deltas from the current shadow weights.
    pub fn compute(model: &Model<E>, spec: &QuantizerSpec) -> Result<Self> {
        spec.validate()?;
        let mut deltas = vec![None; model.num_params()];
        for i in model.quantizable_indices(spec.exempt_first_last) {
            deltas[i] = Some(compute_delta(&model.param(i).tensor, spec)?);
        }
        Ok(QuantState { spec: spec.clone(), deltas })
    }

    pub fn is_quantized(&self, index: usize) -> bool {
        self.deltas[index].is_some()
    }
}

/// The weights a forward pass actually uses: quantized images where a delta
/// is present, master copies elsewhere.
pub fn effective_params<E: Float>(
    model: &Model<E>,
    quant: Option<&QuantState<E>>,
) -> Result<Vec<Tensor<E>>> {
    let mut out = Vec::with_capacity(model.num_params());
    for i in 0..model.num_params() {
        let master = &model.param(i).tensor;
        let t = match quant.and_then(|q| q.deltas[i].map(|d| (&q.spec, d))) {
            Some((spec, delta)) => quantize(master, spec, delta)?,
            None => master.clone(),
        };
        out.push(t);
    }
    Ok(out)
}

/// Clone of the model carrying quantized weights (the artifact a quantized
/// training run returns).
pub fn quantized_model<E: Float>(model: &Model<E>, spec: &QuantizerSpec) -> Result<Model<E>> {
    let quant = QuantState::compute(model, spec)?;
    let params = effective_params(model, Some(&quant))?;
    let mut out = build::<E>(model.spec(), 0)?;
    for (i, t) in params.into_iter().enumerate() {
        out.param_mut(i).tensor = t;
    }
    for (i, b) in model.buffers().iter().enumerate() {
        out.buffer_mut(i).tensor = b.tensor.clone();
    }
    Ok(out)
}

/// Evaluation-mode accuracy over a dataset. When `quant` is given, every
/// weight the forward pass sees is the quantized image of the shadow copy;
/// `weight_hook` observes exactly those tensors (instrumentation for the
/// eval/train weight contract).
pub fn evaluate<E: Float>(
    model: &Model<E>,
    quant: Option<&QuantState<E>>,
    ds: &Dataset<E>,
    mut weight_hook: Option<&mut dyn FnMut(&str, &Tensor<E>)>,
) -> Result<f64> {
    let params = effective_params(model, quant)?;
    if let Some(hook) = weight_hook.as_deref_mut() {
        for (i, t) in params.iter().enumerate() {
            hook(&model.param(i).name, t);
        }
    }
    let n = ds.len();
    let mut correct = 0usize;
    let mut start = 0usize;
    while start < n {
        let end = (start + EVAL_BATCH).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let (images, labels) = ds.gather(&idx);
        let mut tape = Tape::new();
        let input = tape.constant(images);
        let vars: Vec<Var> = params.iter().map(|t| tape.constant(t.clone())).collect();
        let (logits, _) = model.forward(&mut tape, input, &vars, false)?;
        let preds = tape.value(logits).argmax_rows();
        correct += preds.iter().zip(&labels).filter(|(p, y)| p == y).count();
        start = end;
    }
    Ok(correct as f64 / n.max(1) as f64)
}

/// Evaluation-mode logits over a whole dataset, in index order.
pub fn full_logits<E: Float>(model: &Model<E>, ds: &Dataset<E>) -> Result<Tensor<E>> {
    let n = ds.len();
    let classes = model.spec().num_classes;
    let mut data = Vec::with_capacity(n * classes);
    let mut start = 0usize;
    while start < n {
        let end = (start + EVAL_BATCH).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let (images, _) = ds.gather(&idx);
        let logits = model.infer(&images)?;
        data.extend_from_slice(logits.data());
        start = end;
    }
    Tensor::new(vec![n, classes], data)
}

// ---- training engine ----

/// Everything a finished loop reports.
pub struct LoopOutput {
    pub status: RunStatus,
    pub epochs: Vec<EpochStats>,
    pub final_train_acc: f64,
    pub final_test_acc: f64,
}

fn lr_at(optim: &OptimConfig, step: u64, total_steps: u64) -> f64 {
    match optim.lr_schedule {
        LrSchedule::Constant => optim.lr,
        LrSchedule::Cosine => {
            let t = step as f64 / total_steps.max(1) as f64;
            optim.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

/// Hard-label loss: cross-entropy of the temperature-1 softmax against the
/// one-hot ground truth, averaged over the batch.
pub fn hard_loss<E: Float>(tape: &mut Tape<E>, logits: Var, labels: &[usize]) -> Result<Var> {
    let classes = *tape.value(logits).shape().last().unwrap();
    let onehot = tape.constant(Tensor::one_hot(labels, classes)?);
    let p = tape.softmax_t(logits, E::ONE)?;
    let rows = tape.cross_entropy(onehot, p)?;
    Ok(tape.mean_all(rows))
}

/// Shared step loop. `loss_builder` sees the tape, the logits, the batch
/// labels, the dataset indices of the batch, and the global step.
fn train_loop<E, L>(
    model: &mut Model<E>,
    data: &DataPair<E>,
    optim: &OptimConfig,
    seed: u64,
    quant_spec: Option<&QuantizerSpec>,
    augment: bool,
    mut loss_builder: L,
) -> Result<LoopOutput>
where
    E: Float,
    L: FnMut(&mut Tape<E>, Var, &[usize], &[usize], u64) -> Result<Var>,
{
    optim.validate()?;
    let n = data.train.len();
    if n == 0 {
        return Err(Error::config("empty train split".to_string()));
    }
    let steps_per_epoch = n.div_ceil(optim.batch_size) as u64;
    let total_steps = steps_per_epoch * u64::from(optim.epochs);
    let mut sgd = SgdMomentum::new(
        model.num_params(),
        E::from_f64(optim.momentum),
        E::from_f64(optim.weight_decay),
    );
    let mut aug_rng = Rng::derive(seed, "augment");
    let mut epochs_out: Vec<EpochStats> = Vec::new();
    let mut step: u64 = 0;
    for epoch in 0..optim.epochs {
        let quant = match quant_spec {
            Some(spec) => Some(QuantState::compute(model, spec)?),
            None => None,
        };
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for batch_idx in epoch_batches(n, optim.batch_size, seed, epoch) {
            let (mut images, labels) = data.train.gather(&batch_idx);
            if augment {
                images = augment_flip_crop(&images, &mut aug_rng);
            }
            let mut tape = Tape::new();
            let input = tape.constant(images);
            let step_params = effective_params(model, quant.as_ref())?;
            let vars: Vec<Var> =
                step_params.into_iter().map(|t| tape.leaf(t, true)).collect();
            let (logits, bn_stats) = model.forward(&mut tape, input, &vars, true)?;
            // Guard before the loss: the cross-entropy probability floor
            // can mask non-finite activations behind a finite loss value.
            if tape.value(logits).data().iter().any(|v| !v.is_finite()) {
                return Ok(LoopOutput {
                    status: RunStatus::Failed {
                        reason: format!("non-finite logits at epoch {epoch}, step {step}"),
                    },
                    epochs: epochs_out,
                    final_train_acc: 0.0,
                    final_test_acc: 0.0,
                });
            }
            let loss = loss_builder(&mut tape, logits, &labels, &batch_idx, step)?;
            let loss_val = tape.value(loss).item().to_f64();
            if !loss_val.is_finite() {
                return Ok(LoopOutput {
                    status: RunStatus::Failed {
                        reason: format!("non-finite loss at epoch {epoch}, step {step}"),
                    },
                    epochs: epochs_out,
                    final_train_acc: 0.0,
                    final_test_acc: 0.0,
                });
            }
            let preds = tape.value(logits).argmax_rows();
            correct += preds.iter().zip(&labels).filter(|(p, y)| p == y).count();
            seen += labels.len();
            loss_sum += loss_val * labels.len() as f64;
            tape.backward(loss)?;
            let lr = E::from_f64(lr_at(optim, step, total_steps));
            for i in 0..model.num_params() {
                let Some(grad) = tape.grad(vars[i]) else { continue };
                let grad = if quant.as_ref().is_some_and(|q| q.is_quantized(i)) {
                    // Gradient w.r.t. the quantized image, applied straight
                    // through to the shadow weights.
                    ste_backward(grad, model.param(i).tensor.shape())?
                } else {
                    grad.clone()
                };
                sgd.step(i, &mut model.param_mut(i).tensor, &grad, lr)?;
            }
            model.update_bn_buffers(&bn_stats, BN_MOMENTUM);
            step += 1;
        }
        let test_acc = evaluate(model, quant.as_ref(), &data.test, None)?;
        epochs_out.push(EpochStats {
            train_loss: loss_sum / seen.max(1) as f64,
            train_acc: correct as f64 / seen.max(1) as f64,
            test_acc,
        });
    }
    let quant_final = match quant_spec {
        Some(spec) => Some(QuantState::compute(model, spec)?),
        None => None,
    };
    let final_train_acc = evaluate(model, quant_final.as_ref(), &data.train, None)?;
    let final_test_acc = evaluate(model, quant_final.as_ref(), &data.test, None)?;
    Ok(LoopOutput { status: RunStatus::Completed, epochs: epochs_out, final_train_acc, final_test_acc })
}

/// Hard-label full-precision training from scratch: teachers, and the
/// pretrained students distillation later starts from.
pub fn train_teacher<E: Float>(
    spec: &ModelSpec,
    data: &DataPair<E>,
    optim: &OptimConfig,
    seed: u64,
    augment: bool,
) -> Result<(Model<E>, LoopOutput)> {
    let mut model = build::<E>(spec, seed)?;
    let out = train_loop(&mut model, data, optim, seed, None, augment, |tape, logits, labels, _, _| {
        hard_loss(tape, logits, labels)
    })?;
    Ok((model, out))
}

/// Where a student step's teacher logits come from.
pub enum TeacherSource<E: Float> {
    /// Precomputed logits for the whole train split (raw logits, tempered
    /// per batch so tau stays sweepable from one cache).
    Cached(Arc<Tensor<E>>),
    /// Forward the teacher on each batch (required under augmentation).
    Live(Box<Teacher<E>>),
}

impl<E: Float> TeacherSource<E> {
    fn batch_logits(&self, images: &Tensor<E>, indices: &[usize]) -> Result<Tensor<E>> {
        match self {
            TeacherSource::Cached(all) => {
                let classes = all.shape()[1];
                let mut data = Vec::with_capacity(indices.len() * classes);
                for &i in indices {
                    data.extend_from_slice(&all.data()[i * classes..(i + 1) * classes]);
                }
                Tensor::new(vec![indices.len(), classes], data)
            }
            TeacherSource::Live(teacher) => teacher.forward(images),
        }
    }
}

/// Distillation inputs for a student run.
pub struct StudentDistill<E: Float> {
    pub config: DistillConfig,
    pub teacher: TeacherSource<E>,
}

pub struct StudentRun<'a, E: Float> {
    pub spec: &'a ModelSpec,
    pub data: &'a DataPair<E>,
    pub optim: &'a OptimConfig,
    pub seed: u64,
    pub quantizer: Option<&'a QuantizerSpec>,
    /// `None` runs the hard-label fine-tuning baseline.
    pub distill: Option<StudentDistill<E>>,
    /// Pretrained full-precision student (the loop's starting point).
    pub init: &'a Checkpoint,
    pub augment: bool,
}

/// Quantization-aware fine-tuning with (optional) distillation.
pub fn train_student_kd<E: Float>(args: StudentRun<'_, E>) -> Result<(Model<E>, LoopOutput)> {
    let mut model = build::<E>(args.spec, args.seed)?;
    args.init.load_into(&mut model)?;
    let n = args.data.train.len();
    let steps_per_epoch = n.div_ceil(args.optim.batch_size) as u64;
    let horizon = steps_per_epoch * u64::from(args.optim.epochs);
    let out = match args.distill {
        None => train_loop(
            &mut model,
            args.data,
            args.optim,
            args.seed,
            args.quantizer,
            args.augment,
            |tape, logits, labels, _, _| hard_loss(tape, logits, labels),
        )?,
        Some(StudentDistill { config, teacher }) => {
            config.validate()?;
            let schedule = LambdaSchedule::new(config.lambda, horizon)?;
            let tau = E::from_f64(config.tau);
            train_loop(
                &mut model,
                args.data,
                args.optim,
                args.seed,
                args.quantizer,
                args.augment,
                |tape, logits, labels, indices, step| {
                    let lambda = schedule.at(step);
                    if lambda == 0.0 {
                        // Identical tape to the hard baseline.
                        hard_loss(tape, logits, labels)
                    } else {
                        let t_logits = teacher.batch_logits(tape.value(logits), indices)?;
                        let tv = tape.constant(t_logits);
                        kd_loss(
                            tape,
                            logits,
                            tv,
                            labels,
                            tau,
                            E::from_f64(lambda),
                            config.tau_squared_scaling,
                        )
                    }
                },
            )?
        }
    };
    Ok((model, out))
}

/// Cache a teacher's logits over a dataset in index order.
pub fn cache_teacher_logits<E: Float>(teacher: &Teacher<E>, ds: &Dataset<E>) -> Result<Tensor<E>> {
    full_logits(teacher.model(), ds)
}

/// Canonical file name for a hard-trained full-precision checkpoint.
pub fn hard_ckpt_name(family: crate::models::Family, width: f64, seed: u64) -> String {
    format!("{family}_w{width}_s{seed}.ckpt")
}

/// Train (or reuse) a hard-label full-precision checkpoint at the given
/// width, writing it under `dir` with the canonical name and recording the
/// run when a store is supplied.
pub fn ensure_hard_checkpoint<E: Float>(
    cfg: &RunConfig,
    data: &DataPair<E>,
    width: f64,
    seed: u64,
    dir: &Path,
    mut store: Option<&mut ResultsStore>,
    force: bool,
) -> Result<PathBuf> {
    let path = dir.join(hard_ckpt_name(cfg.model.family, width, seed));
    if path.exists() && !force {
        return Ok(path);
    }
    let mut cell_cfg = cfg.clone();
    cell_cfg.model.width_factor = width;
    cell_cfg.quantizer = None;
    cell_cfg.distill = None;
    cell_cfg.teacher = None;
    cell_cfg.init = None;
    cell_cfg.sweep = None;
    let spec = cell_cfg.model.to_spec(data.train.num_classes, data.train.input_shape())?;
    let started = Instant::now();
    let (model, out) = train_teacher::<E>(&spec, data, &cfg.optim, seed, cfg.dataset.augment())?;
    if let RunStatus::Failed { reason } = &out.status {
        return Err(Error::config(format!("hard training diverged: {reason}")));
    }
    let meta = CheckpointMeta {
        spec: spec.clone(),
        seed,
        epochs: cfg.optim.epochs,
        final_train_acc: out.final_train_acc,
        final_test_acc: out.final_test_acc,
    };
    save_checkpoint(&model, &meta, &path)?;
    if let Some(store) = store.as_deref_mut() {
        let hash = cell_cfg.fingerprint();
        store.record_config(CellInfo {
            hash: hash.clone(),
            kind: "teacher".to_string(),
            tau: None,
            width_factor: Some(width),
            policy: None,
            bits: None,
            config: serde_json::to_value(&cell_cfg).expect("config serializes"),
        })?;
        store.append(RunRecord {
            config_hash: hash,
            seed,
            status: out.status,
            epochs: out.epochs,
            final_train_acc: out.final_train_acc,
            final_test_acc: out.final_test_acc,
            wall_time_s: started.elapsed().as_secs_f64(),
            soft_labels: None,
        })?;
    }
    Ok(path)
}

// ---- sweep runner ----

pub struct SweepOptions {
    /// 0 selects the available parallelism.
    pub workers: usize,
    pub force: bool,
    /// Run at most this many cells this invocation (resume later).
    pub max_cells: Option<usize>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions { workers: 0, force: false, max_cells: None }
    }
}

#[derive(Debug, PartialEq, Eq)]
pub struct SweepOutcome {
    pub planned: usize,
    pub executed: usize,
    pub skipped: usize,
    pub failed: usize,
}

#[derive(Clone)]
struct Cell {
    cfg: RunConfig,
    hash: String,
    seed: u64,
    info: CellInfo,
    teacher: Option<(PathBuf, String, u64)>, // path, width key, seed
    init_path: PathBuf,
}

/// Expand the sweep grid into concrete cells in canonical order:
/// the hard baseline per seed first, then `policy x tau x width x seed`.
///
/// A cell's hash identifies its hyperparameter point; the five seeds are
/// replicates of one cell. Teacher and init checkpoints are seed-matched
/// files, so the hashed payload carries the seed-templated name
/// (`..._s{seed}.ckpt`) while each replicate runs its concrete path.
fn plan_cells(cfg: &RunConfig) -> Result<Vec<Cell>> {
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::config("config has no [sweep] section".to_string()))?;
    if sweep.tau.is_empty() || sweep.width_factor.is_empty() || sweep.lambda.is_empty() {
        return Err(Error::config("sweep axes must be non-empty".to_string()));
    }
    let family = cfg.model.family;
    let mut cells = Vec::new();
    let mut missing: Vec<String> = Vec::new();
    let init_for = |seed: u64| {
        sweep.pretrained_dir.join(hard_ckpt_name(family, cfg.model.width_factor, seed))
    };
    let init_template = sweep
        .pretrained_dir
        .join(format!("{family}_w{}_s{{seed}}.ckpt", cfg.model.width_factor));
    for &seed in &cfg.seeds {
        if !init_for(seed).exists() {
            missing.push(init_for(seed).display().to_string());
        }
    }
    if sweep.include_hd_baseline {
        let mut cell_cfg = cfg.clone();
        cell_cfg.distill = None;
        cell_cfg.teacher = None;
        cell_cfg.sweep = None;
        cell_cfg.init =
            Some(crate::config::InitConfig { student_checkpoint: init_template.clone() });
        let hash = cell_cfg.fingerprint();
        let info = CellInfo {
            hash: hash.clone(),
            kind: "hd".to_string(),
            tau: None,
            width_factor: None,
            policy: Some("hd".to_string()),
            bits: cfg.quantizer.as_ref().map(|q| q.bits),
            config: serde_json::to_value(&cell_cfg).expect("config serializes"),
        };
        for &seed in &cfg.seeds {
            cells.push(Cell {
                info: info.clone(),
                cfg: cell_cfg.clone(),
                hash: hash.clone(),
                seed,
                teacher: None,
                init_path: init_for(seed),
            });
        }
    }
    for policy in &sweep.lambda {
        for &tau in &sweep.tau {
            for &width in &sweep.width_factor {
                let teacher_template =
                    sweep.zoo_dir.join(format!("{family}_w{width}_s{{seed}}.ckpt"));
                let mut cell_cfg = cfg.clone();
                cell_cfg.sweep = None;
                cell_cfg.distill = Some(DistillConfig {
                    tau,
                    lambda: *policy,
                    tau_squared_scaling: cfg
                        .distill
                        .as_ref()
                        .is_some_and(|d| d.tau_squared_scaling),
                });
                cell_cfg.teacher = Some(TeacherConfig {
                    checkpoint: teacher_template,
                    eval: TeacherMode::Float,
                });
                cell_cfg.init =
                    Some(crate::config::InitConfig { student_checkpoint: init_template.clone() });
                let hash = cell_cfg.fingerprint();
                let info = CellInfo {
                    hash: hash.clone(),
                    kind: "student".to_string(),
                    tau: Some(tau),
                    width_factor: Some(width),
                    policy: Some(policy_label(policy)),
                    bits: cfg.quantizer.as_ref().map(|q| q.bits),
                    config: serde_json::to_value(&cell_cfg).expect("config serializes"),
                };
                for &seed in &cfg.seeds {
                    let teacher_path = sweep.zoo_dir.join(hard_ckpt_name(family, width, seed));
                    if !teacher_path.exists()
                        && !missing.contains(&teacher_path.display().to_string())
                    {
                        missing.push(teacher_path.display().to_string());
                    }
                    cells.push(Cell {
                        info: info.clone(),
                        cfg: cell_cfg.clone(),
                        hash: hash.clone(),
                        seed,
                        teacher: Some((teacher_path, format!("{width}"), seed)),
                        init_path: init_for(seed),
                    });
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::config(format!(
            "missing checkpoints for sweep:\n  {}",
            missing.join("\n  ")
        )));
    }
    Ok(cells)
}

pub fn policy_label(policy: &LambdaSpec) -> String {
    match policy {
        LambdaSpec::Constant { value } => format!("constant({value})"),
        LambdaSpec::Gslr { lambda0 } => format!("gslr({lambda0})"),
    }
}

type TeacherCache<E> = Mutex<HashMap<(String, u64), Arc<Tensor<E>>>>;

fn cell_teacher_logits<E: Float>(
    cell: &Cell,
    data: &DataPair<E>,
    cache: &TeacherCache<E>,
) -> Result<Option<Arc<Tensor<E>>>> {
    let Some((path, width_key, seed)) = &cell.teacher else { return Ok(None) };
    let key = (width_key.clone(), *seed);
    if let Some(hit) = cache.lock().expect("cache lock").get(&key) {
        return Ok(Some(hit.clone()));
    }
    let ckpt = crate::models::load_checkpoint(path)?;
    let teacher: Teacher<E> = Teacher::from_checkpoint(&ckpt, TeacherMode::Float)?;
    let logits = Arc::new(cache_teacher_logits(&teacher, &data.train)?);
    cache.lock().expect("cache lock").insert(key, logits.clone());
    Ok(Some(logits))
}

fn run_cell<E: Float>(
    cell: &Cell,
    data: &DataPair<E>,
    cache: &TeacherCache<E>,
) -> RunRecord {
    let started = Instant::now();
    let result = (|| -> Result<(LoopOutput, Option<SoftLabelSnapshot>)> {
        let spec = cell
            .cfg
            .model
            .to_spec(data.train.num_classes, data.train.input_shape())?;
        let init = crate::models::load_checkpoint(&cell.init_path)?;
        let (distill, snapshot) = match (&cell.cfg.distill, cell_teacher_logits(cell, data, cache)?)
        {
            (Some(d), Some(logits)) => {
                let stats = soft_label_stats(logits.as_ref(), d.tau)?;
                let snapshot = SoftLabelSnapshot {
                    tau: d.tau,
                    mean_entropy: stats.mean_entropy,
                    mean_peak: stats.mean_peak,
                };
                (
                    Some(StudentDistill {
                        config: d.clone(),
                        teacher: TeacherSource::Cached(logits),
                    }),
                    Some(snapshot),
                )
            }
            _ => (None, None),
        };
        let (_, out) = train_student_kd(StudentRun {
            spec: &spec,
            data,
            optim: &cell.cfg.optim,
            seed: cell.seed,
            quantizer: cell.cfg.quantizer.as_ref(),
            distill,
            init: &init,
            augment: cell.cfg.dataset.augment(),
        })?;
        Ok((out, snapshot))
    })();
    match result {
        Ok((out, soft_labels)) => RunRecord {
            config_hash: cell.hash.clone(),
            seed: cell.seed,
            status: out.status,
            epochs: out.epochs,
            final_train_acc: out.final_train_acc,
            final_test_acc: out.final_test_acc,
            wall_time_s: started.elapsed().as_secs_f64(),
            soft_labels,
        },
        Err(e) => RunRecord {
            config_hash: cell.hash.clone(),
            seed: cell.seed,
            status: RunStatus::Failed { reason: e.to_string() },
            epochs: Vec::new(),
            final_train_acc: 0.0,
            final_test_acc: 0.0,
            wall_time_s: started.elapsed().as_secs_f64(),
            soft_labels: None,
        },
    }
}

/// Run every grid cell x seed, skipping completed ones, in parallel up to
/// the worker count. Records land in canonical cell order; figure-shaped
/// CSVs are refreshed at the end.
pub fn sweep<E: Float>(
    cfg: &RunConfig,
    data: &Arc<DataPair<E>>,
    store: &mut ResultsStore,
    opts: &SweepOptions,
) -> Result<SweepOutcome> {
    cfg.validate()?;
    let cells = plan_cells(cfg)?;
    let planned = cells.len();
    let mut queue: Vec<Cell> = Vec::new();
    let mut skipped = 0usize;
    for cell in cells {
        if !opts.force && store.contains(&cell.hash, cell.seed) {
            skipped += 1;
        } else {
            queue.push(cell);
        }
    }
    if let Some(max) = opts.max_cells {
        queue.truncate(max);
    }
    for cell in &queue {
        store.record_config(cell.info.clone())?;
    }
    let workers = if opts.workers == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        opts.workers
    }
    .min(queue.len().max(1));

    let cache: TeacherCache<E> = Mutex::new(HashMap::new());
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, RunRecord)>();
    let mut failed = 0usize;
    let executed = queue.len();
    std::thread::scope(|scope| -> Result<()> {
        for _ in 0..workers {
            let tx = tx.clone();
            let queue = &queue;
            let next = &next;
            let cache = &cache;
            let data = Arc::clone(data);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= queue.len() {
                    break;
                }
                let record = run_cell(&queue[i], data.as_ref(), cache);
                if tx.send((i, record)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        // Single writer: flush completions in canonical cell order.
        let mut pending: BTreeMap<usize, RunRecord> = BTreeMap::new();
        let mut expect = 0usize;
        for (i, record) in rx {
            pending.insert(i, record);
            while let Some(record) = pending.remove(&expect) {
                if matches!(record.status, RunStatus::Failed { .. }) {
                    failed += 1;
                }
                let cell = &queue[expect];
                println!(
                    "[{}/{}] {} tau={} width={} seed={} -> {}",
                    expect + 1,
                    queue.len(),
                    cell.info.kind,
                    cell.info.tau.map_or("-".to_string(), |t| t.to_string()),
                    cell.info.width_factor.map_or("-".to_string(), |w| w.to_string()),
                    cell.seed,
                    match &record.status {
                        RunStatus::Completed => format!("test_acc {:.4}", record.final_test_acc),
                        RunStatus::Failed { reason } => format!("FAILED ({reason})"),
                    }
                );
                store.append(record)?;
                expect += 1;
            }
        }
        Ok(())
    })?;
    report::emit_sweep_csvs(store)?;
    Ok(SweepOutcome { planned, executed, skipped, failed })
}
