//! Width-scalable classifier families and checkpoint serialization.
//!
//! Two families stand in for the usual wide-residual teacher zoo at desk
//! scale:
//!
//! - `mlp`: `depth` hidden layers of `round(64 * width_factor)` units each,
//!   ReLU activations, biased linear head.
//! - `smallconv`: `depth` conv blocks (3x3, pad 1, no bias, batch norm,
//!   ReLU) with channel counts `round(8 * width_factor) * 2^(i-1)` and
//!   stride 2 from the second block on, then global average pooling and a
//!   biased linear head. With `residual = true` each block gains a second
//!   same-channel conv and an identity skip.
//!
//! The width factor is the experiments' independent variable; scaling it
//! scales every hidden dimension. Exact per-layer tables live in
//! `docs/models.md`.
//!
//! Checkpoints are self-describing: a magic-tagged header carrying the spec
//! hash and JSON metadata, a tensor directory with little-endian `f32`
//! payloads, and a whole-file CRC32. The byte layout is documented in
//! `docs/checkpoint-format.md`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::Float;
use crate::rng::{fnv1a64, Rng};
use crate::tensor::{Tape, Tensor, Var};

pub const MLP_BASE_UNITS: usize = 64;
pub const CONV_BASE_CHANNELS: usize = 8;

const CKPT_MAGIC: &[u8; 8] = b"QKDCKPT1";
const CKPT_VERSION: u32 = 1;

/// Model family selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Mlp,
    SmallConv,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Family::Mlp => write!(f, "mlp"),
            Family::SmallConv => write!(f, "smallconv"),
        }
    }
}

/// Architecture description; every hidden dimension is a deterministic
/// function of these fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: Family,
    pub width_factor: f64,
    /// Hidden layers (mlp) or conv blocks (smallconv).
    pub depth: usize,
    pub num_classes: usize,
    /// `[channels, height, width]`.
    pub input_shape: [usize; 3],
    #[serde(default)]
    pub residual: bool,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.width_factor > 0.0) || !self.width_factor.is_finite() {
            return Err(Error::config(format!(
                "width_factor must be positive and finite, got {}",
                self.width_factor
            )));
        }
        if self.depth == 0 {
            return Err(Error::config("depth must be >= 1".to_string()));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be >= 2".to_string()));
        }
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::config(format!("input_shape {:?} has a zero dim", self.input_shape)));
        }
        if self.family == Family::Mlp && self.residual {
            return Err(Error::config("residual blocks apply to smallconv only".to_string()));
        }
        Ok(())
    }

    /// Hidden width of the mlp family.
    pub fn mlp_hidden(&self) -> usize {
        scaled(MLP_BASE_UNITS, self.width_factor)
    }

    /// Channel count of conv block `i` (0-based).
    pub fn conv_channels(&self, block: usize) -> usize {
        scaled(CONV_BASE_CHANNELS, self.width_factor) << block.min(3)
    }

    /// Stable hash of the canonical spec JSON; stored in checkpoints.
    pub fn spec_hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("spec serializes");
        fnv1a64(json.as_bytes())
    }

    /// Exact trainable-parameter count.
    pub fn param_count(&self) -> usize {
        plan(self).iter().map(|p| p.shape.iter().product::<usize>()).sum()
    }

    /// Elements in conv kernels only (excludes biases, norms, and the head).
    pub fn conv_param_count(&self) -> usize {
        plan(self)
            .iter()
            .filter(|p| p.quantizable && p.shape.len() == 4)
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }
}

fn scaled(base: usize, width_factor: f64) -> usize {
    (((base as f64) * width_factor).round() as usize).max(1)
}

/// One named trainable tensor.
#[derive(Clone, Debug)]
pub struct ParamDef {
    pub name: String,
    pub shape: Vec<usize>,
    /// Conv / linear weight matrices are quantizable; biases and norm
    /// affines are not (weights-only quantization).
    pub quantizable: bool,
    fan_in: usize,
    init: InitKind,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum InitKind {
    HeUniform,
    Zero,
    One,
}

/// Trainable tensor inside a built model.
#[derive(Clone, Debug)]
pub struct Param<E> {
    pub name: String,
    pub tensor: Tensor<E>,
    pub quantizable: bool,
}

/// Non-trainable running statistic (batch-norm mean / variance).
#[derive(Clone, Debug)]
pub struct BufferSlot<E> {
    pub name: String,
    pub tensor: Tensor<E>,
}

#[derive(Clone, Debug)]
enum Step {
    Flatten,
    /// matmul + bias; param indices into the model's param list.
    Linear { w: usize, b: usize },
    Relu,
    Conv { w: usize, stride: usize, pad: usize },
    /// gamma/beta params plus running mean/var buffer indices.
    BatchNorm { gamma: usize, beta: usize, mean_buf: usize, var_buf: usize },
    GlobalPool,
    /// Push the current activation on the skip stack.
    SaveSkip,
    /// Pop the skip stack and add it to the current activation.
    AddSkip,
}

struct Plan {
    params: Vec<ParamDef>,
    buffers: Vec<(String, usize)>, // name, channel count
    steps: Vec<Step>,
}

fn plan(spec: &ModelSpec) -> Vec<ParamDef> {
    full_plan(spec).params
}

fn full_plan(spec: &ModelSpec) -> Plan {
    let mut params = Vec::new();
    let mut buffers = Vec::new();
    let mut steps = Vec::new();
    match spec.family {
        Family::Mlp => {
            let in_dim: usize = spec.input_shape.iter().product();
            let hidden = spec.mlp_hidden();
            steps.push(Step::Flatten);
            let mut d = in_dim;
            for layer in 1..=spec.depth {
                let w = push_param(
                    &mut params,
                    format!("fc{layer}.weight"),
                    vec![d, hidden],
                    true,
                    d,
                    InitKind::HeUniform,
                );
                let b = push_param(
                    &mut params,
                    format!("fc{layer}.bias"),
                    vec![hidden],
                    false,
                    d,
                    InitKind::Zero,
                );
                steps.push(Step::Linear { w, b });
                steps.push(Step::Relu);
                d = hidden;
            }
            let w = push_param(
                &mut params,
                "head.weight".to_string(),
                vec![d, spec.num_classes],
                true,
                d,
                InitKind::HeUniform,
            );
            let b = push_param(
                &mut params,
                "head.bias".to_string(),
                vec![spec.num_classes],
                false,
                d,
                InitKind::Zero,
            );
            steps.push(Step::Linear { w, b });
        }
        Family::SmallConv => {
            let mut in_ch = spec.input_shape[0];
            for block in 0..spec.depth {
                let out_ch = spec.conv_channels(block);
                let stride = if block == 0 { 1 } else { 2 };
                let name = format!("block{}", block + 1);
                push_conv_bn(
                    &mut params,
                    &mut buffers,
                    &mut steps,
                    &format!("{name}.conv"),
                    &format!("{name}.bn"),
                    in_ch,
                    out_ch,
                    stride,
                );
                steps.push(Step::Relu);
                if spec.residual {
                    steps.push(Step::SaveSkip);
                    push_conv_bn(
                        &mut params,
                        &mut buffers,
                        &mut steps,
                        &format!("{name}.conv2"),
                        &format!("{name}.bn2"),
                        out_ch,
                        out_ch,
                        1,
                    );
                    steps.push(Step::AddSkip);
                    steps.push(Step::Relu);
                }
                in_ch = out_ch;
            }
            steps.push(Step::GlobalPool);
            let w = push_param(
                &mut params,
                "head.weight".to_string(),
                vec![in_ch, spec.num_classes],
                true,
                in_ch,
                InitKind::HeUniform,
            );
            let b = push_param(
                &mut params,
                "head.bias".to_string(),
                vec![spec.num_classes],
                false,
                in_ch,
                InitKind::Zero,
            );
            steps.push(Step::Linear { w, b });
        }
    }
    Plan { params, buffers, steps }
}

fn push_param(
    params: &mut Vec<ParamDef>,
    name: String,
    shape: Vec<usize>,
    quantizable: bool,
    fan_in: usize,
    init: InitKind,
) -> usize {
    params.push(ParamDef { name, shape, quantizable, fan_in, init });
    params.len() - 1
}

#[allow(clippy::too_many_arguments)]
fn push_conv_bn(
    params: &mut Vec<ParamDef>,
    buffers: &mut Vec<(String, usize)>,
    steps: &mut Vec<Step>,
    conv_name: &str,
    bn_name: &str,
    in_ch: usize,
    out_ch: usize,
    stride: usize,
) {
    let fan_in = in_ch * 9;
    let w = push_param(
        params,
        format!("{conv_name}.weight"),
        vec![out_ch, in_ch, 3, 3],
        true,
        fan_in,
        InitKind::HeUniform,
    );
    steps.push(Step::Conv { w, stride, pad: 1 });
    let gamma = push_param(
        params,
        format!("{bn_name}.gamma"),
        vec![out_ch],
        false,
        out_ch,
        InitKind::One,
    );
    let beta = push_param(
        params,
        format!("{bn_name}.beta"),
        vec![out_ch],
        false,
        out_ch,
        InitKind::Zero,
    );
    let mean_buf = buffers.len();
    buffers.push((format!("{bn_name}.running_mean"), out_ch));
    let var_buf = buffers.len();
    buffers.push((format!("{bn_name}.running_var"), out_ch));
    steps.push(Step::BatchNorm { gamma, beta, mean_buf, var_buf });
}

/// Batch statistics produced by one training-mode forward; the training
/// loop folds them into the running buffers.
pub struct BnBatchStats<E> {
    pub buffer_index: (usize, usize), // (mean, var)
    pub mean: Tensor<E>,
    pub var: Tensor<E>,
}

/// A built model: spec, trainable params, and batch-norm buffers.
pub struct Model<E: Float> {
    spec: ModelSpec,
    params: Vec<Param<E>>,
    buffers: Vec<BufferSlot<E>>,
}

/// Deterministic initialization: He-uniform for conv / linear weights
/// (independent stream per tensor name), zeros for biases and norm shifts,
/// ones for norm scales and running variances.
pub fn build<E: Float>(spec: &ModelSpec, seed: u64) -> Result<Model<E>> {
    spec.validate()?;
    let plan = full_plan(spec);
    let mut params = Vec::with_capacity(plan.params.len());
    for def in &plan.params {
        let tensor = match def.init {
            InitKind::HeUniform => {
                let limit = (6.0 / def.fan_in as f64).sqrt();
                let mut rng = Rng::derive(seed, &format!("init/{}", def.name));
                Tensor::rand_uniform(&def.shape, -limit, limit, &mut rng)
            }
            InitKind::Zero => Tensor::zeros(&def.shape),
            InitKind::One => Tensor::full(&def.shape, E::ONE),
        };
        params.push(Param { name: def.name.clone(), tensor, quantizable: def.quantizable });
    }
    let buffers = plan
        .buffers
        .iter()
        .enumerate()
        .map(|(i, (name, c))| BufferSlot {
            name: name.clone(),
            tensor: if i % 2 == 0 { Tensor::zeros(&[*c]) } else { Tensor::full(&[*c], E::ONE) },
        })
        .collect();
    Ok(Model { spec: spec.clone(), params, buffers })
}

impl<E: Float> Model<E> {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn param(&self, i: usize) -> &Param<E> {
        &self.params[i]
    }

    pub fn param_mut(&mut self, i: usize) -> &mut Param<E> {
        &mut self.params[i]
    }

    pub fn params(&self) -> &[Param<E>] {
        &self.params
    }

    pub fn buffers(&self) -> &[BufferSlot<E>] {
        &self.buffers
    }

    pub fn buffer_mut(&mut self, i: usize) -> &mut BufferSlot<E> {
        &mut self.buffers[i]
    }

    /// Indices of quantizable weight tensors, honoring a first/last
    /// exemption when requested.
    pub fn quantizable_indices(&self, exempt_first_last: bool) -> Vec<usize> {
        let all: Vec<usize> =
            (0..self.params.len()).filter(|&i| self.params[i].quantizable).collect();
        if exempt_first_last && all.len() > 2 {
            all[1..all.len() - 1].to_vec()
        } else if exempt_first_last {
            Vec::new()
        } else {
            all
        }
    }

    /// Forward pass on a tape. `param_vars` supplies one leaf per trainable
    /// param (possibly quantized images of the masters). In training mode
    /// batch norm uses batch statistics and returns them for the caller to
    /// fold into the running buffers; in eval mode it reads the buffers.
    pub fn forward(
        &self,
        tape: &mut Tape<E>,
        input: Var,
        param_vars: &[Var],
        train: bool,
    ) -> Result<(Var, Vec<BnBatchStats<E>>)> {
        if param_vars.len() != self.params.len() {
            return Err(Error::config(format!(
                "forward: {} param vars for {} params",
                param_vars.len(),
                self.params.len()
            )));
        }
        let in_shape = tape.value(input).shape().to_vec();
        if in_shape.len() != 4
            || in_shape[1..] != self.spec.input_shape
        {
            return Err(Error::config(format!(
                "forward: input shape {:?} does not match spec input {:?}",
                in_shape, self.spec.input_shape
            )));
        }
        let plan = full_plan(&self.spec);
        let mut bn_stats = Vec::new();
        let mut skip_stack: Vec<Var> = Vec::new();
        let mut x = input;
        for step in &plan.steps {
            x = match step {
                Step::Flatten => {
                    let n = tape.value(x).shape()[0];
                    let rest: usize = tape.value(x).shape()[1..].iter().product();
                    tape.reshape(x, vec![n, rest])?
                }
                Step::Linear { w, b } => {
                    let y = tape.matmul(x, param_vars[*w])?;
                    tape.add(y, param_vars[*b])?
                }
                Step::Relu => tape.relu(x),
                Step::Conv { w, stride, pad } => tape.conv2d(x, param_vars[*w], *stride, *pad)?,
                Step::BatchNorm { gamma, beta, mean_buf, var_buf } => {
                    if train {
                        let (y, mean, var) =
                            tape.batch_norm_train(x, param_vars[*gamma], param_vars[*beta])?;
                        bn_stats.push(BnBatchStats {
                            buffer_index: (*mean_buf, *var_buf),
                            mean,
                            var,
                        });
                        y
                    } else {
                        tape.batch_norm_eval(
                            x,
                            param_vars[*gamma],
                            param_vars[*beta],
                            &self.buffers[*mean_buf].tensor,
                            &self.buffers[*var_buf].tensor,
                        )?
                    }
                }
                Step::GlobalPool => tape.global_avg_pool(x)?,
                Step::SaveSkip => {
                    skip_stack.push(x);
                    x
                }
                Step::AddSkip => {
                    let skip = skip_stack.pop().expect("skip stack underflow");
                    tape.add(x, skip)?
                }
            };
        }
        Ok((x, bn_stats))
    }

    /// Evaluation-mode inference with the model's own weights; returns
    /// logits `[N, num_classes]`.
    pub fn infer(&self, inputs: &Tensor<E>) -> Result<Tensor<E>> {
        let mut tape = Tape::new();
        let input = tape.constant(inputs.clone());
        let vars: Vec<Var> =
            self.params.iter().map(|p| tape.constant(p.tensor.clone())).collect();
        let (logits, _) = self.forward(&mut tape, input, &vars, false)?;
        Ok(tape.value(logits).clone())
    }

    /// Fold batch statistics into the running buffers:
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn update_bn_buffers(&mut self, stats: &[BnBatchStats<E>], momentum: f64) {
        let m = E::from_f64(momentum);
        let one_m = E::from_f64(1.0 - momentum);
        for s in stats {
            for (slot, batch) in
                [(s.buffer_index.0, &s.mean), (s.buffer_index.1, &s.var)]
            {
                let buf = self.buffers[slot].tensor.data_mut();
                for (b, &v) in buf.iter_mut().zip(batch.data()) {
                    *b = one_m * *b + m * v;
                }
            }
        }
    }
}

// ---- checkpoint serialization ----

/// Training provenance stored in the checkpoint header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: ModelSpec,
    pub seed: u64,
    pub epochs: u32,
    pub final_train_acc: f64,
    pub final_test_acc: f64,
}

/// Deserialized checkpoint: metadata plus named `f32` tensors.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub spec_hash: u64,
    /// `(name, tensor, is_buffer)` in serialization order.
    pub tensors: Vec<(String, Tensor<f32>, bool)>,
}

impl Checkpoint {
    /// Total elements across trainable (non-buffer) tensors.
    pub fn trainable_elements(&self) -> usize {
        self.tensors.iter().filter(|(_, _, b)| !b).map(|(_, t, _)| t.numel()).sum()
    }

    /// Rebuild a model carrying this checkpoint's weights.
    pub fn instantiate<E: Float>(&self) -> Result<Model<E>> {
        let mut model = build::<E>(&self.meta.spec, self.meta.seed)?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    /// Copy weights into an existing model; the spec hash must match.
    pub fn load_into<E: Float>(&self, model: &mut Model<E>) -> Result<()> {
        let expect = model.spec().spec_hash();
        if expect != self.spec_hash {
            return Err(Error::config(format!(
                "checkpoint spec hash {:016x} does not match model spec hash {expect:016x}",
                self.spec_hash
            )));
        }
        let mut params = 0usize;
        let mut buffers = 0usize;
        for (name, tensor, is_buffer) in &self.tensors {
            if *is_buffer {
                let slot = model
                    .buffers
                    .iter_mut()
                    .find(|b| &b.name == name)
                    .ok_or_else(|| Error::config(format!("unknown buffer {name}")))?;
                slot.tensor = tensor.cast();
                buffers += 1;
            } else {
                let slot = model
                    .params
                    .iter_mut()
                    .find(|p| &p.name == name)
                    .ok_or_else(|| Error::config(format!("unknown param {name}")))?;
                if slot.tensor.shape() != tensor.shape() {
                    return Err(Error::config(format!(
                        "param {name}: checkpoint shape {:?} vs model shape {:?}",
                        tensor.shape(),
                        slot.tensor.shape()
                    )));
                }
                slot.tensor = tensor.cast();
                params += 1;
            }
        }
        if params != model.params.len() || buffers != model.buffers.len() {
            return Err(Error::config(format!(
                "checkpoint covers {params} params / {buffers} buffers, model has {} / {}",
                model.params.len(),
                model.buffers.len()
            )));
        }
        Ok(())
    }
}

/// Serialize a model (cast to `f32`) with its training metadata.
pub fn save_checkpoint<E: Float>(
    model: &Model<E>,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<()> {
    if meta.spec != *model.spec() {
        return Err(Error::config("checkpoint meta spec differs from model spec".to_string()));
    }
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&model.spec().spec_hash().to_le_bytes());
    let meta_json = serde_json::to_vec(meta).expect("meta serializes");
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_json);
    let count = model.params.len() + model.buffers.len();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    let entries = model
        .params
        .iter()
        .map(|p| (&p.name, &p.tensor, false))
        .chain(model.buffers.iter().map(|b| (&b.name, &b.tensor, true)));
    for (name, tensor, is_buffer) in entries {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(u8::from(is_buffer));
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    out.extend_from_slice(&crc32(&out).to_le_bytes());
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Parse and checksum-verify a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let magic = r.take(8)?;
    if magic != CKPT_MAGIC {
        return Err(Error::format("bad checkpoint magic".to_string(), Some(0)));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}"), Some(8)));
    }
    if bytes.len() < 4 {
        return Err(Error::integrity("checkpoint shorter than its checksum".to_string()));
    }
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let actual = crc32(&bytes[..bytes.len() - 4]);
    if stored_crc != actual {
        return Err(Error::integrity(format!(
            "checkpoint checksum mismatch (stored {stored_crc:08x}, computed {actual:08x})"
        )));
    }
    let spec_hash = r.u64()?;
    let meta_len = r.u32()? as usize;
    let meta_bytes = r.take(meta_len)?;
    let meta: CheckpointMeta = serde_json::from_slice(meta_bytes)
        .map_err(|e| Error::format(format!("bad checkpoint metadata: {e}"), Some(24)))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::format("tensor name is not utf-8".to_string(), None))?;
        let is_buffer = r.take(1)?[0] != 0;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?, is_buffer));
    }
    if r.pos != bytes.len() - 4 {
        return Err(Error::format(
            format!("{} trailing bytes after tensor directory", bytes.len() - 4 - r.pos),
            Some(r.pos as u64),
        ));
    }
    Ok(Checkpoint { meta, spec_hash, tensors })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::integrity(format!(
                "checkpoint truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// CRC-32 (IEEE 802.3 polynomial, reflected).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, slot) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xedb8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *slot = c;
    }
    let mut crc = 0xffff_ffffu32;
    for &b in bytes {
        crc = table[((crc ^ u32::from(b)) & 0xff) as usize] ^ (crc >> 8);
    }
    crc ^ 0xffff_ffff
}

/// Human-readable header dump for the inspect subcommand.
pub fn describe_checkpoint(ckpt: &Checkpoint) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "spec: {}", serde_json::to_string(&ckpt.meta.spec).expect("spec json"));
    let _ = writeln!(s, "spec_hash: {:016x}", ckpt.spec_hash);
    let _ = writeln!(
        s,
        "seed: {}  epochs: {}  train_acc: {:.4}  test_acc: {:.4}",
        ckpt.meta.seed, ckpt.meta.epochs, ckpt.meta.final_train_acc, ckpt.meta.final_test_acc
    );
    let _ = writeln!(s, "trainable elements: {}", ckpt.trainable_elements());
    for (name, tensor, is_buffer) in &ckpt.tensors {
        let kind = if *is_buffer { "buffer" } else { "param" };
        let _ = writeln!(s, "  {kind:6} {name:24} {:?}", tensor.shape());
    }
    s
}
