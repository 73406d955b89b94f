//! Training harness: mini-batch optimization of the penalized objective,
//! per-epoch metrics, best-checkpoint tracking, bit-exact checkpoint
//! resume, and config x seed sweeps with CSV/JSON outputs.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{DatasetSpec, ExperimentConfig};
use crate::data::{
    self, gen_updown, LabeledGraphSignalSet, Split, UpDownConfig, UpDownGraph,
};
use crate::error::{ConfigError, TrainError};
use crate::graph::GraphKind;
use crate::model::{build_architecture, Model};
use crate::optim::{Optimizer, OptimizerKind, Schedule, ScheduleState};
use crate::reg::{reg_penalty, reg_penalty_grad, RegContext};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// One row of the metrics log.
#[derive(Debug, Clone, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_acc: f64,
    pub reg_value: f64,
    pub lr: f64,
    pub val_loss: Option<f64>,
}

/// Full serialized training state; save -> load -> continue reproduces the
/// uninterrupted run bit for bit.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_text: String,
    pub config_hash: u64,
    /// Epochs completed.
    pub epoch: usize,
    pub best_eval_acc: f64,
    pub params: Vec<Tensor>,
    pub buffers: Vec<Vec<f64>>,
    pub opt_kind: OptimizerKind,
    pub opt_t: u64,
    pub opt_m: Vec<Tensor>,
    pub opt_v: Vec<Tensor>,
    pub shuffle_word_pos: u128,
    pub schedule: ScheduleState,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub config: ExperimentConfig,
    pub model: Model,
    pub history: Vec<EpochMetrics>,
    /// Test metrics of the freshly initialized model.
    pub init_eval_acc: f64,
    pub init_eval_loss: f64,
    pub best_eval_acc: f64,
    pub best: Checkpoint,
    pub last: Checkpoint,
}

/// Build the train/test pair named by the config. MNIST gets its validation
/// split carved later (last 5000 training images).
pub fn load_dataset(
    cfg: &ExperimentConfig,
) -> Result<(LabeledGraphSignalSet, LabeledGraphSignalSet), TrainError> {
    match &cfg.dataset {
        DatasetSpec::UpDown {
            n_train,
            n_test,
            threshold,
            bump_std,
            seed,
        } => {
            let g = cfg.graph.build()?;
            let kind = match g.kind() {
                GraphKind::Ring => UpDownGraph::Ring,
                GraphKind::Chain => UpDownGraph::Chain,
                other => {
                    return Err(TrainError::Config(ConfigError::BadValue {
                        key: "graph".into(),
                        msg: format!("up/down data needs a ring or chain, got {other:?}"),
                    }))
                }
            };
            let ud = UpDownConfig {
                graph: kind,
                n: g.n(),
                n_train: *n_train,
                n_test: *n_test,
                threshold: *threshold,
                std: *bump_std,
                seed: *seed,
            };
            Ok(gen_updown(&ud))
        }
        DatasetSpec::Mnist { dir, factor, noise } => {
            let (h, w) = cfg.graph.grid_dims().ok_or_else(|| {
                TrainError::Config(ConfigError::BadValue {
                    key: "graph".into(),
                    msg: "mnist data needs a grid graph".into(),
                })
            })?;
            if h != 28 / factor || w != 28 / factor {
                return Err(TrainError::Config(ConfigError::BadValue {
                    key: "factor".into(),
                    msg: format!("factor {factor} implies a {0}x{0} grid, config says {h}x{w}", 28 / factor),
                }));
            }
            let dir = Path::new(dir);
            let load_pair = |img: &str, lbl: &str| -> Result<data::MnistData, TrainError> {
                let mut images = std::fs::File::open(dir.join(img))?;
                let mut labels = std::fs::File::open(dir.join(lbl))?;
                Ok(data::load_mnist_idx(&mut images, &mut labels)?)
            };
            let train_raw = load_pair("train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
            let test_raw = load_pair("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
            let (train_raw, test_raw) = if *factor > 1 {
                (
                    data::downsample(&train_raw, *factor)?,
                    data::downsample(&test_raw, *factor)?,
                )
            } else {
                (train_raw, test_raw)
            };
            let mut train = data::mnist_to_signals(&train_raw, Split::Train, "mnist");
            let mut test = data::mnist_to_signals(&test_raw, Split::Test, "mnist");
            if let Some(spec) = noise {
                // independent seeds for the two splits
                train = data::apply_noise(&train, spec, Some((h, w)))?;
                let test_spec = data::NoiseSpec {
                    kind: spec.kind,
                    seed: spec.seed + 1,
                };
                test = data::apply_noise(&test, &test_spec, Some((h, w)))?;
            }
            Ok((train, test))
        }
    }
}

pub fn accuracy_from_logits(logits: &Tensor, labels: &[usize]) -> f64 {
    let classes = logits.shape()[1];
    let mut correct = 0usize;
    for (b, &label) in labels.iter().enumerate() {
        let row = &logits.data()[b * classes..(b + 1) * classes];
        let mut arg = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[arg] {
                arg = j;
            }
        }
        if arg == label {
            correct += 1;
        }
    }
    correct as f64 / labels.len().max(1) as f64
}

/// Accuracy and mean cross-entropy over a set, batched.
pub fn evaluate(
    model: &mut Model,
    set: &LabeledGraphSignalSet,
    batch_size: usize,
) -> Result<(f64, f64), TrainError> {
    if set.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut correct = 0.0;
    let mut loss_sum = 0.0;
    let indices: Vec<usize> = (0..set.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, labels) = set.batch(chunk);
        let mut tape = Tape::new();
        let ids = model.register(&mut tape);
        let xid = tape.leaf(x, false);
        let logits = model.forward(&mut tape, &ids, xid, false)?;
        let labels_rc = Arc::new(labels.clone());
        let loss = tape
            .softmax_cross_entropy(logits, &labels_rc)
            .map_err(|e| TrainError::Layer(e.into()))?;
        loss_sum += tape.value(loss).item() * labels.len() as f64;
        correct += accuracy_from_logits(tape.value(logits), &labels) * labels.len() as f64;
    }
    Ok((
        correct / set.len() as f64,
        loss_sum / set.len() as f64,
    ))
}

fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
    v
}

fn snapshot(
    cfg: &ExperimentConfig,
    model: &Model,
    opt: &Optimizer,
    shuffle_rng: &ChaCha8Rng,
    sched: &ScheduleState,
    epoch: usize,
    best_eval_acc: f64,
) -> Checkpoint {
    Checkpoint {
        config_text: cfg.to_text(),
        config_hash: cfg.hash(),
        epoch,
        best_eval_acc,
        params: model.params().into_iter().cloned().collect(),
        buffers: model.buffers().into_iter().cloned().collect(),
        opt_kind: opt.kind,
        opt_t: opt.step_count,
        opt_m: opt.m.clone(),
        opt_v: opt.v.clone(),
        shuffle_word_pos: shuffle_rng.get_word_pos(),
        schedule: sched.clone(),
    }
}

/// Train from scratch.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutput, TrainError> {
    train_from(cfg, None)
}

/// Continue a checkpointed run; bit-identical to never having stopped.
pub fn resume(cfg: &ExperimentConfig, checkpoint: &Checkpoint) -> Result<TrainOutput, TrainError> {
    train_from(cfg, Some(checkpoint))
}

fn train_from(
    cfg: &ExperimentConfig,
    start: Option<&Checkpoint>,
) -> Result<TrainOutput, TrainError> {
    let g = cfg.graph.build()?;
    let (train_all, test_set) = load_dataset(cfg)?;

    // plateau schedules hold out a validation split from the training data:
    // the last 5000 images for MNIST, the last tenth otherwise
    let needs_val = matches!(cfg.schedule, Schedule::Plateau { .. });
    let (train_set, val_set) = if needs_val {
        let held = match cfg.dataset {
            DatasetSpec::Mnist { .. } => 5000.min(train_all.len() / 2),
            _ => (train_all.len() / 10).max(1),
        };
        let split_at = train_all.len() - held;
        (
            train_all.slice(0, split_at),
            Some(train_all.slice(split_at, train_all.len())),
        )
    } else {
        (train_all, None)
    };

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(0);
    let mut model = build_architecture(cfg, &g, train_set.channels, &mut init_rng)?;
    let mut opt = Optimizer::new(cfg.optimizer, &model.params());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut sched = ScheduleState::new(cfg.lr);
    let mut start_epoch = 0usize;
    let mut best_eval_acc = f64::NEG_INFINITY;

    if let Some(ck) = start {
        if ck.config_hash != cfg.hash() {
            return Err(TrainError::Checkpoint(format!(
                "checkpoint was produced by a different config (hash {:#x} vs {:#x})",
                ck.config_hash,
                cfg.hash()
            )));
        }
        for (dst, src) in model.params_mut().into_iter().zip(&ck.params) {
            dst.data_mut().copy_from_slice(src.data());
        }
        for (dst, src) in model.buffers_mut().into_iter().zip(&ck.buffers) {
            dst.copy_from_slice(src);
        }
        opt.step_count = ck.opt_t;
        opt.m = ck.opt_m.clone();
        opt.v = ck.opt_v.clone();
        shuffle_rng.set_word_pos(ck.shuffle_word_pos);
        sched = ck.schedule.clone();
        start_epoch = ck.epoch;
        best_eval_acc = ck.best_eval_acc;
    }

    // the analytic penalty path: one context per filter bank, aligned by
    // conv index; built only when the penalty is active
    let bank_ranges = model.bank_basis_param_ranges();
    let reg_contexts: Vec<(usize, std::ops::Range<usize>, RegContext)> = if cfg.reg_lambda > 0.0 {
        let mut out = Vec::new();
        for (conv_idx, range) in &bank_ranges {
            let bank_graph = &model.conv_graphs[*conv_idx];
            let banks = model.banks();
            let (_, fb) = banks
                .iter()
                .find(|(i, _)| i == conv_idx)
                .expect("range list aligns with banks");
            out.push((
                *conv_idx,
                range.clone(),
                RegContext::for_bank(bank_graph, fb, cfg.reg_lambda)?,
            ));
        }
        out
    } else {
        Vec::new()
    };

    let (init_eval_acc, init_eval_loss) = evaluate(&mut model, &test_set, cfg.batch_size)?;
    let mut best = snapshot(
        cfg,
        &model,
        &opt,
        &shuffle_rng,
        &sched,
        start_epoch,
        best_eval_acc,
    );
    let mut history = Vec::new();

    for epoch in start_epoch..cfg.epochs {
        let lr = sched.lr_for_epoch(&cfg.schedule, cfg.lr, epoch);
        let order = shuffled_indices(train_set.len(), &mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let (x, labels) = train_set.batch(chunk);
            let mut tape = Tape::new();
            let ids = model.register(&mut tape);
            let xid = tape.leaf(x, false);
            let logits = model.forward(&mut tape, &ids, xid, true)?;
            let labels_rc = Arc::new(labels.clone());
            let loss = tape
                .softmax_cross_entropy(logits, &labels_rc)
                .map_err(|e| TrainError::Layer(e.into()))?;
            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            loss_sum += loss_val * labels.len() as f64;
            acc_sum += accuracy_from_logits(tape.value(logits), &labels) * labels.len() as f64;
            seen += labels.len();
            tape.backward(loss)
                .map_err(|_| TrainError::Diverged { epoch })?;
            let mut grads: Vec<Tensor> = ids.iter().map(|id| tape.grad_or_zeros(*id)).collect();
            drop(tape);

            for (conv_idx, range, ctx) in &reg_contexts {
                let banks = model.banks();
                let (_, fb) = banks
                    .iter()
                    .find(|(i, _)| i == conv_idx)
                    .expect("bank still present");
                let penalty_grads = reg_penalty_grad(fb, ctx)?;
                for (k, gk) in penalty_grads.into_iter().enumerate() {
                    let target = &mut grads[range.start + k];
                    for (t, s) in target.data_mut().iter_mut().zip(gk.data()) {
                        *t += cfg.reg_lambda * s;
                    }
                }
            }

            let mut params = model.params_mut();
            opt.step(&mut params, &grads, lr);
        }

        let (eval_acc, _) = evaluate(&mut model, &test_set, cfg.batch_size)?;
        let val_loss = match &val_set {
            Some(vs) => Some(evaluate(&mut model, vs, cfg.batch_size)?.1),
            None => None,
        };
        let reg_value = if cfg.reg_lambda > 0.0 {
            let mut total = 0.0;
            for (conv_idx, _, ctx) in &reg_contexts {
                let banks = model.banks();
                let (_, fb) = banks.iter().find(|(i, _)| i == conv_idx).unwrap();
                total += reg_penalty(fb, ctx)?;
            }
            total
        } else {
            0.0
        };
        history.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_acc: acc_sum / seen as f64,
            eval_acc,
            reg_value,
            lr,
            val_loss,
        });
        if let Some(vl) = val_loss {
            sched.observe_val_loss(&cfg.schedule, vl);
        }
        if eval_acc > best_eval_acc {
            best_eval_acc = eval_acc;
            best = snapshot(
                cfg,
                &model,
                &opt,
                &shuffle_rng,
                &sched,
                epoch + 1,
                best_eval_acc,
            );
        }
    }

    let last = snapshot(
        cfg,
        &model,
        &opt,
        &shuffle_rng,
        &sched,
        cfg.epochs,
        best_eval_acc,
    );
    Ok(TrainOutput {
        config: cfg.clone(),
        model,
        history,
        init_eval_acc,
        init_eval_loss,
        best_eval_acc: best_eval_acc.max(init_eval_acc).max(f64::MIN),
        best,
        last,
    })
}

// ---------------------------------------------------------------------------
// Checkpoint serialization
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"L3CKPT01";

fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> std::io::Result<()> {
    w.write_all(&[t.shape().len() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor, TrainError> {
    let mut b1 = [0u8; 1];
    r.read_exact(&mut b1)?;
    let ndim = b1[0] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        shape.push(u32::from_le_bytes(b4) as usize);
    }
    let len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(len);
    let mut b8 = [0u8; 8];
    for _ in 0..len {
        r.read_exact(&mut b8)?;
        data.push(f64::from_le_bytes(b8));
    }
    Ok(Tensor::from_vec(&shape, data))
}

impl Checkpoint {
    pub fn save<W: Write>(&self, w: &mut W) -> Result<(), TrainError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        let text = self.config_text.as_bytes();
        w.write_all(&(text.len() as u32).to_le_bytes())?;
        w.write_all(text)?;
        w.write_all(&self.config_hash.to_le_bytes())?;
        w.write_all(&(self.epoch as u32).to_le_bytes())?;
        w.write_all(&self.best_eval_acc.to_le_bytes())?;
        w.write_all(&self.shuffle_word_pos.to_le_bytes())?;
        w.write_all(&self.schedule.current_lr.to_le_bytes())?;
        w.write_all(&self.schedule.best_val.to_le_bytes())?;
        w.write_all(&(self.schedule.since_best as u32).to_le_bytes())?;
        w.write_all(&[match self.opt_kind {
            OptimizerKind::Adam => 0u8,
            OptimizerKind::Sgd => 1u8,
        }])?;
        w.write_all(&self.opt_t.to_le_bytes())?;
        let sections: [&[Tensor]; 3] = [&self.params, &self.opt_m, &self.opt_v];
        for sec in sections {
            w.write_all(&(sec.len() as u32).to_le_bytes())?;
            for t in sec {
                write_tensor(w, t)?;
            }
        }
        w.write_all(&(self.buffers.len() as u32).to_le_bytes())?;
        for buf in &self.buffers {
            w.write_all(&(buf.len() as u32).to_le_bytes())?;
            for v in buf {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self, TrainError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(TrainError::Checkpoint("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        let mut b16 = [0u8; 16];
        r.read_exact(&mut b4)?;
        let text_len = u32::from_le_bytes(b4) as usize;
        let mut text = vec![0u8; text_len];
        r.read_exact(&mut text)?;
        let config_text =
            String::from_utf8(text).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        r.read_exact(&mut b8)?;
        let config_hash = u64::from_le_bytes(b8);
        r.read_exact(&mut b4)?;
        let epoch = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b8)?;
        let best_eval_acc = f64::from_le_bytes(b8);
        r.read_exact(&mut b16)?;
        let shuffle_word_pos = u128::from_le_bytes(b16);
        r.read_exact(&mut b8)?;
        let current_lr = f64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let best_val = f64::from_le_bytes(b8);
        r.read_exact(&mut b4)?;
        let since_best = u32::from_le_bytes(b4) as usize;
        let mut b1 = [0u8; 1];
        r.read_exact(&mut b1)?;
        let opt_kind = match b1[0] {
            0 => OptimizerKind::Adam,
            1 => OptimizerKind::Sgd,
            other => {
                return Err(TrainError::Checkpoint(format!(
                    "unknown optimizer tag {other}"
                )))
            }
        };
        r.read_exact(&mut b8)?;
        let opt_t = u64::from_le_bytes(b8);
        let read_section = |r: &mut R| -> Result<Vec<Tensor>, TrainError> {
            let mut b4 = [0u8; 4];
            r.read_exact(&mut b4)?;
            let count = u32::from_le_bytes(b4) as usize;
            (0..count).map(|_| read_tensor(r)).collect()
        };
        let params = read_section(r)?;
        let opt_m = read_section(r)?;
        let opt_v = read_section(r)?;
        r.read_exact(&mut b4)?;
        let buf_count = u32::from_le_bytes(b4) as usize;
        let mut buffers = Vec::with_capacity(buf_count);
        for _ in 0..buf_count {
            r.read_exact(&mut b4)?;
            let len = u32::from_le_bytes(b4) as usize;
            let mut buf = Vec::with_capacity(len);
            for _ in 0..len {
                r.read_exact(&mut b8)?;
                buf.push(f64::from_le_bytes(b8));
            }
            buffers.push(buf);
        }
        Ok(Checkpoint {
            config_text,
            config_hash,
            epoch,
            best_eval_acc,
            params,
            buffers,
            opt_kind,
            opt_t,
            opt_m,
            opt_v,
            shuffle_word_pos,
            schedule: ScheduleState {
                current_lr,
                best_val,
                since_best,
            },
        })
    }

    /// Rebuild the model this checkpoint describes and load its weights.
    pub fn restore_model(&self) -> Result<(ExperimentConfig, Model), TrainError> {
        let cfg = ExperimentConfig::parse(&self.config_text)?;
        let g = cfg.graph.build()?;
        let channels = 1; // both shipped dataset families are single-channel
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(0);
        let mut model = build_architecture(&cfg, &g, channels, &mut rng)?;
        for (dst, src) in model.params_mut().into_iter().zip(&self.params) {
            if dst.shape() != src.shape() {
                return Err(TrainError::Checkpoint(format!(
                    "parameter shape mismatch: {:?} vs {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        for (dst, src) in model.buffers_mut().into_iter().zip(&self.buffers) {
            dst.copy_from_slice(src);
        }
        Ok((cfg, model))
    }
}

// ---------------------------------------------------------------------------
// Metrics files and sweeps
// ---------------------------------------------------------------------------

pub fn write_metrics_csv<W: Write>(w: &mut W, history: &[EpochMetrics]) -> std::io::Result<()> {
    writeln!(w, "epoch,train_loss,train_acc,eval_acc,reg_value")?;
    for m in history {
        writeln!(
            w,
            "{},{},{},{},{}",
            m.epoch, m.train_loss, m.train_acc, m.eval_acc, m.reg_value
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub config_hash: String,
    pub best_eval_acc: f64,
    pub final_eval_acc: f64,
    pub epochs: usize,
}

pub fn run_result(out: &TrainOutput) -> RunResult {
    RunResult {
        config_hash: format!("{:016x}", out.config.hash()),
        best_eval_acc: out.best_eval_acc,
        final_eval_acc: out.history.last().map(|m| m.eval_acc).unwrap_or(out.init_eval_acc),
        epochs: out.history.len(),
    }
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub seeds: Vec<u64>,
    pub entries: Vec<(String, ExperimentConfig)>,
}

impl SweepSpec {
    /// Sweep file: `seeds = 0;1;2` plus one `config = path` line per row;
    /// paths resolve relative to `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, TrainError> {
        let mut seeds = vec![0u64];
        let mut entries = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(TrainError::Config(
                ConfigError::Parse {
                    line: idx + 1,
                    msg: "expected `key = value`".into(),
                },
            ))?;
            match k.trim() {
                "seeds" => {
                    seeds = v
                        .trim()
                        .split(';')
                        .map(|t| {
                            t.trim().parse::<u64>().map_err(|_| {
                                TrainError::Config(ConfigError::BadValue {
                                    key: "seeds".into(),
                                    msg: format!("bad seed {t}"),
                                })
                            })
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                }
                "config" => {
                    let path = base_dir.join(v.trim());
                    let text = std::fs::read_to_string(&path)?;
                    let cfg = ExperimentConfig::parse(&text)?;
                    let name = path
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| format!("row{}", entries.len()));
                    entries.push((name, cfg));
                }
                other => {
                    return Err(TrainError::Config(ConfigError::Parse {
                        line: idx + 1,
                        msg: format!("unknown sweep key `{other}`"),
                    }))
                }
            }
        }
        Ok(Self { seeds, entries })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub name: String,
    pub accs: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Run every config x seed combination; per-row mean and sample std of the
/// best test accuracy. Writes results.csv / results.json plus per-run
/// metrics under `out_dir` when given.
pub fn run_table(spec: &SweepSpec, out_dir: Option<&Path>) -> Result<Vec<SweepRow>, TrainError> {
    let mut rows = Vec::new();
    for (name, base_cfg) in &spec.entries {
        let mut accs = Vec::new();
        for &seed in &spec.seeds {
            let mut cfg = base_cfg.clone();
            cfg.seed = seed;
            let out = train(&cfg)?;
            if let Some(dir) = out_dir {
                let run_dir = dir.join(format!("{name}_seed{seed}"));
                std::fs::create_dir_all(&run_dir)?;
                let mut f = std::fs::File::create(run_dir.join("metrics.csv"))?;
                write_metrics_csv(&mut f, &out.history)?;
                let mut f = std::fs::File::create(run_dir.join("result.json"))?;
                serde_json::to_writer_pretty(&mut f, &run_result(&out))
                    .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
                let mut f = std::fs::File::create(run_dir.join("best.ckpt"))?;
                out.best.save(&mut f)?;
            }
            accs.push(out.best_eval_acc);
        }
        let mean = accs.iter().sum::<f64>() / accs.len().max(1) as f64;
        let std = if accs.len() > 1 {
            (accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>()
                / (accs.len() - 1) as f64)
                .sqrt()
        } else {
            0.0
        };
        rows.push(SweepRow {
            name: name.clone(),
            accs,
            mean,
            std,
        });
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let mut csv = String::from("name,mean,std,accs\n");
        for row in &rows {
            let accs = row
                .accs
                .iter()
                .map(|a| a.to_string())
                .collect::<Vec<_>>()
                .join(";");
            csv.push_str(&format!("{},{},{},{}\n", row.name, row.mean, row.std, accs));
        }
        std::fs::write(dir.join("results.csv"), csv)?;
        let json = serde_json::to_string_pretty(&rows)
            .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        std::fs::write(dir.join("results.json"), json)?;
    }
    Ok(rows)
}
