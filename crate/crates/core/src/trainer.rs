//! Quantization-aware training: cross-entropy, Adam, the multi-step learning
//! rate schedule, per-epoch checkpoints and the CSV training log.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;

use crate::container::Container;
use crate::datasets::{batches, DatasetHandle, Split};
use crate::error::{Error, Result};
use crate::model::{NetworkSpec, QuantMode};
use crate::numerics::{argmax, Rng, RngState, Tensor};

pub const CHECKPOINT_KIND: &str = "checkpoint";
pub const CHECKPOINT_FILE: &str = "checkpoint.qnnc";
pub const LOG_FILE: &str = "train_log.csv";
pub const LOG_HEADER: &str = "epoch,lr,train_loss,test_error,seconds";
const EVAL_CHUNK: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub quant: QuantMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lr_milestones: vec![90, 95],
            lr_gamma: 0.1,
            batch_size: 100,
            seed: 0,
            quant: QuantMode::Quantized,
        }
    }
}

impl TrainConfig {
    /// Default recipe shortened to `epochs`; milestones that would never be
    /// reached are dropped.
    pub fn for_epochs(epochs: usize, seed: u64) -> Self {
        let base = Self::default();
        Self {
            epochs,
            seed,
            lr_milestones: base.lr_milestones.iter().copied().filter(|&m| m < epochs).collect(),
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::arg("epochs must be at least 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::arg(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch size must be at least 1"));
        }
        if !self.lr_milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::arg("lr milestones must be strictly increasing"));
        }
        if self.lr_milestones.last().is_some_and(|&m| m >= self.epochs) {
            return Err(Error::arg("lr milestones must be below the epoch count"));
        }
        Ok(())
    }
}

/// Learning rate used during 0-based `epoch`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let passed = cfg.lr_milestones.iter().filter(|&&m| m <= epoch).count();
    let mut lr = cfg.lr;
    for _ in 0..passed {
        lr *= cfg.lr_gamma;
    }
    lr
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = (logits.rows(), logits.cols());
    if labels.len() != n {
        return Err(Error::shape(format!("{n} logit rows but {} labels", labels.len())));
    }
    let mut grad = Vec::with_capacity(n * k);
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::arg(format!("label {label} outside 0..{k}")));
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss += sum.ln() - (row[label] - max);
        for (c, e) in exps.iter().enumerate() {
            let onehot = if c == label { 1.0 } else { 0.0 };
            grad.push((e / sum - onehot) / n as f64);
        }
    }
    Ok((loss / n as f64, Tensor::new(logits.shape().to_vec(), grad)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(net: &NetworkSpec) -> Result<Self> {
        let zeros = net
            .parameters()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        })
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::shape("parameter, gradient and optimizer state counts differ"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        if p.shape() != g.shape() {
            return Err(Error::shape("gradient shape differs from parameter"));
        }
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// Loss and parameter gradients of one train-mode batch. Running statistics
/// are left untouched.
pub fn batch_gradients(
    net: &NetworkSpec,
    images: &Tensor,
    labels: &[usize],
    quant: QuantMode,
    rng: &mut Rng,
) -> Result<(f64, Vec<Tensor>)> {
    let (logits, tape) = net.forward_train(images, quant, rng)?;
    let (loss, grad) = cross_entropy(&logits, labels)?;
    Ok((loss, net.backward(&tape, &grad)?))
}

/// Test error in percent, classifying by argmax of the eval-mode logits.
pub fn evaluate(net: &NetworkSpec, split: &Split) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::arg("cannot evaluate on an empty test set"));
    }
    let idx: Vec<usize> = (0..split.len()).collect();
    let mut wrong = 0usize;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = split.gather(chunk)?;
        let logits = net.forward_eval(&x)?;
        for (r, &label) in y.iter().enumerate() {
            if argmax(logits.row(r))? != label {
                wrong += 1;
            }
        }
    }
    Ok(100.0 * wrong as f64 / split.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// Completed epochs (1-based).
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_error: f64,
    pub seconds: f64,
}

impl EpochRecord {
    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{:.3}",
            self.epoch, self.lr, self.train_loss, self.test_error, self.seconds
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn final_test_error(&self) -> Option<f64> {
        self.records.last().map(|r| r.test_error)
    }

    pub fn best_test_error(&self) -> Option<f64> {
        self.records.iter().map(|r| r.test_error).reduce(f64::min)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{LOG_HEADER}\n");
        for r in &self.records {
            s.push_str(&r.csv_line());
            s.push('\n');
        }
        s
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let mut records = Vec::new();
        for row in reader.records() {
            let row = row?;
            let offset = row.position().map_or(0, |p| p.byte());
            let field = |i: usize| -> Result<f64> {
                row.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::parse(offset, format!("bad log field {i}")))
            };
            records.push(EpochRecord {
                epoch: field(0)? as usize,
                lr: field(1)?,
                train_loss: field(2)?,
                test_error: field(3)?,
                seconds: field(4)?,
            });
        }
        Ok(Self { records })
    }
}

/// Resumable training state at an epoch boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub net: NetworkSpec,
    pub adam: AdamState,
    pub rng: RngState,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn to_container(&self) -> Container {
        let mut c = Container::new(CHECKPOINT_KIND);
        self.net.write_into(&mut c);
        c.set("epoch", self.epoch);
        c.set("rng_seed", self.rng.seed);
        c.set("rng_word_pos", self.rng.word_pos);
        c.set("adam_step", self.adam.step);
        for (i, (m, v)) in self.adam.first.iter().zip(&self.adam.second).enumerate() {
            c.push_f64(format!("adam.m.{i}"), m.shape(), m.data().to_vec());
            c.push_f64(format!("adam.v.{i}"), v.shape(), v.data().to_vec());
        }
        let hist: Vec<f64> = self
            .history
            .iter()
            .flat_map(|r| [r.epoch as f64, r.lr, r.train_loss, r.test_error, r.seconds])
            .collect();
        if !hist.is_empty() {
            c.push_f64("history", &[self.history.len(), 5], hist);
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind() != CHECKPOINT_KIND {
            return Err(c.malformed(format!("expected a checkpoint, found `{}`", c.kind())));
        }
        let net = NetworkSpec::read_from(c)?;
        let n_params = net.parameters().len();
        let mut first = Vec::with_capacity(n_params);
        let mut second = Vec::with_capacity(n_params);
        for i in 0..n_params {
            for (key, out) in [("m", &mut first), ("v", &mut second)] {
                let (shape, data) = c.f64(&format!("adam.{key}.{i}"))?;
                out.push(Tensor::new(shape.to_vec(), data.to_vec())?);
            }
        }
        let epoch: usize = c.parse_key("epoch")?;
        let history = if epoch == 0 {
            Vec::new()
        } else {
            let (_, h) = c.f64("history")?;
            h.chunks_exact(5)
                .map(|r| EpochRecord {
                    epoch: r[0] as usize,
                    lr: r[1],
                    train_loss: r[2],
                    test_error: r[3],
                    seconds: r[4],
                })
                .collect()
        };
        Ok(Self {
            epoch,
            net,
            adam: AdamState {
                step: c.parse_key("adam_step")?,
                first,
                second,
            },
            rng: RngState {
                seed: c.parse_key("rng_seed")?,
                word_pos: c.parse_key("rng_word_pos")?,
            },
            history,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

/// Where and how a training run persists its progress.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory receiving `checkpoint.qnnc` and `train_log.csv`.
    pub out_dir: Option<PathBuf>,
    /// Also keep `checkpoint-epoch-NNN.qnnc` for every epoch.
    pub keep_all_checkpoints: bool,
    /// Stop (as if interrupted) once this many epochs are complete.
    pub stop_after: Option<usize>,
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: &'a DatasetHandle,
    opts: TrainOptions,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: &'a DatasetHandle, opts: TrainOptions) -> Result<Self> {
        cfg.validate()?;
        if data.train.is_empty() || data.test.is_empty() {
            return Err(Error::arg("dataset needs non-empty train and test splits"));
        }
        Ok(Self { cfg, data, opts })
    }

    /// Trains a freshly built network from epoch 0.
    pub fn run(&self, net: NetworkSpec) -> Result<(NetworkSpec, TrainLog)> {
        let start = Checkpoint {
            epoch: 0,
            adam: AdamState::new(&net)?,
            net,
            rng: Rng::new(self.cfg.seed).state(),
            history: Vec::new(),
        };
        self.resume(start)
    }

    /// Continues from `ckpt` until `cfg.epochs` (or the stop point).
    pub fn resume(&self, ckpt: Checkpoint) -> Result<(NetworkSpec, TrainLog)> {
        let Checkpoint {
            epoch: start,
            mut net,
            mut adam,
            rng,
            mut history,
        } = ckpt;
        if self.data.train.features() != net.input_features() {
            return Err(Error::shape(format!(
                "dataset has {} features, network expects {}",
                self.data.train.features(),
                net.input_features()
            )));
        }
        let mut rng = Rng::from_state(rng);
        if let Some(dir) = &self.opts.out_dir {
            fs::create_dir_all(dir)?;
            let log = TrainLog {
                records: history.clone(),
            };
            fs::write(dir.join(LOG_FILE), log.to_csv())?;
        }

        for epoch in start..self.cfg.epochs {
            if self.opts.stop_after.is_some_and(|s| epoch >= s) {
                break;
            }
            let timer = Instant::now();
            let lr = lr_at(epoch, &self.cfg);
            let mut loss_sum = 0.0;
            for (x, y) in batches(&self.data.train, self.cfg.batch_size, &mut rng)? {
                let diverged = |loss: f64| Error::Diverged { epoch: epoch + 1, loss };
                let (loss, grads, tape) = {
                    let (logits, tape) = net
                        .forward_train(&x, self.cfg.quant, &mut rng)
                        .map_err(|e| match e {
                            Error::NonFinite(_) => diverged(f64::NAN),
                            other => other,
                        })?;
                    let (loss, grad) = cross_entropy(&logits, &y)?;
                    if !loss.is_finite() {
                        return Err(diverged(loss));
                    }
                    (loss, net.backward(&tape, &grad)?, tape)
                };
                net.apply_batch_stats(&tape);
                adam_step(&mut net.parameters_mut(), &grads, &mut adam, lr, &self.cfg)?;
                loss_sum += loss * x.rows() as f64;
            }
            let train_loss = loss_sum / self.data.train.len() as f64;
            let test_error = evaluate(&net, &self.data.test).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged {
                    epoch: epoch + 1,
                    loss: train_loss,
                },
                other => other,
            })?;
            let record = EpochRecord {
                epoch: epoch + 1,
                lr,
                train_loss,
                test_error,
                seconds: timer.elapsed().as_secs_f64(),
            };
            info!(
                "{} epoch {} lr {} loss {:.5} test error {:.2}%",
                net.name, record.epoch, lr, train_loss, test_error
            );
            history.push(record.clone());

            if let Some(dir) = &self.opts.out_dir {
                let ckpt = Checkpoint {
                    epoch: epoch + 1,
                    net: net.clone(),
                    adam: adam.clone(),
                    rng: rng.state(),
                    history: history.clone(),
                };
                let c = ckpt.to_container();
                c.write(dir.join(CHECKPOINT_FILE))?;
                if self.opts.keep_all_checkpoints {
                    c.write(dir.join(format!("checkpoint-epoch-{:03}.qnnc", epoch + 1)))?;
                }
                let mut f = OpenOptions::new().append(true).open(dir.join(LOG_FILE))?;
                writeln!(f, "{}", record.csv_line())?;
            }
        }
        Ok((net, TrainLog { records: history }))
    }
}

/// Trains `net` on `data` with `cfg`, without persisting anything.
pub fn train(net: NetworkSpec, data: &DatasetHandle, cfg: &TrainConfig) -> Result<(NetworkSpec, TrainLog)> {
    Trainer::new(cfg.clone(), data, TrainOptions::default())?.run(net)
}
