//! Adam, gradient clipping, checkpoints and the training loop.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::config::ModelConfig;
use crate::container::{round_f32, Container};
use crate::data::{make_batch, make_source_batch, MultiDocExample};
use crate::decode::{greedy_generate, strip_stop, GenerationConfig};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::model::Seq2Seq;
use crate::params::ParamStore;
use crate::rouge::{self, RougeScore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    /// Evaluate (and checkpoint) every this many steps; `0` only at the end.
    pub eval_every: u64,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 0,
            weight_decay: 0.0,
            clip_norm: 1.0,
            batch_size: 8,
            max_steps: 2000,
            seed: 0,
            eval_every: 0,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be finite and >= 0", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} {b} outside [0, 1)"));
            }
        }
        if self.eps <= 0.0 {
            return bad(format!("eps {} must be positive", self.eps));
        }
        if self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            return bad("weight_decay and clip_norm must be >= 0".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("learning_rate", self.learning_rate);
        kv.set("beta1", self.beta1);
        kv.set("beta2", self.beta2);
        kv.set("eps", self.eps);
        kv.set("warmup_steps", self.warmup_steps);
        kv.set("weight_decay", self.weight_decay);
        kv.set("clip_norm", self.clip_norm);
        kv.set("batch_size", self.batch_size);
        kv.set("max_steps", self.max_steps);
        kv.set("seed", self.seed);
        kv.set("eval_every", self.eval_every);
        if let Some(p) = &self.checkpoint_path {
            kv.set("checkpoint_path", p.display());
        }
        kv
    }

    pub fn from_kv(kv: &KvMap, base: &TrainConfig) -> Result<Self> {
        Ok(TrainConfig {
            learning_rate: kv.get_or("learning_rate", base.learning_rate)?,
            beta1: kv.get_or("beta1", base.beta1)?,
            beta2: kv.get_or("beta2", base.beta2)?,
            eps: kv.get_or("eps", base.eps)?,
            warmup_steps: kv.get_or("warmup_steps", base.warmup_steps)?,
            weight_decay: kv.get_or("weight_decay", base.weight_decay)?,
            clip_norm: kv.get_or("clip_norm", base.clip_norm)?,
            batch_size: kv.get_or("batch_size", base.batch_size)?,
            max_steps: kv.get_or("max_steps", base.max_steps)?,
            seed: kv.get_or("seed", base.seed)?,
            eval_every: kv.get_or("eval_every", base.eval_every)?,
            checkpoint_path: kv
                .get::<PathBuf>("checkpoint_path")?
                .or_else(|| base.checkpoint_path.clone()),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect()
        };
        OptimizerState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// Global L2 norm of `grads`.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// One bias-corrected Adam update. Parameters and moments are rounded to
/// f32 after the update, the precision checkpoints store, so a resumed run
/// continues from exactly the in-memory state.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Validation(format!(
            "adam_step: {} parameters, {} gradients, {}/{} moments",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
    }
    state.step += 1;
    let t = state.step;
    let lr = if cfg.warmup_steps > 0 {
        cfg.learning_rate * (t as f64 / cfg.warmup_steps as f64).min(1.0)
    } else {
        cfg.learning_rate
    };
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j] + cfg.weight_decay * *x;
            m[j] = round_f32(cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj);
            v[j] = round_f32(cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj);
            let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
            *x = round_f32(*x - update);
        }
    }
    Ok(())
}

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Seq2Seq,
    pub train: TrainConfig,
    pub optimizer: OptimizerState,
}

pub fn checkpoint_container(model: &Seq2Seq, opt: &OptimizerState, train: &TrainConfig) -> Container {
    let mut kv = KvMap::new();
    kv.set("kind", "checkpoint");
    kv.set("checkpoint_format", CHECKPOINT_FORMAT);
    kv.set("step", opt.step);
    kv.merge(&model.config().to_kv().with_prefix("model."));
    kv.merge(&train.to_kv().with_prefix("train."));
    let mut c = Container::new(kv);
    for (name, t) in model.params().iter() {
        c.push(format!("param/{name}"), t.clone());
    }
    for (name, t) in model.params().names().iter().zip(&opt.m) {
        c.push(format!("adam_m/{name}"), t.clone());
    }
    for (name, t) in model.params().names().iter().zip(&opt.v) {
        c.push(format!("adam_v/{name}"), t.clone());
    }
    c
}

pub fn save_checkpoint(
    model: &Seq2Seq,
    opt: &OptimizerState,
    train: &TrainConfig,
    path: &Path,
) -> Result<()> {
    checkpoint_container(model, opt, train).save(path)
}

fn config_diff(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    let (ka, kb) = (a.to_kv(), b.to_kv());
    ka.keys()
        .filter(|k| ka.get_str(k) != kb.get_str(k))
        .map(|k| {
            format!(
                "{k}: checkpoint {} vs expected {}",
                ka.get_str(k).unwrap_or("?"),
                kb.get_str(k).unwrap_or("?")
            )
        })
        .collect()
}

pub fn checkpoint_from_container(mut c: Container, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let kv = c.header.clone();
    if kv.get_str("kind") != Some("checkpoint") {
        return Err(Error::Checkpoint("container is not a checkpoint".into()));
    }
    let format: u32 = kv.get_or("checkpoint_format", 0)?;
    if format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "checkpoint format {format} is not supported (expected {CHECKPOINT_FORMAT})"
        )));
    }
    let model_kv = kv.strip_prefix("model.");
    let config = ModelConfig::from_kv(&model_kv, &ModelConfig::default())?;
    if let Some(key) = ModelConfig::default().to_kv().keys().find(|k| !model_kv.contains(k)) {
        return Err(Error::Checkpoint(format!("checkpoint header lacks `model.{key}`")));
    }
    if let Some(exp) = expected {
        let diff = config_diff(&config, exp);
        if !diff.is_empty() {
            return Err(Error::Config(format!(
                "checkpoint config mismatch: {}",
                diff.join("; ")
            )));
        }
    }
    let train = TrainConfig::from_kv(&kv.strip_prefix("train."), &TrainConfig::default())?;
    let step: u64 = kv.get_or("step", 0)?;
    let names: Vec<String> = ParamStore::init(&config, 0)?.names().to_vec();
    let mut tensors = Vec::with_capacity(names.len());
    let mut m = Vec::with_capacity(names.len());
    let mut v = Vec::with_capacity(names.len());
    for n in &names {
        tensors.push(c.take(&format!("param/{n}"))?);
        m.push(c.take(&format!("adam_m/{n}"))?);
        v.push(c.take(&format!("adam_v/{n}"))?);
    }
    if let Some((extra, _)) = c.tensors.first() {
        return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
    }
    let params = ParamStore::from_parts(names, tensors)?;
    for ((name, p), (mm, vv)) in params.iter().zip(m.iter().zip(&v)) {
        if mm.shape() != p.shape() || vv.shape() != p.shape() {
            return Err(Error::Checkpoint(format!("moment shape mismatch for `{name}`")));
        }
    }
    Ok(Checkpoint {
        model: Seq2Seq::new(config, params)?,
        train,
        optimizer: OptimizerState { step, m, v },
    })
}

/// Loads a checkpoint; with `expected`, the embedded model config must match.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    checkpoint_from_container(Container::load(path)?, expected)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRecord {
    pub step: u64,
    pub eval_loss: f64,
    pub token_accuracy: f64,
    pub exact_match: f64,
    pub rouge: RougeScore,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

/// Teacher-forced loss/accuracy and greedy exact match + ROUGE over `examples`.
pub fn evaluate(
    model: &Seq2Seq,
    examples: &[MultiDocExample],
    gen: &GenerationConfig,
    batch_size: usize,
    step: u64,
) -> Result<EvalRecord> {
    if examples.is_empty() {
        return Err(Error::Validation("evaluation set is empty".into()));
    }
    let bc = model.config().batch_config();
    let mut loss_sum = 0.0;
    let mut tokens = 0usize;
    let mut correct = 0usize;
    let mut exact = 0usize;
    let mut scores = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let batch = make_batch(chunk, &bc)?;
        let n_labels = batch.labels.iter().filter(|&&l| l != crate::vocab::PAD).count();
        loss_sum += model.loss(&batch)? * n_labels as f64;
        let (c, t) = model.token_accuracy(&batch)?;
        correct += c;
        tokens += t;
        let docs: Vec<&[Vec<usize>]> = chunk.iter().map(|e| e.documents.as_slice()).collect();
        let src = make_source_batch(&docs, &bc)?;
        let out = greedy_generate(model, &src, gen, false)?;
        for (seq, ex) in out.sequences.iter().zip(chunk) {
            let hyp = strip_stop(seq, gen);
            let reference = &ex.summary[..ex.summary.len().min(bc.tgt_trunc - 1)];
            if hyp == reference {
                exact += 1;
            }
            scores.push(rouge::score(&hyp, reference));
        }
    }
    Ok(EvalRecord {
        step,
        eval_loss: loss_sum / tokens as f64,
        token_accuracy: correct as f64 / tokens as f64,
        exact_match: exact as f64 / examples.len() as f64,
        rouge: rouge::corpus_mean(&scores),
    })
}

/// Model plus optimizer state; every step is a pure function of the state
/// and the seed, so a checkpointed trainer resumes exactly.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Seq2Seq,
    pub optimizer: OptimizerState,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(model: Seq2Seq, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = OptimizerState::new(model.params());
        Ok(Trainer {
            model,
            optimizer,
            config,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            model: ck.model,
            optimizer: ck.optimizer,
            config,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.optimizer.step
    }

    /// Example indices of the batch at `step`: epochs walk a permutation
    /// seeded by `(seed, epoch)`.
    pub fn batch_indices(&self, step: u64, n: usize) -> Vec<usize> {
        let bs = self.config.batch_size as u64;
        let mut cached: Option<(u64, Vec<usize>)> = None;
        (0..bs)
            .map(|i| {
                let j = step * bs + i;
                let epoch = j / n as u64;
                if cached.as_ref().map(|c| c.0) != Some(epoch) {
                    let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
                    rng.set_stream(epoch);
                    let mut perm: Vec<usize> = (0..n).collect();
                    perm.shuffle(&mut rng);
                    cached = Some((epoch, perm));
                }
                cached.as_ref().expect("set above").1[(j % n as u64) as usize]
            })
            .collect()
    }

    /// Runs one optimization step on the next batch of `train`.
    pub fn step(&mut self, train: &[MultiDocExample]) -> Result<StepRecord> {
        if train.is_empty() {
            return Err(Error::Validation("training set is empty".into()));
        }
        let step = self.optimizer.step;
        let batch: Vec<MultiDocExample> = self
            .batch_indices(step, train.len())
            .into_iter()
            .map(|i| train[i].clone())
            .collect();
        let batch = make_batch(&batch, &self.model.config().batch_config())?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed_d809);
        rng.set_stream(step);
        let (loss, mut grads) = self.model.loss_and_grads(&batch, Some(&mut rng))?;
        for (g, name) in grads.iter().zip(self.model.params().names()) {
            if !g.all_finite() {
                return Err(Error::NonFinite(name.clone()));
            }
        }
        let grad_norm = clip_global_norm(&mut grads, self.config.clip_norm);
        adam_step(self.model.params_mut(), &grads, &mut self.optimizer, &self.config)?;
        Ok(StepRecord {
            step,
            loss,
            grad_norm,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.model, &self.optimizer, &self.config, path)
    }

    /// Trains until `max_steps`, evaluating and checkpointing every
    /// `eval_every` steps and at the end. Metrics go to `log` as JSONL.
    pub fn run(
        &mut self,
        train: &[MultiDocExample],
        eval: &[MultiDocExample],
        gen: &GenerationConfig,
        mut log: Option<&mut dyn Write>,
    ) -> Result<TrainReport> {
        let mut report = TrainReport::default();
        let emit = |log: &mut Option<&mut dyn Write>, v: serde_json::Value| -> Result<()> {
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{v}").map_err(|e| Error::io("metrics log", e))?;
            }
            Ok(())
        };
        while self.optimizer.step < self.config.max_steps {
            let rec = self.step(train)?;
            emit(
                &mut log,
                json!({"step": rec.step, "loss": rec.loss, "grad_norm": rec.grad_norm}),
            )?;
            report.steps.push(rec);
            let done = self.optimizer.step;
            let periodic = self.config.eval_every > 0 && done.is_multiple_of(self.config.eval_every);
            if periodic || done == self.config.max_steps {
                if !eval.is_empty() {
                    let e = evaluate(&self.model, eval, gen, self.config.batch_size.max(16), done)?;
                    emit(
                        &mut log,
                        json!({
                            "step": done,
                            "loss": report.steps.last().map(|s| s.loss),
                            "eval_loss": e.eval_loss,
                            "token_accuracy": e.token_accuracy,
                            "exact_match": e.exact_match,
                            "rouge1": e.rouge.rouge1.f1,
                            "rouge2": e.rouge.rouge2.f1,
                            "rougeL": e.rouge.rouge_l.f1,
                        }),
                    )?;
                    report.evals.push(e);
                }
                if let Some(path) = &self.config.checkpoint_path {
                    self.save(path)?;
                }
            }
        }
        Ok(report)
    }
}

/// Fresh model from `model_cfg`, initialized with the training seed, trained
/// to `train_cfg.max_steps`.
pub fn train_loop(
    model_cfg: ModelConfig,
    train: &[MultiDocExample],
    eval: &[MultiDocExample],
    train_cfg: TrainConfig,
    gen: &GenerationConfig,
    log: Option<&mut dyn Write>,
) -> Result<(Trainer, TrainReport)> {
    if train.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let model = Seq2Seq::init(model_cfg, train_cfg.seed)?;
    let mut trainer = Trainer::new(model, train_cfg)?;
    let report = trainer.run(train, eval, gen, log)?;
    Ok((trainer, report))
}
