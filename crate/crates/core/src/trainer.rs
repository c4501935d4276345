//! Adam training with an inverse-square-root schedule, early stopping on
//! dev loss and averaging of the checkpoints following the best one.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::model::{Mode, Model, ParamStore, TrainWindow};
use crate::objective::LossConfig;
use crate::tape::{Gradients, Mat};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_lr: f64,
    pub warmup_steps: usize,
    /// Approximate source plus target tokens per batch.
    pub batch_tokens: usize,
    /// Consecutive non-improving validations tolerated.
    pub patience: usize,
    pub validate_every: usize,
    pub average_n: usize,
    pub seed: u64,
    pub max_steps: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub loss: LossConfig,
    /// Windows share a dropout seed and are summed in this fixed grouping,
    /// so results do not depend on the number of threads.
    pub grad_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_lr: 1e-3,
            warmup_steps: 4000,
            batch_tokens: 2048,
            patience: 12,
            validate_every: 200,
            average_n: 5,
            seed: 1,
            max_steps: 100_000,
            clip_norm: Some(1.0),
            loss: LossConfig::default(),
            grad_chunk: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.warmup_steps == 0 {
            return Err(Error::Config("warmup must be at least one step".into()));
        }
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return Err(Error::Config(format!("max_lr {} must be positive", self.max_lr)));
        }
        if self.batch_tokens == 0 || self.validate_every == 0 || self.average_n == 0 || self.grad_chunk == 0 {
            return Err(Error::Config(
                "batch_tokens, validate_every, average_n and grad_chunk must be positive".into(),
            ));
        }
        if self.clip_norm.is_some_and(|c| c <= 0.0) {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        Ok(())
    }
}

/// `scale · d^-0.5 · min(step^-0.5, step · warmup^-1.5)` with the scale
/// putting the peak at `step = warmup` exactly on `max_lr`.
pub fn lr_schedule(step: usize, warmup: usize, max_lr: f64, d_model: usize) -> Result<f64> {
    if warmup == 0 {
        return Err(Error::Config("warmup must be at least one step".into()));
    }
    if step == 0 {
        return Err(Error::Config("steps count from 1".into()));
    }
    let d = (d_model as f64).powf(-0.5);
    let w = warmup as f64;
    let s = step as f64;
    let scale = max_lr / (d * w.powf(-0.5));
    Ok(scale * d * s.powf(-0.5).min(s * w.powf(-1.5)))
}

/// Stops after `patience` consecutive validations without a strict
/// improvement over the best loss so far.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<(usize, f64)>,
    pub seen: usize,
    bad: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            seen: 0,
            bad: 0,
        }
    }

    /// Records a validation loss; true when training should stop.
    pub fn observe(&mut self, loss: f64) -> bool {
        let idx = self.seen;
        self.seen += 1;
        match self.best {
            Some((_, b)) if loss >= b => self.bad += 1,
            _ => {
                self.best = Some((idx, loss));
                self.bad = 0;
            }
        }
        self.bad >= self.patience
    }

    pub fn improved_last(&self) -> bool {
        self.best.is_some_and(|(i, _)| i + 1 == self.seen)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Mat> = params.iter().map(|(_, _, p)| Mat::zeros(p.dim())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update from `grads` (missing entries count as zero).
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for id in params.ids().collect::<Vec<_>>() {
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            match grads.get(id) {
                Some(g) => {
                    ndarray::Zip::from(&mut *m)
                        .and(g)
                        .for_each(|m, &g| *m = b1 * *m + (1.0 - b1) * g);
                    ndarray::Zip::from(&mut *v)
                        .and(g)
                        .for_each(|v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
                }
                None => {
                    m.mapv_inplace(|x| b1 * x);
                    v.mapv_inplace(|x| b2 * x);
                }
            }
            ndarray::Zip::from(params.value_mut(id))
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| *p -= lr * (m / c1) / ((v / c2).sqrt() + eps));
        }
    }
}

pub fn global_norm(grads: &Gradients) -> f64 {
    grads
        .iter()
        .map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Groups windows of similar length into batches of about `batch_tokens`,
/// in a seeded random order.
pub fn make_batches(windows: &[TrainWindow], batch_tokens: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| windows[i].num_tokens());
    let mut batches = Vec::new();
    let mut cur = Vec::new();
    let mut tokens = 0;
    for i in order {
        let n = windows[i].num_tokens();
        if !cur.is_empty() && tokens + n > batch_tokens {
            batches.push(std::mem::take(&mut cur));
            tokens = 0;
        }
        cur.push(i);
        tokens += n;
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches.shuffle(rng);
    batches
}

fn chunk_seed(seed: u64, step: usize, chunk: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((step as u64) << 20) ^ chunk as u64
}

fn add_grads(acc: &mut Gradients, g: Gradients) {
    for (id, m) in g.into_entries() {
        acc.accumulate(id, m);
    }
}

/// Summed loss, target-token count and gradients of one batch.
fn batch_grad(
    model: &Model,
    windows: &[&TrainWindow],
    cfg: &TrainConfig,
    step: usize,
) -> Result<(f64, usize, Gradients)> {
    let parts: Vec<Result<(f64, usize, Gradients)>> = windows
        .par_chunks(cfg.grad_chunk)
        .enumerate()
        .map(|(c, chunk)| {
            let mut rng = ChaCha8Rng::seed_from_u64(chunk_seed(cfg.seed, step, c));
            let owned: Vec<TrainWindow> = chunk.iter().map(|&w| w.clone()).collect();
            let out = model.grad(&owned, &cfg.loss, Mode::Train(&mut rng))?;
            Ok((out.loss, out.target_tokens, out.grads))
        })
        .collect();
    let mut loss = 0.0;
    let mut tokens = 0;
    let mut grads = Gradients::default();
    for p in parts {
        let (l, n, g) = p.map_err(|e| match e {
            Error::NonFinite { detail, .. } => Error::NonFinite { step, detail },
            e => e,
        })?;
        loss += l;
        tokens += n;
        add_grads(&mut grads, g);
    }
    Ok((loss, tokens, grads))
}

/// Per-target-token loss over `windows` in evaluation mode.
pub fn eval_loss(model: &Model, windows: &[TrainWindow], loss: &LossConfig, chunk: usize) -> Result<f64> {
    let sums: Vec<Result<f64>> = windows.par_chunks(chunk.max(1)).map(|c| model.loss(c, loss)).collect();
    let mut total = 0.0;
    for s in sums {
        total += s?;
    }
    let tokens: usize = windows
        .iter()
        .map(|w| w.tgt_out.iter().filter(|&&t| t != crate::corpus::PAD).count())
        .sum();
    Ok(total / tokens.max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub checkpoint: Option<String>,
}

/// Where and how checkpoints are written.
pub struct Output<'a> {
    pub dir: &'a Path,
    pub vocab: Option<&'a Vocab>,
    pub k: usize,
}

pub fn checkpoint_name(step: usize) -> String {
    format!("checkpoint_{step:07}.ckpt")
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the last step.
    pub last: ParamStore,
    /// Mean of the best validation checkpoint and up to `average_n - 1`
    /// that follow it.
    pub averaged: ParamStore,
    pub log: Vec<LogRecord>,
    pub best_validation: usize,
    pub steps: usize,
}

pub fn train(
    mut model: Model,
    train_set: &[TrainWindow],
    dev_set: &[TrainWindow],
    cfg: &TrainConfig,
    out: Option<Output<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::Config("training and dev sets must be non-empty".into()));
    }
    let mut log_file = match &out {
        Some(o) => {
            std::fs::create_dir_all(o.dir).map_err(|e| Error::io(o.dir, e))?;
            let p = o.dir.join("train_log.jsonl");
            Some((std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model.params);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut pool: Vec<ParamStore> = Vec::new();
    let mut log = Vec::new();
    let (mut run_loss, mut run_tokens) = (0.0, 0usize);
    let mut step = 0;
    'outer: loop {
        let batches = make_batches(train_set, cfg.batch_tokens, &mut rng);
        for batch in batches {
            step += 1;
            let windows: Vec<&TrainWindow> = batch.iter().map(|&i| &train_set[i]).collect();
            let (loss, tokens, mut grads) = batch_grad(&model, &windows, cfg, step)?;
            run_loss += loss;
            run_tokens += tokens;
            let inv = 1.0 / tokens.max(1) as f64;
            grads.scale(inv);
            if let Some(c) = cfg.clip_norm {
                let n = global_norm(&grads);
                if !n.is_finite() {
                    return Err(Error::NonFinite {
                        step,
                        detail: "gradient norm".into(),
                    });
                }
                if n > c {
                    grads.scale(c / n);
                }
            }
            let lr = lr_schedule(step, cfg.warmup_steps, cfg.max_lr, model.cfg.d_model)?;
            adam.step(&mut model.params, &grads, lr);
            let last = step >= cfg.max_steps;
            if step % cfg.validate_every == 0 || last {
                let valid_loss = eval_loss(&model, dev_set, &cfg.loss, cfg.grad_chunk)?;
                if !valid_loss.is_finite() {
                    return Err(Error::NonFinite {
                        step,
                        detail: format!("validation loss {valid_loss}"),
                    });
                }
                let checkpoint = match &out {
                    Some(o) => {
                        let name = checkpoint_name(step);
                        Checkpoint::from_model(&model, o.k, step, o.vocab).save(o.dir.join(&name))?;
                        Some(name)
                    }
                    None => None,
                };
                let rec = LogRecord {
                    step,
                    lr,
                    train_loss: run_loss / run_tokens.max(1) as f64,
                    valid_loss,
                    checkpoint,
                };
                if let Some((f, p)) = &mut log_file {
                    serde_json::to_writer(&mut *f, &rec)?;
                    f.write_all(b"\n").map_err(|e| Error::io(p.as_path(), e))?;
                    f.flush().map_err(|e| Error::io(p.as_path(), e))?;
                }
                log.push(rec);
                (run_loss, run_tokens) = (0.0, 0);
                let stop = stopper.observe(valid_loss);
                if stopper.improved_last() {
                    pool = vec![model.params.clone()];
                } else if pool.len() < cfg.average_n {
                    pool.push(model.params.clone());
                }
                if stop || last {
                    break 'outer;
                }
            }
        }
    }
    let averaged = average_params(&pool)?;
    Ok(TrainOutcome {
        last: model.params,
        averaged,
        log,
        best_validation: stopper.best.map_or(0, |b| b.0),
        steps: step,
    })
}

/// Elementwise mean of parameter sets with identical layout.
pub fn average_params(sets: &[ParamStore]) -> Result<ParamStore> {
    let first = sets.first().ok_or_else(|| Error::Config("nothing to average".into()))?;
    let mut acc = first.clone();
    for s in &sets[1..] {
        if !s.same_layout(first) {
            return Err(Error::Shape("checkpoints have different parameter layouts".into()));
        }
        for id in acc.ids().collect::<Vec<_>>() {
            *acc.value_mut(id) += s.value(id);
        }
    }
    let n = sets.len() as f64;
    for id in acc.ids().collect::<Vec<_>>() {
        acc.value_mut(id).mapv_inplace(|x| x / n);
    }
    Ok(acc)
}

/// Averages checkpoint files; metadata comes from the first one.
pub fn average_checkpoints<P: AsRef<Path>>(paths: &[P]) -> Result<Checkpoint> {
    let cks = paths.iter().map(Checkpoint::load).collect::<Result<Vec<_>>>()?;
    let first = cks
        .first()
        .ok_or_else(|| Error::Config("no checkpoints given".into()))?;
    let params = average_params(&cks.iter().map(|c| c.params.clone()).collect::<Vec<_>>())?;
    Ok(Checkpoint {
        meta: first.meta.clone(),
        params,
    })
}

/// The best validation's checkpoint and the `n - 1` logged after it.
pub fn select_checkpoints(log: &[LogRecord], n: usize, dir: &Path) -> Result<Vec<PathBuf>> {
    let best = log
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.valid_loss.total_cmp(&b.1.valid_loss).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::Malformed("empty training log".into()))?;
    log[best..]
        .iter()
        .take(n)
        .map(|r| {
            r.checkpoint
                .as_ref()
                .map(|c| dir.join(c))
                .ok_or_else(|| Error::Malformed(format!("no checkpoint logged at step {}", r.step)))
        })
        .collect()
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LogRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
