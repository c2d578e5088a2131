// SPDX-License-Identifier: MIT OR Apache-2.0

//! Losses, the masked AdamW optimizer and the training loop.
//!
//! Only the elements owned by the trainable group move. Structural zeros
//! are restored after every update, so they stay exactly zero however long
//! training runs.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{OtterError, Result};
use crate::heads::{GenerationHeads, RewardHead};
use crate::otter::{BoundOtter, OtterModel};
use crate::tensor::Scalar;
use crate::transformer::ForwardTrace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub lr: f64,
    /// Fraction of the total steps spent ramping the learning rate up linearly.
    pub warmup_frac: f64,
    pub reg_lambda: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Base of the per-head weights `c^k` of the draft-head loss.
    pub medusa_c: f64,
    /// Number of draft heads.
    pub k: usize,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            max_steps: None,
            lr: 1e-3,
            warmup_frac: 0.03,
            reg_lambda: 0.0,
            batch_size: 8,
            seed: 0,
            medusa_c: 0.8,
            k: 4,
            weight_decay: 0.0,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.reg_lambda >= 0.0) {
            return Err(OtterError::Config(format!("reg_lambda must be >= 0, got {}", self.reg_lambda)));
        }
        if !(self.medusa_c > 0.0 && self.medusa_c <= 1.0) {
            return Err(OtterError::Config(format!("medusa_c must lie in (0, 1], got {}", self.medusa_c)));
        }
        if self.batch_size == 0 {
            return Err(OtterError::Config("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(OtterError::Config("lr must be >= 0 and warmup_frac within [0, 1]".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// `(rms(h[..d_orig]) - rms(h))^2` for one hidden vector.
pub fn rms_gap_value(h: &[f64], d_orig: usize, eps: f64) -> f64 {
    let rms = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64 + eps).sqrt();
    let gap = rms(&h[..d_orig]) - rms(h);
    gap * gap
}

/// Squared RMS gap summed over every normalization site, averaged over rows.
pub fn reg_loss<T: Scalar>(g: &mut Graph<'_, T>, trace: &ForwardTrace, d_orig: usize, eps: T) -> Result<Var> {
    let first = trace.hidden_sites.first().ok_or_else(|| OtterError::Config("trace without sites".into()))?;
    if g.dims(first.pre).1 <= d_orig {
        return Err(OtterError::Config("the regularizer needs a trace of an expanded model".into()));
    }
    let gaps = trace.hidden_sites.iter().map(|s| g.rms_gap(s.pre, d_orig, eps)).collect::<Result<Vec<_>>>()?;
    g.sum_all(&gaps)
}

/// `task + lambda * reg`.
pub fn total_loss<T: Scalar>(g: &mut Graph<'_, T>, task: Var, reg: Option<Var>, lambda: f64) -> Result<Var> {
    match reg {
        Some(r) if lambda != 0.0 => {
            let scaled = g.scale(r, T::of(lambda))?;
            g.add(task, scaled)
        }
        _ => Ok(task),
    }
}

/// Pairwise preference loss `mean(-ln sigmoid(s_chosen - s_rejected))` on
/// pre-sigmoid scores.
pub fn reward_loss<T: Scalar>(g: &mut Graph<'_, T>, s_chosen: Var, s_rejected: Var) -> Result<Var> {
    let diff = g.sub(s_chosen, s_rejected)?;
    let nls = g.neg_log_sigmoid(diff)?;
    g.mean(nls)
}

/// Next-token targets of a rectangular batch; the last position has none.
pub fn shifted_targets(batch: &[&[u32]], offset: usize) -> Vec<Option<u32>> {
    batch.iter().flat_map(|s| (0..s.len()).map(move |t| s.get(t + offset).copied())).collect()
}

/// Weights `c^k`, `k = 1..=K`.
pub fn medusa_weights(c: f64, k: usize) -> Vec<f64> {
    (1..=k).map(|i| c.powi(i as i32)).collect()
}

/// Draft-head loss: head `k` (1-based) predicts the token `k + 1` places
/// ahead; positions without such a token are left out of that head's mean.
pub fn medusa_loss<T: Scalar>(g: &mut Graph<'_, T>, head_logits: &[Var], batch: &[&[u32]], c: f64) -> Result<Var> {
    if head_logits.is_empty() {
        return Err(OtterError::Config("draft loss needs at least one head".into()));
    }
    let weights = medusa_weights(c, head_logits.len());
    let mut terms = Vec::with_capacity(head_logits.len());
    for (i, (&logits, &w)) in head_logits.iter().zip(&weights).enumerate() {
        let targets = shifted_targets(batch, i + 2);
        if targets.iter().all(Option::is_none) {
            return Err(OtterError::Input(format!(
                "sequences of length {} are too short for {} draft heads",
                batch.first().map_or(0, |s| s.len()),
                head_logits.len()
            )));
        }
        let ce = g.cross_entropy(logits, &targets)?;
        terms.push(g.scale(ce, T::of(w))?);
    }
    g.sum_all(&terms)
}

// ---------------------------------------------------------------------------
// Objectives
// ---------------------------------------------------------------------------

/// What a training step optimizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Next-token cross-entropy of the LM head (base-model pretraining).
    Lm,
    /// Pairwise preference loss of extension `ext`'s reward head.
    Reward { ext: usize },
    /// Next-token cross-entropy of extension `ext`'s first generation head.
    ExpertLm { ext: usize },
    /// Draft-head loss of extension `ext`'s generation heads.
    Medusa { ext: usize, c: f64 },
}

impl Objective {
    fn ext(&self) -> Option<usize> {
        match *self {
            Objective::Lm => None,
            Objective::Reward { ext } | Objective::ExpertLm { ext } | Objective::Medusa { ext, .. } => Some(ext),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Batch {
    Tokens(Vec<Vec<u32>>),
    Pairs { chosen: Vec<Vec<u32>>, rejected: Vec<Vec<u32>> },
}

impl Batch {
    fn sequences(&self) -> Vec<&[u32]> {
        match self {
            Batch::Tokens(t) => t.iter().map(Vec::as_slice).collect(),
            Batch::Pairs { chosen, rejected } => chosen.iter().chain(rejected).map(Vec::as_slice).collect(),
        }
    }
}

/// Graph nodes of one objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub task: Var,
    pub reg: Option<Var>,
    pub total: Var,
}

/// Builds the loss of `objective` on `batch`. The regularizer is added for
/// expanded models (weighted by `reg_lambda`).
pub fn build_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    model: &OtterModel<T>,
    bound: &BoundOtter,
    objective: &Objective,
    batch: &Batch,
    reg_lambda: f64,
) -> Result<LossVars> {
    let seqs = batch.sequences();
    let trace = model.forward(g, bound, &seqs)?;
    let head = |idx: usize| -> Result<&crate::otter::BoundHeads> {
        bound.heads.get(idx).ok_or_else(|| OtterError::Config(format!("no extension {idx}")))
    };
    let task = match (*objective, batch) {
        (Objective::Lm, Batch::Tokens(_)) => {
            let targets = shifted_targets(&seqs, 1);
            g.cross_entropy(trace.logits, &targets)?
        }
        (Objective::Reward { ext }, Batch::Pairs { chosen, rejected }) => {
            if chosen.len() != rejected.len() {
                return Err(OtterError::Input("chosen and rejected batches differ in size".into()));
            }
            let w = head(ext)?.reward.ok_or_else(|| OtterError::Config("extension has no reward head".into()))?;
            let h_prime = model.h_prime(g, &trace, ext)?;
            let last = |b: usize| b * trace.seq_len + trace.seq_len - 1;
            let n = chosen.len();
            let rows_c: Vec<usize> = (0..n).map(last).collect();
            let rows_r: Vec<usize> = (n..2 * n).map(last).collect();
            let hc = g.select_rows(h_prime, &rows_c)?;
            let hr = g.select_rows(h_prime, &rows_r)?;
            let sc = RewardHead::logits_graph(g, w, hc)?;
            let sr = RewardHead::logits_graph(g, w, hr)?;
            reward_loss(g, sc, sr)?
        }
        (Objective::ExpertLm { ext }, Batch::Tokens(_)) => {
            let w = *head(ext)?.generation.first().ok_or_else(|| OtterError::Config("extension has no generation head".into()))?;
            let h_prime = model.h_prime(g, &trace, ext)?;
            let logits = GenerationHeads::logits_graph(g, w, h_prime, trace.final_original, bound.model.lm_head)?;
            g.cross_entropy(logits, &shifted_targets(&seqs, 1))?
        }
        (Objective::Medusa { ext, c }, Batch::Tokens(_)) => {
            let hs = head(ext)?.generation.clone();
            if hs.is_empty() {
                return Err(OtterError::Config("extension has no generation heads".into()));
            }
            let h_prime = model.h_prime(g, &trace, ext)?;
            let logits = hs
                .iter()
                .map(|&w| GenerationHeads::logits_graph(g, w, h_prime, trace.final_original, bound.model.lm_head))
                .collect::<Result<Vec<_>>>()?;
            medusa_loss(g, &logits, &seqs, c)?
        }
        (obj, _) => return Err(OtterError::Config(format!("batch kind does not fit objective {obj:?}"))),
    };
    let reg =
        if model.extensions.is_empty() { None } else { Some(reg_loss(g, &trace, model.config().d_inp, T::of(model.config().norm_eps))?) };
    let total = total_loss(g, task, reg, reg_lambda)?;
    Ok(LossVars { task, reg, total })
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// AdamW restricted to a per-element mask.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to the masked elements of every parameter.
    pub fn update<T: Scalar>(
        &mut self,
        params: &mut [&mut crate::params::Param<T>],
        grads: &[Option<Vec<T>>],
        masks: &[Vec<bool>],
        lr: f64,
        clip: f64,
    ) {
        if self.m.len() != params.len() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let norm = grads
            .iter()
            .zip(masks)
            .filter_map(|(g, m)| g.as_ref().map(|g| (g, m)))
            .flat_map(|(g, m)| g.iter().zip(m).filter(|(_, &on)| on).map(|(x, _)| x.to_f64_lossy().powi(2)))
            .sum::<f64>()
            .sqrt();
        let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(grad) = &grads[i] else { continue };
            let mask = &masks[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = p.tensor.data_mut();
            for j in 0..data.len() {
                if !mask[j] {
                    continue;
                }
                let gj = grad[j].to_f64_lossy() * scale;
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let mut x = data[j].to_f64_lossy();
                x -= lr * (self.weight_decay * x + (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps));
                data[j] = T::of(x);
            }
            p.rezero();
        }
    }
}

/// Learning rate at 0-based `step` of `total` with a linear warm-up.
pub fn scheduled_lr(base: f64, step: usize, total: usize, warmup_frac: f64) -> f64 {
    let warm = (warmup_frac * total as f64).ceil() as usize;
    if warm == 0 || step >= warm {
        base
    } else {
        base * (step + 1) as f64 / warm as f64
    }
}

// ---------------------------------------------------------------------------
// Steps and loops
// ---------------------------------------------------------------------------

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub task_loss: f64,
    pub reg_loss: f64,
    pub total: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

impl StepRecord {
    /// Equality ignoring wall time.
    pub fn same_values(&self, other: &StepRecord) -> bool {
        self.step == other.step
            && self.task_loss.to_bits() == other.task_loss.to_bits()
            && self.reg_loss.to_bits() == other.reg_loss.to_bits()
            && self.total.to_bits() == other.total.to_bits()
            && self.lr.to_bits() == other.lr.to_bits()
    }
}

fn check_trainable<T: Scalar>(model: &OtterModel<T>, objective: &Objective) -> Result<()> {
    let group = model.trainable_group().ok_or_else(|| OtterError::Sequencing("no parameter group is marked trainable".into()))?;
    match objective.ext() {
        None if group != 0 => {
            Err(OtterError::Sequencing(format!("the LM objective trains the base model, but group {group} is trainable")))
        }
        Some(ext) => {
            let e = model.extensions.get(ext).ok_or_else(|| OtterError::Config(format!("no extension {ext}")))?;
            if e.group != group {
                return Err(OtterError::Sequencing(format!("extension `{}` is frozen; only group {group} is trainable", e.config.name)));
            }
            Ok(())
        }
        None => Ok(()),
    }
}

/// Forward, backward and one masked optimizer update.
pub fn train_step<T: Scalar>(
    model: &mut OtterModel<T>,
    opt: &mut AdamW,
    objective: &Objective,
    batch: &Batch,
    reg_lambda: f64,
    lr: f64,
    clip: f64,
) -> Result<StepRecord> {
    check_trainable(model, objective)?;
    let start = Instant::now();
    let step = opt.steps_taken() as usize;
    let (record, grads) = {
        let mut g = Graph::new();
        let bound = model.bind(&mut g)?;
        let loss = build_loss(&mut g, model, &bound, objective, batch, reg_lambda).map_err(|e| match e {
            OtterError::Numeric(d) => OtterError::Numeric(format!("step {step}: {d}")),
            other => other,
        })?;
        let task = g.scalar(loss.task).to_f64_lossy();
        let reg = loss.reg.map_or(0.0, |r| g.scalar(r).to_f64_lossy());
        let total = g.scalar(loss.total).to_f64_lossy();
        if !total.is_finite() {
            return Err(OtterError::Numeric(format!("step {step}: loss {total} (task {task}, reg {reg})")));
        }
        let mut grads = g.backward(loss.total)?;
        let grads: Vec<Option<Vec<T>>> = bound.all.iter().map(|&v| grads.take(v)).collect();
        (StepRecord { step, task_loss: task, reg_loss: reg, total, lr, wall_ms: 0.0 }, grads)
    };
    let masks = model.trainable_masks();
    let mut params = model.params_mut();
    opt.update(&mut params, &grads, &masks, lr, clip);
    Ok(StepRecord { wall_ms: start.elapsed().as_secs_f64() * 1e3, ..record })
}

/// Training examples.
#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Sequences(Vec<Vec<u32>>),
    Pairs(Vec<(Vec<u32>, Vec<u32>)>),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Sequences(s) => s.len(),
            Dataset::Pairs(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn batch(&self, idx: &[usize]) -> Batch {
        match self {
            Dataset::Sequences(s) => Batch::Tokens(idx.iter().map(|&i| s[i].clone()).collect()),
            Dataset::Pairs(p) => Batch::Pairs {
                chosen: idx.iter().map(|&i| p[i].0.clone()).collect(),
                rejected: idx.iter().map(|&i| p[i].1.clone()).collect(),
            },
        }
    }
}

/// Total optimizer steps `train` will take.
pub fn planned_steps(n: usize, cfg: &TrainConfig) -> usize {
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    cfg.max_steps.map_or(total, |m| m.min(total))
}

/// Runs the training loop: reshuffles every epoch with `cfg.seed`,
/// calling `on_step` after every update.
pub fn train<T: Scalar>(
    model: &mut OtterModel<T>,
    objective: &Objective,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(OtterError::Input("empty training set".into()));
    }
    check_trainable(model, objective)?;
    let total = planned_steps(data.len(), cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut records = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..data.len()).collect();
    'outer: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if records.len() >= total {
                break 'outer;
            }
            let lr = scheduled_lr(cfg.lr, records.len(), total, cfg.warmup_frac);
            let rec = train_step(model, &mut opt, objective, &data.batch(chunk), cfg.reg_lambda, lr, cfg.grad_clip)?;
            on_step(&rec);
            records.push(rec);
        }
    }
    Ok(records)
}

/// Mean loss of `objective` over `data` without updating anything.
pub fn evaluate<T: Scalar>(model: &OtterModel<T>, objective: &Objective, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(OtterError::Input("empty evaluation set".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut sum = 0.0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let mut g = Graph::new();
        let bound = model.bind(&mut g)?;
        let l = build_loss(&mut g, model, &bound, objective, &data.batch(chunk), 0.0)?;
        sum += g.scalar(l.task).to_f64_lossy() * chunk.len() as f64;
    }
    Ok(sum / data.len() as f64)
}

/// Writes records as one JSON object per line.
pub fn write_metrics(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| OtterError::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(f, "{line}").map_err(|e| OtterError::io(path, e))?;
    }
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| OtterError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| OtterError::Format { path: path.into(), detail: e.to_string() }))
        .collect()
}
