// SPDX-License-Identifier: MIT OR Apache-2.0

//! Overhead accounting and text metrics.
//!
//! Space overhead is the ratio of parameter bytes (structural zeros
//! included, since they are stored) rather than live memory.

use std::collections::HashSet;
use std::hash::Hash;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::decoding::{decode, decode_base, DecodeParams, DecodeResult, Roles, Strategy};
use crate::error::{OtterError, Result};
use crate::otter::{analytic_added_params, analytic_base_params, analytic_zero_params, HeadSpec, OtterConfig, OtterModel};
use crate::params::GroupWidths;
use crate::tensor::{sigmoid, Scalar};
use crate::transformer::{Model, ModelConfig};

/// How the space ratio was obtained; attached to every report.
pub const SPACE_NOTE: &str = "space ratio = parameter bytes of the expanded model (structural zeros included) / base parameter bytes";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub workload: String,
    /// Per-forward-pass wall time, modified over base.
    pub time_ratio: f64,
    pub space_ratio: f64,
    /// Tokens committed per forward pass.
    pub accepted_length: f64,
    /// `accepted_length / time_ratio`.
    pub speedup: f64,
    pub base_seconds: f64,
    pub modified_seconds: f64,
    pub repetitions: usize,
    pub note: String,
}

impl OverheadReport {
    pub fn new(workload: impl Into<String>, time_ratio: f64, space_ratio: f64, accepted_length: f64) -> Result<Self> {
        if !(time_ratio > 0.0 && space_ratio > 0.0 && accepted_length > 0.0) {
            return Err(OtterError::Measurement(format!(
                "ratios must be positive (time {time_ratio}, space {space_ratio}, accepted {accepted_length})"
            )));
        }
        Ok(Self {
            workload: workload.into(),
            time_ratio,
            space_ratio,
            accepted_length,
            speedup: accepted_length / time_ratio,
            base_seconds: 0.0,
            modified_seconds: 0.0,
            repetitions: 0,
            note: SPACE_NOTE.into(),
        })
    }

    /// `true` when the stored speedup equals `accepted_length / time_ratio` within 1e-9.
    pub fn is_consistent(&self) -> bool {
        (self.speedup - self.accepted_length / self.time_ratio).abs() <= 1e-9
    }

    pub fn table(&self) -> String {
        format!(
            "workload        {}\ntime ratio      {:.4}x\nspace ratio     {:.4}x\naccepted length {:.4}\nspeedup         {:.4}x\nrepetitions     {}\nnote            {}\n",
            self.workload, self.time_ratio, self.space_ratio, self.accepted_length, self.speedup, self.repetitions, self.note
        )
    }
}

/// Median wall time of `f` over `reps` runs after one warm-up run.
pub fn median_seconds(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    if reps == 0 {
        return Err(OtterError::Measurement("at least one timed repetition is required".into()));
    }
    f()?;
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        f()?;
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok(if reps % 2 == 1 { times[reps / 2] } else { (times[reps / 2 - 1] + times[reps / 2]) / 2.0 })
}

/// Baseline strategy a modified strategy is compared against.
pub fn baseline_of(strategy: Strategy) -> Strategy {
    match strategy {
        Strategy::Topk | Strategy::ArgsTopk => Strategy::Topk,
        Strategy::Topp | Strategy::Dexp | Strategy::DexpAnti => Strategy::Topp,
        Strategy::Greedy | Strategy::ArgsGreedy | Strategy::Speculative => Strategy::Greedy,
    }
}

fn passes(results: &[DecodeResult]) -> usize {
    results.iter().map(|r| r.steps.len()).sum()
}

/// Times the base model's baseline decoding against the expanded model's
/// `params.strategy` on the same prompts. Requires at least five repetitions.
pub fn measure_overhead<T: Scalar>(
    base: &Model<T>,
    modified: &OtterModel<T>,
    roles: &Roles,
    prompts: &[Vec<u32>],
    params: &DecodeParams,
    reps: usize,
) -> Result<OverheadReport> {
    if reps < 5 {
        return Err(OtterError::Measurement(format!("at least 5 timed repetitions are required, got {reps}")));
    }
    if prompts.is_empty() {
        return Err(OtterError::Input("empty workload".into()));
    }
    let base_params = DecodeParams { strategy: baseline_of(params.strategy), ..params.clone() };
    let run_base = || prompts.iter().map(|p| decode_base(base, p, &base_params)).collect::<Result<Vec<_>>>();
    let run_mod = || prompts.iter().map(|p| decode(modified, roles, p, params)).collect::<Result<Vec<_>>>();
    let (base_out, mod_out) = (run_base()?, run_mod()?);
    let (base_passes, mod_passes) = (passes(&base_out), passes(&mod_out));
    if base_passes == 0 || mod_passes == 0 {
        return Err(OtterError::Measurement("workload produced no tokens".into()));
    }
    let base_s = median_seconds(reps, || run_base().map(|_| ()))?;
    let mod_s = median_seconds(reps, || run_mod().map(|_| ()))?;
    if base_s <= 0.0 {
        return Err(OtterError::Measurement("base run took zero time".into()));
    }
    let time_ratio = (mod_s / mod_passes as f64) / (base_s / base_passes as f64);
    let tokens: usize = mod_out.iter().map(|r| r.tokens.len()).sum();
    let accepted = tokens as f64 / mod_passes as f64;
    let mut report = OverheadReport::new(params.strategy.name(), time_ratio, modified.count_params().space_ratio, accepted)?;
    report.base_seconds = base_s;
    report.modified_seconds = mod_s;
    report.repetitions = reps;
    Ok(report)
}

/// Mean over texts of unique n-grams / total n-grams. Texts shorter than
/// `n` are skipped with a warning.
pub fn distinct_n<S: Eq + Hash>(texts: &[Vec<S>], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(OtterError::Config("n must be at least 1".into()));
    }
    let mut total = 0.0;
    let mut counted = 0;
    for (i, t) in texts.iter().enumerate() {
        if t.len() < n {
            log::warn!("text {i} has {} tokens, fewer than n = {n}; skipped", t.len());
            continue;
        }
        let grams: HashSet<&[S]> = t.windows(n).collect();
        total += grams.len() as f64 / (t.len() - n + 1) as f64;
        counted += 1;
    }
    if counted == 0 {
        return Err(OtterError::Input(format!("no text has at least {n} tokens")));
    }
    Ok(total / counted as f64)
}

/// Fraction of tokens that belong to `lexicon`.
pub fn lexicon_fraction(text: &[u32], lexicon: &HashSet<u32>) -> f64 {
    if text.is_empty() {
        return 0.0;
    }
    text.iter().filter(|t| lexicon.contains(t)).count() as f64 / text.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToxicityReport {
    /// Mean over prompts of the most toxic sample.
    pub avg_max: f64,
    /// Fraction of prompts with at least one sample above the threshold.
    pub prob_any: f64,
}

/// Toxicity above which a sample counts as toxic.
pub const TOXIC_THRESHOLD: f64 = 0.5;

/// Lexicon toxicity of generations grouped by prompt.
pub fn lexicon_toxicity(per_prompt: &[Vec<Vec<u32>>], lexicon: &HashSet<u32>) -> Result<ToxicityReport> {
    if lexicon.is_empty() {
        return Err(OtterError::Config("toxicity lexicon must not be empty".into()));
    }
    toxicity_from_scores(&per_prompt.iter().map(|s| s.iter().map(|t| lexicon_fraction(t, lexicon)).collect()).collect::<Vec<_>>())
}

/// Aggregates per-sample toxicity scores grouped by prompt.
pub fn toxicity_from_scores(scores: &[Vec<f64>]) -> Result<ToxicityReport> {
    if scores.is_empty() || scores.iter().any(Vec::is_empty) {
        return Err(OtterError::Input("every prompt needs at least one sample".into()));
    }
    let maxes: Vec<f64> = scores.iter().map(|s| s.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
    let n = maxes.len() as f64;
    Ok(ToxicityReport {
        avg_max: maxes.iter().sum::<f64>() / n,
        prob_any: maxes.iter().filter(|&&m| m > TOXIC_THRESHOLD).count() as f64 / n,
    })
}

/// Mean reward-head score of complete sequences (read at the last position).
pub fn avg_reward<T: Scalar>(model: &OtterModel<T>, reward_ext: usize, sequences: &[Vec<u32>]) -> Result<f64> {
    if sequences.is_empty() {
        return Err(OtterError::Input("no responses to score".into()));
    }
    let head = model
        .extensions
        .get(reward_ext)
        .and_then(|e| e.reward.as_ref())
        .ok_or_else(|| OtterError::Config(format!("extension {reward_ext} has no reward head")))?;
    let hp = model.h_prime_range(reward_ext);
    let mut total = 0.0;
    for s in sequences {
        let inf = model.model.infer(&[s])?;
        let h = inf.final_hidden.row(s.len() - 1);
        total += sigmoid(head.logit(&h[hp.clone()])?).to_f64_lossy();
    }
    Ok(total / sequences.len() as f64)
}

pub fn mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(OtterError::Input("mean of no values".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Parameter accounting at Llama-7B dimensions with the alignment
/// extension (d_ext 256, d_inner_ext 512, 16 heads, one reward head).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleReport {
    pub base: usize,
    pub added_trainable: usize,
    pub structural_zeros: usize,
    pub total_with_zeros: usize,
    pub total_trainable: usize,
    pub space_ratio: f64,
    pub reference_total: f64,
    pub reference_space_ratio: f64,
}

impl ScaleReport {
    pub fn text(&self) -> String {
        let b = |n: usize| n as f64 / 1e9;
        format!(
            "base parameters              {:.3}B\n\
             added trainable parameters   {:.3}B\n\
             structural zeros             {:.3}B\n\
             base + trainable             {:.3}B\n\
             base + trainable + zeros     {:.3}B  (published total {:.2}B)\n\
             space ratio                  {:.3}x  (published {:.2}x)\n\
             the published figure is closest to the count that includes the stored zero blocks; the gap is not asserted\n",
            b(self.base),
            b(self.added_trainable),
            b(self.structural_zeros),
            b(self.total_trainable),
            b(self.total_with_zeros),
            self.reference_total / 1e9,
            self.space_ratio,
            self.reference_space_ratio,
        )
    }
}

pub fn llama7b_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 32_000,
        d_inp: 4096,
        d_inner: 11_008,
        n_layers: 32,
        n_heads: 32,
        head_dim: 128,
        max_seq_len: 4096,
        norm_eps: 1e-6,
        ..ModelConfig::tiny(32_000, 4096, 32, 32)
    }
}

pub fn llama7b_report() -> ScaleReport {
    let cfg = llama7b_config();
    let ext = OtterConfig::new("alignment", 256, 512, 16);
    let prior = GroupWidths::base(cfg.d_inp, cfg.d_inner, cfg.n_heads);
    let base = analytic_base_params(&cfg);
    let added = analytic_added_params(&cfg, &prior, &ext, HeadSpec { reward: true, generation: 0 });
    let zeros = analytic_zero_params(&cfg, &prior, &ext);
    ScaleReport {
        base,
        added_trainable: added,
        structural_zeros: zeros,
        total_with_zeros: base + added + zeros,
        total_trainable: base + added,
        space_ratio: (base + added + zeros) as f64 / base as f64,
        reference_total: 8.51e9,
        reference_space_ratio: 1.26,
    }
}
