// SPDX-License-Identifier: MIT OR Apache-2.0

//! Token decoders: greedy / top-k / top-p baselines, reward-guided search,
//! expert mixing, and speculative decoding with draft heads.
//!
//! All sampled strategies draw exactly one uniform number per emitted
//! token from a ChaCha stream seeded by [`DecodeParams::seed`], and every
//! argmax breaks ties toward the lowest token index. Two decoders that
//! arrive at the same candidate scores therefore emit the same tokens.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OtterError, Result};
use crate::otter::OtterModel;
use crate::tensor::{sigmoid, softmax_slice, Scalar};
use crate::transformer::{Inference, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Topk,
    Topp,
    ArgsGreedy,
    ArgsTopk,
    Dexp,
    DexpAnti,
    Speculative,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::Greedy,
        Strategy::Topk,
        Strategy::Topp,
        Strategy::ArgsGreedy,
        Strategy::ArgsTopk,
        Strategy::Dexp,
        Strategy::DexpAnti,
        Strategy::Speculative,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Greedy => "greedy",
            Strategy::Topk => "topk",
            Strategy::Topp => "topp",
            Strategy::ArgsGreedy => "args_greedy",
            Strategy::ArgsTopk => "args_topk",
            Strategy::Dexp => "dexp",
            Strategy::DexpAnti => "dexp_anti",
            Strategy::Speculative => "speculative",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = OtterError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| OtterError::Config(format!("unknown decoding strategy `{s}`")))
    }
}

/// How the LM term enters the reward-guided score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LmScore {
    /// `p(v | x)`.
    #[default]
    Prob,
    /// `ln p(v | x)`.
    LogProb,
}

impl FromStr for LmScore {
    type Err = OtterError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prob" => Ok(LmScore::Prob),
            "logprob" | "log_prob" => Ok(LmScore::LogProb),
            other => Err(OtterError::Config(format!("unknown LM score `{other}` (prob | logprob)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeParams {
    pub strategy: Strategy,
    /// Candidate count for top-k and reward-guided search.
    pub k: usize,
    /// Nucleus mass.
    pub p: f64,
    /// Temperature.
    pub tau: f64,
    /// Reward weight.
    pub w: f64,
    /// Expert mixing weight.
    pub alpha: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    pub lm_score: LmScore,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            strategy: Strategy::Greedy,
            k: 10,
            p: 0.9,
            tau: 1.0,
            w: 1.5,
            alpha: 2.0,
            max_new_tokens: 32,
            seed: 0,
            lm_score: LmScore::Prob,
        }
    }
}

impl DecodeParams {
    pub fn with(strategy: Strategy) -> Self {
        Self { strategy, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(OtterError::Config(what.to_string()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return bad("p must lie in (0, 1]");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        if !(self.w >= 0.0) || !(self.alpha >= 0.0) {
            return bad("w and alpha must be >= 0");
        }
        Ok(())
    }
}

/// Diagnostics of one emitted token (or one speculative pass).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub token: u32,
    /// `(token, score)` of the candidates considered, when applicable.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<(u32, f64)>,
    /// Tokens committed by this pass (speculative decoding only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accepted: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub strategy: Strategy,
    pub prompt: Vec<u32>,
    pub tokens: Vec<u32>,
    pub steps: Vec<StepInfo>,
}

impl DecodeResult {
    /// Tokens committed per forward pass (1 for non-speculative decoding).
    pub fn accepted_lengths(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.accepted.unwrap_or(1)).collect()
    }

    pub fn average_accepted(&self) -> f64 {
        let a = self.accepted_lengths();
        if a.is_empty() {
            return 0.0;
        }
        a.iter().sum::<usize>() as f64 / a.len() as f64
    }
}

// ---------------------------------------------------------------------------
// Selection primitives
// ---------------------------------------------------------------------------

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Softmax in double precision.
pub fn probabilities<T: Scalar>(logits: &[T], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|v| v.to_f64_lossy() / tau).collect();
    let mut p = vec![0.0; scaled.len()];
    softmax_slice(&scaled, &mut p);
    p
}

/// Token indices sorted by descending value, ties by ascending index.
pub fn ranked(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

/// Picks from `weights` (non-negative, not necessarily normalized) using
/// the uniform draw `u ∈ [0, 1)`.
pub fn pick(weights: &[f64], u: f64) -> usize {
    let total: f64 = weights.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if target < acc {
            return i;
        }
    }
    // rounding left `target` at the very top: the last non-zero weight
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Samples among candidates with probability `exp(s_i / tau) / Σ exp(s_j / tau)`.
pub fn sample_scores(scores: &[f64], tau: f64, u: f64) -> usize {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scores.iter().map(|&s| ((s - max) / tau).exp()).collect();
    pick(&w, u)
}

/// Smallest descending-probability prefix with mass at least `p`.
pub fn nucleus(probs: &[f64], p: f64) -> Vec<usize> {
    let order = ranked(probs);
    let mut mass = 0.0;
    let mut out = Vec::new();
    for i in order {
        out.push(i);
        mass += probs[i];
        if mass >= p {
            break;
        }
    }
    out
}

fn top_k(probs: &[f64], k: usize) -> Vec<usize> {
    let mut r = ranked(probs);
    r.truncate(k.min(probs.len()));
    r
}

/// Top-k sampling: log-probabilities of the `k` best tokens through
/// [`sample_scores`].
fn sample_top_k(probs: &[f64], k: usize, tau: f64, u: f64) -> (u32, Vec<(u32, f64)>) {
    let cand = top_k(probs, k);
    let scores: Vec<f64> = cand.iter().map(|&i| probs[i].ln()).collect();
    let j = sample_scores(&scores, tau, u);
    (cand[j] as u32, cand.iter().zip(&scores).map(|(&i, &s)| (i as u32, s)).collect())
}

/// Top-p sampling over already temperature-scaled probabilities.
fn sample_top_p(probs: &[f64], p: f64, u: f64) -> u32 {
    let cand = nucleus(probs, p);
    let w: Vec<f64> = cand.iter().map(|&i| probs[i]).collect();
    cand[pick(&w, u)] as u32
}

/// Mixed expert logits `z + alpha (z_plus - z_minus)`.
pub fn dexp_logits(z: &[f64], z_plus: &[f64], z_minus: &[f64], alpha: f64) -> Vec<f64> {
    z.iter().zip(z_plus).zip(z_minus).map(|((&a, &p), &m)| a + alpha * (p - m)).collect()
}

/// Anti-expert-only logits `(1 + alpha) z - alpha z_minus`, evaluated as
/// `z + alpha (z - z_minus)` so that `z_minus == z` returns `z` exactly.
pub fn dexp_anti_logits(z: &[f64], z_minus: &[f64], alpha: f64) -> Vec<f64> {
    z.iter().zip(z_minus).map(|(&a, &m)| a + alpha * (a - m)).collect()
}

/// ARGS score `LM(v | x) + w r`.
pub fn args_score(lm_prob: f64, reward: f64, w: f64, mode: LmScore) -> f64 {
    let lm = match mode {
        LmScore::Prob => lm_prob,
        LmScore::LogProb => lm_prob.ln(),
    };
    lm + w * reward
}

// ---------------------------------------------------------------------------
// Decoders
// ---------------------------------------------------------------------------

fn check_prompt(prompt: &[u32], vocab: usize) -> Result<()> {
    if prompt.is_empty() {
        return Err(OtterError::Input("prompt must not be empty".into()));
    }
    if let Some(&t) = prompt.iter().find(|&&t| t as usize >= vocab) {
        return Err(OtterError::Input(format!("prompt token {t} outside vocabulary of {vocab}")));
    }
    Ok(())
}

/// Number of tokens that still fit, given the context limit.
fn budget(params: &DecodeParams, max_seq_len: usize, prompt_len: usize) -> usize {
    params.max_new_tokens.min(max_seq_len.saturating_sub(prompt_len))
}

fn last_row<T: Scalar>(inf: &Inference<T>, b: usize) -> (&[T], &[T]) {
    let r = inf.row_index(b, inf.seq_len - 1);
    (inf.logits.row(r), inf.final_hidden.row(r))
}

/// Baseline decoding with the greedy, top-k or top-p strategy.
pub fn decode_base<T: Scalar>(model: &Model<T>, prompt: &[u32], params: &DecodeParams) -> Result<DecodeResult> {
    params.validate()?;
    check_prompt(prompt, model.config.vocab_size)?;
    if !matches!(params.strategy, Strategy::Greedy | Strategy::Topk | Strategy::Topp) {
        return Err(OtterError::Config(format!("{} is not a baseline strategy", params.strategy)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut ctx = prompt.to_vec();
    let mut steps = Vec::new();
    for _ in 0..budget(params, model.config.max_seq_len, prompt.len()) {
        let inf = model.infer(&[&ctx])?;
        let (logits, _) = last_row(&inf, 0);
        let step = match params.strategy {
            Strategy::Greedy => StepInfo { token: argmax(&probabilities(logits, 1.0)) as u32, candidates: vec![], accepted: None },
            Strategy::Topk => {
                let u = rng.random::<f64>();
                let (token, candidates) = sample_top_k(&probabilities(logits, 1.0), params.k, params.tau, u);
                StepInfo { token, candidates, accepted: None }
            }
            _ => {
                let u = rng.random::<f64>();
                StepInfo { token: sample_top_p(&probabilities(logits, params.tau), params.p, u), candidates: vec![], accepted: None }
            }
        };
        ctx.push(step.token);
        steps.push(step);
    }
    Ok(DecodeResult { strategy: params.strategy, prompt: prompt.to_vec(), tokens: ctx[prompt.len()..].to_vec(), steps })
}

/// Reward-guided search with the reward head of extension `reward_ext`.
pub fn decode_args<T: Scalar>(otter: &OtterModel<T>, reward_ext: usize, prompt: &[u32], params: &DecodeParams) -> Result<DecodeResult> {
    params.validate()?;
    let cfg = otter.config();
    check_prompt(prompt, cfg.vocab_size)?;
    let ext = otter.extensions.get(reward_ext).ok_or_else(|| OtterError::Config(format!("no extension {reward_ext}")))?;
    let head = ext.reward.as_ref().ok_or_else(|| OtterError::Config(format!("extension `{}` has no reward head", ext.config.name)))?;
    let sampled = match params.strategy {
        Strategy::ArgsGreedy => false,
        Strategy::ArgsTopk => true,
        s => return Err(OtterError::Config(format!("{s} is not a reward-guided strategy"))),
    };
    let k = if params.k > cfg.vocab_size {
        log::warn!("k = {} exceeds the vocabulary; using {}", params.k, cfg.vocab_size);
        cfg.vocab_size
    } else {
        params.k
    };
    let hp = otter.h_prime_range(reward_ext);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut ctx = prompt.to_vec();
    let mut steps = Vec::new();
    for _ in 0..budget(params, cfg.max_seq_len, prompt.len()) {
        let inf = otter.model.infer(&[&ctx])?;
        let probs = probabilities(last_row(&inf, 0).0, 1.0);
        let cand = top_k(&probs, k);
        // one batched pass scores every candidate continuation
        let seqs: Vec<Vec<u32>> = cand
            .iter()
            .map(|&v| {
                let mut s = ctx.clone();
                s.push(v as u32);
                s
            })
            .collect();
        let refs: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
        let scored = otter.model.infer(&refs)?;
        let mut scores = Vec::with_capacity(cand.len());
        for (b, &v) in cand.iter().enumerate() {
            let (_, hidden) = last_row(&scored, b);
            let r = sigmoid(head.logit(&hidden[hp.clone()])?).to_f64_lossy();
            scores.push(args_score(probs[v], r, params.w, params.lm_score));
        }
        let j = if sampled { sample_scores(&scores, params.tau, rng.random::<f64>()) } else { argmax(&scores) };
        let token = cand[j] as u32;
        ctx.push(token);
        steps.push(StepInfo { token, candidates: cand.iter().zip(&scores).map(|(&i, &s)| (i as u32, s)).collect(), accepted: None });
    }
    Ok(DecodeResult { strategy: params.strategy, prompt: prompt.to_vec(), tokens: ctx[prompt.len()..].to_vec(), steps })
}

/// Logits of extension `ext`'s first generation head at one position.
fn expert_logits<T: Scalar>(otter: &OtterModel<T>, ext: usize, hidden: &[T]) -> Result<Vec<f64>> {
    let e = otter.extensions.get(ext).ok_or_else(|| OtterError::Config(format!("no extension {ext}")))?;
    let heads = e.generation.as_ref().ok_or_else(|| OtterError::Config(format!("extension `{}` has no generation head", e.config.name)))?;
    let d = otter.config().d_inp;
    let l = heads.head_logits(0, &hidden[otter.h_prime_range(ext)], &hidden[..d], &otter.model.lm_head.tensor)?;
    Ok(l.iter().map(|v| v.to_f64_lossy()).collect())
}

/// Expert / anti-expert mixing followed by nucleus sampling. `expert` may
/// be `None` for the anti-only form (`Strategy::DexpAnti`).
pub fn decode_dexp<T: Scalar>(
    otter: &OtterModel<T>,
    expert: Option<usize>,
    anti: usize,
    prompt: &[u32],
    params: &DecodeParams,
) -> Result<DecodeResult> {
    params.validate()?;
    let cfg = otter.config();
    check_prompt(prompt, cfg.vocab_size)?;
    let expert = match (params.strategy, expert) {
        (Strategy::Dexp, Some(e)) => Some(e),
        (Strategy::Dexp, None) => return Err(OtterError::Config("dexp needs an expert extension".into())),
        (Strategy::DexpAnti, _) => None,
        (s, _) => return Err(OtterError::Config(format!("{s} is not an expert-mixing strategy"))),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut ctx = prompt.to_vec();
    let mut steps = Vec::new();
    for _ in 0..budget(params, cfg.max_seq_len, prompt.len()) {
        let inf = otter.model.infer(&[&ctx])?;
        let (logits, hidden) = last_row(&inf, 0);
        let z: Vec<f64> = logits.iter().map(|v| v.to_f64_lossy()).collect();
        let z_minus = expert_logits(otter, anti, hidden)?;
        let mixed = match expert {
            Some(e) => dexp_logits(&z, &expert_logits(otter, e, hidden)?, &z_minus, params.alpha),
            None => dexp_anti_logits(&z, &z_minus, params.alpha),
        };
        let u = rng.random::<f64>();
        let token = sample_top_p(&probabilities(&mixed, params.tau), params.p, u);
        ctx.push(token);
        steps.push(StepInfo { token, candidates: vec![], accepted: None });
    }
    Ok(DecodeResult { strategy: params.strategy, prompt: prompt.to_vec(), tokens: ctx[prompt.len()..].to_vec(), steps })
}

/// Greedy speculative decoding with extension `ext`'s draft heads.
///
/// Each pass runs the model once over the context plus the pending drafts,
/// accepts the longest draft prefix that agrees with the model's own greedy
/// choices, and appends the model's next greedy token. New drafts come
/// from the heads at the last committed position of the same pass.
pub fn decode_speculative<T: Scalar>(otter: &OtterModel<T>, ext: usize, prompt: &[u32], params: &DecodeParams) -> Result<DecodeResult> {
    params.validate()?;
    let cfg = otter.config();
    check_prompt(prompt, cfg.vocab_size)?;
    let e = otter.extensions.get(ext).ok_or_else(|| OtterError::Config(format!("no extension {ext}")))?;
    let heads = e.generation.as_ref().ok_or_else(|| OtterError::Config(format!("extension `{}` has no draft heads", e.config.name)))?;
    let d = cfg.d_inp;
    let hp = otter.h_prime_range(ext);
    let limit = prompt.len() + budget(params, cfg.max_seq_len, prompt.len());
    let mut ctx = prompt.to_vec();
    let mut drafts: Vec<u32> = Vec::new();
    let mut steps = Vec::new();
    while ctx.len() < limit {
        drafts.truncate(cfg.max_seq_len - ctx.len());
        let mut seq = ctx.clone();
        seq.extend_from_slice(&drafts);
        let inf = otter.model.infer(&[&seq])?;
        let greedy_at = |pos: usize| argmax(&probabilities(inf.logits.row(pos), 1.0)) as u32;

        let mut committed = 0;
        let mut pos = ctx.len() - 1;
        for &dr in &drafts {
            if greedy_at(pos) != dr || ctx.len() + committed >= limit {
                break;
            }
            committed += 1;
            pos += 1;
        }
        ctx.extend_from_slice(&drafts[..committed]);
        // the model's own token after the accepted prefix
        if ctx.len() < limit {
            ctx.push(greedy_at(pos));
            committed += 1;
        }
        let hidden = inf.final_hidden.row(pos);
        drafts = (0..heads.len())
            .map(|k| {
                let l = heads.head_logits(k, &hidden[hp.clone()], &hidden[..d], &otter.model.lm_head.tensor)?;
                Ok(argmax(&probabilities(&l, 1.0)) as u32)
            })
            .collect::<Result<_>>()?;
        steps.push(StepInfo { token: *ctx.last().expect("non-empty"), candidates: vec![], accepted: Some(committed) });
    }
    Ok(DecodeResult { strategy: Strategy::Speculative, prompt: prompt.to_vec(), tokens: ctx[prompt.len()..].to_vec(), steps })
}

/// Which extensions play which role during decoding.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Roles {
    pub reward: Option<usize>,
    pub expert: Option<usize>,
    pub anti: Option<usize>,
    pub draft: Option<usize>,
}

impl Roles {
    /// Resolves roles from extension names.
    pub fn by_name<T: Scalar>(
        otter: &OtterModel<T>,
        reward: Option<&str>,
        expert: Option<&str>,
        anti: Option<&str>,
        draft: Option<&str>,
    ) -> Result<Self> {
        let find = |n: Option<&str>| n.map(|n| otter.extension_index(n)).transpose();
        Ok(Self { reward: find(reward)?, expert: find(expert)?, anti: find(anti)?, draft: find(draft)? })
    }

    /// Like [`Roles::by_name`], filling unnamed roles with defaults: the
    /// topmost extension carrying a reward head (reward) or generation heads
    /// (draft), and the extensions named `expert` and `anti`.
    pub fn resolve<T: Scalar>(
        otter: &OtterModel<T>,
        reward: Option<&str>,
        expert: Option<&str>,
        anti: Option<&str>,
        draft: Option<&str>,
    ) -> Result<Self> {
        let mut roles = Self::by_name(otter, reward, expert, anti, draft)?;
        let exts = &otter.extensions;
        let last = |pred: &dyn Fn(usize) -> bool| (0..exts.len()).rev().find(|&i| pred(i));
        roles.reward = roles.reward.or_else(|| last(&|i| exts[i].reward.is_some()));
        roles.draft = roles.draft.or_else(|| last(&|i| exts[i].generation.is_some()));
        roles.expert = roles.expert.or_else(|| otter.extension_index("expert").ok());
        roles.anti = roles.anti.or_else(|| otter.extension_index("anti").ok());
        Ok(roles)
    }
}

/// Runs the strategy named in `params`.
pub fn decode<T: Scalar>(otter: &OtterModel<T>, roles: &Roles, prompt: &[u32], params: &DecodeParams) -> Result<DecodeResult> {
    let need = |r: Option<usize>, what: &str| r.ok_or_else(|| OtterError::Config(format!("{} needs a {what} extension", params.strategy)));
    match params.strategy {
        Strategy::Greedy | Strategy::Topk | Strategy::Topp => decode_base(&otter.model, prompt, params),
        Strategy::ArgsGreedy | Strategy::ArgsTopk => decode_args(otter, need(roles.reward, "reward")?, prompt, params),
        Strategy::Dexp => decode_dexp(otter, Some(need(roles.expert, "expert")?), need(roles.anti, "anti-expert")?, prompt, params),
        Strategy::DexpAnti => decode_dexp(otter, None, need(roles.anti, "anti-expert")?, prompt, params),
        Strategy::Speculative => decode_speculative(otter, need(roles.draft, "draft")?, prompt, params),
    }
}

/// Appends results as JSON lines.
pub fn write_results(path: &Path, results: &[DecodeResult]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| OtterError::io(path, e))?;
    for r in results {
        writeln!(f, "{}", serde_json::to_string(r).expect("results serialize")).map_err(|e| OtterError::io(path, e))?;
    }
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<DecodeResult>> {
    let text = std::fs::read_to_string(path).map_err(|e| OtterError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| OtterError::Format { path: path.into(), detail: e.to_string() }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::otter::{InitStrategy, OtterConfig};
    use crate::transformer::ModelConfig;

    fn otter(seed: u64) -> OtterModel<f64> {
        let base = Model::new_random(ModelConfig::tiny(12, 8, 2, 2), seed).unwrap();
        let mut o = OtterModel::from_base(base).unwrap();
        o.expand(OtterConfig::new("x", 4, 4, 1)).unwrap();
        o.init_extension(0, InitStrategy::Random, seed).unwrap();
        o.attach_reward_head(0).unwrap();
        o.attach_generation_heads(0, 3).unwrap();
        for (i, v) in o.extensions[0].reward.as_mut().unwrap().w.tensor.data_mut().iter_mut().enumerate() {
            *v = i as f64 - 1.5;
        }
        o
    }

    #[test]
    fn argmax_ties_to_lowest_index() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5, 0.2]), 1);
        assert_eq!(ranked(&[0.2, 0.5, 0.5, 0.1]), vec![1, 2, 0, 3]);
    }

    #[test]
    fn args_score_hand_example() {
        let s: Vec<f64> = [(0.2, 0.9), (0.5, 0.1)].iter().map(|&(p, r)| args_score(p, r, 1.5, LmScore::Prob)).collect();
        assert!((s[0] - 1.55).abs() < 1e-12 && (s[1] - 0.65).abs() < 1e-12);
        assert_eq!(argmax(&s), 0);
    }

    #[test]
    fn dexp_mixing_properties() {
        let z = [0.3, -1.0, 2.0];
        assert_eq!(dexp_logits(&z, &[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0], 0.0), z.to_vec());
        for a in [0.5, 2.0] {
            assert_eq!(dexp_logits(&z, &z, &z, a), z.to_vec());
            assert_eq!(dexp_anti_logits(&z, &z, a), z.to_vec());
        }
        let mixed = dexp_logits(&z, &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], 2.0);
        let p = probabilities(&mixed, 1.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // anti-only equals the literal formula up to rounding
        let zm = [1.0, 0.5, -0.5];
        for (a, b) in dexp_anti_logits(&z, &zm, 2.0).iter().zip(z.iter().zip(&zm).map(|(x, m)| 3.0 * x - 2.0 * m)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn nucleus_prefix() {
        assert_eq!(nucleus(&[0.1, 0.6, 0.3], 0.5), vec![1]);
        assert_eq!(nucleus(&[0.1, 0.6, 0.3], 0.7), vec![1, 2]);
        assert_eq!(nucleus(&[0.1, 0.6, 0.3], 1.0), vec![1, 2, 0]);
    }

    #[test]
    fn pick_follows_cumulative_mass() {
        let w = [1.0, 0.0, 3.0];
        assert_eq!(pick(&w, 0.0), 0);
        assert_eq!(pick(&w, 0.2499), 0);
        assert_eq!(pick(&w, 0.25), 2);
        assert_eq!(pick(&w, 0.9999999), 2);
    }

    #[test]
    fn topk_one_is_greedy() {
        let o = otter(1);
        let g = decode_base(&o.model, &[1, 2, 3], &DecodeParams { max_new_tokens: 12, ..DecodeParams::with(Strategy::Greedy) }).unwrap();
        let t =
            decode_base(&o.model, &[1, 2, 3], &DecodeParams { k: 1, max_new_tokens: 12, seed: 5, ..DecodeParams::with(Strategy::Topk) })
                .unwrap();
        assert_eq!(g.tokens, t.tokens);
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let o = otter(2);
        let p = DecodeParams { max_new_tokens: 20, seed: 9, ..DecodeParams::with(Strategy::Topp) };
        assert_eq!(decode_base(&o.model, &[4], &p).unwrap(), decode_base(&o.model, &[4], &p).unwrap());
    }

    #[test]
    fn args_without_reward_weight_is_base() {
        let o = otter(3);
        let prompt = [1, 5, 2];
        let base = decode_base(&o.model, &prompt, &DecodeParams { max_new_tokens: 10, ..DecodeParams::with(Strategy::Greedy) }).unwrap();
        for mode in [LmScore::Prob, LmScore::LogProb] {
            let p = DecodeParams { w: 0.0, lm_score: mode, max_new_tokens: 10, ..DecodeParams::with(Strategy::ArgsGreedy) };
            assert_eq!(decode_args(&o, 0, &prompt, &p).unwrap().tokens, base.tokens);
        }
        let topk = DecodeParams { k: 4, tau: 0.7, seed: 3, max_new_tokens: 10, ..DecodeParams::with(Strategy::Topk) };
        let base = decode_base(&o.model, &prompt, &topk).unwrap();
        let args = DecodeParams { w: 0.0, lm_score: LmScore::LogProb, strategy: Strategy::ArgsTopk, ..topk };
        assert_eq!(decode_args(&o, 0, &prompt, &args).unwrap().tokens, base.tokens);
    }

    #[test]
    fn args_candidate_set_is_top_k() {
        let o = otter(4);
        let p = DecodeParams { k: 3, max_new_tokens: 1, ..DecodeParams::with(Strategy::ArgsGreedy) };
        let r = decode_args(&o, 0, &[2, 3], &p).unwrap();
        let probs = probabilities(o.model.logits(&[2, 3]).unwrap().row(1), 1.0);
        let mut cand: Vec<u32> = r.steps[0].candidates.iter().map(|c| c.0).collect();
        let mut want: Vec<u32> = ranked(&probs)[..3].iter().map(|&i| i as u32).collect();
        cand.sort();
        want.sort();
        assert_eq!(cand, want);
    }

    #[test]
    fn dexp_without_mixing_is_base_top_p() {
        let mut o = otter(5);
        o.freeze();
        o.expand(OtterConfig::new("anti", 2, 2, 1)).unwrap();
        o.attach_generation_heads(1, 1).unwrap();
        let prompt = [3, 1];
        let base =
            decode_base(&o.model, &prompt, &DecodeParams { seed: 7, max_new_tokens: 15, ..DecodeParams::with(Strategy::Topp) }).unwrap();
        let p = DecodeParams { alpha: 0.0, seed: 7, max_new_tokens: 15, ..DecodeParams::with(Strategy::Dexp) };
        assert_eq!(decode_dexp(&o, Some(0), 1, &prompt, &p).unwrap().tokens, base.tokens);
        // zero heads on both experts: z = z+ = z-
        for v in o.extensions[0].generation.as_mut().unwrap().heads[0].tensor.data_mut() {
            *v = 0.0;
        }
        for alpha in [0.5, 2.0] {
            for s in [Strategy::Dexp, Strategy::DexpAnti] {
                let p = DecodeParams { alpha, seed: 7, max_new_tokens: 15, strategy: s, ..DecodeParams::default() };
                assert_eq!(decode_dexp(&o, Some(0), 1, &prompt, &p).unwrap().tokens, base.tokens);
            }
        }
    }

    #[test]
    fn speculative_equals_greedy() {
        let mut o = otter(6);
        let prompt = [1, 2, 3, 4];
        let greedy = decode_base(&o.model, &prompt, &DecodeParams { max_new_tokens: 25, ..DecodeParams::with(Strategy::Greedy) }).unwrap();
        let p = DecodeParams { max_new_tokens: 25, ..DecodeParams::with(Strategy::Speculative) };
        let zero = decode_speculative(&o, 0, &prompt, &p).unwrap();
        assert_eq!(zero.tokens, greedy.tokens);
        for heads in &mut o.extensions[0].generation.as_mut().unwrap().heads {
            for (i, v) in heads.tensor.data_mut().iter_mut().enumerate() {
                *v = ((i * 13) % 7) as f64 - 3.0;
            }
        }
        let noisy = decode_speculative(&o, 0, &prompt, &p).unwrap();
        assert_eq!(noisy.tokens, greedy.tokens);
        for a in noisy.accepted_lengths() {
            assert!((1..=4).contains(&a));
        }
        assert_eq!(noisy.accepted_lengths().iter().sum::<usize>(), 25);
    }

    #[test]
    fn zero_budget_is_empty() {
        let o = otter(7);
        let p = DecodeParams { max_new_tokens: 0, ..DecodeParams::with(Strategy::Greedy) };
        assert!(decode_base(&o.model, &[1], &p).unwrap().tokens.is_empty());
        let p = DecodeParams { max_new_tokens: 0, ..DecodeParams::with(Strategy::Speculative) };
        assert!(decode_speculative(&o, 0, &[1], &p).unwrap().tokens.is_empty());
    }

    #[test]
    fn context_limit_stops_decoding() {
        let mut cfg = ModelConfig::tiny(12, 8, 1, 2);
        cfg.max_seq_len = 6;
        let m = Model::<f64>::new_random(cfg, 1).unwrap();
        let mut o = OtterModel::from_base(m).unwrap();
        o.expand(OtterConfig::new("x", 2, 2, 1)).unwrap();
        o.attach_generation_heads(0, 4).unwrap();
        let p = DecodeParams { max_new_tokens: 50, ..DecodeParams::with(Strategy::Greedy) };
        let g = decode_base(&o.model, &[1, 2], &p).unwrap();
        assert_eq!(g.tokens.len(), 4);
        let s = decode_speculative(&o, 0, &[1, 2], &DecodeParams { strategy: Strategy::Speculative, ..p }).unwrap();
        assert_eq!(s.tokens, g.tokens);
    }

    #[test]
    fn empty_prompt_rejected() {
        let o = otter(8);
        assert!(matches!(decode_base(&o.model, &[], &DecodeParams::default()), Err(OtterError::Input(_))));
    }

    #[test]
    fn top_p_full_mass_matches_softmax_frequencies() {
        let logits = [0.5, -0.2, 1.3, 0.0];
        let probs = probabilities(&logits, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[sample_top_p(&probs, 1.0, rng.random::<f64>()) as usize] += 1;
        }
        for (c, p) in counts.iter().zip(&probs) {
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!((*c as f64 / n as f64 - p).abs() < 3.0 * sigma, "{c} vs {p}");
        }
    }
}
