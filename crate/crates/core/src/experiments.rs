// SPDX-License-Identifier: MIT OR Apache-2.0

//! Toy-scale experiment pipelines: reward-guided search, bi-expert
//! detoxification, speculative decoding and the initialization study.
//! Each pipeline generates its corpora, trains a base model, inserts and
//! trains extensions, and measures the decoders against their baselines.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::{avg_reward, lexicon_fraction, lexicon_toxicity, mean, measure_overhead, OverheadReport, ToxicityReport};
use crate::corpus::{gen_corpus, prompts_from, CorpusKind, CorpusSpec, Vocab};
use crate::decoding::{decode, DecodeParams, Roles, Strategy};
use crate::error::{OtterError, Result};
use crate::otter::{InitStrategy, OtterConfig, OtterModel};
use crate::training::{evaluate, train, Dataset, Objective, StepRecord, TrainConfig};
use crate::transformer::{Model, ModelConfig};

/// Sizes and schedules shared by the pipelines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub seed: u64,
    pub d_inp: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub base_epochs: usize,
    pub base_lr: f64,
    pub ext_lr: f64,
    pub batch_size: usize,
    /// Extension widths: hidden, FFN inner, attention heads.
    pub d_ext: usize,
    pub d_inner_ext: usize,
    pub n_ext_heads: usize,
    pub init: InitStrategy,
    pub prompt_len: usize,
    pub n_prompts: usize,
    pub max_new_tokens: usize,
    pub samples_per_prompt: usize,
    /// Timed repetitions for overhead measurements.
    pub reps: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            d_inp: 32,
            n_layers: 2,
            n_heads: 4,
            base_epochs: 6,
            base_lr: 3e-3,
            ext_lr: 2e-3,
            batch_size: 8,
            d_ext: 16,
            d_inner_ext: 32,
            n_ext_heads: 2,
            init: InitStrategy::Copy,
            prompt_len: 8,
            n_prompts: 32,
            max_new_tokens: 24,
            samples_per_prompt: 4,
            reps: 5,
        }
    }
}

impl ToyConfig {
    pub fn model_config(&self) -> ModelConfig {
        let mut m = ModelConfig::tiny(Vocab::default().len(), self.d_inp, self.n_layers, self.n_heads);
        m.max_seq_len = 64;
        m
    }

    fn ext(&self, name: &str) -> OtterConfig {
        OtterConfig { init: self.init, ..OtterConfig::new(name, self.d_ext, self.d_inner_ext, self.n_ext_heads) }
    }

    /// Training schedule of `recipe` at this scale.
    pub fn recipe(&self, recipe: Recipe, seed: u64) -> TrainConfig {
        let (epochs, lr, reg_lambda) = match recipe {
            Recipe::Base => (self.base_epochs, self.base_lr, 0.0),
            Recipe::Reward => (5, self.ext_lr, 5.0),
            Recipe::Expert => (3, self.ext_lr, 10.0),
            Recipe::Draft => (5, self.ext_lr, 50.0),
        };
        TrainConfig { epochs, lr, warmup_frac: 0.01, reg_lambda, batch_size: self.batch_size, seed, ..TrainConfig::default() }
    }
}

/// The training stages of the pipelines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recipe {
    /// Next-token training of the base model.
    Base,
    /// Preference training of a reward head.
    Reward,
    /// LM training of an expert or anti-expert head.
    Expert,
    /// Draft-head training for speculative decoding.
    Draft,
}

/// A named loss curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub stage: String,
    pub records: Vec<StepRecord>,
}

fn curve(stage: &str, records: Vec<StepRecord>) -> Curve {
    Curve { stage: stage.to_string(), records }
}

/// Writes curves as JSON lines tagged with their stage.
pub fn write_curves(path: &Path, curves: &[Curve]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| OtterError::io(path, e))?;
    for c in curves {
        for r in &c.records {
            let mut v = serde_json::to_value(r).expect("records serialize");
            v["stage"] = serde_json::Value::String(c.stage.clone());
            writeln!(f, "{v}").map_err(|e| OtterError::io(path, e))?;
        }
    }
    Ok(())
}

/// Trains a base model from scratch on `texts`.
pub fn train_base(cfg: &ToyConfig, texts: &[Vec<u32>], seed: u64) -> Result<(OtterModel<f32>, Curve)> {
    let mut otter = OtterModel::from_base(Model::new_random(cfg.model_config(), seed)?)?;
    otter.set_trainable(0)?;
    let recs = train(&mut otter, &Objective::Lm, &Dataset::Sequences(texts.to_vec()), &cfg.recipe(Recipe::Base, seed), |_| {})?;
    otter.freeze();
    Ok((otter, curve("base", recs)))
}

/// Inserts a reward extension into `model` and trains it on `pairs`.
pub fn add_reward_extension(
    cfg: &ToyConfig,
    model: &mut OtterModel<f32>,
    name: &str,
    pairs: &[(Vec<u32>, Vec<u32>)],
    seed: u64,
) -> Result<(usize, Curve)> {
    let idx = model.expand(cfg.ext(name))?;
    model.init_extension(idx, cfg.init, seed)?;
    model.attach_reward_head(idx)?;
    let tc = cfg.recipe(Recipe::Reward, seed);
    let recs = train(model, &Objective::Reward { ext: idx }, &Dataset::Pairs(pairs.to_vec()), &tc, |_| {})?;
    model.freeze();
    Ok((idx, curve(name, recs)))
}

/// Inserts an extension with one generation head trained as an LM on `texts`.
pub fn add_expert_extension(
    cfg: &ToyConfig,
    model: &mut OtterModel<f32>,
    name: &str,
    texts: &[Vec<u32>],
    seed: u64,
) -> Result<(usize, Curve)> {
    let idx = model.expand(cfg.ext(name))?;
    model.init_extension(idx, cfg.init, seed)?;
    model.attach_generation_heads(idx, 1)?;
    let tc = cfg.recipe(Recipe::Expert, seed);
    let recs = train(model, &Objective::ExpertLm { ext: idx }, &Dataset::Sequences(texts.to_vec()), &tc, |_| {})?;
    model.freeze();
    Ok((idx, curve(name, recs)))
}

/// Inserts an extension with `k` draft heads trained on `texts`.
pub fn add_draft_extension(
    cfg: &ToyConfig,
    model: &mut OtterModel<f32>,
    name: &str,
    k: usize,
    texts: &[Vec<u32>],
    seed: u64,
) -> Result<(usize, Curve)> {
    let idx = model.expand(cfg.ext(name))?;
    model.init_extension(idx, cfg.init, seed)?;
    model.attach_generation_heads(idx, k)?;
    let tc = TrainConfig { k, ..cfg.recipe(Recipe::Draft, seed) };
    let recs = train(model, &Objective::Medusa { ext: idx, c: tc.medusa_c }, &Dataset::Sequences(texts.to_vec()), &tc, |_| {})?;
    model.freeze();
    Ok((idx, curve(name, recs)))
}

fn generate(model: &OtterModel<f32>, roles: &Roles, prompts: &[Vec<u32>], params: &DecodeParams) -> Result<Vec<Vec<u32>>> {
    prompts.iter().map(|p| decode(model, roles, p, params).map(|r| r.tokens)).collect()
}

fn join(prompts: &[Vec<u32>], continuations: &[Vec<u32>]) -> Vec<Vec<u32>> {
    prompts.iter().zip(continuations).map(|(p, c)| p.iter().chain(c).copied().collect()).collect()
}

fn mean_fraction(texts: &[Vec<u32>], lexicon: &HashSet<u32>) -> Result<f64> {
    mean(&texts.iter().map(|t| lexicon_fraction(t, lexicon)).collect::<Vec<_>>())
}

fn relative_change(before: f64, after: f64) -> f64 {
    if before == 0.0 {
        if after == 0.0 {
            0.0
        } else {
            f64::INFINITY * after.signum()
        }
    } else {
        (after - before) / before
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArgsStudy {
    /// Good-lexicon fraction of base greedy / reward-guided greedy continuations.
    pub base_oracle: f64,
    pub args_oracle: f64,
    /// Evaluation reward head's mean score on the same outputs.
    pub base_eval_reward: f64,
    pub args_eval_reward: f64,
    pub eval_reward_accuracy: f64,
    pub w: f64,
    pub curves: Vec<Curve>,
}

impl ArgsStudy {
    pub fn oracle_gain(&self) -> f64 {
        relative_change(self.base_oracle, self.args_oracle)
    }
}

/// Trains a reward extension on a preference corpus and compares
/// reward-guided greedy decoding with plain greedy decoding. A second
/// reward model, trained on an independent corpus, scores the outputs.
pub fn args_study(cfg: &ToyConfig) -> Result<ArgsStudy> {
    let vocab = Vocab::default();
    let seed = cfg.seed;
    let train_c = gen_corpus(&CorpusSpec::default_for(CorpusKind::Preference, seed))?;
    let eval_c = gen_corpus(&CorpusSpec::default_for(CorpusKind::Preference, seed.wrapping_add(1000)))?;
    let held_out =
        gen_corpus(&CorpusSpec { count: cfg.n_prompts, ..CorpusSpec::default_for(CorpusKind::Preference, seed.wrapping_add(2000)) })?;
    let good = train_c.marker_lexicon(&vocab)?;
    let pairs = train_c.encoded_pairs(&vocab)?;
    let (mut model, base_curve) = train_base(cfg, &train_c.encoded_texts(&vocab)?, seed)?;
    let mut evaluator = model.clone();
    let (reward, r_curve) = add_reward_extension(cfg, &mut model, "reward", &pairs, seed.wrapping_add(1))?;
    let eval_pairs = eval_c.encoded_pairs(&vocab)?;
    let (eval_idx, e_curve) = add_reward_extension(cfg, &mut evaluator, "eval", &eval_pairs, seed.wrapping_add(2))?;
    let eval_reward_accuracy = pair_accuracy(&evaluator, eval_idx, &held_out.encoded_pairs(&vocab)?)?;

    let prompt_src: Vec<Vec<u32>> = held_out.encoded_pairs(&vocab)?.into_iter().map(|(c, _)| c).collect();
    let prompts = prompts_from(&prompt_src, cfg.prompt_len);
    let roles = Roles { reward: Some(reward), ..Roles::default() };
    let base_p = DecodeParams { max_new_tokens: cfg.max_new_tokens, seed, ..DecodeParams::with(Strategy::Greedy) };
    let args_p = DecodeParams { strategy: Strategy::ArgsGreedy, w: 1.5, ..base_p.clone() };
    let base_out = generate(&model, &roles, &prompts, &base_p)?;
    let args_out = generate(&model, &roles, &prompts, &args_p)?;
    Ok(ArgsStudy {
        base_oracle: mean_fraction(&base_out, &good)?,
        args_oracle: mean_fraction(&args_out, &good)?,
        base_eval_reward: avg_reward(&evaluator, eval_idx, &join(&prompts, &base_out))?,
        args_eval_reward: avg_reward(&evaluator, eval_idx, &join(&prompts, &args_out))?,
        eval_reward_accuracy,
        w: args_p.w,
        curves: vec![base_curve, r_curve, e_curve],
    })
}

/// Fraction of pairs the reward head ranks correctly.
pub fn pair_accuracy(model: &OtterModel<f32>, ext: usize, pairs: &[(Vec<u32>, Vec<u32>)]) -> Result<f64> {
    let mut right = 0usize;
    for (c, r) in pairs {
        let sc = avg_reward(model, ext, std::slice::from_ref(c))?;
        let sr = avg_reward(model, ext, std::slice::from_ref(r))?;
        right += usize::from(sc > sr);
    }
    Ok(right as f64 / pairs.len().max(1) as f64)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DexpStudy {
    pub base: ToxicityReport,
    pub dexp: ToxicityReport,
    pub anti_only: ToxicityReport,
    pub alpha: f64,
    pub curves: Vec<Curve>,
}

impl DexpStudy {
    pub fn dexp_reduction(&self) -> f64 {
        -relative_change(self.base.avg_max, self.dexp.avg_max)
    }

    pub fn anti_reduction(&self) -> f64 {
        -relative_change(self.base.avg_max, self.anti_only.avg_max)
    }
}

/// Trains a base model on mixed clean/toxic text, stacks an expert (clean)
/// and then an anti-expert (toxic) extension, and compares the toxicity of
/// top-p samples with and without expert mixing.
pub fn dexp_study(cfg: &ToyConfig) -> Result<DexpStudy> {
    let vocab = Vocab::default();
    let seed = cfg.seed;
    let corpus = gen_corpus(&CorpusSpec::default_for(CorpusKind::Toxicity, seed))?;
    let held_out = gen_corpus(&CorpusSpec {
        count: cfg.n_prompts.div_ceil(2),
        ..CorpusSpec::default_for(CorpusKind::Toxicity, seed.wrapping_add(2000))
    })?;
    let toxic = corpus.toxic_lexicon(&vocab)?;
    let (mut model, base_curve) = train_base(cfg, &corpus.encoded_texts(&vocab)?, seed)?;
    let (expert, x_curve) = add_expert_extension(cfg, &mut model, "expert", &corpus.encoded_split(&vocab, false)?, seed.wrapping_add(1))?;
    let (anti, a_curve) = add_expert_extension(cfg, &mut model, "anti", &corpus.encoded_split(&vocab, true)?, seed.wrapping_add(2))?;

    let prompts = prompts_from(&held_out.encoded_texts(&vocab)?, cfg.prompt_len);
    let roles = Roles { expert: Some(expert), anti: Some(anti), ..Roles::default() };
    let sample = |strategy: Strategy, alpha: f64| -> Result<ToxicityReport> {
        let mut per_prompt = Vec::with_capacity(prompts.len());
        for (i, p) in prompts.iter().enumerate() {
            let mut outs = Vec::with_capacity(cfg.samples_per_prompt);
            for s in 0..cfg.samples_per_prompt {
                let params = DecodeParams {
                    strategy,
                    alpha,
                    max_new_tokens: cfg.max_new_tokens,
                    seed: seed.wrapping_add((i * cfg.samples_per_prompt + s) as u64),
                    ..DecodeParams::with(strategy)
                };
                outs.push(decode(&model, &roles, p, &params)?.tokens);
            }
            per_prompt.push(outs);
        }
        lexicon_toxicity(&per_prompt, &toxic)
    };
    let alpha = 2.0;
    Ok(DexpStudy {
        base: sample(Strategy::Topp, 0.0)?,
        dexp: sample(Strategy::Dexp, alpha)?,
        anti_only: sample(Strategy::DexpAnti, alpha)?,
        alpha,
        curves: vec![base_curve, x_curve, a_curve],
    })
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeculativeStudy {
    pub k: usize,
    pub average_accepted: f64,
    /// Whether every output equalled plain greedy decoding.
    pub matches_greedy: bool,
    pub overhead: OverheadReport,
    pub curves: Vec<Curve>,
}

/// Trains draft heads on a low-entropy corpus and measures accepted length
/// and overhead of speculative decoding against plain greedy decoding.
pub fn speculative_study(cfg: &ToyConfig, k: usize) -> Result<SpeculativeStudy> {
    let vocab = Vocab::default();
    let seed = cfg.seed;
    let corpus = gen_corpus(&CorpusSpec::default_for(CorpusKind::Speculative, seed))?;
    let held_out =
        gen_corpus(&CorpusSpec { count: cfg.n_prompts, ..CorpusSpec::default_for(CorpusKind::Speculative, seed.wrapping_add(2000)) })?;
    let texts = corpus.encoded_texts(&vocab)?;
    let (mut model, base_curve) = train_base(cfg, &texts, seed)?;
    let base = model.base_model()?;
    let (draft, d_curve) = add_draft_extension(cfg, &mut model, "draft", k, &texts, seed.wrapping_add(1))?;

    let prompts = prompts_from(&held_out.encoded_texts(&vocab)?, cfg.prompt_len);
    let roles = Roles { draft: Some(draft), ..Roles::default() };
    let spec_p = DecodeParams { max_new_tokens: cfg.max_new_tokens, seed, ..DecodeParams::with(Strategy::Speculative) };
    let greedy_p = DecodeParams { strategy: Strategy::Greedy, ..spec_p.clone() };
    let mut accepted = Vec::new();
    let mut matches_greedy = true;
    for p in &prompts {
        let r = decode(&model, &roles, p, &spec_p)?;
        matches_greedy &= r.tokens == decode(&model, &roles, p, &greedy_p)?.tokens;
        accepted.extend(r.accepted_lengths().into_iter().map(|a| a as f64));
    }
    let overhead = measure_overhead(&base, &model, &roles, &prompts, &spec_p, cfg.reps)?;
    Ok(SpeculativeStudy { k, average_accepted: mean(&accepted)?, matches_greedy, overhead, curves: vec![base_curve, d_curve] })
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitRun {
    pub strategy: InitStrategy,
    /// Mean total loss over the last tenth of the training steps.
    pub final_train_loss: f64,
    /// Preference loss on held-out pairs after training.
    pub validation_loss: f64,
    pub validation_accuracy: f64,
    pub curve: Curve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitStudy {
    pub runs: Vec<InitRun>,
}

impl InitStudy {
    pub fn run(&self, s: InitStrategy) -> Option<&InitRun> {
        self.runs.iter().find(|r| r.strategy == s)
    }

    /// Copy and normal initialization both end below random initialization.
    pub fn informed_beats_random(&self) -> bool {
        match (self.run(InitStrategy::Copy), self.run(InitStrategy::Normal), self.run(InitStrategy::Random)) {
            (Some(c), Some(n), Some(r)) => c.final_train_loss < r.final_train_loss && n.final_train_loss < r.final_train_loss,
            _ => false,
        }
    }

    pub fn table(&self) -> String {
        let mut s = String::from("strategy  final_train_loss  validation_loss  validation_accuracy\n");
        for r in &self.runs {
            s.push_str(&format!(
                "{:<8}  {:>16.5}  {:>15.5}  {:>19.4}\n",
                r.strategy.to_string(),
                r.final_train_loss,
                r.validation_loss,
                r.validation_accuracy
            ));
        }
        if let (Some(c), Some(n)) = (self.run(InitStrategy::Copy), self.run(InitStrategy::Normal)) {
            s.push_str(&format!("validation gap (normal - copy): {:.5}\n", n.validation_loss - c.validation_loss));
        }
        s
    }

    pub fn curves(&self) -> Vec<Curve> {
        self.runs.iter().map(|r| r.curve.clone()).collect()
    }
}

/// Trains the same reward extension from one base model under each
/// initialization strategy and compares the loss curves.
pub fn init_study(cfg: &ToyConfig) -> Result<InitStudy> {
    let vocab = Vocab::default();
    let seed = cfg.seed;
    let train_c = gen_corpus(&CorpusSpec::default_for(CorpusKind::Preference, seed))?;
    let val_c = gen_corpus(&CorpusSpec { count: 128, ..CorpusSpec::default_for(CorpusKind::Preference, seed.wrapping_add(3000)) })?;
    let pairs = train_c.encoded_pairs(&vocab)?;
    let val = Dataset::Pairs(val_c.encoded_pairs(&vocab)?);
    let (base, _) = train_base(cfg, &train_c.encoded_texts(&vocab)?, seed)?;
    let mut runs = Vec::new();
    for strategy in InitStrategy::ALL {
        let mut model = base.clone();
        let c = ToyConfig { init: strategy, ..cfg.clone() };
        let (idx, mut curve) = add_reward_extension(&c, &mut model, "reward", &pairs, seed.wrapping_add(1))?;
        curve.stage = format!("init-{strategy}");
        let tail = (curve.records.len() / 10).max(1);
        let final_train_loss = mean(&curve.records[curve.records.len() - tail..].iter().map(|r| r.total).collect::<Vec<_>>())?;
        let validation_loss = evaluate(&model, &Objective::Reward { ext: idx }, &val, cfg.batch_size)?;
        let Dataset::Pairs(vp) = &val else { unreachable!() };
        let validation_accuracy = pair_accuracy(&model, idx, vp)?;
        runs.push(InitRun { strategy, final_train_loss, validation_loss, validation_accuracy, curve });
    }
    Ok(InitStudy { runs })
}
