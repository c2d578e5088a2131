// SPDX-License-Identifier: MIT OR Apache-2.0

//! The `otter` command-line driver.
//!
//! Settings come from built-in defaults, then an optional TOML file
//! (`--config`), then flags. The seed is taken from `--seed`, then the
//! `OTTER_SEED` environment variable, then the file.
//!
//! Exit codes: 0 on success, 1 on verification failure or runtime error,
//! 2 on usage or configuration errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::{llama7b_report, measure_overhead};
use crate::checkpoint::{load_checkpoint, read_manifest, save_checkpoint};
use crate::corpus::{gen_corpus, prompts_from, Corpus, CorpusKind, CorpusSpec, Vocab};
use crate::decoding::{decode, write_results, DecodeParams, LmScore, Roles, Strategy};
use crate::error::{OtterError, Result};
use crate::experiments::{args_study, dexp_study, init_study, speculative_study, write_curves, Recipe, ToyConfig};
use crate::otter::{verify_non_disruption, InitStrategy, OtterConfig, OtterModel, VerifyReport};
use crate::training::{train, write_metrics, Dataset, Objective, TrainConfig};
use crate::transformer::Model;

#[derive(Debug, Parser)]
#[command(name = "otter", version, about = "Non-disruptive parameter insertion toolkit")]
pub struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice.
    #[arg(long, global = true, env = "OTTER_SEED")]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus (text file plus `.spec.toml` sidecar).
    GenCorpus {
        #[arg(long)]
        kind: CorpusKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seq_len: Option<usize>,
    },
    /// Train a base model from scratch on a corpus.
    TrainBase {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        d_inp: Option<usize>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Insert a new extension on top of a checkpoint.
    Insert {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        name: String,
        #[arg(long)]
        d_ext: Option<usize>,
        #[arg(long)]
        d_inner_ext: Option<usize>,
        #[arg(long)]
        n_ext_heads: Option<usize>,
    },
    /// Initialize the trainable blocks of an extension.
    Init {
        #[arg(long)]
        otter: PathBuf,
        /// Defaults to overwriting the input.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Extension name; defaults to the topmost.
        #[arg(long)]
        ext: Option<String>,
        #[arg(long)]
        strategy: Option<InitStrategy>,
    },
    /// Train a reward head on a preference corpus.
    TrainReward(ExtTrain),
    /// Train an expert (clean split) or anti-expert (toxic split) head.
    TrainExperts {
        #[command(flatten)]
        common: ExtTrain,
        #[arg(long, value_enum)]
        split: Split,
    },
    /// Train draft heads for speculative decoding.
    TrainHeads {
        #[command(flatten)]
        common: ExtTrain,
        /// Number of draft heads.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Check that an expanded model reproduces its base model.
    Verify {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        otter: PathBuf,
        #[command(flatten)]
        verify: VerifyFlags,
    },
    /// Decode continuations of prompts.
    Decode {
        #[arg(long)]
        otter: PathBuf,
        #[command(flatten)]
        args: DecodeArgs,
    },
    /// Run a benchmark workload.
    Bench(BenchArgs),
    /// Describe a checkpoint or the 7B-scale parameter accounting.
    Inspect {
        #[arg(long, required_unless_present = "llama7b")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        llama7b: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Clean,
    Toxic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Workload {
    ArgsStudy,
    DexpStudy,
    SpeculativeStudy,
    InitStudy,
    /// Time a decoding strategy of a checkpoint against its base baseline.
    Overhead,
}

#[derive(Debug, Args, Default)]
pub struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    reg_lambda: Option<f64>,
    /// Write per-step records (JSON lines) here.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct VerifyFlags {
    /// Number of random prompts.
    #[arg(long)]
    prompts: Option<usize>,
    #[arg(long)]
    prompt_len: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    /// Where the verification report is written.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExtTrain {
    #[arg(long)]
    otter: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Extension name; defaults to the topmost.
    #[arg(long)]
    ext: Option<String>,
    /// Base checkpoint to verify against; defaults to the base embedded in `--otter`.
    #[arg(long)]
    base: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    verify: VerifyFlags,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    w: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    #[arg(long)]
    lm_score: Option<LmScore>,
    #[arg(long)]
    reward: Option<String>,
    #[arg(long)]
    expert: Option<String>,
    #[arg(long)]
    anti: Option<String>,
    #[arg(long)]
    draft: Option<String>,
    /// Prompt text; repeatable.
    #[arg(long = "prompt")]
    prompts: Vec<String>,
    /// Take prompts from the starts of a corpus' texts.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    n_prompts: usize,
    #[arg(long, default_value_t = 8)]
    prompt_len: usize,
    /// Write results as JSON lines here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum)]
    workload: Workload,
    /// Directory for the report and curves.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Draft heads for the speculative study.
    #[arg(long, default_value_t = 4)]
    draft_heads: usize,
    /// Timed repetitions.
    #[arg(long)]
    reps: Option<usize>,
    /// Checkpoint timed by the overhead workload.
    #[arg(long)]
    otter: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeArgs,
}

// ---------------------------------------------------------------------------

/// Contents of the `--config` file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    /// Model sizes, extension widths and study settings.
    pub toy: ToyConfig,
    /// Overrides of the training recipe (any `TrainConfig` field).
    pub train: toml::Table,
    pub decode: DecodeParams,
    pub verify: VerifySettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySettings {
    pub prompts: usize,
    pub prompt_len: usize,
    pub tol: f64,
}

impl Default for VerifySettings {
    fn default() -> Self {
        Self { prompts: 100, prompt_len: 16, tol: 1e-5 }
    }
}

struct Ctx {
    seed: u64,
    file: FileConfig,
}

impl Ctx {
    fn load(cli: &Cli) -> Result<Self> {
        let file: FileConfig = match &cli.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| OtterError::io(p, e))?;
                toml::from_str(&text).map_err(|e| OtterError::Config(format!("{}: {e}", p.display())))?
            }
            None => FileConfig::default(),
        };
        let seed = cli.seed.or(file.seed).unwrap_or(0);
        Ok(Self { seed, file })
    }

    fn toy(&self) -> ToyConfig {
        ToyConfig { seed: self.seed, ..self.file.toy.clone() }
    }

    fn train_config(&self, recipe: Recipe, flags: &TrainFlags) -> Result<TrainConfig> {
        let mut value = serde_json::to_value(self.toy().recipe(recipe, self.seed)).expect("config serializes");
        for (k, v) in &self.file.train {
            value[k] = serde_json::to_value(v).map_err(|e| OtterError::Config(e.to_string()))?;
        }
        let mut cfg: TrainConfig = serde_json::from_value(value).map_err(|e| OtterError::Config(format!("[train] section: {e}")))?;
        cfg.seed = self.seed;
        if let Some(v) = flags.epochs {
            cfg.epochs = v;
        }
        if flags.max_steps.is_some() {
            cfg.max_steps = flags.max_steps;
        }
        if let Some(v) = flags.lr {
            cfg.lr = v;
        }
        if let Some(v) = flags.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = flags.reg_lambda {
            cfg.reg_lambda = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn verify_settings(&self, flags: &VerifyFlags) -> VerifySettings {
        let f = &self.file.verify;
        VerifySettings {
            prompts: flags.prompts.unwrap_or(f.prompts),
            prompt_len: flags.prompt_len.unwrap_or(f.prompt_len),
            tol: flags.tol.unwrap_or(f.tol),
        }
    }

    fn decode_params(&self, a: &DecodeArgs) -> Result<DecodeParams> {
        let mut p = self.file.decode.clone();
        p.seed = self.seed;
        if let Some(v) = a.strategy {
            p.strategy = v;
        }
        if let Some(v) = a.k {
            p.k = v;
        }
        if let Some(v) = a.p {
            p.p = v;
        }
        if let Some(v) = a.tau {
            p.tau = v;
        }
        if let Some(v) = a.w {
            p.w = v;
        }
        if let Some(v) = a.alpha {
            p.alpha = v;
        }
        if let Some(v) = a.max_new_tokens {
            p.max_new_tokens = v;
        }
        if let Some(v) = a.lm_score {
            p.lm_score = v;
        }
        p.validate()?;
        Ok(p)
    }
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                OtterError::Config(_) => 2,
                _ => 1,
            }
        }
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let ctx = Ctx::load(cli)?;
    match &cli.command {
        Command::GenCorpus { kind, out, count, seq_len } => {
            let mut spec = CorpusSpec::default_for(*kind, ctx.seed);
            spec.count = count.unwrap_or(spec.count);
            spec.seq_len = seq_len.unwrap_or(spec.seq_len);
            let corpus = gen_corpus(&spec)?;
            corpus.save(out)?;
            println!("wrote {} samples to {}", corpus.samples.len(), out.display());
            Ok(())
        }
        Command::TrainBase { corpus, out, d_inp, layers, heads, train: flags } => {
            let mut toy = ctx.toy();
            toy.d_inp = d_inp.unwrap_or(toy.d_inp);
            toy.n_layers = layers.unwrap_or(toy.n_layers);
            toy.n_heads = heads.unwrap_or(toy.n_heads);
            let texts = Corpus::load(corpus)?.encoded_texts(&Vocab::default())?;
            let mut model = OtterModel::from_base(Model::new_random(toy.model_config(), ctx.seed)?)?;
            model.set_trainable(0)?;
            let cfg = ctx.train_config(Recipe::Base, flags)?;
            fit(&mut model, &Objective::Lm, &Dataset::Sequences(texts), &cfg, flags)?;
            model.freeze();
            save_checkpoint(&model, out)?;
            let base = model.base_model()?;
            auto_verify(&ctx, &base, &model, out, &VerifyFlags::default())
        }
        Command::Insert { base, out, name, d_ext, d_inner_ext, n_ext_heads } => {
            let toy = ctx.toy();
            let mut model: OtterModel<f32> = load_checkpoint(base)?;
            let cfg = OtterConfig {
                init: toy.init,
                ..OtterConfig::new(
                    name.clone(),
                    d_ext.unwrap_or(toy.d_ext),
                    d_inner_ext.unwrap_or(toy.d_inner_ext),
                    n_ext_heads.unwrap_or(toy.n_ext_heads),
                )
            };
            model.expand(cfg)?;
            save_checkpoint(&model, out)?;
            let c = model.count_params();
            println!("inserted `{name}`: {} added parameters, {} structural zeros", c.added_count, c.structural_zeros);
            Ok(())
        }
        Command::Init { otter, out, ext, strategy } => {
            let mut model: OtterModel<f32> = load_checkpoint(otter)?;
            let idx = resolve_ext(&model, ext.as_deref())?;
            let strategy = strategy.unwrap_or(model.extensions[idx].config.init);
            let report = model.init_extension(idx, strategy, ctx.seed)?;
            save_checkpoint(&model, out.as_deref().unwrap_or(otter))?;
            println!("initialized {} elements with {strategy}", report.initialized_elements);
            for f in &report.fallbacks {
                println!("  {f}: copy impossible, used normal");
            }
            Ok(())
        }
        Command::TrainReward(common) => train_extension(&ctx, common, Task::Reward),
        Command::TrainExperts { common, split } => train_extension(&ctx, common, Task::Expert(*split)),
        Command::TrainHeads { common, k } => train_extension(&ctx, common, Task::Draft(*k)),
        Command::Verify { base, otter, verify } => {
            let base: OtterModel<f32> = load_checkpoint(base)?;
            let model: OtterModel<f32> = load_checkpoint(otter)?;
            auto_verify(&ctx, &base.model, &model, otter, verify)
        }
        Command::Decode { otter, args: a } => {
            let model: OtterModel<f32> = load_checkpoint(otter)?;
            let params = ctx.decode_params(a)?;
            let roles = resolve_roles(&model, a)?;
            let vocab = Vocab::default();
            let prompts = decode_prompts(a, &vocab)?;
            let mut results = Vec::with_capacity(prompts.len());
            for p in &prompts {
                let r = decode(&model, &roles, p, &params)?;
                println!("{}\t{}", vocab.decode(&r.prompt), vocab.decode(&r.tokens));
                results.push(r);
            }
            if let Some(out) = &a.out {
                write_results(out, &results)?;
            }
            Ok(())
        }
        Command::Bench(b) => bench(&ctx, b),
        Command::Inspect { ckpt, llama7b } => {
            if let Some(path) = ckpt {
                let bytes = std::fs::read(path).map_err(|e| OtterError::io(path, e))?;
                let (m, _) = read_manifest(&bytes)?;
                let model: OtterModel<f32> = load_checkpoint(path)?;
                let c = model.count_params();
                println!("format version {}", m.version);
                println!("model: {}", serde_json::to_string(&m.model).expect("serializes"));
                for e in &m.extensions {
                    println!(
                        "extension `{}` (group {}): d_ext {} d_inner_ext {} heads {} reward_head {} generation_heads {}",
                        e.config.name,
                        e.group,
                        e.config.d_ext,
                        e.config.d_inner_ext,
                        e.config.n_ext_heads,
                        e.reward_head,
                        e.generation_heads
                    );
                }
                println!("trainable group: {:?}", m.trainable_group);
                println!(
                    "parameters: base {} added {} (analytic {}) structural zeros {} ratio {:.4} space ratio {:.4}",
                    c.base_count, c.added_count, c.analytic_added, c.structural_zeros, c.ratio, c.space_ratio
                );
            }
            if *llama7b {
                print!("{}", llama7b_report().text());
            }
            Ok(())
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Task {
    Reward,
    Expert(Split),
    Draft(Option<usize>),
}

fn resolve_ext(model: &OtterModel<f32>, name: Option<&str>) -> Result<usize> {
    match name {
        Some(n) => model.extension_index(n),
        None => model.extensions.len().checked_sub(1).ok_or_else(|| OtterError::Config("checkpoint has no extensions".into())),
    }
}

fn fit(model: &mut OtterModel<f32>, objective: &Objective, data: &Dataset, cfg: &TrainConfig, flags: &TrainFlags) -> Result<()> {
    let records = train(model, objective, data, cfg, |r| {
        log::info!("step {} loss {:.5} reg {:.5} lr {:.2e}", r.step, r.task_loss, r.reg_loss, r.lr)
    })?;
    if let Some(last) = records.last() {
        println!("trained {} steps, final loss {:.5} (reg {:.5})", records.len(), last.task_loss, last.reg_loss);
    }
    if let Some(path) = &flags.metrics {
        write_metrics(path, &records)?;
    }
    Ok(())
}

fn train_extension(ctx: &Ctx, a: &ExtTrain, task: Task) -> Result<()> {
    let mut model: OtterModel<f32> = load_checkpoint(&a.otter)?;
    let idx = resolve_ext(&model, a.ext.as_deref())?;
    let corpus = Corpus::load(&a.corpus)?;
    let vocab = Vocab::default();
    let kind = corpus.spec.kind;
    let want = |k: CorpusKind| {
        if kind == k {
            Ok(())
        } else {
            Err(OtterError::Config(format!("this command needs a {k} corpus, got {kind}")))
        }
    };
    let (objective, data, recipe) = match task {
        Task::Reward => {
            want(CorpusKind::Preference)?;
            if model.extensions[idx].reward.is_none() {
                model.attach_reward_head(idx)?;
            }
            (Objective::Reward { ext: idx }, Dataset::Pairs(corpus.encoded_pairs(&vocab)?), Recipe::Reward)
        }
        Task::Expert(split) => {
            want(CorpusKind::Toxicity)?;
            if model.extensions[idx].generation.is_none() {
                model.attach_generation_heads(idx, 1)?;
            }
            let texts = corpus.encoded_split(&vocab, split == Split::Toxic)?;
            (Objective::ExpertLm { ext: idx }, Dataset::Sequences(texts), Recipe::Expert)
        }
        Task::Draft(k) => {
            let k = k.unwrap_or(TrainConfig::default().k);
            if model.extensions[idx].generation.is_none() {
                model.attach_generation_heads(idx, k)?;
            }
            (Objective::Medusa { ext: idx, c: 0.0 }, Dataset::Sequences(corpus.encoded_texts(&vocab)?), Recipe::Draft)
        }
    };
    let cfg = ctx.train_config(recipe, &a.train)?;
    let objective = match objective {
        Objective::Medusa { ext, .. } => Objective::Medusa { ext, c: cfg.medusa_c },
        o => o,
    };
    fit(&mut model, &objective, &data, &cfg, &a.train)?;
    model.freeze();
    save_checkpoint(&model, &a.out)?;
    let base = match &a.base {
        Some(p) => load_checkpoint::<f32>(p)?.model,
        None => model.base_model()?,
    };
    auto_verify(ctx, &base, &model, &a.out, &a.verify)
}

/// Runs the non-disruption check, writes its report next to `target` (or
/// to `--report`) and fails with a verification error on any deviation.
fn auto_verify(ctx: &Ctx, base: &Model<f32>, model: &OtterModel<f32>, target: &Path, flags: &VerifyFlags) -> Result<()> {
    let s = ctx.verify_settings(flags);
    let report_path = flags.report.clone().unwrap_or_else(|| {
        let mut p = target.as_os_str().to_owned();
        p.push(".verify.json");
        PathBuf::from(p)
    });
    let prompts = random_prompts(ctx.seed, s.prompts, s.prompt_len.min(base.config.max_seq_len), base.config.vocab_size);
    let outcome = verify_non_disruption(base, model, &prompts, s.tol);
    let json = match &outcome {
        Ok(r) => serde_json::json!({ "passed": true, "report": r }),
        Err(e) => serde_json::json!({ "passed": false, "error": e.to_string() }),
    };
    std::fs::write(&report_path, serde_json::to_string_pretty(&json).expect("serializes")).map_err(|e| OtterError::io(&report_path, e))?;
    match outcome {
        Ok(VerifyReport { max_deviation, zero_elements_checked, .. }) => {
            println!(
                "non-disruption verified on {} prompts: max deviation {max_deviation:e} (tol {:e}), {zero_elements_checked} zeros checked; report: {}",
                s.prompts,
                s.tol,
                report_path.display()
            );
            Ok(())
        }
        Err(OtterError::Verification { location, detail }) => {
            Err(OtterError::Verification { location, detail: format!("{detail}; report: {}", report_path.display()) })
        }
        Err(e) => Err(e),
    }
}

/// Uniformly random token prompts.
pub fn random_prompts(seed: u64, n: usize, len: usize, vocab: usize) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..len.max(1)).map(|_| rng.random_range(0..vocab as u32)).collect()).collect()
}

fn resolve_roles(model: &OtterModel<f32>, a: &DecodeArgs) -> Result<Roles> {
    Roles::resolve(model, a.reward.as_deref(), a.expert.as_deref(), a.anti.as_deref(), a.draft.as_deref())
}

fn decode_prompts(a: &DecodeArgs, vocab: &Vocab) -> Result<Vec<Vec<u32>>> {
    let mut prompts = a.prompts.iter().map(|p| vocab.encode(p)).collect::<Result<Vec<_>>>()?;
    if let Some(path) = &a.corpus {
        let texts = Corpus::load(path)?.encoded_texts(vocab)?;
        prompts.extend(prompts_from(&texts[..a.n_prompts.min(texts.len())], a.prompt_len));
    }
    if prompts.is_empty() || prompts.iter().any(Vec::is_empty) {
        return Err(OtterError::Config("give at least one non-empty --prompt or a --corpus".into()));
    }
    Ok(prompts)
}

fn bench(ctx: &Ctx, b: &BenchArgs) -> Result<()> {
    let mut toy = ctx.toy();
    toy.reps = b.reps.unwrap_or(toy.reps);
    if let Some(dir) = &b.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| OtterError::io(dir, e))?;
    }
    let write = |name: &str, report: &serde_json::Value, curves: &[crate::experiments::Curve]| -> Result<()> {
        if let Some(dir) = &b.out_dir {
            let p = dir.join(format!("{name}.json"));
            std::fs::write(&p, serde_json::to_string_pretty(report).expect("serializes")).map_err(|e| OtterError::io(&p, e))?;
            if !curves.is_empty() {
                write_curves(&dir.join(format!("{name}.curves.jsonl")), curves)?;
            }
            println!("wrote {}", p.display());
        }
        Ok(())
    };
    match b.workload {
        Workload::ArgsStudy => {
            let s = args_study(&toy)?;
            println!(
                "oracle lexicon fraction: greedy {:.4}  args_greedy(w={}) {:.4}  change {:+.1}%",
                s.base_oracle,
                s.w,
                s.args_oracle,
                100.0 * s.oracle_gain()
            );
            println!(
                "evaluation reward: greedy {:.4}  args_greedy {:.4}  (evaluator pair accuracy {:.3})",
                s.base_eval_reward, s.args_eval_reward, s.eval_reward_accuracy
            );
            let mut v = serde_json::to_value(&s).expect("serializes");
            v.as_object_mut().expect("object").remove("curves");
            write("args-study", &v, &s.curves)
        }
        Workload::DexpStudy => {
            let s = dexp_study(&toy)?;
            println!(
                "avg_max toxicity: top-p {:.4}  dexp(alpha={}) {:.4}  anti-only {:.4}",
                s.base.avg_max, s.alpha, s.dexp.avg_max, s.anti_only.avg_max
            );
            println!("prob_any toxicity: top-p {:.4}  dexp {:.4}  anti-only {:.4}", s.base.prob_any, s.dexp.prob_any, s.anti_only.prob_any);
            let mut v = serde_json::to_value(&s).expect("serializes");
            v.as_object_mut().expect("object").remove("curves");
            write("dexp-study", &v, &s.curves)
        }
        Workload::SpeculativeStudy => {
            let s = speculative_study(&toy, b.draft_heads)?;
            println!("K={} average accepted length {:.4}; output equals greedy: {}", s.k, s.average_accepted, s.matches_greedy);
            print!("{}", s.overhead.table());
            let mut v = serde_json::to_value(&s).expect("serializes");
            v.as_object_mut().expect("object").remove("curves");
            write("speculative-study", &v, &s.curves)
        }
        Workload::InitStudy => {
            let s = init_study(&toy)?;
            print!("{}", s.table());
            println!("copy and normal below random on final training loss: {}", s.informed_beats_random());
            let v = serde_json::json!({ "runs": s.runs.iter().map(|r| serde_json::json!({
                "strategy": r.strategy,
                "final_train_loss": r.final_train_loss,
                "validation_loss": r.validation_loss,
                "validation_accuracy": r.validation_accuracy,
            })).collect::<Vec<_>>() });
            write("init-study", &v, &s.curves())
        }
        Workload::Overhead => {
            let otter = b.otter.as_ref().ok_or_else(|| OtterError::Config("the overhead workload needs --otter".into()))?;
            let a = &b.decode;
            let model: OtterModel<f32> = load_checkpoint(otter)?;
            let params = ctx.decode_params(a)?;
            let roles = resolve_roles(&model, a)?;
            let prompts = decode_prompts(a, &Vocab::default())?;
            let report = measure_overhead(&model.base_model()?, &model, &roles, &prompts, &params, toy.reps)?;
            print!("{}", report.table());
            write("overhead", &serde_json::to_value(&report).expect("serializes"), &[])
        }
    }
}
