// SPDX-License-Identifier: MIT OR Apache-2.0

//! Non-disruptive parameter insertion.
//!
//! An extension widens the residual stream by `d_ext`, the FFN inner layer
//! by `d_inner_ext` and adds `n_ext_heads` attention heads. Every weight
//! matrix grows into the block layout `[[W, 0], [A, B]]`: the original
//! rows keep reading only original inputs (the `0` block is a structural
//! zero), while the new rows `[A, B]` read everything. Together with RMSNorm
//! denominators restricted to the original coordinates, the original
//! coordinates of every hidden state, and therefore the LM logits, are
//! exactly those of the base model.
//!
//! Extensions stack: a later extension may read earlier ones, never the
//! other way round, and only the topmost extension may be trained.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{OtterError, Result};
use crate::heads::{GenerationHeads, RewardHead};
use crate::params::{block_owner, GroupWidths, Param, STRUCTURAL_ZERO};
use crate::tensor::{rmsnorm_rows, Scalar, Tensor};
use crate::transformer::{BoundModel, ForwardTrace, Model, ModelConfig};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// How the trainable blocks of a fresh extension are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InitStrategy {
    /// `U(-0.5, 0.5)` per element.
    Random,
    /// Gaussian matching the sample mean and variance of the corresponding
    /// original parameter.
    Normal,
    /// Rows (FFN) and heads (attention) copied from randomly chosen
    /// originals, tiled to fit the wider inputs.
    #[default]
    Copy,
}

impl InitStrategy {
    pub const ALL: [InitStrategy; 3] = [InitStrategy::Random, InitStrategy::Normal, InitStrategy::Copy];
}

impl fmt::Display for InitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitStrategy::Random => "random",
            InitStrategy::Normal => "normal",
            InitStrategy::Copy => "copy",
        })
    }
}

impl FromStr for InitStrategy {
    type Err = OtterError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" | "rand" => Ok(Self::Random),
            "normal" | "norm" => Ok(Self::Normal),
            "copy" => Ok(Self::Copy),
            other => Err(OtterError::Config(format!("unknown init strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OtterConfig {
    /// Label used to address the extension (e.g. `reward`, `expert`).
    pub name: String,
    /// Extension width of the residual stream.
    pub d_ext: usize,
    /// Extension width of the FFN inner layer.
    pub d_inner_ext: usize,
    /// Number of inserted attention heads.
    pub n_ext_heads: usize,
    #[serde(default)]
    pub init: InitStrategy,
    /// Weight of the RMS regularizer during training.
    #[serde(default)]
    pub reg_lambda: f64,
}

impl OtterConfig {
    pub fn new(name: impl Into<String>, d_ext: usize, d_inner_ext: usize, n_ext_heads: usize) -> Self {
        Self { name: name.into(), d_ext, d_inner_ext, n_ext_heads, init: InitStrategy::Copy, reg_lambda: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_ext == 0 && self.d_inner_ext == 0 && self.n_ext_heads == 0 {
            return Err(OtterError::Config("an extension must add at least one dimension or head".into()));
        }
        if self.d_ext == 0 {
            // Heads write only into extension rows of W_O and task heads read H';
            // with no residual extension neither has anywhere to go.
            return Err(OtterError::Config(format!(
                "extension `{}` needs d_ext > 0 (got d_inner_ext {}, n_ext_heads {})",
                self.name, self.d_inner_ext, self.n_ext_heads
            )));
        }
        if !(self.reg_lambda >= 0.0) {
            return Err(OtterError::Config(format!("reg_lambda must be >= 0, got {}", self.reg_lambda)));
        }
        if self.name.is_empty() {
            return Err(OtterError::Config("extension name must not be empty".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// A single expanded linear layer
// ---------------------------------------------------------------------------

/// Plain linear layer `W x + b`, `W` stored `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(OtterError::Config(format!("linear weight must be 2-D, got {:?}", weight.shape())));
        }
        if let Some(b) = &bias {
            if b.numel() != weight.shape()[0] {
                return Err(OtterError::Config("bias length must equal output width".into()));
            }
        }
        Ok(Self { weight, bias })
    }

    pub fn apply(&self, x: &[T]) -> Result<Vec<T>> {
        let (d_out, d_in) = (self.weight.shape()[0], self.weight.shape()[1]);
        apply_rows(self.weight.data(), d_out, d_in, self.bias.as_ref().map(|b| b.data()), x)
    }
}

fn apply_rows<T: Scalar>(w: &[T], d_out: usize, d_in: usize, b: Option<&[T]>, x: &[T]) -> Result<Vec<T>> {
    if d_in == 0 || !x.len().is_multiple_of(d_in) {
        return Err(OtterError::Config(format!("input of length {} for a layer with {d_in} inputs", x.len())));
    }
    let n = x.len() / d_in;
    let mut y = vec![T::zero(); n * d_out];
    crate::tensor::linear_rows(x, n, d_in, w, d_out, b, &mut y);
    Ok(y)
}

/// Linear layer grown to `[[W, 0], [A, B]]` with bias `[b; b']`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedLinear<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub d_in: usize,
    pub d_out: usize,
    pub d_in_ext: usize,
    pub d_out_ext: usize,
}

impl<T: Scalar> ExpandedLinear<T> {
    /// Applies the expanded layer to rows of width `d_in + d_in_ext`.
    pub fn apply(&self, x: &[T]) -> Result<Vec<T>> {
        apply_rows(
            self.weight.tensor.data(),
            self.d_out + self.d_out_ext,
            self.d_in + self.d_in_ext,
            self.bias.as_ref().map(|b| b.tensor.data()),
            x,
        )
    }

    /// The `A` block (`[d_out_ext, d_in]`), row-major.
    pub fn block_a(&self) -> Vec<T> {
        self.block(self.d_out..self.d_out + self.d_out_ext, 0..self.d_in)
    }

    /// The `B` block (`[d_out_ext, d_in_ext]`), row-major.
    pub fn block_b(&self) -> Vec<T> {
        self.block(self.d_out..self.d_out + self.d_out_ext, self.d_in..self.d_in + self.d_in_ext)
    }

    fn block(&self, rows: Range<usize>, cols: Range<usize>) -> Vec<T> {
        let width = self.d_in + self.d_in_ext;
        let data = self.weight.tensor.data();
        rows.flat_map(|r| cols.clone().map(move |c| data[r * width + c])).collect()
    }

    pub fn trainable_mask(&self) -> Vec<bool> {
        self.weight.trainable_mask(Some(1))
    }
}

/// Grows `layer` by `d_in_ext` inputs and `d_out_ext` outputs. The new
/// blocks are zero unless `init` gives a strategy and seed.
pub fn expand_linear<T: Scalar>(
    layer: &Linear<T>,
    d_in_ext: usize,
    d_out_ext: usize,
    init: Option<(InitStrategy, u64)>,
) -> Result<ExpandedLinear<T>> {
    let (d_out, d_in) = (layer.weight.shape()[0], layer.weight.shape()[1]);
    let mut weight =
        Param::new("weight", Tensor::zeros(vec![d_out + d_out_ext, d_in + d_in_ext]), block_owner(&[d_out, d_out_ext], &[d_in, d_in_ext]))?;
    copy_overlap(&layer.weight, &mut weight.tensor);
    let mut bias = match &layer.bias {
        Some(b) => {
            let mut p = Param::new("bias", Tensor::zeros(vec![d_out + d_out_ext]), crate::params::group_of_index(&[d_out, d_out_ext]))?;
            copy_overlap(b, &mut p.tensor);
            Some(p)
        }
        None => None,
    };
    if let Some((strategy, seed)) = init {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = d_out..d_out + d_out_ext;
        let sources = init_rows(&mut weight, rows.clone(), d_out, d_in, strategy, 1, &mut rng, &mut Vec::new());
        if let Some(b) = &mut bias {
            init_vector(b, rows, sources.as_deref(), strategy, 1, false, &mut rng);
        }
    }
    Ok(ExpandedLinear { weight, bias, d_in, d_out, d_in_ext, d_out_ext })
}

// ---------------------------------------------------------------------------
// Extensions and the expanded model
// ---------------------------------------------------------------------------

/// One inserted extension and its task heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Extension<T> {
    pub config: OtterConfig,
    /// Group index of this extension (1-based; group 0 is the base model).
    pub group: usize,
    pub reward: Option<RewardHead<T>>,
    pub generation: Option<GenerationHeads<T>>,
}

/// Base transformer plus a stack of extensions.
#[derive(Debug, Clone, PartialEq)]
pub struct OtterModel<T> {
    pub model: Model<T>,
    pub extensions: Vec<Extension<T>>,
    /// Group currently being trained, if any.
    trainable: Option<usize>,
}

/// Graph handles of heads for one extension.
#[derive(Debug, Clone)]
pub struct BoundHeads {
    pub reward: Option<Var>,
    pub generation: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct BoundOtter {
    pub model: BoundModel,
    pub heads: Vec<BoundHeads>,
    /// Every parameter handle in canonical order (see [`OtterModel::params`]).
    pub all: Vec<Var>,
}

/// What `init_extension` did.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InitReport {
    pub strategy: Option<InitStrategy>,
    pub initialized_elements: usize,
    /// Parameters where copying was impossible and the normal strategy was used.
    pub fallbacks: Vec<String>,
}

impl<T: Scalar> OtterModel<T> {
    /// Wraps a base model (a model without groups beyond the base).
    pub fn from_base(model: Model<T>) -> Result<Self> {
        if model.widths.groups() != 1 {
            return Err(OtterError::Config("from_base expects a model without extensions".into()));
        }
        Ok(Self { model, extensions: Vec::new(), trainable: None })
    }

    /// Reassembles a model from its parts (used by checkpoint loading).
    pub(crate) fn from_parts(model: Model<T>, extensions: Vec<Extension<T>>, trainable: Option<usize>) -> Self {
        Self { model, extensions, trainable }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    pub fn trainable_group(&self) -> Option<usize> {
        self.trainable
    }

    pub fn extension(&self, name: &str) -> Result<&Extension<T>> {
        self.extensions.iter().find(|e| e.config.name == name).ok_or_else(|| OtterError::Config(format!("no extension named `{name}`")))
    }

    pub fn extension_index(&self, name: &str) -> Result<usize> {
        self.extensions.iter().position(|e| e.config.name == name).ok_or_else(|| OtterError::Config(format!("no extension named `{name}`")))
    }

    /// Columns of the final hidden state holding extension `idx`'s `H'`.
    pub fn h_prime_range(&self, idx: usize) -> Range<usize> {
        let g = self.extensions[idx].group;
        let start = self.model.widths.hidden_offset(g);
        start..start + self.model.widths.hidden[g]
    }

    /// Marks one group as trainable. Only the topmost group may train:
    /// group 0 when there are no extensions, otherwise the last extension.
    pub fn set_trainable(&mut self, group: usize) -> Result<()> {
        let top = self.extensions.last().map_or(0, |e| e.group);
        if group != top {
            let what = if group == 0 {
                "the base model cannot be trained once extensions exist".to_string()
            } else {
                format!("group {group} is below extension group {top}; training it would change the outputs of later extensions")
            };
            return Err(OtterError::Sequencing(what));
        }
        self.trainable = Some(group);
        Ok(())
    }

    pub fn freeze(&mut self) {
        self.trainable = None;
    }

    /// Inserts a new extension on top of the stack and returns its index.
    /// The new group becomes the trainable one; its blocks start at zero
    /// until [`Self::init_extension`].
    pub fn expand(&mut self, cfg: OtterConfig) -> Result<usize> {
        cfg.validate()?;
        if let Some(g) = self.trainable {
            return Err(OtterError::Sequencing(format!(
                "group {g} is still marked trainable; freeze it before stacking another extension"
            )));
        }
        if self.extensions.iter().any(|e| e.config.name == cfg.name) {
            return Err(OtterError::Config(format!("an extension named `{}` already exists", cfg.name)));
        }
        if self.model.widths.groups() >= STRUCTURAL_ZERO as usize {
            return Err(OtterError::Config("too many stacked extensions".into()));
        }
        let mut widths = self.model.widths.clone();
        widths.push(cfg.d_ext, cfg.d_inner_ext, cfg.n_ext_heads);
        self.model = regroup(&self.model, widths)?;
        let group = self.model.widths.groups() - 1;
        self.extensions.push(Extension { config: cfg, group, reward: None, generation: None });
        self.trainable = Some(group);
        Ok(self.extensions.len() - 1)
    }

    /// Removes the topmost extension, returning its configuration.
    pub fn remove_last(&mut self) -> Result<OtterConfig> {
        let ext = self.extensions.pop().ok_or_else(|| OtterError::Config("no extension to remove".into()))?;
        let mut widths = self.model.widths.clone();
        widths.pop();
        self.model = regroup(&self.model, widths)?;
        if self.trainable == Some(ext.group) {
            self.trainable = None;
        }
        Ok(ext.config)
    }

    /// The base model with every extension stripped.
    pub fn base_model(&self) -> Result<Model<T>> {
        let c = &self.model.config;
        regroup(&self.model, GroupWidths::base(c.d_inp, c.d_inner, c.n_heads))
    }

    pub fn attach_reward_head(&mut self, idx: usize) -> Result<()> {
        let ext = self.extensions.get_mut(idx).ok_or_else(|| OtterError::Config(format!("no extension {idx}")))?;
        ext.reward = Some(RewardHead::zeros(&ext.config.name, ext.config.d_ext, ext.group as u8));
        Ok(())
    }

    pub fn attach_generation_heads(&mut self, idx: usize, k: usize) -> Result<()> {
        let d_inp = self.model.config.d_inp;
        let ext = self.extensions.get_mut(idx).ok_or_else(|| OtterError::Config(format!("no extension {idx}")))?;
        ext.generation = Some(GenerationHeads::zeros(&ext.config.name, k, d_inp, ext.config.d_ext, ext.group as u8)?);
        Ok(())
    }

    /// Parameters in canonical order: model parameters, then each
    /// extension's reward head and generation heads.
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = self.model.params();
        for e in &self.extensions {
            if let Some(r) = &e.reward {
                out.push(&r.w);
            }
            if let Some(gh) = &e.generation {
                out.extend(gh.heads.iter());
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = self.model.params_mut();
        for e in &mut self.extensions {
            if let Some(r) = &mut e.reward {
                out.push(&mut r.w);
            }
            if let Some(gh) = &mut e.generation {
                out.extend(gh.heads.iter_mut());
            }
        }
        out
    }

    /// Per-parameter masks of the elements that the current trainable group owns.
    pub fn trainable_masks(&self) -> Vec<Vec<bool>> {
        self.params().iter().map(|p| p.trainable_mask(self.trainable)).collect()
    }

    pub fn cast<U: Scalar>(&self) -> OtterModel<U> {
        OtterModel {
            model: self.model.cast(),
            extensions: self
                .extensions
                .iter()
                .map(|e| Extension {
                    config: e.config.clone(),
                    group: e.group,
                    reward: e.reward.as_ref().map(|r| RewardHead { w: r.w.cast() }),
                    generation: e.generation.as_ref().map(|g| GenerationHeads { heads: g.heads.iter().map(Param::cast).collect() }),
                })
                .collect(),
            trainable: self.trainable,
        }
    }

    /// Registers all parameters (model and heads) on a graph.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> Result<BoundOtter> {
        let model = self.model.bind(g, self.trainable)?;
        let mut all = model.all.clone();
        let mut heads = Vec::with_capacity(self.extensions.len());
        for e in &self.extensions {
            let trains = self.trainable == Some(e.group);
            let reward = match &e.reward {
                Some(r) => {
                    let v = g.leaf(&r.w.tensor, trains)?;
                    all.push(v);
                    Some(v)
                }
                None => None,
            };
            let mut generation = Vec::new();
            if let Some(gh) = &e.generation {
                for p in &gh.heads {
                    let v = g.leaf(&p.tensor, trains)?;
                    all.push(v);
                    generation.push(v);
                }
            }
            heads.push(BoundHeads { reward, generation });
        }
        Ok(BoundOtter { model, heads, all })
    }

    /// Handles over variables already on a graph, in the order of [`Self::params`].
    pub fn bound_from_vars(&self, vars: &[Var]) -> Result<BoundOtter> {
        let (model, mut rest) = BoundModel::from_vars(self.model.config.n_layers, vars)?;
        let mut heads = Vec::with_capacity(self.extensions.len());
        let mut take = |n: usize| -> Result<Vec<Var>> {
            if rest.len() < n {
                return Err(OtterError::Config("too few variables for the attached heads".into()));
            }
            let (h, t) = rest.split_at(n);
            rest = t;
            Ok(h.to_vec())
        };
        for e in &self.extensions {
            let reward = if e.reward.is_some() { Some(take(1)?[0]) } else { None };
            let generation = take(e.generation.as_ref().map_or(0, |g| g.len()))?;
            heads.push(BoundHeads { reward, generation });
        }
        Ok(BoundOtter { model, heads, all: vars.to_vec() })
    }

    pub fn forward(&self, g: &mut Graph<'_, T>, b: &BoundOtter, batch: &[&[u32]]) -> Result<ForwardTrace> {
        self.model.forward(g, &b.model, batch)
    }

    /// `H'` of extension `idx` as a graph node.
    pub fn h_prime(&self, g: &mut Graph<'_, T>, trace: &ForwardTrace, idx: usize) -> Result<Var> {
        let r = self.h_prime_range(idx);
        g.slice_cols(trace.final_hidden, r.start, r.len())
    }

    // -----------------------------------------------------------------------
    // Initialization
    // -----------------------------------------------------------------------

    /// Fills the trainable blocks of extension `idx`. Structural zeros stay
    /// zero and norm weights of the extension are set to one.
    pub fn init_extension(&mut self, idx: usize, strategy: InitStrategy, seed: u64) -> Result<InitReport> {
        let ext = self.extensions.get(idx).ok_or_else(|| OtterError::Config(format!("no extension {idx}")))?;
        let g = ext.group;
        let cfg = self.model.config.clone();
        let w = self.model.widths.clone();
        let hd = cfg.head_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut report = InitReport { strategy: Some(strategy), ..Default::default() };

        let hid_rows = w.hidden_offset(g)..w.hidden_offset(g) + w.hidden[g];
        let inner_off: usize = w.inner[..g].iter().sum();
        let inner_rows = inner_off..inner_off + w.inner[g];
        let head_off: usize = w.heads[..g].iter().sum();
        let head_rows = head_off * hd..(head_off + w.heads[g]) * hd;
        let gu8 = g as u8;

        for layer in &mut self.model.layers {
            for norm in [&mut layer.attn_norm, &mut layer.ffn_norm] {
                init_vector(norm, hid_rows.clone(), None, strategy, gu8, true, &mut rng);
            }
            // FFN: inner rows of gate/up, hidden rows of down.
            let fb = &mut report.fallbacks;
            let src = init_rows(&mut layer.w_gate, inner_rows.clone(), cfg.d_inner, cfg.d_inp, strategy, gu8, &mut rng, fb);
            init_vector(&mut layer.b_gate, inner_rows.clone(), src.as_deref(), strategy, gu8, false, &mut rng);
            let src = init_rows(&mut layer.w_up, inner_rows.clone(), cfg.d_inner, cfg.d_inp, strategy, gu8, &mut rng, fb);
            init_vector(&mut layer.b_up, inner_rows.clone(), src.as_deref(), strategy, gu8, false, &mut rng);
            let src = init_rows(&mut layer.w_down, hid_rows.clone(), cfg.d_inp, cfg.d_inner, strategy, gu8, &mut rng, fb);
            init_vector(&mut layer.b_down, hid_rows.clone(), src.as_deref(), strategy, gu8, false, &mut rng);

            // Attention: whole heads.
            match strategy {
                InitStrategy::Copy => {
                    let sources: Vec<usize> = (0..w.heads[g]).map(|_| rng.random_range(0..cfg.n_heads)).collect();
                    for p in [&mut layer.wq, &mut layer.wk, &mut layer.wv] {
                        copy_heads(p, &head_rows, &sources, hd, cfg.d_inp);
                    }
                    copy_output_rows(&mut layer.wo, hid_rows.clone(), &head_rows, &sources, hd, cfg.d_inp, cfg.n_heads * hd, &mut rng);
                }
                _ => {
                    for p in [&mut layer.wq, &mut layer.wk, &mut layer.wv, &mut layer.wo] {
                        fill_group(p, gu8, strategy, &mut rng);
                    }
                }
            }
        }
        init_vector(&mut self.model.final_norm, hid_rows.clone(), None, strategy, gu8, true, &mut rng);

        // Token embedding: new columns.
        let embed = &mut self.model.embed;
        match strategy {
            InitStrategy::Copy => {
                let width = w.hidden_total();
                let cols: Vec<usize> = hid_rows.clone().map(|_| rng.random_range(0..cfg.d_inp)).collect();
                let data = embed.tensor.data_mut();
                for r in 0..cfg.vocab_size {
                    for (c, &src) in hid_rows.clone().zip(&cols) {
                        data[r * width + c] = data[r * width + src];
                    }
                }
            }
            _ => fill_group(embed, gu8, strategy, &mut rng),
        }

        for p in self.model.params_mut() {
            p.rezero();
        }
        report.initialized_elements = self.model.params().iter().map(|p| p.count_owned(g)).sum();
        Ok(report)
    }

    // -----------------------------------------------------------------------
    // Accounting
    // -----------------------------------------------------------------------

    pub fn count_params(&self) -> ParamCount {
        let params = self.params();
        let base_count: usize = params.iter().map(|p| p.count_owned(0)).sum();
        let added_count: usize = params.iter().map(|p| p.numel() - p.count_owned(0) - p.count_zero()).sum();
        let structural_zeros: usize = params.iter().map(|p| p.count_zero()).sum();
        let allocated: usize = params.iter().map(|p| p.numel()).sum();

        let mut analytic_added = 0;
        let mut prior = GroupWidths::base(self.model.config.d_inp, self.model.config.d_inner, self.model.config.n_heads);
        for e in &self.extensions {
            let heads = HeadSpec { reward: e.reward.is_some(), generation: e.generation.as_ref().map_or(0, |g| g.len()) };
            analytic_added += analytic_added_params(&self.model.config, &prior, &e.config, heads);
            prior.push(e.config.d_ext, e.config.d_inner_ext, e.config.n_ext_heads);
        }
        ParamCount {
            base_count,
            added_count,
            analytic_added,
            structural_zeros,
            allocated,
            ratio: (base_count + added_count) as f64 / base_count as f64,
            space_ratio: allocated as f64 / base_count as f64,
        }
    }
}

/// Parameter accounting of an expanded model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    /// Elements owned by the base model.
    pub base_count: usize,
    /// Elements owned by any extension (enumerated).
    pub added_count: usize,
    /// Closed-form count of the same elements.
    pub analytic_added: usize,
    /// Allocated elements fixed at zero.
    pub structural_zeros: usize,
    /// Every allocated element.
    pub allocated: usize,
    /// `(base + added) / base`.
    pub ratio: f64,
    /// `allocated / base`: the parameter-memory overhead.
    pub space_ratio: f64,
}

/// Which heads an extension carries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HeadSpec {
    pub reward: bool,
    pub generation: usize,
}

/// Closed-form count of the trainable elements one extension adds, given
/// the group widths already present below it.
pub fn analytic_added_params(cfg: &ModelConfig, prior: &GroupWidths, ext: &OtterConfig, heads: HeadSpec) -> usize {
    let hd = cfg.head_dim;
    let (h_prev, i_prev, n_prev) = (prior.hidden_total(), prior.inner_total(), prior.heads_total());
    let (de, die, ne) = (ext.d_ext, ext.d_inner_ext, ext.n_ext_heads * hd);
    let per_layer = 2 * die * (h_prev + de)      // gate and up rows
        + de * (i_prev + die)                    // down rows
        + 3 * ne * (h_prev + de)                 // q, k, v rows of the new heads
        + de * (n_prev * hd + ne)                // output-projection rows
        + 2 * die + de                           // FFN biases
        + 2 * de; // two norm weights
    cfg.n_layers * per_layer
        + de                                     // final norm
        + cfg.vocab_size * de                    // embedding columns
        + if heads.reward { de } else { 0 }
        + heads.generation * cfg.d_inp * de
}

/// Closed-form size of a base model.
pub fn analytic_base_params(cfg: &ModelConfig) -> usize {
    let d = cfg.d_inp;
    let dh = cfg.n_heads * cfg.head_dim;
    let per_layer = 3 * dh * d + d * dh + 3 * d * cfg.d_inner + 2 * cfg.d_inner + d + 2 * d;
    cfg.n_layers * per_layer + d + 2 * cfg.vocab_size * d
}

/// Structural zeros one extension allocates (the `0` blocks).
pub fn analytic_zero_params(cfg: &ModelConfig, prior: &GroupWidths, ext: &OtterConfig) -> usize {
    let hd = cfg.head_dim;
    let (h_prev, i_prev, n_prev) = (prior.hidden_total(), prior.inner_total(), prior.heads_total());
    let per_layer = 2 * i_prev * ext.d_ext + h_prev * ext.d_inner_ext + 3 * n_prev * hd * ext.d_ext + h_prev * ext.n_ext_heads * hd;
    cfg.n_layers * per_layer
}

/// Builds a model with `widths`, copying the overlapping top-left block of
/// every parameter from `src`.
fn regroup<T: Scalar>(src: &Model<T>, widths: GroupWidths) -> Result<Model<T>> {
    let mut dst = Model::allocate(src.config.clone(), widths)?;
    for (s, d) in src.params().into_iter().zip(dst.params_mut()) {
        copy_overlap(&s.tensor, &mut d.tensor);
    }
    Ok(dst)
}

/// Copies the common leading block (prefix for vectors, top-left for matrices).
pub(crate) fn copy_overlap<T: Scalar>(src: &Tensor<T>, dst: &mut Tensor<T>) {
    match (src.shape(), dst.shape().to_vec().as_slice()) {
        ([n], [m]) => {
            let k = (*n).min(*m);
            dst.data_mut()[..k].copy_from_slice(&src.data()[..k]);
        }
        ([sr, sc], [dr, dc]) => {
            let (rows, cols) = ((*sr).min(*dr), (*sc).min(*dc));
            let (sc, dc) = (*sc, *dc);
            for r in 0..rows {
                dst.data_mut()[r * dc..r * dc + cols].copy_from_slice(&src.data()[r * sc..r * sc + cols]);
            }
        }
        (s, d) => unreachable!("parameters are 1-D or 2-D, got {s:?} -> {d:?}"),
    }
}

fn group_stats<T: Scalar>(p: &Param<T>) -> Option<(f64, f64)> {
    let vals: Vec<f64> = p.owner.iter().zip(p.tensor.data()).filter(|(&o, _)| o == 0).map(|(_, v)| v.to_f64_lossy()).collect();
    if vals.is_empty() {
        return None;
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

fn sample<T: Scalar>(strategy: InitStrategy, stats: Option<(f64, f64)>, rng: &mut ChaCha8Rng) -> T {
    match (strategy, stats) {
        (InitStrategy::Random, _) => T::of(rng.random_range(-0.5..0.5)),
        (_, Some((mean, std))) if std > 0.0 => T::of(Normal::new(mean, std).expect("finite moments").sample(rng)),
        (_, Some((mean, _))) => T::of(mean),
        (_, None) => T::of(rng.random_range(-0.5..0.5)),
    }
}

/// Fills every element owned by `group` with the random or normal strategy.
fn fill_group<T: Scalar>(p: &mut Param<T>, group: u8, strategy: InitStrategy, rng: &mut ChaCha8Rng) {
    let stats = group_stats(p);
    let strategy = if strategy == InitStrategy::Copy { InitStrategy::Normal } else { strategy };
    let owner = &p.owner;
    for (v, &o) in p.tensor.data_mut().iter_mut().zip(owner) {
        if o == group {
            *v = sample(strategy, stats, rng);
        }
    }
}

/// Initializes the new rows `rows` of a row-structured matrix whose first
/// `orig_rows` x `orig_cols` block holds the original weights. Returns the
/// source row of each new row when copying.
#[allow(clippy::too_many_arguments)]
fn init_rows<T: Scalar>(
    p: &mut Param<T>,
    rows: Range<usize>,
    orig_rows: usize,
    orig_cols: usize,
    strategy: InitStrategy,
    group: u8,
    rng: &mut ChaCha8Rng,
    fallbacks: &mut Vec<String>,
) -> Option<Vec<usize>> {
    if strategy != InitStrategy::Copy {
        fill_group(p, group, strategy, rng);
        return None;
    }
    if orig_rows == 0 || orig_cols == 0 {
        fallbacks.push(p.name.clone());
        fill_group(p, group, InitStrategy::Normal, rng);
        return None;
    }
    let width = p.tensor.last_dim();
    let sources: Vec<usize> = rows.clone().map(|_| rng.random_range(0..orig_rows)).collect();
    let data = p.tensor.data_mut();
    for (r, &src) in rows.zip(&sources) {
        for c in 0..width {
            data[r * width + c] = data[src * width + c % orig_cols];
        }
    }
    Some(sources)
}

/// Initializes new entries of a vector parameter. Norm weights become one.
fn init_vector<T: Scalar>(
    p: &mut Param<T>,
    rows: Range<usize>,
    sources: Option<&[usize]>,
    strategy: InitStrategy,
    group: u8,
    is_norm: bool,
    rng: &mut ChaCha8Rng,
) {
    if is_norm {
        for i in rows {
            p.tensor.data_mut()[i] = T::one();
        }
        return;
    }
    match (strategy, sources) {
        (InitStrategy::Copy, Some(src)) => {
            let data = p.tensor.data_mut();
            for (i, &s) in rows.zip(src) {
                data[i] = data[s];
            }
        }
        _ => fill_group(p, group, strategy, rng),
    }
}

/// Copies whole heads of a `[heads * hd, width]` projection: new head `e`
/// becomes a copy of original head `sources[e]`, tiled across new columns.
fn copy_heads<T: Scalar>(p: &mut Param<T>, head_rows: &Range<usize>, sources: &[usize], hd: usize, orig_cols: usize) {
    let width = p.tensor.last_dim();
    let data = p.tensor.data_mut();
    for (e, &s) in sources.iter().enumerate() {
        for j in 0..hd {
            let dst = head_rows.start + e * hd + j;
            let src = s * hd + j;
            for c in 0..width {
                data[dst * width + c] = data[src * width + c % orig_cols];
            }
        }
    }
}

/// New rows of the output projection: copied from random original rows;
/// the new heads' columns take the columns of their source heads.
#[allow(clippy::too_many_arguments)]
fn copy_output_rows<T: Scalar>(
    p: &mut Param<T>,
    rows: Range<usize>,
    head_cols: &Range<usize>,
    sources: &[usize],
    hd: usize,
    orig_rows: usize,
    orig_cols: usize,
    rng: &mut ChaCha8Rng,
) {
    let width = p.tensor.last_dim();
    let data = p.tensor.data_mut();
    for r in rows {
        let src = rng.random_range(0..orig_rows);
        for c in 0..width {
            let from = if head_cols.contains(&c) {
                let e = (c - head_cols.start) / hd;
                sources[e] * hd + (c - head_cols.start) % hd
            } else {
                c % orig_cols
            };
            data[r * width + c] = data[src * width + from];
        }
    }
}

// ---------------------------------------------------------------------------
// Restricted RMSNorm and verification
// ---------------------------------------------------------------------------

/// `h / sqrt(mean(h[..d_orig]^2) + eps) * gamma` over the last axis.
pub fn restricted_rmsnorm<T: Scalar>(h_tilde: &Tensor<T>, d_orig: usize, gamma: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let width = h_tilde.last_dim();
    if d_orig == 0 || d_orig > width {
        return Err(OtterError::Config(format!("d_orig {d_orig} for width {width}")));
    }
    if gamma.numel() != width {
        return Err(OtterError::Config(format!("gamma of length {} for width {width}", gamma.numel())));
    }
    let mut out = vec![T::zero(); h_tilde.numel()];
    rmsnorm_rows(h_tilde.data(), width, d_orig, gamma.data(), eps, &mut out);
    let t = Tensor::new(h_tilde.shape().to_vec(), out)?;
    t.ensure_finite("restricted_rmsnorm")?;
    Ok(t)
}

/// Result of [`verify_non_disruption`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub tol: f64,
    /// Max absolute logit difference per prompt.
    pub per_prompt: Vec<f64>,
    pub max_deviation: f64,
    pub zero_elements_checked: usize,
}

/// Checks that every structural zero is exactly zero and that the
/// expanded model's logits match `base` within `tol` on every prompt.
pub fn verify_non_disruption<T: Scalar>(base: &Model<T>, otter: &OtterModel<T>, prompts: &[Vec<u32>], tol: f64) -> Result<VerifyReport> {
    if base.config != otter.model.config {
        return Err(OtterError::Config("base and expanded models have different configurations".into()));
    }
    let mut zero_elements_checked = 0;
    for p in otter.params() {
        zero_elements_checked += p.count_zero();
        if let Some(&i) = p.zero_violations().first() {
            return Err(OtterError::Verification {
                location: p.name.clone(),
                detail: format!("structural zero at flat index {i} holds {}", p.tensor.data()[i]),
            });
        }
    }
    let mut per_prompt = Vec::with_capacity(prompts.len());
    for (pi, prompt) in prompts.iter().enumerate() {
        let a = base.logits(prompt)?;
        let b = otter.model.logits(prompt)?;
        let dev = a.max_abs_diff(&b).ok_or_else(|| OtterError::Config("logit shapes differ".into()))?;
        if !(dev <= tol) {
            let site = first_divergent_site(base, &otter.model, prompt, tol)?;
            return Err(OtterError::Verification {
                location: format!("prompt {pi}, {site}"),
                detail: format!("max logit deviation {dev:e} exceeds {tol:e}"),
            });
        }
        per_prompt.push(dev);
    }
    let max_deviation = per_prompt.iter().copied().fold(0.0, f64::max);
    Ok(VerifyReport { tol, per_prompt, max_deviation, zero_elements_checked })
}

fn site_name(i: usize, n_layers: usize) -> String {
    if i == 2 * n_layers {
        "input of final_norm".into()
    } else if i.is_multiple_of(2) {
        format!("input of layers.{}.attn_norm", i / 2)
    } else {
        format!("input of layers.{}.ffn_norm", i / 2)
    }
}

fn first_divergent_site<T: Scalar>(base: &Model<T>, expanded: &Model<T>, prompt: &[u32], tol: f64) -> Result<String> {
    let d = base.config.d_inp;
    let mut gb = Graph::new();
    let pb = base.bind(&mut gb, None)?;
    let tb = base.forward(&mut gb, &pb, &[prompt])?;
    let mut ge = Graph::new();
    let pe = expanded.bind(&mut ge, None)?;
    let te = expanded.forward(&mut ge, &pe, &[prompt])?;
    let we = expanded.hidden_total();
    for (i, (sb, se)) in tb.hidden_sites.iter().zip(&te.hidden_sites).enumerate() {
        let (vb, ve) = (gb.value(sb.pre), ge.value(se.pre));
        let diverges = vb
            .chunks_exact(d)
            .zip(ve.chunks_exact(we))
            .any(|(rb, re)| rb.iter().zip(&re[..d]).any(|(a, b)| !((a.to_f64_lossy() - b.to_f64_lossy()).abs() <= tol)));
        if diverges {
            return Ok(site_name(i, base.config.n_layers));
        }
    }
    Ok("lm_head".into())
}
