// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only transformer: token embedding, `n_layers` pre-norm blocks of
//! (multi-head attention with rotary positions, gated-SiLU FFN), a final
//! RMSNorm and an untied LM head.
//!
//! The same code runs base and expanded models. Widths come from
//! [`GroupWidths`]; every RMSNorm computes its denominator over the first
//! `d_inp` coordinates only, which for a base model is the whole vector.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{OtterError, Result};
use crate::params::{block_owner, column_owner, group_of_index, GroupWidths, Param};
use crate::tensor::{rmsnorm_rows, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    GatedSilu,
}

/// Shape of the base model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_inp: usize,
    pub d_inner: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub max_seq_len: usize,
    pub norm_eps: f64,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f64,
    #[serde(default)]
    pub activation: Activation,
}

fn default_rope_theta() -> f64 {
    10_000.0
}

impl ModelConfig {
    /// Small configuration used across tests and examples.
    pub fn tiny(vocab_size: usize, d_inp: usize, n_layers: usize, n_heads: usize) -> Self {
        Self {
            vocab_size,
            d_inp,
            d_inner: 2 * d_inp,
            n_layers,
            n_heads,
            head_dim: d_inp / n_heads.max(1),
            max_seq_len: 128,
            norm_eps: 1e-6,
            rope_theta: default_rope_theta(),
            activation: Activation::GatedSilu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(OtterError::Config(m));
        if self.vocab_size == 0 || self.d_inp == 0 || self.d_inner == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return bad(format!("all model dimensions must be positive: {self:?}"));
        }
        if self.d_inp != self.n_heads * self.head_dim {
            return bad(format!("d_inp {} != n_heads {} * head_dim {}", self.d_inp, self.n_heads, self.head_dim));
        }
        if !self.head_dim.is_multiple_of(2) {
            return bad(format!("head_dim {} must be even for rotary encoding", self.head_dim));
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be positive".into());
        }
        if !(self.norm_eps > 0.0) || !(self.rope_theta > 0.0) {
            return bad("norm_eps and rope_theta must be positive".into());
        }
        Ok(())
    }
}

/// Weights of one block, in the canonical parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm: Param<T>,
    pub wq: Param<T>,
    pub wk: Param<T>,
    pub wv: Param<T>,
    pub wo: Param<T>,
    pub ffn_norm: Param<T>,
    pub w_gate: Param<T>,
    pub b_gate: Param<T>,
    pub w_up: Param<T>,
    pub b_up: Param<T>,
    pub w_down: Param<T>,
    pub b_down: Param<T>,
}

impl<T: Scalar> LayerParams<T> {
    fn allocate(l: usize, cfg: &ModelConfig, w: &GroupWidths) -> Result<Self> {
        let hid = &w.hidden;
        let inn = &w.inner;
        let heads = w.head_cols(cfg.head_dim);
        let (d, di, dh) = (w.hidden_total(), w.inner_total(), heads.iter().sum::<usize>());
        let mat = |name: &str, rows: usize, cols: usize, og: &[usize], ig: &[usize]| {
            Param::new(format!("layers.{l}.{name}"), Tensor::zeros(vec![rows, cols]), block_owner(og, ig))
        };
        let vec_p = |name: &str, groups: &[usize], fill: T| {
            let t = Tensor::filled(vec![groups.iter().sum()], fill);
            Param::new(format!("layers.{l}.{name}"), t, group_of_index(groups))
        };
        Ok(Self {
            attn_norm: vec_p("attn_norm", hid, T::one())?,
            wq: mat("wq", dh, d, &heads, hid)?,
            wk: mat("wk", dh, d, &heads, hid)?,
            wv: mat("wv", dh, d, &heads, hid)?,
            wo: mat("wo", d, dh, hid, &heads)?,
            ffn_norm: vec_p("ffn_norm", hid, T::one())?,
            w_gate: mat("w_gate", di, d, inn, hid)?,
            b_gate: vec_p("b_gate", inn, T::zero())?,
            w_up: mat("w_up", di, d, inn, hid)?,
            b_up: vec_p("b_up", inn, T::zero())?,
            w_down: mat("w_down", d, di, hid, inn)?,
            b_down: vec_p("b_down", hid, T::zero())?,
        })
    }

    pub fn params(&self) -> [&Param<T>; 12] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ffn_norm,
            &self.w_gate,
            &self.b_gate,
            &self.w_up,
            &self.b_up,
            &self.w_down,
            &self.b_down,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 12] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ffn_norm,
            &mut self.w_gate,
            &mut self.b_gate,
            &mut self.w_up,
            &mut self.b_up,
            &mut self.w_down,
            &mut self.b_down,
        ]
    }
}

/// Transformer weights plus the group layout they were allocated with.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub widths: GroupWidths,
    pub embed: Param<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Param<T>,
    pub lm_head: Param<T>,
}

/// Graph handles for one layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ffn_norm: Var,
    pub w_gate: Var,
    pub b_gate: Var,
    pub w_up: Var,
    pub b_up: Var,
    pub w_down: Var,
    pub b_down: Var,
}

/// Graph handles for every model parameter, in canonical order in `all`.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub embed: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm: Var,
    pub lm_head: Var,
    pub all: Vec<Var>,
}

impl BoundModel {
    /// Rebuilds the handles from variables already on a graph, in
    /// canonical parameter order. Returns the unused tail of `vars`.
    pub fn from_vars(n_layers: usize, vars: &[Var]) -> Result<(Self, &[Var])> {
        let need = 3 + 12 * n_layers;
        if vars.len() < need {
            return Err(OtterError::Config(format!("{} variables for a model needing {need}", vars.len())));
        }
        let layers = vars[1..1 + 12 * n_layers]
            .chunks_exact(12)
            .map(|c| LayerVars {
                attn_norm: c[0],
                wq: c[1],
                wk: c[2],
                wv: c[3],
                wo: c[4],
                ffn_norm: c[5],
                w_gate: c[6],
                b_gate: c[7],
                w_up: c[8],
                b_up: c[9],
                w_down: c[10],
                b_down: c[11],
            })
            .collect();
        let bound = Self { embed: vars[0], layers, final_norm: vars[need - 2], lm_head: vars[need - 1], all: vars[..need].to_vec() };
        Ok((bound, &vars[need..]))
    }
}

/// One normalization site: the hidden state RMSNorm consumed and its output.
#[derive(Debug, Clone, Copy)]
pub struct NormSite {
    pub pre: Var,
    pub post: Var,
}

/// Everything a forward pass exposes.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `[batch * seq_len, vocab]`.
    pub logits: Var,
    /// `2 * n_layers + 1` sites: before attention and before the FFN of
    /// every block, then the final norm.
    pub hidden_sites: Vec<NormSite>,
    /// Output of the final norm, `[batch * seq_len, hidden_total]`.
    pub final_hidden: Var,
    /// First `d_inp` columns of `final_hidden` (what the LM head reads).
    pub final_original: Var,
    pub batch: usize,
    pub seq_len: usize,
}

/// Plain-tensor results of an inference pass.
#[derive(Debug, Clone)]
pub struct Inference<T> {
    pub logits: Tensor<T>,
    pub final_hidden: Tensor<T>,
    pub batch: usize,
    pub seq_len: usize,
}

impl<T: Scalar> Inference<T> {
    /// Row index of `(sequence, position)`.
    pub fn row_index(&self, b: usize, t: usize) -> usize {
        b * self.seq_len + t
    }
}

impl<T: Scalar> Model<T> {
    /// All-zero model with the given group layout.
    pub fn allocate(config: ModelConfig, widths: GroupWidths) -> Result<Self> {
        config.validate()?;
        if widths.hidden[0] != config.d_inp || widths.inner[0] != config.d_inner || widths.heads[0] != config.n_heads {
            return Err(OtterError::Config("group 0 widths must equal the base configuration".into()));
        }
        let d = widths.hidden_total();
        let layers = (0..config.n_layers).map(|l| LayerParams::allocate(l, &config, &widths)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            embed: Param::new("embed", Tensor::zeros(vec![config.vocab_size, d]), column_owner(config.vocab_size, &widths.hidden))?,
            final_norm: Param::new("final_norm", Tensor::filled(vec![d], T::one()), group_of_index(&widths.hidden))?,
            lm_head: Param::owned_by("lm_head", Tensor::zeros(vec![config.vocab_size, config.d_inp]), 0),
            layers,
            config,
            widths,
        })
    }

    /// Base model with seeded Gaussian initialization.
    pub fn new_random(config: ModelConfig, seed: u64) -> Result<Self> {
        let widths = GroupWidths::base(config.d_inp, config.d_inner, config.n_heads);
        let mut m = Self::allocate(config, widths)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth_scale = 1.0 / ((2 * m.config.n_layers) as f64).sqrt();
        let mut fill = |p: &mut Param<T>, std: f64| {
            let normal = Normal::new(0.0, std).expect("positive std");
            for v in p.tensor.data_mut() {
                *v = T::of(normal.sample(&mut rng));
            }
        };
        fill(&mut m.embed, 1.0);
        let d = m.config.d_inp as f64;
        let di = m.config.d_inner as f64;
        for layer in &mut m.layers {
            fill(&mut layer.wq, d.powf(-0.5));
            fill(&mut layer.wk, d.powf(-0.5));
            fill(&mut layer.wv, d.powf(-0.5));
            fill(&mut layer.wo, d.powf(-0.5) * depth_scale);
            fill(&mut layer.w_gate, d.powf(-0.5));
            fill(&mut layer.w_up, d.powf(-0.5));
            fill(&mut layer.w_down, di.powf(-0.5) * depth_scale);
        }
        fill(&mut m.lm_head, d.powf(-0.5));
        Ok(m)
    }

    pub fn hidden_total(&self) -> usize {
        self.widths.hidden_total()
    }

    /// Parameters in canonical order.
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = vec![&self.embed];
        for l in &self.layers {
            out.extend(l.params());
        }
        out.push(&self.final_norm);
        out.push(&self.lm_head);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = vec![&mut self.embed];
        for l in &mut self.layers {
            out.extend(l.params_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let cast_layer = |l: &LayerParams<T>| LayerParams {
            attn_norm: l.attn_norm.cast(),
            wq: l.wq.cast(),
            wk: l.wk.cast(),
            wv: l.wv.cast(),
            wo: l.wo.cast(),
            ffn_norm: l.ffn_norm.cast(),
            w_gate: l.w_gate.cast(),
            b_gate: l.b_gate.cast(),
            w_up: l.w_up.cast(),
            b_up: l.b_up.cast(),
            w_down: l.w_down.cast(),
            b_down: l.b_down.cast(),
        };
        Model {
            config: self.config.clone(),
            widths: self.widths.clone(),
            embed: self.embed.cast(),
            layers: self.layers.iter().map(cast_layer).collect(),
            final_norm: self.final_norm.cast(),
            lm_head: self.lm_head.cast(),
        }
    }

    /// Registers every parameter on `g`. Parameters owning any element of
    /// `trainable` receive gradients.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>, trainable: Option<usize>) -> Result<BoundModel> {
        let mut all = Vec::new();
        let mut leaf = |g: &mut Graph<'a, T>, p: &'a Param<T>| -> Result<Var> {
            let v = g.leaf(&p.tensor, trainable.is_some_and(|t| p.has_group(t)))?;
            all.push(v);
            Ok(v)
        };
        let embed = leaf(g, &self.embed)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            layers.push(LayerVars {
                attn_norm: leaf(g, &l.attn_norm)?,
                wq: leaf(g, &l.wq)?,
                wk: leaf(g, &l.wk)?,
                wv: leaf(g, &l.wv)?,
                wo: leaf(g, &l.wo)?,
                ffn_norm: leaf(g, &l.ffn_norm)?,
                w_gate: leaf(g, &l.w_gate)?,
                b_gate: leaf(g, &l.b_gate)?,
                w_up: leaf(g, &l.w_up)?,
                b_up: leaf(g, &l.b_up)?,
                w_down: leaf(g, &l.w_down)?,
                b_down: leaf(g, &l.b_down)?,
            });
        }
        let final_norm = leaf(g, &self.final_norm)?;
        let lm_head = leaf(g, &self.lm_head)?;
        Ok(BoundModel { embed, layers, final_norm, lm_head, all })
    }

    fn check_batch(&self, batch: &[&[u32]]) -> Result<usize> {
        let first = batch.first().ok_or_else(|| OtterError::Input("empty batch".into()))?;
        let seq_len = first.len();
        if seq_len == 0 {
            return Err(OtterError::Input("empty token sequence".into()));
        }
        if batch.iter().any(|s| s.len() != seq_len) {
            return Err(OtterError::Input("sequences in one batch must have equal length".into()));
        }
        if seq_len > self.config.max_seq_len {
            return Err(OtterError::Input(format!("sequence of {seq_len} tokens exceeds max_seq_len {}", self.config.max_seq_len)));
        }
        Ok(seq_len)
    }

    /// Full forward pass over a batch of equal-length sequences.
    pub fn forward(&self, g: &mut Graph<'_, T>, p: &BoundModel, batch: &[&[u32]]) -> Result<ForwardTrace> {
        let seq_len = self.check_batch(batch)?;
        let tokens: Vec<u32> = batch.iter().flat_map(|s| s.iter().copied()).collect();
        let eps = T::of(self.config.norm_eps);
        let d_orig = self.config.d_inp;

        let mut x = g.embedding(p.embed, &tokens)?;
        let mut sites = Vec::with_capacity(2 * self.config.n_layers + 1);
        for lv in &p.layers {
            let normed = g.rmsnorm(x, lv.attn_norm, d_orig, eps)?;
            sites.push(NormSite { pre: x, post: normed });
            let attn = mha_forward(g, normed, lv, batch.len(), seq_len, &self.config)?;
            x = g.add(x, attn)?;

            let normed = g.rmsnorm(x, lv.ffn_norm, d_orig, eps)?;
            sites.push(NormSite { pre: x, post: normed });
            let ffn = ffn_forward(g, normed, lv)?;
            x = g.add(x, ffn)?;
        }
        let final_hidden = g.rmsnorm(x, p.final_norm, d_orig, eps)?;
        sites.push(NormSite { pre: x, post: final_hidden });
        let final_original = if self.hidden_total() == d_orig { final_hidden } else { g.slice_cols(final_hidden, 0, d_orig)? };
        let logits = g.linear(final_original, p.lm_head, None)?;
        Ok(ForwardTrace { logits, hidden_sites: sites, final_hidden, final_original, batch: batch.len(), seq_len })
    }

    /// Forward pass without gradients, returning plain tensors.
    pub fn infer(&self, batch: &[&[u32]]) -> Result<Inference<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, None)?;
        let trace = self.forward(&mut g, &p, batch)?;
        Ok(Inference {
            logits: g.tensor(trace.logits),
            final_hidden: g.tensor(trace.final_hidden),
            batch: trace.batch,
            seq_len: trace.seq_len,
        })
    }

    /// Logits `[len, vocab]` of a single sequence.
    pub fn logits(&self, tokens: &[u32]) -> Result<Tensor<T>> {
        Ok(self.infer(&[tokens])?.logits)
    }
}

/// Gated FFN: `W_d (silu(W_g h + b_g) * (W_u h + b_u)) + b_d`.
pub fn ffn_forward<T: Scalar>(g: &mut Graph<'_, T>, h: Var, lv: &LayerVars) -> Result<Var> {
    let gate = g.linear(h, lv.w_gate, Some(lv.b_gate))?;
    let up = g.linear(h, lv.w_up, Some(lv.b_up))?;
    let act = g.silu(gate)?;
    let mixed = g.mul(act, up)?;
    g.linear(mixed, lv.w_down, Some(lv.b_down))
}

/// Multi-head causal attention with rotary positions, bias-free projections.
/// The head count is whatever the projection widths imply, so inserted heads
/// run through exactly the same code as the original ones.
pub fn mha_forward<T: Scalar>(
    g: &mut Graph<'_, T>,
    h: Var,
    lv: &LayerVars,
    batch: usize,
    seq_len: usize,
    cfg: &ModelConfig,
) -> Result<Var> {
    if seq_len > cfg.max_seq_len {
        return Err(OtterError::Input(format!("sequence of {seq_len} exceeds max_seq_len {}", cfg.max_seq_len)));
    }
    let q = g.linear(h, lv.wq, None)?;
    let k = g.linear(h, lv.wk, None)?;
    let v = g.linear(h, lv.wv, None)?;
    let q = g.rope(q, seq_len, cfg.head_dim, cfg.rope_theta)?;
    let k = g.rope(k, seq_len, cfg.head_dim, cfg.rope_theta)?;
    let heads = g.attention(q, k, v, batch, seq_len, cfg.head_dim)?;
    g.linear(heads, lv.wo, None)
}

/// Baseline RMSNorm over the whole last axis: `h / sqrt(mean(h^2) + eps) * gamma`.
pub fn rmsnorm<T: Scalar>(h: &Tensor<T>, gamma: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let width = h.last_dim();
    if gamma.numel() != width {
        return Err(OtterError::Config(format!("gamma of length {} for width {width}", gamma.numel())));
    }
    let mut out = vec![T::zero(); h.numel()];
    rmsnorm_rows(h.data(), width, width, gamma.data(), eps, &mut out);
    let t = Tensor::new(h.shape().to_vec(), out)?;
    t.ensure_finite("rmsnorm")?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig::tiny(16, 8, 2, 2)
    }

    #[test]
    fn config_validation() {
        assert!(tiny().validate().is_ok());
        let mut c = tiny();
        c.head_dim = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny(16, 6, 1, 2);
        assert!(c.validate().is_err(), "head_dim 3 is odd");
        c.head_dim = 2;
        c.n_heads = 3;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn rmsnorm_examples() {
        let h = Tensor::<f64>::vector(vec![3.0, 4.0]);
        let ones = Tensor::vector(vec![1.0, 1.0]);
        let y = rmsnorm(&h, &ones, 0.0).unwrap();
        assert!((y.data()[0] - 0.84853).abs() < 1e-5);
        assert!((y.data()[1] - 1.13137).abs() < 1e-5);

        let c = Tensor::<f64>::vector(vec![2.5; 4]);
        let y = rmsnorm(&c, &Tensor::vector(vec![1.0; 4]), 0.0).unwrap();
        assert!(y.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));

        let y = rmsnorm(&h, &Tensor::vector(vec![0.0, 0.0]), 1e-6).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    fn single_layer_vars<'a>(g: &mut Graph<'a, f64>, w: &'a [Tensor<f64>]) -> LayerVars {
        let v: Vec<Var> = w.iter().map(|t| g.leaf(t, false).unwrap()).collect();
        LayerVars {
            attn_norm: v[0],
            wq: v[1],
            wk: v[2],
            wv: v[3],
            wo: v[4],
            ffn_norm: v[0],
            w_gate: v[5],
            b_gate: v[6],
            w_up: v[7],
            b_up: v[8],
            w_down: v[9],
            b_down: v[10],
        }
    }

    fn scalar_layer(wg: f64, wu: f64, wd: f64, wv: f64) -> Vec<Tensor<f64>> {
        let s = |x: f64| Tensor::new(vec![1, 1], vec![x]).unwrap();
        let b = |x: f64| Tensor::vector(vec![x]);
        // norm, wq, wk, wv, wo, w_gate, b_gate, w_up, b_up, w_down, b_down
        vec![b(1.0), s(1.0), s(1.0), s(wv), s(1.0), s(wg), b(0.0), s(wu), b(0.0), s(wd), b(0.0)]
    }

    #[test]
    fn ffn_scalar_hand_value() {
        let w = scalar_layer(1.0, 1.0, 1.0, 1.0);
        let mut g = Graph::new();
        let lv = single_layer_vars(&mut g, &w);
        let x = g.constant(vec![2.0], 1, 1).unwrap();
        let y = ffn_forward(&mut g, x, &lv).unwrap();
        // silu(2) * 2 = 2 * sigmoid(2) * 2
        let expected = 2.0 / (1.0 + (-2.0f64).exp()) * 2.0;
        assert!((g.value(y)[0] - expected).abs() < 1e-12);
        assert!((g.value(y)[0] - 3.52318).abs() < 1e-5);
    }

    #[test]
    fn ffn_zero_weights_give_zero() {
        let w = scalar_layer(0.0, 0.0, 0.0, 0.0);
        let mut g = Graph::new();
        let lv = single_layer_vars(&mut g, &w);
        let x = g.constant(vec![5.0], 1, 1).unwrap();
        let y = ffn_forward(&mut g, x, &lv).unwrap();
        assert_eq!(g.value(y)[0], 0.0);
    }

    #[test]
    fn ffn_saturated_gate_closes() {
        let w = scalar_layer(-1e3, 1.0, 1.0, 1.0);
        let mut g = Graph::new();
        let lv = single_layer_vars(&mut g, &w);
        let x = g.constant(vec![1.0], 1, 1).unwrap();
        let y = ffn_forward(&mut g, x, &lv).unwrap();
        assert!(g.value(y)[0].abs() < 1e-300);
    }

    #[test]
    fn mha_zero_value_path_gives_zero() {
        let cfg = ModelConfig { head_dim: 2, n_heads: 1, d_inp: 2, ..ModelConfig::tiny(4, 2, 1, 1) };
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let zero = Tensor::zeros(vec![2, 2]);
        let w = [eye.clone(), eye.clone(), zero, eye];
        let mut g = Graph::<f64>::new();
        let v: Vec<Var> = w.iter().map(|t| g.leaf(t, false).unwrap()).collect();
        let dummy = v[0];
        let lv = LayerVars {
            attn_norm: dummy,
            wq: v[0],
            wk: v[1],
            wv: v[2],
            wo: v[3],
            ffn_norm: dummy,
            w_gate: dummy,
            b_gate: dummy,
            w_up: dummy,
            b_up: dummy,
            w_down: dummy,
            b_down: dummy,
        };
        let h = g.constant(vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0], 3, 2).unwrap();
        let y = mha_forward(&mut g, h, &lv, 1, 3, &cfg).unwrap();
        assert!(g.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mha_rejects_long_sequences() {
        let cfg = ModelConfig { max_seq_len: 2, ..tiny() };
        let m = Model::<f64>::new_random(cfg, 0).unwrap();
        assert!(matches!(m.logits(&[1, 2, 3]), Err(OtterError::Input(_))));
    }

    #[test]
    fn zero_model_gives_uniform_logits() {
        let cfg = tiny();
        let widths = GroupWidths::base(cfg.d_inp, cfg.d_inner, cfg.n_heads);
        let m = Model::<f64>::allocate(cfg, widths).unwrap();
        let l = m.logits(&[1, 2, 3]).unwrap();
        assert!(l.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_input_is_rejected() {
        let m = Model::<f32>::new_random(tiny(), 1).unwrap();
        assert!(matches!(m.logits(&[]), Err(OtterError::Input(_))));
        assert!(matches!(m.logits(&[16]), Err(OtterError::Input(_))));
    }

    #[test]
    fn trace_has_two_sites_per_layer_plus_final() {
        for layers in 1..4 {
            let m = Model::<f32>::new_random(ModelConfig::tiny(16, 8, layers, 2), 3).unwrap();
            let mut g = Graph::new();
            let p = m.bind(&mut g, None).unwrap();
            let t = m.forward(&mut g, &p, &[&[1, 2, 3]]).unwrap();
            assert_eq!(t.hidden_sites.len(), 2 * layers + 1);
        }
    }

    #[test]
    fn batched_rows_match_single_runs() {
        let m = Model::<f64>::new_random(tiny(), 4).unwrap();
        let a = [1u32, 5, 7, 2];
        let b = [3u32, 3, 9, 15];
        let both = m.infer(&[&a, &b]).unwrap();
        let la = m.logits(&a).unwrap();
        let lb = m.logits(&b).unwrap();
        let v = la.last_dim();
        assert_eq!(&both.logits.data()[..4 * v], la.data());
        assert_eq!(&both.logits.data()[4 * v..], lb.data());
    }

    #[test]
    fn single_and_double_precision_agree() {
        let m = Model::<f64>::new_random(tiny(), 9).unwrap();
        let m32: Model<f32> = m.cast();
        let toks = [0u32, 4, 8, 12, 15, 1];
        let a = m.logits(&toks).unwrap();
        let b = m32.logits(&toks).unwrap().cast::<f64>();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-3);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn causal(seed in 0u64..1000, prefix in proptest::collection::vec(0u32..16, 1..6),
                      tail_a in proptest::collection::vec(0u32..16, 1..5),
                      tail_b in proptest::collection::vec(0u32..16, 1..5)) {
                let m = Model::<f64>::new_random(tiny(), seed).unwrap();
                let mut a = prefix.clone();
                a.extend(&tail_a);
                let mut b = prefix.clone();
                b.extend(&tail_b);
                let la = m.logits(&a).unwrap();
                let lb = m.logits(&b).unwrap();
                let v = la.last_dim();
                let n = prefix.len() * v;
                prop_assert_eq!(&la.data()[..n], &lb.data()[..n]);
            }
        }
    }
}
