// SPDX-License-Identifier: MIT OR Apache-2.0

//! Python bindings. Configuration and result structs cross the boundary as
//! plain dicts, converted through their serde representation, so the same
//! keys (and the same rejection of unknown keys) apply as in config files.

use std::path::PathBuf;

use otter_core::bench::llama7b_report;
use otter_core::checkpoint::{load_checkpoint, save_checkpoint};
use otter_core::cli::random_prompts;
use otter_core::corpus::{gen_corpus as core_gen_corpus, CorpusKind, CorpusSpec, Sample, Vocab};
use otter_core::decoding::{decode as core_decode, DecodeParams, Roles};
use otter_core::error::OtterError as CoreError;
use otter_core::experiments::{self, ToyConfig};
use otter_core::otter::{verify_non_disruption, InitStrategy, OtterConfig, OtterModel};
use otter_core::training::{train, Dataset, Objective, TrainConfig};
use otter_core::transformer::{Model, ModelConfig};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde::de::DeserializeOwned;
use serde::Serialize;

create_exception!(otter, OtterError, PyException, "Raised for every error reported by the core library.");

fn err(e: CoreError) -> PyErr {
    OtterError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| OtterError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Overlays `overrides` on the serialized `base` and deserializes the result.
fn merged<T: Serialize + DeserializeOwned>(base: &T, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    let mut value = serde_json::to_value(base).map_err(|e| OtterError::new_err(e.to_string()))?;
    if let Some(d) = overrides {
        let text: String = d.py().import("json")?.call_method1("dumps", (d,))?.extract()?;
        let extra: serde_json::Value = serde_json::from_str(&text).map_err(|e| OtterError::new_err(e.to_string()))?;
        if let (Some(obj), serde_json::Value::Object(extra)) = (value.as_object_mut(), extra) {
            obj.extend(extra);
        }
    }
    serde_json::from_value(value).map_err(|e| OtterError::new_err(format!("invalid configuration: {e}")))
}

#[derive(FromPyObject)]
enum Tokens {
    Ids(Vec<u32>),
    Text(String),
}

impl Tokens {
    fn encode(self) -> PyResult<Vec<u32>> {
        match self {
            Tokens::Ids(ids) => Ok(ids),
            Tokens::Text(t) => Vocab::default().encode(&t).map_err(err),
        }
    }
}

#[derive(FromPyObject)]
enum ExtRef {
    Index(usize),
    Name(String),
}

/// Encodes text with the fixed character vocabulary.
#[pyfunction]
fn encode(text: &str) -> PyResult<Vec<u32>> {
    Vocab::default().encode(text).map_err(err)
}

/// Decodes token ids with the fixed character vocabulary.
#[pyfunction]
fn decode_tokens(tokens: Vec<u32>) -> String {
    Vocab::default().decode(&tokens)
}

/// Generates a synthetic corpus. Preference corpora yield `(chosen, rejected)`
/// tuples, toxicity corpora `(toxic, text)` tuples, speculative corpora strings.
/// With `out`, the corpus and its spec sidecar are also written to disk.
#[pyfunction]
#[pyo3(signature = (kind, seed=0, count=None, seq_len=None, out=None))]
fn gen_corpus<'py>(
    py: Python<'py>,
    kind: &str,
    seed: u64,
    count: Option<usize>,
    seq_len: Option<usize>,
    out: Option<PathBuf>,
) -> PyResult<Bound<'py, PyList>> {
    let kind: CorpusKind = kind.parse().map_err(err)?;
    let mut spec = CorpusSpec::default_for(kind, seed);
    spec.count = count.unwrap_or(spec.count);
    spec.seq_len = seq_len.unwrap_or(spec.seq_len);
    let corpus = core_gen_corpus(&spec).map_err(err)?;
    if let Some(path) = out {
        corpus.save(&path).map_err(err)?;
    }
    let items = corpus
        .samples
        .iter()
        .map(|s| match s {
            Sample::Text(t) => Ok(t.into_pyobject(py)?.into_any()),
            Sample::Pair { chosen, rejected } => (chosen, rejected).into_pyobject(py).map(Bound::into_any),
            Sample::Labeled { toxic, text } => (*toxic, text).into_pyobject(py).map(Bound::into_any),
        })
        .collect::<PyResult<Vec<_>>>()?;
    PyList::new(py, items)
}

/// A base transformer with a stack of inserted extensions (32-bit).
#[pyclass(name = "Otter", module = "otter")]
struct PyOtter {
    inner: OtterModel<f32>,
}

impl PyOtter {
    fn index(&self, ext: ExtRef) -> PyResult<usize> {
        match ext {
            ExtRef::Index(i) if i < self.inner.extensions.len() => Ok(i),
            ExtRef::Index(i) => Err(OtterError::new_err(format!("no extension {i}"))),
            ExtRef::Name(n) => self.inner.extension_index(&n).map_err(err),
        }
    }
}

#[pymethods]
impl PyOtter {
    /// A randomly initialized base model over the 64-symbol vocabulary.
    #[staticmethod]
    #[pyo3(signature = (d_inp=32, n_layers=2, n_heads=4, seed=0))]
    fn random_base(d_inp: usize, n_layers: usize, n_heads: usize, seed: u64) -> PyResult<Self> {
        let cfg = ModelConfig::tiny(Vocab::default().len(), d_inp, n_layers, n_heads);
        let model = Model::new_random(cfg, seed).map_err(err)?;
        Ok(Self { inner: OtterModel::from_base(model).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: load_checkpoint(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &path).map_err(err)
    }

    /// A copy with every extension stripped.
    fn base(&self) -> PyResult<Self> {
        let model = self.inner.base_model().map_err(err)?;
        Ok(Self { inner: OtterModel::from_base(model).map_err(err)? })
    }

    #[getter]
    fn extensions(&self) -> Vec<String> {
        self.inner.extensions.iter().map(|e| e.config.name.clone()).collect()
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, self.inner.config())
    }

    /// Inserts a new extension and returns its index. Only the new
    /// extension is trainable afterwards.
    #[pyo3(signature = (name, d_ext, d_inner_ext=None, n_ext_heads=1))]
    fn expand(&mut self, name: String, d_ext: usize, d_inner_ext: Option<usize>, n_ext_heads: usize) -> PyResult<usize> {
        let cfg = OtterConfig::new(name, d_ext, d_inner_ext.unwrap_or(d_ext), n_ext_heads);
        self.inner.expand(cfg).map_err(err)
    }

    #[pyo3(signature = (ext, strategy="copy", seed=0))]
    fn init_extension<'py>(&mut self, py: Python<'py>, ext: ExtRef, strategy: &str, seed: u64) -> PyResult<Bound<'py, PyAny>> {
        let idx = self.index(ext)?;
        let strategy: InitStrategy = strategy.parse().map_err(err)?;
        to_py(py, &self.inner.init_extension(idx, strategy, seed).map_err(err)?)
    }

    fn attach_reward_head(&mut self, ext: ExtRef) -> PyResult<()> {
        let idx = self.index(ext)?;
        self.inner.attach_reward_head(idx).map_err(err)
    }

    #[pyo3(signature = (ext, k=1))]
    fn attach_generation_heads(&mut self, ext: ExtRef, k: usize) -> PyResult<()> {
        let idx = self.index(ext)?;
        self.inner.attach_generation_heads(idx, k).map_err(err)
    }

    /// Marks parameter group `group` (0 is the base) as the one to train.
    fn set_trainable(&mut self, group: usize) -> PyResult<()> {
        self.inner.set_trainable(group).map_err(err)
    }

    fn freeze(&mut self) {
        self.inner.freeze();
    }

    fn param_counts<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.count_params())
    }

    /// Per-position logits as a list of rows.
    fn logits(&self, tokens: Tokens) -> PyResult<Vec<Vec<f32>>> {
        let t = self.inner.model.logits(&tokens.encode()?).map_err(err)?;
        let v = self.inner.config().vocab_size;
        Ok(t.data().chunks_exact(v).map(<[f32]>::to_vec).collect())
    }

    /// Trains the currently trainable group and returns the per-step records.
    ///
    /// `objective` is one of `lm`, `reward`, `expert_lm`, `draft`. `data` is a
    /// list of strings, or of `(chosen, rejected)` pairs for `reward`.
    /// `config` overrides training settings (epochs, lr, reg_lambda, ...).
    #[pyo3(signature = (objective, data, ext=None, config=None))]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        objective: &str,
        data: &Bound<'py, PyAny>,
        ext: Option<ExtRef>,
        config: Option<&Bound<'py, PyDict>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let cfg: TrainConfig = merged(&TrainConfig::default(), config)?;
        let vocab = Vocab::default();
        let need_ext = |ext: Option<ExtRef>| ext.ok_or_else(|| OtterError::new_err(format!("objective {objective} needs ext")));
        let (objective, pairs) = match objective {
            "lm" => (Objective::Lm, None),
            "reward" => (Objective::Reward { ext: self.index(need_ext(ext)?)? }, {
                let pairs: Vec<(String, String)> = data.extract()?;
                let enc = |s: &str| vocab.encode(s).map_err(err);
                Some(Dataset::Pairs(pairs.iter().map(|(a, b)| Ok((enc(a)?, enc(b)?))).collect::<PyResult<_>>()?))
            }),
            "expert_lm" => (Objective::ExpertLm { ext: self.index(need_ext(ext)?)? }, None),
            "draft" => (Objective::Medusa { ext: self.index(need_ext(ext)?)?, c: cfg.medusa_c }, None),
            other => return Err(OtterError::new_err(format!("unknown objective {other:?}"))),
        };
        let data = match pairs {
            Some(d) => d,
            None => {
                let texts: Vec<String> = data.extract()?;
                Dataset::Sequences(texts.iter().map(|t| vocab.encode(t)).collect::<Result<_, _>>().map_err(err)?)
            }
        };
        let records = py.detach(|| train(&mut self.inner, &objective, &data, &cfg, |_| {})).map_err(err)?;
        to_py(py, &records)
    }

    /// Decodes a continuation of `prompt`. Unnamed roles default to the
    /// topmost extension with a reward head (reward), with generation heads
    /// (draft), and the extensions named `expert` and `anti`. Remaining
    /// keyword arguments are decoding parameters (k, p, tau, w, alpha,
    /// max_new_tokens, seed, lm_score).
    #[pyo3(signature = (prompt, strategy="greedy", *, reward=None, expert=None, anti=None, draft=None, **params))]
    #[allow(clippy::too_many_arguments)]
    fn decode<'py>(
        &self,
        py: Python<'py>,
        prompt: Tokens,
        strategy: &str,
        reward: Option<&str>,
        expert: Option<&str>,
        anti: Option<&str>,
        draft: Option<&str>,
        params: Option<&Bound<'py, PyDict>>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let mut p: DecodeParams = merged(&DecodeParams::default(), params)?;
        p.strategy = strategy.parse().map_err(err)?;
        let roles = Roles::resolve(&self.inner, reward, expert, anti, draft).map_err(err)?;
        let prompt = prompt.encode()?;
        let r = py.detach(|| core_decode(&self.inner, &roles, &prompt, &p)).map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("text", Vocab::default().decode(&r.tokens))?;
        out.set_item("tokens", &r.tokens)?;
        out.set_item("strategy", r.strategy.name())?;
        out.set_item("accepted_lengths", r.accepted_lengths())?;
        Ok(out)
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!("Otter(d_inp={}, n_layers={}, n_heads={}, extensions={:?})", c.d_inp, c.n_layers, c.n_heads, self.extensions())
    }
}

/// Checks that `expanded` reproduces `base`'s logits within `tol` on random
/// prompts (or the given ones) and that every structural zero is zero.
/// Raises `OtterError` naming the first divergence; returns the report.
#[pyfunction]
#[pyo3(signature = (base, expanded, prompts=None, n_prompts=100, prompt_len=16, tol=1e-5, seed=0))]
#[allow(clippy::too_many_arguments)]
fn verify<'py>(
    py: Python<'py>,
    base: &PyOtter,
    expanded: &PyOtter,
    prompts: Option<Vec<Tokens>>,
    n_prompts: usize,
    prompt_len: usize,
    tol: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let prompts = match prompts {
        Some(p) => p.into_iter().map(Tokens::encode).collect::<PyResult<Vec<_>>>()?,
        None => random_prompts(seed, n_prompts, prompt_len, base.inner.config().vocab_size),
    };
    let b = base.inner.base_model().map_err(err)?;
    let report = py.detach(|| verify_non_disruption(&b, &expanded.inner, &prompts, tol)).map_err(err)?;
    to_py(py, &report)
}

/// Text of the parameter accounting at 7B scale.
#[pyfunction]
fn scale_report() -> String {
    llama7b_report().text()
}

/// Default settings of the toy studies, as a dict.
#[pyfunction]
fn toy_config(py: Python<'_>) -> PyResult<Bound<'_, PyAny>> {
    to_py(py, &ToyConfig::default())
}

macro_rules! study {
    ($(#[$doc:meta])* $name:ident, |$cfg:ident| $body:expr) => {
        $(#[$doc])*
        #[pyfunction]
        #[pyo3(signature = (config=None))]
        fn $name<'py>(py: Python<'py>, config: Option<&Bound<'py, PyDict>>) -> PyResult<Bound<'py, PyAny>> {
            let $cfg: ToyConfig = merged(&ToyConfig::default(), config)?;
            let result = py.detach(|| $body).map_err(err)?;
            to_py(py, &result)
        }
    };
}

study!(
    /// Reward-guided decoding study on the preference corpus.
    args_study, |cfg| experiments::args_study(&cfg)
);
study!(
    /// Expert mixing study on the toxicity corpus.
    dexp_study, |cfg| experiments::dexp_study(&cfg)
);
study!(
    /// Speculative decoding study with four draft heads.
    speculative_study, |cfg| experiments::speculative_study(&cfg, 4)
);
study!(
    /// Extension initialization comparison.
    init_study, |cfg| experiments::init_study(&cfg)
);

#[pymodule]
fn otter(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("OtterError", m.py().get_type::<OtterError>())?;
    m.add_class::<PyOtter>()?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(decode_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(gen_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(scale_report, m)?)?;
    m.add_function(wrap_pyfunction!(toy_config, m)?)?;
    m.add_function(wrap_pyfunction!(args_study, m)?)?;
    m.add_function(wrap_pyfunction!(dexp_study, m)?)?;
    m.add_function(wrap_pyfunction!(speculative_study, m)?)?;
    m.add_function(wrap_pyfunction!(init_study, m)?)?;
    Ok(())
}

/// Registers the module for embedded interpreters (used by the tests).
pub fn register() {
    pyo3::append_to_inittab!(otter);
}
