// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic character-level corpora.
//!
//! * `preference`: pairs of sequences where the chosen one carries more
//!   tokens of a designated good lexicon.
//! * `toxicity`: clean and toxic sub-corpora sharing the same common words
//!   but with disjoint marker lexicons.
//! * `speculative`: low-entropy periodic sequences, so multi-token drafting
//!   is learnable.
//!
//! A corpus is written as one sample per line plus a `.spec.toml` sidecar
//! holding the generator spec; the spec and seed regenerate it exactly.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OtterError, Result};

/// The fixed 64-symbol character vocabulary.
pub const ALPHABET: &str = " \nabcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ.,!?#@*%&$";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self { chars: ALPHABET.chars().collect() }
    }
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn id(&self, c: char) -> Option<u32> {
        self.chars.iter().position(|&x| x == c).map(|i| i as u32)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.chars().map(|c| self.id(c).ok_or_else(|| OtterError::Input(format!("character {c:?} is not in the vocabulary")))).collect()
    }

    pub fn decode(&self, tokens: &[u32]) -> String {
        tokens.iter().map(|&t| self.chars.get(t as usize).copied().unwrap_or('\u{fffd}')).collect()
    }

    /// Token ids of every character used by `words`.
    pub fn lexicon(&self, words: &[String]) -> Result<HashSet<u32>> {
        let mut out = HashSet::new();
        for w in words {
            out.extend(self.encode(w)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusKind {
    Preference,
    Toxicity,
    Speculative,
}

impl fmt::Display for CorpusKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CorpusKind::Preference => "preference",
            CorpusKind::Toxicity => "toxicity",
            CorpusKind::Speculative => "speculative",
        })
    }
}

impl FromStr for CorpusKind {
    type Err = OtterError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "preference" => Ok(Self::Preference),
            "toxicity" => Ok(Self::Toxicity),
            "speculative" => Ok(Self::Speculative),
            other => Err(OtterError::Config(format!("unknown corpus kind `{other}`"))),
        }
    }
}

/// Generator settings. Unused fields are ignored by the other kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub kind: CorpusKind,
    pub seed: u64,
    /// Pairs, sequences per sub-corpus, or sequences.
    pub count: usize,
    /// Characters per sequence.
    pub seq_len: usize,
    /// Words every grammar shares.
    pub common_words: Vec<String>,
    /// Good words (preference) or clean markers (toxicity).
    pub marker_words: Vec<String>,
    /// Toxic markers (toxicity only).
    pub toxic_words: Vec<String>,
    /// Marker rate of chosen / clean / toxic sequences.
    pub rate_high: f64,
    /// Marker rate of rejected sequences.
    pub rate_low: f64,
    /// Repeating units (speculative only).
    pub patterns: Vec<String>,
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl CorpusSpec {
    pub fn default_for(kind: CorpusKind, seed: u64) -> Self {
        let common = words(&["the", "a", "cat", "dog", "sat", "ran", "on", "mat", "big", "red", "sun", "went", "to", "is", "it", "and"]);
        match kind {
            CorpusKind::Preference => Self {
                kind,
                seed,
                count: 512,
                seq_len: 32,
                common_words: common,
                marker_words: words(&["JOY", "KIND", "WOW", "GOOD"]),
                toxic_words: vec![],
                rate_high: 0.45,
                rate_low: 0.1,
                patterns: vec![],
            },
            CorpusKind::Toxicity => Self {
                kind,
                seed,
                count: 384,
                seq_len: 32,
                common_words: common,
                marker_words: words(&["NICE", "CALM", "HUG"]),
                toxic_words: words(&["#@*", "%&$", "!#%", "@$*"]),
                rate_high: 0.3,
                rate_low: 0.0,
                patterns: vec![],
            },
            CorpusKind::Speculative => Self {
                kind,
                seed,
                count: 256,
                seq_len: 32,
                common_words: vec![],
                marker_words: vec![],
                toxic_words: vec![],
                rate_high: 0.0,
                rate_low: 0.0,
                patterns: words(&["ab", "cde", "fghi", "jk l", "mnop", "qrs.", "tu", "vwxy"]),
            },
        }
    }

    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        if self.count == 0 || self.seq_len < 2 {
            return Err(OtterError::Config("corpus needs count >= 1 and seq_len >= 2".into()));
        }
        let rate_ok = |r: f64| (0.0..=1.0).contains(&r);
        if !rate_ok(self.rate_high) || !rate_ok(self.rate_low) {
            return Err(OtterError::Config("marker rates must lie in [0, 1]".into()));
        }
        for w in self.common_words.iter().chain(&self.marker_words).chain(&self.toxic_words).chain(&self.patterns) {
            if w.is_empty() || w.contains('\n') {
                return Err(OtterError::Config(format!("invalid word {w:?}")));
            }
            vocab.encode(w)?;
        }
        let common = vocab.lexicon(&self.common_words)?;
        match self.kind {
            CorpusKind::Preference | CorpusKind::Toxicity => {
                if self.common_words.is_empty() {
                    return Err(OtterError::Config("common word list is empty".into()));
                }
                let marker = vocab.lexicon(&self.marker_words)?;
                if marker.is_empty() {
                    return Err(OtterError::Config("marker lexicon is empty".into()));
                }
                if !marker.is_disjoint(&common) {
                    return Err(OtterError::Config("marker words share characters with the common words".into()));
                }
                if self.kind == CorpusKind::Preference && self.rate_high <= self.rate_low {
                    return Err(OtterError::Config("rate_high must exceed rate_low".into()));
                }
                if self.kind == CorpusKind::Toxicity {
                    let toxic = vocab.lexicon(&self.toxic_words)?;
                    if toxic.is_empty() {
                        return Err(OtterError::Config("toxic lexicon is empty".into()));
                    }
                    if !toxic.is_disjoint(&marker) || !toxic.is_disjoint(&common) {
                        return Err(OtterError::Config("toxic lexicon overlaps the other lexicons".into()));
                    }
                }
            }
            CorpusKind::Speculative => {
                if self.patterns.is_empty() {
                    return Err(OtterError::Config("speculative corpus needs at least one pattern".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sample {
    Text(String),
    Pair { chosen: String, rejected: String },
    Labeled { toxic: bool, text: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub samples: Vec<Sample>,
}

/// Space-separated words, each a marker with probability `rate`, cut to
/// exactly `len` characters.
fn word_sequence(rng: &mut ChaCha8Rng, common: &[String], markers: &[String], rate: f64, len: usize) -> String {
    let mut s = String::new();
    while s.len() < len {
        if !s.is_empty() {
            s.push(' ');
        }
        let w = if !markers.is_empty() && rng.random::<f64>() < rate { markers } else { common }.choose(rng).expect("non-empty word list");
        s.push_str(w);
    }
    s.truncate(len);
    s
}

fn count_in(text: &str, lexicon: &HashSet<char>) -> usize {
    text.chars().filter(|c| lexicon.contains(c)).count()
}

/// Generates the corpus described by `spec`.
pub fn gen_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    let vocab = Vocab::default();
    spec.validate(&vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::with_capacity(spec.count);
    match spec.kind {
        CorpusKind::Preference => {
            let good: HashSet<char> = spec.marker_words.iter().flat_map(|w| w.chars()).collect();
            while samples.len() < spec.count {
                let chosen = word_sequence(&mut rng, &spec.common_words, &spec.marker_words, spec.rate_high, spec.seq_len);
                let rejected = word_sequence(&mut rng, &spec.common_words, &spec.marker_words, spec.rate_low, spec.seq_len);
                if count_in(&chosen, &good) > count_in(&rejected, &good) {
                    samples.push(Sample::Pair { chosen, rejected });
                }
            }
        }
        CorpusKind::Toxicity => {
            for i in 0..2 * spec.count {
                let toxic = i % 2 == 1;
                let markers = if toxic { &spec.toxic_words } else { &spec.marker_words };
                let text = word_sequence(&mut rng, &spec.common_words, markers, spec.rate_high, spec.seq_len);
                samples.push(Sample::Labeled { toxic, text });
            }
        }
        CorpusKind::Speculative => {
            for _ in 0..spec.count {
                let p: Vec<char> = spec.patterns.choose(&mut rng).expect("patterns").chars().collect();
                let phase = rng.random_range(0..p.len());
                let text: String = (0..spec.seq_len).map(|i| p[(phase + i) % p.len()]).collect();
                samples.push(Sample::Text(text));
            }
        }
    }
    Ok(Corpus { spec: spec.clone(), samples })
}

impl Corpus {
    /// Every text in the corpus (both sides of pairs).
    pub fn texts(&self) -> Vec<&str> {
        self.samples
            .iter()
            .flat_map(|s| match s {
                Sample::Text(t) | Sample::Labeled { text: t, .. } => vec![t.as_str()],
                Sample::Pair { chosen, rejected } => vec![chosen.as_str(), rejected.as_str()],
            })
            .collect()
    }

    pub fn encoded_texts(&self, vocab: &Vocab) -> Result<Vec<Vec<u32>>> {
        self.texts().into_iter().map(|t| vocab.encode(t)).collect()
    }

    pub fn encoded_pairs(&self, vocab: &Vocab) -> Result<Vec<(Vec<u32>, Vec<u32>)>> {
        self.samples
            .iter()
            .filter_map(|s| match s {
                Sample::Pair { chosen, rejected } => Some((chosen, rejected)),
                _ => None,
            })
            .map(|(c, r)| Ok((vocab.encode(c)?, vocab.encode(r)?)))
            .collect()
    }

    /// Texts of one toxicity sub-corpus.
    pub fn encoded_split(&self, vocab: &Vocab, want_toxic: bool) -> Result<Vec<Vec<u32>>> {
        self.samples
            .iter()
            .filter_map(|s| match s {
                Sample::Labeled { toxic, text } if *toxic == want_toxic => Some(text),
                _ => None,
            })
            .map(|t| vocab.encode(t))
            .collect()
    }

    /// Good-word (preference) or clean-marker (toxicity) lexicon.
    pub fn marker_lexicon(&self, vocab: &Vocab) -> Result<HashSet<u32>> {
        vocab.lexicon(&self.spec.marker_words)
    }

    pub fn toxic_lexicon(&self, vocab: &Vocab) -> Result<HashSet<u32>> {
        vocab.lexicon(&self.spec.toxic_words)
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".spec.toml");
        PathBuf::from(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for s in &self.samples {
            match s {
                Sample::Text(t) => text.push_str(t),
                Sample::Pair { chosen, rejected } => {
                    text.push_str(chosen);
                    text.push('\t');
                    text.push_str(rejected);
                }
                Sample::Labeled { toxic, text: t } => {
                    text.push_str(if *toxic { "toxic\t" } else { "clean\t" });
                    text.push_str(t);
                }
            }
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| OtterError::io(path, e))?;
        let spec = toml::to_string(&self.spec).map_err(|e| OtterError::Config(e.to_string()))?;
        let side = Self::sidecar_path(path);
        std::fs::write(&side, spec).map_err(|e| OtterError::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = Self::sidecar_path(path);
        let spec_text = std::fs::read_to_string(&side).map_err(|e| OtterError::io(&side, e))?;
        let spec: CorpusSpec = toml::from_str(&spec_text).map_err(|e| OtterError::Format { path: side.clone(), detail: e.to_string() })?;
        let text = std::fs::read_to_string(path).map_err(|e| OtterError::io(path, e))?;
        let bad = |line: usize, what: &str| OtterError::Format { path: path.into(), detail: format!("line {}: {what}", line + 1) };
        let mut samples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let s = match spec.kind {
                CorpusKind::Speculative => Sample::Text(line.to_string()),
                CorpusKind::Preference => {
                    let (c, r) = line.split_once('\t').ok_or_else(|| bad(i, "expected `chosen<TAB>rejected`"))?;
                    Sample::Pair { chosen: c.into(), rejected: r.into() }
                }
                CorpusKind::Toxicity => match line.split_once('\t') {
                    Some(("toxic", t)) => Sample::Labeled { toxic: true, text: t.into() },
                    Some(("clean", t)) => Sample::Labeled { toxic: false, text: t.into() },
                    _ => return Err(bad(i, "expected `clean|toxic<TAB>text`")),
                },
            };
            samples.push(s);
        }
        Ok(Self { spec, samples })
    }
}

/// Prompts: the first `len` characters of each text.
pub fn prompts_from(texts: &[Vec<u32>], len: usize) -> Vec<Vec<u32>> {
    texts.iter().map(|t| t[..len.min(t.len())].to_vec()).collect()
}
