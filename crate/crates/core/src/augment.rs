//! Weak and strong augmentation channels and text featurization.
//!
//! Text inputs are augmented at the token level (synonym replacement, token
//! dropout, local shuffles) and only then hashed into a bag-of-words vector.
//! Dense synthetic inputs get additive Gaussian noise.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{mix64, HardLabel, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    Tokens(Vec<u32>),
    Features(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// Stable identifier within a corpus, used for split bookkeeping.
    pub id: u64,
    pub payload: Payload,
    pub label: Option<HardLabel>,
}

impl Example {
    pub fn labeled(id: u64, payload: Payload, label: HardLabel) -> Self {
        Example {
            id,
            payload,
            label: Some(label),
        }
    }

    pub fn unlabeled(id: u64, payload: Payload) -> Self {
        Example {
            id,
            payload,
            label: None,
        }
    }

    fn with_payload(&self, payload: Payload) -> Self {
        Example {
            id: self.id,
            payload,
            label: self.label,
        }
    }
}

/// Bidirectional token ↔ id table. Ids are assigned in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocabulary {
    ids: HashMap<String, u32>,
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.ids.insert(token.to_string(), id);
        self.tokens.push(token.to_string());
        id
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn encode(&mut self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.intern(t)).collect()
    }
}

/// Lowercased whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Token → candidate replacements.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SynonymMap {
    table: HashMap<u32, Vec<u32>>,
}

impl SynonymMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, token: u32, synonyms: Vec<u32>) {
        self.table.insert(token, synonyms);
    }

    pub fn synonyms(&self, token: u32) -> &[u32] {
        self.table.get(&token).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Parses `token<TAB>syn1,syn2,...` lines. Blank lines and lines starting
    /// with `#` are skipped. Tokens are lowercased and interned into `vocab`.
    pub fn parse(text: &str, vocab: &mut Vocabulary) -> Result<Self> {
        let mut map = SynonymMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (head, tail) = line.split_once('\t').ok_or_else(|| Error::Row {
                path: "<synonyms>".into(),
                row: lineno + 1,
                message: "expected `token<TAB>synonyms`".into(),
            })?;
            let head = head.trim().to_lowercase();
            if head.is_empty() || head.contains(char::is_whitespace) {
                return Err(Error::Row {
                    path: "<synonyms>".into(),
                    row: lineno + 1,
                    message: format!("bad token `{head}`"),
                });
            }
            let key = vocab.intern(&head);
            let syns: Vec<u32> = tail
                .split(',')
                .map(|s| s.trim().to_lowercase())
                .filter(|s| !s.is_empty() && *s != head)
                .map(|s| vocab.intern(&s))
                .collect();
            map.table.entry(key).or_default().extend(syns);
        }
        Ok(map)
    }

    pub fn load(path: &Path, vocab: &mut Vocabulary) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SynonymMap::parse(&text, vocab).map_err(|e| match e {
            Error::Row { row, message, .. } => Error::Row {
                path: path.to_path_buf(),
                row,
                message,
            },
            other => other,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeakSpec {
    /// Per-token synonym replacement probability.
    pub replace_rate: f64,
    /// Noise std for dense features.
    pub noise_std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrongSpec {
    pub replace_rate: f64,
    /// Per-token drop probability. At least one token always survives.
    pub dropout: f64,
    /// Size of the non-overlapping windows that may be shuffled.
    pub shuffle_window: usize,
    /// Probability that a given window is shuffled.
    pub shuffle_rate: f64,
    pub noise_std: f64,
}

impl Default for WeakSpec {
    fn default() -> Self {
        WeakSpec {
            replace_rate: 0.3,
            noise_std: 0.1,
        }
    }
}

impl Default for StrongSpec {
    fn default() -> Self {
        StrongSpec {
            replace_rate: 0.5,
            dropout: 0.1,
            shuffle_window: 3,
            shuffle_rate: 0.5,
            noise_std: 0.5,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AugmentSpec {
    pub weak: WeakSpec,
    pub strong: StrongSpec,
    pub synonyms: Option<Arc<SynonymMap>>,
}

fn check_rate(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

impl AugmentSpec {
    /// Load-time checks: rates in `[0, 1]` and a strong channel that perturbs
    /// strictly more than the weak one in both payload modes.
    pub fn validate(&self) -> Result<()> {
        check_rate("weak replace rate", self.weak.replace_rate)?;
        check_rate("strong replace rate", self.strong.replace_rate)?;
        check_rate("strong dropout", self.strong.dropout)?;
        check_rate("strong shuffle rate", self.strong.shuffle_rate)?;
        if !(self.weak.noise_std >= 0.0) {
            return Err(Error::Config("weak noise std must be non-negative".into()));
        }
        if !(self.strong.noise_std > self.weak.noise_std) {
            return Err(Error::Config(format!(
                "strong noise std ({}) must exceed weak noise std ({})",
                self.strong.noise_std, self.weak.noise_std
            )));
        }
        let shuffles = self.strong.shuffle_window >= 2 && self.strong.shuffle_rate > 0.0;
        let stronger = self.strong.replace_rate > self.weak.replace_rate || self.strong.dropout > 0.0 || shuffles;
        if self.strong.replace_rate < self.weak.replace_rate || !stronger {
            return Err(Error::Config(
                "strong token perturbation must exceed the weak one".into(),
            ));
        }
        Ok(())
    }

    fn synonyms(&self) -> Result<&SynonymMap> {
        self.synonyms
            .as_deref()
            .ok_or_else(|| Error::Config("text augmentation requires a synonym map".into()))
    }
}

fn replace_synonyms(tokens: &[u32], rate: f64, synonyms: &SynonymMap, rng: &mut SeededRng) -> Vec<u32> {
    tokens
        .iter()
        .map(|&t| {
            // One draw per token regardless of outcome keeps streams aligned.
            let hit = rng.uniform() < rate;
            let candidates = synonyms.synonyms(t);
            if hit && !candidates.is_empty() {
                candidates[rng.below(candidates.len())]
            } else {
                t
            }
        })
        .collect()
}

fn add_noise(features: &[f64], std: f64, rng: &mut SeededRng) -> Vec<f64> {
    features.iter().map(|x| x + std * rng.normal()).collect()
}

/// α(·): synonym replacement for text, small Gaussian noise for features.
pub fn weak_augment(example: &Example, spec: &AugmentSpec, rng: &mut SeededRng) -> Result<Example> {
    let payload = match &example.payload {
        Payload::Tokens(tokens) => {
            let synonyms = spec.synonyms()?;
            Payload::Tokens(replace_synonyms(tokens, spec.weak.replace_rate, synonyms, rng))
        }
        Payload::Features(x) => Payload::Features(add_noise(x, spec.weak.noise_std, rng)),
    };
    Ok(example.with_payload(payload))
}

/// A(·): heavier synonym replacement, token dropout and windowed shuffles for
/// text; larger Gaussian noise for features.
pub fn strong_augment(example: &Example, spec: &AugmentSpec, rng: &mut SeededRng) -> Result<Example> {
    let payload = match &example.payload {
        Payload::Tokens(tokens) => {
            let synonyms = spec.synonyms()?;
            let s = &spec.strong;
            let replaced = replace_synonyms(tokens, s.replace_rate, synonyms, rng);
            let mut kept: Vec<u32> = replaced.iter().copied().filter(|_| rng.uniform() >= s.dropout).collect();
            if kept.is_empty() {
                if let Some(&first) = replaced.first() {
                    kept.push(first);
                }
            }
            if s.shuffle_window >= 2 {
                for window in kept.chunks_mut(s.shuffle_window) {
                    if rng.uniform() < s.shuffle_rate {
                        rng.shuffle(window);
                    }
                }
            }
            Payload::Tokens(kept)
        }
        Payload::Features(x) => Payload::Features(add_noise(x, spec.strong.noise_std, rng)),
    };
    Ok(example.with_payload(payload))
}

/// Maps a payload to the classifier's input vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Featurizer {
    /// Dense payloads pass through unchanged.
    Dense { dim: usize },
    /// Token counts hashed into `buckets`, then L2-normalized.
    HashedBow { buckets: usize },
}

impl Featurizer {
    pub fn dim(&self) -> usize {
        match *self {
            Featurizer::Dense { dim } => dim,
            Featurizer::HashedBow { buckets } => buckets,
        }
    }

    pub fn features(&self, payload: &Payload) -> Result<Vec<f64>> {
        match (self, payload) {
            (Featurizer::Dense { dim }, Payload::Features(x)) => {
                if x.len() != *dim {
                    return Err(Error::Dimension {
                        expected: *dim,
                        got: x.len(),
                    });
                }
                Ok(x.clone())
            }
            (Featurizer::HashedBow { buckets }, Payload::Tokens(tokens)) => {
                let mut v = vec![0.0; *buckets];
                for &t in tokens {
                    v[(mix64(t as u64) % *buckets as u64) as usize] += 1.0;
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for x in &mut v {
                        *x /= norm;
                    }
                }
                Ok(v)
            }
            _ => Err(Error::Data("payload kind does not match the featurizer".into())),
        }
    }
}
