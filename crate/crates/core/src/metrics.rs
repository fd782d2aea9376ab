//! Sentence-level similarity metrics and their linear interpolation.
//!
//! Every metric maps a (hypothesis, reference) pair to a score in `[0, 1]`.
//! Training code that needs a *loss* uses `1 - score`
//! ([`MetricSpec::loss`]).
//!
//! Smoothed BLEU: the unigram precision is left unsmoothed, every higher
//! order precision is add-one smoothed as `(matches + 1) / (total + 1)`,
//! and the geometric mean runs over orders `1..=min(max_n, |hyp|)`.
//! Corpus-level BLEU is not provided; validation uses the mean sentence
//! score.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("unknown metric {0:?}")]
    UnknownMetric(String),
    #[error("metric weights must be nonnegative and sum to 1 (got {0})")]
    Weights(f64),
    #[error("metric spec has no components")]
    Empty,
    #[error("metric {metric:?} needs a sentence index")]
    MissingSentence { metric: String },
    #[error("metric {metric:?} has no score for sentence {sentence}")]
    SentenceOutOfRange { metric: String, sentence: usize },
    #[error("line {line}: {reason}")]
    ScoreFile { line: usize, reason: String },
    #[error("score file: {0}")]
    Read(String),
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and the hypothesis n-gram total for order `n`.
pub fn clipped_matches<T: Eq + Hash>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matches = h
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (matches, hyp.len().saturating_sub(n - 1))
}

/// Smoothed sentence-level BLEU in `[0, 1]`; empty hypotheses score 0.
pub fn smoothed_sentence_bleu<T: Eq + Hash>(hyp: &[T], reference: &[T], max_n: usize) -> f64 {
    if hyp.is_empty() || reference.is_empty() || max_n == 0 {
        return 0.0;
    }
    let orders = max_n.min(hyp.len());
    let mut log_sum = 0.0;
    for n in 1..=orders {
        let (m, total) = clipped_matches(hyp, reference, n);
        let p = if n == 1 {
            m as f64 / total as f64
        } else {
            (m as f64 + 1.0) / (total as f64 + 1.0)
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
    }
    let precision = (log_sum / orders as f64).exp();
    let bp = if hyp.len() < reference.len() {
        (1.0 - reference.len() as f64 / hyp.len() as f64).exp()
    } else {
        1.0
    };
    (bp * precision).clamp(0.0, 1.0)
}

/// A candidate/reference pair, optionally tagged with its sentence index
/// (needed by metrics backed by precomputed score files).
#[derive(Clone, Copy, Debug)]
pub struct SentencePair<'a> {
    pub hyp: &'a [usize],
    pub reference: &'a [usize],
    pub sentence: Option<usize>,
}

impl<'a> SentencePair<'a> {
    pub fn new(hyp: &'a [usize], reference: &'a [usize]) -> Self {
        Self {
            hyp,
            reference,
            sentence: None,
        }
    }
}

pub trait SentenceMetric: Send + Sync {
    fn score(&self, pair: &SentencePair<'_>) -> Result<f64, MetricError>;
}

impl<F> SentenceMetric for F
where
    F: Fn(&[usize], &[usize]) -> f64 + Send + Sync,
{
    fn score(&self, pair: &SentencePair<'_>) -> Result<f64, MetricError> {
        Ok(self(pair.hyp, pair.reference))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SentenceBleu {
    pub max_n: usize,
}

impl Default for SentenceBleu {
    fn default() -> Self {
        Self { max_n: 4 }
    }
}

impl SentenceMetric for SentenceBleu {
    fn score(&self, pair: &SentencePair<'_>) -> Result<f64, MetricError> {
        Ok(smoothed_sentence_bleu(pair.hyp, pair.reference, self.max_n))
    }
}

/// Per-sentence scores computed by an external tool, one real per line.
#[derive(Clone, Debug, PartialEq)]
pub struct ExternalScores {
    name: String,
    scores: Vec<f64>,
}

impl ExternalScores {
    pub fn new(name: impl Into<String>, scores: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            scores,
        }
    }

    pub fn read(name: impl Into<String>, reader: impl BufRead) -> Result<Self, MetricError> {
        let mut scores = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| MetricError::Read(e.to_string()))?;
            let v: f64 = line.trim().parse().map_err(|_| MetricError::ScoreFile {
                line: i + 1,
                reason: format!("not a real number: {line:?}"),
            })?;
            if !(0.0..=1.0).contains(&v) {
                return Err(MetricError::ScoreFile {
                    line: i + 1,
                    reason: format!("score {v} outside [0, 1]"),
                });
            }
            scores.push(v);
        }
        Ok(Self::new(name, scores))
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

impl SentenceMetric for ExternalScores {
    fn score(&self, pair: &SentencePair<'_>) -> Result<f64, MetricError> {
        let i = pair.sentence.ok_or_else(|| MetricError::MissingSentence {
            metric: self.name.clone(),
        })?;
        self.scores
            .get(i)
            .copied()
            .ok_or_else(|| MetricError::SentenceOutOfRange {
                metric: self.name.clone(),
                sentence: i,
            })
    }
}

/// Named metrics available to [`MetricSpec`]. `"bleu"` is always present.
pub struct MetricRegistry {
    metrics: BTreeMap<String, Box<dyn SentenceMetric>>,
}

impl Default for MetricRegistry {
    fn default() -> Self {
        let mut r = Self {
            metrics: BTreeMap::new(),
        };
        r.register("bleu", SentenceBleu::default());
        r
    }
}

impl MetricRegistry {
    pub fn register(&mut self, name: impl Into<String>, metric: impl SentenceMetric + 'static) {
        self.metrics.insert(name.into(), Box::new(metric));
    }

    pub fn get(&self, name: &str) -> Result<&dyn SentenceMetric, MetricError> {
        self.metrics
            .get(name)
            .map(|m| m.as_ref())
            .ok_or_else(|| MetricError::UnknownMetric(name.into()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.metrics.keys().map(String::as_str)
    }
}

/// Weighted combination of registered metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub components: Vec<(String, f64)>,
}

impl Default for MetricSpec {
    fn default() -> Self {
        Self::single("bleu")
    }
}

impl MetricSpec {
    pub fn single(name: impl Into<String>) -> Self {
        Self {
            components: vec![(name.into(), 1.0)],
        }
    }

    pub fn validate(&self) -> Result<(), MetricError> {
        if self.components.is_empty() {
            return Err(MetricError::Empty);
        }
        let total: f64 = self.components.iter().map(|(_, w)| w).sum();
        if self.components.iter().any(|(_, w)| *w < 0.0 || !w.is_finite()) || (total - 1.0).abs() > 1e-9 {
            return Err(MetricError::Weights(total));
        }
        Ok(())
    }

    /// `loss = 1 - interpolate(...)`, in `[0, 1]`.
    pub fn loss(&self, registry: &MetricRegistry, pair: &SentencePair<'_>) -> Result<f64, MetricError> {
        Ok(1.0 - interpolate(self, registry, pair)?)
    }
}

/// `sum_i w_i * metric_i(hyp, ref)`.
pub fn interpolate(spec: &MetricSpec, registry: &MetricRegistry, pair: &SentencePair<'_>) -> Result<f64, MetricError> {
    spec.validate()?;
    let mut total = 0.0;
    for (name, w) in &spec.components {
        total += w * registry.get(name)?.score(pair)?;
    }
    Ok(total.clamp(0.0, 1.0))
}
