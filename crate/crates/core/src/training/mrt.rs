//! Minimum risk training over a sampled candidate set.

use std::collections::{BTreeMap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::metrics::{MetricError, MetricSpec};
use crate::model::layers::{self, BoundModel, DropoutVars};
use crate::model::{ModelParams, SourceBatch, TargetBatch};
use crate::numerics::{Graph, Tensor, Var};
use crate::EOS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MrtConfig {
    /// Number of ancestral samples drawn (before deduplication).
    pub sample_size: usize,
    /// Sharpness of `Q(y) ~ p(y|x)^alpha`.
    pub alpha: f64,
    /// Sample length cap including EOS; `None` means `2 * |source| + 2`.
    pub max_len: Option<usize>,
    /// Sentence loss `delta = 1 - score` used by training.
    pub metric: MetricSpec,
}

impl Default for MrtConfig {
    fn default() -> Self {
        Self {
            sample_size: 20,
            alpha: 1.0,
            max_len: None,
            metric: MetricSpec::default(),
        }
    }
}

/// Per-sentence result of [`mrt_loss`].
#[derive(Clone, Debug)]
pub struct MrtOutcome {
    pub risk: f64,
    /// Candidate targets, each ending in EOS; the reference is among them.
    pub candidates: Vec<Vec<usize>>,
    pub deltas: Vec<f64>,
    pub gradients: BTreeMap<String, Tensor>,
}

fn strip_eos(s: &[usize]) -> &[usize] {
    match s.last() {
        Some(&EOS) => &s[..s.len() - 1],
        _ => s,
    }
}

/// Draws `n` target sequences from the model by ancestral sampling at
/// temperature 1. Every returned sequence ends in EOS; one that reaches
/// `max_len - 1` tokens without stopping gets EOS appended.
pub fn sample_candidates(
    params: &ModelParams,
    source: &[Vec<usize>],
    n: usize,
    max_len: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<usize>>, TrainError> {
    if n == 0 || max_len == 0 {
        return Ok(Vec::new());
    }
    let mut g = Graph::new();
    let m = BoundModel::bind(&mut g, params)?;
    let drop = DropoutVars::default();
    let src = SourceBatch::new(&[source], params.config())?;
    let embedded = layers::embed_source(&mut g, &m, &src)?;
    let enc = layers::encode(&mut g, &m, &embedded, &src.mask, &drop)?;
    let enc = enc.select_rows(&mut g, &vec![0; n])?;
    let mut s = layers::init_decoder(&mut g, &m, &enc)?;

    let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut done = vec![false; n];
    let mut y_prev: Vec<Option<usize>> = vec![None; n];
    for _ in 0..max_len - 1 {
        let step = layers::cgru_step(&mut g, &m, &enc, &y_prev, s, &drop)?;
        let lp = layers::deep_output(&mut g, &m, step.state, step.embedding, step.context, &drop)?;
        let lp = g.value(lp);
        for r in 0..n {
            if done[r] {
                y_prev[r] = Some(EOS);
                continue;
            }
            let u: f64 = rng.random();
            let row = lp.row(r);
            let mut acc = 0.0;
            let mut pick = row.len() - 1;
            for (id, &l) in row.iter().enumerate() {
                acc += l.exp();
                if u < acc {
                    pick = id;
                    break;
                }
            }
            out[r].push(pick);
            done[r] = pick == EOS;
            y_prev[r] = Some(pick);
        }
        s = step.state;
        if done.iter().all(|&d| d) {
            break;
        }
    }
    for c in &mut out {
        if c.last() != Some(&EOS) {
            c.push(EOS);
        }
    }
    Ok(out)
}

/// `sum_y Q(y) * delta(y)` with `Q = softmax(alpha * logprob)`.
pub fn expected_risk(logprobs: &[f64], deltas: &[f64], alpha: f64) -> f64 {
    let scaled: Vec<f64> = logprobs.iter().map(|l| alpha * l).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = w.iter().sum();
    w.iter().zip(deltas).map(|(w, d)| w / z * d).sum()
}

/// Expected risk over a fixed candidate set as a scalar graph node; the
/// candidates are constants, so gradients flow only through `Q`.
pub fn mrt_objective(
    g: &mut Graph,
    m: &BoundModel,
    source: &[Vec<usize>],
    candidates: &[Vec<usize>],
    deltas: &[f64],
    alpha: f64,
    drop: &DropoutVars,
) -> Result<Var, TrainError> {
    if candidates.is_empty() || candidates.len() != deltas.len() {
        return Err(TrainError::Empty("candidate set"));
    }
    let k = candidates.len();
    let sources = vec![source; k];
    let src = SourceBatch::new(&sources, &m.config)?;
    let tgt = TargetBatch::new(candidates, &m.config)?;
    let fwd = layers::forward_logprobs(g, m, &src, &tgt, drop)?;
    let scaled = g.scale(fwd.sentence_logprobs, alpha)?;
    let row = g.transpose(scaled)?;
    let q = g.softmax(row)?;
    let d = g.constant(Tensor::matrix(k, 1, deltas.to_vec())?);
    let risk = g.matmul(q, d)?;
    Ok(g.sum(risk)?)
}

/// Samples candidates, injects the reference, and returns the expected
/// risk with its parameter gradients. `loss_fn(hyp, reference)` sees
/// sequences without EOS and must return a value in `[0, 1]`.
pub fn mrt_loss(
    params: &ModelParams,
    source: &[Vec<usize>],
    reference: &[usize],
    config: &MrtConfig,
    loss_fn: &dyn Fn(&[usize], &[usize]) -> Result<f64, MetricError>,
    rng: &mut impl Rng,
) -> Result<MrtOutcome, TrainError> {
    if config.sample_size < 2 {
        return Err(TrainError::Config {
            field: "sample_size",
            reason: "MRT needs at least 2 samples".into(),
        });
    }
    let mut reference = reference.to_vec();
    if reference.last() != Some(&EOS) {
        reference.push(EOS);
    }
    let max_len = config.max_len.unwrap_or(2 * source.len() + 2);
    let samples = sample_candidates(params, source, config.sample_size, max_len, rng)?;

    let mut seen = HashSet::new();
    let mut candidates = Vec::with_capacity(samples.len() + 1);
    for c in std::iter::once(reference.clone()).chain(samples) {
        if seen.insert(c.clone()) {
            candidates.push(c);
        }
    }
    let deltas = candidates
        .iter()
        .map(|c| {
            let d = loss_fn(strip_eos(c), strip_eos(&reference))?;
            if !(0.0..=1.0).contains(&d) {
                return Err(TrainError::Config {
                    field: "loss_fn",
                    reason: format!("loss {d} outside [0, 1]"),
                });
            }
            Ok(d)
        })
        .collect::<Result<Vec<_>, TrainError>>()?;

    let mut g = Graph::new();
    let m = BoundModel::bind(&mut g, params)?;
    let risk = mrt_objective(&mut g, &m, source, &candidates, &deltas, config.alpha, &DropoutVars::default())?;
    let gradients = g.backward(risk)?.into_params();
    Ok(MrtOutcome {
        risk: g.value(risk).item(),
        candidates,
        deltas,
        gradients,
    })
}
