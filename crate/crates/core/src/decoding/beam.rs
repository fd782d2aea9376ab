//! Beam search with a shrinking beam and an inspectable search graph.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::session::EnsembleSession;
use super::DecodeError;
use crate::model::ModelParams;
use crate::EOS;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Maximum hypothesis length, EOS included.
    pub max_len: usize,
    /// Final ranking uses `logprob / len^length_norm`.
    pub length_norm: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_size: 5,
            max_len: 100,
            length_norm: 1.0,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.beam_size == 0 {
            return Err(DecodeError::BeamSize);
        }
        if self.max_len == 0 {
            return Err(DecodeError::MaxLen);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens; ends with EOS iff `finished`.
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub step_logprobs: Vec<f64>,
    /// One attention row (over source positions) per emitted token.
    pub attention: Vec<Vec<f64>>,
    pub finished: bool,
    /// Set when the hypothesis hit `max_len` without emitting EOS.
    pub forced: bool,
    /// Search-graph node of the last token.
    pub node: usize,
}

impl Hypothesis {
    /// Tokens without the trailing EOS.
    pub fn output(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) if self.finished => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }

    /// `logprob / len^beta` with `len` counting EOS.
    pub fn normalized_score(&self, beta: f64) -> f64 {
        if beta == 0.0 {
            return self.logprob;
        }
        self.logprob / (self.tokens.len().max(1) as f64).powf(beta)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphNode {
    pub id: usize,
    pub parent: Option<usize>,
    /// `None` for the root.
    pub token: Option<usize>,
    /// Cumulative log-probability.
    pub logprob: f64,
    pub depth: usize,
    /// Not an ancestor of any returned hypothesis.
    pub pruned: bool,
}

/// Every hypothesis admitted to the beam, at most `k` per depth.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchGraph {
    pub nodes: Vec<GraphNode>,
    /// Root-to-leaf node ids of the best hypothesis.
    pub best_path: Vec<usize>,
}

impl SearchGraph {
    fn root() -> Self {
        Self {
            nodes: vec![GraphNode {
                id: 0,
                parent: None,
                token: None,
                logprob: 0.0,
                depth: 0,
                pruned: false,
            }],
            best_path: Vec::new(),
        }
    }

    fn push(&mut self, parent: usize, token: usize, logprob: f64) -> usize {
        let id = self.nodes.len();
        let depth = self.nodes[parent].depth + 1;
        self.nodes.push(GraphNode {
            id,
            parent: Some(parent),
            token: Some(token),
            logprob,
            depth,
            pruned: true,
        });
        id
    }

    /// Node ids from the root down to `node`.
    pub fn path(&self, node: usize) -> Vec<usize> {
        let mut p = vec![node];
        let mut cur = node;
        while let Some(parent) = self.nodes[cur].parent {
            p.push(parent);
            cur = parent;
        }
        p.reverse();
        p
    }

    /// Tokens on the path to `node`.
    pub fn tokens(&self, node: usize) -> Vec<usize> {
        self.path(node).iter().filter_map(|&n| self.nodes[n].token).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamOutput {
    /// Best first under the length-normalised score.
    pub hypotheses: Vec<Hypothesis>,
    pub graph: SearchGraph,
    /// No hypothesis reached EOS within `max_len`.
    pub forced: bool,
}

impl BeamOutput {
    pub fn best(&self) -> &Hypothesis {
        &self.hypotheses[0]
    }
}

struct Candidate {
    parent: usize,
    token: usize,
    step: f64,
    total: f64,
}

/// Descending total, then parent order, then descending step score, then
/// token id; makes selection deterministic.
fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.total
        .total_cmp(&a.total)
        .then(a.parent.cmp(&b.parent))
        .then(b.step.total_cmp(&a.step))
        .then(a.token.cmp(&b.token))
}

/// Beam search over an ensemble (a one-element slice is a single model).
///
/// Each step expands the live hypotheses over the whole vocabulary and
/// keeps the best `k - completed` extensions; extensions ending in EOS
/// move to the completed pool. Search ends when `k` hypotheses are
/// complete, `max_len` is reached, or (only when `length_norm == 0`) the
/// best live score can no longer beat the worst completed one.
pub fn beam_search(
    models: &[ModelParams],
    source: &[Vec<usize>],
    config: &BeamConfig,
) -> Result<BeamOutput, DecodeError> {
    config.validate()?;
    let k = config.beam_size;
    let mut session = EnsembleSession::new(models, &[source])?;
    let mut graph = SearchGraph::root();
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        logprob: 0.0,
        step_logprobs: Vec::new(),
        attention: Vec::new(),
        finished: false,
        forced: false,
        node: 0,
    }];
    let mut completed: Vec<Hypothesis> = Vec::new();

    for depth in 1..=config.max_len {
        let y_prev: Vec<Option<usize>> = live.iter().map(|h| h.tokens.last().copied()).collect();
        let out = session.step(&y_prev)?;
        let (_, v) = out.logprobs.dims2();

        let mut cands = Vec::with_capacity(live.len() * v);
        for (r, h) in live.iter().enumerate() {
            for (token, &step) in out.logprobs.row(r).iter().enumerate() {
                cands.push(Candidate {
                    parent: r,
                    token,
                    step,
                    total: h.logprob + step,
                });
            }
        }
        cands.sort_by(rank);
        cands.truncate(k - completed.len());

        let mut next = Vec::with_capacity(cands.len());
        let mut rows = Vec::with_capacity(cands.len());
        for c in cands {
            let parent = &live[c.parent];
            let mut h = parent.clone();
            h.tokens.push(c.token);
            h.logprob = c.total;
            h.step_logprobs.push(c.step);
            h.attention.push(out.alpha.row(c.parent).to_vec());
            h.node = graph.push(parent.node, c.token, c.total);
            if c.token == EOS {
                h.finished = true;
                completed.push(h);
            } else if depth < config.max_len {
                rows.push(c.parent);
                next.push(h);
            } else {
                h.forced = true;
                next.push(h);
            }
        }
        live = next;

        if completed.len() >= k || live.is_empty() || depth == config.max_len {
            break;
        }
        if config.length_norm == 0.0 {
            let best_live = live.iter().map(|h| h.logprob).fold(f64::NEG_INFINITY, f64::max);
            let worst_done = completed.iter().map(|h| h.logprob).fold(f64::INFINITY, f64::min);
            if !completed.is_empty() && best_live <= worst_done {
                break;
            }
        }
        session.reorder(&rows)?;
    }

    let forced = completed.is_empty();
    let mut hypotheses = if forced {
        // Forcibly terminated: keep the best unfinished hypotheses.
        live.into_iter()
            .map(|mut h| {
                h.forced = true;
                h
            })
            .collect()
    } else {
        completed
    };
    let beta = config.length_norm;
    hypotheses.sort_by(|a, b| b.normalized_score(beta).total_cmp(&a.normalized_score(beta)));

    for h in &hypotheses {
        for n in graph.path(h.node) {
            graph.nodes[n].pruned = false;
        }
    }
    graph.best_path = hypotheses.first().map(|h| graph.path(h.node)).unwrap_or_default();
    Ok(BeamOutput {
        hypotheses,
        graph,
        forced,
    })
}
