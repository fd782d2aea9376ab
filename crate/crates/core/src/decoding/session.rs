//! Step-by-step decoding state for one model and a batch of sources.

use std::collections::HashMap;

use super::DecodeError;
use crate::model::layers::{self, BoundModel, DropoutVars, Encoded};
use crate::model::{ModelParams, SourceBatch};
use crate::numerics::{Graph, Tensor, Var};

/// Encoder output plus the current decoder states of one model.
///
/// Each state row belongs to one source sentence (`row_source`); beam
/// search re-indexes rows with [`DecoderSession::reorder`] so several
/// hypotheses can share a sentence.
pub struct DecoderSession<'a> {
    params: &'a ModelParams,
    g: Graph,
    m: BoundModel,
    enc: Encoded,
    expanded: HashMap<Vec<usize>, Encoded>,
    row_source: Vec<usize>,
    state: Var,
}

/// One decoder step for every live row.
pub struct StepOutput {
    /// `rows x V` log-probabilities.
    pub logprobs: Tensor,
    /// `rows x T_x` attention weights.
    pub alpha: Tensor,
}

impl<'a> DecoderSession<'a> {
    pub fn new<S: AsRef<[Vec<usize>]>>(params: &'a ModelParams, sources: &[S]) -> Result<Self, DecodeError> {
        let mut g = Graph::new();
        let m = BoundModel::bind(&mut g, params)?;
        let src = SourceBatch::new(sources, params.config())?;
        let embedded = layers::embed_source(&mut g, &m, &src)?;
        let enc = layers::encode(&mut g, &m, &embedded, &src.mask, &DropoutVars::default())?;
        let state = layers::init_decoder(&mut g, &m, &enc)?;
        Ok(Self {
            params,
            g,
            m,
            row_source: (0..src.rows()).collect(),
            enc,
            expanded: HashMap::new(),
            state,
        })
    }

    pub fn params(&self) -> &ModelParams {
        self.params
    }

    pub fn rows(&self) -> usize {
        self.row_source.len()
    }

    pub fn source_len(&self) -> usize {
        self.enc.len()
    }

    /// Feeds `y_prev[r]` to row `r` (`None` is the start symbol) and
    /// advances every row by one cGRU step.
    pub fn step(&mut self, y_prev: &[Option<usize>]) -> Result<StepOutput, DecodeError> {
        let identity = self.row_source.iter().enumerate().all(|(i, &r)| i == r) && self.rows() == self.enc.rows();
        if !identity && !self.expanded.contains_key(&self.row_source) {
            let e = self.enc.select_rows(&mut self.g, &self.row_source)?;
            self.expanded.insert(self.row_source.clone(), e);
        }
        let enc = if identity {
            &self.enc
        } else {
            &self.expanded[&self.row_source]
        };
        let drop = DropoutVars::default();
        let step = layers::cgru_step(&mut self.g, &self.m, enc, y_prev, self.state, &drop)?;
        let lp = layers::deep_output(&mut self.g, &self.m, step.state, step.embedding, step.context, &drop)?;
        self.state = step.state;
        Ok(StepOutput {
            logprobs: self.g.value(lp).clone(),
            alpha: self.g.value(step.alpha).clone(),
        })
    }

    /// Keeps state rows `rows` (in that order, repeats allowed).
    pub fn reorder(&mut self, rows: &[usize]) -> Result<(), DecodeError> {
        let ids = rows.iter().map(|&r| Some(r)).collect();
        self.state = self.g.gather_rows(self.state, ids)?;
        self.row_source = rows.iter().map(|&r| self.row_source[r]).collect();
        Ok(())
    }
}

/// Row-wise geometric mean of member distributions, renormalised:
/// `log_softmax(mean_m logp_m)`. A single member passes through untouched.
pub fn ensemble_step_dist(logprobs: &[Tensor]) -> Result<Tensor, DecodeError> {
    let first = logprobs.first().ok_or(DecodeError::NoModels)?;
    for t in &logprobs[1..] {
        if t.shape() != first.shape() {
            return Err(DecodeError::VocabMismatch {
                expected: first.dims2().1,
                got: t.dims2().1,
            });
        }
    }
    if logprobs.len() == 1 {
        return Ok(first.clone());
    }
    let (rows, v) = first.dims2();
    let m = logprobs.len() as f64;
    let mut out = vec![0.0; rows * v];
    for t in logprobs {
        for (o, x) in out.iter_mut().zip(t.data()) {
            *o += x;
        }
    }
    for row in out.chunks_mut(v) {
        row.iter_mut().for_each(|x| *x /= m);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|x| *x -= lse);
    }
    Ok(Tensor::new(first.shape().to_vec(), out)?)
}

/// All members' sessions, advanced in lockstep.
pub struct EnsembleSession<'a> {
    pub members: Vec<DecoderSession<'a>>,
}

impl<'a> EnsembleSession<'a> {
    pub fn new<S: AsRef<[Vec<usize>]>>(models: &'a [ModelParams], sources: &[S]) -> Result<Self, DecodeError> {
        check_ensemble(models)?;
        Ok(Self {
            members: models
                .iter()
                .map(|p| DecoderSession::new(p, sources))
                .collect::<Result<_, _>>()?,
        })
    }

    /// Combined log-probabilities and member-averaged attention.
    pub fn step(&mut self, y_prev: &[Option<usize>]) -> Result<StepOutput, DecodeError> {
        let outs = self
            .members
            .iter_mut()
            .map(|s| s.step(y_prev))
            .collect::<Result<Vec<_>, _>>()?;
        let lps: Vec<Tensor> = outs.iter().map(|o| o.logprobs.clone()).collect();
        let logprobs = ensemble_step_dist(&lps)?;
        let mut alpha = outs[0].alpha.clone();
        if outs.len() > 1 {
            let m = outs.len() as f64;
            for o in &outs[1..] {
                alpha.axpy(1.0, &o.alpha);
            }
            alpha = alpha.map(|x| x / m);
        }
        Ok(StepOutput { logprobs, alpha })
    }

    pub fn reorder(&mut self, rows: &[usize]) -> Result<(), DecodeError> {
        self.members.iter_mut().try_for_each(|s| s.reorder(rows))
    }
}

/// Members must agree on the output vocabulary; dimensions may differ.
pub fn check_ensemble(models: &[ModelParams]) -> Result<(), DecodeError> {
    let first = models.first().ok_or(DecodeError::NoModels)?;
    let v = first.config().target_vocab_size;
    for p in &models[1..] {
        if p.config().target_vocab_size != v {
            return Err(DecodeError::VocabMismatch {
                expected: v,
                got: p.config().target_vocab_size,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{InitConfig, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dist(p: &[f64]) -> Tensor {
        Tensor::matrix(1, p.len(), p.iter().map(|x| x.ln()).collect()).unwrap()
    }

    #[test]
    fn geometric_mean_example() {
        let out = ensemble_step_dist(&[dist(&[0.9, 0.1]), dist(&[0.5, 0.5])]).unwrap();
        assert!((out.data()[0].exp() - 0.75).abs() < 1e-12);
        assert!((out.data()[1].exp() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn single_member_passes_through() {
        let d = dist(&[0.2, 0.3, 0.5]);
        assert_eq!(ensemble_step_dist(std::slice::from_ref(&d)).unwrap(), d);
    }

    #[test]
    fn identical_members_are_idempotent_and_order_free() {
        let a = dist(&[0.2, 0.3, 0.5]);
        let b = dist(&[0.6, 0.1, 0.3]);
        let same = ensemble_step_dist(&[a.clone(), a.clone()]).unwrap();
        assert!(same.max_abs_diff(&a) < 1e-15);
        let ab = ensemble_step_dist(&[a.clone(), b.clone()]).unwrap();
        let ba = ensemble_step_dist(&[b, a]).unwrap();
        assert_eq!(ab, ba);
        assert!((ab.data().iter().map(|x| x.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vocab_mismatch_is_an_error() {
        assert!(matches!(
            ensemble_step_dist(&[dist(&[0.5, 0.5]), dist(&[0.2, 0.3, 0.5])]),
            Err(DecodeError::VocabMismatch { .. })
        ));
        assert!(matches!(ensemble_step_dist(&[]), Err(DecodeError::NoModels)));
    }

    #[test]
    fn session_matches_single_sentence_api() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = ModelParams::init(ModelConfig::uniform(7, 6, 5), &InitConfig { scale: 0.4, ..Default::default() }, &mut rng)
            .unwrap();
        let src = vec![vec![3], vec![4], vec![0]];
        let tgt = [2, 5, 0];
        let mut s = DecoderSession::new(&p, &[&src]).unwrap();
        let mut prev = None;
        let reference = p.forward_logprobs(&src, &tgt, None).unwrap();
        for (j, &y) in tgt.iter().enumerate() {
            let out = s.step(&[prev]).unwrap();
            assert!((out.logprobs.data()[y] - reference[j]).abs() < 1e-12);
            prev = Some(y);
        }
    }

    #[test]
    fn reorder_duplicates_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = ModelParams::init(ModelConfig::uniform(7, 6, 5), &InitConfig { scale: 0.4, ..Default::default() }, &mut rng)
            .unwrap();
        let src = vec![vec![3], vec![0]];
        let mut s = DecoderSession::new(&p, &[&src]).unwrap();
        s.step(&[None]).unwrap();
        s.reorder(&[0, 0, 0]).unwrap();
        let out = s.step(&[Some(2), Some(3), Some(2)]).unwrap();
        assert_eq!(out.logprobs.row(0), out.logprobs.row(2));
        assert_ne!(out.logprobs.row(0), out.logprobs.row(1));
    }
}
