//! Inference: beam search, greedy decoding, ensembles, corpus scoring and
//! n-best rescoring.
//!
//! Ensembles combine member distributions at every step by a renormalised
//! geometric mean; each member keeps its own decoder state, so members may
//! differ in every dimension except the target vocabulary.

mod beam;
mod score;
mod session;

pub use beam::{beam_search, BeamConfig, BeamOutput, GraphNode, Hypothesis, SearchGraph};
pub use score::{
    format_nbest_line, pair_lines, parse_nbest_line, rescore_nbest, score_corpus, NbestEntry, SentenceScore,
};
pub use session::{check_ensemble, ensemble_step_dist, DecoderSession, EnsembleSession, StepOutput};

use rayon::prelude::*;
use thiserror::Error;

use crate::model::{ModelError, ModelParams};
use crate::numerics::NumericsError;
use crate::EOS;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("at least one model is required")]
    NoModels,
    #[error("ensemble members disagree on the target vocabulary ({expected} vs {got})")]
    VocabMismatch { expected: usize, got: usize },
    #[error("beam size must be at least 1")]
    BeamSize,
    #[error("maximum length must be at least 1")]
    MaxLen,
    #[error("line {line}: {side} file has no matching line")]
    LineCount { line: usize, side: &'static str },
    #[error("n-best line {line}: {reason}")]
    Nbest { line: usize, reason: String },
    #[error("could not build the decoding thread pool: {0}")]
    ThreadPool(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Argmax decoding of a batch of sources; outputs exclude EOS. A row that
/// has not emitted EOS after `max_len` steps is cut off there.
pub fn greedy_decode<S: AsRef<[Vec<usize>]>>(
    models: &[ModelParams],
    sources: &[S],
    max_len: usize,
) -> Result<Vec<Vec<usize>>, DecodeError> {
    if max_len == 0 {
        return Err(DecodeError::MaxLen);
    }
    if sources.is_empty() {
        return Ok(Vec::new());
    }
    let mut session = EnsembleSession::new(models, sources)?;
    let n = sources.len();
    let mut out = vec![Vec::new(); n];
    let mut done = vec![false; n];
    let mut y_prev: Vec<Option<usize>> = vec![None; n];
    for _ in 0..max_len {
        let step = session.step(&y_prev)?;
        for r in 0..n {
            if done[r] {
                continue;
            }
            let row = step.logprobs.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            if best == EOS {
                done[r] = true;
            } else {
                out[r].push(best);
            }
            y_prev[r] = Some(best);
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    Ok(out)
}

/// Beam-decodes every source on a pool of `threads` workers (0 means the
/// rayon default). Results keep input order.
pub fn translate_corpus<S: AsRef<[Vec<usize>]> + Sync>(
    models: &[ModelParams],
    sources: &[S],
    config: &BeamConfig,
    threads: usize,
) -> Result<Vec<BeamOutput>, DecodeError> {
    config.validate()?;
    check_ensemble(models)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| DecodeError::ThreadPool(e.to_string()))?;
    pool.install(|| {
        sources
            .par_iter()
            .map(|s| beam_search(models, s.as_ref(), config))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{InitConfig, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = InitConfig {
            scale: 0.8,
            ..Default::default()
        };
        ModelParams::init(ModelConfig::uniform(8, 7, 5), &init, &mut rng).unwrap()
    }

    fn sources() -> Vec<Vec<Vec<usize>>> {
        vec![
            vec![vec![2], vec![3], vec![4], vec![0]],
            vec![vec![5], vec![0]],
            vec![vec![7], vec![6], vec![0]],
        ]
    }

    #[test]
    fn beam_of_one_is_greedy() {
        for seed in 0..5 {
            let models = [model(seed)];
            let cfg = BeamConfig {
                beam_size: 1,
                max_len: 12,
                length_norm: 1.0,
            };
            let batched = greedy_decode(&models, &sources(), 12).unwrap();
            for (s, expected) in sources().iter().zip(&batched) {
                let single = greedy_decode(&models, &[s], 12).unwrap();
                assert_eq!(&single[0], expected);
                let beam = beam_search(&models, s, &cfg).unwrap();
                assert_eq!(beam.best().output(), expected.as_slice());
            }
        }
    }

    #[test]
    fn threaded_translation_keeps_order() {
        let models = [model(11)];
        let cfg = BeamConfig {
            beam_size: 3,
            max_len: 10,
            length_norm: 1.0,
        };
        let pooled = translate_corpus(&models, &sources(), &cfg, 2).unwrap();
        for (s, out) in sources().iter().zip(&pooled) {
            assert_eq!(&beam_search(&models, s, &cfg).unwrap(), out);
        }
    }

    #[test]
    fn identical_ensemble_members_decode_like_one() {
        let p = model(12);
        let cfg = BeamConfig {
            beam_size: 4,
            max_len: 10,
            length_norm: 1.0,
        };
        let single = translate_corpus(std::slice::from_ref(&p), &sources(), &cfg, 1).unwrap();
        for m in 2..=3 {
            let ens = vec![p.clone(); m];
            let out = translate_corpus(&ens, &sources(), &cfg, 1).unwrap();
            for (a, b) in single.iter().zip(&out) {
                assert_eq!(a.best().tokens, b.best().tokens);
            }
        }
    }
}
