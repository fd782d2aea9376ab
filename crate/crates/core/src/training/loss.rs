use super::TrainError;
use crate::model::layers::{self, BoundModel, DropoutVars, ForwardVars};
use crate::model::{SourceBatch, TargetBatch};
use crate::numerics::{Graph, Var};

/// Token-level cross-entropy of a minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossEntropy {
    /// `-(sum of gold log-probabilities) / tokens`.
    pub token_mean: f64,
    /// Negative log-likelihood of each sentence.
    pub sentence_nll: Vec<f64>,
    pub tokens: usize,
}

/// Reduces per-sentence, per-position gold log-probabilities.
pub fn cross_entropy_loss(logprobs: &[Vec<f64>]) -> Result<CrossEntropy, TrainError> {
    let tokens: usize = logprobs.iter().map(Vec::len).sum();
    if tokens == 0 {
        return Err(TrainError::Empty("log-probability list"));
    }
    let sentence_nll: Vec<f64> = logprobs.iter().map(|s| -s.iter().sum::<f64>()).collect();
    Ok(CrossEntropy {
        token_mean: sentence_nll.iter().sum::<f64>() / tokens as f64,
        sentence_nll,
        tokens,
    })
}

/// Graph form of [`cross_entropy_loss`]: a scalar node holding the token
/// mean, plus the forward pass it was built from.
pub fn ce_objective(
    g: &mut Graph,
    m: &BoundModel,
    src: &SourceBatch,
    tgt: &TargetBatch,
    drop: &DropoutVars,
) -> Result<(Var, ForwardVars), TrainError> {
    let fwd = layers::forward_logprobs(g, m, src, tgt, drop)?;
    let loss = g.scale(fwd.total, -1.0 / fwd.tokens as f64)?;
    Ok((loss, fwd))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn certain_model_has_zero_loss() {
        let ce = cross_entropy_loss(&[vec![0.0, 0.0], vec![0.0]]).unwrap();
        assert_eq!(ce.token_mean, 0.0);
    }

    #[test]
    fn uniform_model_costs_ln_v() {
        let lp = -(10f64).ln();
        let ce = cross_entropy_loss(&[vec![lp; 4]]).unwrap();
        assert!((ce.token_mean - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn token_mean_over_sentences() {
        let ce = cross_entropy_loss(&[vec![-1.0, -2.0], vec![-3.0]]).unwrap();
        assert_eq!(ce.token_mean, 2.0);
        assert_eq!(ce.sentence_nll, vec![3.0, 3.0]);
        assert_eq!(ce.tokens, 3);
    }

    #[test]
    fn empty_is_an_error() {
        assert!(cross_entropy_loss(&[]).is_err());
        assert!(cross_entropy_loss(&[vec![]]).is_err());
    }
}
