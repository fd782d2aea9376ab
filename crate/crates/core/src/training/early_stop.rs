use serde::{Deserialize, Serialize};

/// Patience-based early stopping on a validation loss (lower is better).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopPolicy {
    pub patience: usize,
    pub best: Option<f64>,
    pub evals_since_improvement: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOutcome {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopPolicy {
    pub fn new(patience: usize) -> Self {
        Self {
            patience: patience.max(1),
            best: None,
            evals_since_improvement: 0,
        }
    }

    pub fn observe(&mut self, loss: f64) -> EvalOutcome {
        let improved = self.best.is_none_or(|b| loss < b);
        if improved {
            self.best = Some(loss);
            self.evals_since_improvement = 0;
        } else {
            self.evals_since_improvement += 1;
        }
        EvalOutcome {
            improved,
            stop: self.should_stop(),
        }
    }

    pub fn should_stop(&self) -> bool {
        self.evals_since_improvement >= self.patience
    }
}
