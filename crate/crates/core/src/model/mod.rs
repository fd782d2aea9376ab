//! The encoder-decoder network.
//!
//! A bidirectional GRU encoder produces one annotation per source position.
//! The decoder starts from the tanh-projected mean annotation and advances
//! with a conditional GRU: a first GRU transition consumes the previous
//! target symbol, attention reads the annotations from that intermediate
//! state, and a second GRU transition consumes the context vector. The
//! deep output layer then reads the *updated* state.
//!
//! Graph builders live in [`layers`]; the methods on [`ModelParams`] below
//! wrap them for single sentences and return plain tensors.

mod batch;
mod config;
pub mod layers;
mod params;

pub use batch::{FactoredSentence, SourceBatch, TargetBatch};
pub use config::{FactorConfig, ModelConfig, Tying};
pub use layers::{BoundModel, DropoutMasks, DropoutVars};
pub use params::{InitConfig, ModelParams};

use thiserror::Error;

use crate::numerics::{Graph, NumericsError, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("empty {0} sequence")]
    EmptySequence(&'static str),
    #[error("empty batch")]
    EmptyBatch,
    #[error("position {position}: expected {expected} factors, got {got}")]
    FactorArity {
        position: usize,
        expected: usize,
        got: usize,
    },
    #[error("{side} factor {factor}: id {id} outside vocabulary of size {vocab_size}")]
    TokenOutOfRange {
        side: &'static str,
        factor: usize,
        id: usize,
        vocab_size: usize,
    },
    #[error("source batch has {sources} rows, target batch {targets}")]
    BatchRows { sources: usize, targets: usize },
    #[error("missing parameter tensor {0:?}")]
    MissingTensor(String),
    #[error("unknown parameter tensor {0:?}")]
    UnknownTensor(String),
    #[error("tensor {name:?} has shape {got:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Source annotations `C`, one row `[fwd_i ; bwd_i]` per position.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationSet {
    pub c: Tensor,
}

impl AnnotationSet {
    pub fn len(&self) -> usize {
        self.c.dims2().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.c.row(i)
    }
}

/// Decoder hidden state `s_j` (a `1 x d_dec` row) and its step index.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub s: Tensor,
    pub step: usize,
}

/// Output of one conditional-GRU step.
#[derive(Clone, Debug, PartialEq)]
pub struct CgruOutput {
    pub state: DecoderState,
    pub context: Tensor,
    pub alpha: Tensor,
}

fn row(t: &Tensor) -> Result<Tensor, ModelError> {
    let n = t.len();
    Ok(t.clone().reshape(vec![1, n])?)
}

impl AnnotationSet {
    fn bind(&self, g: &mut Graph, m: &BoundModel) -> Result<layers::Encoded, ModelError> {
        let (t, width) = self.c.dims2();
        let mut annotations = Vec::with_capacity(t);
        let mut projected = Vec::with_capacity(t);
        for i in 0..t {
            let h = g.constant(Tensor::matrix(1, width, self.c.row(i).to_vec())?);
            projected.push(g.matmul(h, m.vars.att_w)?);
            annotations.push(h);
        }
        Ok(layers::Encoded {
            annotations,
            projected,
            mask: vec![vec![1.0]; t],
            lengths: vec![t],
        })
    }
}

fn stack_rows(g: &Graph, vars: &[crate::Var]) -> Result<Tensor, ModelError> {
    let width = g.value(vars[0]).len();
    let data = vars.iter().flat_map(|&v| g.value(v).data().to_vec()).collect();
    Ok(Tensor::matrix(vars.len(), width, data)?)
}

impl ModelParams {
    fn bound(&self) -> Result<(Graph, BoundModel), ModelError> {
        let mut g = Graph::new();
        let m = BoundModel::bind(&mut g, self)?;
        Ok((g, m))
    }

    /// Factored source embedding, `T x sum(m_f)`.
    pub fn embed_source(&self, source: &[Vec<usize>]) -> Result<Tensor, ModelError> {
        let (mut g, m) = self.bound()?;
        let batch = SourceBatch::new(&[source], self.config())?;
        let rows = layers::embed_source(&mut g, &m, &batch)?;
        stack_rows(&g, &rows)
    }

    /// Bidirectional encoding of a `T x sum(m_f)` embedding matrix.
    pub fn encode(&self, embeddings: &Tensor) -> Result<AnnotationSet, ModelError> {
        let (mut g, m) = self.bound()?;
        let (t, width) = embeddings.dims2();
        if t == 0 || embeddings.rank() != 2 {
            return Err(ModelError::EmptySequence("source"));
        }
        let inputs = (0..t)
            .map(|i| Ok(g.constant(Tensor::matrix(1, width, embeddings.row(i).to_vec())?)))
            .collect::<Result<Vec<_>, ModelError>>()?;
        let enc = layers::encode(&mut g, &m, &inputs, &vec![vec![1.0]; t], &DropoutVars::default())?;
        Ok(AnnotationSet {
            c: stack_rows(&g, &enc.annotations)?,
        })
    }

    pub fn encode_source(&self, source: &[Vec<usize>]) -> Result<AnnotationSet, ModelError> {
        self.encode(&self.embed_source(source)?)
    }

    /// `s_0 = tanh(W_init mean(h) + b)`.
    pub fn init_decoder(&self, c: &AnnotationSet) -> Result<DecoderState, ModelError> {
        let (mut g, m) = self.bound()?;
        let enc = c.bind(&mut g, &m)?;
        let s = layers::init_decoder(&mut g, &m, &enc)?;
        Ok(DecoderState {
            s: g.value(s).clone(),
            step: 0,
        })
    }

    /// Intermediate state `s'_j`; `y_prev = None` is the start symbol.
    pub fn gru1_step(&self, y_prev: Option<usize>, prev: &DecoderState) -> Result<Tensor, ModelError> {
        let (mut g, m) = self.bound()?;
        let s = g.constant(row(&prev.s)?);
        let emb = layers::embed_target(&mut g, &m, &[y_prev], &DropoutVars::default())?;
        let out = layers::gru1_step(&mut g, &m, emb, s, &DropoutVars::default())?;
        Ok(g.value(out).clone())
    }

    /// Context vector and alignment weights for intermediate state `s'`.
    pub fn attention(&self, c: &AnnotationSet, s_prime: &Tensor) -> Result<(Tensor, Tensor), ModelError> {
        let (mut g, m) = self.bound()?;
        let enc = c.bind(&mut g, &m)?;
        let sp = g.constant(row(s_prime)?);
        let (ctx, alpha) = layers::attention(&mut g, &m, &enc, sp)?;
        Ok((g.value(ctx).clone(), g.value(alpha).clone()))
    }

    pub fn gru2_step(&self, s_prime: &Tensor, context: &Tensor, step: usize) -> Result<DecoderState, ModelError> {
        let (mut g, m) = self.bound()?;
        let sp = g.constant(row(s_prime)?);
        let c = g.constant(row(context)?);
        let s = layers::gru2_step(&mut g, &m, sp, c, &DropoutVars::default())?;
        Ok(DecoderState {
            s: g.value(s).clone(),
            step: step + 1,
        })
    }

    /// `GRU_2(GRU_1(y_prev, s_prev), ATT(C, GRU_1(y_prev, s_prev)))`.
    pub fn cgru_step(
        &self,
        y_prev: Option<usize>,
        prev: &DecoderState,
        c: &AnnotationSet,
    ) -> Result<CgruOutput, ModelError> {
        let (mut g, m) = self.bound()?;
        let enc = c.bind(&mut g, &m)?;
        let s = g.constant(row(&prev.s)?);
        let step = layers::cgru_step(&mut g, &m, &enc, &[y_prev], s, &DropoutVars::default())?;
        Ok(CgruOutput {
            state: DecoderState {
                s: g.value(step.state).clone(),
                step: prev.step + 1,
            },
            context: g.value(step.context).clone(),
            alpha: g.value(step.alpha).clone(),
        })
    }

    /// Log-probabilities over the target vocabulary from the updated state.
    pub fn deep_output(
        &self,
        state: &DecoderState,
        y_prev: Option<usize>,
        context: &Tensor,
    ) -> Result<Tensor, ModelError> {
        let (mut g, m) = self.bound()?;
        let drop = DropoutVars::default();
        let s = g.constant(row(&state.s)?);
        let c = g.constant(row(context)?);
        let e = layers::embed_target(&mut g, &m, &[y_prev], &drop)?;
        let lp = layers::deep_output(&mut g, &m, s, e, c, &drop)?;
        Ok(g.value(lp).clone())
    }

    /// Teacher-forced log-probability of every target token (the target
    /// must include its EOS).
    pub fn forward_logprobs(
        &self,
        source: &[Vec<usize>],
        target: &[usize],
        dropout: Option<&DropoutMasks>,
    ) -> Result<Vec<f64>, ModelError> {
        let (mut g, m) = self.bound()?;
        let src = SourceBatch::new(&[source], self.config())?;
        let tgt = TargetBatch::new(&[target], self.config())?;
        let drop = dropout.map(|d| DropoutVars::bind(&mut g, d)).unwrap_or_default();
        let out = layers::forward_logprobs(&mut g, &m, &src, &tgt, &drop)?;
        Ok(out.token_logprobs.iter().map(|&v| g.value(v).item()).collect())
    }
}
