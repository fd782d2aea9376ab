//! Graph builders for every block of the network.
//!
//! Row-vector convention throughout: a batch of `B` states is a `B x d`
//! matrix and affine maps are `x W + b`.

use super::{ModelConfig, ModelError, ModelParams, SourceBatch, TargetBatch, Tying};
use crate::numerics::{Graph, Tensor, Var};

/// Weights of one GRU transition.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w: Var,
    pub u: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub w_z: Var,
    pub u_z: Var,
    pub b: Var,
    pub b_r: Var,
    pub b_z: Var,
}

/// Parameter leaves of one model inside a graph.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub src_emb: Vec<Var>,
    pub tgt_emb: Var,
    pub enc_fwd: GruVars,
    pub enc_bwd: GruVars,
    pub init_w: Var,
    pub init_b: Var,
    pub dec1: GruVars,
    pub att_w: Var,
    pub att_u: Var,
    pub att_b: Var,
    pub att_v: Var,
    pub dec2: GruVars,
    pub w_t1: Var,
    pub w_t2: Var,
    pub w_t3: Var,
    pub b_t: Var,
    /// Output projection; a transpose of `tgt_emb` when tied.
    pub w_o: Var,
    pub b_o: Var,
}

/// A model whose parameters live in a particular graph.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub vars: ModelVars,
    pub config: ModelConfig,
}

impl BoundModel {
    /// Adds every tensor of `params` as a parameter leaf named by its
    /// canonical name.
    pub fn bind(g: &mut Graph, params: &ModelParams) -> Result<Self, ModelError> {
        let mut leaf = |name: &str| -> Result<Var, ModelError> {
            let t = params
                .get(name)
                .ok_or_else(|| ModelError::MissingTensor(name.into()))?;
            Ok(g.param(name, t.clone())?)
        };
        let mut gru = |prefix: &str| -> Result<GruVars, ModelError> {
            Ok(GruVars {
                w: leaf(&format!("{prefix}.W"))?,
                u: leaf(&format!("{prefix}.U"))?,
                w_r: leaf(&format!("{prefix}.W_r"))?,
                u_r: leaf(&format!("{prefix}.U_r"))?,
                w_z: leaf(&format!("{prefix}.W_z"))?,
                u_z: leaf(&format!("{prefix}.U_z"))?,
                b: leaf(&format!("{prefix}.b"))?,
                b_r: leaf(&format!("{prefix}.b_r"))?,
                b_z: leaf(&format!("{prefix}.b_z"))?,
            })
        };
        let enc_fwd = gru("enc_fwd")?;
        let enc_bwd = gru("enc_bwd")?;
        let dec1 = gru("dec1")?;
        let dec2 = gru("dec2")?;
        let config = params.config().clone();

        let mut leaf = |name: &str| -> Result<Var, ModelError> {
            let t = params
                .get(name)
                .ok_or_else(|| ModelError::MissingTensor(name.into()))?;
            Ok(g.param(name, t.clone())?)
        };
        let src_emb = (0..config.factor_count())
            .map(|f| leaf(&format!("src_emb.{f}")))
            .collect::<Result<Vec<_>, _>>()?;
        let tgt_emb = leaf("tgt_emb")?;
        let init_w = leaf("init.W")?;
        let init_b = leaf("init.b")?;
        let att_w = leaf("att.W_a")?;
        let att_u = leaf("att.U_a")?;
        let att_b = leaf("att.b_a")?;
        let att_v = leaf("att.v_a")?;
        let w_t1 = leaf("out.W_t1")?;
        let w_t2 = leaf("out.W_t2")?;
        let w_t3 = leaf("out.W_t3")?;
        let b_t = leaf("out.b_t")?;
        let b_o = leaf("out.b_o")?;
        let w_o = match config.tying {
            Tying::None => leaf("out.W_o")?,
            Tying::Target => g.transpose(tgt_emb)?,
        };
        Ok(Self {
            vars: ModelVars {
                src_emb,
                tgt_emb,
                enc_fwd,
                enc_bwd,
                init_w,
                init_b,
                dec1,
                att_w,
                att_u,
                att_b,
                att_v,
                dec2,
                w_t1,
                w_t2,
                w_t3,
                b_t,
                w_o,
                b_o,
            },
            config,
        })
    }
}

/// Per-sequence dropout masks, each `rows x width` and reused at every
/// time step. `None` disables a site.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DropoutMasks {
    pub source_embedding: Option<Tensor>,
    pub target_embedding: Option<Tensor>,
    pub encoder_forward: Option<Tensor>,
    pub encoder_backward: Option<Tensor>,
    pub decoder_state: Option<Tensor>,
    pub context: Option<Tensor>,
}

/// [`DropoutMasks`] bound as graph constants.
#[derive(Clone, Copy, Debug, Default)]
pub struct DropoutVars {
    pub source_embedding: Option<Var>,
    pub target_embedding: Option<Var>,
    pub encoder_forward: Option<Var>,
    pub encoder_backward: Option<Var>,
    pub decoder_state: Option<Var>,
    pub context: Option<Var>,
}

impl DropoutVars {
    pub fn bind(g: &mut Graph, masks: &DropoutMasks) -> Self {
        let mut c = |t: &Option<Tensor>| t.as_ref().map(|t| g.constant(t.clone()));
        Self {
            source_embedding: c(&masks.source_embedding),
            target_embedding: c(&masks.target_embedding),
            encoder_forward: c(&masks.encoder_forward),
            encoder_backward: c(&masks.encoder_backward),
            decoder_state: c(&masks.decoder_state),
            context: c(&masks.context),
        }
    }
}

fn apply_mask(g: &mut Graph, x: Var, mask: Option<Var>) -> Result<Var, ModelError> {
    Ok(match mask {
        Some(m) => g.mul(x, m)?,
        None => x,
    })
}

fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var, ModelError> {
    let xw = g.matmul(x, w)?;
    Ok(g.add_row(xw, b)?)
}

/// One GRU transition `h' = (1 - z) * cand + z * h`.
///
/// `h_in` is the state fed to the `U` products (the dropout-masked copy of
/// `h`); the interpolation itself uses the clean `h`.
pub fn gru_step(g: &mut Graph, w: &GruVars, x: Var, h: Var, h_in: Var) -> Result<Var, ModelError> {
    let xr = affine(g, x, w.w_r, w.b_r)?;
    let hr = g.matmul(h_in, w.u_r)?;
    let r = g.add(xr, hr)?;
    let r = g.sigmoid(r)?;

    let xz = affine(g, x, w.w_z, w.b_z)?;
    let hz = g.matmul(h_in, w.u_z)?;
    let z = g.add(xz, hz)?;
    let z = g.sigmoid(z)?;

    let xw = affine(g, x, w.w, w.b)?;
    let hu = g.matmul(h_in, w.u)?;
    let gated = g.mul(r, hu)?;
    let pre = g.add(xw, gated)?;
    let cand = g.tanh(pre)?;

    // (1 - z) * cand + z * h == cand + z * (h - cand)
    let diff = g.sub(h, cand)?;
    let keep = g.mul(z, diff)?;
    Ok(g.add(cand, keep)?)
}

/// Holds `prev` for rows whose mask is 0 (padding): `prev + m * (next - prev)`.
fn masked_update(g: &mut Graph, prev: Var, next: Var, mask: &[f64]) -> Result<Var, ModelError> {
    if mask.iter().all(|&m| m == 1.0) {
        return Ok(next);
    }
    let m = g.constant(Tensor::vector(mask.to_vec()));
    let delta = g.sub(next, prev)?;
    let delta = g.row_scale(delta, m)?;
    Ok(g.add(prev, delta)?)
}

/// Concatenated factor embeddings per position, each `rows x sum(m_f)`.
/// Lookups carry no bias.
pub fn embed_source(g: &mut Graph, m: &BoundModel, src: &SourceBatch) -> Result<Vec<Var>, ModelError> {
    (0..src.len())
        .map(|pos| {
            let parts = (0..m.config.factor_count())
                .map(|f| g.gather_rows(m.vars.src_emb[f], src.factor_ids(pos, f)))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(g.concat(&parts)?)
        })
        .collect()
}

/// Source annotations and their attention projections.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `h_i = [fwd_i ; bwd_i]`, one `rows x 2d` node per position.
    pub annotations: Vec<Var>,
    /// `h_i W_a`, one `rows x d_a` node per position.
    pub projected: Vec<Var>,
    /// `[position][row]` source mask.
    pub mask: Vec<Vec<f64>>,
    pub lengths: Vec<usize>,
}

impl Encoded {
    pub fn rows(&self) -> usize {
        self.lengths.len()
    }

    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }

    /// Mask laid out like the `rows x T` score matrix.
    fn score_mask(&self) -> Option<Vec<f64>> {
        if self.mask.iter().flatten().all(|&m| m == 1.0) {
            return None;
        }
        let mut out = Vec::with_capacity(self.rows() * self.len());
        for r in 0..self.rows() {
            out.extend(self.mask.iter().map(|col| col[r]));
        }
        Some(out)
    }

    /// Re-indexes rows, e.g. to give every beam hypothesis its own copy of
    /// its sentence's annotations.
    pub fn select_rows(&self, g: &mut Graph, rows: &[usize]) -> Result<Encoded, ModelError> {
        let ids: Vec<Option<usize>> = rows.iter().map(|&r| Some(r)).collect();
        let annotations = self
            .annotations
            .iter()
            .map(|&a| g.gather_rows(a, ids.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let projected = self
            .projected
            .iter()
            .map(|&a| g.gather_rows(a, ids.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Encoded {
            annotations,
            projected,
            mask: self.mask.iter().map(|col| rows.iter().map(|&r| col[r]).collect()).collect(),
            lengths: rows.iter().map(|&r| self.lengths[r]).collect(),
        })
    }
}

/// Bidirectional GRU encoder over already-embedded positions.
///
/// Both directions start from a zero state; padding positions leave the
/// state untouched so the backward pass effectively starts at each row's
/// last real token.
pub fn encode(
    g: &mut Graph,
    m: &BoundModel,
    embedded: &[Var],
    mask: &[Vec<f64>],
    drop: &DropoutVars,
) -> Result<Encoded, ModelError> {
    let steps = embedded.len();
    if steps == 0 {
        return Err(ModelError::EmptySequence("source"));
    }
    let rows = g.value(embedded[0]).dims2().0;
    let d = m.config.encoder_dim;
    let inputs = embedded
        .iter()
        .map(|&x| apply_mask(g, x, drop.source_embedding))
        .collect::<Result<Vec<_>, _>>()?;

    let zero = g.constant(Tensor::zeros(&[rows, d]));
    let mut fwd = Vec::with_capacity(steps);
    let mut h = zero;
    for (pos, &x) in inputs.iter().enumerate() {
        let h_in = apply_mask(g, h, drop.encoder_forward)?;
        let next = gru_step(g, &m.vars.enc_fwd, x, h, h_in)?;
        h = masked_update(g, h, next, &mask[pos])?;
        fwd.push(h);
    }
    let mut bwd = vec![zero; steps];
    let mut h = zero;
    for pos in (0..steps).rev() {
        let h_in = apply_mask(g, h, drop.encoder_backward)?;
        let next = gru_step(g, &m.vars.enc_bwd, inputs[pos], h, h_in)?;
        h = masked_update(g, h, next, &mask[pos])?;
        bwd[pos] = h;
    }

    let mut annotations = Vec::with_capacity(steps);
    let mut projected = Vec::with_capacity(steps);
    for (f, b) in fwd.into_iter().zip(bwd) {
        let a = g.concat(&[f, b])?;
        projected.push(g.matmul(a, m.vars.att_w)?);
        annotations.push(a);
    }
    let lengths = (0..rows)
        .map(|r| mask.iter().filter(|col| col[r] > 0.0).count())
        .collect();
    Ok(Encoded {
        annotations,
        projected,
        mask: mask.to_vec(),
        lengths,
    })
}

/// `s_0 = tanh(mean_i(h_i) W_init + b_init)`, the mean running over each
/// row's real positions.
pub fn init_decoder(g: &mut Graph, m: &BoundModel, enc: &Encoded) -> Result<Var, ModelError> {
    let mut total: Option<Var> = None;
    for (pos, &a) in enc.annotations.iter().enumerate() {
        let weights: Vec<f64> = enc
            .mask[pos]
            .iter()
            .zip(&enc.lengths)
            .map(|(&mk, &len)| mk / len as f64)
            .collect();
        let w = g.constant(Tensor::vector(weights));
        let term = g.row_scale(a, w)?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    let mean = total.ok_or(ModelError::EmptySequence("source"))?;
    let pre = affine(g, mean, m.vars.init_w, m.vars.init_b)?;
    Ok(g.tanh(pre)?)
}

/// Target embeddings of the previous symbols, dropout applied.
pub fn embed_target(
    g: &mut Graph,
    m: &BoundModel,
    y_prev: &[Option<usize>],
    drop: &DropoutVars,
) -> Result<Var, ModelError> {
    for &id in y_prev.iter().flatten() {
        if id >= m.config.target_vocab_size {
            return Err(ModelError::TokenOutOfRange {
                side: "target",
                factor: 0,
                id,
                vocab_size: m.config.target_vocab_size,
            });
        }
    }
    let e = g.gather_rows(m.vars.tgt_emb, y_prev.to_vec())?;
    apply_mask(g, e, drop.target_embedding)
}

/// First transition: `s' = GRU_1(E[y_{j-1}], s_{j-1})`.
pub fn gru1_step(g: &mut Graph, m: &BoundModel, emb: Var, s_prev: Var, drop: &DropoutVars) -> Result<Var, ModelError> {
    let s_in = apply_mask(g, s_prev, drop.decoder_state)?;
    gru_step(g, &m.vars.dec1, emb, s_prev, s_in)
}

/// `e_ij = v_a^T tanh(s'_j U_a + h_i W_a + b_a)`, `alpha = softmax_i(e)`,
/// `c_j = sum_i alpha_ij h_i`. Returns `(c_j, alpha)` with `alpha` of shape
/// `rows x T`.
pub fn attention(g: &mut Graph, m: &BoundModel, enc: &Encoded, s_prime: Var) -> Result<(Var, Var), ModelError> {
    let query = affine(g, s_prime, m.vars.att_u, m.vars.att_b)?;
    let mut scores = Vec::with_capacity(enc.len());
    for &p in &enc.projected {
        let pre = g.add(p, query)?;
        let act = g.tanh(pre)?;
        scores.push(g.matmul(act, m.vars.att_v)?);
    }
    let scores = g.concat(&scores)?;
    let alpha = match enc.score_mask() {
        Some(mask) => g.masked_softmax(scores, mask)?,
        None => g.softmax(scores)?,
    };
    let mut context: Option<Var> = None;
    for (i, &h) in enc.annotations.iter().enumerate() {
        let weight = g.slice(alpha, i, 1)?;
        let term = g.row_scale(h, weight)?;
        context = Some(match context {
            None => term,
            Some(c) => g.add(c, term)?,
        });
    }
    Ok((context.expect("non-empty source"), alpha))
}

/// Second transition: `s_j = GRU_2(c_j, s'_j)`; the context only enters
/// through the `W` matrices.
pub fn gru2_step(
    g: &mut Graph,
    m: &BoundModel,
    s_prime: Var,
    context: Var,
    drop: &DropoutVars,
) -> Result<Var, ModelError> {
    let c = apply_mask(g, context, drop.context)?;
    let s_in = apply_mask(g, s_prime, drop.decoder_state)?;
    gru_step(g, &m.vars.dec2, c, s_prime, s_in)
}

/// Nodes produced by one decoder step.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    /// Dropout-masked embedding of the previous symbol.
    pub embedding: Var,
    pub intermediate: Var,
    pub context: Var,
    pub alpha: Var,
    pub state: Var,
}

/// One conditional-GRU step: Look (attend from `s'`), then Update.
pub fn cgru_step(
    g: &mut Graph,
    m: &BoundModel,
    enc: &Encoded,
    y_prev: &[Option<usize>],
    s_prev: Var,
    drop: &DropoutVars,
) -> Result<StepVars, ModelError> {
    let embedding = embed_target(g, m, y_prev, drop)?;
    let intermediate = gru1_step(g, m, embedding, s_prev, drop)?;
    let (context, alpha) = attention(g, m, enc, intermediate)?;
    let state = gru2_step(g, m, intermediate, context, drop)?;
    Ok(StepVars {
        embedding,
        intermediate,
        context,
        alpha,
        state,
    })
}

/// Generate: `log softmax(tanh(s_j W_t1 + E[y_{j-1}] W_t2 + c_j W_t3 + b_t) W_o + b_o)`.
pub fn deep_output(
    g: &mut Graph,
    m: &BoundModel,
    state: Var,
    embedding: Var,
    context: Var,
    drop: &DropoutVars,
) -> Result<Var, ModelError> {
    let c = apply_mask(g, context, drop.context)?;
    let a = g.matmul(state, m.vars.w_t1)?;
    let b = g.matmul(embedding, m.vars.w_t2)?;
    let cc = g.matmul(c, m.vars.w_t3)?;
    let ab = g.add(a, b)?;
    let sum = g.add(ab, cc)?;
    let pre = g.add_row(sum, m.vars.b_t)?;
    let t = g.tanh(pre)?;
    let logits = affine(g, t, m.vars.w_o, m.vars.b_o)?;
    Ok(g.log_softmax(logits)?)
}

/// Teacher-forced pass over a batch of sentence pairs.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// Per target position, `rows x 1` gold log-probabilities (zero on
    /// padding).
    pub token_logprobs: Vec<Var>,
    /// `rows x 1` sentence log-probabilities.
    pub sentence_logprobs: Var,
    /// Scalar sum over all real target tokens.
    pub total: Var,
    pub tokens: usize,
    /// Per target position, `rows x T` attention weights.
    pub alphas: Vec<Var>,
}

pub fn forward_logprobs(
    g: &mut Graph,
    m: &BoundModel,
    src: &SourceBatch,
    tgt: &TargetBatch,
    drop: &DropoutVars,
) -> Result<ForwardVars, ModelError> {
    if src.rows() != tgt.rows() {
        return Err(ModelError::BatchRows {
            sources: src.rows(),
            targets: tgt.rows(),
        });
    }
    let embedded = embed_source(g, m, src)?;
    let enc = encode(g, m, &embedded, &src.mask, drop)?;
    let mut s = init_decoder(g, m, &enc)?;

    let mut token_logprobs = Vec::with_capacity(tgt.len());
    let mut alphas = Vec::with_capacity(tgt.len());
    let mut sentence: Option<Var> = None;
    for pos in 0..tgt.len() {
        let step = cgru_step(g, m, &enc, &tgt.previous(pos), s, drop)?;
        let logprobs = deep_output(g, m, step.state, step.embedding, step.context, drop)?;
        let picked = g.pick(logprobs, tgt.ids[pos].clone())?;
        let picked = if tgt.mask[pos].iter().all(|&v| v == 1.0) {
            picked
        } else {
            let mk = g.constant(Tensor::vector(tgt.mask[pos].clone()));
            g.row_scale(picked, mk)?
        };
        sentence = Some(match sentence {
            None => picked,
            Some(acc) => g.add(acc, picked)?,
        });
        token_logprobs.push(picked);
        alphas.push(step.alpha);
        s = masked_update(g, s, step.state, &tgt.mask[pos])?;
    }
    let sentence_logprobs = sentence.ok_or(ModelError::EmptySequence("target"))?;
    let total = g.sum(sentence_logprobs)?;
    Ok(ForwardVars {
        token_logprobs,
        sentence_logprobs,
        total,
        tokens: tgt.token_count(),
        alphas,
    })
}
