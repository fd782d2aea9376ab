use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Vocabulary size and embedding width of one source factor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorConfig {
    pub vocab_size: usize,
    pub dim: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tying {
    #[default]
    None,
    /// The output projection is the transposed target embedding table.
    Target,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub source_factors: Vec<FactorConfig>,
    /// Must equal the sum of the factor widths.
    pub source_embedding_dim: usize,
    pub target_vocab_size: usize,
    pub target_embedding_dim: usize,
    pub encoder_dim: usize,
    pub decoder_dim: usize,
    pub attention_dim: usize,
    /// Width of the deep-output hidden layer.
    pub output_dim: usize,
    #[serde(default)]
    pub tying: Tying,
}

impl ModelConfig {
    /// Single-factor config where every hidden width is `dim`.
    pub fn uniform(source_vocab: usize, target_vocab: usize, dim: usize) -> Self {
        Self {
            source_factors: vec![FactorConfig {
                vocab_size: source_vocab,
                dim,
            }],
            source_embedding_dim: dim,
            target_vocab_size: target_vocab,
            target_embedding_dim: dim,
            encoder_dim: dim,
            decoder_dim: dim,
            attention_dim: dim,
            output_dim: dim,
            tying: Tying::None,
        }
    }

    pub fn factor_count(&self) -> usize {
        self.source_factors.len()
    }

    pub fn annotation_dim(&self) -> usize {
        2 * self.encoder_dim
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |field: &'static str, reason: String| Err(ModelError::Config { field, reason });
        if self.source_factors.is_empty() {
            return bad("source_factors", "at least one factor is required".into());
        }
        for (f, fc) in self.source_factors.iter().enumerate() {
            if fc.vocab_size < 2 || fc.dim == 0 {
                return bad(
                    "source_factors",
                    format!("factor {f}: vocabulary must hold EOS and UNK and width must be positive"),
                );
            }
        }
        let total: usize = self.source_factors.iter().map(|f| f.dim).sum();
        if total != self.source_embedding_dim {
            return bad(
                "source_embedding_dim",
                format!("factor widths sum to {total}, configured {}", self.source_embedding_dim),
            );
        }
        if self.target_vocab_size < 2 {
            return bad("target_vocab_size", "must hold EOS and UNK".into());
        }
        for (field, v) in [
            ("target_embedding_dim", self.target_embedding_dim),
            ("encoder_dim", self.encoder_dim),
            ("decoder_dim", self.decoder_dim),
            ("attention_dim", self.attention_dim),
            ("output_dim", self.output_dim),
        ] {
            if v == 0 {
                return bad(field, "must be positive".into());
            }
        }
        if self.tying == Tying::Target && self.output_dim != self.target_embedding_dim {
            return bad(
                "output_dim",
                format!(
                    "target tying needs output_dim == target_embedding_dim ({} != {})",
                    self.output_dim, self.target_embedding_dim
                ),
            );
        }
        Ok(())
    }

    /// Shape of every parameter tensor, keyed by canonical name.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut s = BTreeMap::new();
        for (f, fc) in self.source_factors.iter().enumerate() {
            s.insert(format!("src_emb.{f}"), vec![fc.vocab_size, fc.dim]);
        }
        s.insert("tgt_emb".into(), vec![self.target_vocab_size, self.target_embedding_dim]);

        let mut gru = |prefix: &str, input: usize, hidden: usize| {
            for w in ["W", "W_r", "W_z"] {
                s.insert(format!("{prefix}.{w}"), vec![input, hidden]);
            }
            for u in ["U", "U_r", "U_z"] {
                s.insert(format!("{prefix}.{u}"), vec![hidden, hidden]);
            }
            for b in ["b", "b_r", "b_z"] {
                s.insert(format!("{prefix}.{b}"), vec![hidden]);
            }
        };
        let ann = self.annotation_dim();
        gru("enc_fwd", self.source_embedding_dim, self.encoder_dim);
        gru("enc_bwd", self.source_embedding_dim, self.encoder_dim);
        gru("dec1", self.target_embedding_dim, self.decoder_dim);
        gru("dec2", ann, self.decoder_dim);

        s.insert("init.W".into(), vec![ann, self.decoder_dim]);
        s.insert("init.b".into(), vec![self.decoder_dim]);
        s.insert("att.W_a".into(), vec![ann, self.attention_dim]);
        s.insert("att.U_a".into(), vec![self.decoder_dim, self.attention_dim]);
        s.insert("att.b_a".into(), vec![self.attention_dim]);
        s.insert("att.v_a".into(), vec![self.attention_dim, 1]);
        s.insert("out.W_t1".into(), vec![self.decoder_dim, self.output_dim]);
        s.insert("out.W_t2".into(), vec![self.target_embedding_dim, self.output_dim]);
        s.insert("out.W_t3".into(), vec![ann, self.output_dim]);
        s.insert("out.b_t".into(), vec![self.output_dim]);
        if self.tying == Tying::None {
            s.insert("out.W_o".into(), vec![self.output_dim, self.target_vocab_size]);
        }
        s.insert("out.b_o".into(), vec![self.target_vocab_size]);
        s
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .values()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }
}
