//! Vocabularies, factored corpora and model archives.

mod archive;
mod corpus;
mod vocab;

pub use archive::{
    decode_archive, encode_archive, load_model, save_model, ArchiveMetadata, Dtype, ARCHIVE_MAGIC, ARCHIVE_VERSION,
};
pub use corpus::{
    build_factor_vocabs, read_corpus, read_factored_corpus, read_lines, split_factors, write_factored_corpus,
    FACTOR_SEPARATOR,
};
pub use vocab::{Vocab, EOS_TOKEN, UNK_TOKEN};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("vocabulary line {line}: {reason}")]
    VocabFormat { line: usize, reason: String },
    #[error("line {line}, token {column}: expected {expected} factors, got {got}")]
    FactorArity {
        line: usize,
        column: usize,
        expected: usize,
        got: usize,
    },
    #[error("not a model archive (bad magic bytes)")]
    BadMagic,
    #[error("unsupported archive version {0}")]
    UnsupportedVersion(u32),
    #[error("archive truncated while reading {0}")]
    Truncated(&'static str),
    #[error("archive contains unknown tensor {0:?}")]
    UnknownTensor(String),
    #[error("archive tensor {name:?} has unknown dtype code {code}")]
    UnknownDtype { name: String, code: u8 },
    #[error("archive validation failed: {0}")]
    Validation(String),
    #[error("archive metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error("{0} unexpected bytes after the last tensor record")]
    TrailingBytes(usize),
    #[error("corpus {0:?} is empty")]
    EmptyCorpus(String),
}
