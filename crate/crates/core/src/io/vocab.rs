use std::collections::HashMap;
use std::io::{BufRead, Write};

use super::IoError;
use crate::{EOS, UNK};

pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";

/// Token/id mapping with EOS at id 0 and UNK at id 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        let tokens = vec![EOS_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl Vocab {
    /// Keeps the `max_size - 2` most frequent tokens; ties break
    /// lexicographically.
    pub fn build<'a, I, S>(sentences: I, max_size: usize) -> Self
    where
        I: IntoIterator<Item = S>,
        S: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in sentences {
            for tok in s {
                if tok != EOS_TOKEN && tok != UNK_TOKEN {
                    *counts.entry(tok).or_insert(0) += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut v = Self::default();
        for (tok, _) in ranked.into_iter().take(max_size.saturating_sub(2)) {
            v.push(tok);
        }
        v
    }

    fn push(&mut self, tok: &str) {
        self.index.insert(tok.to_string(), self.tokens.len());
        self.tokens.push(tok.to_string());
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id of `token`, UNK when absent.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(UNK_TOKEN)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Maps ids back to tokens, stopping at the first EOS.
    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .map(|&id| self.token(id))
            .collect()
    }

    /// One `token<TAB>id` line per entry.
    pub fn write(&self, mut w: impl Write) -> Result<(), IoError> {
        for (id, tok) in self.tokens.iter().enumerate() {
            writeln!(w, "{tok}\t{id}")?;
        }
        Ok(())
    }

    pub fn read(r: impl BufRead) -> Result<Self, IoError> {
        let mut tokens = Vec::new();
        let mut index = HashMap::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            let bad = |reason: String| IoError::VocabFormat { line: n + 1, reason };
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| bad("expected `token<TAB>id`".into()))?;
            let id: usize = id.parse().map_err(|_| bad(format!("bad id {id:?}")))?;
            if id != tokens.len() {
                return Err(bad(format!("id {id} out of sequence, expected {}", tokens.len())));
            }
            if index.insert(tok.to_string(), id).is_some() {
                return Err(bad(format!("duplicate token {tok:?}")));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < 2 || tokens[EOS] != EOS_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(IoError::VocabFormat {
                line: 1,
                reason: format!("ids 0 and 1 must be {EOS_TOKEN} and {UNK_TOKEN}"),
            });
        }
        Ok(Self { tokens, index })
    }
}
