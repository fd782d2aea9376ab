//! Plain-text corpora: one sentence per line, space-separated tokens,
//! `|`-separated factors (`surface|f2|...|fk`).

use std::io::{BufRead, Write};

use super::{IoError, Vocab};
use crate::model::FactoredSentence;
use crate::EOS;

pub const FACTOR_SEPARATOR: char = '|';

/// Reads all lines of a corpus file.
pub fn read_lines(r: impl BufRead) -> Result<Vec<String>, IoError> {
    Ok(r.lines().collect::<Result<_, _>>()?)
}

/// Splits every token of every line into exactly `factor_count` fields.
pub fn split_factors(lines: &[String], factor_count: usize) -> Result<Vec<Vec<Vec<&str>>>, IoError> {
    lines
        .iter()
        .enumerate()
        .map(|(ln, line)| {
            line.split_whitespace()
                .enumerate()
                .map(|(col, tok)| {
                    let fields: Vec<&str> = tok.split(FACTOR_SEPARATOR).collect();
                    if fields.len() != factor_count {
                        return Err(IoError::FactorArity {
                            line: ln + 1,
                            column: col + 1,
                            expected: factor_count,
                            got: fields.len(),
                        });
                    }
                    Ok(fields)
                })
                .collect()
        })
        .collect()
}

/// One vocabulary per factor built from a factored corpus.
pub fn build_factor_vocabs(lines: &[String], factor_count: usize, max_sizes: &[usize]) -> Result<Vec<Vocab>, IoError> {
    let split = split_factors(lines, factor_count)?;
    Ok((0..factor_count)
        .map(|f| {
            let max = max_sizes.get(f).or(max_sizes.last()).copied().unwrap_or(usize::MAX);
            Vocab::build(split.iter().map(|s| s.iter().map(move |t| t[f])), max)
        })
        .collect())
}

/// Factor ids per position with an EOS tuple appended; unknown tokens map
/// to UNK.
pub fn read_factored_corpus(lines: &[String], vocabs: &[Vocab]) -> Result<Vec<FactoredSentence>, IoError> {
    let split = split_factors(lines, vocabs.len())?;
    Ok(split
        .into_iter()
        .map(|sentence| {
            let mut ids: FactoredSentence = sentence
                .iter()
                .map(|fields| fields.iter().zip(vocabs).map(|(t, v)| v.id(t)).collect())
                .collect();
            ids.push(vec![EOS; vocabs.len()]);
            ids
        })
        .collect())
}

/// Single-factor reader (targets) with EOS appended.
pub fn read_corpus(lines: &[String], vocab: &Vocab) -> Result<Vec<Vec<usize>>, IoError> {
    Ok(read_factored_corpus(lines, std::slice::from_ref(vocab))?
        .into_iter()
        .map(|s| s.into_iter().map(|t| t[0]).collect())
        .collect())
}

/// Inverse of [`read_factored_corpus`] at the id level: the trailing EOS is
/// dropped and ids are written as their tokens.
pub fn write_factored_corpus(mut w: impl Write, sentences: &[FactoredSentence], vocabs: &[Vocab]) -> Result<(), IoError> {
    for s in sentences {
        let body = match s.last() {
            Some(t) if t.iter().all(|&id| id == EOS) => &s[..s.len() - 1],
            _ => &s[..],
        };
        let line: Vec<String> = body
            .iter()
            .map(|tuple| {
                tuple
                    .iter()
                    .zip(vocabs)
                    .map(|(&id, v)| v.token(id))
                    .collect::<Vec<_>>()
                    .join("|")
            })
            .collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::UNK;

    fn lines(s: &str) -> Vec<String> {
        s.lines().map(str::to_string).collect()
    }

    #[test]
    fn single_factor_appends_eos() {
        let l = lines("hello world");
        let v = Vocab::build(l.iter().map(|s| s.split_whitespace()), 10);
        let c = read_factored_corpus(&l, &[v]).unwrap();
        assert_eq!(c[0].len(), 3);
        assert_eq!(c[0][2], vec![EOS]);
    }

    #[test]
    fn two_factors_use_two_vocabs() {
        let l = lines("dog|NN barks|VBZ");
        let vocabs = build_factor_vocabs(&l, 2, &[10]).unwrap();
        let c = read_factored_corpus(&l, &vocabs).unwrap();
        assert_eq!(c[0][0], vec![vocabs[0].id("dog"), vocabs[1].id("NN")]);
        assert_ne!(c[0][0][0], UNK);
        assert_ne!(c[0][0][1], UNK);
    }

    #[test]
    fn arity_error_reports_position() {
        let l = lines("a|X b|Y\ndog cat|Z");
        let vocabs = vec![Vocab::default(), Vocab::default()];
        match read_factored_corpus(&l, &vocabs) {
            Err(IoError::FactorArity { line, column, expected, got }) => {
                assert_eq!((line, column, expected, got), (2, 1, 2, 1));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_tokens_become_unk() {
        let v = Vocab::build([["a"]], 10);
        assert_eq!(read_corpus(&lines("a zzz"), &v).unwrap()[0], vec![2, UNK, EOS]);
    }
}
