//! Forced-decoding scores for parallel corpora and n-best lists.

use super::{check_ensemble, DecodeError};
use crate::io::Vocab;
use crate::model::{FactoredSentence, ModelParams};
use crate::EOS;

/// Log-probability of one target under a model or ensemble.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceScore {
    pub logprob: f64,
    /// Per target position, EOS included.
    pub token_logprobs: Vec<f64>,
}

/// Zips aligned source and target lines, naming the first line that lacks
/// a partner.
pub fn pair_lines<A: Clone, B: Clone>(sources: &[A], targets: &[B]) -> Result<Vec<(A, B)>, DecodeError> {
    if sources.len() != targets.len() {
        let line = sources.len().min(targets.len()) + 1;
        let side = if sources.len() < targets.len() { "source" } else { "target" };
        return Err(DecodeError::LineCount { line, side });
    }
    Ok(sources.iter().cloned().zip(targets.iter().cloned()).collect())
}

/// Teacher-forced scores; targets must end in EOS. For several models the
/// score is the mean of the members' log-probabilities (per token and in
/// total).
pub fn score_corpus(
    models: &[ModelParams],
    pairs: &[(FactoredSentence, Vec<usize>)],
) -> Result<Vec<SentenceScore>, DecodeError> {
    check_ensemble(models)?;
    let m = models.len() as f64;
    pairs
        .iter()
        .map(|(src, tgt)| {
            let mut tokens = vec![0.0; tgt.len()];
            let mut total = 0.0;
            for p in models {
                let lp = p.forward_logprobs(src, tgt, None)?;
                total += lp.iter().sum::<f64>();
                tokens.iter_mut().zip(&lp).for_each(|(t, l)| *t += l);
            }
            if models.len() > 1 {
                total /= m;
                tokens.iter_mut().for_each(|t| *t /= m);
            }
            Ok(SentenceScore {
                logprob: total,
                token_logprobs: tokens,
            })
        })
        .collect()
}

/// One `id ||| tokens ||| features` line.
#[derive(Clone, Debug, PartialEq)]
pub struct NbestEntry {
    pub sentence: usize,
    pub tokens: Vec<String>,
    pub features: Vec<f64>,
}

/// Parses an n-best line; `line` (1-based) is used in errors. Feature
/// labels of the form `name=` are skipped.
pub fn parse_nbest_line(text: &str, line: usize) -> Result<NbestEntry, DecodeError> {
    let bad = |reason: String| DecodeError::Nbest { line, reason };
    let fields: Vec<&str> = text.split("|||").map(str::trim).collect();
    if fields.len() < 3 {
        return Err(bad(format!("expected 3 `|||`-separated fields, found {}", fields.len())));
    }
    let sentence = fields[0]
        .parse()
        .map_err(|_| bad(format!("bad sentence id {:?}", fields[0])))?;
    let features = fields[2]
        .split_whitespace()
        .filter(|f| !f.ends_with('='))
        .map(|f| f.parse::<f64>().map_err(|_| bad(format!("bad feature value {f:?}"))))
        .collect::<Result<_, _>>()?;
    Ok(NbestEntry {
        sentence,
        tokens: fields[1].split_whitespace().map(str::to_string).collect(),
        features,
    })
}

pub fn format_nbest_line(e: &NbestEntry) -> String {
    let features: Vec<String> = e.features.iter().map(|f| f.to_string()).collect();
    format!("{} ||| {} ||| {}", e.sentence, e.tokens.join(" "), features.join(" "))
}

/// Appends one score per model (in model order) to every entry. With
/// `resort`, entries of each contiguous sentence block are reordered by
/// the sum of the appended scores, best first.
pub fn rescore_nbest(
    entries: &[NbestEntry],
    sources: &[FactoredSentence],
    target_vocab: &Vocab,
    models: &[ModelParams],
    resort: bool,
) -> Result<Vec<NbestEntry>, DecodeError> {
    check_ensemble(models)?;
    let mut out = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        let src = sources.get(e.sentence).ok_or_else(|| DecodeError::Nbest {
            line: i + 1,
            reason: format!("sentence id {} has no source line", e.sentence),
        })?;
        let mut tgt: Vec<usize> = e.tokens.iter().map(|t| target_vocab.id(t)).collect();
        tgt.push(EOS);
        let mut scored = e.clone();
        for p in models {
            scored.features.push(p.forward_logprobs(src, &tgt, None)?.iter().sum());
        }
        out.push(scored);
    }
    if resort {
        let added = models.len();
        let key = |e: &NbestEntry| e.features[e.features.len() - added..].iter().sum::<f64>();
        let mut start = 0;
        while start < out.len() {
            let id = out[start].sentence;
            let end = start + out[start..].iter().take_while(|e| e.sentence == id).count();
            out[start..end].sort_by(|a, b| key(b).total_cmp(&key(a)));
            start = end;
        }
    }
    Ok(out)
}
