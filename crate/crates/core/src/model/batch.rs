use super::{ModelConfig, ModelError};
use crate::EOS;

/// A source sentence: one tuple of factor ids per position.
pub type FactoredSentence = Vec<Vec<usize>>;

/// Source sentences padded to a common length.
///
/// Padding positions carry EOS in every factor and mask weight 0.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceBatch {
    /// `[position][row][factor]`
    pub ids: Vec<Vec<Vec<usize>>>,
    /// `[position][row]`, 1 for real tokens.
    pub mask: Vec<Vec<f64>>,
    pub lengths: Vec<usize>,
}

/// Target sentences padded with EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetBatch {
    /// `[position][row]`
    pub ids: Vec<Vec<usize>>,
    pub mask: Vec<Vec<f64>>,
    pub lengths: Vec<usize>,
}

fn pad_mask(lengths: &[usize], max: usize) -> Vec<Vec<f64>> {
    (0..max)
        .map(|pos| lengths.iter().map(|&l| if pos < l { 1.0 } else { 0.0 }).collect())
        .collect()
}

impl SourceBatch {
    pub fn new<S: AsRef<[Vec<usize>]>>(sentences: &[S], config: &ModelConfig) -> Result<Self, ModelError> {
        if sentences.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let factors = config.factor_count();
        let lengths: Vec<usize> = sentences.iter().map(|s| s.as_ref().len()).collect();
        if lengths.contains(&0) {
            return Err(ModelError::EmptySequence("source"));
        }
        for s in sentences {
            for (position, tuple) in s.as_ref().iter().enumerate() {
                if tuple.len() != factors {
                    return Err(ModelError::FactorArity {
                        position,
                        expected: factors,
                        got: tuple.len(),
                    });
                }
                for (factor, (&id, fc)) in tuple.iter().zip(&config.source_factors).enumerate() {
                    if id >= fc.vocab_size {
                        return Err(ModelError::TokenOutOfRange {
                            side: "source",
                            factor,
                            id,
                            vocab_size: fc.vocab_size,
                        });
                    }
                }
            }
        }
        let max = *lengths.iter().max().unwrap();
        let ids = (0..max)
            .map(|pos| {
                sentences
                    .iter()
                    .map(|s| s.as_ref().get(pos).cloned().unwrap_or_else(|| vec![EOS; factors]))
                    .collect()
            })
            .collect();
        Ok(Self {
            ids,
            mask: pad_mask(&lengths, max),
            lengths,
        })
    }

    pub fn rows(&self) -> usize {
        self.lengths.len()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Factor `f` ids of every row at `position`.
    pub fn factor_ids(&self, position: usize, factor: usize) -> Vec<Option<usize>> {
        self.ids[position].iter().map(|t| Some(t[factor])).collect()
    }
}

impl TargetBatch {
    pub fn new<S: AsRef<[usize]>>(sentences: &[S], config: &ModelConfig) -> Result<Self, ModelError> {
        if sentences.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let lengths: Vec<usize> = sentences.iter().map(|s| s.as_ref().len()).collect();
        if lengths.contains(&0) {
            return Err(ModelError::EmptySequence("target"));
        }
        for s in sentences {
            if let Some(&id) = s.as_ref().iter().find(|&&id| id >= config.target_vocab_size) {
                return Err(ModelError::TokenOutOfRange {
                    side: "target",
                    factor: 0,
                    id,
                    vocab_size: config.target_vocab_size,
                });
            }
        }
        let max = *lengths.iter().max().unwrap();
        let ids = (0..max)
            .map(|pos| sentences.iter().map(|s| s.as_ref().get(pos).copied().unwrap_or(EOS)).collect())
            .collect();
        Ok(Self {
            ids,
            mask: pad_mask(&lengths, max),
            lengths,
        })
    }

    pub fn rows(&self) -> usize {
        self.lengths.len()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Previous-symbol ids feeding step `position`; `None` is the
    /// zero-vector start symbol.
    pub fn previous(&self, position: usize) -> Vec<Option<usize>> {
        match position {
            0 => vec![None; self.rows()],
            p => self.ids[p - 1].iter().map(|&id| Some(id)).collect(),
        }
    }

    pub fn token_count(&self) -> usize {
        self.lengths.iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padding_and_masks() {
        let cfg = ModelConfig::uniform(10, 10, 2);
        let b = TargetBatch::new(&[vec![3, 4, 0], vec![5, 0]], &cfg).unwrap();
        assert_eq!(b.ids, vec![vec![3, 5], vec![4, 0], vec![0, 0]]);
        assert_eq!(b.mask[2], vec![1.0, 0.0]);
        assert_eq!(b.previous(0), vec![None, None]);
        assert_eq!(b.previous(2), vec![Some(4), Some(0)]);
        assert_eq!(b.token_count(), 5);
    }

    #[test]
    fn rejects_empty_and_out_of_range() {
        let cfg = ModelConfig::uniform(10, 10, 2);
        let empty: Vec<Vec<usize>> = vec![vec![]];
        assert!(matches!(
            TargetBatch::new(&empty, &cfg),
            Err(ModelError::EmptySequence("target"))
        ));
        assert!(matches!(
            SourceBatch::new(&[vec![vec![10]]], &cfg),
            Err(ModelError::TokenOutOfRange { side: "source", .. })
        ));
        assert!(matches!(
            SourceBatch::new(&[vec![vec![1, 2]]], &cfg),
            Err(ModelError::FactorArity { expected: 1, got: 2, .. })
        ));
    }
}
