use std::collections::{BTreeMap, BTreeSet};

use super::{words, DialogueSample};
use crate::error::{MorpheusError, Result};

/// Smoothed inverse document frequencies:
/// `idf(t) = ln((1 + D) / (1 + df(t))) + 1`.
///
/// A document is one sample's history plus its response.
#[derive(Debug, Clone, PartialEq)]
pub struct IdfTable {
    weights: BTreeMap<String, f64>,
    document_count: usize,
}

impl IdfTable {
    pub fn build(corpus: &[DialogueSample]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(MorpheusError::EmptyCorpus);
        }
        let docs = corpus.iter().map(|s| {
            let mut doc: Vec<String> = s.history.iter().flat_map(|t| words(&t.utterance)).collect();
            doc.extend(words(&s.response));
            doc
        });
        Ok(Self::from_documents(docs))
    }

    /// Builds from pre-tokenized documents.
    pub fn from_documents<I, D, S>(documents: I) -> Self
    where
        I: IntoIterator<Item = D>,
        D: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        let mut document_count = 0;
        for doc in documents {
            document_count += 1;
            let distinct: BTreeSet<String> = doc.into_iter().map(Into::into).collect();
            for tok in distinct {
                *df.entry(tok).or_default() += 1;
            }
        }
        let weights = df
            .into_iter()
            .map(|(tok, n)| (tok, idf_value(document_count, n)))
            .collect();
        IdfTable {
            weights,
            document_count,
        }
    }

    /// Weight of `token`; tokens never seen get the `df = 0` weight.
    pub fn weight(&self, token: &str) -> f64 {
        self.weights
            .get(token)
            .copied()
            .unwrap_or_else(|| idf_value(self.document_count, 0))
    }

    pub fn document_count(&self) -> usize {
        self.document_count
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.weights.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Multiplies every weight (including the unseen-token weight) by `factor`.
    pub fn scaled(&self, factor: f64) -> ScaledIdf<'_> {
        ScaledIdf {
            table: self,
            factor,
        }
    }
}

fn idf_value(document_count: usize, df: usize) -> f64 {
    ((1.0 + document_count as f64) / (1.0 + df as f64)).ln() + 1.0
}

/// Anything that can weight tokens for the persona-cosine metric.
pub trait TokenWeights {
    fn weight(&self, token: &str) -> f64;
}

impl TokenWeights for IdfTable {
    fn weight(&self, token: &str) -> f64 {
        IdfTable::weight(self, token)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ScaledIdf<'a> {
    table: &'a IdfTable,
    factor: f64,
}

impl TokenWeights for ScaledIdf<'_> {
    fn weight(&self, token: &str) -> f64 {
        self.table.weight(token) * self.factor
    }
}
