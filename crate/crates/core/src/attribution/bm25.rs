//! Lexical-overlap attribution.
//!
//! The default scorer is the lower-bounded formula
//!
//! ```text
//! Σ_{t ∈ query} log((N+1)/N_t) · ( (k1+1) f / (k1((1−b) + b L/L_avg) + f) + 1 )
//! ```
//!
//! Query terms are summed with multiplicity. Terms that never occur in the
//! corpus (`N_t = 0`) are skipped. [`Bm25Variant::Okapi`] gives the classic
//! scorer with a floored idf for comparison.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Example, Vocab};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Bm25Variant {
    #[default]
    LowerBounded,
    Okapi,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bm25Config {
    pub k1: f64,
    pub b: f64,
    #[serde(default)]
    pub variant: Bm25Variant,
}

impl Default for Bm25Config {
    fn default() -> Self {
        Bm25Config {
            k1: 1.5,
            b: 0.75,
            variant: Bm25Variant::LowerBounded,
        }
    }
}

/// Floor for non-positive Okapi idf values, as a fraction of the mean idf.
const OKAPI_EPSILON: f64 = 0.25;

impl Bm25Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1 > 0.0 && self.k1.is_finite()) {
            return Err(Error::Config(format!(
                "bm25 k1 must be positive, got {}",
                self.k1
            )));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(Error::Config(format!(
                "bm25 b must lie in [0, 1], got {}",
                self.b
            )));
        }
        Ok(())
    }
}

/// Lowercased alphanumeric runs of every token of `input ++ output`. The
/// end-of-sequence marker is not a term.
pub fn terms(example: &Example, vocab: &Vocab) -> Vec<String> {
    let eos = vocab.eos();
    let mut out = Vec::new();
    for &t in example.input.iter().chain(&example.output) {
        if t == eos {
            continue;
        }
        let s = vocab.token(t).to_lowercase();
        out.extend(
            s.split(|c: char| !c.is_alphanumeric())
                .filter(|w| !w.is_empty())
                .map(str::to_string),
        );
    }
    out
}

/// A tokenized document with its term counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    counts: HashMap<String, usize>,
    len: usize,
}

impl Document {
    pub fn new(terms: &[String]) -> Self {
        let mut counts = HashMap::new();
        for t in terms {
            *counts.entry(t.clone()).or_insert(0) += 1;
        }
        Document {
            counts,
            len: terms.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn frequency(&self, term: &str) -> usize {
        self.counts.get(term).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    pub doc_count: usize,
    pub doc_freq: HashMap<String, usize>,
    pub doc_lens: Vec<usize>,
    pub avg_len: f64,
}

impl CorpusStats {
    pub fn new(docs: &[Document]) -> Result<Self> {
        if docs.is_empty() {
            return Err(Error::Input(
                "bm25 statistics need at least one document".into(),
            ));
        }
        let mut doc_freq = HashMap::new();
        for d in docs {
            for t in d.counts.keys() {
                *doc_freq.entry(t.clone()).or_insert(0) += 1;
            }
        }
        let doc_lens: Vec<usize> = docs.iter().map(Document::len).collect();
        let avg_len = doc_lens.iter().sum::<usize>() as f64 / docs.len() as f64;
        Ok(CorpusStats {
            doc_count: docs.len(),
            doc_freq,
            doc_lens,
            avg_len,
        })
    }

    fn okapi_idf(&self) -> HashMap<&str, f64> {
        let n = self.doc_count as f64;
        let raw: Vec<(&str, f64)> = self
            .doc_freq
            .iter()
            .map(|(t, &nt)| (t.as_str(), ((n - nt as f64 + 0.5) / (nt as f64 + 0.5)).ln()))
            .collect();
        let mean = raw.iter().map(|(_, v)| v).sum::<f64>() / raw.len().max(1) as f64;
        let floor = OKAPI_EPSILON * mean;
        raw.into_iter()
            .map(|(t, v)| (t, if v > 0.0 { v } else { floor }))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Score {
    pub value: f64,
    /// The query had no terms, so the score is 0 by definition.
    pub empty_query: bool,
}

/// Precomputed scorer over fixed corpus statistics.
pub struct Bm25Scorer<'s> {
    stats: &'s CorpusStats,
    config: Bm25Config,
    okapi_idf: Option<HashMap<&'s str, f64>>,
}

impl<'s> Bm25Scorer<'s> {
    pub fn new(stats: &'s CorpusStats, config: Bm25Config) -> Result<Self> {
        config.validate()?;
        let okapi_idf = (config.variant == Bm25Variant::Okapi).then(|| stats.okapi_idf());
        Ok(Bm25Scorer {
            stats,
            config,
            okapi_idf,
        })
    }

    pub fn score(&self, doc: &Document, query: &[String]) -> Bm25Score {
        if query.is_empty() {
            return Bm25Score {
                value: 0.0,
                empty_query: true,
            };
        }
        let Bm25Config { k1, b, .. } = self.config;
        let n = self.stats.doc_count as f64;
        let norm = if self.stats.avg_len > 0.0 {
            doc.len as f64 / self.stats.avg_len
        } else {
            1.0
        };
        let denom_base = k1 * ((1.0 - b) + b * norm);
        let mut value = 0.0;
        for t in query {
            let Some(&nt) = self.stats.doc_freq.get(t) else {
                continue;
            };
            let f = doc.frequency(t) as f64;
            let tf = (k1 + 1.0) * f / (denom_base + f);
            value += match &self.okapi_idf {
                None => ((n + 1.0) / nt as f64).ln() * (tf + 1.0),
                Some(idf) => idf[t.as_str()] * tf,
            };
        }
        Bm25Score {
            value,
            empty_query: false,
        }
    }
}

pub fn bm25_score(
    doc: &Document,
    query: &[String],
    stats: &CorpusStats,
    config: &Bm25Config,
) -> Result<Bm25Score> {
    Ok(Bm25Scorer::new(stats, *config)?.score(doc, query))
}
