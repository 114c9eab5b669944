//! Inverted index over tf-idf vectors and text search.
//!
//! The index is the exact transpose of the document-term matrix. A query is
//! vectorized with the corpus vocabulary and scored by accumulating
//! `q_t · w_{t,d}` over the query terms' posting lists, which is the cosine
//! similarity between the (normalized) query and document vectors. Keyword
//! search and whole-abstract search are the same operation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::similarity::rank_order;
use crate::textpipe::{SparseVector, Vocabulary};

pub const DEFAULT_LIMIT: usize = 20;

#[derive(Debug, Error, PartialEq)]
pub enum SearchError {
    #[error("dimension mismatch for {doc_id}: expected {expected}, found {found}")]
    DimensionMismatch {
        doc_id: String,
        expected: usize,
        found: usize,
    },
    #[error("limit must be >= 1")]
    InvalidLimit,
    #[error("too many documents for the index")]
    TooManyDocuments,
}

/// Which vocabulary an index was built against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabularyRef {
    pub corpus_version: u64,
    pub vocabulary_checksum: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Posting {
    /// Position in [`InvertedIndex::doc_ids`].
    pub doc: u32,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    /// Sorted; posting lists refer to documents by position here.
    doc_ids: Vec<String>,
    dimensionality: usize,
    postings: BTreeMap<usize, Vec<Posting>>,
    pub vocabulary_ref: VocabularyRef,
}

impl InvertedIndex {
    pub fn from_parts(
        doc_ids: Vec<String>,
        dimensionality: usize,
        postings: BTreeMap<usize, Vec<Posting>>,
        vocabulary_ref: VocabularyRef,
    ) -> Result<Self, String> {
        if doc_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err("index doc_ids must be sorted and unique".into());
        }
        for (&t, list) in &postings {
            if t >= dimensionality {
                return Err(format!("posting term {t} out of range"));
            }
            if list.is_empty() {
                return Err(format!("empty posting list for term {t}"));
            }
            if list.windows(2).any(|w| w[0].doc >= w[1].doc) {
                return Err(format!("posting list for term {t} not sorted"));
            }
            if list
                .iter()
                .any(|p| p.doc as usize >= doc_ids.len() || !(p.weight > 0.0 && p.weight.is_finite()))
            {
                return Err(format!("invalid posting for term {t}"));
            }
        }
        Ok(InvertedIndex {
            doc_ids,
            dimensionality,
            postings,
            vocabulary_ref,
        })
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn dimensionality(&self) -> usize {
        self.dimensionality
    }

    pub fn postings(&self) -> &BTreeMap<usize, Vec<Posting>> {
        &self.postings
    }

    /// `(doc_id, weight)` pairs for a term, doc_id-sorted.
    pub fn posting_list(&self, term: usize) -> Vec<(&str, f64)> {
        self.postings
            .get(&term)
            .map(|l| {
                l.iter()
                    .map(|p| (self.doc_ids[p.doc as usize].as_str(), p.weight))
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Inverse transposition back to per-document vectors.
    pub fn reconstruct_vectors(&self) -> BTreeMap<String, SparseVector> {
        let mut entries: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.doc_ids.len()];
        for (&t, list) in &self.postings {
            for p in list {
                entries[p.doc as usize].push((t, p.weight));
            }
        }
        self.doc_ids
            .iter()
            .cloned()
            .zip(entries)
            .map(|(id, e)| {
                (
                    id,
                    SparseVector {
                        dimensionality: self.dimensionality,
                        entries: e,
                    },
                )
            })
            .collect()
    }
}

pub fn build_index(
    doc_vectors: &BTreeMap<String, SparseVector>,
    vocabulary: &Vocabulary,
    vocabulary_ref: VocabularyRef,
) -> Result<InvertedIndex, SearchError> {
    if doc_vectors.len() > u32::MAX as usize {
        return Err(SearchError::TooManyDocuments);
    }
    let mut postings: BTreeMap<usize, Vec<Posting>> = BTreeMap::new();
    for (doc, (doc_id, v)) in doc_vectors.iter().enumerate() {
        if v.dimensionality != vocabulary.len() {
            return Err(SearchError::DimensionMismatch {
                doc_id: doc_id.clone(),
                expected: vocabulary.len(),
                found: v.dimensionality,
            });
        }
        for &(t, w) in &v.entries {
            if w > 0.0 {
                postings.entry(t).or_default().push(Posting {
                    doc: doc as u32,
                    weight: w,
                });
            }
        }
    }
    Ok(InvertedIndex {
        doc_ids: doc_vectors.keys().cloned().collect(),
        dimensionality: vocabulary.len(),
        postings,
        vocabulary_ref,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    /// Score-descending, ties by doc_id.
    pub ranked: Vec<(String, f64)>,
    /// Distinct query terms found in the vocabulary.
    pub query_terms_matched: usize,
    /// Number of matching documents before truncation.
    pub total_matches: usize,
    /// The limit applied, when results were cut off.
    pub truncated_at: Option<usize>,
}

impl SearchResult {
    fn empty() -> Self {
        SearchResult {
            ranked: Vec::new(),
            query_terms_matched: 0,
            total_matches: 0,
            truncated_at: None,
        }
    }
}

/// Scores every document sharing at least one term with `text`.
/// Nothing about the query is retained.
pub fn search_text(
    index: &InvertedIndex,
    vocabulary: &Vocabulary,
    text: &str,
    limit: usize,
) -> Result<SearchResult, SearchError> {
    if limit == 0 {
        return Err(SearchError::InvalidLimit);
    }
    let query = vocabulary.vectorize(text);
    let query_terms_matched = vocabulary.term_counts(text).len();
    if query.is_zero() {
        return Ok(SearchResult {
            query_terms_matched,
            ..SearchResult::empty()
        });
    }
    let mut scores = vec![0.0f64; index.doc_ids.len()];
    let mut touched = vec![false; index.doc_ids.len()];
    for &(t, q) in &query.entries {
        if let Some(list) = index.postings.get(&t) {
            for p in list {
                scores[p.doc as usize] += q * p.weight;
                touched[p.doc as usize] = true;
            }
        }
    }
    let mut ranked: Vec<(String, f64)> = touched
        .iter()
        .enumerate()
        .filter(|(_, &t)| t)
        .map(|(d, _)| (index.doc_ids[d].clone(), scores[d]))
        .collect();
    ranked.sort_by(rank_order);
    let total_matches = ranked.len();
    let truncated_at = (total_matches > limit).then_some(limit);
    ranked.truncate(limit);
    Ok(SearchResult {
        ranked,
        query_terms_matched,
        total_matches,
        truncated_at,
    })
}
