//! Tokenization, vocabulary construction and L2-normalized tf-idf vectors.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::Document;

const DEFAULT_STOPWORDS: &str = include_str!("stopwords_en.txt");

#[derive(Debug, Error, PartialEq)]
pub enum TextError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("unknown term {0:?}")]
    UnknownTerm(String),
    #[error("invalid tokenizer config: {0}")]
    InvalidConfig(String),
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("invalid sparse vector: {0}")]
    InvalidVector(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub lowercase: bool,
    pub min_token_length: usize,
    pub stopwords: BTreeSet<String>,
    pub min_document_frequency: usize,
    pub max_document_fraction: f64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            lowercase: true,
            min_token_length: 2,
            stopwords: default_stopwords(),
            min_document_frequency: 2,
            max_document_fraction: 0.9,
        }
    }
}

/// The shipped English stopword list.
pub fn default_stopwords() -> BTreeSet<String> {
    parse_stopwords(DEFAULT_STOPWORDS)
}

/// Parses a stopword file: one word per line, blank lines and `#` comments
/// ignored.
pub fn parse_stopwords(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<(), TextError> {
        if self.min_token_length < 1 {
            return Err(TextError::InvalidConfig("min_token_length must be >= 1".into()));
        }
        if self.min_document_frequency < 1 {
            return Err(TextError::InvalidConfig(
                "min_document_frequency must be >= 1".into(),
            ));
        }
        if !(self.max_document_fraction > 0.0 && self.max_document_fraction <= 1.0) {
            return Err(TextError::InvalidConfig(
                "max_document_fraction must be in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Splits on non-alphanumeric boundaries (Unicode-aware), optionally
/// lowercases, and drops short tokens and stopwords. Order is preserved.
pub fn tokenize(text: &str, config: &TokenizerConfig) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| {
            if config.lowercase {
                t.to_lowercase()
            } else {
                t.to_string()
            }
        })
        .filter(|t| t.chars().count() >= config.min_token_length)
        .filter(|t| !config.stopwords.contains(t))
        .collect()
}

/// Natural-log inverse document frequency, `ln(|D| / df)`.
pub fn idf_from_counts(corpus_size: usize, document_frequency: usize) -> f64 {
    (corpus_size as f64 / document_frequency as f64).ln()
}

/// Sorted term list with per-term document frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyFile", into = "VocabularyFile")]
pub struct Vocabulary {
    terms: Vec<String>,
    document_frequency: Vec<usize>,
    corpus_size: usize,
    build_params: TokenizerConfig,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    terms: Vec<String>,
    document_frequency: Vec<usize>,
    corpus_size: usize,
    build_params: TokenizerConfig,
}

impl TryFrom<VocabularyFile> for Vocabulary {
    type Error = TextError;
    fn try_from(f: VocabularyFile) -> Result<Self, TextError> {
        Vocabulary::from_parts(f.terms, f.document_frequency, f.corpus_size, f.build_params)
    }
}

impl From<Vocabulary> for VocabularyFile {
    fn from(v: Vocabulary) -> Self {
        VocabularyFile {
            terms: v.terms,
            document_frequency: v.document_frequency,
            corpus_size: v.corpus_size,
            build_params: v.build_params,
        }
    }
}

impl Vocabulary {
    /// Assembles a vocabulary from precomputed counts, checking its invariants.
    pub fn from_parts(
        terms: Vec<String>,
        document_frequency: Vec<usize>,
        corpus_size: usize,
        build_params: TokenizerConfig,
    ) -> Result<Self, TextError> {
        if terms.len() != document_frequency.len() {
            return Err(TextError::InvalidVocabulary(
                "terms and document_frequency lengths differ".into(),
            ));
        }
        if terms.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TextError::InvalidVocabulary(
                "terms must be unique and sorted".into(),
            ));
        }
        if let Some((t, df)) = terms
            .iter()
            .zip(&document_frequency)
            .find(|(_, &df)| df < 1 || df > corpus_size)
        {
            return Err(TextError::InvalidVocabulary(format!(
                "document frequency {df} of {t:?} outside [1, {corpus_size}]"
            )));
        }
        let index = terms
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocabulary {
            terms,
            document_frequency,
            corpus_size,
            build_params,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn document_frequency(&self) -> &[usize] {
        &self.document_frequency
    }

    pub fn corpus_size(&self) -> usize {
        self.corpus_size
    }

    pub fn build_params(&self) -> &TokenizerConfig {
        &self.build_params
    }

    pub fn term_index(&self, term: &str) -> Option<usize> {
        self.index.get(term).copied()
    }

    pub fn idf(&self, term: &str) -> Result<f64, TextError> {
        self.term_index(term)
            .map(|i| self.idf_at(i))
            .ok_or_else(|| TextError::UnknownTerm(term.to_string()))
    }

    pub fn idf_at(&self, index: usize) -> f64 {
        idf_from_counts(self.corpus_size, self.document_frequency[index])
    }

    /// Raw in-vocabulary term counts of `text`, keyed by term index.
    pub fn term_counts(&self, text: &str) -> BTreeMap<usize, u32> {
        let mut counts = BTreeMap::new();
        for tok in tokenize(text, &self.build_params) {
            if let Some(i) = self.term_index(&tok) {
                *counts.entry(i).or_insert(0) += 1;
            }
        }
        counts
    }

    /// tf-idf weights of `text` (raw tf times idf), L2-normalized. Terms with
    /// zero idf carry no weight and are omitted.
    pub fn vectorize(&self, text: &str) -> SparseVector {
        let entries: Vec<(usize, f64)> = self
            .term_counts(text)
            .into_iter()
            .map(|(i, tf)| (i, tf as f64 * self.idf_at(i)))
            .filter(|&(_, w)| w > 0.0)
            .collect();
        let mut v = SparseVector {
            dimensionality: self.len(),
            entries,
        };
        v.normalize();
        v
    }
}

pub fn build_vocabulary(
    corpus: &[Document],
    config: &TokenizerConfig,
) -> Result<Vocabulary, TextError> {
    build_vocabulary_from_texts(corpus.iter().map(|d| d.abstract_text.as_str()), config)
}

pub fn build_vocabulary_from_texts<'a>(
    texts: impl IntoIterator<Item = &'a str>,
    config: &TokenizerConfig,
) -> Result<Vocabulary, TextError> {
    config.validate()?;
    let mut df: BTreeMap<String, usize> = BTreeMap::new();
    let mut corpus_size = 0;
    for text in texts {
        corpus_size += 1;
        let unique: BTreeSet<String> = tokenize(text, config).into_iter().collect();
        for t in unique {
            *df.entry(t).or_insert(0) += 1;
        }
    }
    if corpus_size == 0 {
        return Err(TextError::EmptyCorpus);
    }
    let (terms, freqs): (Vec<String>, Vec<usize>) = df
        .into_iter()
        .filter(|&(_, n)| {
            n >= config.min_document_frequency
                && n as f64 / corpus_size as f64 <= config.max_document_fraction
        })
        .unzip();
    Vocabulary::from_parts(terms, freqs, corpus_size, config.clone())
}

pub fn tfidf_vector(doc: &Document, vocabulary: &Vocabulary) -> SparseVector {
    vocabulary.vectorize(&doc.abstract_text)
}

/// Sparse vector with strictly increasing indices.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SparseVector {
    pub dimensionality: usize,
    pub entries: Vec<(usize, f64)>,
}

impl SparseVector {
    pub fn new(dimensionality: usize, entries: Vec<(usize, f64)>) -> Result<Self, TextError> {
        if entries.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(TextError::InvalidVector("indices not strictly increasing".into()));
        }
        if entries.last().is_some_and(|&(i, _)| i >= dimensionality) {
            return Err(TextError::InvalidVector("index out of range".into()));
        }
        if entries.iter().any(|&(_, w)| !w.is_finite()) {
            return Err(TextError::InvalidVector("non-finite weight".into()));
        }
        Ok(SparseVector {
            dimensionality,
            entries,
        })
    }

    pub fn zeros(dimensionality: usize) -> Self {
        SparseVector {
            dimensionality,
            entries: Vec::new(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|&(_, w)| w == 0.0)
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|&(_, w)| w * w).sum::<f64>().sqrt()
    }

    pub fn normalize(&mut self) {
        let norm = self.norm();
        if norm > 0.0 {
            for e in &mut self.entries {
                e.1 /= norm;
            }
        }
    }

    /// Sparse-sparse dot product, accumulated in increasing index order.
    pub fn dot(&self, other: &SparseVector) -> f64 {
        let (mut a, mut b) = (self.entries.iter().peekable(), other.entries.iter().peekable());
        let mut acc = 0.0;
        while let (Some(&&(i, x)), Some(&&(j, y))) = (a.peek(), b.peek()) {
            match i.cmp(&j) {
                std::cmp::Ordering::Less => {
                    a.next();
                }
                std::cmp::Ordering::Greater => {
                    b.next();
                }
                std::cmp::Ordering::Equal => {
                    acc += x * y;
                    a.next();
                    b.next();
                }
            }
        }
        acc
    }

    /// Element-wise sum. Both vectors must share a dimensionality.
    pub fn add(&self, other: &SparseVector) -> SparseVector {
        assert_eq!(self.dimensionality, other.dimensionality);
        let mut merged: BTreeMap<usize, f64> = BTreeMap::new();
        for &(i, w) in self.entries.iter().chain(&other.entries) {
            *merged.entry(i).or_insert(0.0) += w;
        }
        SparseVector {
            dimensionality: self.dimensionality,
            entries: merged.into_iter().collect(),
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dimensionality];
        for &(i, w) in &self.entries {
            out[i] = w;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(min_df: usize, max_frac: f64) -> TokenizerConfig {
        TokenizerConfig {
            stopwords: ["the".to_string()].into_iter().collect(),
            min_document_frequency: min_df,
            max_document_fraction: max_frac,
            ..TokenizerConfig::default()
        }
    }

    #[test]
    fn tokenize_rules() {
        let c = cfg(1, 1.0);
        assert_eq!(
            tokenize("The cell-cycle regulates.", &c),
            vec!["cell", "cycle", "regulates"]
        );
        assert!(tokenize("", &c).is_empty());
        assert_eq!(tokenize("p53 P53", &c), vec!["p53", "p53"]);
        assert_eq!(tokenize("Über-Größe a", &c), vec!["über", "größe"]);
    }

    #[test]
    fn shipped_stopwords() {
        let sw = default_stopwords();
        assert!(sw.contains("the") && sw.contains("and"));
        assert!(!sw.contains("cancer"));
    }

    #[test]
    fn df_counts_documents() {
        let texts = ["alpha beta beta", "beta gamma", "beta delta", "beta alpha"];
        let v = build_vocabulary_from_texts(texts, &cfg(1, 1.0)).unwrap();
        assert_eq!(v.corpus_size(), 4);
        let df = |t: &str| v.document_frequency()[v.term_index(t).unwrap()];
        assert_eq!(df("gamma"), 1);
        assert_eq!(df("alpha"), 2);
        assert_eq!(df("beta"), 4);
    }

    #[test]
    fn max_fraction_drops_ubiquitous_terms() {
        let texts = ["alpha beta", "beta gamma", "beta delta", "beta alpha"];
        let v = build_vocabulary_from_texts(texts, &cfg(1, 0.9)).unwrap();
        assert!(v.term_index("beta").is_none());
        assert!(v.term_index("gamma").is_some());
    }

    #[test]
    fn min_df_and_empty_docs_count_toward_corpus_size() {
        let texts = ["alpha beta", "alpha", "the"];
        let v = build_vocabulary_from_texts(texts, &cfg(2, 1.0)).unwrap();
        assert_eq!(v.terms(), ["alpha"]);
        assert_eq!(v.corpus_size(), 3);
    }

    #[test]
    fn empty_corpus() {
        assert_eq!(
            build_vocabulary_from_texts([], &cfg(1, 1.0)).unwrap_err(),
            TextError::EmptyCorpus
        );
    }

    fn vocab(dfs: &[(&str, usize)], n: usize) -> Vocabulary {
        Vocabulary::from_parts(
            dfs.iter().map(|(t, _)| t.to_string()).collect(),
            dfs.iter().map(|(_, d)| *d).collect(),
            n,
            cfg(1, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn idf_values() {
        assert!((vocab(&[("t", 1)], 4).idf("t").unwrap() - 1.386_294_4).abs() < 1e-7);
        assert_eq!(vocab(&[("t", 10)], 10).idf("t").unwrap(), 0.0);
        assert!((vocab(&[("t", 10)], 1000).idf("t").unwrap() - 4.605_170_2).abs() < 1e-7);
        assert_eq!(
            vocab(&[("t", 1)], 4).idf("u").unwrap_err(),
            TextError::UnknownTerm("u".into())
        );
    }

    #[test]
    fn from_parts_checks_invariants() {
        let p = cfg(1, 1.0);
        assert!(Vocabulary::from_parts(vec!["b".into(), "a".into()], vec![1, 1], 2, p.clone())
            .is_err());
        assert!(Vocabulary::from_parts(vec!["a".into()], vec![3], 2, p.clone()).is_err());
        assert!(Vocabulary::from_parts(vec!["a".into()], vec![0], 2, p).is_err());
    }

    #[test]
    fn single_term_doc_is_unit_vector() {
        let v = vocab(&[("alpha", 1), ("beta", 2)], 4);
        let s = v.vectorize("alpha alpha alpha");
        assert_eq!(s.entries, vec![(0, 1.0)]);
    }

    #[test]
    fn hand_computed_weights() {
        // Independent scalar computation: tf (2, 1), idf ln 2 each.
        let ln2 = 2f64.ln();
        let (wa, wb) = (2.0 * ln2, ln2);
        let norm = (wa * wa + wb * wb).sqrt();
        let expected = [wa / norm, wb / norm];
        assert!((expected[0] - 2.0 / 5f64.sqrt()).abs() < 1e-15);
        assert!((expected[1] - 1.0 / 5f64.sqrt()).abs() < 1e-15);

        let v = vocab(&[("aa", 2), ("bb", 2)], 4);
        let s = v.vectorize("aa bb aa");
        assert_eq!(s.entries.len(), 2);
        assert!((s.entries[0].1 - expected[0]).abs() < 1e-15);
        assert!((s.entries[1].1 - expected[1]).abs() < 1e-15);
    }

    #[test]
    fn out_of_vocabulary_only_is_zero_vector() {
        let v = vocab(&[("alpha", 1)], 4);
        let s = v.vectorize("gamma delta");
        assert!(s.is_zero());
        assert_eq!(s.dimensionality, 1);
    }

    #[test]
    fn sparse_vector_validation() {
        assert!(SparseVector::new(3, vec![(1, 0.5), (1, 0.5)]).is_err());
        assert!(SparseVector::new(3, vec![(3, 0.5)]).is_err());
        assert!(SparseVector::new(3, vec![(0, f64::NAN)]).is_err());
        let a = SparseVector::new(4, vec![(0, 1.0), (2, 2.0)]).unwrap();
        let b = SparseVector::new(4, vec![(2, 3.0), (3, 1.0)]).unwrap();
        assert_eq!(a.dot(&b), 6.0);
        assert_eq!(a.add(&b).entries, vec![(0, 1.0), (2, 5.0), (3, 1.0)]);
    }

    const WORDS: &[&str] = &[
        "tumor", "cell", "gene", "protein", "growth", "signal", "therapy", "dose", "risk",
        "patient", "survival", "marker",
    ];

    fn text_strategy() -> impl Strategy<Value = String> {
        prop::collection::vec(prop::sample::select(WORDS), 1..20).prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn idf_is_monotone(n in 2usize..5000, a in 1usize..5000, b in 1usize..5000) {
            let (a, b) = (a.min(n), b.min(n));
            prop_assume!(a < b);
            prop_assert!(idf_from_counts(n, a) > idf_from_counts(n, b));
            prop_assert!(idf_from_counts(n, b) >= 0.0);
        }

        #[test]
        fn vectors_are_normalized_nonnegative_and_scale_invariant(
            corpus in prop::collection::vec(text_strategy(), 2..12),
            query in text_strategy(),
        ) {
            let v = build_vocabulary_from_texts(corpus.iter().map(String::as_str), &cfg(1, 1.0)).unwrap();
            let s = v.vectorize(&query);
            prop_assert!(s.entries.iter().all(|&(_, w)| w >= 0.0));
            prop_assert!(s.is_zero() || (s.norm() - 1.0).abs() < 1e-9);
            let doubled = v.vectorize(&format!("{query} {query}"));
            prop_assert_eq!(s.entries.len(), doubled.entries.len());
            for (x, y) in s.entries.iter().zip(&doubled.entries) {
                prop_assert_eq!(x.0, y.0);
                prop_assert!((x.1 - y.1).abs() < 1e-12);
            }
        }

        #[test]
        fn corpus_order_does_not_matter(
            corpus in prop::collection::vec(text_strategy(), 2..12),
            query in text_strategy(),
        ) {
            let forward = build_vocabulary_from_texts(corpus.iter().map(String::as_str), &cfg(1, 0.9)).unwrap();
            let backward = build_vocabulary_from_texts(corpus.iter().rev().map(String::as_str), &cfg(1, 0.9)).unwrap();
            prop_assert_eq!(&forward, &backward);
            prop_assert_eq!(forward.vectorize(&query), backward.vectorize(&query));
        }
    }
}
