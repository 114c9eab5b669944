//! Batch build of a [`ModelSnapshot`] from a corpus.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lsa::{fit_lsa, DenseVector, LsaError, SvdOptions, DEFAULT_COMPONENTS};
use crate::search::{build_index, SearchError, VocabularyRef};
use crate::similarity::{build_similarity_graph, SimilarityError, DEFAULT_K_NEIGHBORS};
use crate::store::{vocabulary_checksum, Corpus, ModelSnapshot};
use crate::textpipe::{build_vocabulary, tfidf_vector, TextError, TokenizerConfig};
use crate::tsne::barnes_hut::{run_tsne_barnes_hut, sparse_affinities};
use crate::tsne::{pairwise_affinities, run_tsne, EmbeddingResult, TsneConfig, TsneError};

/// Smallest corpus the pipeline accepts.
pub const MIN_DOCUMENTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TsneMethod {
    #[default]
    Exact,
    BarnesHut,
    /// Exact up to `exact_tsne_max_points`, Barnes-Hut beyond.
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub tokenizer: TokenizerConfig,
    pub lsa_components: usize,
    pub svd: SvdOptions,
    pub tsne: TsneConfig,
    pub k_neighbors: usize,
    pub tsne_method: TsneMethod,
    pub barnes_hut_theta: f64,
    pub exact_tsne_max_points: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            tokenizer: TokenizerConfig::default(),
            lsa_components: DEFAULT_COMPONENTS,
            svd: SvdOptions::default(),
            tsne: TsneConfig::default(),
            k_neighbors: DEFAULT_K_NEIGHBORS,
            tsne_method: TsneMethod::Exact,
            barnes_hut_theta: 0.5,
            exact_tsne_max_points: 5000,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.tokenizer.validate()?;
        let bad = |m: &str| Err(PipelineError::InvalidConfig(m.to_string()));
        if self.lsa_components == 0 {
            return bad("lsa_components must be >= 1");
        }
        if self.k_neighbors == 0 {
            return bad("k_neighbors must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.barnes_hut_theta) {
            return bad("barnes_hut_theta must be in [0, 1]");
        }
        if !(self.svd.tolerance > 0.0) || self.svd.max_iterations == 0 {
            return bad("svd tolerance and max_iterations must be positive");
        }
        self.tsne.validate(usize::MAX)?;
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("the corpus is empty")]
    EmptyCorpus,
    #[error("at least {MIN_DOCUMENTS} documents are required, got {0}")]
    TooFewDocuments(usize),
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("vocabulary is empty after filtering")]
    EmptyVocabulary,
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Lsa(#[from] LsaError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error(transparent)]
    Tsne(#[from] TsneError),
    #[error(transparent)]
    Search(#[from] SearchError),
}

/// Runs tokenization, tf-idf, LSA, the similarity graph, t-SNE and the
/// inverted index over `corpus`. Settings that do not fit a small corpus
/// are clamped and the adjustment is recorded in `build_notes`.
pub fn build_snapshot(
    corpus: &Corpus,
    config: &PipelineConfig,
    corpus_version: u64,
    build_timestamp: DateTime<Utc>,
) -> Result<ModelSnapshot, PipelineError> {
    config.validate()?;
    let n = corpus.len();
    if n == 0 {
        return Err(PipelineError::EmptyCorpus);
    }
    if n < MIN_DOCUMENTS {
        return Err(PipelineError::TooFewDocuments(n));
    }
    let mut notes = Vec::new();
    let docs: Vec<_> = corpus.documents().cloned().collect();
    let doc_ids: Vec<String> = docs.iter().map(|d| d.doc_id.clone()).collect();

    let vocabulary = build_vocabulary(&docs, &config.tokenizer)?;
    if vocabulary.is_empty() {
        return Err(PipelineError::EmptyVocabulary);
    }
    tracing::info!(documents = n, terms = vocabulary.len(), "vocabulary built");
    let tfidf: Vec<_> = docs.iter().map(|d| tfidf_vector(d, &vocabulary)).collect();
    let empty = tfidf.iter().filter(|v| v.is_zero()).count();
    if empty > 0 {
        notes.push(format!("{empty} documents have no vocabulary terms"));
    }

    let max_k = n.min(vocabulary.len());
    let k = config.lsa_components.min(max_k);
    if k < config.lsa_components {
        notes.push(format!(
            "lsa_components clamped from {} to {k} (documents {n}, terms {})",
            config.lsa_components,
            vocabulary.len()
        ));
    }
    let fit = fit_lsa(&tfidf, k, &config.svd)?;
    notes.extend(fit.diagnostics.warnings());
    tracing::info!(components = fit.model.n_components(), "lsa fitted");
    let dense: Vec<DenseVector> = tfidf
        .iter()
        .map(|v| fit.model.project(v))
        .collect::<Result<_, _>>()?;
    let doc_vectors: BTreeMap<String, DenseVector> =
        doc_ids.iter().cloned().zip(dense.iter().cloned()).collect();

    let graph_k = config.k_neighbors.min(n - 1);
    let similarity_graph = build_similarity_graph(&doc_vectors, graph_k)?;

    let mut tsne_cfg = config.tsne.clone();
    let max_perplexity = n as f64 - 1.5;
    if tsne_cfg.perplexity > max_perplexity {
        notes.push(format!(
            "perplexity clamped from {} to {max_perplexity} for {n} documents",
            tsne_cfg.perplexity
        ));
        tsne_cfg.perplexity = max_perplexity;
    }
    let barnes_hut = match config.tsne_method {
        TsneMethod::Exact => false,
        TsneMethod::BarnesHut => true,
        TsneMethod::Auto => n > config.exact_tsne_max_points,
    };
    let (run, flagged) = if barnes_hut {
        let p = sparse_affinities(&dense, &tsne_cfg)?;
        notes.push(format!("Barnes-Hut t-SNE with theta {}", config.barnes_hut_theta));
        (run_tsne_barnes_hut(&p, &tsne_cfg, config.barnes_hut_theta)?, p.flagged_rows)
    } else {
        let p = pairwise_affinities(&dense, &tsne_cfg)?;
        (run_tsne(&p, &tsne_cfg)?, p.flagged_rows)
    };
    if !flagged.is_empty() {
        notes.push(format!("{} rows did not calibrate exactly", flagged.len()));
    }
    tracing::info!(final_kl = run.final_kl, "embedding computed");
    let embedding = EmbeddingResult::from_run(&doc_ids, run, flagged, tsne_cfg);

    let tfidf_map = doc_ids.iter().cloned().zip(tfidf).collect();
    let vocabulary_ref = VocabularyRef {
        corpus_version,
        vocabulary_checksum: vocabulary_checksum(&vocabulary),
    };
    let inverted_index = build_index(&tfidf_map, &vocabulary, vocabulary_ref)?;

    Ok(ModelSnapshot {
        corpus_version,
        corpus: corpus.clone(),
        vocabulary,
        lsa_model: fit.model,
        lsa_diagnostics: fit.diagnostics,
        doc_vectors,
        similarity_graph,
        inverted_index,
        embedding,
        build_config: config.clone(),
        build_notes: notes,
        build_timestamp,
    })
}
