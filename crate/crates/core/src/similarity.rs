//! Cosine similarity over LSA vectors and the precomputed related-papers
//! graph.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lsa::DenseVector;

pub const DEFAULT_K_NEIGHBORS: usize = 20;

#[derive(Debug, Error, PartialEq)]
pub enum SimilarityError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("unknown document {0:?}")]
    UnknownDocument(String),
    #[error("similarity graph needs at least 2 documents, got {0}")]
    TooFewDocuments(usize),
    #[error("k_neighbors must be >= 1")]
    InvalidK,
}

/// `⟨a,b⟩ / (‖a‖‖b‖)` clamped to `[-1, 1]`; 0 when either vector is zero.
pub fn cosine(a: &DenseVector, b: &DenseVector) -> Result<f64, SimilarityError> {
    if a.dim() != b.dim() {
        return Err(SimilarityError::DimensionMismatch(a.dim(), b.dim()));
    }
    Ok(cosine_with_norms(a, a.norm(), b, b.norm()))
}

fn cosine_with_norms(a: &DenseVector, na: f64, b: &DenseVector, nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// A neighbor entry: `(doc_id, score)`.
pub type Neighbor = (String, f64);

/// Orders by score descending, then doc_id ascending.
pub fn rank_order(a: &(impl AsRef<str>, f64), b: &(impl AsRef<str>, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.as_ref().cmp(b.0.as_ref()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityGraph {
    pub k_neighbors: usize,
    pub neighbors: BTreeMap<String, Vec<Neighbor>>,
}

#[derive(Serialize, Deserialize)]
struct GraphLine {
    doc_id: String,
    neighbors: Vec<Neighbor>,
}

impl SimilarityGraph {
    pub fn top_k_similar(&self, doc_id: &str) -> Result<&[Neighbor], SimilarityError> {
        self.neighbors
            .get(doc_id)
            .map(Vec::as_slice)
            .ok_or_else(|| SimilarityError::UnknownDocument(doc_id.to_string()))
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.neighbors.contains_key(doc_id)
    }

    /// `graph.jsonl`: one `{doc_id, neighbors: [[doc_id, score], …]}` per line.
    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (doc_id, neighbors) in &self.neighbors {
            serde_json::to_writer(
                &mut out,
                &GraphLine {
                    doc_id: doc_id.clone(),
                    neighbors: neighbors.clone(),
                },
            )
            .expect("graph line serializes");
            out.push(b'\n');
        }
        out
    }

    pub fn from_jsonl(bytes: &[u8], k_neighbors: usize) -> Result<Self, String> {
        let mut neighbors = BTreeMap::new();
        for (n, line) in bytes.split(|&b| b == b'\n').enumerate() {
            if line.iter().all(u8::is_ascii_whitespace) {
                continue;
            }
            let parsed: GraphLine =
                serde_json::from_slice(line).map_err(|e| format!("graph line {}: {e}", n + 1))?;
            neighbors.insert(parsed.doc_id, parsed.neighbors);
        }
        Ok(SimilarityGraph {
            k_neighbors,
            neighbors,
        })
    }

    /// Checks list structure; doc existence is checked by the snapshot.
    pub fn check_structure(&self) -> Result<(), String> {
        for (id, list) in &self.neighbors {
            if list.len() > self.k_neighbors {
                return Err(format!("{id}: {} neighbors exceed k", list.len()));
            }
            if list.iter().any(|(n, _)| n == id) {
                return Err(format!("{id}: self-loop"));
            }
            if list.windows(2).any(|w| w[0].1 < w[1].1) {
                return Err(format!("{id}: scores not non-increasing"));
            }
            if list.iter().any(|(_, s)| !(-1.0..=1.0).contains(s)) {
                return Err(format!("{id}: score outside [-1, 1]"));
            }
        }
        Ok(())
    }
}

/// Exhaustive top-k neighbors per document, ties broken by doc_id.
pub fn build_similarity_graph(
    vectors: &BTreeMap<String, DenseVector>,
    k_neighbors: usize,
) -> Result<SimilarityGraph, SimilarityError> {
    if vectors.len() < 2 {
        return Err(SimilarityError::TooFewDocuments(vectors.len()));
    }
    if k_neighbors == 0 {
        return Err(SimilarityError::InvalidK);
    }
    let items: Vec<(&String, &DenseVector, f64)> =
        vectors.iter().map(|(id, v)| (id, v, v.norm())).collect();
    let dim = items[0].1.dim();
    if let Some((_, v, _)) = items.iter().find(|(_, v, _)| v.dim() != dim) {
        return Err(SimilarityError::DimensionMismatch(dim, v.dim()));
    }
    let lists: Vec<(String, Vec<Neighbor>)> = items
        .par_iter()
        .map(|&(id, v, nv)| {
            let mut scored: Vec<Neighbor> = items
                .iter()
                .filter(|(other, _, _)| *other != id)
                .map(|&(other, w, nw)| (other.clone(), cosine_with_norms(v, nv, w, nw)))
                .collect();
            scored.sort_by(rank_order);
            scored.truncate(k_neighbors);
            (id.clone(), scored)
        })
        .collect();
    Ok(SimilarityGraph {
        k_neighbors,
        neighbors: lists.into_iter().collect(),
    })
}

pub fn top_k_similar<'g>(
    graph: &'g SimilarityGraph,
    doc_id: &str,
) -> Result<&'g [Neighbor], SimilarityError> {
    graph.top_k_similar(doc_id)
}
