//! Per-user content-based recommendations.
//!
//! Candidates are the graph neighbors of every document a user marked
//! relevant. Each candidate is scored with the maximum similarity it received
//! from any relevant document, then everything the user has already rated is
//! removed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::similarity::{rank_order, Neighbor, SimilarityGraph};
use crate::store::{write_file_atomic, StoreError};

pub const DEFAULT_RECOMMENDATIONS: usize = 20;
pub const USERS_FILE: &str = "users.jsonl";

#[derive(Debug, Error)]
pub enum RecommendError {
    #[error("unknown document {0:?}")]
    UnknownDocument(String),
    #[error("n must be >= 1")]
    InvalidLimit,
    #[error("malformed profile line {line}: {reason}")]
    MalformedProfile { line: usize, reason: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Relevant,
    Irrelevant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rating {
    pub user_id: String,
    pub doc_id: String,
    pub verdict: Verdict,
    pub rated_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingEntry {
    pub verdict: Verdict,
    pub rated_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: String,
    pub ratings: BTreeMap<String, RatingEntry>,
}

impl UserProfile {
    pub fn new(user_id: impl Into<String>) -> Self {
        UserProfile {
            user_id: user_id.into(),
            ratings: BTreeMap::new(),
        }
    }

    /// Returns the profile with `doc_id` set to `verdict`, replacing any
    /// earlier verdict. `known` decides whether the document exists.
    pub fn rate(
        &self,
        doc_id: &str,
        verdict: Verdict,
        rated_at: DateTime<Utc>,
        known: impl Fn(&str) -> bool,
    ) -> Result<UserProfile, RecommendError> {
        if !known(doc_id) {
            return Err(RecommendError::UnknownDocument(doc_id.to_string()));
        }
        let mut next = self.clone();
        match next.ratings.get(doc_id) {
            Some(e) if e.verdict == verdict => {}
            _ => {
                next.ratings
                    .insert(doc_id.to_string(), RatingEntry { verdict, rated_at });
            }
        }
        Ok(next)
    }

    pub fn verdict(&self, doc_id: &str) -> Option<Verdict> {
        self.ratings.get(doc_id).map(|e| e.verdict)
    }

    pub fn relevant(&self) -> impl Iterator<Item = &str> {
        self.ratings
            .iter()
            .filter(|(_, e)| e.verdict == Verdict::Relevant)
            .map(|(d, _)| d.as_str())
    }

    pub fn to_ratings(&self) -> Vec<Rating> {
        self.ratings
            .iter()
            .map(|(doc_id, e)| Rating {
                user_id: self.user_id.clone(),
                doc_id: doc_id.clone(),
                verdict: e.verdict,
                rated_at: e.rated_at,
            })
            .collect()
    }
}

/// Top `n` recommendations, score-descending with ties by doc_id.
pub fn recommend(
    profile: &UserProfile,
    graph: &SimilarityGraph,
    n: usize,
) -> Result<Vec<Neighbor>, RecommendError> {
    if n == 0 {
        return Err(RecommendError::InvalidLimit);
    }
    let mut best: BTreeMap<&str, f64> = BTreeMap::new();
    for r in profile.relevant() {
        let Some(list) = graph.neighbors.get(r) else {
            tracing::debug!(user = %profile.user_id, doc_id = r, "ignoring rating of unknown document");
            continue;
        };
        for (c, s) in list {
            if profile.ratings.contains_key(c) {
                continue;
            }
            best.entry(c.as_str())
                .and_modify(|b| *b = b.max(*s))
                .or_insert(*s);
        }
    }
    let mut out: Vec<Neighbor> = best.into_iter().map(|(c, s)| (c.to_string(), s)).collect();
    out.sort_by(rank_order);
    out.truncate(n);
    Ok(out)
}

/// All profiles, persisted as one JSON profile per line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProfileBook {
    pub profiles: BTreeMap<String, UserProfile>,
}

impl ProfileBook {
    pub fn from_jsonl(bytes: &[u8]) -> Result<Self, RecommendError> {
        let mut profiles = BTreeMap::new();
        for (i, line) in bytes.split(|&b| b == b'\n').enumerate() {
            if line.iter().all(u8::is_ascii_whitespace) {
                continue;
            }
            let p: UserProfile =
                serde_json::from_slice(line).map_err(|e| RecommendError::MalformedProfile {
                    line: i + 1,
                    reason: e.to_string(),
                })?;
            profiles.insert(p.user_id.clone(), p);
        }
        Ok(ProfileBook { profiles })
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for p in self.profiles.values() {
            serde_json::to_writer(&mut out, p).expect("profile serializes");
            out.push(b'\n');
        }
        out
    }

    pub fn get(&self, user_id: &str) -> Option<&UserProfile> {
        self.profiles.get(user_id)
    }

    pub fn profile_or_new(&self, user_id: &str) -> UserProfile {
        self.profiles
            .get(user_id)
            .cloned()
            .unwrap_or_else(|| UserProfile::new(user_id))
    }

    pub fn put(&mut self, profile: UserProfile) {
        self.profiles.insert(profile.user_id.clone(), profile);
    }
}

/// A [`ProfileBook`] bound to a `users.jsonl` file.
#[derive(Debug)]
pub struct ProfileStore {
    path: PathBuf,
    book: ProfileBook,
}

impl ProfileStore {
    /// Opens `dir/users.jsonl`, starting empty if it does not exist.
    pub fn open(dir: &Path) -> Result<Self, RecommendError> {
        let path = dir.join(USERS_FILE);
        let book = match std::fs::read(&path) {
            Ok(bytes) => ProfileBook::from_jsonl(&bytes)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => ProfileBook::default(),
            Err(e) => return Err(StoreError::io(&path, e).into()),
        };
        Ok(ProfileStore { path, book })
    }

    pub fn book(&self) -> &ProfileBook {
        &self.book
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Replaces a profile and rewrites the file atomically. The in-memory
    /// book is only updated once the write succeeded.
    pub fn put(&mut self, profile: UserProfile) -> Result<(), RecommendError> {
        let mut next = self.book.clone();
        next.put(profile);
        if let Some(dir) = self.path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| StoreError::io(dir, e))?;
        }
        write_file_atomic(&self.path, &next.to_jsonl())?;
        self.book = next;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t0() -> DateTime<Utc> {
        DateTime::from_timestamp(1_700_000_000, 0).unwrap()
    }

    fn graph(lists: &[(&str, &[(&str, f64)])]) -> SimilarityGraph {
        SimilarityGraph {
            k_neighbors: 20,
            neighbors: lists
                .iter()
                .map(|(d, l)| {
                    (
                        d.to_string(),
                        l.iter().map(|(c, s)| (c.to_string(), *s)).collect(),
                    )
                })
                .collect(),
        }
    }

    fn rated(pairs: &[(&str, Verdict)]) -> UserProfile {
        let mut p = UserProfile::new("u");
        for (d, v) in pairs {
            p = p.rate(d, *v, t0(), |_| true).unwrap();
        }
        p
    }

    #[test]
    fn last_write_wins_and_idempotence() {
        let p = rated(&[("d1", Verdict::Relevant), ("d1", Verdict::Irrelevant)]);
        assert_eq!(p.verdict("d1"), Some(Verdict::Irrelevant));
        let q = rated(&[("d1", Verdict::Relevant), ("d1", Verdict::Relevant)]);
        assert_eq!(q.ratings.len(), 1);
    }

    #[test]
    fn rating_unknown_doc_fails() {
        let p = rated(&[("d1", Verdict::Relevant)]);
        let err = p.rate("zz", Verdict::Relevant, t0(), |d| d == "d1").unwrap_err();
        assert!(matches!(err, RecommendError::UnknownDocument(d) if d == "zz"));
        assert_eq!(p.ratings.len(), 1);
    }

    #[test]
    fn no_relevant_ratings_is_empty() {
        let g = graph(&[("a", &[("b", 0.9)]), ("b", &[("a", 0.9)])]);
        assert!(recommend(&UserProfile::new("u"), &g, 5).unwrap().is_empty());
        let p = rated(&[("a", Verdict::Irrelevant)]);
        assert!(recommend(&p, &g, 5).unwrap().is_empty());
        assert!(matches!(recommend(&p, &g, 0), Err(RecommendError::InvalidLimit)));
    }

    #[test]
    fn single_source_keeps_neighbor_order() {
        let g = graph(&[("r", &[("a", 0.9), ("b", 0.8), ("x", 0.5), ("c", 0.1)])]);
        let p = rated(&[("r", Verdict::Relevant), ("x", Verdict::Irrelevant)]);
        let got = recommend(&p, &g, 10).unwrap();
        assert_eq!(
            got,
            vec![("a".into(), 0.9), ("b".into(), 0.8), ("c".into(), 0.1)]
        );
    }

    #[test]
    fn shared_candidate_takes_the_maximum() {
        let g = graph(&[("r1", &[("c", 0.4)]), ("r2", &[("c", 0.7)])]);
        let p = rated(&[("r1", Verdict::Relevant), ("r2", Verdict::Relevant)]);
        assert_eq!(recommend(&p, &g, 5).unwrap(), vec![("c".into(), 0.7)]);
    }

    #[test]
    fn relevant_docs_are_not_recommended_back() {
        let g = graph(&[("a", &[("b", 0.9), ("c", 0.2)]), ("b", &[("a", 0.9)])]);
        let p = rated(&[("a", Verdict::Relevant), ("b", Verdict::Relevant)]);
        assert_eq!(recommend(&p, &g, 5).unwrap(), vec![("c".into(), 0.2)]);
    }

    #[test]
    fn stale_ratings_are_ignored() {
        let g = graph(&[("a", &[("b", 0.3)])]);
        let p = rated(&[("gone", Verdict::Relevant), ("a", Verdict::Relevant)]);
        assert_eq!(recommend(&p, &g, 5).unwrap(), vec![("b".into(), 0.3)]);
    }

    #[test]
    fn profile_store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ProfileStore::open(dir.path()).unwrap();
        store.put(rated(&[("a", Verdict::Relevant), ("b", Verdict::Irrelevant)])).unwrap();
        let mut other = UserProfile::new("v");
        other = other.rate("a", Verdict::Irrelevant, t0(), |_| true).unwrap();
        store.put(other).unwrap();
        let reopened = ProfileStore::open(dir.path()).unwrap();
        assert_eq!(reopened.book(), store.book());
        assert_eq!(reopened.book().profiles.len(), 2);
    }

    fn oracle(p: &UserProfile, g: &SimilarityGraph, n: usize) -> Vec<Neighbor> {
        let mut all: Vec<Neighbor> = Vec::new();
        for c in g.neighbors.keys() {
            if p.ratings.contains_key(c) {
                continue;
            }
            let mut score: Option<f64> = None;
            for (r, e) in &p.ratings {
                if e.verdict != Verdict::Relevant {
                    continue;
                }
                for (d, s) in g.neighbors.get(r).into_iter().flatten() {
                    if d == c {
                        score = Some(score.map_or(*s, |b: f64| b.max(*s)));
                    }
                }
            }
            if let Some(s) = score {
                all.push((c.clone(), s));
            }
        }
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all.truncate(n);
        all
    }

    fn arb_graph() -> impl Strategy<Value = SimilarityGraph> {
        prop::collection::vec(prop::collection::vec((0usize..12, -4i32..=10), 0..6), 12).prop_map(
            |lists| {
                let id = |i: usize| format!("d{i:02}");
                let mut neighbors = BTreeMap::new();
                for (i, l) in lists.into_iter().enumerate() {
                    let mut seen = std::collections::BTreeSet::new();
                    let mut list: Vec<Neighbor> = l
                        .into_iter()
                        .filter(|(j, _)| *j != i && seen.insert(*j))
                        .map(|(j, s)| (id(j), s as f64 / 10.0))
                        .collect();
                    list.sort_by(rank_order);
                    neighbors.insert(id(i), list);
                }
                SimilarityGraph {
                    k_neighbors: 20,
                    neighbors,
                }
            },
        )
    }

    proptest! {
        #[test]
        fn matches_oracle_and_marking_irrelevant_removes_one(
            g in arb_graph(),
            marks in prop::collection::vec((0usize..12, any::<bool>()), 0..8),
            n in 1usize..15,
        ) {
            let mut p = UserProfile::new("u");
            for (i, rel) in marks {
                let v = if rel { Verdict::Relevant } else { Verdict::Irrelevant };
                p = p.rate(&format!("d{i:02}"), v, t0(), |_| true).unwrap();
            }
            let got = recommend(&p, &g, n).unwrap();
            prop_assert_eq!(&got, &oracle(&p, &g, n));
            for (c, _) in &got {
                prop_assert!(!p.ratings.contains_key(c));
            }
            let full = recommend(&p, &g, usize::MAX).unwrap();
            if let Some((victim, _)) = full.first() {
                let q = p.rate(victim, Verdict::Irrelevant, t0(), |_| true).unwrap();
                let after = recommend(&q, &g, usize::MAX).unwrap();
                let expected: Vec<Neighbor> =
                    full.iter().filter(|(c, _)| c != victim).cloned().collect();
                prop_assert_eq!(after, expected);
            }
        }
    }
}
