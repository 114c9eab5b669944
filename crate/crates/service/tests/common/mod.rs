#![allow(dead_code)]

use std::path::Path;

use chrono::{DateTime, TimeZone, Utc};
use litatlas_core::store::{Document, Source};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOPICS: usize = 8;
const SYLLABLES: &[&str] = &[
    "ba", "ce", "di", "fo", "gu", "ha", "ki", "lo", "mu", "ne", "po", "ra", "si", "tu", "ve", "zo",
];

pub fn fetched_at() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 5, 1, 12, 0, 0).unwrap()
}

fn word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    (0..syllables).map(|_| *SYLLABLES.choose(rng).unwrap()).collect()
}

/// Word lists for each topic plus one shared list.
pub struct Lexicon {
    pub topics: Vec<Vec<String>>,
    pub shared: Vec<String>,
}

impl Lexicon {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = std::collections::BTreeSet::new();
        let mut fresh = |rng: &mut ChaCha8Rng, n: usize| -> Vec<String> {
            let mut out = Vec::new();
            while out.len() < n {
                let w = word(rng, 3 + out.len() % 2);
                if seen.insert(w.clone()) {
                    out.push(w);
                }
            }
            out
        };
        let topics = (0..TOPICS).map(|_| fresh(&mut rng, 60)).collect();
        let shared = fresh(&mut rng, 150);
        Lexicon { topics, shared }
    }
}

/// Deterministic synthetic abstracts; document `i` belongs to topic
/// `i % TOPICS`.
pub fn synthetic_documents(n: usize, seed: u64) -> Vec<Document> {
    let lex = Lexicon::new(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    (0..n)
        .map(|i| {
            let topic = i % TOPICS;
            let len = rng.random_range(60..120);
            let words: Vec<&str> = (0..len)
                .map(|_| {
                    let list = if rng.random_bool(0.6) { &lex.topics[topic] } else { &lex.shared };
                    list.choose(&mut rng).unwrap().as_str()
                })
                .collect();
            let title: Vec<&str> = (0..6).map(|_| lex.topics[topic].choose(&mut rng).unwrap().as_str()).collect();
            let pmid = 10_000_000 + i;
            Document {
                doc_id: format!("pubmed:{pmid}"),
                source: Source::Pubmed,
                title: title.join(" "),
                abstract_text: format!("{}.", words.join(" ")),
                authors: vec![format!("Author {i}")],
                venue: format!("Journal of topic {topic}"),
                published_year: Some(2000 + (i % 20) as i32),
                url: format!("https://pubmed.ncbi.nlm.nih.gov/{pmid}/"),
                fetched_at: fetched_at(),
            }
        })
        .collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// `efetch` XML for `docs`, in the PubMed article-set schema.
pub fn efetch_xml(docs: &[Document]) -> String {
    let mut out = String::from(
        "<?xml version=\"1.0\" ?>\n<!DOCTYPE PubmedArticleSet PUBLIC \"-//NLM//DTD PubMedArticle, 1st January 2024//EN\" \"https://dtd.nlm.nih.gov/ncbi/pubmed/out/pubmed_240101.dtd\">\n<PubmedArticleSet>\n",
    );
    for d in docs {
        let pmid = d.doc_id.trim_start_matches("pubmed:");
        let (last, first) = d.authors[0].rsplit_once(' ').map(|(a, b)| (b, a)).unwrap();
        out.push_str(&format!(
            "<PubmedArticle><MedlineCitation Status=\"MEDLINE\" Owner=\"NLM\"><PMID Version=\"1\">{pmid}</PMID>\
             <Article PubModel=\"Print\"><Journal><JournalIssue CitedMedium=\"Internet\"><PubDate><Year>{year}</Year></PubDate></JournalIssue>\
             <Title>{venue}</Title></Journal><ArticleTitle>{title}</ArticleTitle>\
             <Abstract><AbstractText>{abs}</AbstractText></Abstract>\
             <AuthorList CompleteYN=\"Y\"><Author ValidYN=\"Y\"><LastName>{last}</LastName><ForeName>{first}</ForeName></Author></AuthorList>\
             </Article></MedlineCitation></PubmedArticle>\n",
            year = d.published_year.unwrap(),
            venue = escape(&d.venue),
            title = escape(&d.title),
            abs = escape(&d.abstract_text),
        ));
    }
    out.push_str("</PubmedArticleSet>\n");
    out
}

pub fn esearch_json(total: usize, ids: &[String]) -> String {
    serde_json::json!({
        "header": {"type": "esearch", "version": "0.3"},
        "esearchresult": {
            "count": total.to_string(),
            "retmax": ids.len().to_string(),
            "idlist": ids,
        }
    })
    .to_string()
}

/// Writes a cassette that serves `docs` through paged esearch/efetch calls.
pub fn write_pubmed_cassette(dir: &Path, docs: &[Document], page: usize) {
    std::fs::create_dir_all(dir).unwrap();
    let mut entries = Vec::new();
    for (i, chunk) in docs.chunks(page).enumerate() {
        let ids: Vec<String> = chunk.iter().map(|d| d.doc_id.trim_start_matches("pubmed:").to_string()).collect();
        let search = format!("esearch_{i}.json");
        let fetch = format!("efetch_{i}.xml");
        std::fs::write(dir.join(&search), esearch_json(docs.len(), &ids)).unwrap();
        std::fs::write(dir.join(&fetch), efetch_xml(chunk)).unwrap();
        entries.push(serde_json::json!({"url_contains": format!("retstart={}", i * page), "body_file": search}));
        entries.push(serde_json::json!({"url_contains": "efetch.fcgi", "body_file": fetch}));
    }
    std::fs::write(dir.join("cassette.json"), serde_json::to_vec_pretty(&entries).unwrap()).unwrap();
}

/// A config file for a small, fast pipeline over a PubMed source.
pub fn write_config(path: &Path, data_dir: &Path, max_results: usize, extra: &str) {
    std::fs::write(
        path,
        format!(
            "data_dir = {data:?}\n\n[pipeline]\nlsa_components = 50\n\n[pipeline.tsne]\nperplexity = 15.0\n{extra}\n\n\
             [[sources]]\nsource = \"pubmed\"\nquery = \"synthetic[tiab]\"\nmax_results = {max_results}\npolite_delay_ms = 0\n",
            data = data_dir.display().to_string(),
        ),
    )
    .unwrap();
}
