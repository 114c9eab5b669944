use chrono::{DateTime, TimeZone, Utc};
use litatlas_core::store::Document;
use litatlas_ingest::{parse_arxiv_atom, parse_pubmed_xml, Parsed, SkippedRecord};
use proptest::prelude::*;
use serde::Deserialize;

const PUBMED: &[u8] = include_bytes!("fixtures/pubmed_efetch.xml");
const ARXIV: &[u8] = include_bytes!("fixtures/arxiv_feed.xml");

#[derive(Deserialize)]
struct Expected {
    documents: Vec<Document>,
    skipped: Vec<SkippedRecord>,
}

fn fetched_at() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 5, 1, 12, 0, 0).unwrap()
}

fn expected(file: &str) -> Expected {
    let path = format!("{}/tests/fixtures/{file}", env!("CARGO_MANIFEST_DIR"));
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn assert_matches(parsed: &Parsed, want: &Expected) {
    assert_eq!(parsed.documents, want.documents);
    assert_eq!(parsed.skipped, want.skipped);
}

#[test]
fn pubmed_fixture_matches_expected_records() {
    let parsed = parse_pubmed_xml(PUBMED, fetched_at()).unwrap();
    assert_matches(&parsed, &expected("pubmed_expected.json"));
}

#[test]
fn arxiv_fixture_matches_expected_records() {
    let parsed = parse_arxiv_atom(ARXIV, fetched_at()).unwrap();
    assert_matches(&parsed, &expected("arxiv_expected.json"));
}

#[test]
fn empty_arxiv_feed_has_no_documents() {
    let xml = include_bytes!("fixtures/arxiv_empty.xml");
    let parsed = parse_arxiv_atom(xml, fetched_at()).unwrap();
    assert!(parsed.documents.is_empty() && parsed.skipped.is_empty());
}

#[test]
fn parsing_is_deterministic() {
    assert_eq!(
        parse_pubmed_xml(PUBMED, fetched_at()).unwrap(),
        parse_pubmed_xml(PUBMED, fetched_at()).unwrap()
    );
    assert_eq!(
        parse_arxiv_atom(ARXIV, fetched_at()).unwrap(),
        parse_arxiv_atom(ARXIV, fetched_at()).unwrap()
    );
}

fn all_valid(parsed: &Parsed) -> bool {
    parsed.documents.iter().all(|d| d.validate().is_ok())
}

fn garble(bytes: &[u8], edits: &[(usize, u8)]) -> Vec<u8> {
    let mut out = bytes.to_vec();
    for &(pos, b) in edits {
        let i = pos % out.len();
        out[i] = b;
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn truncated_pubmed_never_yields_invalid_documents(cut in 0usize..PUBMED.len()) {
        if let Ok(p) = parse_pubmed_xml(&PUBMED[..cut], fetched_at()) {
            prop_assert!(all_valid(&p));
        }
    }

    #[test]
    fn truncated_arxiv_never_yields_invalid_documents(cut in 0usize..ARXIV.len()) {
        if let Ok(p) = parse_arxiv_atom(&ARXIV[..cut], fetched_at()) {
            prop_assert!(all_valid(&p));
        }
    }

    #[test]
    fn garbled_payloads_never_yield_invalid_documents(
        edits in proptest::collection::vec((any::<usize>(), any::<u8>()), 1..12)
    ) {
        if let Ok(p) = parse_pubmed_xml(&garble(PUBMED, &edits), fetched_at()) {
            prop_assert!(all_valid(&p));
        }
        if let Ok(p) = parse_arxiv_atom(&garble(ARXIV, &edits), fetched_at()) {
            prop_assert!(all_valid(&p));
        }
    }

    #[test]
    fn arbitrary_bytes_are_rejected_or_valid(bytes in proptest::collection::vec(any::<u8>(), 0..400)) {
        if let Ok(p) = parse_pubmed_xml(&bytes, fetched_at()) {
            prop_assert!(all_valid(&p));
        }
        if let Ok(p) = parse_arxiv_atom(&bytes, fetched_at()) {
            prop_assert!(all_valid(&p));
        }
    }
}
