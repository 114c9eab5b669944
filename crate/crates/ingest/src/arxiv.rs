//! arXiv API: Atom 1.0 feeds from the `query` endpoint.

use chrono::{DateTime, NaiveDate, Utc};
use litatlas_core::store::{Document, Source};
use roxmltree::Node;
use url::Url;

use crate::{
    accept, normalize_whitespace, plausible_year, FetchOutcome, FetchReport, Harvester,
    IngestError, Parsed, SkippedRecord, SourceQuery,
};

const ATOM: &str = "http://www.w3.org/2005/Atom";
const ARXIV: &str = "http://arxiv.org/schemas/atom";
const OPENSEARCH: &str = "http://a9.com/-/spec/opensearch/1.1/";

/// Entries requested per page.
pub const PAGE_SIZE: usize = 100;

fn malformed(detail: impl Into<String>) -> IngestError {
    IngestError::MalformedResponse(detail.into())
}

fn child<'a, 'i>(node: Node<'a, 'i>, ns: &str, name: &str) -> Option<Node<'a, 'i>> {
    node.children().find(|c| c.has_tag_name((ns, name)))
}

fn text_of(node: Option<Node<'_, '_>>) -> String {
    node.map(|n| {
        n.descendants()
            .filter(|d| d.is_text())
            .filter_map(|d| d.text())
            .collect::<String>()
    })
    .map(|s| normalize_whitespace(&s))
    .unwrap_or_default()
}

/// `http://arxiv.org/abs/1234.5678v2` → `1234.5678`;
/// `http://arxiv.org/abs/hep-th/9901001v1` → `hep-th/9901001`.
pub fn arxiv_id(entry_id: &str) -> Option<String> {
    let s = entry_id.trim();
    let s = match s.find("/abs/") {
        Some(i) => &s[i + 5..],
        None => s,
    };
    let s = s.trim_matches('/');
    let stripped = match s.rfind('v') {
        Some(i)
            if i > 0
                && i + 1 < s.len()
                && s[i + 1..].bytes().all(|b| b.is_ascii_digit())
                && s.as_bytes()[i - 1].is_ascii_digit() =>
        {
            &s[..i]
        }
        _ => s,
    };
    (!stripped.is_empty() && !stripped.contains(char::is_whitespace)).then(|| stripped.to_string())
}

/// A parsed feed page.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeedPage {
    pub parsed: Parsed,
    pub entries: usize,
    /// `opensearch:totalResults`, when present.
    pub total_results: Option<usize>,
}

pub fn parse_arxiv_atom(payload: &[u8], fetched_at: DateTime<Utc>) -> Result<Parsed, IngestError> {
    parse_feed(payload, fetched_at).map(|p| p.parsed)
}

pub fn parse_feed(payload: &[u8], fetched_at: DateTime<Utc>) -> Result<FeedPage, IngestError> {
    let text = std::str::from_utf8(payload).map_err(|e| malformed(format!("payload is not UTF-8: {e}")))?;
    let xml = roxmltree::Document::parse(text).map_err(|e| malformed(format!("invalid XML: {e}")))?;
    let feed = xml.root_element();
    if !feed.has_tag_name((ATOM, "feed")) {
        return Err(malformed(format!(
            "expected an Atom feed, found {}",
            feed.tag_name().name()
        )));
    }
    let total_results = child(feed, OPENSEARCH, "totalResults")
        .and_then(|n| n.text())
        .and_then(|t| t.trim().parse().ok());
    let mut page = FeedPage {
        total_results,
        ..FeedPage::default()
    };
    for entry in feed.children().filter(|c| c.has_tag_name((ATOM, "entry"))) {
        let raw_id = text_of(child(entry, ATOM, "id"));
        if raw_id.contains("/api/errors") {
            return Err(malformed(format!(
                "arXiv API error: {}",
                text_of(child(entry, ATOM, "summary"))
            )));
        }
        page.entries += 1;
        let Some(id) = arxiv_id(&raw_id) else {
            page.parsed.skipped.push(SkippedRecord {
                record: None,
                reason: "missing entry id".into(),
            });
            continue;
        };
        let venue = child(entry, ARXIV, "primary_category")
            .or_else(|| child(entry, ATOM, "category"))
            .and_then(|n| n.attribute("term"))
            .unwrap_or_default()
            .to_string();
        let year = text_of(child(entry, ATOM, "published"))
            .get(..4)
            .and_then(|y| y.parse().ok());
        let authors = entry
            .children()
            .filter(|c| c.has_tag_name((ATOM, "author")))
            .map(|a| text_of(child(a, ATOM, "name")))
            .filter(|n| !n.is_empty())
            .collect();
        let doc = Document {
            doc_id: format!("arxiv:{id}"),
            source: Source::Arxiv,
            title: text_of(child(entry, ATOM, "title")),
            abstract_text: text_of(child(entry, ATOM, "summary")),
            authors,
            venue,
            published_year: plausible_year(year),
            url: format!("https://arxiv.org/abs/{id}"),
            fetched_at,
        };
        accept(doc, &mut page.parsed);
    }
    Ok(page)
}

fn search_query(q: &SourceQuery) -> String {
    if q.date_from().is_none() && q.date_to().is_none() {
        return q.query_string().to_string();
    }
    let day = |d: NaiveDate| d.format("%Y%m%d").to_string();
    let from = q.date_from().map_or("19910101".to_string(), day);
    let to = q.date_to().map_or("29991231".to_string(), day);
    format!("({}) AND submittedDate:[{from}0000 TO {to}2359]", q.query_string())
}

pub fn query_url(base: &str, q: &SourceQuery, start: usize, max_results: usize) -> Result<String, IngestError> {
    Url::parse_with_params(
        base,
        &[
            ("search_query", search_query(q)),
            ("start", start.to_string()),
            ("max_results", max_results.to_string()),
            ("sortBy", "submittedDate".to_string()),
            ("sortOrder", "descending".to_string()),
        ],
    )
    .map(String::from)
    .map_err(|e| IngestError::InvalidQuery(format!("bad endpoint {base}: {e}")))
}

pub(crate) fn fetch(
    q: &SourceQuery,
    h: &Harvester<'_>,
    fetched_at: DateTime<Utc>,
) -> Result<FetchOutcome, IngestError> {
    let report = FetchReport {
        source: format!("arxiv: {}", q.query_string()),
        ..FetchReport::default()
    };
    let mut session = h.session(q.polite_delay(), report);
    let mut documents: Vec<Document> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    let mut start = 0;
    while documents.len() < q.max_results() {
        let want = PAGE_SIZE.min(q.max_results() - documents.len());
        let body = session.get(&query_url(&h.endpoints.arxiv, q, start, want)?)?;
        let page = parse_feed(&body, fetched_at)?;
        if page.entries == 0 {
            break;
        }
        session.report.records_seen += page.entries;
        session.report.skipped.extend(page.parsed.skipped);
        for d in page.parsed.documents {
            if documents.len() < q.max_results() && seen.insert(d.doc_id.clone()) {
                documents.push(d);
            }
        }
        start += page.entries;
        if page.total_results.is_some_and(|t| start >= t) {
            break;
        }
    }
    let mut report = session.report;
    report.documents = documents.len();
    Ok(FetchOutcome { documents, report })
}
