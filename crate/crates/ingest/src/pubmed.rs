//! PubMed E-utilities: `esearch` for PMIDs, `efetch` for the records.

use chrono::{DateTime, NaiveDate, Utc};
use litatlas_core::store::{Document, Source};
use roxmltree::{Node, ParsingOptions};
use serde::Deserialize;
use url::Url;

use crate::{
    accept, normalize_whitespace, plausible_year, FetchOutcome, FetchReport, Harvester,
    IngestError, Parsed, SkippedRecord, SourceQuery,
};

/// PMIDs requested per esearch/efetch round trip.
pub const PAGE_SIZE: usize = 200;

fn malformed(detail: impl Into<String>) -> IngestError {
    IngestError::MalformedResponse(detail.into())
}

fn child<'a, 'i>(node: Node<'a, 'i>, name: &str) -> Option<Node<'a, 'i>> {
    node.children().find(|c| c.has_tag_name(name))
}

fn path<'a, 'i>(node: Node<'a, 'i>, names: &[&str]) -> Option<Node<'a, 'i>> {
    names.iter().try_fold(node, |n, name| child(n, name))
}

/// Text of an element including inline markup such as `<i>` or `<sup>`.
fn deep_text(node: Node<'_, '_>) -> String {
    node.descendants()
        .filter(|n| n.is_text())
        .filter_map(|n| n.text())
        .collect()
}

fn parse_document(payload: &[u8]) -> Result<String, IngestError> {
    std::str::from_utf8(payload)
        .map(str::to_owned)
        .map_err(|e| malformed(format!("payload is not UTF-8: {e}")))
}

/// Parses an `efetch` XML result set (`PubmedArticleSet`).
///
/// Abstract sections are joined with single spaces and their labels are
/// dropped. Records without a PMID or abstract are skipped and reported.
pub fn parse_pubmed_xml(payload: &[u8], fetched_at: DateTime<Utc>) -> Result<Parsed, IngestError> {
    let text = parse_document(payload)?;
    let opts = ParsingOptions {
        allow_dtd: true,
        ..ParsingOptions::default()
    };
    let xml = roxmltree::Document::parse_with_options(&text, opts)
        .map_err(|e| malformed(format!("invalid XML: {e}")))?;
    let root = xml.root_element();
    if !root.has_tag_name("PubmedArticleSet") {
        return Err(malformed(format!(
            "expected PubmedArticleSet, found {}",
            root.tag_name().name()
        )));
    }
    let mut parsed = Parsed::default();
    for record in root.children().filter(Node::is_element) {
        match record.tag_name().name() {
            "PubmedArticle" => match extract(record, fetched_at) {
                Ok(doc) => accept(doc, &mut parsed),
                Err(skip) => {
                    tracing::info!(record = ?skip.record, reason = %skip.reason, "skipping record");
                    parsed.skipped.push(skip);
                }
            },
            "PubmedBookArticle" => parsed.skipped.push(SkippedRecord {
                record: path(record, &["BookDocument", "PMID"]).and_then(|n| n.text()).map(str::to_owned),
                reason: "book records are not supported".into(),
            }),
            _ => {}
        }
    }
    Ok(parsed)
}

fn extract(record: Node<'_, '_>, fetched_at: DateTime<Utc>) -> Result<Document, SkippedRecord> {
    let citation = child(record, "MedlineCitation");
    let pmid = citation
        .and_then(|c| child(c, "PMID"))
        .map(deep_text)
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty() && s.chars().all(|c| c.is_ascii_digit()));
    let Some(pmid) = pmid else {
        return Err(SkippedRecord {
            record: None,
            reason: "missing PMID".into(),
        });
    };
    let skip = |reason: &str| SkippedRecord {
        record: Some(pmid.clone()),
        reason: reason.to_string(),
    };
    let article = citation
        .and_then(|c| child(c, "Article"))
        .ok_or_else(|| skip("missing Article"))?;

    let sections: Vec<String> = child(article, "Abstract")
        .into_iter()
        .flat_map(|a| a.children().filter(|n| n.has_tag_name("AbstractText")))
        .map(|n| normalize_whitespace(&deep_text(n)))
        .filter(|s| !s.is_empty())
        .collect();
    if sections.is_empty() {
        return Err(skip("missing AbstractText"));
    }
    let title = child(article, "ArticleTitle")
        .map(|n| normalize_whitespace(&deep_text(n)))
        .unwrap_or_default();

    let authors = child(article, "AuthorList")
        .into_iter()
        .flat_map(|l| l.children().filter(|n| n.has_tag_name("Author")))
        .filter_map(author_name)
        .collect();
    let journal = child(article, "Journal");
    let venue = journal
        .and_then(|j| child(j, "Title"))
        .map(|n| normalize_whitespace(&deep_text(n)))
        .unwrap_or_default();
    let year = journal
        .and_then(|j| path(j, &["JournalIssue", "PubDate"]))
        .and_then(pub_date_year)
        .or_else(|| path(article, &["ArticleDate", "Year"]).and_then(|n| leading_year(&deep_text(n))));

    Ok(Document {
        doc_id: format!("pubmed:{pmid}"),
        source: Source::Pubmed,
        title,
        abstract_text: sections.join(" "),
        authors,
        venue,
        published_year: plausible_year(year),
        url: format!("https://pubmed.ncbi.nlm.nih.gov/{pmid}/"),
        fetched_at,
    })
}

fn author_name(author: Node<'_, '_>) -> Option<String> {
    if let Some(c) = child(author, "CollectiveName") {
        let name = normalize_whitespace(&deep_text(c));
        return (!name.is_empty()).then_some(name);
    }
    let last = child(author, "LastName").map(deep_text)?;
    let first = child(author, "ForeName")
        .or_else(|| child(author, "Initials"))
        .map(deep_text)
        .unwrap_or_default();
    let name = normalize_whitespace(&format!("{first} {last}"));
    (!name.is_empty()).then_some(name)
}

fn pub_date_year(pub_date: Node<'_, '_>) -> Option<i32> {
    child(pub_date, "Year")
        .and_then(|n| leading_year(&deep_text(n)))
        .or_else(|| child(pub_date, "MedlineDate").and_then(|n| leading_year(&deep_text(n))))
}

/// First four-digit run, e.g. `"1998 Dec-1999 Jan"` → 1998.
fn leading_year(s: &str) -> Option<i32> {
    let bytes = s.as_bytes();
    (0..bytes.len().saturating_sub(3))
        .find(|&i| {
            bytes[i..i + 4].iter().all(u8::is_ascii_digit)
                && (i + 4 == bytes.len() || !bytes[i + 4].is_ascii_digit())
                && (i == 0 || !bytes[i - 1].is_ascii_digit())
        })
        .and_then(|i| s[i..i + 4].parse().ok())
}

#[derive(Debug, Deserialize)]
struct EsearchEnvelope {
    esearchresult: EsearchResult,
}

#[derive(Debug, Deserialize)]
struct EsearchResult {
    #[serde(default)]
    count: Option<String>,
    #[serde(default)]
    idlist: Vec<String>,
    #[serde(default, rename = "ERROR")]
    error: Option<String>,
}

/// `(total hit count, PMIDs of this page)` from an esearch JSON response.
pub fn parse_esearch_json(payload: &[u8]) -> Result<(usize, Vec<String>), IngestError> {
    let env: EsearchEnvelope =
        serde_json::from_slice(payload).map_err(|e| malformed(format!("esearch: {e}")))?;
    let r = env.esearchresult;
    if let Some(err) = r.error {
        return Err(malformed(format!("esearch error: {err}")));
    }
    let count = r
        .count
        .as_deref()
        .unwrap_or("0")
        .parse()
        .map_err(|_| malformed("esearch: non-numeric count"))?;
    if r.idlist.iter().any(|id| id.is_empty() || !id.chars().all(|c| c.is_ascii_digit())) {
        return Err(malformed("esearch: non-numeric PMID"));
    }
    Ok((count, r.idlist))
}

fn eutils_url(base: &str, endpoint: &str, params: &[(&str, String)]) -> Result<String, IngestError> {
    let base = format!("{}/{endpoint}", base.trim_end_matches('/'));
    Url::parse_with_params(&base, params)
        .map(String::from)
        .map_err(|e| IngestError::InvalidQuery(format!("bad endpoint {base}: {e}")))
}

fn pdat(d: NaiveDate) -> String {
    d.format("%Y/%m/%d").to_string()
}

pub fn esearch_url(base: &str, q: &SourceQuery, retstart: usize, retmax: usize) -> Result<String, IngestError> {
    let mut params = vec![
        ("db", "pubmed".to_string()),
        ("term", q.query_string().to_string()),
        ("retstart", retstart.to_string()),
        ("retmax", retmax.to_string()),
        ("retmode", "json".to_string()),
        ("tool", "litatlas".to_string()),
    ];
    if q.date_from().is_some() || q.date_to().is_some() {
        let from = q.date_from().map_or("1800/01/01".to_string(), pdat);
        let to = q.date_to().map_or("3000/12/31".to_string(), pdat);
        params.extend([
            ("datetype", "pdat".to_string()),
            ("mindate", from),
            ("maxdate", to),
        ]);
    }
    eutils_url(base, "esearch.fcgi", &params)
}

pub fn efetch_url(base: &str, pmids: &[String]) -> Result<String, IngestError> {
    eutils_url(
        base,
        "efetch.fcgi",
        &[
            ("db", "pubmed".to_string()),
            ("id", pmids.join(",")),
            ("rettype", "abstract".to_string()),
            ("retmode", "xml".to_string()),
            ("tool", "litatlas".to_string()),
        ],
    )
}

pub(crate) fn fetch(
    q: &SourceQuery,
    h: &Harvester<'_>,
    fetched_at: DateTime<Utc>,
) -> Result<FetchOutcome, IngestError> {
    let report = FetchReport {
        source: format!("pubmed: {}", q.query_string()),
        ..FetchReport::default()
    };
    let mut session = h.session(q.polite_delay(), report);
    let mut documents: Vec<Document> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    let mut retstart = 0;
    while documents.len() < q.max_results() {
        let want = PAGE_SIZE.min(q.max_results() - documents.len());
        let body = session.get(&esearch_url(&h.endpoints.eutils, q, retstart, want)?)?;
        let (count, ids) = parse_esearch_json(&body)?;
        if ids.is_empty() {
            break;
        }
        let xml = session.get(&efetch_url(&h.endpoints.eutils, &ids)?)?;
        let parsed = parse_pubmed_xml(&xml, fetched_at)?;
        session.report.records_seen += parsed.documents.len() + parsed.skipped.len();
        session.report.skipped.extend(parsed.skipped);
        for d in parsed.documents {
            if documents.len() < q.max_results() && seen.insert(d.doc_id.clone()) {
                documents.push(d);
            }
        }
        retstart += ids.len();
        if retstart >= count {
            break;
        }
    }
    let mut report = session.report;
    report.documents = documents.len();
    Ok(FetchOutcome { documents, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn t() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 5, 1, 0, 0, 0).unwrap()
    }

    fn set(records: &str) -> String {
        format!("<?xml version=\"1.0\"?>\n<PubmedArticleSet>{records}</PubmedArticleSet>")
    }

    fn record(pmid: &str, abstract_xml: &str) -> String {
        format!(
            "<PubmedArticle><MedlineCitation><PMID Version=\"1\">{pmid}</PMID><Article>\
             <Journal><JournalIssue><PubDate><Year>2016</Year></PubDate></JournalIssue>\
             <Title>Test Journal</Title></Journal><ArticleTitle>T {pmid}</ArticleTitle>\
             {abstract_xml}</Article></MedlineCitation></PubmedArticle>"
        )
    }

    #[test]
    fn labeled_sections_join_with_a_space() {
        let xml = set(&record(
            "1",
            "<Abstract><AbstractText Label=\"BACKGROUND\">Cells grow.</AbstractText>\
             <AbstractText Label=\"METHODS\">We  counted\n them.</AbstractText></Abstract>",
        ));
        let p = parse_pubmed_xml(xml.as_bytes(), t()).unwrap();
        assert_eq!(p.documents[0].abstract_text, "Cells grow. We counted them.");
        assert_eq!(p.documents[0].doc_id, "pubmed:1");
        assert_eq!(p.documents[0].published_year, Some(2016));
    }

    #[test]
    fn record_without_pmid_is_skipped() {
        let xml = set(&record("", "<Abstract><AbstractText>x y</AbstractText></Abstract>"));
        let p = parse_pubmed_xml(xml.as_bytes(), t()).unwrap();
        assert!(p.documents.is_empty());
        assert_eq!(p.skipped[0].reason, "missing PMID");
    }

    #[test]
    fn empty_set_and_wrong_root() {
        assert!(parse_pubmed_xml(set("").as_bytes(), t()).unwrap().documents.is_empty());
        assert!(matches!(
            parse_pubmed_xml(b"<eSearchResult/>", t()),
            Err(IngestError::MalformedResponse(_))
        ));
        assert!(parse_pubmed_xml(b"<PubmedArticleSet><Pubmed", t()).is_err());
    }

    #[test]
    fn inline_markup_and_medline_dates() {
        let xml = set(
            "<PubmedArticle><MedlineCitation><PMID>7</PMID><Article><Journal><JournalIssue>\
             <PubDate><MedlineDate>1998 Dec-1999 Jan</MedlineDate></PubDate></JournalIssue>\
             </Journal><ArticleTitle>Role of <i>TP53</i> in tumours</ArticleTitle>\
             <Abstract><AbstractText>H<sub>2</sub>O levels.</AbstractText></Abstract>\
             <AuthorList><Author><LastName>Curie</LastName><ForeName>Marie</ForeName></Author>\
             <Author><CollectiveName>The Study Group</CollectiveName></Author></AuthorList>\
             </Article></MedlineCitation></PubmedArticle>",
        );
        let d = &parse_pubmed_xml(xml.as_bytes(), t()).unwrap().documents[0];
        assert_eq!(d.title, "Role of TP53 in tumours");
        assert_eq!(d.abstract_text, "H2O levels.");
        assert_eq!(d.published_year, Some(1998));
        assert_eq!(d.authors, ["Marie Curie", "The Study Group"]);
    }

    #[test]
    fn leading_year_cases() {
        assert_eq!(leading_year("2019"), Some(2019));
        assert_eq!(leading_year("Spring 2003"), Some(2003));
        assert_eq!(leading_year("12345"), None);
        assert_eq!(leading_year(""), None);
    }

    #[test]
    fn esearch_parsing() {
        let (n, ids) = parse_esearch_json(
            br#"{"header":{},"esearchresult":{"count":"3","retmax":"3","idlist":["1","22","333"]}}"#,
        )
        .unwrap();
        assert_eq!((n, ids.len()), (3, 3));
        assert!(parse_esearch_json(br#"{"esearchresult":{"ERROR":"bad term"}}"#).is_err());
        assert!(parse_esearch_json(b"<html>").is_err());
    }

    #[test]
    fn urls_carry_paging_and_dates() {
        let q = SourceQuery::new(crate::SourceKind::Pubmed, "breast cancer[tiab]", 10)
            .unwrap()
            .with_dates(Some(NaiveDate::from_ymd_opt(2015, 1, 1).unwrap()), None)
            .unwrap();
        let u = esearch_url("https://e.test/eutils/", &q, 200, 50).unwrap();
        assert!(u.starts_with("https://e.test/eutils/esearch.fcgi?"));
        assert!(u.contains("term=breast+cancer%5Btiab%5D"));
        assert!(u.contains("retstart=200") && u.contains("retmax=50"));
        assert!(u.contains("mindate=2015%2F01%2F01") && u.contains("maxdate=3000%2F12%2F31"));
        let f = efetch_url("https://e.test/eutils", &["1".into(), "2".into()]).unwrap();
        assert!(f.contains("id=1%2C2") && f.contains("rettype=abstract") && f.contains("retmode=xml"));
    }
}
