//! Harvesting of paper abstracts from PubMed E-utilities and the arXiv API.
//!
//! Network access goes through the [`Transport`] trait and waiting through
//! [`Pacer`], so every client can run offline against recorded responses.
//! Parsers are pure functions from response bytes to [`Document`]s.

pub mod arxiv;
pub mod pubmed;
pub mod transport;

use std::time::Duration;

use chrono::{DateTime, NaiveDate, Utc};
use litatlas_core::store::Document;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use arxiv::parse_arxiv_atom;
pub use pubmed::parse_pubmed_xml;
pub use transport::{CassetteEntry, CassetteTransport, HttpResponse, HttpTransport, Transport};

#[derive(Debug, Error, PartialEq)]
pub enum IngestError {
    #[error("invalid source query: {0}")]
    InvalidQuery(String),
    #[error("request to {url} failed{}: {detail}", status.map(|s| format!(" with status {s}")).unwrap_or_default())]
    TransportError {
        status: Option<u16>,
        url: String,
        detail: String,
    },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Pubmed,
    Arxiv,
}

impl SourceKind {
    /// Request spacing that keeps within each API's published etiquette.
    pub fn default_delay_ms(self) -> u64 {
        match self {
            SourceKind::Pubmed => 350,
            SourceKind::Arxiv => 3000,
        }
    }
}

/// One harvesting request against a source API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SourceQueryFile", into = "SourceQueryFile")]
pub struct SourceQuery {
    source: SourceKind,
    query_string: String,
    max_results: usize,
    date_from: Option<NaiveDate>,
    date_to: Option<NaiveDate>,
    polite_delay_ms: u64,
}

#[derive(Serialize, Deserialize)]
struct SourceQueryFile {
    source: SourceKind,
    #[serde(alias = "query")]
    query_string: String,
    max_results: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    date_from: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    date_to: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    polite_delay_ms: Option<u64>,
}

impl TryFrom<SourceQueryFile> for SourceQuery {
    type Error = IngestError;
    fn try_from(f: SourceQueryFile) -> Result<Self, IngestError> {
        SourceQuery::new(f.source, f.query_string, f.max_results)?
            .with_dates(f.date_from, f.date_to)
            .map(|q| match f.polite_delay_ms {
                Some(ms) => q.with_delay_ms(ms),
                None => q,
            })
    }
}

impl From<SourceQuery> for SourceQueryFile {
    fn from(q: SourceQuery) -> Self {
        SourceQueryFile {
            source: q.source,
            query_string: q.query_string,
            max_results: q.max_results,
            date_from: q.date_from,
            date_to: q.date_to,
            polite_delay_ms: Some(q.polite_delay_ms),
        }
    }
}

impl SourceQuery {
    pub fn new(
        source: SourceKind,
        query_string: impl Into<String>,
        max_results: usize,
    ) -> Result<Self, IngestError> {
        let query_string = query_string.into();
        if max_results == 0 {
            return Err(IngestError::InvalidQuery("max_results must be >= 1".into()));
        }
        if query_string.trim().is_empty() {
            return Err(IngestError::InvalidQuery("query_string is empty".into()));
        }
        Ok(SourceQuery {
            source,
            query_string,
            max_results,
            date_from: None,
            date_to: None,
            polite_delay_ms: source.default_delay_ms(),
        })
    }

    pub fn with_dates(
        mut self,
        date_from: Option<NaiveDate>,
        date_to: Option<NaiveDate>,
    ) -> Result<Self, IngestError> {
        if let (Some(a), Some(b)) = (date_from, date_to) {
            if a > b {
                return Err(IngestError::InvalidQuery(format!(
                    "date_from {a} is after date_to {b}"
                )));
            }
        }
        self.date_from = date_from;
        self.date_to = date_to;
        Ok(self)
    }

    pub fn with_delay_ms(mut self, ms: u64) -> Self {
        self.polite_delay_ms = ms;
        self
    }

    pub fn source(&self) -> SourceKind {
        self.source
    }

    pub fn query_string(&self) -> &str {
        &self.query_string
    }

    pub fn max_results(&self) -> usize {
        self.max_results
    }

    pub fn date_from(&self) -> Option<NaiveDate> {
        self.date_from
    }

    pub fn date_to(&self) -> Option<NaiveDate> {
        self.date_to
    }

    pub fn polite_delay(&self) -> Duration {
        Duration::from_millis(self.polite_delay_ms)
    }
}

/// Sleeps between requests. Tests substitute a recorder.
pub trait Pacer {
    fn pause(&self, duration: Duration);
}

pub struct ThreadSleep;

impl Pacer for ThreadSleep {
    fn pause(&self, duration: Duration) {
        std::thread::sleep(duration);
    }
}

/// Records requested pauses without waiting.
#[derive(Default)]
pub struct RecordingPacer {
    pauses: std::sync::Mutex<Vec<Duration>>,
}

impl RecordingPacer {
    pub fn pauses(&self) -> Vec<Duration> {
        self.pauses.lock().unwrap().clone()
    }
}

impl Pacer for RecordingPacer {
    fn pause(&self, duration: Duration) {
        self.pauses.lock().unwrap().push(duration);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Total attempts per request, including the first.
    pub attempts: u32,
    /// Wait before the first retry; doubled for each further retry.
    pub base_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_backoff: Duration::from_secs(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endpoints {
    /// E-utilities base, without the trailing `esearch.fcgi`.
    pub eutils: String,
    /// arXiv `query` endpoint.
    pub arxiv: String,
}

impl Default for Endpoints {
    fn default() -> Self {
        Endpoints {
            eutils: "https://eutils.ncbi.nlm.nih.gov/entrez/eutils".into(),
            arxiv: "https://export.arxiv.org/api/query".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedRecord {
    /// Source-native id when one could be read.
    pub record: Option<String>,
    pub reason: String,
}

/// Output of a parser: documents that passed validation plus everything
/// that was dropped and why.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Parsed {
    pub documents: Vec<Document>,
    pub skipped: Vec<SkippedRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchReport {
    pub source: String,
    pub requests: usize,
    pub retries: usize,
    pub records_seen: usize,
    pub documents: usize,
    pub skipped: Vec<SkippedRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FetchOutcome {
    pub documents: Vec<Document>,
    pub report: FetchReport,
}

/// Uniform contract for anything that yields documents: the built-in API
/// clients and custom scrapers alike.
pub trait DocumentSource {
    fn label(&self) -> String;
    fn fetch(&self, harvester: &Harvester<'_>, fetched_at: DateTime<Utc>)
        -> Result<FetchOutcome, IngestError>;
}

impl DocumentSource for SourceQuery {
    fn label(&self) -> String {
        let kind = match self.source {
            SourceKind::Pubmed => "pubmed",
            SourceKind::Arxiv => "arxiv",
        };
        format!("{kind}: {}", self.query_string)
    }

    fn fetch(
        &self,
        harvester: &Harvester<'_>,
        fetched_at: DateTime<Utc>,
    ) -> Result<FetchOutcome, IngestError> {
        match self.source {
            SourceKind::Pubmed => pubmed::fetch(self, harvester, fetched_at),
            SourceKind::Arxiv => arxiv::fetch(self, harvester, fetched_at),
        }
    }
}

/// Transport, pacing, endpoints and retry policy shared by the clients.
pub struct Harvester<'a> {
    pub transport: &'a dyn Transport,
    pub pacer: &'a dyn Pacer,
    pub endpoints: Endpoints,
    pub retry: RetryPolicy,
}

impl<'a> Harvester<'a> {
    pub fn new(transport: &'a dyn Transport, pacer: &'a dyn Pacer) -> Self {
        Harvester {
            transport,
            pacer,
            endpoints: Endpoints::default(),
            retry: RetryPolicy::default(),
        }
    }

    pub fn fetch(
        &self,
        source: &dyn DocumentSource,
        fetched_at: DateTime<Utc>,
    ) -> Result<FetchOutcome, IngestError> {
        source.fetch(self, fetched_at)
    }

    pub(crate) fn session(&self, delay: Duration, report: FetchReport) -> Session<'_, 'a> {
        Session {
            harvester: self,
            delay,
            first: true,
            report,
        }
    }
}

/// Fetches with real sleeps and the default endpoints.
pub fn fetch(
    query: &SourceQuery,
    transport: &dyn Transport,
    fetched_at: DateTime<Utc>,
) -> Result<FetchOutcome, IngestError> {
    Harvester::new(transport, &ThreadSleep).fetch(query, fetched_at)
}

/// Sequential requests for one fetch: spacing, retries and accounting.
pub(crate) struct Session<'h, 'a> {
    harvester: &'h Harvester<'a>,
    delay: Duration,
    first: bool,
    pub(crate) report: FetchReport,
}

impl Session<'_, '_> {
    pub(crate) fn get(&mut self, url: &str) -> Result<Vec<u8>, IngestError> {
        let h = self.harvester;
        if !self.first && !self.delay.is_zero() {
            h.pacer.pause(self.delay);
        }
        self.first = false;
        let mut last_status = None;
        let mut last_detail = String::new();
        for attempt in 0..h.retry.attempts.max(1) {
            if attempt > 0 {
                self.report.retries += 1;
                h.pacer.pause(h.retry.base_backoff * 2u32.pow(attempt - 1));
            }
            self.report.requests += 1;
            match h.transport.get(url) {
                Ok(r) if (200..300).contains(&r.status) => return Ok(r.body),
                Ok(r) if r.status >= 500 => {
                    tracing::warn!(url, status = r.status, attempt, "server error, retrying");
                    last_status = Some(r.status);
                    last_detail = "server error".into();
                }
                Ok(r) => {
                    return Err(IngestError::TransportError {
                        status: Some(r.status),
                        url: url.to_string(),
                        detail: String::from_utf8_lossy(&r.body).chars().take(200).collect(),
                    })
                }
                Err(detail) => {
                    tracing::warn!(url, %detail, attempt, "request failed, retrying");
                    last_status = None;
                    last_detail = detail;
                }
            }
        }
        Err(IngestError::TransportError {
            status: last_status,
            url: url.to_string(),
            detail: format!("giving up after {} attempts: {last_detail}", h.retry.attempts),
        })
    }
}

/// Collapses every whitespace run to a single space and trims.
pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Keeps documents that pass validation; the rest become skipped records.
pub(crate) fn accept(doc: Document, parsed: &mut Parsed) {
    match doc.validate() {
        Ok(()) => parsed.documents.push(doc),
        Err(e) => {
            tracing::info!(doc_id = %doc.doc_id, error = %e, "skipping record");
            let reason = match e {
                litatlas_core::store::StoreError::InvalidDocument { reason, .. } => reason,
                other => other.to_string(),
            };
            parsed.skipped.push(SkippedRecord {
                record: Some(doc.doc_id.clone()),
                reason,
            });
        }
    }
}

/// Year within the accepted range, or `None`.
pub(crate) fn plausible_year(year: Option<i32>) -> Option<i32> {
    use chrono::Datelike;
    let max = Utc::now().year() + 1;
    year.filter(|y| (litatlas_core::store::MIN_PUBLISHED_YEAR..=max).contains(y))
}
