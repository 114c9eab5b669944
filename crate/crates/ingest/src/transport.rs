//! HTTP access behind a small trait: a blocking reqwest client for real use
//! and a cassette player for offline runs.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::Deserialize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: Vec<u8>,
}

/// A GET-only HTTP client. `Err` means no response arrived (timeout,
/// connection failure); such errors are retried like 5xx responses.
pub trait Transport: Send + Sync {
    fn get(&self, url: &str) -> Result<HttpResponse, String>;
}

pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Result<Self, String> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .user_agent(concat!("litatlas/", env!("CARGO_PKG_VERSION")))
            .build()
            .map_err(|e| e.to_string())?;
        Ok(HttpTransport { client })
    }
}

impl Transport for HttpTransport {
    fn get(&self, url: &str) -> Result<HttpResponse, String> {
        let resp = self.client.get(url).send().map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.bytes().map_err(|e| e.to_string())?.to_vec();
        Ok(HttpResponse { status, body })
    }
}

/// One recorded exchange. `url_contains`, when set, must be a substring of
/// the requested URL.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CassetteEntry {
    pub url_contains: Option<String>,
    pub status: u16,
    pub body: Vec<u8>,
}

impl CassetteEntry {
    pub fn ok(body: impl Into<Vec<u8>>) -> Self {
        CassetteEntry {
            url_contains: None,
            status: 200,
            body: body.into(),
        }
    }

    pub fn status(status: u16) -> Self {
        CassetteEntry {
            url_contains: None,
            status,
            body: Vec::new(),
        }
    }

    pub fn expecting(mut self, fragment: &str) -> Self {
        self.url_contains = Some(fragment.to_string());
        self
    }
}

#[derive(Deserialize)]
struct CassetteFileEntry {
    #[serde(default)]
    url_contains: Option<String>,
    #[serde(default = "ok_status")]
    status: u16,
    #[serde(default)]
    body_file: Option<String>,
}

fn ok_status() -> u16 {
    200
}

/// Replays recorded responses in order and remembers every requested URL.
#[derive(Debug, Default)]
pub struct CassetteTransport {
    entries: Mutex<VecDeque<CassetteEntry>>,
    requested: Mutex<Vec<String>>,
}

impl CassetteTransport {
    pub fn new(entries: impl IntoIterator<Item = CassetteEntry>) -> Self {
        CassetteTransport {
            entries: Mutex::new(entries.into_iter().collect()),
            requested: Mutex::new(Vec::new()),
        }
    }

    /// Loads `dir/cassette.json`: a list of
    /// `{url_contains?, status?, body_file?}` with bodies relative to `dir`.
    pub fn load(dir: &Path) -> Result<Self, String> {
        let path = dir.join("cassette.json");
        let text = std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        let raw: Vec<CassetteFileEntry> =
            serde_json::from_slice(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut entries = Vec::with_capacity(raw.len());
        for e in raw {
            let body = match e.body_file {
                Some(f) => std::fs::read(dir.join(&f)).map_err(|err| format!("{f}: {err}"))?,
                None => Vec::new(),
            };
            entries.push(CassetteEntry {
                url_contains: e.url_contains,
                status: e.status,
                body,
            });
        }
        Ok(Self::new(entries))
    }

    pub fn requested(&self) -> Vec<String> {
        self.requested.lock().unwrap().clone()
    }

    pub fn remaining(&self) -> usize {
        self.entries.lock().unwrap().len()
    }
}

impl Transport for CassetteTransport {
    fn get(&self, url: &str) -> Result<HttpResponse, String> {
        self.requested.lock().unwrap().push(url.to_string());
        let entry = self
            .entries
            .lock()
            .unwrap()
            .pop_front()
            .ok_or_else(|| format!("cassette exhausted at {url}"))?;
        if let Some(fragment) = &entry.url_contains {
            if !url.contains(fragment.as_str()) {
                return Err(format!("cassette expected a URL containing {fragment:?}, got {url}"));
            }
        }
        Ok(HttpResponse {
            status: entry.status,
            body: entry.body,
        })
    }
}
