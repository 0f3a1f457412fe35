use std::collections::HashMap;
use std::io::Cursor;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use image::{ImageFormat, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use url::Url;

use super::CrawlError;
use crate::io::sha256_hex;

/// Per-host courtesy settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Politeness {
    /// Minimum gap between the end of one request and the start of the next to the same host.
    pub delay_ms: u64,
    pub user_agent: String,
    /// Extra attempts after the first for transient failures.
    pub retries: u32,
    /// First backoff; doubles per retry.
    pub backoff_ms: u64,
    pub timeout_ms: u64,
}

impl Default for Politeness {
    fn default() -> Self {
        Self {
            delay_ms: 1000,
            user_agent: concat!("mmkg-enrich/", env!("CARGO_PKG_VERSION"), " (image provenance crawler)").into(),
            retries: 3,
            backoff_ms: 500,
            timeout_ms: 30_000,
        }
    }
}

/// A fetched entity page.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageDocument {
    pub title: String,
    /// Final URL after redirects.
    pub url: String,
    pub status: u16,
    pub html: String,
    /// Transient failures absorbed before success.
    pub retries: u32,
}

pub trait Fetcher: Send + Sync {
    fn fetch_page(&self, entity_name: &str) -> Result<PageDocument, CrawlError>;
    fn fetch_bytes(&self, url: &str) -> Result<Vec<u8>, CrawlError>;
}

/// Fetches `entity_name`'s page through `fetcher`.
pub fn fetch_entity_page(fetcher: &dyn Fetcher, entity_name: &str) -> Result<PageDocument, CrawlError> {
    if entity_name.trim().is_empty() {
        return Err(CrawlError::EmptyName);
    }
    fetcher.fetch_page(entity_name)
}

/// Wiki title form: spaces to underscores, everything outside a safe set percent-encoded.
pub(crate) fn encode_title(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    for b in name.trim().replace(' ', "_").bytes() {
        if b.is_ascii_alphanumeric() || b"_-.~()',:!".contains(&b) {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

fn is_disambiguation(html: &str) -> bool {
    html.contains("id=\"disambigbox\"")
        || html.contains("class=\"disambiguation")
        || html.contains("name=\"disambiguation\"")
}

type HostSlot = Arc<Mutex<Option<Instant>>>;

/// HTTP fetcher that serializes requests per host and spaces them by the configured delay.
pub struct HttpFetcher {
    client: reqwest::blocking::Client,
    page_url_template: String,
    politeness: Politeness,
    hosts: Mutex<HashMap<String, HostSlot>>,
}

impl HttpFetcher {
    /// `page_url_template` contains `{title}`, e.g. `https://en.wikipedia.org/wiki/{title}`.
    pub fn new(page_url_template: impl Into<String>, politeness: Politeness) -> Result<Self, CrawlError> {
        let client = reqwest::blocking::Client::builder()
            .user_agent(politeness.user_agent.clone())
            .timeout(Duration::from_millis(politeness.timeout_ms))
            .build()
            .map_err(|e| CrawlError::Transient { url: String::new(), attempts: 0, message: e.to_string() })?;
        Ok(Self { client, page_url_template: page_url_template.into(), politeness, hosts: Mutex::new(HashMap::new()) })
    }

    pub fn wikipedia(politeness: Politeness) -> Result<Self, CrawlError> {
        Self::new("https://en.wikipedia.org/wiki/{title}", politeness)
    }

    fn slot(&self, host: &str) -> HostSlot {
        let mut hosts = self.hosts.lock().unwrap();
        hosts.entry(host.to_owned()).or_default().clone()
    }

    /// One request with retries. Returns (status, final url, body, retries used).
    fn get(&self, url: &str) -> Result<(u16, String, Vec<u8>, u32), CrawlError> {
        let parsed = Url::parse(url).map_err(|_| CrawlError::InvalidUrl(url.to_owned()))?;
        let host = parsed.host_str().unwrap_or_default().to_owned();
        let slot = self.slot(&host);
        let delay = Duration::from_millis(self.politeness.delay_ms);
        let mut last_message = String::new();
        for attempt in 0..=self.politeness.retries {
            if attempt > 0 {
                let backoff = self.politeness.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                thread::sleep(Duration::from_millis(backoff));
            }
            let mut last = slot.lock().unwrap();
            if let Some(prev) = *last {
                let ready = prev + delay;
                let now = Instant::now();
                if ready > now {
                    thread::sleep(ready - now);
                }
            }
            let outcome = self.client.get(parsed.clone()).send().and_then(|resp| {
                let status = resp.status().as_u16();
                let final_url = resp.url().to_string();
                resp.bytes().map(|b| (status, final_url, b.to_vec()))
            });
            *last = Some(Instant::now());
            drop(last);
            match outcome {
                Ok((status, final_url, body)) if status < 400 => return Ok((status, final_url, body, attempt)),
                Ok((status, _, _)) if status >= 500 || status == 429 => {
                    last_message = format!("status {status}");
                }
                Ok((404 | 410, _, _)) => return Err(CrawlError::NotFound(url.to_owned())),
                Ok((status, _, _)) => return Err(CrawlError::Permanent { url: url.to_owned(), status }),
                Err(e) => last_message = e.to_string(),
            }
            tracing::debug!(url, attempt, %last_message, "transient fetch failure");
        }
        Err(CrawlError::Transient { url: url.to_owned(), attempts: self.politeness.retries + 1, message: last_message })
    }
}

impl Fetcher for HttpFetcher {
    fn fetch_page(&self, entity_name: &str) -> Result<PageDocument, CrawlError> {
        let url = self.page_url_template.replace("{title}", &encode_title(entity_name));
        let (status, final_url, body, retries) = self.get(&url)?;
        let html = String::from_utf8_lossy(&body).into_owned();
        if is_disambiguation(&html) {
            return Err(CrawlError::NotFound(format!("{url} (disambiguation page)")));
        }
        Ok(PageDocument { title: entity_name.to_owned(), url: final_url, status, html, retries })
    }

    fn fetch_bytes(&self, url: &str) -> Result<Vec<u8>, CrawlError> {
        self.get(url).map(|(_, _, body, _)| body)
    }
}

/// Offline fetcher that synthesizes a page with one to three PNG images per entity.
/// Output depends only on the entity name.
#[derive(Clone, Debug, Default)]
pub struct MockFetcher;

const MOCK_BASE: &str = "https://mock.invalid";

impl Fetcher for MockFetcher {
    fn fetch_page(&self, entity_name: &str) -> Result<PageDocument, CrawlError> {
        let title = encode_title(entity_name);
        let digest = sha256_hex(entity_name.as_bytes());
        let count = 1 + usize::from_str_radix(&digest[..2], 16).unwrap_or(0) % 3;
        let mut html = format!("<html><head><title>{entity_name}</title></head><body><h1>{entity_name}</h1>\n");
        for i in 0..count {
            html.push_str(&format!(
                "<figure><img src=\"/media/{title}/{i}.png\" width=\"96\" height=\"96\" alt=\"{entity_name} {i}\">\
                 <figcaption>{entity_name} image {i}; author=Mock Author; date=2020-01-0{}</figcaption></figure>\n",
                i + 1
            ));
        }
        html.push_str("</body></html>\n");
        Ok(PageDocument {
            title: entity_name.to_owned(),
            url: format!("{MOCK_BASE}/wiki/{title}"),
            status: 200,
            html,
            retries: 0,
        })
    }

    fn fetch_bytes(&self, url: &str) -> Result<Vec<u8>, CrawlError> {
        if !url.starts_with(MOCK_BASE) {
            return Err(CrawlError::NotFound(url.to_owned()));
        }
        Ok(synthetic_png(url, 96, 96))
    }
}

/// Deterministic PNG with a colour derived from `seed`.
pub fn synthetic_png(seed: &str, width: u32, height: u32) -> Vec<u8> {
    let d = sha256_hex(seed.as_bytes());
    let byte = |i: usize| u8::from_str_radix(&d[i * 2..i * 2 + 2], 16).unwrap_or(0);
    let (r, g, b) = (byte(0), byte(1), byte(2));
    let img = RgbImage::from_fn(width, height, |x, y| {
        if (x / 8 + y / 8) % 2 == 0 {
            Rgb([r, g, b])
        } else {
            Rgb([255 - r, 255 - g, 255 - b])
        }
    });
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).expect("png encoding to memory");
    out.into_inner()
}
