//! Local stub servers for tests: a wiki-like page site and caption/LLM providers.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::Path as FsPath;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Redirect, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde_json::{json, Value};
use tokio::sync::oneshot;

use crate::crawler::synthetic_png;
use crate::io::sha256_hex;
use crate::kgdata::{write_dataset, Dataset, Entity, Qid, Triple};

/// A router served on 127.0.0.1 from a background thread until dropped.
pub struct StubServer {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn spawn(app: Router) -> Self {
        let std_listener = std::net::TcpListener::bind("127.0.0.1:0").expect("bind stub server");
        std_listener.set_nonblocking(true).unwrap();
        let addr = std_listener.local_addr().unwrap();
        let (tx, rx) = oneshot::channel();
        let thread = thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(std_listener).unwrap();
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        rx.await.ok();
                    })
                    .await
                    .unwrap();
            });
        });
        Self { addr, shutdown: Some(tx), thread: Some(thread) }
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            tx.send(()).ok();
        }
        if let Some(t) = self.thread.take() {
            t.join().ok();
        }
    }
}

#[derive(Clone, Debug)]
pub enum StubPage {
    Html(String),
    NotFound,
    Disambiguation,
    /// Permanent redirect to another title.
    Redirect(String),
    /// Fails with 503 `failures` times, then serves the HTML.
    Flaky {
        failures: usize,
        html: String,
    },
    /// Always 503.
    Down,
}

/// Server-side timing of one request.
#[derive(Clone, Debug)]
pub struct RequestLog {
    pub path: String,
    pub arrived: Instant,
    pub finished: Instant,
}

#[derive(Default)]
struct SiteInner {
    pages: HashMap<String, StubPage>,
    images: HashMap<String, Vec<u8>>,
    hits: Mutex<HashMap<String, usize>>,
    log: Mutex<Vec<RequestLog>>,
}

/// Wiki-like site: pages at `/wiki/{title}`, images at `/img/{name}`.
#[derive(Clone, Default)]
pub struct PageSite {
    inner: Arc<SiteInner>,
}

pub struct PageSiteBuilder {
    inner: SiteInner,
}

impl PageSite {
    pub fn builder() -> PageSiteBuilder {
        PageSiteBuilder { inner: SiteInner::default() }
    }

    pub fn log(&self) -> Vec<RequestLog> {
        self.inner.log.lock().unwrap().clone()
    }

    pub fn image_requests(&self) -> usize {
        self.log().iter().filter(|r| r.path.starts_with("/img/")).count()
    }

    pub fn page_requests(&self) -> usize {
        self.log().iter().filter(|r| r.path.starts_with("/wiki/")).count()
    }

    pub fn router(&self) -> Router {
        Router::new().route("/wiki/*title", get(page)).route("/img/*name", get(image)).with_state(self.clone())
    }

    pub fn spawn(&self) -> StubServer {
        StubServer::spawn(self.router())
    }
}

impl PageSiteBuilder {
    pub fn page(mut self, title: &str, page: StubPage) -> Self {
        self.inner.pages.insert(title.to_owned(), page);
        self
    }

    pub fn image(mut self, name: &str, bytes: Vec<u8>) -> Self {
        self.inner.images.insert(name.to_owned(), bytes);
        self
    }

    /// A page whose figures point at `/img/{title}_{i}.png`, each registered as a
    /// `size`×`size` PNG.
    pub fn entity_page(mut self, title: &str, images: usize, size: u32) -> Self {
        let mut html = format!("<html><body><h1>{title}</h1>\n");
        for i in 0..images {
            let name = format!("{title}_{i}.png");
            html.push_str(&format!(
                "<figure><img src=\"/img/{name}\" width=\"{size}\" height=\"{size}\">\
                 <figcaption>view {i}; author=Stub Author; date=2021-05-0{}</figcaption></figure>\n",
                i % 9 + 1
            ));
            self.inner.images.insert(name.clone(), synthetic_png(&name, size, size));
        }
        html.push_str("</body></html>\n");
        self.inner.pages.insert(title.to_owned(), StubPage::Html(html));
        self
    }

    pub fn build(self) -> PageSite {
        PageSite { inner: Arc::new(self.inner) }
    }
}

fn finish(site: &PageSite, path: String, arrived: Instant, resp: Response) -> Response {
    site.inner.log.lock().unwrap().push(RequestLog { path, arrived, finished: Instant::now() });
    resp
}

async fn page(State(site): State<PageSite>, Path(title): Path<String>) -> Response {
    let arrived = Instant::now();
    let path = format!("/wiki/{title}");
    let count = {
        let mut hits = site.inner.hits.lock().unwrap();
        let c = hits.entry(title.clone()).or_default();
        *c += 1;
        *c - 1
    };
    let html = |body: &str| ([(header::CONTENT_TYPE, "text/html; charset=utf-8")], body.to_owned()).into_response();
    let resp = match site.inner.pages.get(&title) {
        None | Some(StubPage::NotFound) => (StatusCode::NOT_FOUND, "no such page").into_response(),
        Some(StubPage::Html(body)) => html(body),
        Some(StubPage::Disambiguation) => {
            html("<html><body><div id=\"disambigbox\">may refer to:</div><ul><li>one</li></ul></body></html>")
        }
        Some(StubPage::Redirect(to)) => Redirect::permanent(&format!("/wiki/{to}")).into_response(),
        Some(StubPage::Flaky { failures, html: body }) => {
            if count < *failures {
                (StatusCode::SERVICE_UNAVAILABLE, "busy").into_response()
            } else {
                html(body)
            }
        }
        Some(StubPage::Down) => (StatusCode::SERVICE_UNAVAILABLE, "down").into_response(),
    };
    finish(&site, path, arrived, resp)
}

async fn image(State(site): State<PageSite>, Path(name): Path<String>) -> Response {
    let arrived = Instant::now();
    let resp = match site.inner.images.get(&name) {
        Some(bytes) => ([(header::CONTENT_TYPE, "image/png")], bytes.clone()).into_response(),
        None => (StatusCode::NOT_FOUND, "no such image").into_response(),
    };
    finish(&site, format!("/img/{name}"), arrived, resp)
}

pub type Handler = Arc<dyn Fn(&Value) -> (StatusCode, Value) + Send + Sync>;

/// Caption and summarize endpoints with scripted behavior and call counters.
#[derive(Clone)]
pub struct ProviderStub {
    caption: Handler,
    summarize: Handler,
    pub caption_calls: Arc<AtomicUsize>,
    pub summarize_calls: Arc<AtomicUsize>,
}

/// Caption text derived from the decoded image bytes.
pub fn stub_caption(body: &Value) -> (StatusCode, Value) {
    let b64 = body.get("image_b64").and_then(Value::as_str).unwrap_or_default();
    match base64::engine::general_purpose::STANDARD.decode(b64) {
        Ok(bytes) if !bytes.is_empty() => {
            let h = sha256_hex(&bytes);
            (
                StatusCode::OK,
                json!({ "text": format!("a patterned tile in shade {} beside shade {}", &h[..6], &h[6..12]) }),
            )
        }
        _ => (StatusCode::BAD_REQUEST, json!({ "error": "bad image" })),
    }
}

/// One paragraph echoing the quoted captions of a fusion prompt.
pub fn stub_summarize(body: &Value) -> (StatusCode, Value) {
    let prompt = body.get("prompt").and_then(Value::as_str).unwrap_or_default();
    let captions: Vec<&str> =
        prompt.lines().skip(1).map(|l| l.trim().trim_matches('"')).filter(|l| !l.is_empty()).collect();
    (StatusCode::OK, json!({ "text": format!("The images show {}.", captions.join(" and ")) }))
}

impl Default for ProviderStub {
    fn default() -> Self {
        Self::new(Arc::new(stub_caption), Arc::new(stub_summarize))
    }
}

impl ProviderStub {
    pub fn new(caption: Handler, summarize: Handler) -> Self {
        Self { caption, summarize, caption_calls: Arc::default(), summarize_calls: Arc::default() }
    }

    /// Summaries that are always bulleted lists.
    pub fn listy() -> Self {
        Self::new(
            Arc::new(stub_caption),
            Arc::new(|_: &Value| (StatusCode::OK, json!({ "text": "- first point\n- second point" }))),
        )
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/caption", post(caption_handler))
            .route("/summarize", post(summarize_handler))
            .with_state(self.clone())
    }

    pub fn spawn(&self) -> StubServer {
        StubServer::spawn(self.router())
    }
}

async fn caption_handler(State(s): State<ProviderStub>, body: Bytes) -> Response {
    s.caption_calls.fetch_add(1, Ordering::SeqCst);
    let value: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
    let (status, out) = (s.caption)(&value);
    (status, Json(out)).into_response()
}

async fn summarize_handler(State(s): State<ProviderStub>, body: Bytes) -> Response {
    s.summarize_calls.fetch_add(1, Ordering::SeqCst);
    let value: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
    let (status, out) = (s.summarize)(&value);
    (status, Json(out)).into_response()
}

/// Ten entities named `Entity0`..`Entity9` linked in a ring plus chords, with one
/// original PNG each for the first four and descriptions for all but the last.
pub fn fixture_dataset() -> Dataset {
    let entities: Vec<Entity> = (0..10)
        .map(|i| Entity {
            id: format!("E{i}"),
            qid: Qid::parse(&format!("Q{}", 100 + i)).unwrap(),
            name: format!("Entity{i}"),
            description: (i < 9).then(|| format!("entity {i} of the fixture, kind {}", i % 3)),
        })
        .collect();
    let mut train = Vec::new();
    for i in 0..10 {
        train.push(Triple::new(format!("E{i}"), "next", format!("E{}", (i + 1) % 10)));
        if i % 2 == 0 {
            train.push(Triple::new(format!("E{i}"), "kind", format!("E{}", i % 3)));
        }
    }
    let valid = vec![Triple::new("E1", "kind", "E1")];
    let test = vec![Triple::new("E3", "kind", "E0"), Triple::new("E5", "kind", "E2"), Triple::new("E7", "kind", "E1")];
    Dataset::new(entities, train, valid, test, Vec::new()).unwrap()
}

/// Writes [`fixture_dataset`] to `root` together with its original images.
pub fn write_fixture_dataset(root: &FsPath) -> Dataset {
    use crate::crawler::{image_filename, ImageExt, ImageRecord, ImageSource, Provenance};
    let base = fixture_dataset();
    std::fs::create_dir_all(root.join("images")).unwrap();
    let mut records = Vec::new();
    for e in base.entities.iter().take(4) {
        let filename = image_filename(&e.qid, 0, ImageExt::Png);
        let bytes = synthetic_png(&filename, 80, 80);
        std::fs::write(root.join("images").join(&filename), &bytes).unwrap();
        records.push(ImageRecord {
            qid: e.qid.clone(),
            index: 0,
            filename,
            source: ImageSource::Original,
            provenance: Provenance::default(),
            width: 80,
            height: 80,
            mime: "image/png".into(),
            sha256: sha256_hex(&bytes),
            bytes_path: None,
        });
    }
    let ds = base.with_images(records).unwrap();
    write_dataset(&ds, root).unwrap();
    ds
}

/// A page site with one stub page per fixture entity: most have two images,
/// `Entity8` is missing and `Entity9` is a disambiguation page.
pub fn fixture_site() -> PageSite {
    let mut b = PageSite::builder();
    for i in 0..8 {
        b = b.entity_page(&format!("Entity{i}"), 2, 96);
    }
    b.page("Entity9", StubPage::Disambiguation).build()
}
