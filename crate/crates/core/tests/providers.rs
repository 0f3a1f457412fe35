use std::sync::atomic::Ordering;
use std::sync::Arc;

use axum::http::StatusCode;
use mmkg_core::captioning::*;
use mmkg_core::crawler::{
    image_filename, synthetic_png, ImageExt, ImageManifest, ImageRecord, ImageSource, MediaStore, Provenance,
};
use mmkg_core::fusion::*;
use mmkg_core::io::{read_jsonl, sha256_hex};
use mmkg_core::kgdata::{Entity, Qid};
use mmkg_core::provider::*;
use mmkg_core::testkit::{fixture_dataset, stub_caption, ProviderStub};
use serde_json::json;
use tempfile::tempdir;

/// Three stored images for each of the first three fixture entities.
fn stored_manifest(dir: &std::path::Path) -> ImageManifest {
    let store = MediaStore::new(dir);
    let ds = fixture_dataset();
    let mut records = Vec::new();
    for e in ds.entities.iter().take(3) {
        for (i, source) in
            [ImageSource::Original, ImageSource::Retrieved, ImageSource::Retrieved].into_iter().enumerate()
        {
            let index = if source == ImageSource::Original { 0 } else { i as u32 - 1 };
            let filename = image_filename(&e.qid, index, ImageExt::Png);
            let bytes = synthetic_png(&format!("{source:?}{filename}"), 70, 70);
            let path = store.default_path(source, &filename);
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            std::fs::write(&path, &bytes).unwrap();
            records.push(ImageRecord {
                qid: e.qid.clone(),
                index,
                filename,
                source,
                provenance: Provenance::default(),
                width: 70,
                height: 70,
                mime: "image/png".into(),
                sha256: sha256_hex(&bytes),
                bytes_path: None,
            });
        }
    }
    ImageManifest { records }
}

#[test]
fn http_captioning_is_journaled() {
    let stub = ProviderStub::default();
    let server = stub.spawn();
    let dir = tempdir().unwrap();
    let manifest = stored_manifest(dir.path());
    let backend = ProviderConfig::http(server.url(""), "stub-captioner").caption_backend().unwrap();
    let paths = CaptionPaths::in_dir(dir.path());
    let prompt = PromptTemplate::default_caption();
    let store = MediaStore::new(dir.path());

    let report =
        caption_batch(&manifest, &store, backend.as_ref(), &prompt, &paths, &CaptionOptions::default()).unwrap();
    assert_eq!((report.captioned, report.skipped), (9, 0));
    let rows: Vec<Caption> = read_jsonl(&paths.captions).unwrap();
    let order: Vec<String> = manifest.sorted().iter().map(|r| r.media_key()).collect();
    assert_eq!(rows.iter().map(Caption::media_key).collect::<Vec<_>>(), order);
    assert!(rows
        .iter()
        .all(|c| c.provider == "stub-captioner" && c.prompt_id == DEFAULT_CAPTION_PROMPT_ID && !c.degenerate));

    let again =
        caption_batch(&manifest, &store, backend.as_ref(), &prompt, &paths, &CaptionOptions::default()).unwrap();
    assert_eq!((again.captioned, again.already_done), (0, 9));
    assert_eq!(stub.caption_calls.load(Ordering::SeqCst), 9);
}

#[test]
fn caption_prompt_is_sent_verbatim() {
    let seen = Arc::new(std::sync::Mutex::new(Vec::<String>::new()));
    let seen2 = seen.clone();
    let stub = ProviderStub::new(
        Arc::new(move |body: &serde_json::Value| {
            seen2.lock().unwrap().push(body["prompt"].as_str().unwrap().to_owned());
            stub_caption(body)
        }),
        Arc::new(|_: &serde_json::Value| (StatusCode::OK, json!({"text": "x"}))),
    );
    let server = stub.spawn();
    let backend = ProviderConfig::http(server.url(""), "c").caption_backend().unwrap();
    backend.caption(&synthetic_png("p", 8, 8), DEFAULT_CAPTION_PROMPT).unwrap();
    assert_eq!(seen.lock().unwrap().as_slice(), [DEFAULT_CAPTION_PROMPT]);
    assert_eq!(
        sha256_hex(seen.lock().unwrap()[0].as_bytes()),
        "72bdcabe30058577e5ade96b494ba45c48c4fa86371f49fc44f153737564ef29"
    );
}

#[test]
fn provider_failures_are_classified() {
    let stub = ProviderStub::new(
        Arc::new(|_: &serde_json::Value| (StatusCode::SERVICE_UNAVAILABLE, json!({}))),
        Arc::new(|_: &serde_json::Value| (StatusCode::BAD_REQUEST, json!({"error": "no"}))),
    );
    let server = stub.spawn();
    let cfg = ProviderConfig::Http {
        endpoint: server.url(""),
        model_name: "m".into(),
        timeout_ms: 2_000,
        retries: 1,
        backoff_ms: 1,
    };
    let err = cfg.caption_backend().unwrap().caption(b"x", "p").unwrap_err();
    assert!(err.is_transient());
    assert_eq!(stub.caption_calls.load(Ordering::SeqCst), 2);
    assert!(!cfg.llm_backend().unwrap().summarize("p").unwrap_err().is_transient());

    let closed = ProviderConfig::Http {
        endpoint: "http://127.0.0.1:9".into(),
        model_name: "m".into(),
        timeout_ms: 500,
        retries: 0,
        backoff_ms: 1,
    };
    assert!(closed.caption_backend().unwrap().caption(b"x", "p").unwrap_err().is_transient());
}

fn caption(qid: &Qid, source: ImageSource, index: u32, text: &str) -> Caption {
    Caption {
        filename: image_filename(qid, index, ImageExt::Png),
        qid: qid.clone(),
        source,
        index,
        provider: "c".into(),
        prompt_id: DEFAULT_CAPTION_PROMPT_ID.into(),
        text: text.into(),
        degenerate: false,
        degenerate_reason: None,
    }
}

#[test]
fn fusion_prompt_pinned_hash() {
    let e = Entity { id: "X".into(), qid: Qid::parse("Q1").unwrap(), name: "X".into(), description: None };
    let cs = [caption(&e.qid, ImageSource::Original, 0, "a"), caption(&e.qid, ImageSource::Original, 1, "b")];
    let p = build_fusion_prompt(&e, &cs).unwrap();
    assert_eq!(sha256_hex(p.rendered.as_bytes()), "eee75b4c8a263cf4505036e569c1fb43ddd2d1deb106988c53b87e006b9d1fc3");
    assert_eq!(
        sha256_hex(FUSION_PROMPT_TEMPLATE.as_bytes()),
        "23a62f0a7a6e6078b54220da2edfe88e1a06f87ff6ac0fae695ed252b5ea6016"
    );
}

#[test]
fn misbehaving_llm_falls_back_after_one_retry() {
    let stub = ProviderStub::listy();
    let server = stub.spawn();
    let llm = ProviderConfig::http(server.url(""), "listy").llm_backend().unwrap();
    let ds = fixture_dataset();
    let mut captions = Vec::new();
    for e in ds.entities.iter().take(2) {
        captions.push(caption(&e.qid, ImageSource::Original, 0, "red  tower"));
        captions.push(caption(&e.qid, ImageSource::Retrieved, 0, "busy\nstreet"));
    }
    let dir = tempdir().unwrap();
    let paths = FusionPaths::in_dir(dir.path());
    let report = fuse_batch(&ds, &captions, llm.as_ref(), &paths, &FusionOptions::default()).unwrap();
    assert_eq!((report.fused, report.fallback), (2, 2));
    assert_eq!(stub.summarize_calls.load(Ordering::SeqCst), 4);
    let rows: Vec<FusedSummary> = read_jsonl(&paths.summaries).unwrap();
    assert!(rows.iter().all(|r| r.fallback && r.text == "red tower busy street" && r.model == "listy"));

    let again = fuse_batch(&ds, &captions, llm.as_ref(), &paths, &FusionOptions::default()).unwrap();
    assert_eq!((again.fused, again.already_done), (0, 2));
    assert_eq!(stub.summarize_calls.load(Ordering::SeqCst), 4);
}

#[test]
fn well_behaved_llm_and_variants() {
    let stub = ProviderStub::default();
    let server = stub.spawn();
    let llm = ProviderConfig::http(server.url(""), "echo").llm_backend().unwrap();
    let ds = fixture_dataset();
    let q0 = ds.entities[0].qid.clone();
    let q1 = ds.entities[1].qid.clone();
    let q2 = ds.entities[2].qid.clone();
    let mut degenerate = caption(&q2, ImageSource::Original, 0, "person person person person");
    degenerate.degenerate = true;
    let captions = vec![
        caption(&q0, ImageSource::Retrieved, 0, "canal boats"),
        caption(&q0, ImageSource::Original, 0, "red shield"),
        caption(&q1, ImageSource::Retrieved, 0, "a bridge"),
        degenerate,
    ];
    let dir = tempdir().unwrap();
    let paths = FusionPaths::in_dir(dir.path());
    let report = fuse_batch(&ds, &captions, llm.as_ref(), &paths, &FusionOptions::default()).unwrap();
    assert_eq!((report.fused, report.fallback), (2, 0));
    assert_eq!(report.description_fallback, [q2.to_string()]);
    let rows: Vec<FusedSummary> = read_jsonl(&paths.summaries).unwrap();
    assert_eq!(rows[0].text, "The images show red shield and canal boats.");
    assert!(rows.iter().all(|r| validate_single_paragraph(&r.text).ok));

    let vr = write_variants(&ds, &captions, &[Variant::GOriginal, Variant::GNew, Variant::GCombined], &paths.summaries)
        .unwrap();
    assert_eq!(vr.written["G_on"], 2);
    let rows: Vec<FusedSummary> = read_jsonl(&paths.summaries).unwrap();
    let get = |q: &Qid, v: Variant| rows.iter().find(|r| &r.qid == q && r.variant == v).map(|r| r.text.clone());
    assert_eq!(get(&q0, Variant::GCombined).unwrap(), "red shield\ncanal boats");
    assert_eq!(get(&q1, Variant::GOriginal), None);
    assert_eq!(get(&q1, Variant::GCombined).unwrap(), "a bridge");
    for r in rows.iter().filter(|r| r.variant == Variant::GCombined) {
        for part in [Variant::GOriginal, Variant::GNew] {
            if let Some(t) = get(&r.qid, part) {
                assert!(r.text.contains(&t));
            }
        }
    }
    assert_eq!(rows.iter().filter(|r| r.variant == Variant::Fusion).count(), 2);
    write_variants(&ds, &captions, &[Variant::GOriginal, Variant::GNew, Variant::GCombined], &paths.summaries).unwrap();
    assert_eq!(read_jsonl::<FusedSummary>(&paths.summaries).unwrap(), rows);
}
