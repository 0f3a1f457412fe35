//! Entity-level fusion of image captions through an LLM, and assembly of the
//! caption-derived text variants.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::captioning::{Caption, ItemError};
use crate::crawler::ImageSource;
use crate::io::{read_jsonl_or_empty, write_jsonl, JsonlAppender};
use crate::kgdata::{Dataset, Entity, Qid};
use crate::provider::{LlmBackend, ProviderError};

/// `{entity_name}` is substituted; the quoted caption list follows on the next lines.
pub const FUSION_PROMPT_TEMPLATE: &str = "Your task is to integrate the following list of visual descriptions for the entity '{entity_name}' into a rich, detailed, and coherent summary paragraph. Capture as many key details as possible, such as objects, colors, actions, and settings. Your final output must be a single paragraph, not a list.";

/// Appended on retry after an answer fails [`validate_single_paragraph`].
pub const CORRECTIVE_INSTRUCTION: &str = "Your previous answer was not a single paragraph. Rewrite it as one paragraph of continuous prose with no bullet points, no numbered items and no blank lines.";

pub const CONCAT_MODEL: &str = "concat";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "G_o")]
    GOriginal,
    #[serde(rename = "G_n")]
    GNew,
    #[serde(rename = "G_on")]
    GCombined,
    Fusion,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::GOriginal, Variant::GNew, Variant::GCombined, Variant::Fusion];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::GOriginal => "G_o",
            Variant::GNew => "G_n",
            Variant::GCombined => "G_on",
            Variant::Fusion => "Fusion",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['(', ')', '+'], "").as_str() {
            "g_o" | "go" => Ok(Variant::GOriginal),
            "g_n" | "gn" => Ok(Variant::GNew),
            "g_on" | "gon" => Ok(Variant::GCombined),
            "fusion" => Ok(Variant::Fusion),
            _ => Err(format!("unknown variant {s:?}; expected fusion, g_o, g_n or g_on")),
        }
    }
}

/// One `summaries.jsonl` row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusedSummary {
    pub qid: Qid,
    pub variant: Variant,
    pub text: String,
    pub model: String,
    pub input_caption_count: usize,
    #[serde(default)]
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusionPrompt {
    pub entity_name: String,
    pub captions: Vec<String>,
    pub rendered: String,
}

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("no usable captions for {0}")]
    EmptyInput(String),
    #[error("inputs for variant {0} are missing")]
    MissingModality(Variant),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

/// Non-degenerate captions, original before retrieved, each by index.
pub fn usable_captions<'a>(captions: impl IntoIterator<Item = &'a Caption>) -> Vec<&'a Caption> {
    let mut v: Vec<&Caption> = captions.into_iter().filter(|c| !c.degenerate).collect();
    v.sort_by_key(|c| (c.source, c.index));
    v
}

pub fn render_fusion_prompt(entity_name: &str, captions: &[String]) -> String {
    let mut out = FUSION_PROMPT_TEMPLATE.replace("{entity_name}", entity_name);
    for c in captions {
        out.push('\n');
        out.push('"');
        out.push_str(c);
        out.push('"');
    }
    out
}

pub fn build_fusion_prompt(entity: &Entity, captions: &[Caption]) -> Result<FusionPrompt, FusionError> {
    let texts: Vec<String> = usable_captions(captions).into_iter().map(|c| c.text.clone()).collect();
    if texts.is_empty() {
        return Err(FusionError::EmptyInput(entity.qid.to_string()));
    }
    Ok(FusionPrompt {
        entity_name: entity.name.clone(),
        rendered: render_fusion_prompt(&entity.name, &texts),
        captions: texts,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Violation {
    EmptyText,
    BlankLine { line: usize },
    ListMarker { line: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParagraphCheck {
    pub ok: bool,
    pub violations: Vec<Violation>,
}

fn has_list_marker(line: &str) -> bool {
    let l = line.trim_start();
    if l.starts_with(['-', '*', '•']) {
        return true;
    }
    let digits = l.bytes().take_while(u8::is_ascii_digit).count();
    digits > 0 && matches!(l.as_bytes().get(digits), Some(b'.' | b')'))
}

/// Single-paragraph check on the trimmed text: no blank lines and, when the
/// text spans several lines, no line opening with a bullet or `N.`/`N)`.
pub fn validate_single_paragraph(text: &str) -> ParagraphCheck {
    let body = text.trim();
    let mut violations = Vec::new();
    if body.is_empty() {
        violations.push(Violation::EmptyText);
    } else {
        let lines: Vec<&str> = body.lines().collect();
        let multi = lines.len() > 1;
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                violations.push(Violation::BlankLine { line: i + 1 });
            } else if multi && has_list_marker(line) {
                violations.push(Violation::ListMarker { line: i + 1 });
            }
        }
    }
    ParagraphCheck { ok: violations.is_empty(), violations }
}

/// Summarizes one entity's captions. An invalid answer triggers up to
/// `retries` corrective requests; if none validates, the result is the
/// whitespace-normalized concatenation of the captions with `fallback` set.
pub fn fuse_entity(
    entity: &Entity,
    captions: &[Caption],
    llm: &dyn LlmBackend,
    retries: u32,
) -> Result<FusedSummary, FusionError> {
    let prompt = build_fusion_prompt(entity, captions)?;
    let summary = |text: String, fallback: bool| FusedSummary {
        qid: entity.qid.clone(),
        variant: Variant::Fusion,
        text,
        model: llm.model_name().to_owned(),
        input_caption_count: prompt.captions.len(),
        fallback,
    };

    let first = llm.summarize(&prompt.rendered)?;
    if validate_single_paragraph(&first).ok {
        return Ok(summary(first, false));
    }
    let corrective = format!("{}\n\n{}", prompt.rendered, CORRECTIVE_INSTRUCTION);
    for _ in 0..retries {
        let again = llm.summarize(&corrective)?;
        if validate_single_paragraph(&again).ok {
            return Ok(summary(again, false));
        }
    }
    let joined = prompt.captions.iter().flat_map(|c| c.split_whitespace()).collect::<Vec<_>>().join(" ");
    Ok(summary(joined, true))
}

/// Text of a caption-derived variant. G_o and G_n join usable captions of one
/// source with newlines; G_on joins whichever of the two is present; Fusion is
/// the fused text itself.
pub fn assemble_variant(
    captions_o: &[Caption],
    captions_n: &[Caption],
    fused: Option<&FusedSummary>,
    variant: Variant,
) -> Result<String, FusionError> {
    let join = |cs: &[Caption]| {
        let parts: Vec<&str> = usable_captions(cs).into_iter().map(|c| c.text.as_str()).collect();
        (!parts.is_empty()).then(|| parts.join("\n"))
    };
    let missing = || FusionError::MissingModality(variant);
    match variant {
        Variant::GOriginal => join(captions_o).ok_or_else(missing),
        Variant::GNew => join(captions_n).ok_or_else(missing),
        Variant::GCombined => match (join(captions_o), join(captions_n)) {
            (Some(o), Some(n)) => Ok(format!("{o}\n{n}")),
            (Some(t), None) | (None, Some(t)) => Ok(t),
            (None, None) => Err(missing()),
        },
        Variant::Fusion => fused.map(|f| f.text.clone()).ok_or_else(missing),
    }
}

/// Captions grouped by entity.
pub fn captions_by_qid(captions: &[Caption]) -> HashMap<&Qid, Vec<Caption>> {
    let mut map: HashMap<&Qid, Vec<Caption>> = HashMap::new();
    for c in captions {
        map.entry(&c.qid).or_default().push(c.clone());
    }
    map
}

#[derive(Clone, Debug)]
pub struct FusionPaths {
    pub summaries: PathBuf,
    pub journal: PathBuf,
}

impl FusionPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self { summaries: dir.join("summaries.jsonl"), journal: dir.join("journal").join("fusion.jsonl") }
    }
}

#[derive(Clone, Debug)]
pub struct FusionOptions {
    pub retries: u32,
    pub concurrency: usize,
}

impl Default for FusionOptions {
    fn default() -> Self {
        Self { retries: 1, concurrency: 4 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionReport {
    pub fused: usize,
    pub fallback: usize,
    pub already_done: usize,
    /// Entities whose captions were all degenerate; their text stays the dataset description.
    pub description_fallback: Vec<String>,
    pub errors: Vec<ItemError>,
}

#[derive(Serialize, Deserialize, PartialEq, Eq, Hash)]
struct FusionJournalKey {
    qid: String,
    model: String,
}

/// Fuses every entity that has captions and is not yet journaled for this model.
pub fn fuse_batch(
    dataset: &Dataset,
    captions: &[Caption],
    llm: &dyn LlmBackend,
    paths: &FusionPaths,
    options: &FusionOptions,
) -> Result<FusionReport, FusionError> {
    let io_err = |path: &Path| {
        let path = path.to_owned();
        move |source| FusionError::Io { path, source }
    };
    let done: HashSet<FusionJournalKey> =
        read_jsonl_or_empty::<FusionJournalKey>(&paths.journal).map_err(io_err(&paths.journal))?.into_iter().collect();
    let mut out = JsonlAppender::open(&paths.summaries).map_err(io_err(&paths.summaries))?;
    let mut journal = JsonlAppender::open(&paths.journal).map_err(io_err(&paths.journal))?;

    let by_qid = captions_by_qid(captions);
    let model = llm.model_name().to_owned();
    let mut report = FusionReport::default();
    let mut todo = Vec::new();
    for e in &dataset.entities {
        let Some(cs) = by_qid.get(&e.qid) else { continue };
        if done.contains(&FusionJournalKey { qid: e.qid.to_string(), model: model.clone() }) {
            report.already_done += 1;
        } else {
            todo.push((e, cs.as_slice()));
        }
    }

    for chunk in todo.chunks(options.concurrency.max(1)) {
        let results: Vec<_> = thread::scope(|s| {
            let handles: Vec<_> =
                chunk.iter().map(|(e, cs)| s.spawn(move || fuse_entity(e, cs, llm, options.retries))).collect();
            handles.into_iter().map(|h| h.join().expect("fusion worker panicked")).collect()
        });
        for ((entity, _), result) in chunk.iter().zip(results) {
            let key = FusionJournalKey { qid: entity.qid.to_string(), model: model.clone() };
            match result {
                Ok(summary) => {
                    out.append(&summary).map_err(io_err(&paths.summaries))?;
                    journal.append(&key).map_err(io_err(&paths.journal))?;
                    report.fused += 1;
                    if summary.fallback {
                        report.fallback += 1;
                    }
                }
                Err(FusionError::EmptyInput(_)) => {
                    journal.append(&key).map_err(io_err(&paths.journal))?;
                    report.description_fallback.push(entity.qid.to_string());
                }
                Err(e) => {
                    tracing::warn!(qid = %entity.qid, error = %e, "fusion failed; entity omitted");
                    let kind = match &e {
                        FusionError::Provider(p) if p.is_transient() => "transient",
                        _ => "permanent",
                    };
                    report.errors.push(ItemError {
                        key: entity.qid.to_string(),
                        kind: kind.into(),
                        message: e.to_string(),
                    });
                }
            }
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantReport {
    /// Rows written per variant.
    pub written: BTreeMap<String, usize>,
    /// Entities lacking inputs per variant.
    pub missing: BTreeMap<String, usize>,
}

/// Rewrites the G_o / G_n / G_on rows of `summaries_path`, keeping all other rows.
pub fn write_variants(
    dataset: &Dataset,
    captions: &[Caption],
    variants: &[Variant],
    summaries_path: &Path,
) -> Result<VariantReport, FusionError> {
    let io_err = |source| FusionError::Io { path: summaries_path.to_owned(), source };
    let mut rows: Vec<FusedSummary> = read_jsonl_or_empty(summaries_path).map_err(io_err)?;
    rows.retain(|r| r.variant == Variant::Fusion || !variants.contains(&r.variant));

    let by_qid = captions_by_qid(captions);
    let mut report = VariantReport::default();
    for e in &dataset.entities {
        let cs = by_qid.get(&e.qid).map(Vec::as_slice).unwrap_or_default();
        let (o, n): (Vec<Caption>, Vec<Caption>) = cs.iter().cloned().partition(|c| c.source == ImageSource::Original);
        for &v in variants.iter().filter(|v| **v != Variant::Fusion) {
            match assemble_variant(&o, &n, None, v) {
                Ok(text) => {
                    let count = match v {
                        Variant::GOriginal => usable_captions(&o).len(),
                        Variant::GNew => usable_captions(&n).len(),
                        _ => usable_captions(cs).len(),
                    };
                    rows.push(FusedSummary {
                        qid: e.qid.clone(),
                        variant: v,
                        text,
                        model: CONCAT_MODEL.into(),
                        input_caption_count: count,
                        fallback: false,
                    });
                    *report.written.entry(v.to_string()).or_default() += 1;
                }
                Err(_) => *report.missing.entry(v.to_string()).or_default() += 1,
            }
        }
    }
    write_jsonl(summaries_path, &rows).map_err(io_err)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::MockLlm;
    use std::sync::Mutex;

    fn entity(name: &str) -> Entity {
        Entity { id: name.into(), qid: Qid::parse("Q727").unwrap(), name: name.into(), description: None }
    }

    fn cap(text: &str, source: ImageSource, index: u32) -> Caption {
        let d = crate::captioning::detect_degenerate(text, 0.5);
        Caption {
            filename: format!("Q727_{index}.jpg"),
            qid: Qid::parse("Q727").unwrap(),
            source,
            index,
            provider: "mock".into(),
            prompt_id: "p".into(),
            text: text.into(),
            degenerate: d.flag,
            degenerate_reason: d.reason,
        }
    }

    struct Scripted {
        replies: Mutex<Vec<String>>,
        calls: Mutex<Vec<String>>,
    }

    impl Scripted {
        fn new(replies: &[&str]) -> Self {
            Self {
                replies: Mutex::new(replies.iter().rev().map(|s| s.to_string()).collect()),
                calls: Mutex::new(vec![]),
            }
        }
    }

    impl LlmBackend for Scripted {
        fn model_name(&self) -> &str {
            "scripted"
        }
        fn summarize(&self, prompt: &str) -> Result<String, ProviderError> {
            self.calls.lock().unwrap().push(prompt.to_owned());
            Ok(self.replies.lock().unwrap().pop().unwrap_or_default())
        }
    }

    #[test]
    fn prompt_renders_template_and_captions() {
        let p = build_fusion_prompt(
            &entity("Amsterdam"),
            &[
                cap("abstract cityscape", ImageSource::Retrieved, 0),
                cap("three red crosses on shield", ImageSource::Original, 0),
            ],
        )
        .unwrap();
        assert!(p.rendered.starts_with(
            "Your task is to integrate the following list of visual descriptions for the entity 'Amsterdam' into a rich, detailed, and coherent summary paragraph."
        ));
        assert!(p.rendered.ends_with("not a list.\n\"three red crosses on shield\"\n\"abstract cityscape\""));
        assert_eq!(p.captions, ["three red crosses on shield", "abstract cityscape"]);
    }

    #[test]
    fn prompt_requires_usable_captions() {
        assert!(matches!(build_fusion_prompt(&entity("A"), &[]), Err(FusionError::EmptyInput(_))));
        let only_bad = [cap("person, person, person, person", ImageSource::Original, 0)];
        assert!(matches!(build_fusion_prompt(&entity("A"), &only_bad), Err(FusionError::EmptyInput(_))));
        let one = build_fusion_prompt(&entity("A"), &[cap("c", ImageSource::Original, 0)]).unwrap();
        assert_eq!(one.rendered.lines().count(), 2);
        assert_eq!(one.rendered.lines().last(), Some("\"c\""));
    }

    #[test]
    fn paragraph_validation() {
        assert!(validate_single_paragraph("A single flowing paragraph about canals.").ok);
        let blank = validate_single_paragraph("First part.\n\nSecond part.");
        assert_eq!(blank.violations, [Violation::BlankLine { line: 2 }]);
        assert!(validate_single_paragraph("1. canals 2. bikes").ok);
        assert!(!validate_single_paragraph("• item one\n• item two").ok);
        assert!(!validate_single_paragraph("Intro\n2) second").ok);
        assert!(!validate_single_paragraph("Intro\n- bullet").ok);
        assert_eq!(validate_single_paragraph("  ").violations, [Violation::EmptyText]);
        assert!(validate_single_paragraph("Line one wraps\nonto line two.\n").ok);
    }

    #[test]
    fn mock_llm_fusion() {
        let cs = [
            cap("red shield", ImageSource::Original, 0),
            cap("canal boats", ImageSource::Retrieved, 0),
            cap("bikes", ImageSource::Retrieved, 1),
        ];
        let s = fuse_entity(&entity("Amsterdam"), &cs, &MockLlm::default(), 1).unwrap();
        assert_eq!(s.input_caption_count, 3);
        assert_eq!(s.text, "red shield canal boats bikes");
        assert!(!s.fallback && validate_single_paragraph(&s.text).ok);
    }

    #[test]
    fn retry_then_fallback() {
        let cs = [cap("red  shield", ImageSource::Original, 0), cap("canal\nboats", ImageSource::Retrieved, 0)];
        let llm = Scripted::new(&["• item one\n• item two", "• item one\n• item two"]);
        let s = fuse_entity(&entity("Amsterdam"), &cs, &llm, 1).unwrap();
        assert!(s.fallback);
        assert_eq!(s.text, "red shield canal boats");
        let calls = llm.calls.lock().unwrap();
        assert_eq!(calls.len(), 2);
        assert!(calls[1].ends_with(CORRECTIVE_INSTRUCTION));
    }

    #[test]
    fn retry_recovers() {
        let cs = [cap("x", ImageSource::Original, 0)];
        let llm = Scripted::new(&["a\n\nb", "One clean paragraph."]);
        let s = fuse_entity(&entity("A"), &cs, &llm, 1).unwrap();
        assert_eq!((s.text.as_str(), s.fallback), ("One clean paragraph.", false));
    }

    #[test]
    fn clean_paragraph_stored_verbatim() {
        let llm = Scripted::new(&["Canals and bikes under grey skies."]);
        let s = fuse_entity(&entity("A"), &[cap("x", ImageSource::Original, 0)], &llm, 1).unwrap();
        assert_eq!(s.text, "Canals and bikes under grey skies.");
        assert_eq!(llm.calls.lock().unwrap().len(), 1);
    }

    #[test]
    fn variant_assembly() {
        let o = [cap("a", ImageSource::Original, 0)];
        let n = [cap("b", ImageSource::Retrieved, 0)];
        assert_eq!(assemble_variant(&o, &n, None, Variant::GCombined).unwrap(), "a\nb");
        assert!(matches!(
            assemble_variant(&[], &n, None, Variant::GOriginal),
            Err(FusionError::MissingModality(Variant::GOriginal))
        ));
        let f = FusedSummary {
            qid: Qid::parse("Q1").unwrap(),
            variant: Variant::Fusion,
            text: "s".into(),
            model: "m".into(),
            input_caption_count: 1,
            fallback: false,
        };
        assert_eq!(assemble_variant(&[], &[], Some(&f), Variant::Fusion).unwrap(), "s");
        let degenerate =
            [cap("person, person, person, person", ImageSource::Original, 1), cap("a", ImageSource::Original, 0)];
        assert_eq!(assemble_variant(&degenerate, &[], None, Variant::GOriginal).unwrap(), "a");
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("fusion".parse::<Variant>().unwrap(), Variant::Fusion);
        assert_eq!("g_on".parse::<Variant>().unwrap(), Variant::GCombined);
        assert_eq!("G(o+n)".parse::<Variant>().unwrap(), Variant::GCombined);
        assert!("x".parse::<Variant>().is_err());
        assert_eq!(serde_json::to_string(&Variant::GCombined).unwrap(), "\"G_on\"");
    }
}
