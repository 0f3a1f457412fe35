//! Multi-modal KG datasets: entities keyed by QID, triple splits, image manifests.
//!
//! On-disk layout of a dataset root:
//!
//! ```text
//! train.tsv valid.tsv test.tsv   head<TAB>relation<TAB>tail, one per line
//! entities.jsonl                 {"id","qid","name","description"}
//! images.jsonl                   optional, ImageRecord rows (source = original)
//! ```

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crawler::{ImageRecord, ImageSource};
use crate::io::{read_jsonl, sha256_hex, write_jsonl};

/// Canonical entity key: `Q<digits>` or the surrogate form `X<12 hex>`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Qid(String);

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid QID {0:?}: expected Q<digits> or X<12 lowercase hex>")]
pub struct InvalidQid(pub String);

impl Qid {
    pub fn parse(s: &str) -> Result<Self, InvalidQid> {
        let valid = match s.as_bytes() {
            [b'Q', rest @ ..] => !rest.is_empty() && rest.iter().all(u8::is_ascii_digit),
            [b'X', rest @ ..] => rest.len() == 12 && rest.iter().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')),
            _ => false,
        };
        if valid {
            Ok(Self(s.to_owned()))
        } else {
            Err(InvalidQid(s.to_owned()))
        }
    }

    /// Deterministic stand-in for an entity without a Wikidata mapping.
    pub fn surrogate(source_id: &str) -> Self {
        Self(format!("X{}", &sha256_hex(source_id.as_bytes())[..12]))
    }

    pub fn is_surrogate(&self) -> bool {
        self.0.starts_with('X')
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Qid {
    type Error = InvalidQid;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Qid::parse(&s)
    }
}

impl From<Qid> for String {
    fn from(q: Qid) -> String {
        q.0
    }
}

impl fmt::Display for Qid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    pub qid: Qid,
    pub name: String,
    pub description: Option<String>,
}

impl Entity {
    /// The description if it carries any non-whitespace text.
    pub fn text(&self) -> Option<&str> {
        self.description.as_deref().filter(|d| !d.trim().is_empty())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Triple {
    pub fn new(head: impl Into<String>, relation: impl Into<String>, tail: impl Into<String>) -> Self {
        Self { head: head.into(), relation: relation.into(), tail: tail.into() }
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.head, self.relation, self.tail)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DatasetFormat {
    #[default]
    TsvTriplesJsonlEntities,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DanglingRef {
    pub file: String,
    pub line: usize,
    pub id: String,
}

impl fmt::Display for DanglingRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: unknown reference {}", self.file, self.line, self.id)
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing required dataset file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },
    #[error("dangling references:\n{}", render_lines(.0))]
    Dangling(Vec<DanglingRef>),
    #[error("duplicate entity id {0}")]
    DuplicateId(String),
    #[error("entities {first} and {second} both map to {qid}")]
    QidConflict { qid: Qid, first: String, second: String },
    #[error("triples present in more than one split: {}", .0.join(", "))]
    OverlappingSplits(Vec<String>),
    #[error(transparent)]
    InvalidQid(#[from] InvalidQid),
}

fn render_lines<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n")
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub entities: Vec<Entity>,
    pub relations: Vec<String>,
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
    pub images: Vec<ImageRecord>,
    id_index: HashMap<String, usize>,
    relation_index: HashMap<String, usize>,
}

impl Dataset {
    /// Builds a dataset and checks every invariant: unique ids and qids, resolving
    /// triple endpoints and image qids, disjoint splits.
    pub fn new(
        entities: Vec<Entity>,
        train: Vec<Triple>,
        valid: Vec<Triple>,
        test: Vec<Triple>,
        images: Vec<ImageRecord>,
    ) -> Result<Self, DatasetError> {
        let mut id_index = HashMap::with_capacity(entities.len());
        let mut qids: HashMap<&Qid, &str> = HashMap::with_capacity(entities.len());
        for (i, e) in entities.iter().enumerate() {
            if id_index.insert(e.id.clone(), i).is_some() {
                return Err(DatasetError::DuplicateId(e.id.clone()));
            }
            if let Some(first) = qids.insert(&e.qid, &e.id) {
                return Err(DatasetError::QidConflict {
                    qid: e.qid.clone(),
                    first: first.to_owned(),
                    second: e.id.clone(),
                });
            }
        }

        let mut dangling = Vec::new();
        for (file, split) in [("train.tsv", &train), ("valid.tsv", &valid), ("test.tsv", &test)] {
            for (i, t) in split.iter().enumerate() {
                for id in [&t.head, &t.tail] {
                    if !id_index.contains_key(id) {
                        dangling.push(DanglingRef { file: file.into(), line: i + 1, id: id.clone() });
                    }
                }
            }
        }
        for (i, img) in images.iter().enumerate() {
            if !qids.contains_key(&img.qid) {
                dangling.push(DanglingRef { file: "images.jsonl".into(), line: i + 1, id: img.qid.to_string() });
            }
        }
        if !dangling.is_empty() {
            return Err(DatasetError::Dangling(dangling));
        }

        let mut seen: HashMap<&Triple, usize> = HashMap::new();
        let mut overlap = Vec::new();
        for (k, split) in [&train, &valid, &test].into_iter().enumerate() {
            for t in split {
                match seen.get(t) {
                    Some(&prev) if prev != k => overlap.push(t.to_string()),
                    Some(_) => {}
                    None => {
                        seen.insert(t, k);
                    }
                }
            }
        }
        if !overlap.is_empty() {
            overlap.sort();
            overlap.dedup();
            return Err(DatasetError::OverlappingSplits(overlap));
        }

        let mut relations = Vec::new();
        let mut relation_index = HashMap::new();
        for t in train.iter().chain(&valid).chain(&test) {
            if !relation_index.contains_key(&t.relation) {
                relation_index.insert(t.relation.clone(), relations.len());
                relations.push(t.relation.clone());
            }
        }

        Ok(Self { entities, relations, train, valid, test, images, id_index, relation_index })
    }

    pub fn entity_index(&self, id: &str) -> Option<usize> {
        self.id_index.get(id).copied()
    }

    pub fn relation_index(&self, relation: &str) -> Option<usize> {
        self.relation_index.get(relation).copied()
    }

    pub fn entity(&self, id: &str) -> Option<&Entity> {
        self.entity_index(id).map(|i| &self.entities[i])
    }

    pub fn entity_by_qid(&self, qid: &Qid) -> Option<&Entity> {
        self.entities.iter().find(|e| &e.qid == qid)
    }

    /// Entity id → description, for entities with text.
    pub fn texts(&self) -> HashMap<&str, &str> {
        self.entities.iter().filter_map(|e| Some((e.id.as_str(), e.text()?))).collect()
    }

    /// Every triple across the three splits.
    pub fn all_triples(&self) -> impl Iterator<Item = &Triple> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    /// Same graph with a different image manifest.
    pub fn with_images(&self, images: Vec<ImageRecord>) -> Result<Self, DatasetError> {
        Self::new(self.entities.clone(), self.train.clone(), self.valid.clone(), self.test.clone(), images)
    }
}

#[derive(Deserialize)]
struct EntityRow {
    id: String,
    #[serde(default)]
    qid: Option<String>,
    name: String,
    #[serde(default)]
    description: Option<String>,
}

fn read_triples(path: &Path) -> Result<Vec<Triple>, DatasetError> {
    let file = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
    let content = match fs::read_to_string(path) {
        Ok(c) => c,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(DatasetError::MissingFile(path.to_owned())),
        Err(source) => return Err(DatasetError::Io { path: path.to_owned(), source }),
    };
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [h, r, t] = fields[..] else {
            return Err(DatasetError::Parse {
                file,
                line: i + 1,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        };
        out.push(Triple::new(h, r, t));
    }
    Ok(out)
}

fn read_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, DatasetError> {
    read_jsonl(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => DatasetError::MissingFile(path.to_owned()),
        io::ErrorKind::InvalidData => {
            DatasetError::Parse { file: path.display().to_string(), line: 0, msg: e.to_string() }
        }
        _ => DatasetError::Io { path: path.to_owned(), source: e },
    })
}

/// Loads a dataset root. Entities without a `qid` get a surrogate derived from their id.
pub fn load_dataset(root: &Path, format: DatasetFormat) -> Result<Dataset, DatasetError> {
    let DatasetFormat::TsvTriplesJsonlEntities = format;
    let train = read_triples(&root.join("train.tsv"))?;
    let valid = read_triples(&root.join("valid.tsv"))?;
    let test = read_triples(&root.join("test.tsv"))?;
    let rows: Vec<EntityRow> = read_rows(&root.join("entities.jsonl"))?;
    let entities = rows
        .into_iter()
        .map(|r| {
            let qid = match r.qid {
                Some(q) => Qid::parse(&q)?,
                None => Qid::surrogate(&r.id),
            };
            Ok(Entity { id: r.id, qid, name: r.name, description: r.description })
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;
    let images_path = root.join("images.jsonl");
    let images = if images_path.exists() { read_rows(&images_path)? } else { Vec::new() };
    Dataset::new(entities, train, valid, test, images)
}

/// Writes the dataset in the layout read by [`load_dataset`].
pub fn write_dataset(dataset: &Dataset, root: &Path) -> io::Result<()> {
    fs::create_dir_all(root)?;
    for (name, split) in [("train.tsv", &dataset.train), ("valid.tsv", &dataset.valid), ("test.tsv", &dataset.test)] {
        let mut buf = String::new();
        for t in split {
            buf.push_str(&t.head);
            buf.push('\t');
            buf.push_str(&t.relation);
            buf.push('\t');
            buf.push_str(&t.tail);
            buf.push('\n');
        }
        fs::write(root.join(name), buf)?;
    }
    write_jsonl(&root.join("entities.jsonl"), &dataset.entities)?;
    if !dataset.images.is_empty() {
        write_jsonl(&root.join("images.jsonl"), &dataset.images)?;
    }
    Ok(())
}

/// Applies a name-or-id → QID mapping. Entities the mapping misses keep an
/// existing `Q` identifier, otherwise receive a surrogate. Image filenames
/// follow their entity's new QID.
pub fn normalize_ids(dataset: &Dataset, mapping: &HashMap<String, String>) -> Result<Dataset, DatasetError> {
    let mut renamed: HashMap<Qid, Qid> = HashMap::new();
    let mut entities = Vec::with_capacity(dataset.entities.len());
    for e in &dataset.entities {
        let qid = match mapping.get(&e.name).or_else(|| mapping.get(&e.id)) {
            Some(q) => Qid::parse(q)?,
            None if !e.qid.is_surrogate() => e.qid.clone(),
            None => Qid::surrogate(&e.id),
        };
        renamed.insert(e.qid.clone(), qid.clone());
        entities.push(Entity { qid, ..e.clone() });
    }

    let mut owner: HashMap<&Qid, &str> = HashMap::new();
    for e in &entities {
        if let Some(first) = owner.insert(&e.qid, &e.id) {
            return Err(DatasetError::QidConflict {
                qid: e.qid.clone(),
                first: first.to_owned(),
                second: e.id.clone(),
            });
        }
    }

    let images = dataset
        .images
        .iter()
        .map(|img| {
            let qid = renamed.get(&img.qid).cloned().unwrap_or_else(|| img.qid.clone());
            img.with_qid(qid)
        })
        .collect();

    Dataset::new(entities, dataset.train.clone(), dataset.valid.clone(), dataset.test.clone(), images)
}

/// Image counts for one image source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceStats {
    pub total_images: u64,
    pub entities_with_images: u64,
    /// Two-decimal average over covered entities; 0.00 when none are covered.
    pub avg_images_per_covered_entity: f64,
}

impl SourceStats {
    pub fn from_counts(total_images: u64, entities_with_images: u64) -> Self {
        let hundredths = avg_hundredths(total_images, entities_with_images);
        Self { total_images, entities_with_images, avg_images_per_covered_entity: hundredths as f64 / 100.0 }
    }

    /// The average as printed, e.g. `"5.81"`.
    pub fn avg_display(&self) -> String {
        let h = avg_hundredths(self.total_images, self.entities_with_images);
        format!("{}.{:02}", h / 100, h % 100)
    }
}

/// `total / covered` in hundredths, rounded half-up in exact integer arithmetic.
pub fn avg_hundredths(total: u64, covered: u64) -> u64 {
    if covered == 0 {
        return 0;
    }
    let (t, c) = (total as u128, covered as u128);
    ((200 * t + c) / (2 * c)) as u64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub entity_count: u64,
    pub relation_count: u64,
    pub train: u64,
    pub valid: u64,
    pub test: u64,
    pub text_count: u64,
    pub original: SourceStats,
    pub retrieved: SourceStats,
}

pub fn compute_stats(dataset: &Dataset) -> DatasetStats {
    let source_stats = |source: ImageSource| {
        let mut covered = HashSet::new();
        let mut total = 0u64;
        for img in dataset.images.iter().filter(|i| i.source == source) {
            total += 1;
            covered.insert(&img.qid);
        }
        SourceStats::from_counts(total, covered.len() as u64)
    };
    DatasetStats {
        entity_count: dataset.entities.len() as u64,
        relation_count: dataset.relations.len() as u64,
        train: dataset.train.len() as u64,
        valid: dataset.valid.len() as u64,
        test: dataset.test.len() as u64,
        text_count: dataset.entities.iter().filter(|e| e.text().is_some()).count() as u64,
        original: source_stats(ImageSource::Original),
        retrieved: source_stats(ImageSource::Retrieved),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ent(id: &str, name: &str) -> Entity {
        Entity { id: id.into(), qid: Qid::surrogate(id), name: name.into(), description: None }
    }

    fn write_toy(dir: &Path, test_line: &str) {
        fs::write(dir.join("train.tsv"), "E1\tr1\tE2\nE2\tr2\tE3\n").unwrap();
        fs::write(dir.join("valid.tsv"), "E1\tr2\tE3\n").unwrap();
        fs::write(dir.join("test.tsv"), test_line).unwrap();
        fs::write(
            dir.join("entities.jsonl"),
            concat!(
                r#"{"id":"E1","qid":"Q727","name":"Amsterdam","description":"Capital of the Netherlands"}"#,
                "\n",
                r#"{"id":"E2","qid":null,"name":"Netherlands","description":null}"#,
                "\n",
                r#"{"id":"E3","name":"Europe","description":"A continent"}"#,
                "\n",
            ),
        )
        .unwrap();
    }

    #[test]
    fn qid_grammar() {
        assert!(Qid::parse("Q727").is_ok());
        assert!(Qid::parse("Xabcdef012345").is_ok());
        for bad in ["Q", "q1", "Q12a", "XABCDEF012345", "Xabc", "", "P31"] {
            assert!(Qid::parse(bad).is_err(), "{bad}");
        }
        let s = Qid::surrogate("http://dbpedia.org/resource/Amsterdam");
        assert!(Qid::parse(s.as_str()).is_ok());
        assert_eq!(s, Qid::surrogate("http://dbpedia.org/resource/Amsterdam"));
    }

    #[test]
    fn loads_toy_dataset() {
        let dir = tempfile::tempdir().unwrap();
        write_toy(dir.path(), "E3\tr1\tE1\n");
        let ds = load_dataset(dir.path(), DatasetFormat::default()).unwrap();
        assert_eq!(ds.entities.len(), 3);
        assert_eq!(ds.relations, vec!["r1", "r2"]);
        assert_eq!(ds.entities[0].qid.as_str(), "Q727");
        assert!(ds.entities[1].qid.is_surrogate());
        assert_eq!(ds.texts().len(), 2);
    }

    #[test]
    fn dangling_reference_names_id_and_line() {
        let dir = tempfile::tempdir().unwrap();
        write_toy(dir.path(), "E1\tr1\tE3\nE99\tr1\tE1\n");
        let err = load_dataset(dir.path(), DatasetFormat::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("E99") && msg.contains("test.tsv:2"), "{msg}");
    }

    #[test]
    fn missing_file_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        write_toy(dir.path(), "");
        fs::remove_file(dir.path().join("valid.tsv")).unwrap();
        assert!(matches!(load_dataset(dir.path(), DatasetFormat::default()), Err(DatasetError::MissingFile(_))));
    }

    #[test]
    fn overlapping_splits_rejected() {
        let err = Dataset::new(
            vec![ent("a", "A"), ent("b", "B")],
            vec![Triple::new("a", "r", "b")],
            vec![],
            vec![Triple::new("a", "r", "b")],
            vec![],
        )
        .unwrap_err();
        assert!(matches!(err, DatasetError::OverlappingSplits(_)));
    }

    #[test]
    fn write_load_roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        write_toy(dir.path(), "E3\tr1\tE1\n");
        let ds = load_dataset(dir.path(), DatasetFormat::default()).unwrap();
        let out = tempfile::tempdir().unwrap();
        write_dataset(&ds, out.path()).unwrap();
        for f in ["train.tsv", "valid.tsv", "test.tsv"] {
            assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(out.path().join(f)).unwrap());
        }
        let again = load_dataset(out.path(), DatasetFormat::default()).unwrap();
        assert_eq!(again.entities, ds.entities);
    }

    #[test]
    fn normalize_applies_mapping_and_surrogates() {
        let ds =
            Dataset::new(vec![ent("E1", "Amsterdam"), ent("E2", "Nowhere")], vec![], vec![], vec![], vec![]).unwrap();
        let mapping = HashMap::from([("Amsterdam".to_string(), "Q727".to_string())]);
        let out = normalize_ids(&ds, &mapping).unwrap();
        assert_eq!(out.entities[0].qid.as_str(), "Q727");
        assert!(out.entities[1].qid.as_str().starts_with('X'));
        assert_eq!(out.entities[1].qid, normalize_ids(&ds, &mapping).unwrap().entities[1].qid);
    }

    #[test]
    fn normalize_conflict_lists_both() {
        let ds = Dataset::new(vec![ent("E1", "A"), ent("E2", "B")], vec![], vec![], vec![], vec![]).unwrap();
        let mapping = HashMap::from([("A".to_string(), "Q1".to_string()), ("B".to_string(), "Q1".to_string())]);
        let msg = normalize_ids(&ds, &mapping).unwrap_err().to_string();
        assert!(msg.contains("E1") && msg.contains("E2") && msg.contains("Q1"), "{msg}");
    }

    #[test]
    fn averages_from_counts() {
        assert_eq!(SourceStats::from_counts(27841, 9285).avg_display(), "3.00");
        assert_eq!(SourceStats::from_counts(81323, 14002).avg_display(), "5.81");
        assert_eq!(SourceStats::from_counts(0, 0).avg_display(), "0.00");
        assert_eq!(SourceStats::from_counts(1, 8).avg_display(), "0.13");
        assert_eq!(SourceStats::from_counts(1, 200).avg_display(), "0.01");
    }
}
