//! JSONL dataset records and BIO column-corpus import.
//!
//! One record per line:
//!
//! ```text
//! {"id": "r1", "text": "...", "entities": [{"start_char": 4, "end_char": 13, "label": "occupation"}],
//!  "audio_path": "a.wav", "language": "en"}
//! ```
//!
//! `audio_path` and `language` are optional. Augmented files additionally
//! carry `prompt`, `prompt_seed` and `target`.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{transcript_from_bio, BioTag, CodecError, EntitySpan, ParseMode, TaggedTranscript};
use crate::prompt::{PromptEntry, PromptSpec};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: field `{field}`: {message}")]
    Schema {
        line: usize,
        field: String,
        message: String,
    },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: malformed row: {message}")]
    MalformedRow { line: usize, message: String },
    #[error("line {line}: unknown tag prefix in {tag:?}")]
    UnknownTagPrefix { line: usize, tag: String },
}

impl DatasetError {
    pub fn kind(&self) -> &'static str {
        match self {
            DatasetError::Io { .. } => "IoError",
            DatasetError::Schema { .. } => "SchemaError",
            DatasetError::DuplicateId { .. } => "DuplicateId",
            DatasetError::MalformedRow { .. } => "MalformedRow",
            DatasetError::UnknownTagPrefix { .. } => "UnknownTagPrefix",
        }
    }

    fn io(path: &Path, source: io::Error) -> Self {
        DatasetError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetRecord {
    pub id: String,
    pub transcript: TaggedTranscript,
    pub audio_path: Option<String>,
    pub language: Option<String>,
    pub prompt: Option<PromptSpec>,
    pub target: Option<String>,
}

impl DatasetRecord {
    pub fn new(id: impl Into<String>, transcript: TaggedTranscript) -> Self {
        Self {
            id: id.into(),
            transcript,
            audio_path: None,
            language: None,
            prompt: None,
            target: None,
        }
    }

    pub fn text(&self) -> &str {
        self.transcript.text()
    }

    pub fn entities(&self) -> &[EntitySpan] {
        self.transcript.entities()
    }

    /// Sorted, deduplicated gold labels.
    pub fn labels(&self) -> Vec<String> {
        self.transcript.labels()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawEntity {
    start_char: usize,
    end_char: usize,
    label: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawRecord {
    id: String,
    text: String,
    entities: Vec<RawEntity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    audio_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    language: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prompt: Option<Vec<PromptEntry>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prompt_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target: Option<String>,
}

impl From<&DatasetRecord> for RawRecord {
    fn from(r: &DatasetRecord) -> Self {
        RawRecord {
            id: r.id.clone(),
            text: r.text().to_string(),
            entities: r
                .entities()
                .iter()
                .map(|e| RawEntity {
                    start_char: e.start_char,
                    end_char: e.end_char,
                    label: e.label.clone(),
                })
                .collect(),
            audio_path: r.audio_path.clone(),
            language: r.language.clone(),
            prompt: r.prompt.as_ref().map(|p| p.entries.clone()),
            prompt_seed: r.prompt.as_ref().map(|p| p.seed),
            target: r.target.clone(),
        }
    }
}

fn codec_field(err: &CodecError) -> &'static str {
    match err {
        CodecError::UnescapableLabel(_) => "entities.label",
        _ => "entities",
    }
}

impl RawRecord {
    fn into_record(self, line: usize) -> Result<DatasetRecord> {
        let spans = self
            .entities
            .into_iter()
            .map(|e| (e.start_char, e.end_char, e.label));
        let transcript =
            TaggedTranscript::from_offsets(self.text, spans).map_err(|e| DatasetError::Schema {
                line,
                field: codec_field(&e).to_string(),
                message: e.to_string(),
            })?;
        let prompt = match self.prompt {
            Some(entries) => {
                let p = PromptSpec::new(entries, self.prompt_seed.unwrap_or(0));
                if !p.has_unique_labels() {
                    return Err(DatasetError::Schema {
                        line,
                        field: "prompt".into(),
                        message: "prompt labels are not unique".into(),
                    });
                }
                Some(p)
            }
            None => None,
        };
        Ok(DatasetRecord {
            id: self.id,
            transcript,
            audio_path: self.audio_path,
            language: self.language,
            prompt,
            target: self.target,
        })
    }
}

/// Ordered records plus the label inventory they induce.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    records: Vec<DatasetRecord>,
    type_inventory: BTreeMap<String, usize>,
}

impl Dataset {
    /// Fails with [`DatasetError::DuplicateId`] (1-based record position) on
    /// repeated ids.
    pub fn new(records: Vec<DatasetRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (i, r) in records.iter().enumerate() {
            if !seen.insert(r.id.as_str()) {
                return Err(DatasetError::DuplicateId {
                    line: i + 1,
                    id: r.id.clone(),
                });
            }
        }
        let mut type_inventory = BTreeMap::new();
        for e in records.iter().flat_map(|r| r.entities()) {
            *type_inventory.entry(e.label.clone()).or_insert(0) += 1;
        }
        Ok(Self {
            records,
            type_inventory,
        })
    }

    pub fn records(&self) -> &[DatasetRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<DatasetRecord> {
        self.records
    }

    /// Label → number of entity spans carrying it.
    pub fn type_inventory(&self) -> &BTreeMap<String, usize> {
        &self.type_inventory
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

// A missing field is reported at its parent's path; name the field itself.
fn error_field(e: &serde_path_to_error::Error<serde_json::Error>) -> String {
    let path = e.path().to_string();
    let message = e.inner().to_string();
    let missing = message
        .strip_prefix("missing field `")
        .and_then(|rest| rest.split('`').next());
    match missing {
        Some(field) if path == "." => field.to_string(),
        Some(field) => format!("{path}.{field}"),
        None => path,
    }
}

pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| DatasetError::MalformedRow {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut de = serde_json::Deserializer::from_str(&line);
        let raw: RawRecord =
            serde_path_to_error::deserialize(&mut de).map_err(|e| DatasetError::Schema {
                line: lineno,
                field: error_field(&e),
                message: e.inner().to_string(),
            })?;
        let record = raw.into_record(lineno)?;
        if !seen.insert(record.id.clone()) {
            return Err(DatasetError::DuplicateId {
                line: lineno,
                id: record.id,
            });
        }
        records.push(record);
    }
    Dataset::new(records)
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| DatasetError::io(path, e))?;
    read_jsonl(BufReader::new(file))
}

/// Serializes one record as a single JSON line (no trailing newline).
pub fn record_to_json(record: &DatasetRecord) -> String {
    serde_json::to_string(&RawRecord::from(record)).expect("records always serialize")
}

pub fn write_jsonl<W: Write>(records: &[DatasetRecord], mut out: W) -> io::Result<()> {
    for r in records {
        out.write_all(record_to_json(r).as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn save_jsonl(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    save_records(d.records(), path)
}

pub fn save_records(records: &[DatasetRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| DatasetError::io(path, e))?;
    write_jsonl(records, BufWriter::new(file)).map_err(|e| DatasetError::io(path, e))
}

fn looks_like_tag(s: &str) -> bool {
    s == "O" || s.starts_with("B-") || s.starts_with("I-")
}

fn parse_column_tag(tag: &str, line: usize) -> Result<BioTag> {
    if !looks_like_tag(tag) {
        return Err(DatasetError::UnknownTagPrefix {
            line,
            tag: tag.to_string(),
        });
    }
    tag.parse::<BioTag>().map_err(|e| DatasetError::MalformedRow {
        line,
        message: e.to_string(),
    })
}

/// Imports a word/tag column corpus read from `reader`.
///
/// Two layouts are detected: one `word TAG` (or `TAG word`) pair per line,
/// split on a tab when the line has one and on whitespace otherwise; or
/// alternating lines holding a word and then its tag. Blank lines separate
/// sentences. In the pair layout the tag column is the first one when every
/// row's first field looks like a tag, otherwise the last one.
pub fn import_bio_reader<R: BufRead>(reader: R, basename: &str) -> Result<Dataset> {
    let mut sentences: Vec<Vec<(usize, String)>> = vec![Vec::new()];
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DatasetError::MalformedRow {
            line: idx + 1,
            message: e.to_string(),
        })?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            if !sentences.last().map_or(true, Vec::is_empty) {
                sentences.push(Vec::new());
            }
        } else {
            sentences.last_mut().expect("non-empty").push((idx + 1, line.to_string()));
        }
    }
    if sentences.last().map_or(false, Vec::is_empty) {
        sentences.pop();
    }

    let fields = |row: &str| -> Vec<String> {
        if row.contains('\t') {
            row.split('\t').map(|f| f.trim().to_string()).collect()
        } else {
            row.split_whitespace().map(str::to_string).collect()
        }
    };
    let paired = sentences.iter().flatten().any(|(_, row)| fields(row).len() > 1);
    let tag_first = paired
        && sentences
            .iter()
            .flatten()
            .all(|(_, row)| fields(row).first().map_or(false, |f| looks_like_tag(f)));

    let mut records = Vec::with_capacity(sentences.len());
    for (index, rows) in sentences.iter().enumerate() {
        let mut words = Vec::new();
        let mut tags = Vec::new();
        if paired {
            for (line, row) in rows {
                let f = fields(row);
                if f.len() != 2 || f.iter().any(String::is_empty) {
                    return Err(DatasetError::MalformedRow {
                        line: *line,
                        message: format!("expected a word and a tag, found {} fields", f.len()),
                    });
                }
                let (word, tag) = if tag_first { (&f[1], &f[0]) } else { (&f[0], &f[1]) };
                tags.push(parse_column_tag(tag, *line)?);
                words.push(word.clone());
            }
        } else {
            if rows.len() % 2 != 0 {
                let (line, _) = rows.last().expect("odd row count implies a row");
                return Err(DatasetError::MalformedRow {
                    line: *line,
                    message: "word without a following tag line".into(),
                });
            }
            for pair in rows.chunks(2) {
                let (_, word) = &pair[0];
                let (line, tag) = &pair[1];
                tags.push(parse_column_tag(tag.trim(), *line)?);
                words.push(word.trim().to_string());
            }
        }
        let transcript = transcript_from_bio(&words, &tags, ParseMode::Lenient).map_err(|e| {
            DatasetError::MalformedRow {
                line: rows.first().map_or(0, |(l, _)| *l),
                message: e.to_string(),
            }
        })?;
        records.push(DatasetRecord::new(format!("{basename}-{index}"), transcript));
    }
    Dataset::new(records)
}

pub fn import_bio_corpus(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| DatasetError::io(path, e))?;
    let basename = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".to_string());
    import_bio_reader(BufReader::new(file), &basename)
}

/// Corpus statistics of the kind reported for annotated evaluation sets.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct InventoryStats {
    pub records: usize,
    pub entities: usize,
    pub unique_types: usize,
    pub type_frequency: BTreeMap<String, usize>,
    /// entities-per-record → number of records
    pub entities_per_record: BTreeMap<usize, usize>,
}

pub fn inventory_stats(d: &Dataset) -> InventoryStats {
    let mut entities_per_record = BTreeMap::new();
    for r in d.records() {
        *entities_per_record.entry(r.entities().len()).or_insert(0) += 1;
    }
    InventoryStats {
        records: d.len(),
        entities: d.type_inventory().values().sum(),
        unique_types: d.type_inventory().len(),
        type_frequency: d.type_inventory().clone(),
        entities_per_record,
    }
}
