//! Span-marker and BIO grammars for entity-tagged transcripts.
//!
//! Span-marker form wraps each entity as `<label>surface<label>>`. Plain text
//! `<`, `>` and `\` are backslash-escaped so that the grammar is unambiguous:
//! an unescaped `<` always starts a marker.
//!
//! BIO form is word-level: every whitespace token is emitted as `word(TAG)`
//! with `TAG` one of `O`, `B-label`, `I-label`. The tag of a unit is the text
//! between its final `(` and the trailing `)`, so labels containing spaces
//! survive a round trip.
//!
//! Offsets are character offsets (Unicode scalar values), never bytes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Characters a label may never contain.
pub const RESERVED_LABEL_CHARS: [char; 4] = ['<', '>', '(', ')'];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("entity spans overlap: [{first_start}, {first_end}) and [{second_start}, {second_end})")]
    OverlappingSpans {
        first_start: usize,
        first_end: usize,
        second_start: usize,
        second_end: usize,
    },
    #[error("label {0:?} is empty or contains a reserved character")]
    UnescapableLabel(String),
    #[error("invalid span [{start}, {end}) over text of {len} characters")]
    InvalidSpan { start: usize, end: usize, len: usize },
    #[error("span surface {surface:?} does not match the text at [{start}, {end})")]
    SurfaceMismatch {
        start: usize,
        end: usize,
        surface: String,
    },
    #[error("entity {label:?} opened at character {at} is never closed")]
    UnclosedEntity { label: String, at: usize },
    #[error("closing marker {found:?} does not match open entity {expected:?}")]
    MismatchedLabel { expected: String, found: String },
    #[error("entity {inner:?} opened inside entity {outer:?}")]
    NestedEntity { outer: String, inner: String },
    #[error("closing marker {0:?} without an open entity")]
    StrayCloser(String),
    #[error("entity {0:?} has an empty surface")]
    EmptyEntity(String),
    #[error("span [{start}, {end}) is not aligned to whitespace tokens")]
    SpanNotTokenAligned { start: usize, end: usize },
    #[error("token {0:?} has no (TAG) suffix")]
    MissingTag(String),
    #[error("malformed tag {tag:?}: {reason}")]
    MalformedTag { tag: String, reason: &'static str },
    #[error("I-{0} does not continue an entity of the same label")]
    DanglingInside(String),
}

impl CodecError {
    /// Stable variant name, used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            CodecError::OverlappingSpans { .. } => "OverlappingSpans",
            CodecError::UnescapableLabel(_) => "UnescapableLabel",
            CodecError::InvalidSpan { .. } => "InvalidSpan",
            CodecError::SurfaceMismatch { .. } => "SurfaceMismatch",
            CodecError::UnclosedEntity { .. } => "UnclosedEntity",
            CodecError::MismatchedLabel { .. } => "MismatchedLabel",
            CodecError::NestedEntity { .. } => "NestedEntity",
            CodecError::StrayCloser(_) => "StrayCloser",
            CodecError::EmptyEntity(_) => "EmptyEntity",
            CodecError::SpanNotTokenAligned { .. } => "SpanNotTokenAligned",
            CodecError::MissingTag(_) => "MissingTag",
            CodecError::MalformedTag { .. } => "MalformedTag",
            CodecError::DanglingInside(_) => "DanglingInside",
        }
    }
}

pub type Result<T> = std::result::Result<T, CodecError>;

/// Returns true when `label` can appear inside a marker or BIO tag.
pub fn is_valid_label(label: &str) -> bool {
    !label.is_empty() && !label.contains(RESERVED_LABEL_CHARS)
}

fn check_label(label: &str) -> Result<()> {
    if is_valid_label(label) {
        Ok(())
    } else {
        Err(CodecError::UnescapableLabel(label.to_string()))
    }
}

/// One tagged region of a transcript.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start_char: usize,
    pub end_char: usize,
    pub label: String,
    pub surface: String,
}

/// A plain transcript with sorted, non-overlapping, non-empty entity spans.
///
/// Construction always validates; a value of this type upholds the invariants.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct TaggedTranscript {
    text: String,
    entities: Vec<EntitySpan>,
}

impl TaggedTranscript {
    /// A transcript without entities.
    pub fn plain(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            entities: Vec::new(),
        }
    }

    /// Builds a transcript from `(start_char, end_char, label)` triples,
    /// filling in each surface from `text`. Input order does not matter.
    pub fn from_offsets<L: Into<String>>(
        text: impl Into<String>,
        spans: impl IntoIterator<Item = (usize, usize, L)>,
    ) -> Result<Self> {
        let text = text.into();
        let chars: Vec<char> = text.chars().collect();
        let mut entities = Vec::new();
        for (start, end, label) in spans {
            if start >= end || end > chars.len() {
                return Err(CodecError::InvalidSpan {
                    start,
                    end,
                    len: chars.len(),
                });
            }
            entities.push(EntitySpan {
                start_char: start,
                end_char: end,
                label: label.into(),
                surface: chars[start..end].iter().collect(),
            });
        }
        Self::new(text, entities)
    }

    /// Validates `entities` against `text` and sorts them canonically.
    pub fn new(text: impl Into<String>, mut entities: Vec<EntitySpan>) -> Result<Self> {
        let text = text.into();
        let chars: Vec<char> = text.chars().collect();
        for e in &entities {
            check_label(&e.label)?;
            if e.start_char >= e.end_char || e.end_char > chars.len() {
                return Err(CodecError::InvalidSpan {
                    start: e.start_char,
                    end: e.end_char,
                    len: chars.len(),
                });
            }
            let actual: String = chars[e.start_char..e.end_char].iter().collect();
            if actual != e.surface {
                return Err(CodecError::SurfaceMismatch {
                    start: e.start_char,
                    end: e.end_char,
                    surface: e.surface.clone(),
                });
            }
        }
        entities.sort_by(|a, b| (a.start_char, a.end_char).cmp(&(b.start_char, b.end_char)));
        for pair in entities.windows(2) {
            if pair[1].start_char < pair[0].end_char {
                return Err(CodecError::OverlappingSpans {
                    first_start: pair[0].start_char,
                    first_end: pair[0].end_char,
                    second_start: pair[1].start_char,
                    second_end: pair[1].end_char,
                });
            }
        }
        Ok(Self { text, entities })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn entities(&self) -> &[EntitySpan] {
        &self.entities
    }

    pub fn into_parts(self) -> (String, Vec<EntitySpan>) {
        (self.text, self.entities)
    }

    /// Keeps only entities for which `keep` returns true. Text is unchanged.
    pub fn retain_entities(&self, mut keep: impl FnMut(&EntitySpan) -> bool) -> Self {
        Self {
            text: self.text.clone(),
            entities: self.entities.iter().filter(|e| keep(e)).cloned().collect(),
        }
    }

    /// Sorted, deduplicated entity labels.
    pub fn labels(&self) -> Vec<String> {
        let mut labels: Vec<String> = self.entities.iter().map(|e| e.label.clone()).collect();
        labels.sort();
        labels.dedup();
        labels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TagScheme {
    #[serde(rename = "span")]
    SpanMarker,
    #[serde(rename = "bio")]
    Bio,
}

impl TagScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            TagScheme::SpanMarker => "span",
            TagScheme::Bio => "bio",
        }
    }
}

impl fmt::Display for TagScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TagScheme {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "span" | "span-marker" => Ok(TagScheme::SpanMarker),
            "bio" => Ok(TagScheme::Bio),
            other => Err(format!("unknown tag scheme {other:?} (expected span or bio)")),
        }
    }
}

/// How `parse_bio` treats an `I-label` that does not continue an entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    /// Repair the dangling `I-` to `B-`.
    #[default]
    Lenient,
    /// Reject it with [`CodecError::DanglingInside`].
    Strict,
}

fn push_escaped(out: &mut String, c: char) {
    if matches!(c, '<' | '>' | '\\') {
        out.push('\\');
    }
    out.push(c);
}

pub fn serialize_span_marker(t: &TaggedTranscript) -> Result<String> {
    let mut out = String::with_capacity(t.text.len() + 16 * t.entities.len());
    let mut entities = t.entities.iter().peekable();
    let mut open: Option<&EntitySpan> = None;
    for (i, c) in t.text.chars().enumerate() {
        if let Some(e) = open {
            if e.end_char == i {
                out.push('<');
                out.push_str(&e.label);
                out.push_str(">>");
                open = None;
            }
        }
        if let Some(e) = entities.next_if(|e| e.start_char == i) {
            check_label(&e.label)?;
            out.push('<');
            out.push_str(&e.label);
            out.push('>');
            open = Some(e);
        }
        push_escaped(&mut out, c);
    }
    if let Some(e) = open {
        out.push('<');
        out.push_str(&e.label);
        out.push_str(">>");
    }
    Ok(out)
}

/// Parses span-marker text back into a transcript.
///
/// A backslash escapes the following `<`, `>` or `\`; any other backslash is
/// literal. An unescaped `>` outside a marker is taken literally.
pub fn parse_span_marker(s: &str) -> Result<TaggedTranscript> {
    let chars: Vec<char> = s.chars().collect();
    let mut text = String::with_capacity(s.len());
    let mut text_len = 0usize;
    let mut entities = Vec::new();
    // (label, start offset in plain text, position in input)
    let mut open: Option<(String, usize, usize)> = None;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            '\\' if matches!(chars.get(i + 1), Some('<' | '>' | '\\')) => {
                text.push(chars[i + 1]);
                text_len += 1;
                i += 2;
            }
            '<' => {
                let marker_at = i;
                let close = chars[i + 1..]
                    .iter()
                    .position(|&ch| ch == '>')
                    .map(|p| p + i + 1)
                    .ok_or_else(|| CodecError::MalformedTag {
                        tag: chars[i..].iter().collect(),
                        reason: "marker has no terminating '>'",
                    })?;
                let label: String = chars[i + 1..close].iter().collect();
                if !is_valid_label(&label) {
                    return Err(CodecError::MalformedTag {
                        tag: label,
                        reason: "marker label is empty or contains a reserved character",
                    });
                }
                let is_closer = chars.get(close + 1) == Some(&'>');
                i = if is_closer { close + 2 } else { close + 1 };
                match (is_closer, open.take()) {
                    (false, None) => open = Some((label, text_len, marker_at)),
                    (false, Some((outer, ..))) => {
                        return Err(CodecError::NestedEntity {
                            outer,
                            inner: label,
                        })
                    }
                    (true, None) => return Err(CodecError::StrayCloser(label)),
                    (true, Some((expected, start, _))) => {
                        if expected != label {
                            return Err(CodecError::MismatchedLabel {
                                expected,
                                found: label,
                            });
                        }
                        if start == text_len {
                            return Err(CodecError::EmptyEntity(label));
                        }
                        let surface: String = text.chars().skip(start).collect();
                        entities.push(EntitySpan {
                            start_char: start,
                            end_char: text_len,
                            label,
                            surface,
                        });
                    }
                }
            }
            _ => {
                text.push(c);
                text_len += 1;
                i += 1;
            }
        }
    }
    if let Some((label, _, at)) = open {
        return Err(CodecError::UnclosedEntity { label, at });
    }
    Ok(TaggedTranscript { text, entities })
}

/// Character ranges `[start, end)` of the whitespace-separated words of `text`.
pub fn word_ranges(text: &str) -> Vec<(usize, usize)> {
    let mut ranges = Vec::new();
    let mut start = None;
    let mut n = 0;
    for (i, c) in text.chars().enumerate() {
        match (c.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                ranges.push((s, i));
                start = None;
            }
            _ => {}
        }
        n = i + 1;
    }
    if let Some(s) = start {
        ranges.push((s, n));
    }
    ranges
}

/// Per-word BIO tags for `t`, together with the words themselves.
///
/// Fails when an entity does not start and end on word boundaries.
pub fn bio_tags(t: &TaggedTranscript) -> Result<Vec<(String, BioTag)>> {
    let ranges = word_ranges(&t.text);
    let chars: Vec<char> = t.text.chars().collect();
    let mut tags: Vec<BioTag> = vec![BioTag::Outside; ranges.len()];
    for e in &t.entities {
        check_label(&e.label)?;
        let first = ranges.iter().position(|&(s, _)| s == e.start_char);
        let last = ranges.iter().position(|&(_, end)| end == e.end_char);
        match (first, last) {
            (Some(f), Some(l)) if f <= l => {
                tags[f] = BioTag::Begin(e.label.clone());
                for tag in &mut tags[f + 1..=l] {
                    *tag = BioTag::Inside(e.label.clone());
                }
            }
            _ => {
                return Err(CodecError::SpanNotTokenAligned {
                    start: e.start_char,
                    end: e.end_char,
                })
            }
        }
    }
    Ok(ranges
        .iter()
        .map(|&(s, e)| chars[s..e].iter().collect::<String>())
        .zip(tags)
        .collect())
}

pub fn serialize_bio(t: &TaggedTranscript) -> Result<String> {
    let units: Vec<String> = bio_tags(t)?
        .into_iter()
        .map(|(word, tag)| format!("{word}({tag})"))
        .collect();
    Ok(units.join(" "))
}

/// A single BIO tag.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum BioTag {
    Outside,
    Begin(String),
    Inside(String),
}

impl fmt::Display for BioTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BioTag::Outside => f.write_str("O"),
            BioTag::Begin(l) => write!(f, "B-{l}"),
            BioTag::Inside(l) => write!(f, "I-{l}"),
        }
    }
}

impl FromStr for BioTag {
    type Err = CodecError;

    fn from_str(tag: &str) -> Result<Self> {
        let malformed = |reason| CodecError::MalformedTag {
            tag: tag.to_string(),
            reason,
        };
        if tag == "O" {
            return Ok(BioTag::Outside);
        }
        let (ctor, label): (fn(String) -> BioTag, &str) = if let Some(l) = tag.strip_prefix("B-") {
            (BioTag::Begin, l)
        } else if let Some(l) = tag.strip_prefix("I-") {
            (BioTag::Inside, l)
        } else {
            return Err(malformed("tag must be O, B-label or I-label"));
        };
        if !is_valid_label(label) {
            return Err(malformed("label is empty or contains a reserved character"));
        }
        Ok(ctor(label.to_string()))
    }
}

/// Builds a single-space-joined transcript from parallel words and tags.
///
/// Each maximal `B I* ` run of one label becomes a span. Under
/// [`ParseMode::Lenient`], an `I-label` that does not continue a run of the
/// same label starts a new one.
pub fn transcript_from_bio<W: AsRef<str>>(
    words: &[W],
    tags: &[BioTag],
    mode: ParseMode,
) -> Result<TaggedTranscript> {
    debug_assert_eq!(words.len(), tags.len());
    let mut text = String::new();
    let mut entities: Vec<EntitySpan> = Vec::new();
    let mut offset = 0usize;
    let mut current: Option<EntitySpan> = None;
    for (i, (word, tag)) in words.iter().zip(tags).enumerate() {
        let word = word.as_ref();
        if i > 0 {
            text.push(' ');
            offset += 1;
        }
        let start = offset;
        text.push_str(word);
        offset += word.chars().count();

        let continues = match (tag, &current) {
            (BioTag::Inside(l), Some(open)) => *l == open.label,
            _ => false,
        };
        if continues {
            let open = current.as_mut().expect("continuing an open entity");
            open.end_char = offset;
            open.surface.push(' ');
            open.surface.push_str(word);
            continue;
        }
        entities.extend(current.take());
        match tag {
            BioTag::Outside => {}
            BioTag::Inside(l) if mode == ParseMode::Strict => {
                return Err(CodecError::DanglingInside(l.clone()))
            }
            BioTag::Begin(l) | BioTag::Inside(l) => {
                current = Some(EntitySpan {
                    start_char: start,
                    end_char: offset,
                    label: l.clone(),
                    surface: word.to_string(),
                })
            }
        }
    }
    entities.extend(current);
    TaggedTranscript::new(text, entities)
}

/// Splits BIO text into `(word, tag)` units.
///
/// A unit ends at a `)` that is followed by whitespace or the end of input.
fn split_bio_units(s: &str) -> Result<Vec<(String, String)>> {
    let chars: Vec<char> = s.chars().collect();
    let mut units = Vec::new();
    let mut i = 0;
    loop {
        while i < chars.len() && chars[i].is_whitespace() {
            i += 1;
        }
        if i == chars.len() {
            break;
        }
        let start = i;
        let mut end = None;
        while i < chars.len() {
            if chars[i] == ')' && chars.get(i + 1).map_or(true, |c| c.is_whitespace()) {
                end = Some(i);
                break;
            }
            i += 1;
        }
        let Some(end) = end else {
            let rest: String = chars[start..].iter().collect();
            let first = rest.split_whitespace().next().unwrap_or_default();
            return Err(CodecError::MissingTag(first.to_string()));
        };
        let unit = &chars[start..=end];
        let open = unit.iter().rposition(|&c| c == '(');
        let Some(open) = open else {
            return Err(CodecError::MissingTag(unit.iter().collect()));
        };
        let word: String = unit[..open].iter().collect();
        if word.is_empty() || word.contains(char::is_whitespace) {
            let first = word.split_whitespace().next().unwrap_or_default();
            let shown = if first.is_empty() {
                unit.iter().collect()
            } else {
                first.to_string()
            };
            return Err(CodecError::MissingTag(shown));
        }
        let tag: String = unit[open + 1..unit.len() - 1].iter().collect();
        units.push((word, tag));
        i = end + 1;
    }
    Ok(units)
}

pub fn parse_bio(s: &str, mode: ParseMode) -> Result<TaggedTranscript> {
    let units = split_bio_units(s)?;
    let mut words = Vec::with_capacity(units.len());
    let mut tags = Vec::with_capacity(units.len());
    for (word, tag) in units {
        tags.push(tag.parse::<BioTag>()?);
        words.push(word);
    }
    transcript_from_bio(&words, &tags, mode)
}

pub fn parse(s: &str, scheme: TagScheme, mode: ParseMode) -> Result<TaggedTranscript> {
    match scheme {
        TagScheme::SpanMarker => parse_span_marker(s),
        TagScheme::Bio => parse_bio(s, mode),
    }
}

pub fn serialize(t: &TaggedTranscript, scheme: TagScheme) -> Result<String> {
    match scheme {
        TagScheme::SpanMarker => serialize_span_marker(t),
        TagScheme::Bio => serialize_bio(t),
    }
}

/// Re-renders a serialized transcript from one scheme into another.
pub fn convert(input: &str, from: TagScheme, to: TagScheme, mode: ParseMode) -> Result<String> {
    serialize(&parse(input, from, mode)?, to)
}
