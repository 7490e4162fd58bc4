//! Scoring of tagged transcripts against gold references.
//!
//! An entity prediction counts as correct only when its normalized surface
//! text and its label both equal those of an unmatched gold entity. Matching
//! is over multisets of `(surface, label)` pairs, not positions, so an ASR
//! insertion earlier in the utterance does not invalidate later entities.
//!
//! Corpus WER is pooled: total edit operations over total reference words.

use std::collections::{BTreeMap, HashMap};
use std::ops::AddAssign;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, ParseMode, TagScheme, TaggedTranscript};
use crate::dataset::{Dataset, DatasetRecord};
use crate::prompt::PromptSpec;

/// Schema version written into every [`EvalReport`].
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("reference is empty after normalization")]
    DegenerateReference,
    #[error("{predictions} predictions for {gold} gold records")]
    LengthMismatch { gold: usize, predictions: usize },
    #[error("no prediction for gold record {0:?}")]
    MissingPrediction(String),
    #[error("prediction id {0:?} does not match any gold record")]
    UnknownPredictionId(String),
}

impl MetricsError {
    pub fn kind(&self) -> &'static str {
        match self {
            MetricsError::DegenerateReference => "DegenerateReference",
            MetricsError::LengthMismatch { .. } => "LengthMismatch",
            MetricsError::MissingPrediction(_) => "MissingPrediction",
            MetricsError::UnknownPredictionId(_) => "UnknownPredictionId",
        }
    }
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '“' | '”' | '‘' | '’' | '„' | '‚' | '«' | '»' | '–' | '—' | '…' | '¿' | '¡'
        )
}

/// Text normalization applied before any comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Normalizer {
    pub lowercase: bool,
    /// Trim punctuation from both ends of every word.
    pub strip_punctuation: bool,
    pub collapse_whitespace: bool,
}

impl Default for Normalizer {
    fn default() -> Self {
        Self {
            lowercase: true,
            strip_punctuation: true,
            collapse_whitespace: true,
        }
    }
}

impl Normalizer {
    /// No normalization at all.
    pub fn identity() -> Self {
        Self {
            lowercase: false,
            strip_punctuation: false,
            collapse_whitespace: false,
        }
    }

    pub fn apply(&self, s: &str) -> String {
        let mut out = if self.lowercase {
            s.to_lowercase()
        } else {
            s.to_string()
        };
        if self.strip_punctuation {
            let mut stripped = String::with_capacity(out.len());
            let mut word = String::new();
            for c in out.chars() {
                if c.is_whitespace() {
                    stripped.push_str(word.trim_matches(is_punctuation));
                    word.clear();
                    stripped.push(c);
                } else {
                    word.push(c);
                }
            }
            stripped.push_str(word.trim_matches(is_punctuation));
            out = stripped;
        }
        if self.collapse_whitespace {
            out = out.split_whitespace().collect::<Vec<_>>().join(" ");
        }
        out
    }

    pub fn words(&self, s: &str) -> Vec<String> {
        self.apply(s).split_whitespace().map(str::to_string).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditOp {
    Match,
    Substitution,
    Insertion,
    Deletion,
}

/// Minimum unit-cost alignment of two word sequences.
///
/// Among optimal alignments, the backtrace from the end prefers the diagonal
/// (match or substitution), then insertion, then deletion.
pub fn align_words<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> Vec<EditOp> {
    let n = reference.len();
    let m = hypothesis.len();
    let width = m + 1;
    let mut cost = vec![0usize; (n + 1) * width];
    for (j, c) in cost.iter_mut().take(width).enumerate() {
        *c = j;
    }
    for i in 1..=n {
        cost[i * width] = i;
        for j in 1..=m {
            let sub = usize::from(reference[i - 1].as_ref() != hypothesis[j - 1].as_ref());
            cost[i * width + j] = (cost[(i - 1) * width + j - 1] + sub)
                .min(cost[i * width + j - 1] + 1)
                .min(cost[(i - 1) * width + j] + 1);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = cost[i * width + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            if here == cost[(i - 1) * width + j - 1] + usize::from(!same) {
                ops.push(if same { EditOp::Match } else { EditOp::Substitution });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && here == cost[i * width + j - 1] + 1 {
            ops.push(EditOp::Insertion);
            j -= 1;
        } else {
            ops.push(EditOp::Deletion);
            i -= 1;
        }
    }
    ops.reverse();
    ops
}

/// Edit-operation counts behind a word error rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
}

impl WerBreakdown {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// `(S + D + I) / ref_words`, or `None` without reference words.
    pub fn rate(&self) -> Option<f64> {
        (self.ref_words > 0).then(|| self.errors() as f64 / self.ref_words as f64)
    }

    fn from_ops(ops: &[EditOp], ref_words: usize) -> Self {
        let mut b = WerBreakdown {
            ref_words,
            ..Default::default()
        };
        for op in ops {
            match op {
                EditOp::Match => {}
                EditOp::Substitution => b.substitutions += 1,
                EditOp::Insertion => b.insertions += 1,
                EditOp::Deletion => b.deletions += 1,
            }
        }
        b
    }
}

impl AddAssign for WerBreakdown {
    fn add_assign(&mut self, o: Self) {
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
        self.ref_words += o.ref_words;
    }
}

fn wer_counts(reference: &str, hypothesis: &str, norm: &Normalizer) -> WerBreakdown {
    let r = norm.words(reference);
    let h = norm.words(hypothesis);
    WerBreakdown::from_ops(&align_words(&r, &h), r.len())
}

pub fn wer(reference: &str, hypothesis: &str, norm: &Normalizer) -> Result<WerBreakdown, MetricsError> {
    let b = wer_counts(reference, hypothesis, norm);
    if b.ref_words == 0 {
        return Err(MetricsError::DegenerateReference);
    }
    Ok(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl AddAssign for Counts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Precision, recall and F1; a zero denominator yields 0 and sets the flag.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub zero_division: bool,
}

impl Counts {
    pub fn prf(&self) -> Prf {
        let ratio = |num: usize, den: usize| if den == 0 { None } else { Some(num as f64 / den as f64) };
        let p = ratio(self.tp, self.tp + self.fp);
        let r = ratio(self.tp, self.tp + self.fn_);
        let (precision, recall) = (p.unwrap_or(0.0), r.unwrap_or(0.0));
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
            zero_division: p.is_none() || r.is_none() || precision + recall == 0.0,
        }
    }
}

/// Per-label match counts.
pub type EntityCounts = BTreeMap<String, Counts>;

pub fn micro(counts: &EntityCounts) -> Counts {
    let mut total = Counts::default();
    for c in counts.values() {
        total += *c;
    }
    total
}

/// Strict entity matching of `pred` against `gold`.
pub fn entity_f1(gold: &TaggedTranscript, pred: &TaggedTranscript, norm: &Normalizer) -> EntityCounts {
    let key = |e: &codec::EntitySpan| (norm.apply(&e.surface), e.label.clone());
    let mut gold_bag: HashMap<(String, String), usize> = HashMap::new();
    for e in gold.entities() {
        *gold_bag.entry(key(e)).or_insert(0) += 1;
    }
    let mut pred_bag: HashMap<(String, String), usize> = HashMap::new();
    for e in pred.entities() {
        *pred_bag.entry(key(e)).or_insert(0) += 1;
    }
    let mut out = EntityCounts::new();
    for ((surface, label), &g) in &gold_bag {
        let p = pred_bag.get(&(surface.clone(), label.clone())).copied().unwrap_or(0);
        let c = out.entry(label.clone()).or_default();
        c.tp += g.min(p);
        c.fn_ += g.saturating_sub(p);
    }
    for ((surface, label), &p) in &pred_bag {
        let g = gold_bag.get(&(surface.clone(), label.clone())).copied().unwrap_or(0);
        out.entry(label.clone()).or_default().fp += p.saturating_sub(g);
    }
    out
}

/// `(off-prompt predicted entities, predicted entities)`.
pub fn hallucination_counts(pred: &TaggedTranscript, prompt: &PromptSpec) -> (usize, usize) {
    let off = pred.entities().iter().filter(|e| !prompt.contains(&e.label)).count();
    (off, pred.entities().len())
}

/// Fraction of predicted entities whose label is not in the prompt.
pub fn hallucination_rate(pred: &TaggedTranscript, prompt: &PromptSpec) -> f64 {
    match hallucination_counts(pred, prompt) {
        (_, 0) => 0.0,
        (off, total) => off as f64 / total as f64,
    }
}

/// One line of system output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub prediction: String,
}

impl Prediction {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            id: None,
            prediction: text.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WerSummary {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
    pub wer: Option<f64>,
}

impl From<WerBreakdown> for WerSummary {
    fn from(b: WerBreakdown) -> Self {
        Self {
            substitutions: b.substitutions,
            deletions: b.deletions,
            insertions: b.insertions,
            ref_words: b.ref_words,
            wer: b.rate(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TypeScore {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub zero_division: bool,
}

impl From<Counts> for TypeScore {
    fn from(c: Counts) -> Self {
        let prf = c.prf();
        Self {
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            precision: prf.precision,
            recall: prf.recall,
            f1: prf.f1,
            zero_division: prf.zero_division,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub scheme: TagScheme,
    pub normalizer: Normalizer,
    pub n_samples: usize,
    pub parse_failures: usize,
    pub wer: WerSummary,
    pub micro: TypeScore,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    pub per_type: BTreeMap<String, TypeScore>,
    pub hallucination_rate: f64,
    pub hallucinated_entities: usize,
    /// Predicted entities in records that carry a prompt.
    pub prompted_predictions: usize,
}

/// Per-record contribution to a corpus report. Aggregation is a sum, so any
/// reduction order gives the same report.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RecordScore {
    pub wer: WerBreakdown,
    pub counts: EntityCounts,
    pub hallucinated: usize,
    pub prompted_predictions: usize,
    pub parse_failed: bool,
}

impl AddAssign for RecordScore {
    fn add_assign(&mut self, o: Self) {
        self.wer += o.wer;
        for (label, c) in o.counts {
            *self.counts.entry(label).or_default() += c;
        }
        self.hallucinated += o.hallucinated;
        self.prompted_predictions += o.prompted_predictions;
        self.parse_failed |= o.parse_failed;
    }
}

/// Scores one record against an already-parsed prediction (`None` when the
/// prediction did not parse, which scores as an empty output).
pub fn score_record(gold: &DatasetRecord, pred: Option<&TaggedTranscript>, norm: &Normalizer) -> RecordScore {
    let empty = TaggedTranscript::plain("");
    let p = pred.unwrap_or(&empty);
    let (hallucinated, prompted_predictions) = match &gold.prompt {
        Some(prompt) => hallucination_counts(p, prompt),
        None => (0, 0),
    };
    RecordScore {
        wer: wer_counts(gold.text(), p.text(), norm),
        counts: entity_f1(&gold.transcript, p, norm),
        hallucinated,
        prompted_predictions,
        parse_failed: pred.is_none(),
    }
}

/// Folds per-record scores into a report.
pub fn build_report(
    scores: impl IntoIterator<Item = RecordScore>,
    scheme: TagScheme,
    norm: &Normalizer,
) -> EvalReport {
    let mut total = RecordScore::default();
    let mut n_samples = 0;
    let mut parse_failures = 0;
    for s in scores {
        n_samples += 1;
        parse_failures += usize::from(s.parse_failed);
        total += s;
    }
    let micro_counts = micro(&total.counts);
    let micro_score = TypeScore::from(micro_counts);
    EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        scheme,
        normalizer: *norm,
        n_samples,
        parse_failures,
        wer: total.wer.into(),
        micro: micro_score,
        micro_precision: micro_score.precision,
        micro_recall: micro_score.recall,
        micro_f1: micro_score.f1,
        per_type: total
            .counts
            .into_iter()
            .map(|(label, c)| (label, TypeScore::from(c)))
            .collect(),
        hallucination_rate: if total.prompted_predictions == 0 {
            0.0
        } else {
            total.hallucinated as f64 / total.prompted_predictions as f64
        },
        hallucinated_entities: total.hallucinated,
        prompted_predictions: total.prompted_predictions,
    }
}

fn align_predictions<'a>(
    gold: &[DatasetRecord],
    preds: &'a [Prediction],
) -> Result<Vec<&'a Prediction>, MetricsError> {
    if !preds.is_empty() && preds.iter().all(|p| p.id.is_some()) {
        let mut by_id: HashMap<&str, &Prediction> = HashMap::new();
        for p in preds {
            let id = p.id.as_deref().expect("checked above");
            if !gold.iter().any(|g| g.id == id) {
                return Err(MetricsError::UnknownPredictionId(id.to_string()));
            }
            by_id.insert(id, p);
        }
        if preds.len() != gold.len() {
            return Err(MetricsError::LengthMismatch {
                gold: gold.len(),
                predictions: preds.len(),
            });
        }
        return gold
            .iter()
            .map(|g| {
                by_id
                    .get(g.id.as_str())
                    .copied()
                    .ok_or_else(|| MetricsError::MissingPrediction(g.id.clone()))
            })
            .collect();
    }
    if preds.len() != gold.len() {
        return Err(MetricsError::LengthMismatch {
            gold: gold.len(),
            predictions: preds.len(),
        });
    }
    Ok(preds.iter().collect())
}

/// Scores serialized predictions against gold records.
///
/// Predictions pair with gold records by `id` when every prediction has one,
/// otherwise by position. Lines that do not parse under `scheme` are scored
/// as empty outputs and tallied in `parse_failures`.
pub fn evaluate_corpus(
    gold: &[DatasetRecord],
    preds: &[Prediction],
    scheme: TagScheme,
    norm: &Normalizer,
) -> Result<EvalReport, MetricsError> {
    let aligned = align_predictions(gold, preds)?;
    let scores: Vec<RecordScore> = gold
        .par_iter()
        .zip(aligned.par_iter())
        .map(|(g, p)| {
            let parsed = codec::parse(&p.prediction, scheme, ParseMode::Lenient).ok();
            score_record(g, parsed.as_ref(), norm)
        })
        .collect();
    Ok(build_report(scores, scheme, norm))
}

/// Surface forms compared in the sequence-length analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceForm {
    Plain,
    SpanMarker,
    Bio,
}

/// Counts the tokens of one serialized transcript.
pub trait TokenCounter: Sync {
    fn name(&self) -> &str;
    fn count(&self, serialized: &str, form: SequenceForm) -> usize;
}

/// Whitespace words, plus one token per span marker and one per BIO tag.
#[derive(Debug, Clone, Copy, Default)]
pub struct WordMarkerCounter;

impl TokenCounter for WordMarkerCounter {
    fn name(&self) -> &str {
        "words+markers"
    }

    fn count(&self, serialized: &str, form: SequenceForm) -> usize {
        let words = |s: &str| s.split_whitespace().count();
        match form {
            SequenceForm::Plain => words(serialized),
            SequenceForm::SpanMarker => match codec::parse_span_marker(serialized) {
                Ok(t) => words(t.text()) + 2 * t.entities().len(),
                Err(_) => words(serialized),
            },
            SequenceForm::Bio => match codec::parse_bio(serialized, ParseMode::Lenient) {
                Ok(t) => 2 * words(t.text()),
                Err(_) => words(serialized),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordLengths {
    pub id: String,
    pub plain: usize,
    pub span_marker: usize,
    /// `None` when an entity is not aligned to whitespace tokens.
    pub bio: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LengthSummary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub max: usize,
}

impl LengthSummary {
    fn of(values: &mut [usize]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        values.sort_unstable();
        let n = values.len();
        let median = if n % 2 == 1 {
            values[n / 2] as f64
        } else {
            (values[n / 2 - 1] + values[n / 2]) as f64 / 2.0
        };
        Self {
            count: n,
            mean: values.iter().sum::<usize>() as f64 / n as f64,
            median,
            max: values[n - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqLengthReport {
    pub schema_version: u32,
    pub tokenizer: String,
    pub records: Vec<RecordLengths>,
    pub summary: BTreeMap<SequenceForm, LengthSummary>,
    /// mean(span) / mean(plain) over all records.
    pub span_overhead_ratio: Option<f64>,
    /// mean(bio) / mean(plain) over token-aligned records.
    pub bio_overhead_ratio: Option<f64>,
    pub bio_skipped: usize,
}

pub fn sequence_length_report(d: &Dataset, tokenizer: &dyn TokenCounter) -> SeqLengthReport {
    let records: Vec<RecordLengths> = d
        .records()
        .iter()
        .map(|r| {
            let t = &r.transcript;
            let span = codec::serialize_span_marker(t).expect("valid transcripts serialize");
            RecordLengths {
                id: r.id.clone(),
                plain: tokenizer.count(t.text(), SequenceForm::Plain),
                span_marker: tokenizer.count(&span, SequenceForm::SpanMarker),
                bio: codec::serialize_bio(t)
                    .ok()
                    .map(|s| tokenizer.count(&s, SequenceForm::Bio)),
            }
        })
        .collect();

    let mut plain: Vec<usize> = records.iter().map(|r| r.plain).collect();
    let mut span: Vec<usize> = records.iter().map(|r| r.span_marker).collect();
    let mut bio: Vec<usize> = records.iter().filter_map(|r| r.bio).collect();
    let aligned_plain: usize = records.iter().filter(|r| r.bio.is_some()).map(|r| r.plain).sum();
    let plain_total: usize = plain.iter().sum();
    let span_total: usize = span.iter().sum();
    let bio_total: usize = bio.iter().sum();
    let bio_skipped = records.len() - bio.len();

    let mut summary = BTreeMap::new();
    summary.insert(SequenceForm::Plain, LengthSummary::of(&mut plain));
    summary.insert(SequenceForm::SpanMarker, LengthSummary::of(&mut span));
    summary.insert(SequenceForm::Bio, LengthSummary::of(&mut bio));

    SeqLengthReport {
        schema_version: REPORT_SCHEMA_VERSION,
        tokenizer: tokenizer.name().to_string(),
        records,
        summary,
        span_overhead_ratio: (plain_total > 0).then(|| span_total as f64 / plain_total as f64),
        bio_overhead_ratio: (aligned_plain > 0).then(|| bio_total as f64 / aligned_plain as f64),
        bio_skipped,
    }
}
