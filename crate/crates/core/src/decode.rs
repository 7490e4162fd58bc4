//! Greedy decoding over a pluggable next-token model, with a tunable bias on
//! the entity-start token.
//!
//! Raising the start-token logit makes the decoder open entities more often
//! (recall up); lowering it makes it more conservative (precision up). The
//! bias is applied only while no entity or marker is open, so the `<` that
//! begins a closing marker is left alone unless `bias_everywhere` is set.

use std::collections::{HashMap, HashSet, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, is_valid_label, CodecError, ParseMode, TagScheme, TaggedTranscript};
use crate::dataset::DatasetRecord;
use crate::metrics::{self, Normalizer, SequenceForm, TokenCounter, WordMarkerCounter};
use crate::prompt::PromptSpec;

/// Step cap when neither the caller nor the model sets one.
pub const DEFAULT_MAX_STEPS: usize = 256;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecodeError {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("step {step}: model returned {found} logits for a vocabulary of {expected}")]
    LogitCount {
        step: usize,
        expected: usize,
        found: usize,
    },
    #[error("step {step}: model returned a non-finite logit")]
    NonFiniteLogit { step: usize },
    #[error("token {0:?} is not in the vocabulary")]
    UnknownToken(String),
    #[error("record {0:?} has no prompt")]
    MissingPrompt(String),
    #[error("bias grid is empty")]
    EmptyBiasGrid,
}

impl DecodeError {
    pub fn kind(&self) -> &'static str {
        match self {
            DecodeError::InvalidModel(_) => "InvalidModel",
            DecodeError::LogitCount { .. } => "InvalidLogits",
            DecodeError::NonFiniteLogit { .. } => "InvalidLogits",
            DecodeError::UnknownToken(_) => "UnknownToken",
            DecodeError::MissingPrompt(_) => "MissingPrompt",
            DecodeError::EmptyBiasGrid => "EmptyBiasGrid",
        }
    }
}

pub type Result<T> = std::result::Result<T, DecodeError>;

/// Autoregressive next-token scorer.
///
/// Token strings concatenate to the decoded text. The start token is the one
/// whose logit receives the entity bias; it is conventionally `<`.
pub trait TokenModel {
    fn vocab(&self) -> &[String];
    fn start_token(&self) -> usize;
    fn eos_token(&self) -> usize;
    /// Exactly `vocab().len()` finite logits for the next token.
    fn next_logits(&self, context: &[usize], prompt: &PromptSpec) -> Vec<f64>;
    fn max_steps(&self) -> Option<usize> {
        None
    }
    /// Whether concurrent read-only queries are safe. When false, harness
    /// code decodes records one at a time.
    fn concurrent_safe(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRow {
    pub context_suffix: Vec<String>,
    /// Row applies only when every listed label is in the prompt.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prompt_labels: Vec<String>,
    pub logits: Vec<f64>,
}

/// On-disk form of a [`ToyTableModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTableSpec {
    pub vocab: Vec<String>,
    pub eos: String,
    pub start_token: String,
    pub rows: Vec<ToyRow>,
    pub default_logits: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
struct CompiledRow {
    suffix: Vec<usize>,
    prompt_labels: Vec<String>,
    logits: Vec<f64>,
}

/// Deterministic table-driven model.
///
/// The logits for a context come from the row with the longest
/// `context_suffix` that ends the context and whose prompt condition holds;
/// equal lengths resolve to the earlier row. With no matching row the
/// default logits apply.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTableModel {
    spec: ToyTableSpec,
    eos: usize,
    start: usize,
    rows: Vec<CompiledRow>,
}

impl ToyTableModel {
    pub fn new(spec: ToyTableSpec) -> Result<Self> {
        let invalid = |m: String| DecodeError::InvalidModel(m);
        let v = spec.vocab.len();
        let mut seen = HashSet::new();
        for t in &spec.vocab {
            if !seen.insert(t.as_str()) {
                return Err(invalid(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        let index = |t: &str| {
            spec.vocab
                .iter()
                .position(|x| x == t)
                .ok_or_else(|| invalid(format!("token {t:?} is not in the vocabulary")))
        };
        let eos = index(&spec.eos)?;
        let start = index(&spec.start_token)?;
        let check = |what: &str, logits: &[f64]| {
            if logits.len() != v {
                return Err(invalid(format!("{what}: {} logits for {v} tokens", logits.len())));
            }
            if logits.iter().any(|x| !x.is_finite()) {
                return Err(invalid(format!("{what}: non-finite logit")));
            }
            Ok(())
        };
        check("default_logits", &spec.default_logits)?;
        let mut rows = Vec::with_capacity(spec.rows.len());
        for (i, row) in spec.rows.iter().enumerate() {
            check(&format!("row {i}"), &row.logits)?;
            let suffix = row
                .context_suffix
                .iter()
                .map(|t| index(t))
                .collect::<Result<Vec<_>>>()?;
            rows.push(CompiledRow {
                suffix,
                prompt_labels: row.prompt_labels.clone(),
                logits: row.logits.clone(),
            });
        }
        Ok(Self {
            spec,
            eos,
            start,
            rows,
        })
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let spec: ToyTableSpec =
            serde_json::from_str(json).map_err(|e| DecodeError::InvalidModel(e.to_string()))?;
        Self::new(spec)
    }

    pub fn spec(&self) -> &ToyTableSpec {
        &self.spec
    }

    pub fn token_id(&self, token: &str) -> Option<usize> {
        self.spec.vocab.iter().position(|t| t == token)
    }
}

impl TokenModel for ToyTableModel {
    fn vocab(&self) -> &[String] {
        &self.spec.vocab
    }

    fn start_token(&self) -> usize {
        self.start
    }

    fn eos_token(&self) -> usize {
        self.eos
    }

    fn next_logits(&self, context: &[usize], prompt: &PromptSpec) -> Vec<f64> {
        let mut best: Option<&CompiledRow> = None;
        for row in &self.rows {
            if !context.ends_with(&row.suffix) {
                continue;
            }
            if !row.prompt_labels.iter().all(|l| prompt.contains(l)) {
                continue;
            }
            if best.map_or(true, |b| row.suffix.len() > b.suffix.len()) {
                best = Some(row);
            }
        }
        best.map_or(&self.spec.default_logits, |r| &r.logits).clone()
    }

    fn max_steps(&self) -> Option<usize> {
        self.spec.max_steps
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax after adding `bias` to the start-token logit only.
pub fn biased_softmax(logits: &[f64], start_token: usize, bias: f64) -> Vec<f64> {
    let mut shifted = logits.to_vec();
    shifted[start_token] += bias;
    softmax(&shifted)
}

/// Where the decoder is relative to span markers in the text emitted so far.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum MarkerState {
    /// Outside any entity. `escaped` after an unescaped backslash.
    Text { escaped: bool },
    /// Inside `<...` of an opening marker.
    Opener { label: String },
    /// Inside an entity's surface text.
    Entity {
        label: String,
        nonempty: bool,
        escaped: bool,
    },
    /// Inside `<...` of a closing marker for entity `open`.
    Closer { open: String, label: String },
    /// After `<label>` inside an entity; only `>` may follow.
    CloserEnd { open: String },
    /// The text can no longer parse as span-marker output.
    Invalid,
}

impl Default for MarkerState {
    fn default() -> Self {
        MarkerState::Text { escaped: false }
    }
}

impl MarkerState {
    pub fn is_outside(&self) -> bool {
        matches!(self, MarkerState::Text { .. })
    }

    /// Feeds one character. With `allowed`, an opening marker must remain a
    /// prefix of one of those labels and close on one of them exactly.
    pub fn advance(&self, c: char, allowed: Option<&[String]>) -> MarkerState {
        use MarkerState::*;
        match self {
            Text { escaped: true } => Text { escaped: false },
            Text { escaped: false } => match c {
                '\\' => Text { escaped: true },
                '<' => {
                    if allowed.map_or(true, |a| !a.is_empty()) {
                        Opener { label: String::new() }
                    } else {
                        Invalid
                    }
                }
                _ => Text { escaped: false },
            },
            Opener { label } => match c {
                '>' => {
                    let ok = is_valid_label(label)
                        && allowed.map_or(true, |a| a.iter().any(|l| l == label));
                    if ok {
                        Entity {
                            label: label.clone(),
                            nonempty: false,
                            escaped: false,
                        }
                    } else {
                        Invalid
                    }
                }
                '<' | '(' | ')' => Invalid,
                _ => {
                    let mut next = label.clone();
                    next.push(c);
                    if allowed.map_or(true, |a| a.iter().any(|l| l.starts_with(&next))) {
                        Opener { label: next }
                    } else {
                        Invalid
                    }
                }
            },
            Entity {
                label,
                escaped: true,
                ..
            } => Entity {
                label: label.clone(),
                nonempty: true,
                escaped: false,
            },
            Entity {
                label,
                nonempty,
                escaped: false,
            } => match c {
                '\\' => Entity {
                    label: label.clone(),
                    nonempty: *nonempty,
                    escaped: true,
                },
                '<' if *nonempty => Closer {
                    open: label.clone(),
                    label: String::new(),
                },
                // `<label>>` right after the opener reads as a closing marker
                '<' | '>' if !*nonempty => Invalid,
                _ => Entity {
                    label: label.clone(),
                    nonempty: true,
                    escaped: false,
                },
            },
            Closer { open, label } => match c {
                '>' if label == open => CloserEnd { open: open.clone() },
                '>' => Invalid,
                _ => {
                    let mut next = label.clone();
                    next.push(c);
                    if open.starts_with(&next) {
                        Closer {
                            open: open.clone(),
                            label: next,
                        }
                    } else {
                        Invalid
                    }
                }
            },
            CloserEnd { .. } => {
                if c == '>' {
                    Text { escaped: false }
                } else {
                    Invalid
                }
            }
            Invalid => Invalid,
        }
    }

    pub fn advance_str(&self, s: &str, allowed: Option<&[String]>) -> MarkerState {
        let mut state = self.clone();
        for c in s.chars() {
            state = state.advance(c, allowed);
            if state == MarkerState::Invalid {
                break;
            }
        }
        state
    }

    pub fn from_text(text: &str) -> MarkerState {
        MarkerState::default().advance_str(text, None)
    }
}

/// Whether decoding is restricted to entity labels present in the prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrammarMode {
    #[default]
    Off,
    Prompt,
}

/// Whether some sequence of non-end tokens leads from `state` back outside
/// every entity. Results, including every state found to be a dead end, are
/// memoized in `cache`.
fn can_finish(
    state: &MarkerState,
    vocab: &[String],
    eos: usize,
    allowed: &[String],
    cache: &mut HashMap<MarkerState, bool>,
) -> bool {
    if state.is_outside() {
        return true;
    }
    if let Some(&known) = cache.get(state) {
        return known;
    }
    let mut seen: HashSet<MarkerState> = HashSet::from([state.clone()]);
    let mut queue = VecDeque::from([state.clone()]);
    while let Some(s) = queue.pop_front() {
        for (i, token) in vocab.iter().enumerate() {
            if i == eos {
                continue;
            }
            let next = s.advance_str(token, Some(allowed));
            if next.is_outside() || cache.get(&next) == Some(&true) {
                cache.insert(state.clone(), true);
                return true;
            }
            if next != MarkerState::Invalid && cache.get(&next) != Some(&false) && seen.insert(next.clone()) {
                queue.push_back(next);
            }
        }
    }
    for s in seen {
        cache.insert(s, false);
    }
    false
}

fn mask_for_state(
    logits: &mut [f64],
    vocab: &[String],
    eos: usize,
    state: &MarkerState,
    allowed: &[String],
    cache: &mut HashMap<MarkerState, bool>,
) {
    for (i, token) in vocab.iter().enumerate() {
        let ok = if i == eos {
            state.is_outside()
        } else {
            let next = state.advance_str(token, Some(allowed));
            next != MarkerState::Invalid && can_finish(&next, vocab, eos, allowed, cache)
        };
        if !ok {
            logits[i] = f64::NEG_INFINITY;
        }
    }
}

/// Masks every token that would open a marker for a label outside the
/// prompt, break the marker grammar, end the sequence inside an entity, or
/// lead to a marker no sequence of vocabulary tokens can complete.
///
/// `context` is the text emitted so far.
pub fn enforce_prompt_grammar(
    logits: &[f64],
    vocab: &[String],
    eos: usize,
    context: &str,
    prompt: &PromptSpec,
    mode: GrammarMode,
) -> Vec<f64> {
    let mut out = logits.to_vec();
    if mode == GrammarMode::Prompt {
        let allowed: Vec<String> = prompt.labels().map(str::to_string).collect();
        let state = MarkerState::from_text(context);
        mask_for_state(&mut out, vocab, eos, &state, &allowed, &mut HashMap::new());
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub bias: f64,
    pub grammar: GrammarMode,
    /// Bias every occurrence of the start token, including inside entities.
    pub bias_everywhere: bool,
    pub max_steps: Option<usize>,
    pub scheme: TagScheme,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            bias: 0.0,
            grammar: GrammarMode::Off,
            bias_everywhere: false,
            max_steps: None,
            scheme: TagScheme::SpanMarker,
        }
    }
}

impl DecodeOptions {
    pub fn with_bias(bias: f64) -> Self {
        Self {
            bias,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    pub text: String,
    /// `None` when the emitted text does not parse.
    pub transcript: Option<TaggedTranscript>,
    pub parse_error: Option<CodecError>,
    /// The step cap was reached before the end token.
    pub overflow: bool,
}

fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if v == f64::NEG_INFINITY {
            continue;
        }
        if best.map_or(true, |b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

fn checked_logits<M: TokenModel + ?Sized>(
    model: &M,
    context: &[usize],
    prompt: &PromptSpec,
    step: usize,
) -> Result<Vec<f64>> {
    let logits = model.next_logits(context, prompt);
    let expected = model.vocab().len();
    if logits.len() != expected {
        return Err(DecodeError::LogitCount {
            step,
            expected,
            found: logits.len(),
        });
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(DecodeError::NonFiniteLogit { step });
    }
    Ok(logits)
}

/// Greedy decoding: at each step the highest biased logit wins, ties going
/// to the lowest vocabulary index. Stops at the end token, at the step cap
/// (flagged as overflow), or when grammar masking leaves no token.
pub fn greedy_decode<M: TokenModel + ?Sized>(
    model: &M,
    prompt: &PromptSpec,
    opts: &DecodeOptions,
) -> Result<Decoded> {
    let vocab = model.vocab();
    let start = model.start_token();
    let eos = model.eos_token();
    let max_steps = opts
        .max_steps
        .or_else(|| model.max_steps())
        .unwrap_or(DEFAULT_MAX_STEPS);
    let allowed: Vec<String> = prompt.labels().map(str::to_string).collect();

    let mut tokens = Vec::new();
    let mut text = String::new();
    let mut state = MarkerState::default();
    let mut viable = HashMap::new();
    let mut finished = false;
    for step in 0..max_steps {
        let mut logits = checked_logits(model, &tokens, prompt, step)?;
        if opts.bias_everywhere || state.is_outside() {
            logits[start] += opts.bias;
        }
        if opts.grammar == GrammarMode::Prompt {
            mask_for_state(&mut logits, vocab, eos, &state, &allowed, &mut viable);
        }
        let Some(next) = argmax(&logits) else {
            finished = true;
            break;
        };
        if next == eos {
            finished = true;
            break;
        }
        tokens.push(next);
        text.push_str(&vocab[next]);
        state = state.advance_str(&vocab[next], None);
    }
    let (transcript, parse_error) = match codec::parse(&text, opts.scheme, ParseMode::Lenient) {
        Ok(t) => (Some(t), None),
        Err(e) => (None, Some(e)),
    };
    Ok(Decoded {
        tokens,
        text,
        transcript,
        parse_error,
        overflow: !finished,
    })
}

/// Maps token strings to vocabulary ids.
pub fn token_ids<M: TokenModel + ?Sized>(model: &M, tokens: &[String]) -> Result<Vec<usize>> {
    tokens
        .iter()
        .map(|t| {
            model
                .vocab()
                .iter()
                .position(|v| v == t)
                .ok_or_else(|| DecodeError::UnknownToken(t.clone()))
        })
        .collect()
}

/// Splits `text` into vocabulary tokens by greedy longest match.
pub fn tokenize_longest_match<M: TokenModel + ?Sized>(model: &M, text: &str) -> Result<Vec<usize>> {
    let vocab = model.vocab();
    let eos = model.eos_token();
    let mut out = Vec::new();
    let mut rest = text;
    while !rest.is_empty() {
        let best = vocab
            .iter()
            .enumerate()
            .filter(|&(i, t)| i != eos && !t.is_empty() && rest.starts_with(t.as_str()))
            .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(&a.0)));
        let Some((i, t)) = best else {
            let shown: String = rest.chars().take(16).collect();
            return Err(DecodeError::UnknownToken(shown));
        };
        out.push(i);
        rest = &rest[t.len()..];
    }
    Ok(out)
}

/// Teacher-forced negative log-likelihood of `target` under the unbiased model.
pub fn sequence_nll<M: TokenModel + ?Sized>(model: &M, prompt: &PromptSpec, target: &[usize]) -> Result<f64> {
    let v = model.vocab().len();
    let mut nll = 0.0;
    for (step, &y) in target.iter().enumerate() {
        if y >= v {
            return Err(DecodeError::UnknownToken(format!("#{y}")));
        }
        let logits = checked_logits(model, &target[..step], prompt, step)?;
        nll -= logits[y] - log_sum_exp(&logits);
    }
    Ok(nll.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasSweepPoint {
    pub bias: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub wer: Option<f64>,
    pub hallucination_rate: f64,
    pub overflows: usize,
}

/// Four times the longest reference, counted in words plus span markers.
pub fn default_max_steps(eval_set: &[DatasetRecord]) -> usize {
    let longest = eval_set
        .iter()
        .map(|r| {
            let s = codec::serialize_span_marker(&r.transcript).unwrap_or_default();
            WordMarkerCounter.count(&s, SequenceForm::SpanMarker)
        })
        .max()
        .unwrap_or(0);
    (4 * longest).max(1)
}

/// Decodes every record with its own prompt.
pub fn decode_records<M: TokenModel + Sync + ?Sized>(
    model: &M,
    records: &[DatasetRecord],
    opts: &DecodeOptions,
) -> Result<Vec<Decoded>> {
    let one = |r: &DatasetRecord| {
        let prompt = r
            .prompt
            .as_ref()
            .ok_or_else(|| DecodeError::MissingPrompt(r.id.clone()))?;
        greedy_decode(model, prompt, opts)
    };
    if model.concurrent_safe() {
        // collect first so the error reported is the first failing record
        records.par_iter().map(one).collect::<Vec<_>>().into_iter().collect()
    } else {
        records.iter().map(one).collect()
    }
}

/// Precision/recall/F1 of greedy decoding at each bias, sorted by bias.
pub fn bias_sweep<M: TokenModel + Sync + ?Sized>(
    model: &M,
    eval_set: &[DatasetRecord],
    biases: &[f64],
    norm: &Normalizer,
    base: &DecodeOptions,
) -> Result<Vec<BiasSweepPoint>> {
    if biases.is_empty() {
        return Err(DecodeError::EmptyBiasGrid);
    }
    let mut grid = biases.to_vec();
    grid.sort_by(f64::total_cmp);
    let max_steps = base
        .max_steps
        .or_else(|| model.max_steps())
        .unwrap_or_else(|| default_max_steps(eval_set));
    grid.into_iter()
        .map(|bias| {
            let opts = DecodeOptions {
                bias,
                max_steps: Some(max_steps),
                ..*base
            };
            let decoded = decode_records(model, eval_set, &opts)?;
            let overflows = decoded.iter().filter(|d| d.overflow).count();
            let scores = eval_set
                .iter()
                .zip(&decoded)
                .map(|(r, d)| metrics::score_record(r, d.transcript.as_ref(), norm));
            let report = metrics::build_report(scores, opts.scheme, norm);
            Ok(BiasSweepPoint {
                bias,
                precision: report.micro_precision,
                recall: report.micro_recall,
                f1: report.micro_f1,
                tp: report.micro.tp,
                fp: report.micro.fp,
                fn_: report.micro.fn_,
                wer: report.wer.wer,
                hallucination_rate: report.hallucination_rate,
                overflows,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits_for(vocab: &[&str], set: &[(&str, f64)], base: f64) -> Vec<f64> {
        vocab
            .iter()
            .map(|t| set.iter().find(|(k, _)| k == t).map_or(base, |(_, v)| *v))
            .collect()
    }

    fn model(vocab: &[&str], rows: &[(&[&str], &[(&str, f64)])], default: &[(&str, f64)]) -> ToyTableModel {
        ToyTableModel::new(ToyTableSpec {
            vocab: vocab.iter().map(|s| s.to_string()).collect(),
            eos: "</s>".into(),
            start_token: "<".into(),
            rows: rows
                .iter()
                .map(|(ctx, set)| ToyRow {
                    context_suffix: ctx.iter().map(|s| s.to_string()).collect(),
                    prompt_labels: vec![],
                    logits: logits_for(vocab, set, -10.0),
                })
                .collect(),
            default_logits: logits_for(vocab, default, -10.0),
            max_steps: None,
        })
        .unwrap()
    }

    const FIG1_VOCAB: &[&str] = &["</s>", "<", "The ", "occupation>", "astronaut", "<occupation>>", " explored"];

    fn fig1_model() -> ToyTableModel {
        model(
            FIG1_VOCAB,
            &[
                (&[], &[("The ", 5.0)]),
                (&["The "], &[("<", 5.0)]),
                (&["<"], &[("occupation>", 5.0)]),
                (&["occupation>"], &[("astronaut", 5.0)]),
                (&["astronaut"], &[("<occupation>>", 5.0)]),
                (&["<occupation>>"], &[(" explored", 5.0)]),
                (&[" explored"], &[("</s>", 5.0)]),
            ],
            &[("</s>", 0.0)],
        )
    }

    #[test]
    fn softmax_examples() {
        let p = biased_softmax(&[1.0, 2.0], 0, 1.0);
        assert!((p[0] - 0.5).abs() < 1e-15);
        assert_eq!(biased_softmax(&[0.3, -1.0, 2.0], 1, 0.0), softmax(&[0.3, -1.0, 2.0]));
        let p = biased_softmax(&[0.0, 0.0, 0.0], 0, 2f64.ln());
        assert!((p[0] - 0.5).abs() < 1e-15);
        let p = biased_softmax(&[1000.0, -1000.0, 3.0], 1, -1e9);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(p[1], 0.0);
    }

    #[test]
    fn decodes_scripted_figure_sequence() {
        let m = fig1_model();
        let d = greedy_decode(&m, &PromptSpec::from_labels(["occupation"]), &DecodeOptions::default()).unwrap();
        assert_eq!(d.text, "The <occupation>astronaut<occupation>> explored");
        assert!(!d.overflow);
        let t = d.transcript.unwrap();
        assert_eq!(t.entities().len(), 1);
        assert_eq!(t.entities()[0].surface, "astronaut");
        assert_eq!(t.entities()[0].label, "occupation");
    }

    #[test]
    fn huge_negative_bias_suppresses_entities() {
        let m = fig1_model();
        let d = greedy_decode(&m, &PromptSpec::from_labels(["occupation"]), &DecodeOptions::with_bias(-1e9)).unwrap();
        assert!(d.transcript.unwrap().entities().is_empty());
        assert!(!d.tokens.contains(&m.start_token()));
    }

    #[test]
    fn bias_flips_a_trailing_start_token() {
        // "<" trails "alice" by exactly 1.0 at the first step
        let vocab = ["</s>", "<", "x>", "alice", "<x>>"];
        let m = model(
            &vocab,
            &[
                (&[], &[("alice", 1.0), ("<", 0.0)]),
                (&["alice"], &[("</s>", 5.0)]),
                (&["<"], &[("x>", 5.0)]),
                (&["x>"], &[("alice", 5.0)]),
                (&["x>", "alice"], &[("<x>>", 5.0)]),
                (&["<x>>"], &[("</s>", 5.0)]),
            ],
            &[("</s>", 0.0)],
        );
        let p = PromptSpec::from_labels(["x"]);
        let spans = |bias| {
            greedy_decode(&m, &p, &DecodeOptions::with_bias(bias))
                .unwrap()
                .transcript
                .unwrap()
                .entities()
                .len()
        };
        assert_eq!(spans(0.0), 0);
        assert_eq!(spans(2.0), 1);
        // exact tie at bias 1.0 goes to the lower index, which is "<"
        assert_eq!(spans(1.0), 1);
    }

    #[test]
    fn overflow_is_flagged_with_result() {
        let m = model(&["</s>", "<", "a"], &[], &[("a", 1.0)]);
        let opts = DecodeOptions {
            max_steps: Some(4),
            ..DecodeOptions::default()
        };
        let d = greedy_decode(&m, &PromptSpec::default(), &opts).unwrap();
        assert!(d.overflow);
        assert_eq!(d.text, "aaaa");
    }

    #[test]
    fn nll_examples() {
        // uniform model
        let m = model(&["</s>", "<", "a", "b"], &[], &[("</s>", 0.0), ("<", 0.0), ("a", 0.0), ("b", 0.0)]);
        let nll = sequence_nll(&m, &PromptSpec::default(), &[2, 3, 2]).unwrap();
        assert!((nll - 3.0 * 4f64.ln()).abs() < 1e-12);
        // effectively certain model
        let m = model(&["</s>", "<", "a"], &[], &[("a", 800.0)]);
        assert_eq!(sequence_nll(&m, &PromptSpec::default(), &[2, 2]).unwrap(), 0.0);
        assert!(matches!(
            token_ids(&m, &["zz".to_string()]),
            Err(DecodeError::UnknownToken(_))
        ));
    }

    #[test]
    fn marker_state_tracking() {
        assert!(MarkerState::from_text("plain \\< text").is_outside());
        assert!(matches!(MarkerState::from_text("a <occ"), MarkerState::Opener { .. }));
        assert!(matches!(MarkerState::from_text("<x>ab"), MarkerState::Entity { nonempty: true, .. }));
        assert!(matches!(MarkerState::from_text("<x>ab<x"), MarkerState::Closer { .. }));
        assert!(matches!(MarkerState::from_text("<x>ab<x>"), MarkerState::CloserEnd { .. }));
        assert!(MarkerState::from_text("<x>ab<x>> tail").is_outside());
        assert!(matches!(MarkerState::from_text("<x>a\\<b"), MarkerState::Entity { .. }));
        assert_eq!(MarkerState::from_text("<x><x>>"), MarkerState::Invalid);
        assert_eq!(MarkerState::from_text("<x>a<y>>"), MarkerState::Invalid);
    }

    #[test]
    fn grammar_prefix_filtering() {
        let vocab: Vec<String> = ["</s>", "<", "upation>", "ur>", "upation", "a", ">", "occupation>"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let logits = vec![0.0; vocab.len()];
        let prompt = PromptSpec::from_labels(["occupation"]);
        let out = enforce_prompt_grammar(&logits, &vocab, 0, "<occ", &prompt, GrammarMode::Prompt);
        let alive: Vec<&str> = vocab
            .iter()
            .zip(&out)
            .filter(|(_, l)| l.is_finite())
            .map(|(t, _)| t.as_str())
            .collect();
        assert_eq!(alive, ["upation>", "upation"]);

        let off = enforce_prompt_grammar(&logits, &vocab, 0, "<occ", &prompt, GrammarMode::Off);
        assert_eq!(off, logits);

        let out = enforce_prompt_grammar(&logits, &vocab, 0, "", &PromptSpec::default(), GrammarMode::Prompt);
        assert_eq!(out[1], f64::NEG_INFINITY);
        assert!(out[0].is_finite());
    }

    #[test]
    fn grammar_avoids_markers_that_cannot_be_completed() {
        let vocab: Vec<String> = ["</s>", "<", "p", "e>", "person>", "x", "<person>>"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let logits = vec![0.0; vocab.len()];
        let alive = |context: &str, labels: &[&str]| -> Vec<String> {
            let prompt = PromptSpec::from_labels(labels.iter().copied());
            let out = enforce_prompt_grammar(&logits, &vocab, 0, context, &prompt, GrammarMode::Prompt);
            vocab.iter().zip(&out).filter(|(_, l)| l.is_finite()).map(|(t, _)| t.clone()).collect()
        };
        // "<p" could only continue as "<pe>", which is not prompted
        assert_eq!(alive("<", &["person"]), ["person>"]);
        // no token sequence spells the closer for "pe", so "<" is masked
        assert_eq!(alive("", &["pe"]), ["</s>", "p", "e>", "person>", "x"]);

        // the decoder used to stop at "<p" with every token masked
        let m = model(
            &["</s>", "<", "p", "e>", "person>", "x", "<person>>"],
            &[
                (&["<"], &[("p", 2.0), ("person>", 1.0)]),
                (&["person>"], &[("x", 2.0)]),
                (&["x"], &[("<person>>", 2.0)]),
                (&["<person>>"], &[("</s>", 2.0)]),
            ],
            &[("<", 1.0)],
        );
        let opts = DecodeOptions {
            grammar: GrammarMode::Prompt,
            ..DecodeOptions::default()
        };
        let d = greedy_decode(&m, &PromptSpec::from_labels(["person"]), &opts).unwrap();
        assert_eq!(d.text, "<person>x<person>>");
        assert!(!d.overflow);
    }

    #[test]
    fn grammar_blocks_unprompted_labels_during_decode() {
        let vocab = ["</s>", "<", "person>", "org>", "acme", "<org>>", "<person>>"];
        let m = model(
            &vocab,
            &[
                (&[], &[("<", 5.0), ("acme", 1.0)]),
                (&["<"], &[("org>", 5.0), ("person>", 4.0)]),
                (&["org>"], &[("acme", 5.0)]),
                (&["person>"], &[("acme", 5.0)]),
                (&["org>", "acme"], &[("<org>>", 5.0)]),
                (&["person>", "acme"], &[("<person>>", 5.0)]),
                (&["acme"], &[("</s>", 5.0)]),
                (&["<org>>"], &[("</s>", 5.0)]),
                (&["<person>>"], &[("</s>", 5.0)]),
            ],
            &[("</s>", 0.0)],
        );
        let prompt = PromptSpec::from_labels(["person"]);
        let free = greedy_decode(&m, &prompt, &DecodeOptions::default()).unwrap();
        assert_eq!(free.text, "<org>acme<org>>");
        let opts = DecodeOptions {
            grammar: GrammarMode::Prompt,
            ..DecodeOptions::default()
        };
        let constrained = greedy_decode(&m, &prompt, &opts).unwrap();
        assert_eq!(constrained.text, "<person>acme<person>>");
        let none = greedy_decode(&m, &PromptSpec::default(), &opts).unwrap();
        assert_eq!(none.text, "acme");
    }

    #[test]
    fn close_marker_start_is_not_biased() {
        // inside the entity "<" competes with "y"; a large bias must not
        // force an early close unless bias_everywhere is set
        let vocab = ["</s>", "<", "x>", "y", "x>>"];
        let m = model(
            &vocab,
            &[
                (&[], &[("<", 5.0)]),
                (&["<"], &[("x>", 5.0)]),
                (&["x>"], &[("y", 5.0)]),
                (&["y"], &[("y", 2.0), ("<", 1.0)]),
                (&["y", "y"], &[("<", 5.0)]),
                (&["y", "<"], &[("x>>", 5.0)]),
                (&["x>>"], &[("</s>", 5.0)]),
            ],
            &[("</s>", 0.0)],
        );
        let p = PromptSpec::from_labels(["x"]);
        let d = greedy_decode(&m, &p, &DecodeOptions::with_bias(3.0)).unwrap();
        assert_eq!(d.text, "<x>yy<x>>");
        let opts = DecodeOptions {
            bias_everywhere: true,
            ..DecodeOptions::with_bias(3.0)
        };
        let d = greedy_decode(&m, &p, &opts).unwrap();
        assert_eq!(d.text, "<x>y<x>>");
    }

    #[test]
    fn toy_model_validation() {
        let ok = r#"{"vocab":["</s>","<","a"],"eos":"</s>","start_token":"<","rows":[],"default_logits":[0,0,0]}"#;
        assert!(ToyTableModel::from_json(ok).is_ok());
        let short = r#"{"vocab":["</s>","<","a"],"eos":"</s>","start_token":"<","rows":[],"default_logits":[0,0]}"#;
        assert!(matches!(ToyTableModel::from_json(short), Err(DecodeError::InvalidModel(_))));
        let no_eos = r#"{"vocab":["<","a"],"eos":"</s>","start_token":"<","rows":[],"default_logits":[0,0]}"#;
        assert!(ToyTableModel::from_json(no_eos).is_err());
        let bad_ctx = r#"{"vocab":["</s>","<"],"eos":"</s>","start_token":"<","rows":[{"context_suffix":["q"],"logits":[0,0]}],"default_logits":[0,0]}"#;
        assert!(ToyTableModel::from_json(bad_ctx).is_err());
    }

    #[test]
    fn prompt_conditioned_rows() {
        let json = r#"{"vocab":["</s>","<","a","b"],"eos":"</s>","start_token":"<",
            "rows":[{"context_suffix":[],"prompt_labels":["city"],"logits":[0,0,0,5]}],
            "default_logits":[0,0,5,0]}"#;
        let m = ToyTableModel::from_json(json).unwrap();
        assert_eq!(m.next_logits(&[], &PromptSpec::from_labels(["city"]))[3], 5.0);
        assert_eq!(m.next_logits(&[], &PromptSpec::default())[2], 5.0);
    }

    #[test]
    fn longest_match_tokenizer() {
        let m = fig1_model();
        let ids = tokenize_longest_match(&m, "The <occupation>astronaut<occupation>> explored").unwrap();
        let toks: Vec<&str> = ids.iter().map(|&i| m.vocab()[i].as_str()).collect();
        assert_eq!(toks, ["The ", "<", "occupation>", "astronaut", "<occupation>>", " explored"]);
        assert!(tokenize_longest_match(&m, "The cat").is_err());
    }
}
