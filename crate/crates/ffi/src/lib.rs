//! C ABI over `nerscribe`.
//!
//! Every fallible function returns an [`NsStatus`]; on failure the message is
//! available from [`ns_last_error`] on the same thread until the next call.
//! Strings returned through out-parameters are owned by the caller and must
//! be released with [`ns_string_free`]. Handles are released with their
//! matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{self, AssertUnwindSafe};
use std::ptr;

use nerscribe::codec::{self, ParseMode, TagScheme, TaggedTranscript};
use nerscribe::decode::{self, DecodeOptions, GrammarMode, ToyTableModel};
use nerscribe::metrics::{self, Normalizer};
use nerscribe::PromptSpec;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    /// The input does not parse under the requested tag scheme.
    ParseError = 3,
    /// An argument is out of range or inconsistent (bad index, empty
    /// reference, unalignable span).
    InvalidArgument = 4,
    /// A model file is malformed or a model produced invalid logits.
    ModelError = 5,
    /// A panic was caught at the boundary.
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NsScheme {
    SpanMarker = 0,
    Bio = 1,
}

impl From<NsScheme> for TagScheme {
    fn from(s: NsScheme) -> Self {
        match s {
            NsScheme::SpanMarker => TagScheme::SpanMarker,
            NsScheme::Bio => TagScheme::Bio,
        }
    }
}

/// One entity as character offsets into the transcript text.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct NsSpan {
    pub start_char: usize,
    pub end_char: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct NsCounts {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Opaque parsed transcript.
pub struct NsTranscript(TaggedTranscript);

/// Opaque table-driven decoding model.
pub struct NsModel(ToyTableModel);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let mut bytes = msg.into().into_bytes();
    bytes.retain(|&b| b != 0);
    let msg = CString::new(bytes).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

struct Failure(NsStatus, String);

impl From<codec::CodecError> for Failure {
    fn from(e: codec::CodecError) -> Self {
        let status = if e.kind() == "SpanNotTokenAligned" {
            NsStatus::InvalidArgument
        } else {
            NsStatus::ParseError
        };
        Failure(status, format!("{}: {e}", e.kind()))
    }
}

impl From<decode::DecodeError> for Failure {
    fn from(e: decode::DecodeError) -> Self {
        Failure(NsStatus::ModelError, format!("{}: {e}", e.kind()))
    }
}

fn fail<T>(status: NsStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

/// Runs `body`, translating errors and panics into a status.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> NsStatus {
    match panic::catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => NsStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            NsStatus::Panic
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return fail(NsStatus::NullArgument, format!("{what} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(NsStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .map_or_else(|| fail(NsStatus::NullArgument, format!("{what} is null")), Ok)
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return fail(NsStatus::NullArgument, format!("{what} is null"));
    }
    out.write(value);
    Ok(())
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    if out.is_null() {
        return fail(NsStatus::NullArgument, "out is null");
    }
    let c = CString::new(s).or_else(|_| fail(NsStatus::InvalidArgument, "string contains NUL"))?;
    out.write(c.into_raw());
    Ok(())
}

fn mode(strict: bool) -> ParseMode {
    if strict {
        ParseMode::Strict
    } else {
        ParseMode::Lenient
    }
}

/// Message of the last failure on this thread, or null. Valid until the next
/// call into this library on the same thread; do not free.
#[no_mangle]
pub extern "C" fn ns_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ns_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ns_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses `input` under `scheme`; `strict` rejects BIO continuation tags
/// that do not follow their own entity.
///
/// # Safety
/// `input` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ns_transcript_parse(
    input: *const c_char,
    scheme: NsScheme,
    strict: bool,
    out: *mut *mut NsTranscript,
) -> NsStatus {
    guard(|| {
        let s = read_str(input, "input")?;
        let t = codec::parse(s, scheme.into(), mode(strict))?;
        write_out(out, Box::into_raw(Box::new(NsTranscript(t))), "out")
    })
}

/// # Safety
/// `t` must be null or a handle from [`ns_transcript_parse`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ns_transcript_free(t: *mut NsTranscript) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// # Safety
/// `t` must be a live transcript handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ns_transcript_serialize(
    t: *const NsTranscript,
    scheme: NsScheme,
    out: *mut *mut c_char,
) -> NsStatus {
    guard(|| {
        let t = handle(t, "transcript")?;
        write_string(out, codec::serialize(&t.0, scheme.into())?)
    })
}

/// Plain text with all tags removed.
///
/// # Safety
/// `t` must be a live transcript handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ns_transcript_text(t: *const NsTranscript, out: *mut *mut c_char) -> NsStatus {
    guard(|| write_string(out, handle(t, "transcript")?.0.text().to_string()))
}

/// Number of entities; 0 for a null handle.
///
/// # Safety
/// `t` must be null or a live transcript handle.
#[no_mangle]
pub unsafe extern "C" fn ns_transcript_entity_count(t: *const NsTranscript) -> usize {
    t.as_ref().map_or(0, |t| t.0.entities().len())
}

/// Offsets and label of entity `index`, in text order. Either out-pointer
/// may be null to skip it.
///
/// # Safety
/// `t` must be a live transcript handle; non-null out-pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ns_transcript_entity(
    t: *const NsTranscript,
    index: usize,
    span: *mut NsSpan,
    label: *mut *mut c_char,
) -> NsStatus {
    guard(|| {
        let t = handle(t, "transcript")?;
        let Some(e) = t.0.entities().get(index) else {
            return fail(
                NsStatus::InvalidArgument,
                format!("entity index {index} out of range ({} entities)", t.0.entities().len()),
            );
        };
        if !span.is_null() {
            span.write(NsSpan {
                start_char: e.start_char,
                end_char: e.end_char,
            });
        }
        if !label.is_null() {
            write_string(label, e.label.clone())?;
        }
        Ok(())
    })
}

/// Re-serializes `input` from one scheme to another.
///
/// # Safety
/// `input` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ns_convert(
    input: *const c_char,
    from: NsScheme,
    to: NsScheme,
    strict: bool,
    out: *mut *mut c_char,
) -> NsStatus {
    guard(|| {
        let s = read_str(input, "input")?;
        write_string(out, codec::convert(s, from.into(), to.into(), mode(strict))?)
    })
}

/// Word error rate under the default normalizer (lowercase, trimmed
/// punctuation, collapsed whitespace).
///
/// # Safety
/// Both strings must be NUL-terminated and `rate` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ns_wer(reference: *const c_char, hypothesis: *const c_char, rate: *mut f64) -> NsStatus {
    guard(|| {
        let r = read_str(reference, "reference")?;
        let h = read_str(hypothesis, "hypothesis")?;
        let b = metrics::wer(r, h, &Normalizer::default())
            .or_else(|e| fail(NsStatus::InvalidArgument, format!("{}: {e}", e.kind())))?;
        write_out(rate, b.rate().expect("non-empty reference"), "rate")
    })
}

/// Strict entity match counts of `pred` against `gold`.
///
/// # Safety
/// Both handles must be live and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ns_entity_f1(
    gold: *const NsTranscript,
    pred: *const NsTranscript,
    out: *mut NsCounts,
) -> NsStatus {
    guard(|| {
        let g = handle(gold, "gold")?;
        let p = handle(pred, "pred")?;
        let c = metrics::micro(&metrics::entity_f1(&g.0, &p.0, &Normalizer::default()));
        write_out(
            out,
            NsCounts {
                true_positives: c.tp,
                false_positives: c.fp,
                false_negatives: c.fn_,
            },
            "out",
        )
    })
}

/// Softmax of `logits` after adding `bias` to entry `start`; writes `len`
/// probabilities to `out`.
///
/// # Safety
/// `logits` and `out` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ns_biased_softmax(
    logits: *const f64,
    len: usize,
    start: usize,
    bias: f64,
    out: *mut f64,
) -> NsStatus {
    guard(|| {
        if logits.is_null() || out.is_null() {
            return fail(NsStatus::NullArgument, "logits and out must be non-null");
        }
        if start >= len {
            return fail(NsStatus::InvalidArgument, format!("start {start} out of range for {len} logits"));
        }
        let input = std::slice::from_raw_parts(logits, len);
        let probs = decode::biased_softmax(input, start, bias);
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(&probs);
        Ok(())
    })
}

/// Loads a table model from its JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ns_model_from_json(json: *const c_char, out: *mut *mut NsModel) -> NsStatus {
    guard(|| {
        let m = ToyTableModel::from_json(read_str(json, "json")?)?;
        write_out(out, Box::into_raw(Box::new(NsModel(m))), "out")
    })
}

/// # Safety
/// `m` must be null or a handle from [`ns_model_from_json`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ns_model_free(m: *mut NsModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Greedy decoding for a prompt of `n_labels` positive labels. With
/// `constrain`, only prompted labels may be emitted.
///
/// # Safety
/// `m` must be a live model handle, `labels` must point to `n_labels`
/// NUL-terminated strings (or be null when `n_labels` is 0), and `out` must
/// be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ns_model_decode(
    m: *const NsModel,
    labels: *const *const c_char,
    n_labels: usize,
    bias: f64,
    constrain: bool,
    out: *mut *mut c_char,
) -> NsStatus {
    guard(|| {
        let m = handle(m, "model")?;
        if labels.is_null() && n_labels > 0 {
            return fail(NsStatus::NullArgument, "labels is null");
        }
        let names = (0..n_labels)
            .map(|i| read_str(*labels.add(i), "label"))
            .collect::<Result<Vec<&str>, _>>()?;
        let opts = DecodeOptions {
            bias,
            grammar: if constrain { GrammarMode::Prompt } else { GrammarMode::Off },
            ..DecodeOptions::default()
        };
        let d = decode::greedy_decode(&m.0, &PromptSpec::from_labels(names), &opts)?;
        write_string(out, d.text)
    })
}
