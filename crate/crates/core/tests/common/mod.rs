#![allow(dead_code)]

use std::path::PathBuf;

use nerscribe::codec::TaggedTranscript;
use nerscribe::dataset::DatasetRecord;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const WORDS: &[&str] = &[
    "the", "astronaut", "explored", "Zürich", "São", "naïve", "42", "a<b", "x>y", "back\\slash", "f(x)", "(",
    ")", "<<", ">>", "e.g.", "—", "日本", "it's", "O", "B-x", "(O)",
];

pub const LABELS: &[&str] = &[
    "person", "city", "occupation", "celestial body", "x", "Ünit", "a-b_c", "B-ish", "O", "I",
];

pub const CHARS: &[char] = &[
    'a', 'b', 'Z', 'ü', '日', ' ', ' ', '\t', '<', '>', '\\', '(', ')', '.', ',', '-', '\u{a0}',
];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// Single-space-joined words with entities on word boundaries.
pub fn token_aligned(rng: &mut impl Rng) -> TaggedTranscript {
    let n = rng.gen_range(0..12);
    let words: Vec<&str> = (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect();
    let text = words.join(" ");
    let mut starts = Vec::with_capacity(n);
    let mut pos = 0;
    for w in &words {
        starts.push(pos);
        pos += w.chars().count() + 1;
    }
    let mut spans = Vec::new();
    let mut i = 0;
    while i < n {
        if rng.gen_bool(0.35) {
            let len = rng.gen_range(1..=3.min(n - i));
            let last = i + len - 1;
            let end = starts[last] + words[last].chars().count();
            spans.push((starts[i], end, LABELS.choose(rng).unwrap().to_string()));
            i += len;
        } else {
            i += 1;
        }
    }
    TaggedTranscript::from_offsets(text, spans).unwrap()
}

/// Arbitrary characters (including reserved ones and odd whitespace) with
/// entities on arbitrary non-empty, non-overlapping character ranges.
pub fn char_spans(rng: &mut impl Rng) -> TaggedTranscript {
    let n = rng.gen_range(0..24);
    let text: String = (0..n).map(|_| *CHARS.choose(rng).unwrap()).collect();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < n {
        if rng.gen_bool(0.2) {
            let len = rng.gen_range(1..=4.min(n - i));
            spans.push((i, i + len, LABELS.choose(rng).unwrap().to_string()));
            i += len + rng.gen_range(0..2);
        } else {
            i += 1;
        }
    }
    TaggedTranscript::from_offsets(text, spans).unwrap()
}

/// Record whose words are unique to it and whose labels are drawn from its
/// own disjoint label block of `labels_per_record` size.
pub fn disjoint_record(index: usize, labels_per_record: usize) -> DatasetRecord {
    let mut text = String::new();
    let mut spans = Vec::new();
    for j in 0..labels_per_record {
        if !text.is_empty() {
            text.push(' ');
        }
        let word = format!("w{index}x{j}");
        let start = text.chars().count();
        text.push_str(&word);
        spans.push((start, start + word.len(), format!("t{index}_{j}")));
    }
    DatasetRecord::new(format!("r{index}"), TaggedTranscript::from_offsets(text, spans).unwrap())
}

pub fn nerscribe_bin() -> &'static str {
    env!("CARGO_BIN_EXE_nerscribe")
}

pub const TOY_TOKENS: &[&str] = &[
    "</s>", "<", ">", ">>", "per", "son>", "person>", "city>", "org>", "<person>>", "<city>>", "<org>>", "<per",
    "son", "ci", "ty>", "alice", " ", "paris", "\\<", "<>", "p", "e>", "<pe>>", "pe>",
];

pub const TOY_LABELS: &[&str] = &["person", "city", "org", "pe"];

/// Random table model over [`TOY_TOKENS`] with prompt-conditioned rows.
pub fn random_toy_model(rng: &mut impl Rng) -> nerscribe::decode::ToyTableModel {
    use nerscribe::decode::{ToyRow, ToyTableSpec};
    let v = TOY_TOKENS.len();
    let logits = |rng: &mut dyn rand::RngCore| -> Vec<f64> {
        (0..v).map(|_| rng.gen_range(-4.0..4.0)).collect()
    };
    let rows = (0..rng.gen_range(0..40))
        .map(|_| ToyRow {
            context_suffix: (0..rng.gen_range(0..3))
                .map(|_| TOY_TOKENS.choose(rng).unwrap().to_string())
                .collect(),
            prompt_labels: if rng.gen_bool(0.3) {
                vec![TOY_LABELS.choose(rng).unwrap().to_string()]
            } else {
                vec![]
            },
            logits: logits(rng),
        })
        .collect();
    nerscribe::decode::ToyTableModel::new(ToyTableSpec {
        vocab: TOY_TOKENS.iter().map(|s| s.to_string()).collect(),
        eos: "</s>".into(),
        start_token: "<".into(),
        rows,
        default_logits: logits(rng),
        max_steps: Some(30),
    })
    .unwrap()
}

pub fn random_prompt(rng: &mut impl Rng) -> nerscribe::PromptSpec {
    let mut labels = TOY_LABELS.to_vec();
    labels.shuffle(rng);
    let n = rng.gen_range(0..=labels.len());
    nerscribe::PromptSpec::from_labels(labels[..n].iter().copied())
}
