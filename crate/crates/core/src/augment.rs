//! Prompt construction for training and evaluation examples.
//!
//! Every operation is a pure function of its inputs and a `u64` seed. The
//! draw order is fixed so results can be replayed outside this crate:
//!
//! - The generator is ChaCha8 seeded with [`rand::SeedableRng::seed_from_u64`].
//! - Drawing `k` of `n` items without replacement is a partial Fisher-Yates
//!   pass: for `i` in `0..k`, pick `j = gen_range(i..n)`, swap positions `i`
//!   and `j`; the first `k` positions are the draw, in order.
//! - Positives are the record's gold labels in sorted order. Negative
//!   candidates from a type inventory are iterated in sorted order. Donor
//!   records are candidates in pool order, excluding the record itself.
//! - Entity-type dropout visits prompt labels in sorted order and drops a
//!   label when `gen::<f64>() < rate`.
//! - Shuffling uses [`rand::seq::SliceRandom::shuffle`].
//! - Per-record seeds are `mix_seed(global_seed, record_index)`, and the
//!   negative/dropout/shuffle stages of one record use
//!   `mix_seed(record_seed, 1 | 2 | 3)`.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::codec::{self, CodecError, TagScheme, TaggedTranscript};
use crate::dataset::{Dataset, DatasetRecord};
use crate::prompt::{Polarity, PromptEntry, PromptSpec};

/// Default separator placed between labels of a rendered prompt.
pub const DEFAULT_SEPARATOR: &str = ", ";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AugmentError {
    #[error("record {id:?}: no eligible negative donor in the pool")]
    EmptyPool { id: String },
    #[error("inconsistent input: {0}")]
    InconsistentInput(String),
    #[error("record {id:?}: needs {needed} negative types but the pool offers {available}")]
    InsufficientNegativePool {
        id: String,
        needed: usize,
        available: usize,
    },
    #[error("dropout rate {0} is outside [0, 1]")]
    InvalidRate(f64),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

impl AugmentError {
    pub fn kind(&self) -> &'static str {
        match self {
            AugmentError::EmptyPool { .. } => "EmptyPool",
            AugmentError::InconsistentInput(_) => "InconsistentInput",
            AugmentError::InsufficientNegativePool { .. } => "InsufficientNegativePool",
            AugmentError::InvalidRate(_) => "InvalidRate",
            AugmentError::Codec(e) => e.kind(),
        }
    }
}

pub type Result<T> = std::result::Result<T, AugmentError>;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed for item `index` of a run seeded with `seed`.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Partial Fisher-Yates: the first `min(k, n)` indices of a random permutation of `0..n`.
pub fn draw_indices(rng: &mut impl Rng, n: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let k = k.min(n);
    for i in 0..k {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// Scores how similar a donor record is to the record receiving negatives.
pub trait Similarity: Send + Sync {
    fn score(&self, record: &DatasetRecord, donor: &DatasetRecord) -> f64;
}

/// Jaccard overlap of the character 3-gram sets of the two texts.
///
/// Texts shorter than three characters contribute themselves as a single gram.
#[derive(Debug, Clone, Copy, Default)]
pub struct CharTrigramJaccard;

fn trigrams(text: &str) -> HashSet<Vec<char>> {
    let chars: Vec<char> = text.chars().collect();
    if chars.is_empty() {
        return HashSet::new();
    }
    if chars.len() < 3 {
        return HashSet::from([chars]);
    }
    chars.windows(3).map(<[char]>::to_vec).collect()
}

impl Similarity for CharTrigramJaccard {
    fn score(&self, record: &DatasetRecord, donor: &DatasetRecord) -> f64 {
        let a = trigrams(record.text());
        let b = trigrams(donor.text());
        let union = a.union(&b).count();
        if union == 0 {
            return 0.0;
        }
        a.intersection(&b).count() as f64 / union as f64
    }
}

#[derive(Clone)]
pub enum NegativeStrategy {
    /// `k` individual labels drawn uniformly from the pool's type inventory.
    RandomType { k: usize },
    /// The full label sets of `k` uniformly drawn donor records.
    RandomSample { k: usize },
    /// The label sets of the `k` donors most similar to the record.
    HardNegative {
        k: usize,
        similarity: Arc<dyn Similarity>,
    },
}

impl NegativeStrategy {
    pub fn hard_negative(k: usize) -> Self {
        NegativeStrategy::HardNegative {
            k,
            similarity: Arc::new(CharTrigramJaccard),
        }
    }

    pub fn k(&self) -> usize {
        match self {
            NegativeStrategy::RandomType { k }
            | NegativeStrategy::RandomSample { k }
            | NegativeStrategy::HardNegative { k, .. } => *k,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NegativeStrategy::RandomType { .. } => "random-type",
            NegativeStrategy::RandomSample { .. } => "random-sample",
            NegativeStrategy::HardNegative { .. } => "hard-negative",
        }
    }
}

impl fmt::Debug for NegativeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(k={})", self.name(), self.k())
    }
}

fn positives_of(record: &DatasetRecord) -> Vec<PromptEntry> {
    record.labels().into_iter().map(PromptEntry::positive).collect()
}

fn eligible_donors<'a>(record: &DatasetRecord, pool: &'a Dataset) -> Vec<&'a DatasetRecord> {
    pool.records().iter().filter(|d| d.id != record.id).collect()
}

/// Builds the prompt for `record`: its gold labels as positives followed by
/// negatives chosen by `strategy`. Negatives equal to a positive are dropped.
pub fn sample_negatives(
    record: &DatasetRecord,
    pool: &Dataset,
    strategy: &NegativeStrategy,
    seed: u64,
) -> Result<PromptSpec> {
    let mut entries = positives_of(record);
    let k = strategy.k();
    if k == 0 {
        return Ok(PromptSpec::new(entries, seed));
    }
    let mut taken: HashSet<String> = entries.iter().map(|e| e.label.clone()).collect();
    let mut rng = rng_from_seed(seed);
    let empty = || AugmentError::EmptyPool {
        id: record.id.clone(),
    };

    let donor_labels: Vec<Vec<String>> = match strategy {
        NegativeStrategy::RandomType { k } => {
            let candidates: Vec<&String> = pool
                .type_inventory()
                .keys()
                .filter(|l| !taken.contains(l.as_str()))
                .collect();
            if candidates.is_empty() {
                return Err(empty());
            }
            let picks = draw_indices(&mut rng, candidates.len(), *k);
            vec![picks.into_iter().map(|i| candidates[i].clone()).collect()]
        }
        NegativeStrategy::RandomSample { k } => {
            let donors = eligible_donors(record, pool);
            if donors.is_empty() {
                return Err(empty());
            }
            draw_indices(&mut rng, donors.len(), *k)
                .into_iter()
                .map(|i| donors[i].labels())
                .collect()
        }
        NegativeStrategy::HardNegative { k, similarity } => {
            let donors = eligible_donors(record, pool);
            if donors.is_empty() {
                return Err(empty());
            }
            let mut scored: Vec<(f64, usize)> = donors
                .iter()
                .enumerate()
                .map(|(i, d)| (similarity.score(record, d), i))
                .collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            scored
                .into_iter()
                .take(*k)
                .map(|(_, i)| donors[i].labels())
                .collect()
        }
    };

    for label in donor_labels.into_iter().flatten() {
        if taken.insert(label.clone()) {
            entries.push(PromptEntry::negative(label));
        }
    }
    Ok(PromptSpec::new(entries, seed))
}

/// Which prompt labels are eligible for entity-type dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DropoutScope {
    #[default]
    AllLabels,
    PositivesOnly,
}

/// Drops each eligible prompt label independently with probability `rate`,
/// removing it from the prompt and stripping its spans from `target`.
pub fn apply_type_dropout(
    prompt: &PromptSpec,
    target: &TaggedTranscript,
    rate: f64,
    seed: u64,
    scope: DropoutScope,
) -> Result<(PromptSpec, TaggedTranscript)> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(AugmentError::InvalidRate(rate));
    }
    if let Some(e) = target.entities().iter().find(|e| !prompt.is_positive(&e.label)) {
        return Err(AugmentError::InconsistentInput(format!(
            "target label {:?} is not a positive prompt entry",
            e.label
        )));
    }
    let mut candidates: Vec<&str> = prompt
        .entries
        .iter()
        .filter(|e| scope == DropoutScope::AllLabels || e.polarity == Polarity::Positive)
        .map(|e| e.label.as_str())
        .collect();
    candidates.sort_unstable();

    let mut rng = rng_from_seed(seed);
    let dropped: HashSet<&str> = candidates
        .into_iter()
        .filter(|_| rng.gen::<f64>() < rate)
        .collect();

    let entries = prompt
        .entries
        .iter()
        .filter(|e| !dropped.contains(e.label.as_str()))
        .cloned()
        .collect();
    let target = target.retain_entities(|e| !dropped.contains(e.label.as_str()));
    Ok((PromptSpec::new(entries, prompt.seed), target))
}

pub fn shuffle_prompt(prompt: &PromptSpec, seed: u64) -> PromptSpec {
    let mut entries = prompt.entries.clone();
    entries.shuffle(&mut rng_from_seed(seed));
    PromptSpec::new(entries, prompt.seed)
}

/// Balanced prompt for one record: its positives followed by exactly as many
/// negatives drawn from pool labels absent from the record.
pub fn balanced_prompt(record: &DatasetRecord, pool: &Dataset, seed: u64) -> Result<PromptSpec> {
    let mut entries = positives_of(record);
    let gold: BTreeSet<String> = record.labels().into_iter().collect();
    let candidates: Vec<&String> = pool
        .type_inventory()
        .keys()
        .filter(|l| !gold.contains(*l))
        .collect();
    let needed = entries.len();
    if candidates.len() < needed {
        return Err(AugmentError::InsufficientNegativePool {
            id: record.id.clone(),
            needed,
            available: candidates.len(),
        });
    }
    let mut rng = rng_from_seed(seed);
    for i in draw_indices(&mut rng, candidates.len(), needed) {
        entries.push(PromptEntry::negative(candidates[i].clone()));
    }
    Ok(PromptSpec::new(entries, seed))
}

/// Attaches a balanced prompt to every record of `d`.
pub fn build_balanced_eval(d: &Dataset, pool: &Dataset, seed: u64) -> Result<Vec<DatasetRecord>> {
    d.records()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let prompt = balanced_prompt(r, pool, mix_seed(seed, i as u64))?;
            let mut out = r.clone();
            out.prompt = Some(prompt);
            Ok(out)
        })
        .collect()
}

/// Renders the prompt string and the tagged target for one example.
///
/// The target keeps only entities whose label is prompted; a prompted
/// negative label that occurs in the transcript is an error.
pub fn render_training_pair(
    transcript: &TaggedTranscript,
    prompt: &PromptSpec,
    scheme: TagScheme,
    separator: &str,
) -> Result<(String, String)> {
    if let Some(e) = transcript.entities().iter().find(|e| {
        prompt.contains(&e.label) && !prompt.is_positive(&e.label)
    }) {
        return Err(AugmentError::InconsistentInput(format!(
            "label {:?} is prompted as negative but occurs in the transcript",
            e.label
        )));
    }
    let target = transcript.retain_entities(|e| prompt.is_positive(&e.label));
    Ok((prompt.render(separator), codec::serialize(&target, scheme)?))
}

/// Where negatives for an augmented record come from.
#[derive(Debug, Clone)]
pub enum NegativeSource {
    Strategy(NegativeStrategy),
    /// As many negative types as positives, from the pool inventory.
    Balanced,
}

#[derive(Debug, Clone)]
pub struct AugmentConfig {
    pub negatives: NegativeSource,
    pub dropout_rate: f64,
    pub dropout_scope: DropoutScope,
    pub shuffle: bool,
    pub scheme: TagScheme,
    pub separator: String,
    pub seed: u64,
}

impl AugmentConfig {
    pub fn new(negatives: NegativeSource, scheme: TagScheme, seed: u64) -> Self {
        Self {
            negatives,
            dropout_rate: 0.0,
            dropout_scope: DropoutScope::AllLabels,
            shuffle: true,
            scheme,
            separator: DEFAULT_SEPARATOR.to_string(),
            seed,
        }
    }
}

/// Negatives, dropout, shuffle and rendering for record number `index`.
///
/// The returned record's entities are the post-dropout target entities, so
/// gold spans stay consistent with the prompt.
pub fn augment_record(
    record: &DatasetRecord,
    index: usize,
    pool: &Dataset,
    config: &AugmentConfig,
) -> Result<DatasetRecord> {
    let record_seed = mix_seed(config.seed, index as u64);
    let prompt = match &config.negatives {
        NegativeSource::Strategy(s) => sample_negatives(record, pool, s, mix_seed(record_seed, 1))?,
        NegativeSource::Balanced => balanced_prompt(record, pool, mix_seed(record_seed, 1))?,
    };
    let (prompt, target) = apply_type_dropout(
        &prompt,
        &record.transcript,
        config.dropout_rate,
        mix_seed(record_seed, 2),
        config.dropout_scope,
    )?;
    let prompt = if config.shuffle {
        shuffle_prompt(&prompt, mix_seed(record_seed, 3))
    } else {
        prompt
    };
    let (_, rendered) = render_training_pair(&target, &prompt, config.scheme, &config.separator)?;
    let mut out = record.clone();
    out.transcript = target;
    out.prompt = Some(prompt);
    out.target = Some(rendered);
    Ok(out)
}

/// Augments every record; output order, content and the reported error (the
/// first failing record) do not depend on the rayon pool size.
pub fn augment_dataset(d: &Dataset, pool: &Dataset, config: &AugmentConfig) -> Result<Vec<DatasetRecord>> {
    d.records()
        .par_iter()
        .enumerate()
        .map(|(i, r)| augment_record(r, i, pool, config))
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}
