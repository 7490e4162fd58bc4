//! Entity-type prompts that condition decoding and training examples.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Polarity {
    #[serde(rename = "pos")]
    Positive,
    #[serde(rename = "neg")]
    Negative,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PromptEntry {
    pub label: String,
    pub polarity: Polarity,
}

impl PromptEntry {
    pub fn positive(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            polarity: Polarity::Positive,
        }
    }

    pub fn negative(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            polarity: Polarity::Negative,
        }
    }
}

/// Ordered entity-type labels with their provenance, plus the seed that
/// produced them.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct PromptSpec {
    pub entries: Vec<PromptEntry>,
    pub seed: u64,
}

impl PromptSpec {
    pub fn new(entries: Vec<PromptEntry>, seed: u64) -> Self {
        Self { entries, seed }
    }

    /// A prompt of positive labels only.
    pub fn from_labels<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Self {
        Self {
            entries: labels.into_iter().map(PromptEntry::positive).collect(),
            seed: 0,
        }
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.label.as_str())
    }

    pub fn contains(&self, label: &str) -> bool {
        self.entries.iter().any(|e| e.label == label)
    }

    pub fn is_positive(&self, label: &str) -> bool {
        self.entries
            .iter()
            .any(|e| e.label == label && e.polarity == Polarity::Positive)
    }

    pub fn count(&self, polarity: Polarity) -> usize {
        self.entries.iter().filter(|e| e.polarity == polarity).count()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Labels are unique within the prompt.
    pub fn has_unique_labels(&self) -> bool {
        let mut labels: Vec<&str> = self.labels().collect();
        labels.sort_unstable();
        labels.windows(2).all(|w| w[0] != w[1])
    }

    /// Joins labels in prompt order.
    pub fn render(&self, separator: &str) -> String {
        self.labels().collect::<Vec<_>>().join(separator)
    }
}
