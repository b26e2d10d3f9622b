//! Task configuration: label set, cloze template, verbalizer and metric.
//!
//! A task config file is TOML with an explicitly ordered verbalizer, e.g.
//!
//! ```toml
//! task_id = "mr"
//! template = "[CLS] {x1} , It was [MASK] . [SEP]"
//! n = 1
//! metric = "accuracy"
//! verbalizer = [["negative", "terrible"], ["positive", "great"]]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Vocab, UNK_ID};

/// Injective map from task labels to single vocabulary tokens. The pair
/// order is the canonical label order used everywhere (demonstration
/// ordering, class indices, histograms).
#[derive(Debug, Clone)]
pub struct Verbalizer {
    labels: Vec<String>,
    words: Vec<String>,
    word_ids: Vec<u32>,
}

impl Verbalizer {
    pub fn new(pairs: &[(String, String)], vocab: &Vocab) -> Result<Verbalizer> {
        if pairs.is_empty() {
            return Err(Error::InvalidConfig("verbalizer is empty".into()));
        }
        let mut labels = Vec::new();
        let mut words = Vec::new();
        let mut word_ids = Vec::new();
        for (label, word) in pairs {
            if labels.contains(label) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate label {label:?} in verbalizer"
                )));
            }
            if word.split_whitespace().count() != 1 {
                return Err(Error::InvalidConfig(format!(
                    "label word {word:?} is not a single token"
                )));
            }
            let id = vocab
                .id(word)
                .filter(|&id| id != UNK_ID)
                .ok_or_else(|| {
                    Error::InvalidConfig(format!("label word {word:?} is not in the vocabulary"))
                })?;
            if word_ids.contains(&id) {
                return Err(Error::InvalidConfig(format!(
                    "verbalizer is not injective: {word:?} repeats"
                )));
            }
            labels.push(label.clone());
            words.push(word.clone());
            word_ids.push(id);
        }
        Ok(Verbalizer {
            labels,
            words,
            word_ids,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Class index of a label, or `UnknownLabel`.
    pub fn class_of(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    pub fn label(&self, class: usize) -> &str {
        &self.labels[class]
    }

    pub fn word(&self, class: usize) -> &str {
        &self.words[class]
    }

    pub fn word_id(&self, class: usize) -> u32 {
        self.word_ids[class]
    }

    pub fn word_ids(&self) -> &[u32] {
        &self.word_ids
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    BinaryF1,
}

/// Where demonstration blocks are placed relative to the anchor's trailing
/// `[SEP]` when the template has no explicit `[VDEMO]` marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoPlacement {
    /// Blocks follow the anchor's `[SEP]`.
    #[default]
    After,
    /// The anchor's trailing `[SEP]` is folded into the first block's
    /// separator, so blocks start before it.
    Before,
}

/// Default grid of per-class virtual-demonstration lengths.
pub const STANDARD_N: [usize; 4] = [1, 2, 3, 5];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskConfig {
    pub task_id: String,
    pub template: String,
    /// Ordered label → word pairs; the order is the canonical label order.
    pub verbalizer: Vec<(String, String)>,
    /// Virtual demonstration length per class.
    #[serde(default = "default_n")]
    pub n: usize,
    pub metric: Metric,
    /// Positive label for binary F1; defaults to the second label.
    #[serde(default)]
    pub positive_label: Option<String>,
    #[serde(default)]
    pub demo_placement: DemoPlacement,
    /// Allow n outside {1,2,3,5} (length ablations go up to 20).
    #[serde(default)]
    pub allow_any_n: bool,
}

fn default_n() -> usize {
    1
}

impl TaskConfig {
    pub fn load(path: &Path) -> Result<TaskConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: TaskConfig = toml::from_str(&text).map_err(|e| Error::ParseError {
            context: path.display().to_string(),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.task_id.is_empty() {
            return Err(Error::InvalidConfig("task_id is empty".into()));
        }
        if self.verbalizer.is_empty() {
            return Err(Error::InvalidConfig("verbalizer is empty".into()));
        }
        if self.n == 0 {
            return Err(Error::InvalidConfig("n must be >= 1".into()));
        }
        if !self.allow_any_n && !STANDARD_N.contains(&self.n) {
            return Err(Error::InvalidConfig(format!(
                "n = {} is outside the standard candidate set {STANDARD_N:?}; set allow_any_n = true to override",
                self.n
            )));
        }
        if self.metric == Metric::BinaryF1 && self.verbalizer.len() != 2 {
            return Err(Error::InvalidConfig(
                "binary_f1 requires exactly two labels".into(),
            ));
        }
        if let Some(pos) = &self.positive_label {
            if !self.verbalizer.iter().any(|(l, _)| l == pos) {
                return Err(Error::InvalidConfig(format!(
                    "positive_label {pos:?} is not a task label"
                )));
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<String> {
        self.verbalizer.iter().map(|(l, _)| l.clone()).collect()
    }

    pub fn label_words(&self) -> Vec<String> {
        self.verbalizer.iter().map(|(_, w)| w.clone()).collect()
    }

    /// Positive class index for binary F1 (defaults to class 1).
    pub fn positive_class(&self) -> usize {
        match &self.positive_label {
            Some(pos) => self
                .verbalizer
                .iter()
                .position(|(l, _)| l == pos)
                .expect("validated"),
            None => 1,
        }
    }

    /// Config for the bundled synthetic sentiment task used in tests and
    /// quick-start runs.
    pub fn synthetic_sentiment() -> TaskConfig {
        TaskConfig {
            task_id: "synthetic_sentiment".into(),
            template: "[CLS] {x1} , It was [MASK] . [SEP]".into(),
            verbalizer: vec![
                ("negative".into(), "terrible".into()),
                ("positive".into(), "great".into()),
            ],
            n: 1,
            metric: Metric::Accuracy,
            positive_label: None,
            demo_placement: DemoPlacement::After,
            allow_any_n: false,
        }
    }
}
