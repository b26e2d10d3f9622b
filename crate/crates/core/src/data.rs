//! Labeled text datasets, K-shot sampling and split manifests.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One classification example. `text_pair` is the optional second input for
/// sentence-pair tasks. On disk the fields are `text_a` / `text_b`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledText {
    pub uid: String,
    #[serde(rename = "text_a")]
    pub text: String,
    #[serde(rename = "text_b", default, skip_serializing_if = "Option::is_none")]
    pub text_pair: Option<String>,
    pub label: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<LabeledText>,
}

impl Dataset {
    pub fn new(examples: Vec<LabeledText>) -> Dataset {
        Dataset { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Loads a JSONL file of `LabeledText` records. If `labels` is non-empty,
    /// every record's label must be one of them. Uids must be unique.
    pub fn load_jsonl(path: &Path, labels: &[String]) -> Result<Dataset> {
        let text = std::fs::read_to_string(path)?;
        let mut examples = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let ex: LabeledText = serde_json::from_str(line).map_err(|e| Error::ParseError {
                context: format!("{}:{}", path.display(), lineno + 1),
                detail: e.to_string(),
            })?;
            examples.push(ex);
        }
        let ds = Dataset::new(examples);
        ds.validate(labels)?;
        Ok(ds)
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for ex in &self.examples {
            out.push_str(&serde_json::to_string(ex)?);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Loads a TSV file with a header row. Columns `text_a` (or `text`)
    /// and `label` are required; `uid` and `text_b` (or `text_pair`) are
    /// optional (missing uids become `row-N`).
    pub fn load_tsv(path: &Path, labels: &[String]) -> Result<Dataset> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::ParseError {
            context: path.display().to_string(),
            detail: "empty file".into(),
        })?;
        let cols: Vec<&str> = header.split('\t').collect();
        let col = |names: &[&str]| {
            cols.iter().position(|c| names.contains(c))
        };
        let text_col = col(&["text_a", "text"]).ok_or_else(|| Error::ParseError {
            context: path.display().to_string(),
            detail: "missing `text_a` column".into(),
        })?;
        let label_col = col(&["label"]).ok_or_else(|| Error::ParseError {
            context: path.display().to_string(),
            detail: "missing `label` column".into(),
        })?;
        let uid_col = col(&["uid"]);
        let pair_col = col(&["text_b", "text_pair"]);

        let mut examples = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != cols.len() {
                return Err(Error::ParseError {
                    context: format!("{}:{}", path.display(), lineno + 2),
                    detail: format!("expected {} fields, got {}", cols.len(), fields.len()),
                });
            }
            examples.push(LabeledText {
                uid: match uid_col {
                    Some(i) => fields[i].to_string(),
                    None => format!("row-{lineno}"),
                },
                text: fields[text_col].to_string(),
                text_pair: pair_col.map(|i| fields[i].to_string()).filter(|s| !s.is_empty()),
                label: fields[label_col].to_string(),
            });
        }
        let ds = Dataset::new(examples);
        ds.validate(labels)?;
        Ok(ds)
    }

    /// Checks uid uniqueness, non-empty fields, and (if `labels` is
    /// non-empty) label membership.
    pub fn validate(&self, labels: &[String]) -> Result<()> {
        let mut seen = HashSet::new();
        for ex in &self.examples {
            if ex.uid.is_empty() {
                return Err(Error::MissingField("uid".into()));
            }
            if ex.text.is_empty() {
                return Err(Error::MissingField("text".into()));
            }
            if !seen.insert(ex.uid.as_str()) {
                return Err(Error::DuplicateUid(ex.uid.clone()));
            }
            if !labels.is_empty() && !labels.iter().any(|l| l == &ex.label) {
                return Err(Error::UnknownLabel(ex.label.clone()));
            }
        }
        Ok(())
    }

    /// Examples of each class, in `labels` order.
    pub fn by_class<'a>(&'a self, labels: &[String]) -> Result<Vec<Vec<&'a LabeledText>>> {
        let mut buckets: Vec<Vec<&LabeledText>> = vec![Vec::new(); labels.len()];
        for ex in &self.examples {
            let class = labels
                .iter()
                .position(|l| l == &ex.label)
                .ok_or_else(|| Error::UnknownLabel(ex.label.clone()))?;
            buckets[class].push(ex);
        }
        Ok(buckets)
    }

    /// Examples whose uids are not in `used`, preserving order.
    pub fn complement(&self, used: &HashSet<String>) -> Dataset {
        Dataset::new(
            self.examples
                .iter()
                .filter(|ex| !used.contains(&ex.uid))
                .cloned()
                .collect(),
        )
    }

    pub fn subset_by_uids(&self, uids: &[String]) -> Result<Dataset> {
        let mut out = Vec::with_capacity(uids.len());
        for uid in uids {
            let ex = self
                .examples
                .iter()
                .find(|ex| &ex.uid == uid)
                .ok_or_else(|| Error::ParseError {
                    context: "split manifest".into(),
                    detail: format!("uid {uid:?} is not in the dataset"),
                })?;
            out.push(ex.clone());
        }
        Ok(Dataset::new(out))
    }

    /// Draws the few-shot train/dev splits: per class, shuffle and take the
    /// first `k` for train and the next `k` for dev, so |dev| = |train|.
    /// Classes needing fewer than `2k` examples fail with
    /// `InsufficientExamples`.
    pub fn sample_kshot(
        &self,
        labels: &[String],
        k: usize,
        seed: u64,
    ) -> Result<(Dataset, Dataset)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let buckets = self.by_class(labels)?;
        let mut train = Vec::new();
        let mut dev = Vec::new();
        for (class, bucket) in buckets.iter().enumerate() {
            if bucket.len() < 2 * k {
                return Err(Error::InsufficientExamples {
                    label: labels[class].clone(),
                    have: bucket.len(),
                    need: 2 * k,
                });
            }
            let mut order: Vec<usize> = (0..bucket.len()).collect();
            order.shuffle(&mut rng);
            for &i in &order[..k] {
                train.push(bucket[i].clone());
            }
            for &i in &order[k..2 * k] {
                dev.push(bucket[i].clone());
            }
        }
        Ok((Dataset::new(train), Dataset::new(dev)))
    }
}

/// Record of one seed's K-shot split, for reproducibility across runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub k: usize,
    pub train_uids: Vec<String>,
    pub dev_uids: Vec<String>,
}

impl SplitManifest {
    pub fn from_split(seed: u64, k: usize, train: &Dataset, dev: &Dataset) -> SplitManifest {
        SplitManifest {
            seed,
            k,
            train_uids: train.examples.iter().map(|e| e.uid.clone()).collect(),
            dev_uids: dev.examples.iter().map(|e| e.uid.clone()).collect(),
        }
    }

    pub fn apply(&self, dataset: &Dataset) -> Result<(Dataset, Dataset)> {
        Ok((
            dataset.subset_by_uids(&self.train_uids)?,
            dataset.subset_by_uids(&self.dev_uids)?,
        ))
    }

    pub fn used_uids(&self) -> HashSet<String> {
        self.train_uids
            .iter()
            .chain(&self.dev_uids)
            .cloned()
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SplitManifest> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// One manifest per seed; this is the standard multi-seed protocol.
pub fn make_seed_suite(
    dataset: &Dataset,
    labels: &[String],
    k: usize,
    seeds: &[u64],
) -> Result<Vec<SplitManifest>> {
    seeds
        .iter()
        .map(|&seed| {
            let (train, dev) = dataset.sample_kshot(labels, k, seed)?;
            Ok(SplitManifest::from_split(seed, k, &train, &dev))
        })
        .collect()
}

const SUBJECTS: [&str; 8] = [
    "the movie",
    "the film",
    "this story",
    "the acting",
    "the plot",
    "the script",
    "that show",
    "the ending",
];
const POSITIVE_WORDS: [&str; 8] = [
    "great", "wonderful", "moving", "brilliant", "delightful", "sharp", "lovely", "fun",
];
const NEGATIVE_WORDS: [&str; 8] = [
    "terrible", "dull", "boring", "clumsy", "awful", "flat", "tedious", "messy",
];

/// Generates a balanced two-class sentiment dataset. Class is carried by
/// disjoint adjective sets, so a small encoder can fit it quickly.
pub fn synthetic_sentiment(per_class: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(2 * per_class);
    for (label, words) in [("negative", NEGATIVE_WORDS), ("positive", POSITIVE_WORDS)] {
        for i in 0..per_class {
            let subj = SUBJECTS[rng.gen_range(0..SUBJECTS.len())];
            let a = words[rng.gen_range(0..words.len())];
            let b = words[rng.gen_range(0..words.len())];
            let text = match rng.gen_range(0..4) {
                0 => format!("{subj} was {a}"),
                1 => format!("{subj} felt {a} and {b}"),
                2 => format!("i thought {subj} was {a}"),
                _ => format!("{subj} seemed {a} overall"),
            };
            examples.push(LabeledText {
                uid: format!("syn-{label}-{i:04}"),
                text,
                text_pair: None,
                label: label.to_string(),
            });
        }
    }
    Dataset::new(examples)
}
