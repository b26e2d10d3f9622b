//! Whitespace tokenizer with a frequency-built vocabulary.
//!
//! The vocabulary is deterministic: special tokens first, then any reserved
//! tokens (label words, template words), then corpus tokens ordered by
//! descending frequency with lexicographic tie-break. Tokenization is
//! reversible up to normalization (whitespace collapsing and, by default,
//! lowercasing); unknown words map to `[UNK]`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
/// Placeholder id for continuous-prompt positions; the embedding at these
/// positions is injected, never looked up.
pub const PROMPT: &str = "[PROMPT]";
/// Placeholder id for virtual-demonstration positions.
pub const VDEMO: &str = "[VDEMO]";

pub const SPECIALS: [&str; 7] = [PAD, UNK, CLS, SEP, MASK, PROMPT, VDEMO];

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;
pub const PROMPT_ID: u32 = 5;
pub const VDEMO_ID: u32 = 6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
    lowercase: bool,
}

impl Vocab {
    /// Build from a corpus. `reserved` tokens (label words, template words)
    /// are added right after the specials so they are always in-vocabulary.
    pub fn build<'a, I>(corpus: I, reserved: &[&str], lowercase: bool) -> Vocab
    where
        I: IntoIterator<Item = &'a str>,
    {
        let norm = |w: &str| {
            if lowercase {
                w.to_lowercase()
            } else {
                w.to_string()
            }
        };
        let mut counts: HashMap<String, u64> = HashMap::new();
        for text in corpus {
            for word in text.split_whitespace() {
                if SPECIALS.contains(&word) {
                    continue;
                }
                *counts.entry(norm(word)).or_default() += 1;
            }
        }

        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for word in reserved {
            for piece in word.split_whitespace() {
                if SPECIALS.contains(&piece) {
                    continue;
                }
                let piece = norm(piece);
                if !tokens.contains(&piece) {
                    counts.remove(&piece);
                    tokens.push(piece);
                }
            }
        }

        let mut by_freq: Vec<(String, u64)> = counts.into_iter().collect();
        by_freq.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        tokens.extend(by_freq.into_iter().map(|(w, _)| w));

        let mut vocab = Vocab {
            tokens,
            index: HashMap::new(),
            lowercase,
        };
        vocab.rebuild_index();
        vocab
    }

    pub fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn normalize(&self, text: &str) -> String {
        let joined = text.split_whitespace().collect::<Vec<_>>().join(" ");
        if self.lowercase {
            // Specials keep their casing.
            joined
                .split(' ')
                .map(|w| {
                    if SPECIALS.contains(&w) {
                        w.to_string()
                    } else {
                        w.to_lowercase()
                    }
                })
                .collect::<Vec<_>>()
                .join(" ")
        } else {
            joined
        }
    }

    /// Id of a single normalized token, if present.
    pub fn id(&self, token: &str) -> Option<u32> {
        if SPECIALS.contains(&token) {
            return self.index.get(token).copied();
        }
        let token = if self.lowercase {
            token.to_lowercase()
        } else {
            token.to_string()
        };
        self.index.get(&token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < SPECIALS.len()
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| self.id(w).unwrap_or(UNK_ID))
            .collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Ids of all non-special vocabulary entries.
    pub fn content_ids(&self) -> Vec<u32> {
        (SPECIALS.len() as u32..self.tokens.len() as u32).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Vocab {
        Vocab::build(
            ["a fun ride", "a great movie", "great fun", "It was great"],
            &["terrible", "great"],
            true,
        )
    }

    #[test]
    fn specials_come_first() {
        let v = toy();
        assert_eq!(v.token(CLS_ID), CLS);
        assert_eq!(v.token(MASK_ID), MASK);
        assert_eq!(v.id(SEP), Some(SEP_ID));
    }

    #[test]
    fn empty_text_tokenizes_to_empty() {
        assert!(toy().tokenize("").is_empty());
    }

    #[test]
    fn repeated_word_gets_identical_ids() {
        let ids = toy().tokenize("great great");
        assert_eq!(ids.len(), 2);
        assert_eq!(ids[0], ids[1]);
        assert_ne!(ids[0], UNK_ID);
    }

    #[test]
    fn unknown_word_maps_to_unk() {
        assert_eq!(toy().tokenize("zzzunseen"), vec![UNK_ID]);
    }

    #[test]
    fn round_trip_on_corpus_matches_normalized() {
        let v = toy();
        for text in ["a fun ride", "a great movie", "great fun", "It was great"] {
            let round = v.detokenize(&v.tokenize(text));
            assert_eq!(round, v.normalize(text));
        }
    }

    #[test]
    fn specials_survive_tokenize_detokenize() {
        let v = toy();
        let s = "[CLS] it was [MASK] . [SEP]";
        let ids = v.tokenize(s);
        assert_eq!(ids[0], CLS_ID);
        assert_eq!(*ids.last().unwrap(), SEP_ID);
        assert!(v.detokenize(&ids).starts_with("[CLS]"));
    }

    #[test]
    fn frequency_order_is_deterministic() {
        let a = toy();
        let b = toy();
        assert_eq!(a.tokens, b.tokens);
        // "great" is reserved so it sits right after the specials.
        assert_eq!(a.id("great"), Some(SPECIALS.len() as u32 + 1));
    }
}
