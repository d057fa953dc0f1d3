//! WordPiece tokenization with word-to-subtoken alignment.
//!
//! Works with a BERT `vocab.txt` or with a small vocabulary built from the
//! training words for the toy backbone.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use thiserror::Error;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("vocabulary is missing the special token {0}")]
    MissingSpecial(&'static str),
    #[error("sequence of {len} subtokens exceeds the backbone limit of {limit}")]
    SequenceTooLong { len: usize, limit: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    lowercase: bool,
}

/// Subtoken ids for one sentence, `[CLS] ... [SEP]`, and the inclusive
/// subtoken range of every word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<u32>,
    pub word_spans: Vec<(usize, usize)>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>, lowercase: bool) -> Result<Self, TokenizerError> {
        let index: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        for special in [PAD, UNK, CLS, SEP] {
            if !index.contains_key(special) {
                return Err(TokenizerError::MissingSpecial(special));
            }
        }
        Ok(Vocab {
            tokens,
            index,
            lowercase,
        })
    }

    /// Reads a `vocab.txt` with one token per line.
    pub fn from_file(path: &Path, lowercase: bool) -> Result<Self, TokenizerError> {
        let text = fs::read_to_string(path).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_tokens(text.lines().map(str::to_owned).collect(), lowercase)
    }

    /// Builds a toy vocabulary: specials, every seen character (word-initial
    /// and `##` continuation) and every lowercased word seen at least
    /// `min_freq` times. Token order is deterministic.
    pub fn build_toy<'a>(words: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut chars: BTreeSet<char> = BTreeSet::new();
        for w in words {
            let w = w.to_lowercase();
            chars.extend(w.chars());
            *counts.entry(w).or_default() += 1;
        }
        let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP].iter().map(|s| s.to_string()).collect();
        tokens.extend(chars.iter().map(|c| c.to_string()));
        tokens.extend(chars.iter().map(|c| format!("##{c}")));
        let seen: BTreeSet<String> = tokens.iter().cloned().collect();
        tokens.extend(
            counts
                .into_iter()
                .filter(|(w, c)| *c >= min_freq && !seen.contains(w))
                .map(|(w, _)| w),
        );
        Self::from_tokens(tokens, true).expect("specials are present")
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

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    fn special(&self, token: &str) -> u32 {
        self.index[token]
    }

    pub fn pad_id(&self) -> u32 {
        self.special(PAD)
    }

    /// Subtokens of one whitespace-delimited word; never empty.
    pub fn tokenize_word(&self, word: &str) -> Vec<u32> {
        let word = if self.lowercase {
            word.to_lowercase()
        } else {
            word.to_owned()
        };
        let mut out = Vec::new();
        for piece in split_punctuation(&word) {
            self.wordpiece(piece, &mut out);
        }
        if out.is_empty() {
            out.push(self.special(UNK));
        }
        out
    }

    fn wordpiece(&self, piece: &str, out: &mut Vec<u32>) {
        let chars: Vec<char> = piece.chars().collect();
        if chars.len() > MAX_WORD_CHARS {
            out.push(self.special(UNK));
            return;
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while start < end {
                let mut candidate: String = chars[start..end].iter().collect();
                if start > 0 {
                    candidate.insert_str(0, "##");
                }
                if let Some(id) = self.id(&candidate) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    pieces.push(id);
                    start = end;
                }
                None => {
                    out.push(self.special(UNK));
                    return;
                }
            }
        }
        out.extend(pieces);
    }

    /// Encodes a sentence as `[CLS] w1.. wn [SEP]`, recording where each
    /// word's subtokens landed.
    pub fn encode(&self, words: &[String], max_len: usize) -> Result<Encoded, TokenizerError> {
        let mut ids = vec![self.special(CLS)];
        let mut word_spans = Vec::with_capacity(words.len());
        for w in words {
            let sub = self.tokenize_word(w);
            let first = ids.len();
            ids.extend(sub);
            word_spans.push((first, ids.len() - 1));
        }
        ids.push(self.special(SEP));
        if ids.len() > max_len {
            return Err(TokenizerError::SequenceTooLong {
                len: ids.len(),
                limit: max_len,
            });
        }
        Ok(Encoded { ids, word_spans })
    }
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace() && !c.is_control())
}

fn split_punctuation(word: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, c) in word.char_indices() {
        if is_punctuation(c) {
            if start < i {
                out.push(&word[start..i]);
            }
            out.push(&word[i..i + c.len_utf8()]);
            start = i + c.len_utf8();
        }
    }
    if start < word.len() {
        out.push(&word[start..]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bert_like() -> Vocab {
        let toks = [
            PAD, UNK, CLS, SEP, "the", "price", "is", "reason", "##able", ".", "don", "'", "t",
        ];
        Vocab::from_tokens(toks.iter().map(|s| s.to_string()).collect(), true).unwrap()
    }

    #[test]
    fn wordpiece_splits_and_aligns() {
        let v = bert_like();
        let words: Vec<String> = "The price is reasonable ."
            .split(' ')
            .map(String::from)
            .collect();
        let enc = v.encode(&words, 512).unwrap();
        assert_eq!(enc.ids.len(), 8);
        assert_eq!(enc.word_spans, vec![(1, 1), (2, 2), (3, 3), (4, 5), (6, 6)]);
        assert_eq!(enc.ids[0], v.id(CLS).unwrap());
        assert_eq!(*enc.ids.last().unwrap(), v.id(SEP).unwrap());
    }

    #[test]
    fn punctuation_inside_words_splits() {
        let v = bert_like();
        assert_eq!(v.tokenize_word("don't").len(), 3);
    }

    #[test]
    fn unknown_word_is_one_unk() {
        let v = bert_like();
        assert_eq!(v.tokenize_word("zebra"), vec![v.id(UNK).unwrap()]);
    }

    #[test]
    fn too_long() {
        let v = bert_like();
        let words = vec!["the".to_string(); 10];
        assert!(matches!(
            v.encode(&words, 8),
            Err(TokenizerError::SequenceTooLong { len: 12, limit: 8 })
        ));
    }

    #[test]
    fn toy_vocab_covers_seen_words_without_unk() {
        let v = Vocab::build_toy(["Great", "food", "great", "service", "x"], 2);
        assert!(v.id("great").is_some());
        assert!(v.id("food").is_none());
        let unk = v.id(UNK).unwrap();
        for w in ["food", "service", "Great", "x"] {
            assert!(!v.tokenize_word(w).contains(&unk), "{w}");
        }
        assert_eq!(v.tokenize_word("great").len(), 1);
        assert_eq!(v, Vocab::build_toy(["Great", "food", "great", "service", "x"], 2));
    }

    #[test]
    fn missing_special_is_an_error() {
        assert!(matches!(
            Vocab::from_tokens(vec![PAD.into(), UNK.into()], true),
            Err(TokenizerError::MissingSpecial(_))
        ));
    }
}
