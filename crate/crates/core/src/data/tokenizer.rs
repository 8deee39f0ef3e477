//! Word-level tokenizer: runs of alphanumerics, `[TYPE]` tag markers, and
//! single punctuation characters. Offsets are character indices.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";

/// A pre-token with its half-open character span.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Piece {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '\''
}

/// Splits `text` into pieces without consulting a vocabulary.
pub fn pre_tokenize(text: &str) -> Vec<Piece> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c == '[' {
            // `[TYPE]` marker: uppercase letters closed by `]`.
            let mut j = i + 1;
            while j < chars.len() && chars[j].is_ascii_uppercase() {
                j += 1;
            }
            if j > i + 1 && j < chars.len() && chars[j] == ']' {
                out.push(Piece {
                    text: chars[i..=j].iter().collect(),
                    start: i,
                    end: j + 1,
                });
                i = j + 1;
                continue;
            }
        }
        if is_word_char(c) {
            let mut j = i;
            while j < chars.len() && is_word_char(chars[j]) {
                j += 1;
            }
            out.push(Piece {
                text: chars[i..j].iter().collect(),
                start: i,
                end: j,
            });
            i = j;
            continue;
        }
        out.push(Piece {
            text: c.to_string(),
            start: i,
            end: i + 1,
        });
        i += 1;
    }
    out
}

fn attaches_left(tok: &str) -> bool {
    matches!(tok, "." | "," | "?" | "!" | ":" | ";" | ")")
}

/// Canonical spacing: single spaces between tokens, none before closing
/// punctuation.
pub fn normalize_whitespace(text: &str) -> String {
    join_tokens(pre_tokenize(text).iter().map(|p| p.text.as_str()))
}

fn join_tokens<'a>(toks: impl Iterator<Item = &'a str>) -> String {
    let mut out = String::new();
    let mut prev_open = false;
    for t in toks {
        if !out.is_empty() && !attaches_left(t) && !prev_open {
            out.push(' ');
        }
        out.push_str(t);
        prev_open = t == "(";
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Tokenizer {
    vocab: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    /// Maximum number of ids produced by [`Tokenizer::encode`].
    pub cutoff: Option<usize>,
}

impl Tokenizer {
    /// Builds a sorted vocabulary over every piece in `texts` plus `extra`
    /// tokens. Ids 0 and 1 are `<unk>` and `<bos>`.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, extra: &[&str]) -> Self {
        let mut words = BTreeSet::new();
        for t in texts {
            for p in pre_tokenize(t) {
                words.insert(p.text);
            }
        }
        for e in extra {
            words.insert((*e).to_string());
        }
        let mut vocab = vec![UNK.to_string(), BOS.to_string()];
        vocab.extend(words.into_iter().filter(|w| w != UNK && w != BOS));
        Self::from_vocab(vocab)
    }

    pub fn from_vocab(vocab: Vec<String>) -> Self {
        let index = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Tokenizer {
            vocab,
            index,
            cutoff: None,
        }
    }

    pub fn with_cutoff(mut self, cutoff: usize) -> Self {
        self.cutoff = Some(cutoff);
        self
    }

    /// Restores the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn unk_id(&self) -> usize {
        0
    }

    pub fn bos_id(&self) -> usize {
        1
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(0)
    }

    /// Ids for `text`, truncated at the cutoff.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = pre_tokenize(text).iter().map(|p| self.id(&p.text)).collect();
        if let Some(c) = self.cutoff {
            ids.truncate(c);
        }
        ids
    }

    /// Ids with character spans, not truncated.
    pub fn tokenize_with_offsets(&self, text: &str) -> Vec<(usize, usize, usize)> {
        pre_tokenize(text)
            .into_iter()
            .map(|p| (self.id(&p.text), p.start, p.end))
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        join_tokens(
            ids.iter()
                .map(|&i| self.vocab.get(i).map(String::as_str).unwrap_or(UNK)),
        )
    }
}
