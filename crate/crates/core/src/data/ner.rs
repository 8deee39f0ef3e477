use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tokenizer::pre_tokenize;
use super::{EntitySpan, EntityType, FqaSample};
use crate::error::{Error, Result};

/// Surface form to entity type. Matching is over pre-tokenized pieces, so
/// "New  York" in text matches the entry "New York".
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Gazetteer {
    entries: BTreeMap<String, EntityType>,
}

impl Gazetteer {
    pub fn new() -> Self {
        Gazetteer::default()
    }

    pub fn insert(&mut self, surface: impl Into<String>, etype: EntityType) {
        self.entries.insert(surface.into(), etype);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &EntityType)> {
        self.entries.iter()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Longest-match, left-to-right, non-overlapping tagging.
    pub fn ner_tag(&self, text: &str) -> Vec<EntitySpan> {
        let mut by_pieces: HashMap<Vec<String>, EntityType> = HashMap::new();
        let mut max_len = 0;
        for (surface, t) in &self.entries {
            let key: Vec<String> = pre_tokenize(surface).into_iter().map(|p| p.text).collect();
            if key.is_empty() {
                continue;
            }
            max_len = max_len.max(key.len());
            by_pieces.insert(key, *t);
        }
        let pieces = pre_tokenize(text);
        let mut out = Vec::new();
        let mut i = 0;
        while i < pieces.len() {
            let mut matched = None;
            for len in (1..=max_len.min(pieces.len() - i)).rev() {
                let key: Vec<String> = pieces[i..i + len].iter().map(|p| p.text.clone()).collect();
                if let Some(t) = by_pieces.get(&key) {
                    matched = Some((len, *t));
                    break;
                }
            }
            match matched {
                Some((len, etype)) => {
                    out.push(EntitySpan {
                        start: pieces[i].start,
                        end: pieces[i + len - 1].end,
                        etype,
                    });
                    i += len;
                }
                None => i += 1,
            }
        }
        out
    }
}

/// True when `text` already carries a `[TYPE]` marker for a known type.
pub fn is_tagged(text: &str) -> bool {
    EntityType::ALL
        .iter()
        .any(|t| text.contains(&format!("{} ", t.marker())))
}

/// Inserts `[TYPE] ` before each annotated entity in the knowledge text and
/// shifts the spans accordingly. Question and answers are left untouched.
pub fn insert_tags(sample: &FqaSample) -> Result<FqaSample> {
    if is_tagged(&sample.knowledge) {
        return Err(Error::invalid(format!("sample `{}` is already tagged", sample.id)));
    }
    let mut spans = sample.entities.clone();
    spans.sort();
    for w in spans.windows(2) {
        if w[0].end > w[1].start {
            return Err(Error::Validation(vec![format!(
                "entity spans {}..{} and {}..{} overlap",
                w[0].start, w[0].end, w[1].start, w[1].end
            )]));
        }
    }
    let chars: Vec<char> = sample.knowledge.chars().collect();
    if let Some(s) = spans.iter().find(|s| s.end > chars.len() || s.start >= s.end) {
        return Err(Error::Validation(vec![format!(
            "entity span {}..{} outside knowledge",
            s.start, s.end
        )]));
    }
    let mut out = String::new();
    let mut new_spans = Vec::with_capacity(spans.len());
    let mut pos = 0;
    let mut shift = 0;
    for s in &spans {
        out.extend(&chars[pos..s.start]);
        let marker = format!("{} ", s.etype.marker());
        out.push_str(&marker);
        shift += marker.chars().count();
        out.extend(&chars[s.start..s.end]);
        new_spans.push(EntitySpan {
            start: s.start + shift,
            end: s.end + shift,
            etype: s.etype,
        });
        pos = s.end;
    }
    out.extend(&chars[pos..]);
    Ok(FqaSample {
        knowledge: out,
        entities: new_spans,
        ..sample.clone()
    })
}
