//! Records, synthetic world generation, prompt rendering, tokenization,
//! gazetteer NER and tag insertion.

mod ingest;
mod ner;
mod render;
mod tokenizer;
mod world;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ingest::{ingest, ingest_str, Ingested, Rejection, Records, Schema};
pub use ner::{insert_tags, is_tagged, Gazetteer};
pub use render::{encode_render, render_prompt, PromptKind, PromptTemplate, Rendered, TokenizedRender, TokenizedSample};
pub use tokenizer::{normalize_whitespace, pre_tokenize, Piece, Tokenizer, BOS, UNK};
pub use world::{generate_world, WORLD_FORMAT, Entity, Fact, GeneratedWorld, Relation, World, WorldConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EntityType {
    Person,
    City,
    Year,
    Org,
}

impl EntityType {
    pub const ALL: [EntityType; 4] = [EntityType::Person, EntityType::City, EntityType::Year, EntityType::Org];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityType::Person => "PERSON",
            EntityType::City => "CITY",
            EntityType::Year => "YEAR",
            EntityType::Org => "ORG",
        }
    }

    /// Literal tag marker inserted before entities, e.g. `[PERSON]`.
    pub fn marker(self) -> String {
        format!("[{}]", self.as_str())
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntityType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EntityType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown entity type `{s}`")))
    }
}

/// Half-open character span of an entity mention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub etype: EntityType,
}

/// One knowledge-grounded QA record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FqaSample {
    #[serde(default)]
    pub id: String,
    pub knowledge: String,
    pub question: String,
    #[serde(rename = "right_answer")]
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hallucinated_answer: Option<String>,
    #[serde(default)]
    pub entities: Vec<EntitySpan>,
}

impl FqaSample {
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.question.trim().is_empty() {
            v.push("empty question".to_string());
        }
        if self.answer.trim().is_empty() {
            v.push("empty right_answer".to_string());
        }
        if self.hallucinated_answer.as_deref() == Some(self.answer.as_str()) {
            v.push("hallucinated_answer equals right_answer".to_string());
        }
        let klen = self.knowledge.chars().count();
        let mut spans = self.entities.clone();
        spans.sort();
        for (i, s) in spans.iter().enumerate() {
            if s.start >= s.end || s.end > klen {
                v.push(format!("entity span {}..{} outside knowledge ({klen} chars)", s.start, s.end));
            }
            if i > 0 && spans[i - 1].end > s.start {
                v.push(format!(
                    "entity spans {}..{} and {}..{} overlap",
                    spans[i - 1].start,
                    spans[i - 1].end,
                    s.start,
                    s.end
                ));
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }

    /// Surface text of an annotated entity.
    pub fn entity_text(&self, span: &EntitySpan) -> String {
        self.knowledge
            .chars()
            .skip(span.start)
            .take(span.end - span.start)
            .collect()
    }
}

/// Multiple-choice truthfulness item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McItem {
    #[serde(default)]
    pub id: String,
    pub question: String,
    pub true_answers: Vec<String>,
    pub false_answers: Vec<String>,
    #[serde(default)]
    pub best_index: usize,
}

impl McItem {
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.true_answers.is_empty() {
            v.push("true_answers is empty".to_string());
        }
        if self.false_answers.is_empty() {
            v.push("false_answers is empty".to_string());
        }
        if self.best_index >= self.true_answers.len().max(1) {
            v.push(format!("best_index {} out of range", self.best_index));
        }
        if self.true_answers.iter().any(|t| self.false_answers.contains(t)) {
            v.push("true and false answers overlap".to_string());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }
}

/// Completion-style factuality item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorItem {
    #[serde(default)]
    pub id: String,
    pub prefix: String,
    pub factual_completion: String,
    pub nonfactual_completions: Vec<String>,
}

impl FactorItem {
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.nonfactual_completions.is_empty() {
            v.push("nonfactual_completions is empty".to_string());
        }
        let mut all: Vec<&String> = self.nonfactual_completions.iter().collect();
        all.push(&self.factual_completion);
        let n = all.len();
        all.sort();
        all.dedup();
        if all.len() != n {
            v.push("completions are not pairwise distinct".to_string());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }
}
