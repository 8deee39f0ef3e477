//! Prompt templates for the three objectives and their token-level target
//! regions.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::tokenizer::Tokenizer;
use super::{EntitySpan, FqaSample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    /// `Q: q A: a`, optionally preceded by demonstration shots.
    Qa,
    /// `Q: q Knowledge: k`, target is the knowledge.
    Retrieval,
    /// `Q: q Knowledge: k A: a`, target is the answer.
    Fqa,
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptKind::Qa => "qa",
            PromptKind::Retrieval => "retrieval",
            PromptKind::Fqa => "fqa",
        })
    }
}

impl FromStr for PromptKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qa" => Ok(PromptKind::Qa),
            "retrieval" => Ok(PromptKind::Retrieval),
            "fqa" => Ok(PromptKind::Fqa),
            _ => Err(Error::invalid(format!("unknown prompt kind `{s}`"))),
        }
    }
}

const SHOTS: [(&str, &str); 4] = [
    ("How many days are in a week?", "Seven."),
    ("What color is the sky?", "Blue."),
    ("How many legs does a cat have?", "Four."),
    ("What do bees make?", "Honey."),
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    /// Demonstrations placed before the QA question when few-shot is on.
    pub shots: usize,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate { shots: 2 }
    }
}

/// A rendered prompt. Ranges are half-open character offsets into `text`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rendered {
    pub text: String,
    pub target: (usize, usize),
    pub knowledge: Option<(usize, usize)>,
}

impl PromptTemplate {
    pub fn new(shots: usize) -> Result<Self> {
        if shots > SHOTS.len() {
            return Err(Error::invalid(format!(
                "at most {} demonstration shots are available (asked for {shots})",
                SHOTS.len()
            )));
        }
        Ok(PromptTemplate { shots })
    }

    /// Every scaffold string a template can emit, for vocabulary building.
    pub fn scaffold_texts() -> Vec<String> {
        let mut v: Vec<String> = SHOTS.iter().map(|(q, a)| format!("Q: {q} A: {a}")).collect();
        v.push("Q: Knowledge: A:".to_string());
        v
    }

    fn shot_block(&self) -> String {
        SHOTS[..self.shots.min(SHOTS.len())]
            .iter()
            .map(|(q, a)| format!("Q: {q} A: {a}\n"))
            .collect()
    }

    /// The QA prompt up to and including `A:`; the answer follows after a space.
    pub fn qa_prefix(&self, question: &str, few_shot: bool) -> String {
        let shots = if few_shot { self.shot_block() } else { String::new() };
        format!("{shots}Q: {question} A:")
    }

    /// Scaffold preceding the knowledge in the retrieval render.
    pub fn retrieval_prefix(&self, question: &str) -> String {
        format!("Q: {question} Knowledge:")
    }

    pub fn render(&self, kind: PromptKind, sample: &FqaSample, few_shot: bool) -> Result<Rendered> {
        if sample.question.trim().is_empty() {
            return Err(Error::invalid(format!("sample `{}` has an empty question", sample.id)));
        }
        let need_k = kind != PromptKind::Qa;
        if need_k && sample.knowledge.trim().is_empty() {
            return Err(Error::invalid(format!(
                "sample `{}` has no knowledge for the {kind} render",
                sample.id
            )));
        }
        let need_a = kind != PromptKind::Retrieval;
        if need_a && sample.answer.trim().is_empty() {
            return Err(Error::invalid(format!("sample `{}` has an empty answer", sample.id)));
        }
        let (prefix, target) = match kind {
            PromptKind::Qa => (self.qa_prefix(&sample.question, few_shot), &sample.answer),
            PromptKind::Retrieval => (self.retrieval_prefix(&sample.question), &sample.knowledge),
            PromptKind::Fqa => (
                format!("{} {} A:", self.retrieval_prefix(&sample.question), sample.knowledge),
                &sample.answer,
            ),
        };
        let start = prefix.chars().count() + 1;
        let end = start + target.chars().count();
        let knowledge = if need_k {
            let ks = self.retrieval_prefix(&sample.question).chars().count() + 1;
            Some((ks, ks + sample.knowledge.chars().count()))
        } else {
            None
        };
        Ok(Rendered {
            text: format!("{prefix} {target}"),
            target: (start, end),
            knowledge,
        })
    }
}

/// Renders with the default template.
pub fn render_prompt(kind: PromptKind, sample: &FqaSample, few_shot: bool) -> Result<Rendered> {
    PromptTemplate::default().render(kind, sample, few_shot)
}

/// Token ids of a render with `<bos>` prepended. Ranges are token indices
/// into `ids`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedRender {
    pub ids: Vec<usize>,
    pub target: (usize, usize),
    pub knowledge: Option<(usize, usize)>,
    /// Character span of each id in the rendered text; `<bos>` is (0, 0).
    pub offsets: Vec<(usize, usize)>,
}

impl TokenizedRender {
    pub fn target_ids(&self) -> &[usize] {
        &self.ids[self.target.0..self.target.1]
    }

    pub fn target_len(&self) -> usize {
        self.target.1 - self.target.0
    }
}

fn char_to_token_range(offsets: &[(usize, usize)], range: (usize, usize)) -> Result<(usize, usize)> {
    let inside: Vec<usize> = (0..offsets.len())
        .filter(|&i| i > 0 && offsets[i].0 >= range.0 && offsets[i].1 <= range.1)
        .collect();
    match (inside.first(), inside.last()) {
        (Some(&a), Some(&b)) if b + 1 - a == inside.len() => Ok((a, b + 1)),
        _ => Err(Error::invalid(format!(
            "character range {}..{} does not align with token boundaries",
            range.0, range.1
        ))),
    }
}

/// Tokenizes a render. Fails rather than truncating when the tokenizer's
/// cutoff would cut into the sequence.
pub fn encode_render(tok: &Tokenizer, r: &Rendered) -> Result<TokenizedRender> {
    let mut ids = vec![tok.bos_id()];
    let mut offsets = vec![(0, 0)];
    for (id, s, e) in tok.tokenize_with_offsets(&r.text) {
        ids.push(id);
        offsets.push((s, e));
    }
    if let Some(c) = tok.cutoff {
        if ids.len() > c {
            return Err(Error::ContextOverflow { len: ids.len(), limit: c });
        }
    }
    let target = char_to_token_range(&offsets, r.target)?;
    let knowledge = r.knowledge.map(|k| char_to_token_range(&offsets, k)).transpose()?;
    Ok(TokenizedRender {
        ids,
        target,
        knowledge,
        offsets,
    })
}

/// All three renders of one sample plus its span sets. Entity spans are
/// re-expressed in retrieval-render character coordinates; span sets hold
/// absolute token indices into `retrieval.ids`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedSample {
    pub id: String,
    pub qa: TokenizedRender,
    pub retrieval: TokenizedRender,
    pub fqa: TokenizedRender,
    /// Same as `qa` with the hallucinated answer, when the sample has one.
    pub qa_hallucinated: Option<TokenizedRender>,
    pub entities: Vec<EntitySpan>,
    pub span_ent: BTreeSet<usize>,
    pub span_attn: BTreeSet<usize>,
}

impl TokenizedSample {
    pub fn new(tok: &Tokenizer, template: &PromptTemplate, sample: &FqaSample) -> Result<Self> {
        let qa = encode_render(tok, &template.render(PromptKind::Qa, sample, true)?)?;
        let r = template.render(PromptKind::Retrieval, sample, false)?;
        let kstart = r.knowledge.expect("retrieval render has knowledge").0;
        let retrieval = encode_render(tok, &r)?;
        let fqa = encode_render(tok, &template.render(PromptKind::Fqa, sample, false)?)?;
        let qa_hallucinated = match &sample.hallucinated_answer {
            Some(h) => {
                let alt = FqaSample {
                    answer: h.clone(),
                    ..sample.clone()
                };
                Some(encode_render(tok, &template.render(PromptKind::Qa, &alt, true)?)?)
            }
            None => None,
        };
        let entities = sample
            .entities
            .iter()
            .map(|e| EntitySpan {
                start: e.start + kstart,
                end: e.end + kstart,
                etype: e.etype,
            })
            .collect();
        Ok(TokenizedSample {
            id: sample.id.clone(),
            qa,
            retrieval,
            fqa,
            qa_hallucinated,
            entities,
            span_ent: BTreeSet::new(),
            span_attn: BTreeSet::new(),
        })
    }

    /// Knowledge region of the retrieval render (equal to its target).
    pub fn knowledge_region(&self) -> (usize, usize) {
        self.retrieval.target
    }
}
