//! JSON Lines ingestion with per-line validation.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{FactorItem, FqaSample, McItem};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schema {
    Fqa,
    Mc,
    Factor,
}

impl FromStr for Schema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fqa" => Ok(Schema::Fqa),
            "mc" => Ok(Schema::Mc),
            "factor" => Ok(Schema::Factor),
            _ => Err(Error::invalid(format!("unknown schema `{s}` (expected fqa, mc or factor)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Rejection {
    /// 1-based line number.
    pub line: usize,
    pub reason: String,
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.reason)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Records {
    Fqa(Vec<FqaSample>),
    Mc(Vec<McItem>),
    Factor(Vec<FactorItem>),
}

impl Records {
    pub fn len(&self) -> usize {
        match self {
            Records::Fqa(v) => v.len(),
            Records::Mc(v) => v.len(),
            Records::Factor(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ingested {
    pub records: Records,
    pub rejected: Vec<Rejection>,
}

impl Ingested {
    /// Turns any rejection into a [`Error::Validation`] listing every line.
    pub fn strict(self) -> Result<Records> {
        if self.rejected.is_empty() {
            Ok(self.records)
        } else {
            Err(Error::Validation(self.rejected.iter().map(|r| r.to_string()).collect()))
        }
    }
}

fn parse_lines<T: DeserializeOwned>(
    text: &str,
    validate: impl Fn(&T) -> Result<()>,
    rejected: &mut Vec<Rejection>,
) -> Vec<T> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let reason = match serde_json::from_str::<T>(line) {
            Ok(rec) => match validate(&rec) {
                Ok(()) => {
                    out.push(rec);
                    continue;
                }
                Err(Error::Validation(v)) => v.join("; "),
                Err(e) => e.to_string(),
            },
            Err(e) => e.to_string(),
        };
        rejected.push(Rejection { line: i + 1, reason });
    }
    out
}

/// Parses JSON Lines text. Blank lines are skipped; malformed rows are
/// collected rather than aborting the whole file.
pub fn ingest_str(text: &str, schema: Schema) -> Ingested {
    let mut rejected = Vec::new();
    let records = match schema {
        Schema::Fqa => Records::Fqa(parse_lines(text, FqaSample::validate, &mut rejected)),
        Schema::Mc => Records::Mc(parse_lines(text, McItem::validate, &mut rejected)),
        Schema::Factor => Records::Factor(parse_lines(text, FactorItem::validate, &mut rejected)),
    };
    Ingested { records, rejected }
}

pub fn ingest(path: &Path, schema: Schema) -> Result<Ingested> {
    Ok(ingest_str(&std::fs::read_to_string(path)?, schema))
}
