use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::tokenize::{tokenize, TOKENIZER_VERSION};
use crate::{MetricError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusEntry {
    pub image_id: String,
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

/// Candidate/reference record as exchanged in line-delimited JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub image_id: String,
    pub candidate: String,
    pub references: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedCorpus {
    entries: Vec<CorpusEntry>,
    tokenizer: &'static str,
}

impl TokenizedCorpus {
    /// Builds a corpus from already-tokenized entries.
    pub fn new(entries: Vec<CorpusEntry>) -> Result<Self> {
        for e in &entries {
            if e.references.is_empty() {
                return Err(MetricError::NoReferences(e.image_id.clone()));
            }
        }
        Ok(Self {
            entries,
            tokenizer: TOKENIZER_VERSION,
        })
    }

    /// Tokenizes raw strings.
    pub fn from_records(records: &[CorpusRecord]) -> Result<Self> {
        Self::new(
            records
                .iter()
                .map(|r| CorpusEntry {
                    image_id: r.image_id.clone(),
                    candidate: tokenize(&r.candidate),
                    references: r.references.iter().map(|s| tokenize(s)).collect(),
                })
                .collect(),
        )
    }

    pub fn from_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CorpusRecord = serde_json::from_str(&line).map_err(|e| MetricError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            records.push(rec);
        }
        Self::from_records(&records)
    }

    pub fn entries(&self) -> &[CorpusEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tokenizer(&self) -> &'static str {
        self.tokenizer
    }

    pub(crate) fn require_non_empty(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(MetricError::EmptyCorpus);
        }
        Ok(())
    }
}
