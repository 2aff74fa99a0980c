use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where the gold content sits in a realized prompt (1-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GoldPositions {
    Single(usize),
    Pair(usize, usize),
}

/// A concrete prompt `{instruction | ordered documents | question}` with
/// the token span of every document recorded.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptLayout {
    pub tokens: Vec<usize>,
    /// Half-open `(start, end)` offsets, in document order.
    pub doc_spans: Vec<(usize, usize)>,
    pub gold_positions: GoldPositions,
}

impl PromptLayout {
    pub(crate) fn assemble(
        instruction: &[usize],
        docs: &[&Vec<usize>],
        question: &[usize],
        gold_positions: GoldPositions,
    ) -> Self {
        let mut tokens = instruction.to_vec();
        let mut doc_spans = Vec::with_capacity(docs.len());
        for d in docs {
            let start = tokens.len();
            tokens.extend_from_slice(d);
            doc_spans.push((start, tokens.len()));
        }
        tokens.extend_from_slice(question);
        Self {
            tokens,
            doc_spans,
            gold_positions,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_docs(&self) -> usize {
        self.doc_spans.len()
    }

    /// Tokens of the document at 1-based `position`.
    pub fn doc(&self, position: usize) -> Result<&[usize]> {
        let &(s, e) = self
            .doc_spans
            .get(position.wrapping_sub(1))
            .ok_or_else(|| Error::Position(format!("document {position} of {}", self.n_docs())))?;
        Ok(&self.tokens[s..e])
    }

    /// Concatenated document tokens in prompt order.
    pub fn documents_concat(&self) -> Vec<usize> {
        self.doc_spans
            .iter()
            .flat_map(|&(s, e)| self.tokens[s..e].iter().copied())
            .collect()
    }

    /// Spans must be ordered, disjoint and inside the prompt.
    pub fn validate(&self) -> Result<()> {
        let mut prev_end = 0;
        for &(s, e) in &self.doc_spans {
            if s < prev_end || s >= e || e > self.tokens.len() {
                return Err(Error::Layout(format!("bad span {s}..{e}")));
            }
            prev_end = e;
        }
        Ok(())
    }
}
