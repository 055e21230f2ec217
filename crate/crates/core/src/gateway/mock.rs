//! Table-driven mock language model.
//!
//! The next-token distribution depends on the last `window` tokens of the
//! context. Lookup backs off to shorter suffixes down to the empty key `""`,
//! which acts as the default row. Prompts are segmented by greedy
//! longest-match over the vocabulary; runs of characters that match no
//! vocabulary token become single opaque tokens.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{candidate_order, Backend, Candidate, Completion, DecodeParams, FinishReason, GatewayError, Prefix, TokenStep};

/// Joins the tokens of a context key, e.g. `"the| answer"`.
pub const CONTEXT_SEPARATOR: char = '|';

const ROW_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MockError {
    #[error("invalid mock spec: {0}")]
    InvalidSpec(String),
    #[error("mock has no row for context {0:?} or any suffix of it")]
    MissingContext(String),
    #[error("mock cannot score {0}")]
    Unscorable(String),
}

fn default_window() -> usize {
    2
}

/// On-disk mock description: `{"vocab", "window", "table", "terminals"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockSpec {
    pub vocab: Vec<String>,
    #[serde(default = "default_window")]
    pub window: usize,
    /// Context key -> distribution over vocabulary tokens.
    pub table: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default)]
    pub terminals: Vec<String>,
}

impl MockSpec {
    pub fn from_json(text: &str) -> Result<Self, MockError> {
        serde_json::from_str(text).map_err(|e| MockError::InvalidSpec(e.to_string()))
    }

    pub fn context_key<S: AsRef<str>>(tokens: &[S]) -> String {
        let sep = CONTEXT_SEPARATOR.to_string();
        tokens
            .iter()
            .map(AsRef::as_ref)
            .collect::<Vec<_>>()
            .join(&sep)
    }
}

#[derive(Debug, Clone)]
pub struct MockModel {
    spec: MockSpec,
    /// Rows with zero-probability entries removed, in candidate order.
    rows: HashMap<String, Vec<Candidate>>,
    /// Vocabulary, longest first, for segmentation.
    by_length: Vec<String>,
    terminals: HashSet<String>,
}

impl MockModel {
    pub fn new(spec: MockSpec) -> Result<Self, MockError> {
        let invalid = |m: String| Err(MockError::InvalidSpec(m));
        if spec.vocab.is_empty() {
            return invalid("empty vocabulary".into());
        }
        if spec.window == 0 {
            return invalid("window must be at least 1".into());
        }
        let vocab: HashSet<&str> = spec.vocab.iter().map(String::as_str).collect();
        if vocab.len() != spec.vocab.len() {
            return invalid("duplicate vocabulary token".into());
        }
        if let Some(bad) = spec
            .vocab
            .iter()
            .find(|t| t.is_empty() || t.contains(CONTEXT_SEPARATOR))
        {
            return invalid(format!(
                "vocabulary token {bad:?} is empty or contains '{CONTEXT_SEPARATOR}'"
            ));
        }
        if let Some(t) = spec.terminals.iter().find(|t| !vocab.contains(t.as_str())) {
            return invalid(format!("terminal {t:?} is not in the vocabulary"));
        }
        if spec.table.is_empty() {
            return invalid("empty transition table".into());
        }
        let mut rows = HashMap::new();
        for (key, dist) in &spec.table {
            let parts = if key.is_empty() {
                0
            } else {
                key.split(CONTEXT_SEPARATOR).count()
            };
            if parts > spec.window {
                return invalid(format!(
                    "context {key:?} is longer than the window ({})",
                    spec.window
                ));
            }
            let mut sum = 0.0;
            let mut row = Vec::new();
            for (tok, &p) in dist {
                if !vocab.contains(tok.as_str()) {
                    return invalid(format!("row {key:?}: token {tok:?} is not in the vocabulary"));
                }
                if !(p.is_finite() && p >= 0.0) {
                    return invalid(format!("row {key:?}: bad probability {p} for {tok:?}"));
                }
                sum += p;
                if p > 0.0 {
                    row.push(Candidate {
                        token: tok.clone(),
                        prob: p,
                    });
                }
            }
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return invalid(format!("row {key:?} sums to {sum}, not 1"));
            }
            row.sort_by(candidate_order);
            rows.insert(key.clone(), row);
        }
        let mut by_length = spec.vocab.clone();
        by_length.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        let terminals = spec.terminals.iter().cloned().collect();
        Ok(Self {
            spec,
            rows,
            by_length,
            terminals,
        })
    }

    pub fn spec(&self) -> &MockSpec {
        &self.spec
    }

    pub fn is_terminal(&self, token: &str) -> bool {
        self.terminals.contains(token)
    }

    /// Greedy longest-match segmentation.
    pub fn segment(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut unknown = String::new();
        let mut rest = text;
        while !rest.is_empty() {
            if let Some(tok) = self.by_length.iter().find(|t| rest.starts_with(t.as_str())) {
                if !unknown.is_empty() {
                    out.push(std::mem::take(&mut unknown));
                }
                out.push(tok.clone());
                rest = &rest[tok.len()..];
            } else {
                let ch = rest.chars().next().expect("non-empty");
                unknown.push(ch);
                rest = &rest[ch.len_utf8()..];
            }
        }
        if !unknown.is_empty() {
            out.push(unknown);
        }
        out
    }

    /// Context tokens for a prefix: the segmented prompt followed by the
    /// fixed response tokens.
    pub fn context_tokens(&self, prefix: &Prefix) -> Vec<String> {
        let mut ctx = self.segment(&prefix.prompt);
        ctx.extend(prefix.response.iter().cloned());
        ctx
    }

    /// Raw next-token distribution after `context`, in candidate order.
    pub fn row<S: AsRef<str>>(&self, context: &[S]) -> Result<&[Candidate], MockError> {
        let longest = context.len().min(self.spec.window);
        for width in (0..=longest).rev() {
            let key = MockSpec::context_key(&context[context.len() - width..]);
            if let Some(row) = self.rows.get(&key) {
                return Ok(row);
            }
        }
        Err(MockError::MissingContext(MockSpec::context_key(
            &context[context.len() - longest..],
        )))
    }

    /// The distribution actually sampled from at `temperature`:
    /// `p^(1/T)` renormalized, or a point mass on the top candidate at `T = 0`.
    pub fn sampling_distribution<S: AsRef<str>>(
        &self,
        context: &[S],
        temperature: f64,
    ) -> Result<Vec<Candidate>, MockError> {
        Ok(temper(self.row(context)?, temperature))
    }

    /// True when the sequence so far already ended with a terminal token.
    pub fn has_terminated<S: AsRef<str>>(&self, response: &[S]) -> bool {
        response.last().is_some_and(|t| self.is_terminal(t.as_ref()))
    }
}

pub(crate) fn temper(row: &[Candidate], temperature: f64) -> Vec<Candidate> {
    if temperature == 0.0 {
        return vec![Candidate {
            token: row[0].token.clone(),
            prob: 1.0,
        }];
    }
    if temperature == 1.0 {
        return row.to_vec();
    }
    let logits: Vec<f64> = row.iter().map(|c| c.prob.ln() / temperature).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    row.iter()
        .zip(weights)
        .map(|(c, w)| Candidate {
            token: c.token.clone(),
            prob: w / total,
        })
        .collect()
}

fn sample<'a>(dist: &'a [Candidate], rng: &mut ChaCha8Rng) -> &'a Candidate {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for c in dist {
        acc += c.prob;
        if u < acc {
            return c;
        }
    }
    dist.last().expect("rows are non-empty")
}

impl Backend for MockModel {
    fn complete(&self, prefix: &Prefix, params: &DecodeParams) -> Result<Completion, GatewayError> {
        let mut ctx = self.context_tokens(prefix);
        let mut steps = Vec::new();
        let mut finish = FinishReason::Length;
        if self.has_terminated(&prefix.response) {
            finish = FinishReason::Stop;
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            for index in 1..=params.max_tokens {
                let row = self.row(&ctx)?;
                let chosen = if params.is_greedy() {
                    &row[0]
                } else {
                    let dist = temper(row, params.temperature);
                    let token = &sample(&dist, &mut rng).token;
                    row.iter().find(|c| &c.token == token).expect("same support")
                };
                let token = chosen.token.clone();
                steps.push(TokenStep::new(
                    index,
                    token.clone(),
                    chosen.prob.ln(),
                    row.to_vec(),
                    params.top_logprobs,
                ));
                ctx.push(token.clone());
                if self.is_terminal(&token) {
                    finish = FinishReason::Stop;
                    break;
                }
            }
        }
        let text = steps.iter().map(|s| s.token.as_str()).collect();
        Ok(Completion {
            prompt: prefix.text(),
            steps,
            text,
            finish_reason: finish,
        })
    }

    fn score(&self, prompt: &str, text: &str) -> Result<Vec<f64>, GatewayError> {
        let mut ctx = self.segment(prompt);
        let mut out = Vec::new();
        for tok in self.segment(text) {
            let row = self.row(&ctx)?;
            let p = row
                .iter()
                .find(|c| c.token == tok)
                .map(|c| c.prob)
                .ok_or_else(|| MockError::Unscorable(format!("token {tok:?} has zero probability or is outside the vocabulary")))?;
            out.push(p.ln());
            ctx.push(tok);
        }
        Ok(out)
    }

    fn describe(&self) -> String {
        format!("mock(vocab={}, window={})", self.spec.vocab.len(), self.spec.window)
    }
}
