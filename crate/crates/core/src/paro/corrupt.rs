//! Controlled corruption: rewrite a seeded subset of rationales so their
//! conclusion disagrees with gold while the reasoning shape stays put.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ParoError, Reject, REASON_FLIP_UNVERIFIED};
use crate::dataset::{parse_target, Provenance, RationaleRecord, Task};
use crate::gateway::{DecodeParams, Gateway};
use crate::reward::{extract, terminal_verdict_span, ExtractionRule};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionMode {
    /// Ask a model to rewrite the rationale, then verify the flip.
    Llm,
    /// Rewrite the terminal verdict locally (nsm only).
    Deterministic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionPlan {
    pub fraction: f64,
    pub mode: CorruptionMode,
    pub seed: u64,
    /// Extra model attempts per record in llm mode.
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_decode")]
    pub decode: DecodeParams,
}

fn default_retries() -> u32 {
    2
}

fn default_decode() -> DecodeParams {
    DecodeParams::sampled(0.7, 1024, 0)
}

impl CorruptionPlan {
    pub fn new(fraction: f64, mode: CorruptionMode, seed: u64) -> Self {
        Self {
            fraction,
            mode,
            seed,
            retries: default_retries(),
            decode: default_decode(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorruptionOutcome {
    /// All input records in input order; selected ones rewritten.
    pub records: Vec<RationaleRecord>,
    /// Ids chosen by the seeded shuffle, in input order.
    pub selected: Vec<String>,
    /// Selected records whose flip could not be verified; left unchanged.
    pub rejects: Vec<Reject>,
}

impl CorruptionOutcome {
    pub fn corrupted_count(&self) -> usize {
        self.records.iter().filter(|r| r.provenance == Provenance::Corrupted).count()
    }
}

/// Indices (ascending) of the `floor(fraction * n)` records picked by a
/// seeded shuffle.
pub fn select_for_corruption(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    // The epsilon keeps products like 0.29 * 100 from flooring to 28.
    let count = ((fraction * n as f64) + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut picked: Vec<usize> = order.into_iter().take(count.min(n)).collect();
    picked.sort_unstable();
    picked
}

fn opposite(verdict: &str) -> &'static str {
    if verdict.eq_ignore_ascii_case("yes") {
        "no"
    } else {
        "yes"
    }
}

/// `word` spelled with the capitalisation pattern of `like`.
fn match_case(word: &str, like: &str) -> String {
    if like.chars().all(|c| c.is_ascii_uppercase()) {
        word.to_ascii_uppercase()
    } else if like.starts_with(|c: char| c.is_ascii_uppercase()) {
        let mut out = word[..1].to_ascii_uppercase();
        out.push_str(&word[1..]);
        out
    } else {
        word.to_string()
    }
}

/// Rewrites an nsm rationale so its conclusion is the opposite of `gold`:
/// the terminal verdict token is flipped and a contradicting closing
/// sentence is appended.
pub fn flip_rationale(rationale: &str, gold: &str) -> String {
    let flipped = opposite(gold.trim());
    let mut out = match terminal_verdict_span(rationale) {
        Some((s, e)) => {
            let mut t = String::with_capacity(rationale.len() + 8);
            t.push_str(&rationale[..s]);
            t.push_str(&match_case(flipped, &rationale[s..e]));
            t.push_str(&rationale[e..]);
            t
        }
        None => rationale.to_string(),
    };
    let trimmed = out.trim_end().len();
    out.truncate(trimmed);
    if !out.is_empty() {
        out.push(' ');
    }
    out.push_str(&format!("Therefore, the answer is {flipped}."));
    out
}

/// Prompt asking a model to turn an answer into an incorrect one.
pub fn build_corruption_prompt(question: &str, answer: &str) -> String {
    format!(
        "# Task Instructions\n\
Given a Question and an Answer, please output a Modified Answer that transforms the Answer into an incorrect response.\n\
\n\
Requirements:\n\
- Ensure that the final answer in Modified Answer is different from the original Answer.\n\
- If the Answer's final conclusion is \"yes\", then the Modified Answer's final conclusion should be \"no\", and vice versa.\n\
- Output the Modified Answer directly without additional explanations.\n\
\n\
# Question\n{question}\n\n# Answer\n{answer}\n\n# Modified Answer\n"
    )
}

/// The rationale body of a model rewrite: the tagged span when present,
/// otherwise the whole text.
fn rewritten_body(text: &str) -> String {
    match parse_target(text) {
        Ok((r, _)) => r,
        Err(_) => text.trim().to_string(),
    }
}

fn llm_flip(
    index: usize,
    record: &RationaleRecord,
    gateway: &Gateway,
    plan: &CorruptionPlan,
    rule: &ExtractionRule,
) -> Result<String, Reject> {
    let prompt = build_corruption_prompt(&record.qa.question, &record.rationale);
    let total = plan.retries + 1;
    for attempt in 0..total {
        let params = DecodeParams {
            seed: derive_seed(plan.decode.seed ^ plan.seed, &[index as u64, u64::from(attempt)]),
            ..plan.decode.clone()
        };
        let completion = match gateway.generate(&prompt, &params) {
            Ok(c) => c,
            Err(e) => return Err(Reject::backend(record.id(), attempt + 1, &e)),
        };
        let body = rewritten_body(&completion.text);
        if body.is_empty() {
            continue;
        }
        if let Some(found) = extract(&body, rule) {
            if !rule.same_label(&found, &record.qa.answer) {
                return Ok(body);
            }
        }
    }
    Err(Reject {
        id: record.id().to_string(),
        reason: REASON_FLIP_UNVERIFIED.to_string(),
        attempts: total,
        backend_failure: false,
    })
}

/// Rewrites `floor(fraction * N)` seeded-selected records so their final
/// conclusion differs from gold; selected records get provenance
/// `corrupted`. Unselected records pass through untouched.
pub fn corrupt(
    records: &[RationaleRecord],
    plan: &CorruptionPlan,
    gateway: Option<&Gateway>,
    rule: &ExtractionRule,
) -> Result<CorruptionOutcome, ParoError> {
    if !(0.0..=1.0).contains(&plan.fraction) {
        return Err(ParoError::BadFraction(plan.fraction));
    }
    if let Some(r) = records.iter().find(|r| r.qa.task != rule.task()) {
        return Err(ParoError::TaskMismatch {
            id: r.id().to_string(),
            expected: rule.task(),
            found: r.qa.task,
        });
    }
    let picked = select_for_corruption(records.len(), plan.fraction, plan.seed);
    let selected: Vec<String> = picked.iter().map(|&i| records[i].id().to_string()).collect();
    let mut out = records.to_vec();
    let mut rejects = Vec::new();
    match plan.mode {
        CorruptionMode::Deterministic => {
            if rule.task() != Task::Nsm {
                return Err(ParoError::DeterministicNeedsNsm);
            }
            for &i in &picked {
                let r = &mut out[i];
                r.rationale = flip_rationale(&r.rationale, &r.qa.answer);
                r.provenance = Provenance::Corrupted;
            }
        }
        CorruptionMode::Llm => {
            let gateway = gateway.ok_or(ParoError::MissingGateway)?;
            let results = gateway.map_bounded(&picked, |_, &i| llm_flip(i, &records[i], gateway, plan, rule));
            for (&i, result) in picked.iter().zip(results) {
                match result {
                    Ok(body) => {
                        out[i].rationale = body;
                        out[i].provenance = Provenance::Corrupted;
                    }
                    Err(reject) => rejects.push(reject),
                }
            }
        }
    }
    Ok(CorruptionOutcome {
        records: out,
        selected,
        rejects,
    })
}
