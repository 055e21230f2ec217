//! Pattern-prior rationale annotation, rationale corruption and hint prompts.

mod corrupt;
mod prompts;

pub use corrupt::{
    build_corruption_prompt, corrupt, flip_rationale, select_for_corruption, CorruptionMode, CorruptionOutcome,
    CorruptionPlan,
};
pub use prompts::{
    answer_slot_filled, build_hint_prompt, build_hint_prompt_with, build_pattern_prompt, hint_body, query_section,
    truncate_hint, HINT_CAVEAT, NSM_INSTRUCTION, NSM_STEPS, RATIONALE_DIRECTIVE, TPC_INSTRUCTION, TPC_STEPS,
};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{parse_target, DatasetError, Provenance, QaRecord, RationaleRecord, Task, Taxonomy};
use crate::gateway::{DecodeParams, Gateway, GatewayError};
use crate::reward::{extract, ExtractionRule};
use crate::seed::derive_seed;

#[derive(Debug, Error)]
pub enum ParoError {
    #[error("a pattern prior needs exactly 2 exemplars, got {0}")]
    ExemplarCount(usize),
    #[error("exemplar \"{id}\" is a {found} record but the prior is for {expected}")]
    ExemplarTask { id: String, expected: Task, found: Task },
    #[error("pattern prior has no reasoning steps")]
    EmptySteps,
    #[error("record \"{id}\" is a {found} record but the prior is for {expected}")]
    TaskMismatch { id: String, expected: Task, found: Task },
    #[error("unknown exemplar id \"{0}\"")]
    UnknownExemplar(String),
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error("deterministic corruption only supports nsm records")]
    DeterministicNeedsNsm,
    #[error("llm corruption needs a model endpoint")]
    MissingGateway,
    #[error("corruption fraction must lie in [0, 1], got {0}")]
    BadFraction(f64),
    #[error("failed to read prior {path}: {message}")]
    PriorFile { path: PathBuf, message: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Step-wise reasoning guidance plus two worked exemplars for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternPrior {
    pub task: Task,
    pub instruction: String,
    pub steps: Vec<String>,
    pub exemplars: Vec<RationaleRecord>,
}

/// On-disk prior: exemplars are referenced by id into a rationale corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorFile {
    pub task: Task,
    pub steps: Vec<String>,
    pub exemplar_ids: Vec<String>,
    pub instruction: String,
}

impl PatternPrior {
    /// Two-step semantic comparison prior for numerical semantic matching.
    pub fn nsm(exemplars: Vec<RationaleRecord>) -> Self {
        Self {
            task: Task::Nsm,
            instruction: NSM_INSTRUCTION.to_string(),
            steps: NSM_STEPS.iter().map(|s| s.to_string()).collect(),
            exemplars,
        }
    }

    /// Four-step prior for transaction purpose classification.
    pub fn tpc(exemplars: Vec<RationaleRecord>) -> Self {
        Self {
            task: Task::Tpc,
            instruction: TPC_INSTRUCTION.to_string(),
            steps: TPC_STEPS.iter().map(|s| s.to_string()).collect(),
            exemplars,
        }
    }

    pub fn from_file(path: &Path, pool: &[RationaleRecord]) -> Result<Self, ParoError> {
        let err = |message: String| ParoError::PriorFile {
            path: path.to_path_buf(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let file: PriorFile = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        let exemplars = file
            .exemplar_ids
            .iter()
            .map(|id| {
                pool.iter()
                    .find(|r| r.id() == id)
                    .cloned()
                    .ok_or_else(|| ParoError::UnknownExemplar(id.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let prior = Self {
            task: file.task,
            instruction: file.instruction,
            steps: file.steps,
            exemplars,
        };
        prior.validate()?;
        Ok(prior)
    }

    /// Appends the closed label list to the instruction.
    pub fn with_label_list(mut self, taxonomy: &Taxonomy) -> Self {
        self.instruction.push_str("\nCandidate categories:");
        for l in taxonomy.labels() {
            self.instruction.push_str("\n- ");
            self.instruction.push_str(l);
        }
        self
    }

    pub fn validate(&self) -> Result<(), ParoError> {
        if self.exemplars.len() != 2 {
            return Err(ParoError::ExemplarCount(self.exemplars.len()));
        }
        if self.steps.is_empty() || self.steps.iter().any(|s| s.trim().is_empty()) {
            return Err(ParoError::EmptySteps);
        }
        if let Some(e) = self.exemplars.iter().find(|e| e.qa.task != self.task) {
            return Err(ParoError::ExemplarTask {
                id: e.id().to_string(),
                expected: self.task,
                found: e.qa.task,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotationConfig {
    /// Extra attempts after the first when the output is malformed or disagrees with gold.
    pub retries: u32,
    /// Keep the last disagreeing rationale (flagged) instead of dropping the record.
    pub keep_on_mismatch: bool,
    pub decode: DecodeParams,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        Self {
            retries: 2,
            keep_on_mismatch: false,
            decode: DecodeParams::sampled(0.7, 1024, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotated {
    pub record: RationaleRecord,
    pub attempts: u32,
    /// False only for records kept under `keep_on_mismatch`.
    pub agreed: bool,
}

impl Annotated {
    pub fn retries(&self) -> u32 {
        self.attempts.saturating_sub(1)
    }
}

pub const REASON_ANSWER_MISMATCH: &str = "answer-mismatch";
pub const REASON_MALFORMED: &str = "malformed-output";
pub const REASON_FLIP_UNVERIFIED: &str = "flip-unverified";

/// One line of a rejects report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reject {
    pub id: String,
    pub reason: String,
    pub attempts: u32,
    /// Set when the model service failed rather than the output.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub backend_failure: bool,
}

impl Reject {
    fn backend(id: &str, attempts: u32, err: &GatewayError) -> Self {
        Self {
            id: id.to_string(),
            reason: format!("gateway-error: {err}"),
            attempts,
            backend_failure: err.is_backend_failure(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationOutcome {
    pub kept: Vec<Annotated>,
    pub rejects: Vec<Reject>,
}

impl AnnotationOutcome {
    pub fn records(&self) -> Vec<RationaleRecord> {
        self.kept.iter().map(|a| a.record.clone()).collect()
    }
}

enum Attempted {
    Kept(Annotated),
    Rejected(Reject),
}

fn annotate_one(
    index: usize,
    record: &QaRecord,
    gateway: &Gateway,
    prompt: &str,
    config: &AnnotationConfig,
    rule: &ExtractionRule,
) -> Attempted {
    let mut last_mismatch: Option<String> = None;
    let mut last_reason = REASON_MALFORMED;
    let total = config.retries + 1;
    for attempt in 0..total {
        let params = DecodeParams {
            seed: derive_seed(config.decode.seed, &[index as u64, u64::from(attempt)]),
            ..config.decode.clone()
        };
        let completion = match gateway.generate(prompt, &params) {
            Ok(c) => c,
            Err(e) => return Attempted::Rejected(Reject::backend(&record.id, attempt + 1, &e)),
        };
        let Ok((rationale, answer)) = parse_target(&completion.text) else {
            last_reason = REASON_MALFORMED;
            continue;
        };
        if rationale.trim().is_empty() {
            last_reason = REASON_MALFORMED;
            continue;
        }
        match extract(&answer, rule) {
            Some(found) if rule.same_label(&found, &record.answer) => {
                return Attempted::Kept(Annotated {
                    record: RationaleRecord::new(record.clone(), rationale, Provenance::Paro),
                    attempts: attempt + 1,
                    agreed: true,
                });
            }
            Some(_) => {
                last_reason = REASON_ANSWER_MISMATCH;
                last_mismatch = Some(rationale);
            }
            None => last_reason = REASON_MALFORMED,
        }
    }
    match last_mismatch {
        Some(rationale) if config.keep_on_mismatch => Attempted::Kept(Annotated {
            record: RationaleRecord::new(record.clone(), rationale, Provenance::Paro),
            attempts: total,
            agreed: false,
        }),
        _ => Attempted::Rejected(Reject {
            id: record.id.clone(),
            reason: last_reason.to_string(),
            attempts: total,
            backend_failure: false,
        }),
    }
}

/// Synthesizes rationales for `(question, answer)` records without showing
/// the model the answer. A rationale is kept when the answer it reaches
/// agrees with gold; otherwise the record is retried with a fresh seed.
/// Output order follows input order.
pub fn annotate(
    records: &[QaRecord],
    gateway: &Gateway,
    prior: &PatternPrior,
    config: &AnnotationConfig,
    rule: &ExtractionRule,
) -> Result<AnnotationOutcome, ParoError> {
    prior.validate()?;
    if let Some(r) = records.iter().find(|r| r.task != prior.task) {
        return Err(ParoError::TaskMismatch {
            id: r.id.clone(),
            expected: prior.task,
            found: r.task,
        });
    }
    let prompts = records
        .iter()
        .map(|r| build_pattern_prompt(prior, &r.question))
        .collect::<Result<Vec<_>, _>>()?;
    let results = gateway.map_bounded(records, |i, r| annotate_one(i, r, gateway, &prompts[i], config, rule));
    let mut outcome = AnnotationOutcome::default();
    for r in results {
        match r {
            Attempted::Kept(a) => outcome.kept.push(a),
            Attempted::Rejected(j) => outcome.rejects.push(j),
        }
    }
    Ok(outcome)
}
