//! Answer extraction, verifiable rewards and evaluation metrics.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{QaRecord, Task, Taxonomy, ANSWER_CLOSE, ANSWER_OPEN, RATIONALE_CLOSE};

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("log-probability streams differ in length (policy {policy}, reference {reference})")]
    LengthMismatch { policy: usize, reference: usize },
    #[error("accuracy over an empty prediction list")]
    EmptyPredictions,
    #[error("prediction for unknown id \"{0}\"")]
    UnknownPredictionId(String),
    #[error("duplicate prediction for id \"{0}\"")]
    DuplicatePrediction(String),
    #[error("tpc extraction requires a taxonomy")]
    MissingTaxonomy,
}

/// How a final label is read out of free-form model output.
#[derive(Debug, Clone, PartialEq)]
pub enum ExtractionRule {
    /// Binary yes/no verdict.
    Nsm,
    /// One label from a closed taxonomy.
    Tpc(Taxonomy),
}

impl ExtractionRule {
    pub fn for_task(task: Task, taxonomy: Option<Taxonomy>) -> Result<Self, RewardError> {
        match task {
            Task::Nsm => Ok(ExtractionRule::Nsm),
            Task::Tpc => taxonomy.map(ExtractionRule::Tpc).ok_or(RewardError::MissingTaxonomy),
        }
    }

    pub fn task(&self) -> Task {
        match self {
            ExtractionRule::Nsm => Task::Nsm,
            ExtractionRule::Tpc(_) => Task::Tpc,
        }
    }

    /// Label equality under this rule's comparison.
    pub fn same_label(&self, a: &str, b: &str) -> bool {
        match self {
            ExtractionRule::Nsm => a.trim().eq_ignore_ascii_case(b.trim()),
            ExtractionRule::Tpc(_) => a.trim() == b.trim(),
        }
    }
}

fn verdict_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(yes|no)\b").expect("valid regex"))
}

/// Content of the last `<answer>...</answer>` pair, if any.
pub fn answer_tag_content(text: &str) -> Option<&str> {
    let open = text.rfind(ANSWER_OPEN)?;
    let start = open + ANSWER_OPEN.len();
    let close = text[start..].find(ANSWER_CLOSE)?;
    Some(&text[start..start + close])
}

/// Byte range of the last standalone yes/no token the NSM rule would read,
/// ignoring answer tags.
pub fn terminal_verdict_span(text: &str) -> Option<(usize, usize)> {
    let offset = text.rfind(RATIONALE_CLOSE).map_or(0, |i| i + RATIONALE_CLOSE.len());
    verdict_regex()
        .find_iter(&text[offset..])
        .last()
        .map(|m| (offset + m.start(), offset + m.end()))
}

fn extract_nsm(text: &str) -> Option<String> {
    if let Some(content) = answer_tag_content(text) {
        let c = content.trim().to_lowercase();
        if c == "yes" || c == "no" {
            return Some(c);
        }
    }
    terminal_verdict_span(text).map(|(s, e)| text[s..e].to_lowercase())
}

fn extract_tpc(text: &str, taxonomy: &Taxonomy) -> Option<String> {
    let label_line = text
        .lines()
        .rev()
        .map(str::trim)
        .find_map(|l| l.strip_prefix("Label:"))
        .map(|l| l.trim().trim_matches('`').trim());
    if let Some(label) = label_line.filter(|l| taxonomy.contains(l)) {
        return Some(label.to_string());
    }
    taxonomy
        .labels()
        .iter()
        .filter_map(|l| text.rfind(l.as_str()).map(|pos| (pos, l.len(), l)))
        .max_by_key(|&(pos, len, _)| (pos, len))
        .map(|(_, _, l)| l.clone())
}

/// Reads the final label out of `text`; `None` when nothing parses.
pub fn extract(text: &str, rule: &ExtractionRule) -> Option<String> {
    match rule {
        ExtractionRule::Nsm => extract_nsm(text),
        ExtractionRule::Tpc(t) => extract_tpc(text, t),
    }
}

/// Verifiable reward: 1 when the extracted answer equals `gold`, else 0.
pub fn verify(text: &str, gold: &str, rule: &ExtractionRule) -> u8 {
    match extract(text, rule) {
        Some(found) if rule.same_label(&found, gold) => 1,
        _ => 0,
    }
}

/// Single-sample sequence KL estimate: `sum_t (policy_t - reference_t)`.
/// Positive when the policy gives its own sample more mass than the reference.
pub fn kl_estimate(policy: &[f64], reference: &[f64]) -> Result<f64, RewardError> {
    if policy.len() != reference.len() {
        return Err(RewardError::LengthMismatch {
            policy: policy.len(),
            reference: reference.len(),
        });
    }
    Ok(policy.iter().zip(reference).map(|(p, r)| p - r).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// KL coefficient, non-negative.
    pub beta: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { beta: 0.0 }
    }
}

/// `verify - beta * KL(policy || reference)`.
pub fn rlvr_reward(
    text: &str,
    gold: &str,
    rule: &ExtractionRule,
    policy: &[f64],
    reference: &[f64],
    config: &RewardConfig,
) -> Result<f64, RewardError> {
    let kl = kl_estimate(policy, reference)?;
    let v = f64::from(verify(text, gold, rule));
    if config.beta == 0.0 {
        return Ok(v);
    }
    Ok(v - config.beta * kl)
}

/// Gold and predicted positive sets plus per-record predictions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSets {
    pub gold: BTreeSet<String>,
    pub predicted: BTreeSet<String>,
    /// `(prediction, gold)` per record.
    pub predictions: Vec<(Option<String>, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub gold_count: usize,
    pub predicted_count: usize,
    pub overlap_count: usize,
    /// Metrics that had a zero denominator and were reported as 0.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined: Vec<String>,
}

/// Harmonic mean of precision and recall, 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

pub fn pair_metrics(sets: &EvalSets) -> MetricSummary {
    let overlap = sets.gold.intersection(&sets.predicted).count();
    let mut undefined = Vec::new();
    let ratio = |num: usize, den: usize, name: &str, undefined: &mut Vec<String>| {
        if den == 0 {
            undefined.push(name.to_string());
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(overlap, sets.predicted.len(), "precision", &mut undefined);
    let recall = ratio(overlap, sets.gold.len(), "recall", &mut undefined);
    let accuracy = match accuracy(&sets.predictions) {
        Ok(a) => a,
        Err(_) => {
            undefined.push("accuracy".into());
            0.0
        }
    };
    MetricSummary {
        accuracy,
        precision,
        recall,
        f1: f1_score(precision, recall),
        gold_count: sets.gold.len(),
        predicted_count: sets.predicted.len(),
        overlap_count: overlap,
        undefined,
    }
}

/// Fraction of rows whose prediction parsed and equals gold (exact string match).
pub fn accuracy(predictions: &[(Option<String>, String)]) -> Result<f64, RewardError> {
    if predictions.is_empty() {
        return Err(RewardError::EmptyPredictions);
    }
    let correct = predictions
        .iter()
        .filter(|(p, g)| p.as_deref() == Some(g.as_str()))
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub id: String,
    pub gold: String,
    pub predicted: Option<String>,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub summary: MetricSummary,
    pub records: Vec<Verdict>,
}

/// Scores raw model outputs against gold records, matched by id.
///
/// Accuracy is record-level. For nsm the positive sets hold the ids
/// judged equivalent ("yes"); for tpc they hold `(id, label)` pairs, so
/// precision is measured over parsed predictions and recall over all gold
/// records. Gold records without a prediction count as unparseable.
pub fn evaluate(
    outputs: &[(String, String)],
    gold: &[QaRecord],
    rule: &ExtractionRule,
) -> Result<EvalReport, RewardError> {
    let gold_ids: HashSet<&str> = gold.iter().map(|g| g.id.as_str()).collect();
    let mut by_id: HashMap<&str, &str> = HashMap::new();
    for (id, text) in outputs {
        if !gold_ids.contains(id.as_str()) {
            return Err(RewardError::UnknownPredictionId(id.clone()));
        }
        if by_id.insert(id.as_str(), text.as_str()).is_some() {
            return Err(RewardError::DuplicatePrediction(id.clone()));
        }
    }
    let mut sets = EvalSets::default();
    let mut records = Vec::with_capacity(gold.len());
    for g in gold {
        let predicted = by_id.get(g.id.as_str()).and_then(|t| extract(t, rule));
        let correct = predicted.as_deref().is_some_and(|p| rule.same_label(p, &g.answer));
        match rule {
            ExtractionRule::Nsm => {
                if g.answer.eq_ignore_ascii_case("yes") {
                    sets.gold.insert(g.id.clone());
                }
                if predicted.as_deref() == Some("yes") {
                    sets.predicted.insert(g.id.clone());
                }
            }
            ExtractionRule::Tpc(_) => {
                sets.gold.insert(format!("{}\t{}", g.id, g.answer.trim()));
                if let Some(p) = &predicted {
                    sets.predicted.insert(format!("{}\t{}", g.id, p));
                }
            }
        }
        // Accuracy rows use normalized labels so the comparison matches `correct`.
        let norm_gold = match rule {
            ExtractionRule::Nsm => g.answer.trim().to_lowercase(),
            ExtractionRule::Tpc(_) => g.answer.trim().to_string(),
        };
        sets.predictions.push((predicted.clone(), norm_gold));
        records.push(Verdict {
            id: g.id.clone(),
            gold: g.answer.clone(),
            predicted,
            correct,
        });
    }
    Ok(EvalReport {
        task: rule.task(),
        summary: pair_metrics(&sets),
        records,
    })
}

impl EvalReport {
    /// `metric,value` rows: counts and the four metrics.
    pub fn summary_csv(&self) -> String {
        let s = &self.summary;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["metric", "value"]).expect("in-memory write");
        for (k, v) in [
            ("records", self.records.len().to_string()),
            ("gold_count", s.gold_count.to_string()),
            ("predicted_count", s.predicted_count.to_string()),
            ("overlap_count", s.overlap_count.to_string()),
            ("accuracy", format!("{:.6}", s.accuracy)),
            ("precision", format!("{:.6}", s.precision)),
            ("recall", format!("{:.6}", s.recall)),
            ("f1", format!("{:.6}", s.f1)),
        ] {
            w.write_record([k, v.as_str()]).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    /// Per-record verdicts: `id,gold,predicted,correct`.
    pub fn records_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["id", "gold", "predicted", "correct"]).expect("in-memory write");
        for r in &self.records {
            w.write_record([
                r.id.as_str(),
                r.gold.as_str(),
                r.predicted.as_deref().unwrap_or(""),
                if r.correct { "1" } else { "0" },
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}
