//! Rollout-based forking token detection.
//!
//! A response position is a forking token when replacing its token with a
//! likely alternative changes the final answer of fresh continuations often
//! enough. Detection runs in four stages:
//!
//! 1. rank positions by the entropy of their next-token distribution and keep
//!    the top `k`;
//! 2. at each kept position take the `m` most probable tokens other than the
//!    one emitted;
//! 3. for each substitute, fix the response up to the position, append the
//!    substitute and sample `n` continuations;
//! 4. the divergence rate of a substitute is the fraction of continuations
//!    whose extracted answer differs from the original; the position is
//!    forking when the largest rate is strictly above `alpha`.
//!
//! Continuations are conditioned on the task prompt followed by the fixed
//! response prefix.

pub mod oracle;

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::{debug, info};

use crate::gateway::{candidate_order, Completion, DecodeParams, Gateway, GatewayError, Prefix, TokenStep};
use crate::reward::{extract, ExtractionRule};
use crate::seed::derive_seed;

/// Coverage below `1 - RESIDUAL_EPSILON` gets a residual pseudo-candidate.
pub const RESIDUAL_EPSILON: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum RftdError {
    #[error("response is empty")]
    EmptyResponse,
    #[error("step {index}: candidate {token:?} has non-positive or non-finite probability {prob}")]
    InvalidProbability { index: usize, token: String, prob: f64 },
    #[error("step {0} has no candidates")]
    NoCandidates(usize),
    #[error("original response has no parseable answer")]
    UnparseableOriginal,
    #[error("position {position} is outside the response (length {len})")]
    PositionOutOfRange { position: usize, len: usize },
    #[error("substitute {0:?} equals the original token")]
    SubstituteEqualsOriginal(String),
    #[error("invalid detection config: {0}")]
    InvalidConfig(String),
    #[error("detection results were produced with different configs ({0} vs {1})")]
    MixedConfigs(String, String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyMode {
    /// Visible candidates rescaled to sum to 1.
    #[default]
    Renormalized,
    /// Unseen mass `1 - coverage` kept as one extra outcome.
    ResidualBucket,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RftdConfig {
    /// Candidate positions examined per response.
    pub k: usize,
    /// Substitutes tried per position.
    pub m: usize,
    /// Rollouts per substitute.
    pub n: usize,
    /// Divergence threshold; a position forks when its max rate is strictly above it.
    pub alpha: f64,
    pub entropy_mode: EntropyMode,
    /// Sampling for continuations.
    pub rollout: DecodeParams,
    /// Decoding for the original responses (greedy).
    pub original: DecodeParams,
}

impl Default for RftdConfig {
    fn default() -> Self {
        Self {
            k: 5,
            m: 3,
            n: 10,
            alpha: 0.5,
            entropy_mode: EntropyMode::Renormalized,
            rollout: DecodeParams::sampled(0.7, 1024, 0),
            original: DecodeParams::greedy(1024),
        }
    }
}

impl RftdConfig {
    pub fn validate(&self) -> Result<(), RftdError> {
        let bad = |m: String| Err(RftdError::InvalidConfig(m));
        if self.k == 0 || self.m == 0 || self.n == 0 {
            return bad(format!("k, m and n must be at least 1 (got {}, {}, {})", self.k, self.m, self.n));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        self.rollout
            .validate()
            .and_then(|_| self.original.validate())
            .map_err(|e| RftdError::InvalidConfig(e.to_string()))
    }

    /// Reads a JSON or TOML config (by extension; anything but `.toml` is JSON).
    pub fn from_file(path: &Path) -> Result<Self, RftdError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RftdError::InvalidConfig(format!("{}: {e}", path.display())))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| RftdError::InvalidConfig(e.to_string()))?
        } else {
            serde_json::from_str(&text).map_err(|e| RftdError::InvalidConfig(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Short stable digest of the config, used to refuse mixing results.
    /// Seeds are left out: runs that differ only in seed share a hash.
    pub fn hash(&self) -> String {
        let mut unseeded = self.clone();
        unseeded.rollout.seed = 0;
        unseeded.original.seed = 0;
        let canonical = serde_json::to_string(&unseeded).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        hex::encode(&digest[..8])
    }
}

fn check_candidates(step: &TokenStep) -> Result<(), RftdError> {
    if step.candidates.is_empty() {
        return Err(RftdError::NoCandidates(step.index));
    }
    for c in &step.candidates {
        if !(c.prob.is_finite() && c.prob > 0.0) {
            return Err(RftdError::InvalidProbability {
                index: step.index,
                token: c.token.clone(),
                prob: c.prob,
            });
        }
    }
    Ok(())
}

/// Shannon entropy, in nats, of the visible next-token distribution at `step`.
pub fn entropy(step: &TokenStep, mode: EntropyMode) -> Result<f64, RftdError> {
    check_candidates(step)?;
    let mut masses: Vec<f64> = step.candidates.iter().map(|c| c.prob).collect();
    let coverage: f64 = masses.iter().sum();
    if mode == EntropyMode::ResidualBucket && coverage < 1.0 - RESIDUAL_EPSILON {
        masses.push(1.0 - coverage);
    }
    let total: f64 = masses.iter().sum();
    let h: f64 = masses
        .iter()
        .map(|&m| {
            let p = m / total;
            -p * p.ln()
        })
        .sum();
    Ok(h.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPosition {
    /// 1-based.
    pub position: usize,
    pub token: String,
    pub entropy: f64,
}

/// The `k` highest-entropy positions, highest first; ties go to the earlier position.
pub fn top_k_positions(response: &Completion, k: usize, mode: EntropyMode) -> Result<Vec<RankedPosition>, RftdError> {
    let mut ranked = response
        .steps
        .iter()
        .enumerate()
        .map(|(i, step)| {
            Ok(RankedPosition {
                position: i + 1,
                token: step.token.clone(),
                entropy: entropy(step, mode)?,
            })
        })
        .collect::<Result<Vec<_>, RftdError>>()?;
    ranked.sort_by(|a, b| {
        b.entropy
            .partial_cmp(&a.entropy)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.position.cmp(&b.position))
    });
    ranked.truncate(k);
    Ok(ranked)
}

/// The `m` most probable visible alternatives to the emitted token.
/// Probability ties are broken lexicographically.
pub fn top_m_substitutes(step: &TokenStep, m: usize) -> Vec<String> {
    let mut cands: Vec<_> = step.candidates.iter().filter(|c| c.token != step.token).collect();
    cands.sort_by(|a, b| candidate_order(a, b));
    cands.into_iter().take(m).map(|c| c.token.clone()).collect()
}

/// 0 when the continuation's answer parses and equals the original, else 1.
pub fn divergent(continuation: Option<&str>, original: &str, rule: &ExtractionRule) -> u8 {
    match continuation {
        Some(answer) if rule.same_label(answer, original) => 0,
        _ => 1,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutSummary {
    /// 1-based rollout index.
    pub index: usize,
    pub answer: Option<String>,
    pub divergent: bool,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstituteTrial {
    pub position: usize,
    pub substitute: String,
    pub rho: f64,
    pub divergent_count: usize,
    pub unparseable_count: usize,
    pub rollouts: Vec<RolloutSummary>,
}

impl SubstituteTrial {
    /// Aggregates rollout outcomes; the result does not depend on their order.
    pub fn from_rollouts(position: usize, substitute: String, mut rollouts: Vec<RolloutSummary>) -> Self {
        rollouts.sort_by_key(|r| r.index);
        let divergent_count = rollouts.iter().filter(|r| r.divergent).count();
        let unparseable_count = rollouts.iter().filter(|r| r.answer.is_none()).count();
        let rho = if rollouts.is_empty() {
            0.0
        } else {
            divergent_count as f64 / rollouts.len() as f64
        };
        Self {
            position,
            substitute,
            rho,
            divergent_count,
            unparseable_count,
            rollouts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionReport {
    pub position: usize,
    pub token: String,
    pub entropy: f64,
    /// True when the step had no alternative to substitute.
    pub skipped: bool,
    pub trials: Vec<SubstituteTrial>,
}

impl PositionReport {
    pub fn max_rho(&self) -> Option<f64> {
        self.trials.iter().map(|t| t.rho).reduce(f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForkingToken {
    pub position: usize,
    /// The token the original response chose at this position.
    pub token: String,
    pub max_rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_id: Option<String>,
    pub config_hash: String,
    pub alpha: f64,
    pub entropy_mode: EntropyMode,
    pub response_len: usize,
    pub original_answer: String,
    /// Candidate positions in rank order.
    pub positions: Vec<PositionReport>,
    pub forking: Vec<ForkingToken>,
}

impl DetectionResult {
    /// Forking set for a different threshold over the same trials.
    pub fn classify(&self, alpha: f64) -> Vec<ForkingToken> {
        classify(&self.positions, alpha)
    }
}

fn classify(positions: &[PositionReport], alpha: f64) -> Vec<ForkingToken> {
    positions
        .iter()
        .filter_map(|p| {
            let max_rho = p.max_rho()?;
            (max_rho > alpha).then(|| ForkingToken {
                position: p.position,
                token: p.token.clone(),
                max_rho,
            })
        })
        .collect()
}

fn response_tokens(response: &Completion) -> Vec<String> {
    response.tokens().map(str::to_string).collect()
}

fn trial_seed(config: &RftdConfig, position: usize, rank: usize) -> u64 {
    derive_seed(config.rollout.seed, &[position as u64, rank as u64])
}

/// Runs `config.n` rollouts after replacing the token at `position` with
/// `substitute` and measures how often the answer changes.
#[allow(clippy::too_many_arguments)]
pub fn divergence_rate(
    gateway: &Gateway,
    prompt: &str,
    response: &Completion,
    position: usize,
    substitute: &str,
    config: &RftdConfig,
    rule: &ExtractionRule,
    original_answer: &str,
) -> Result<SubstituteTrial, RftdError> {
    divergence_rate_seeded(
        gateway,
        prompt,
        response,
        position,
        substitute,
        config,
        rule,
        original_answer,
        config.rollout.seed,
    )
}

#[allow(clippy::too_many_arguments)]
fn divergence_rate_seeded(
    gateway: &Gateway,
    prompt: &str,
    response: &Completion,
    position: usize,
    substitute: &str,
    config: &RftdConfig,
    rule: &ExtractionRule,
    original_answer: &str,
    seed: u64,
) -> Result<SubstituteTrial, RftdError> {
    let len = response.len();
    let step = response
        .step(position)
        .ok_or(RftdError::PositionOutOfRange { position, len })?;
    if step.token == substitute {
        return Err(RftdError::SubstituteEqualsOriginal(substitute.to_string()));
    }
    let mut fixed = response_tokens(response);
    fixed.truncate(position - 1);
    fixed.push(substitute.to_string());
    let prefix = Prefix::with_response(prompt, fixed);
    let fixed_text = prefix.response_text();
    let params = DecodeParams {
        seed,
        ..config.rollout.clone()
    };
    let continuations = gateway.continue_n(&prefix, config.n, &params)?;
    let rollouts = continuations
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let full = format!("{fixed_text}{}", c.text);
            let answer = extract(&full, rule);
            let divergent = divergent(answer.as_deref(), original_answer, rule) == 1;
            RolloutSummary {
                index: i + 1,
                answer,
                divergent,
                tokens: c.len(),
            }
        })
        .collect();
    Ok(SubstituteTrial::from_rollouts(position, substitute.to_string(), rollouts))
}

/// Full detection over one greedy response.
pub fn detect_forking(
    gateway: &Gateway,
    prompt: &str,
    response: &Completion,
    config: &RftdConfig,
    rule: &ExtractionRule,
) -> Result<DetectionResult, RftdError> {
    config.validate()?;
    if response.is_empty() {
        return Err(RftdError::EmptyResponse);
    }
    let original_answer = extract(&response.text, rule).ok_or(RftdError::UnparseableOriginal)?;
    let ranked = top_k_positions(response, config.k, config.entropy_mode)?;

    let mut jobs = Vec::new();
    let mut positions = Vec::with_capacity(ranked.len());
    for r in &ranked {
        let step = response.step(r.position).expect("ranked from response");
        let subs = top_m_substitutes(step, config.m);
        if subs.is_empty() {
            info!(position = r.position, token = %r.token, "no alternative candidates; position skipped");
        }
        for (rank, s) in subs.iter().enumerate() {
            jobs.push((positions.len(), r.position, rank, s.clone()));
        }
        positions.push(PositionReport {
            position: r.position,
            token: r.token.clone(),
            entropy: r.entropy,
            skipped: subs.is_empty(),
            trials: Vec::new(),
        });
    }

    let results = gateway.map_bounded(&jobs, |_, (_, position, rank, sub)| {
        divergence_rate_seeded(
            gateway,
            prompt,
            response,
            *position,
            sub,
            config,
            rule,
            &original_answer,
            trial_seed(config, *position, *rank),
        )
    });
    for ((slot, ..), trial) in jobs.iter().zip(results) {
        let trial = trial?;
        debug!(position = trial.position, substitute = %trial.substitute, rho = trial.rho, "trial done");
        positions[*slot].trials.push(trial);
    }

    let forking = classify(&positions, config.alpha);
    Ok(DetectionResult {
        response_id: None,
        config_hash: config.hash(),
        alpha: config.alpha,
        entropy_mode: config.entropy_mode,
        response_len: response.len(),
        original_answer,
        positions,
        forking,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Candidate, FinishReason, MockSpec};
    use proptest::prelude::*;

    fn step(index: usize, token: &str, dist: &[(&str, f64)]) -> TokenStep {
        let candidates = dist
            .iter()
            .map(|(t, p)| Candidate {
                token: t.to_string(),
                prob: *p,
            })
            .collect();
        TokenStep::new(index, token, 0.0, candidates, usize::MAX)
    }

    /// Independent reference: Kahan-compensated sum of -p ln p in sorted order.
    fn reference_entropy(ps: &[f64]) -> f64 {
        let total: f64 = ps.iter().sum();
        let mut terms: Vec<f64> = ps.iter().map(|p| p / total).map(|p| -p * p.ln()).collect();
        terms.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for t in terms {
            let y = t - comp;
            let s = sum + y;
            comp = (s - sum) - y;
            sum = s;
        }
        sum
    }

    #[test]
    fn entropy_examples() {
        let m = EntropyMode::Renormalized;
        assert_eq!(entropy(&step(1, "a", &[("a", 1.0)]), m).unwrap(), 0.0);
        let h = entropy(&step(1, "a", &[("a", 0.5), ("b", 0.5)]), m).unwrap();
        assert!((h - std::f64::consts::LN_2).abs() < 1e-12);
        let h = entropy(&step(1, "a", &[("a", 0.6), ("b", 0.3), ("c", 0.1)]), m).unwrap();
        assert!((h - 0.897946).abs() < 1e-6, "{h}");
        assert!((h - reference_entropy(&[0.6, 0.3, 0.1])).abs() < 1e-12);
    }

    #[test]
    fn residual_bucket_counts_unseen_mass() {
        let s = step(1, "a", &[("a", 0.5), ("b", 0.25)]);
        let renorm = entropy(&s, EntropyMode::Renormalized).unwrap();
        let resid = entropy(&s, EntropyMode::ResidualBucket).unwrap();
        assert!((renorm - reference_entropy(&[0.5, 0.25])).abs() < 1e-12);
        assert!((resid - reference_entropy(&[0.5, 0.25, 0.25])).abs() < 1e-12);
        // Full coverage: both modes agree.
        let full = step(1, "a", &[("a", 0.5), ("b", 0.5)]);
        assert_eq!(
            entropy(&full, EntropyMode::Renormalized).unwrap(),
            entropy(&full, EntropyMode::ResidualBucket).unwrap()
        );
    }

    #[test]
    fn entropy_rejects_bad_candidates() {
        let mut s = step(3, "a", &[("a", 0.5), ("b", 0.5)]);
        s.candidates[1].prob = 0.0;
        assert!(matches!(
            entropy(&s, EntropyMode::Renormalized),
            Err(RftdError::InvalidProbability { index: 3, .. })
        ));
        s.candidates.clear();
        assert!(matches!(entropy(&s, EntropyMode::Renormalized), Err(RftdError::NoCandidates(3))));
    }

    fn completion_with_entropies(dists: &[&[(&str, f64)]]) -> Completion {
        let steps: Vec<TokenStep> = dists
            .iter()
            .enumerate()
            .map(|(i, d)| step(i + 1, d[0].0, d))
            .collect();
        Completion {
            prompt: String::new(),
            text: steps.iter().map(|s| s.token.as_str()).collect(),
            steps,
            finish_reason: FinishReason::Stop,
        }
    }

    #[test]
    fn top_k_ordering_and_ties() {
        // Entropies increase with the spread of the pair.
        let low: &[(&str, f64)] = &[("a", 0.98), ("b", 0.02)];
        let high: &[(&str, f64)] = &[("a", 0.5), ("b", 0.5)];
        let mid: &[(&str, f64)] = &[("a", 0.8), ("b", 0.2)];
        let c = completion_with_entropies(&[low, high, mid]);
        let t = top_k_positions(&c, 2, EntropyMode::Renormalized).unwrap();
        assert_eq!(t.iter().map(|p| p.position).collect::<Vec<_>>(), [2, 3]);

        let c = completion_with_entropies(&[high, low, low, high]);
        let t = top_k_positions(&c, 1, EntropyMode::Renormalized).unwrap();
        assert_eq!(t[0].position, 1);

        let c = completion_with_entropies(&[low, high, mid]);
        assert_eq!(top_k_positions(&c, 10, EntropyMode::Renormalized).unwrap().len(), 3);
    }

    #[test]
    fn substitute_selection() {
        let s = step(1, "yes", &[("yes", 0.5), ("no", 0.3), ("maybe", 0.15), ("ok", 0.05)]);
        assert_eq!(top_m_substitutes(&s, 2), ["no", "maybe"]);
        let s = step(1, "a", &[("a", 0.9), ("b", 0.1)]);
        assert_eq!(top_m_substitutes(&s, 3), ["b"]);
        let s = step(1, "a", &[("a", 1.0)]);
        assert!(top_m_substitutes(&s, 3).is_empty());
        let s = step(1, "a", &[("a", 0.4), ("c", 0.3), ("b", 0.3)]);
        assert_eq!(top_m_substitutes(&s, 1), ["b"]);
    }

    #[test]
    fn divergent_cases() {
        let r = ExtractionRule::Nsm;
        assert_eq!(divergent(Some("yes"), "yes", &r), 0);
        assert_eq!(divergent(Some("no"), "yes", &r), 1);
        assert_eq!(divergent(None, "yes", &r), 1);
    }

    #[test]
    fn config_validation_and_files() {
        assert!(RftdConfig::default().validate().is_ok());
        let bad = RftdConfig {
            alpha: 1.5,
            ..RftdConfig::default()
        };
        assert!(matches!(bad.validate(), Err(RftdError::InvalidConfig(_))));
        let bad = RftdConfig {
            n: 0,
            ..RftdConfig::default()
        };
        assert!(bad.validate().is_err());

        let dir = tempfile::tempdir().unwrap();
        let toml_path = dir.path().join("c.toml");
        std::fs::write(
            &toml_path,
            "k = 2\nalpha = 0.25\nentropy_mode = \"residual_bucket\"\n[rollout]\ntemperature = 0.7\nmax_tokens = 16\ntop_logprobs = 4\nseed = 3\n",
        )
        .unwrap();
        let cfg = RftdConfig::from_file(&toml_path).unwrap();
        assert_eq!((cfg.k, cfg.m, cfg.alpha), (2, 3, 0.25));
        assert_eq!(cfg.entropy_mode, EntropyMode::ResidualBucket);
        assert_eq!(cfg.rollout.seed, 3);

        let json_path = dir.path().join("c.json");
        std::fs::write(&json_path, r#"{"alpha": 2.0}"#).unwrap();
        assert!(RftdConfig::from_file(&json_path).is_err());
        std::fs::write(&json_path, r#"{"kk": 2}"#).unwrap();
        assert!(RftdConfig::from_file(&json_path).is_err());

        assert_eq!(RftdConfig::default().hash(), RftdConfig::default().hash());
        assert_ne!(RftdConfig::default().hash(), cfg.hash());
        let mut reseeded = RftdConfig::default();
        reseeded.rollout.seed = 99;
        assert_eq!(RftdConfig::default().hash(), reseeded.hash());
    }

    /// Response "A B yes ." where B's substitute C always flips the answer.
    fn flip_spec() -> MockSpec {
        MockSpec::from_json(
            r#"{
            "vocab": ["A"," B"," C"," yes"," no","."],
            "window": 2,
            "table": {
                "": {"A": 1.0},
                "A": {" B": 0.6, " C": 0.4},
                " B": {" yes": 1.0},
                " C": {" no": 1.0},
                " yes": {".": 1.0},
                " no": {".": 1.0}
            },
            "terminals": ["."]
        }"#,
        )
        .unwrap()
    }

    #[test]
    fn divergence_rate_with_certain_flip() {
        let g = Gateway::mock(flip_spec()).unwrap();
        let cfg = RftdConfig {
            rollout: DecodeParams::sampled(0.7, 8, 1),
            ..RftdConfig::default()
        };
        let resp = g.generate("", &DecodeParams::greedy(8)).unwrap();
        assert_eq!(resp.text, "A B yes.");
        let r = ExtractionRule::Nsm;
        let t = divergence_rate(&g, "", &resp, 2, " C", &cfg, &r, "yes").unwrap();
        assert_eq!(t.rho, 1.0);
        assert_eq!(t.divergent_count, 10);
        assert_eq!(t.unparseable_count, 0);
        assert!(matches!(
            divergence_rate(&g, "", &resp, 2, " B", &cfg, &r, "yes"),
            Err(RftdError::SubstituteEqualsOriginal(_))
        ));
        assert!(matches!(
            divergence_rate(&g, "", &resp, 9, " C", &cfg, &r, "yes"),
            Err(RftdError::PositionOutOfRange { position: 9, len: 4 })
        ));
    }

    #[test]
    fn detect_flags_certain_flip_and_respects_alpha_one() {
        let g = Gateway::mock(flip_spec()).unwrap();
        let mut cfg = RftdConfig {
            k: 1,
            rollout: DecodeParams::sampled(0.7, 8, 5),
            ..RftdConfig::default()
        };
        let resp = g.generate("", &DecodeParams::greedy(8)).unwrap();
        let r = ExtractionRule::Nsm;
        let d = detect_forking(&g, "", &resp, &cfg, &r).unwrap();
        assert_eq!(d.positions.len(), 1);
        assert_eq!(d.positions[0].position, 2);
        assert_eq!(d.forking.len(), 1);
        assert_eq!(d.forking[0].token, " B");

        cfg.alpha = 1.0;
        let d = detect_forking(&g, "", &resp, &cfg, &r).unwrap();
        assert!(d.forking.is_empty());
    }

    #[test]
    fn detect_needs_parseable_original() {
        let g = Gateway::mock(flip_spec()).unwrap();
        let resp = g.generate("", &DecodeParams::greedy(2)).unwrap();
        assert_eq!(resp.text, "A B");
        assert!(matches!(
            detect_forking(&g, "", &resp, &RftdConfig::default(), &ExtractionRule::Nsm),
            Err(RftdError::UnparseableOriginal)
        ));
    }

    #[test]
    fn single_candidate_positions_are_skipped() {
        let g = Gateway::mock(flip_spec()).unwrap();
        let resp = g.generate("", &DecodeParams::greedy(8)).unwrap();
        let cfg = RftdConfig {
            k: 4,
            rollout: DecodeParams::sampled(0.7, 8, 5),
            ..RftdConfig::default()
        };
        let d = detect_forking(&g, "", &resp, &cfg, &ExtractionRule::Nsm).unwrap();
        assert_eq!(d.positions.len(), 4);
        assert_eq!(d.positions.iter().filter(|p| p.skipped).count(), 3);
        assert!(d.positions.iter().filter(|p| p.skipped).all(|p| p.trials.is_empty()));
    }

    fn arb_dist() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(1e-6f64..1.0, 1..12)
    }

    proptest! {
        #[test]
        fn entropy_bounds(raw in arb_dist(), scale in 0.05f64..=1.0, residual in prop::bool::ANY) {
            let total: f64 = raw.iter().sum();
            let dist: Vec<(String, f64)> = raw
                .iter()
                .enumerate()
                .map(|(i, p)| (format!("t{i}"), p / total * scale))
                .collect();
            let refs: Vec<(&str, f64)> = dist.iter().map(|(t, p)| (t.as_str(), *p)).collect();
            let s = step(1, "t0", &refs);
            let mode = if residual { EntropyMode::ResidualBucket } else { EntropyMode::Renormalized };
            let h = entropy(&s, mode).unwrap();
            let buckets = refs.len() + usize::from(residual && scale < 1.0 - RESIDUAL_EPSILON);
            prop_assert!(h >= 0.0);
            prop_assert!(h <= (buckets as f64).ln() + 1e-9);
        }

        #[test]
        fn rho_is_order_independent(flags in prop::collection::vec(prop::option::of(prop::bool::ANY), 1..20),
                                    seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let rollouts: Vec<RolloutSummary> = flags
                .iter()
                .enumerate()
                .map(|(i, f)| RolloutSummary {
                    index: i + 1,
                    answer: f.map(|y| if y { "yes".into() } else { "no".into() }),
                    divergent: *f != Some(true),
                    tokens: 1,
                })
                .collect();
            let mut shuffled = rollouts.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = SubstituteTrial::from_rollouts(1, "x".into(), rollouts);
            let b = SubstituteTrial::from_rollouts(1, "x".into(), shuffled);
            prop_assert!((0.0..=1.0).contains(&a.rho));
            prop_assert_eq!(a, b);
        }

        #[test]
        fn alpha_monotonicity(rhos in prop::collection::vec(prop::collection::vec(0usize..=10, 0..4), 1..6),
                              a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let positions: Vec<PositionReport> = rhos
                .iter()
                .enumerate()
                .map(|(i, ts)| PositionReport {
                    position: i + 1,
                    token: format!("t{i}"),
                    entropy: 0.5,
                    skipped: ts.is_empty(),
                    trials: ts.iter().map(|&d| SubstituteTrial {
                        position: i + 1,
                        substitute: "s".into(),
                        rho: d as f64 / 10.0,
                        divergent_count: d,
                        unparseable_count: 0,
                        rollouts: Vec::new(),
                    }).collect(),
                })
                .collect();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let f_lo: Vec<usize> = classify(&positions, lo).iter().map(|f| f.position).collect();
            let f_hi: Vec<usize> = classify(&positions, hi).iter().map(|f| f.position).collect();
            prop_assert!(f_hi.iter().all(|p| f_lo.contains(p)));
            prop_assert!(classify(&positions, 1.0).is_empty());
        }
    }
}
