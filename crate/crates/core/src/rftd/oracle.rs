//! Exact divergence probabilities on the mock model by exhaustive enumeration.
//!
//! Where detection estimates a divergence rate from `n` sampled rollouts,
//! this module sums the probability of every continuation path instead.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{divergent, top_k_positions, top_m_substitutes, RftdConfig, RftdError};
use crate::gateway::{Completion, MockError, MockModel};
use crate::reward::{extract, ExtractionRule};

/// Default cap on enumerated tree nodes.
pub const DEFAULT_NODE_BUDGET: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("continuation tree exceeds the node budget of {0}")]
    NodeBudgetExceeded(usize),
    #[error(transparent)]
    Mock(#[from] MockError),
    #[error(transparent)]
    Rftd(#[from] RftdError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactDivergence {
    /// Probability that a continuation's answer differs from the original
    /// (unparseable answers count as different).
    pub probability: f64,
    /// Mass of paths cut off at the depth bound without a terminal token.
    pub unterminated_mass: f64,
    pub nodes: usize,
}

/// Bounds for the enumeration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Enumeration {
    pub temperature: f64,
    /// Maximum generated tokens per path, matching the rollouts' `max_tokens`.
    pub depth: usize,
    pub node_budget: usize,
}

struct Walk<'a> {
    model: &'a MockModel,
    prompt_tokens: Vec<String>,
    rule: &'a ExtractionRule,
    original: &'a str,
    bounds: Enumeration,
    nodes: usize,
    divergent_mass: f64,
    unterminated_mass: f64,
}

impl Walk<'_> {
    fn leaf(&mut self, response: &[String], mass: f64) {
        let answer = extract(&response.concat(), self.rule);
        if divergent(answer.as_deref(), self.original, self.rule) == 1 {
            self.divergent_mass += mass;
        }
    }

    fn visit(&mut self, response: &mut Vec<String>, depth: usize, mass: f64) -> Result<(), OracleError> {
        self.nodes += 1;
        if self.nodes > self.bounds.node_budget {
            return Err(OracleError::NodeBudgetExceeded(self.bounds.node_budget));
        }
        if self.model.has_terminated(response) {
            self.leaf(response, mass);
            return Ok(());
        }
        if depth == self.bounds.depth {
            self.unterminated_mass += mass;
            self.leaf(response, mass);
            return Ok(());
        }
        let mut context = self.prompt_tokens.clone();
        context.extend(response.iter().cloned());
        let dist = self.model.sampling_distribution(&context, self.bounds.temperature)?;
        for c in dist {
            response.push(c.token);
            self.visit(response, depth + 1, mass * c.prob)?;
            response.pop();
        }
        Ok(())
    }
}

/// Exact probability that continuing `prefix ++ [substitute]` ends in an
/// answer different from `original_answer`.
pub fn exact_divergence(
    model: &MockModel,
    prompt: &str,
    prefix: &[String],
    substitute: &str,
    rule: &ExtractionRule,
    original_answer: &str,
    bounds: Enumeration,
) -> Result<ExactDivergence, OracleError> {
    let mut walk = Walk {
        model,
        prompt_tokens: model.segment(prompt),
        rule,
        original: original_answer,
        bounds,
        nodes: 0,
        divergent_mass: 0.0,
        unterminated_mass: 0.0,
    };
    let mut response: Vec<String> = prefix.to_vec();
    response.push(substitute.to_string());
    walk.visit(&mut response, 0, 1.0)?;
    Ok(ExactDivergence {
        probability: walk.divergent_mass,
        unterminated_mass: walk.unterminated_mass,
        nodes: walk.nodes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactTrial {
    pub substitute: String,
    pub exact: ExactDivergence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactPosition {
    pub position: usize,
    pub token: String,
    pub entropy: f64,
    pub trials: Vec<ExactTrial>,
    pub forking: bool,
}

/// The classification detection would reach with infinitely many rollouts:
/// same candidate positions and substitutes, exact divergence probabilities.
pub fn exact_detection(
    model: &MockModel,
    prompt: &str,
    response: &Completion,
    config: &RftdConfig,
    rule: &ExtractionRule,
    node_budget: usize,
) -> Result<Vec<ExactPosition>, OracleError> {
    let original = extract(&response.text, rule).ok_or(RftdError::UnparseableOriginal)?;
    let tokens: Vec<String> = response.tokens().map(str::to_string).collect();
    let bounds = Enumeration {
        temperature: config.rollout.temperature,
        depth: config.rollout.max_tokens,
        node_budget,
    };
    top_k_positions(response, config.k, config.entropy_mode)?
        .into_iter()
        .map(|r| {
            let step = response.step(r.position).expect("ranked from response");
            let trials = top_m_substitutes(step, config.m)
                .into_iter()
                .map(|s| {
                    let exact = exact_divergence(model, prompt, &tokens[..r.position - 1], &s, rule, &original, bounds)?;
                    Ok(ExactTrial { substitute: s, exact })
                })
                .collect::<Result<Vec<_>, OracleError>>()?;
            let forking = trials.iter().any(|t| t.exact.probability > config.alpha);
            Ok(ExactPosition {
                position: r.position,
                token: r.token,
                entropy: r.entropy,
                trials,
                forking,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::MockSpec;

    fn model(json: &str) -> MockModel {
        MockModel::new(MockSpec::from_json(json).unwrap()).unwrap()
    }

    fn bounds(temperature: f64) -> Enumeration {
        Enumeration {
            temperature,
            depth: 16,
            node_budget: DEFAULT_NODE_BUDGET,
        }
    }

    #[test]
    fn deterministic_tree_is_zero_or_one() {
        let m = model(
            r#"{"vocab":["A"," B"," C"," yes"," no"],"window":1,
                "table":{"":{"A":1.0},"A":{" B":0.5," C":0.5}," B":{" yes":1.0}," C":{" no":1.0}},
                "terminals":[" yes"," no"]}"#,
        );
        let r = ExtractionRule::Nsm;
        let a = vec!["A".to_string()];
        let flip = exact_divergence(&m, "", &a, " C", &r, "yes", bounds(1.0)).unwrap();
        assert_eq!(flip.probability, 1.0);
        let same = exact_divergence(&m, "", &a, " B", &r, "yes", bounds(1.0)).unwrap();
        assert_eq!(same.probability, 0.0);
        assert_eq!(same.unterminated_mass, 0.0);
    }

    #[test]
    fn two_leaf_tree() {
        // After the substitute, the answer is " no" with probability 0.3.
        let m = model(
            r#"{"vocab":["A"," S"," yes"," no"],"window":1,
                "table":{"":{"A":1.0},"A":{" S":1.0}," S":{" yes":0.7," no":0.3}},
                "terminals":[" yes"," no"]}"#,
        );
        let r = ExtractionRule::Nsm;
        let e = exact_divergence(&m, "", &["A".to_string()], " S", &r, "yes", bounds(1.0)).unwrap();
        assert!((e.probability - 0.3).abs() < 1e-15);
        assert_eq!(e.nodes, 3);

        // At temperature 0.7 the same tree weighs the branches 0.7^(1/0.7) : 0.3^(1/0.7).
        let (a, b) = (0.7f64.powf(1.0 / 0.7), 0.3f64.powf(1.0 / 0.7));
        let e = exact_divergence(&m, "", &["A".to_string()], " S", &r, "yes", bounds(0.7)).unwrap();
        assert!((e.probability - b / (a + b)).abs() < 1e-12);
    }

    #[test]
    fn substitute_equal_to_original_on_deterministic_mock() {
        let m = model(
            r#"{"vocab":["A"," B"," yes"],"window":1,
                "table":{"":{"A":1.0},"A":{" B":1.0}," B":{" yes":1.0}},"terminals":[" yes"]}"#,
        );
        let e = exact_divergence(&m, "", &["A".to_string()], " B", &ExtractionRule::Nsm, "yes", bounds(0.7)).unwrap();
        assert_eq!(e.probability, 0.0);
    }

    #[test]
    fn depth_bound_and_node_budget() {
        // A self-loop never terminates.
        let m = model(r#"{"vocab":["a","b"],"window":1,"table":{"":{"a":0.5,"b":0.5}}}"#);
        let r = ExtractionRule::Nsm;
        let e = exact_divergence(
            &m,
            "",
            &[],
            "a",
            &r,
            "yes",
            Enumeration { temperature: 1.0, depth: 3, node_budget: 100 },
        )
        .unwrap();
        assert!((e.unterminated_mass - 1.0).abs() < 1e-12);
        assert!((e.probability - 1.0).abs() < 1e-12);
        assert!(matches!(
            exact_divergence(&m, "", &[], "a", &r, "yes", Enumeration { temperature: 1.0, depth: 30, node_budget: 100 }),
            Err(OracleError::NodeBudgetExceeded(100))
        ));
    }
}
