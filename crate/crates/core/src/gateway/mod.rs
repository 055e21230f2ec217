//! Uniform access to language models.
//!
//! A [`Gateway`] wraps one [`Backend`] (the in-repo [`MockModel`] or an
//! OpenAI-compatible [`RemoteBackend`]) together with its role and a bounded
//! worker pool. All batch entry points return results in request order,
//! independent of completion order.

mod mock;
mod remote;

pub use mock::{MockError, MockModel, MockSpec, CONTEXT_SEPARATOR};
pub use remote::{ApiFlavor, RemoteBackend, RemoteConfig, RetryPolicy};

use std::cmp::Ordering;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::derive_seed;

/// Default bound on concurrent in-flight requests.
pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("authentication rejected (HTTP {status}): {message}")]
    Auth { status: u16, message: String },
    #[error("backend does not return token log-probabilities: {0}")]
    LogprobsUnsupported(String),
    #[error("context length exceeded: {0}")]
    ContextOverflow(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("unexpected backend response: {0}")]
    Protocol(String),
    #[error("backend cannot score fixed text: {0}")]
    ScoringUnsupported(String),
    #[error("invalid decode parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Mock(#[from] MockError),
    #[error("rollouts {failed:?} failed: {first}")]
    RolloutsFailed {
        /// 1-based rollout indices.
        failed: Vec<usize>,
        first: Box<GatewayError>,
    },
}

impl GatewayError {
    /// True when the failure lies with the model service rather than the caller's input.
    pub fn is_backend_failure(&self) -> bool {
        match self {
            GatewayError::InvalidParams(_) | GatewayError::Mock(MockError::InvalidSpec(_)) => false,
            GatewayError::RolloutsFailed { first, .. } => first.is_backend_failure(),
            _ => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Policy,
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeParams {
    /// 0 means greedy.
    pub temperature: f64,
    pub max_tokens: usize,
    /// Number of candidates reported per step; at least 2.
    pub top_logprobs: usize,
    #[serde(default)]
    pub seed: u64,
}

impl DecodeParams {
    pub fn greedy(max_tokens: usize) -> Self {
        Self {
            temperature: 0.0,
            max_tokens,
            top_logprobs: 5,
            seed: 0,
        }
    }

    pub fn sampled(temperature: f64, max_tokens: usize, seed: u64) -> Self {
        Self {
            temperature,
            max_tokens,
            top_logprobs: 5,
            seed,
        }
    }

    pub fn is_greedy(&self) -> bool {
        self.temperature == 0.0
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(GatewayError::InvalidParams(format!(
                "temperature must be a non-negative number, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidParams("max_tokens must be positive".into()));
        }
        if self.top_logprobs < 2 {
            return Err(GatewayError::InvalidParams(format!(
                "top_logprobs must be at least 2, got {}",
                self.top_logprobs
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub token: String,
    pub prob: f64,
}

/// Descending probability, ties broken by lexicographic token order.
pub fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.prob
        .partial_cmp(&a.prob)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.token.cmp(&b.token))
}

/// One generated token and the visible part of the distribution it was drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenStep {
    /// 1-based position in the response.
    pub index: usize,
    pub token: String,
    pub logprob: f64,
    pub candidates: Vec<Candidate>,
    /// Total probability mass of `candidates`.
    pub coverage: f64,
}

impl TokenStep {
    /// Builds a step, sorting and truncating `candidates` to `top_n` and
    /// recording their coverage.
    pub fn new(
        index: usize,
        token: impl Into<String>,
        logprob: f64,
        mut candidates: Vec<Candidate>,
        top_n: usize,
    ) -> Self {
        candidates.sort_by(candidate_order);
        candidates.truncate(top_n);
        let coverage = candidates.iter().map(|c| c.prob).sum();
        Self {
            index,
            token: token.into(),
            logprob,
            candidates,
            coverage,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    /// A terminal token was produced.
    Stop,
    /// `max_tokens` was reached.
    Length,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub prompt: String,
    pub steps: Vec<TokenStep>,
    pub text: String,
    pub finish_reason: FinishReason,
}

impl Completion {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.steps.iter().map(|s| s.token.as_str())
    }

    /// Step at 1-based position `index`.
    pub fn step(&self, index: usize) -> Option<&TokenStep> {
        index.checked_sub(1).and_then(|i| self.steps.get(i))
    }
}

/// Conditioning text for a request: a prompt followed by already-fixed
/// response tokens (empty for a fresh generation).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prefix {
    pub prompt: String,
    pub response: Vec<String>,
}

impl Prefix {
    pub fn prompt(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            response: Vec::new(),
        }
    }

    pub fn with_response(prompt: impl Into<String>, response: Vec<String>) -> Self {
        Self {
            prompt: prompt.into(),
            response,
        }
    }

    pub fn response_text(&self) -> String {
        self.response.concat()
    }

    /// The prefix flattened to plain text.
    pub fn text(&self) -> String {
        let mut s = self.prompt.clone();
        s.push_str(&self.response_text());
        s
    }
}

/// A model service. Implementations must be safe to call from many threads.
pub trait Backend: Send + Sync {
    /// Continues `prefix`. The returned completion covers only newly generated tokens.
    fn complete(&self, prefix: &Prefix, params: &DecodeParams) -> Result<Completion, GatewayError>;

    /// Per-token log-probabilities of `text` when it follows `prompt`.
    fn score(&self, prompt: &str, text: &str) -> Result<Vec<f64>, GatewayError>;

    /// Short human-readable identity, recorded in run metadata.
    fn describe(&self) -> String;
}

/// How to reach a model.
#[derive(Debug, Clone)]
pub enum EndpointSpec {
    Remote(RemoteConfig),
    Mock(MockSpec),
}

#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn Backend>,
    role: Role,
    max_in_flight: usize,
    pool: Arc<rayon::ThreadPool>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend.describe())
            .field("role", &self.role)
            .field("max_in_flight", &self.max_in_flight)
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, role: Role) -> Self {
        Self::with_limit(backend, role, DEFAULT_MAX_IN_FLIGHT)
    }

    pub fn with_limit(backend: Arc<dyn Backend>, role: Role, max_in_flight: usize) -> Self {
        let max_in_flight = max_in_flight.max(1);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(max_in_flight)
            .thread_name(|i| format!("gateway-{i}"))
            .build()
            .expect("failed to start gateway worker pool");
        Self {
            backend,
            role,
            max_in_flight,
            pool: Arc::new(pool),
        }
    }

    pub fn connect(spec: EndpointSpec, role: Role, max_in_flight: usize) -> Result<Self, GatewayError> {
        let backend: Arc<dyn Backend> = match spec {
            EndpointSpec::Mock(spec) => Arc::new(MockModel::new(spec)?),
            EndpointSpec::Remote(cfg) => Arc::new(RemoteBackend::new(cfg)?),
        };
        Ok(Self::with_limit(backend, role, max_in_flight))
    }

    pub fn mock(spec: MockSpec) -> Result<Self, GatewayError> {
        Ok(Self::new(Arc::new(MockModel::new(spec)?), Role::Policy))
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    pub fn describe(&self) -> String {
        self.backend.describe()
    }

    pub fn generate(&self, prompt: &str, params: &DecodeParams) -> Result<Completion, GatewayError> {
        self.complete(&Prefix::prompt(prompt), params)
    }

    pub fn complete(&self, prefix: &Prefix, params: &DecodeParams) -> Result<Completion, GatewayError> {
        params.validate()?;
        self.backend.complete(prefix, params)
    }

    /// `n` independent continuations of `prefix`. Rollout `i` is seeded from
    /// `(params.seed, i)`, so the result depends only on the inputs. Any
    /// failure fails the whole call and names the 1-based failed indices.
    pub fn continue_n(
        &self,
        prefix: &Prefix,
        n: usize,
        params: &DecodeParams,
    ) -> Result<Vec<Completion>, GatewayError> {
        if n == 0 {
            return Err(GatewayError::InvalidParams("rollout count must be at least 1".into()));
        }
        params.validate()?;
        let indices: Vec<usize> = (0..n).collect();
        let results = self.map_bounded(&indices, |_, &i| {
            let mut p = params.clone();
            p.seed = derive_seed(params.seed, &[i as u64]);
            self.backend.complete(prefix, &p)
        });
        collect_all(results)
    }

    pub fn score_sequence(&self, prompt: &str, text: &str) -> Result<Vec<f64>, GatewayError> {
        if text.is_empty() {
            return Ok(Vec::new());
        }
        self.backend.score(prompt, text)
    }

    /// Runs `f` over `items` on the gateway pool, at most `max_in_flight`
    /// at a time. Output order matches input order.
    pub fn map_bounded<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync + Send,
    {
        use rayon::prelude::*;
        self.pool.install(|| {
            items
                .par_iter()
                .enumerate()
                .map(|(i, item)| f(i, item))
                .collect()
        })
    }
}

/// All-or-nothing collection of per-request results.
pub fn collect_all<T>(results: Vec<Result<T, GatewayError>>) -> Result<Vec<T>, GatewayError> {
    let mut ok = Vec::with_capacity(results.len());
    let mut failed = Vec::new();
    let mut first = None;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                failed.push(i + 1);
                first.get_or_insert(e);
            }
        }
    }
    match first {
        None => Ok(ok),
        Some(first) => Err(GatewayError::RolloutsFailed {
            failed,
            first: Box::new(first),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
    use std::sync::Mutex;
    use std::time::Duration;

    fn spec(json: &str) -> MockSpec {
        serde_json::from_str(json).unwrap()
    }

    fn two_way() -> Gateway {
        Gateway::mock(spec(
            r#"{"vocab":["B","C"],"window":2,"table":{"":{"B":0.7,"C":0.3}},"terminals":["B","C"]}"#,
        ))
        .unwrap()
    }

    #[test]
    fn point_mass_greedy() {
        let g = Gateway::mock(spec(
            r#"{"vocab":["B"],"window":2,"table":{"":{"B":1.0}},"terminals":["B"]}"#,
        ))
        .unwrap();
        let c = g.generate("", &DecodeParams::greedy(4)).unwrap();
        assert_eq!(c.text, "B");
        assert_eq!(c.finish_reason, FinishReason::Stop);
    }

    #[test]
    fn greedy_takes_argmax_and_is_idempotent() {
        let g = two_way();
        let a = g.generate("", &DecodeParams::greedy(4)).unwrap();
        let b = g.generate("", &DecodeParams::greedy(4)).unwrap();
        assert_eq!(a.text, "B");
        assert_eq!(a, b);
        let step = &a.steps[0];
        assert_eq!(step.candidates[0].token, "B");
        assert!((step.coverage - 1.0).abs() < 1e-12);
        assert!((step.logprob - 0.7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let g = two_way();
        let p = DecodeParams::sampled(0.7, 4, 42);
        assert_eq!(g.generate("", &p).unwrap(), g.generate("", &p).unwrap());
    }

    #[test]
    fn continue_n_counts_and_stability() {
        let g = two_way();
        let p = DecodeParams::sampled(1.0, 4, 9);
        let a = g.continue_n(&Prefix::prompt(""), 3, &p).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, g.continue_n(&Prefix::prompt(""), 3, &p).unwrap());
        assert!(matches!(
            g.continue_n(&Prefix::prompt(""), 0, &p),
            Err(GatewayError::InvalidParams(_))
        ));
    }

    #[test]
    fn scoring_matches_table() {
        let g = two_way();
        let lp = g.score_sequence("", "C").unwrap();
        assert_eq!(lp.len(), 1);
        assert!((lp[0] - (-1.203973)).abs() < 1e-6);
        assert!(g.score_sequence("", "").unwrap().is_empty());
        let own = g.generate("", &DecodeParams::greedy(4)).unwrap();
        let scored = g.score_sequence("", &own.text).unwrap();
        let logged: Vec<f64> = own.steps.iter().map(|s| s.logprob).collect();
        assert_eq!(scored, logged);
    }

    #[test]
    fn params_validation() {
        let mut p = DecodeParams::greedy(4);
        p.top_logprobs = 1;
        assert!(p.validate().is_err());
        p.top_logprobs = 2;
        p.temperature = -1.0;
        assert!(p.validate().is_err());
        p.temperature = 0.0;
        p.max_tokens = 0;
        assert!(p.validate().is_err());
    }

    struct Flaky {
        fail_on: Vec<u64>,
        inner: MockModel,
    }

    impl Backend for Flaky {
        fn complete(&self, prefix: &Prefix, params: &DecodeParams) -> Result<Completion, GatewayError> {
            if self.fail_on.contains(&params.seed) {
                return Err(GatewayError::Transport {
                    attempts: 3,
                    message: "refused".into(),
                });
            }
            self.inner.complete(prefix, params)
        }
        fn score(&self, _: &str, _: &str) -> Result<Vec<f64>, GatewayError> {
            unreachable!()
        }
        fn describe(&self) -> String {
            "flaky".into()
        }
    }

    #[test]
    fn partial_failure_names_indices() {
        let base = 5;
        let inner = MockModel::new(spec(
            r#"{"vocab":["B"],"table":{"":{"B":1.0}},"terminals":["B"]}"#,
        ))
        .unwrap();
        let flaky = Flaky {
            fail_on: vec![derive_seed(base, &[1]), derive_seed(base, &[3])],
            inner,
        };
        let g = Gateway::new(Arc::new(flaky), Role::Policy);
        let err = g
            .continue_n(&Prefix::prompt(""), 4, &DecodeParams::sampled(1.0, 2, base))
            .unwrap_err();
        match err {
            GatewayError::RolloutsFailed { failed, .. } => assert_eq!(failed, vec![2, 4]),
            other => panic!("unexpected {other:?}"),
        }
    }

    struct Counting {
        current: AtomicUsize,
        peak: Mutex<usize>,
    }

    impl Backend for Counting {
        fn complete(&self, _: &Prefix, _: &DecodeParams) -> Result<Completion, GatewayError> {
            let now = self.current.fetch_add(1, AtomicOrdering::SeqCst) + 1;
            {
                let mut peak = self.peak.lock().unwrap();
                *peak = (*peak).max(now);
            }
            std::thread::sleep(Duration::from_millis(5));
            self.current.fetch_sub(1, AtomicOrdering::SeqCst);
            Ok(Completion {
                prompt: String::new(),
                steps: Vec::new(),
                text: String::new(),
                finish_reason: FinishReason::Stop,
            })
        }
        fn score(&self, _: &str, _: &str) -> Result<Vec<f64>, GatewayError> {
            Ok(Vec::new())
        }
        fn describe(&self) -> String {
            "counting".into()
        }
    }

    #[test]
    fn in_flight_requests_are_bounded() {
        let backend = Arc::new(Counting {
            current: AtomicUsize::new(0),
            peak: Mutex::new(0),
        });
        let g = Gateway::with_limit(backend.clone(), Role::Policy, 3);
        g.continue_n(&Prefix::prompt(""), 24, &DecodeParams::sampled(1.0, 2, 0))
            .unwrap();
        let peak = *backend.peak.lock().unwrap();
        assert!(peak <= 3, "peak in-flight {peak}");
    }
}
