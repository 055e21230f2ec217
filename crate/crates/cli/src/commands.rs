//! Subcommand implementations. Each returns the files it read and wrote so
//! the caller can record them in the run manifest.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use forkscope_core::dataset::{
    corpus_stats, load_corpus, load_rationales, save_rationales, QaRecord, Task, Taxonomy,
};
use forkscope_core::gateway::{
    ApiFlavor, Completion, EndpointSpec, Gateway, MockModel, MockSpec, Prefix, RemoteConfig, Role,
};
use forkscope_core::paro::{
    annotate, build_hint_prompt_with, corrupt, truncate_hint, AnnotationConfig, CorruptionMode, CorruptionPlan,
    PatternPrior, NSM_INSTRUCTION, TPC_INSTRUCTION,
};
use forkscope_core::report::{aggregate_frequencies, emit_report, ReportFormat};
use forkscope_core::reward::{evaluate, ExtractionRule};
use forkscope_core::rftd::oracle::exact_detection;
use forkscope_core::rftd::{detect_forking, DetectionResult, RftdConfig, RftdError};
use forkscope_core::seed::derive_seed;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::args::{Command, FormatArg, Global, ModeArg, RftdOverrides, TaskArgs};
use crate::manifest::RunManifest;
use crate::{jsonl, CliError, Outcome, EXIT_BACKEND, EXIT_OK};

type CmdResult = Result<Outcome, CliError>;

/// One greedy original response, as written by `generate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub id: String,
    pub task: Task,
    pub prompt: String,
    pub gold: String,
    pub completion: Completion,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Skipped {
    id: String,
    reason: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Prediction {
    id: String,
    #[serde(alias = "text")]
    output: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HintRecord {
    id: String,
    task: Task,
    prompt: String,
    answer: String,
}

#[derive(Debug, Clone, Serialize)]
struct OracleRecord<'a> {
    id: &'a str,
    positions: Vec<forkscope_core::rftd::oracle::ExactPosition>,
}

pub fn dispatch(cli: &crate::Cli, out: &Path) -> CmdResult {
    let g = &cli.global;
    match &cli.command {
        Command::Generate { corpus, task, rftd } => generate(g, out, corpus, task, rftd),
        Command::Detect { responses, task, rftd } => detect(g, out, responses, task, rftd),
        Command::Report {
            detections,
            formats,
            top_n,
            corpus_id,
        } => report(g, out, detections, formats, *top_n, corpus_id.as_deref()),
        Command::Evaluate { pred, gold, task } => evaluate_cmd(g, out, pred, gold, task),
        Command::Annotate {
            corpus,
            exemplars,
            prior,
            task,
            retries,
            keep_on_mismatch,
        } => annotate_cmd(g, out, corpus, exemplars, prior.as_deref(), task, *retries, *keep_on_mismatch),
        Command::Corrupt {
            corpus,
            task,
            fraction,
            mode,
        } => corrupt_cmd(g, out, corpus, task, *fraction, *mode),
        Command::Hint { corpus, task, truncate } => hint(g, out, corpus, task, *truncate),
        Command::Stats { corpus, task } => stats(g, out, corpus, task),
        Command::MockOracle {
            responses,
            task,
            rftd,
            node_budget,
        } => mock_oracle(g, out, responses, task, rftd, *node_budget),
    }
}

fn no_config(g: &Global, command: &str) -> Result<(), CliError> {
    match &g.config {
        Some(_) => Err(CliError::invalid(anyhow!("--config is not used by {command}"))),
        None => Ok(()),
    }
}

fn taxonomy(args: &TaskArgs) -> Result<Option<Taxonomy>, CliError> {
    Ok(args.taxonomy.as_deref().map(Taxonomy::load).transpose()?)
}

fn rule(args: &TaskArgs) -> Result<(Task, Option<Taxonomy>, ExtractionRule), CliError> {
    let task = Task::from(args.task);
    let tax = taxonomy(args)?;
    let rule = ExtractionRule::for_task(task, tax.clone())?;
    Ok((task, tax, rule))
}

fn inputs(paths: &[&Path], args: &TaskArgs) -> Vec<PathBuf> {
    paths
        .iter()
        .map(|p| p.to_path_buf())
        .chain(args.taxonomy.clone())
        .collect()
}

/// Mock spec when `--mock` is given, otherwise the remote server.
fn gateway(g: &Global) -> Result<Gateway, CliError> {
    let spec = match (&g.mock, &g.base_url) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            EndpointSpec::Mock(MockSpec::from_json(&text)?)
        }
        (None, base) => {
            let mut cfg = RemoteConfig::from_env(base.clone(), g.model.clone()).ok_or_else(|| {
                CliError::invalid(anyhow!("no model endpoint: pass --mock or --base-url (or set FORKSCOPE_BASE_URL)"))
            })?;
            if g.chat {
                cfg.flavor = ApiFlavor::Chat;
            }
            EndpointSpec::Remote(cfg)
        }
    };
    Ok(Gateway::connect(spec, Role::Policy, g.parallel)?)
}

fn rftd_config(g: &Global, o: &RftdOverrides) -> Result<RftdConfig, CliError> {
    let mut cfg = match &g.config {
        Some(path) => RftdConfig::from_file(path)?,
        None => RftdConfig::default(),
    };
    if let Some(k) = o.k {
        cfg.k = k;
    }
    if let Some(m) = o.m {
        cfg.m = m;
    }
    if let Some(n) = o.n {
        cfg.n = n;
    }
    if let Some(a) = o.alpha {
        cfg.alpha = a;
    }
    if let Some(e) = o.entropy_mode {
        cfg.entropy_mode = e.into();
    }
    if let Some(t) = o.temperature {
        cfg.rollout.temperature = t;
    }
    if let Some(t) = o.max_tokens {
        cfg.rollout.max_tokens = t;
        cfg.original.max_tokens = t;
    }
    cfg.rollout.seed = g.seed;
    cfg.original.seed = g.seed;
    cfg.validate()?;
    Ok(cfg)
}

fn generate(g: &Global, out: &Path, corpus: &Path, task: &TaskArgs, o: &RftdOverrides) -> CmdResult {
    let cfg = rftd_config(g, o)?;
    let (task_kind, tax, _) = rule(task)?;
    let records: Vec<QaRecord> = load_corpus(corpus, task_kind, tax.as_ref())?
        .into_iter()
        .map(|r| r.qa().clone())
        .collect();
    let gw = gateway(g)?;
    let results = gw.map_bounded(&records, |_, r| gw.complete(&Prefix::prompt(&r.question), &cfg.original));
    let mut responses = Vec::with_capacity(records.len());
    for (r, c) in records.iter().zip(results) {
        let completion = c.map_err(|e| {
            let code = CliError::from(e);
            CliError {
                code: code.code,
                error: code.error.context(format!("record {}", r.id)),
            }
        })?;
        responses.push(ResponseRecord {
            id: r.id.clone(),
            task: r.task,
            prompt: r.question.clone(),
            gold: r.answer.clone(),
            completion,
        });
    }
    let path = out.join("responses.jsonl");
    jsonl::write(&path, &responses)?;
    Ok(Outcome {
        inputs: inputs(&[corpus], task),
        outputs: vec![path],
        config: json!({ "rftd": cfg, "task": task }),
        endpoint: Some(gw.describe()),
        exit_code: EXIT_OK,
    })
}

fn detect(g: &Global, out: &Path, responses: &Path, task: &TaskArgs, o: &RftdOverrides) -> CmdResult {
    let cfg = rftd_config(g, o)?;
    let (_, _, rule) = rule(task)?;
    let records: Vec<ResponseRecord> = jsonl::read(responses)?;
    let gw = gateway(g)?;
    let mut results = Vec::new();
    let mut skipped = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let mut per = cfg.clone();
        per.rollout.seed = derive_seed(g.seed, &[i as u64]);
        match detect_forking(&gw, &r.prompt, &r.completion, &per, &rule) {
            Ok(mut d) => {
                d.response_id = Some(r.id.clone());
                results.push(d);
            }
            Err(e @ (RftdError::UnparseableOriginal | RftdError::EmptyResponse | RftdError::NoCandidates(_))) => {
                skipped.push(Skipped {
                    id: r.id.clone(),
                    reason: e.to_string(),
                })
            }
            Err(e) => {
                let err = CliError::from(e);
                return Err(CliError {
                    code: err.code,
                    error: err.error.context(format!("response {}", r.id)),
                });
            }
        }
    }
    let det_path = out.join("detections.jsonl");
    let skip_path = out.join("skipped.jsonl");
    jsonl::write(&det_path, &results)?;
    jsonl::write(&skip_path, &skipped)?;
    Ok(Outcome {
        inputs: inputs(&[responses], task),
        outputs: vec![det_path, skip_path],
        config: json!({ "rftd": cfg, "config_hash": cfg.hash(), "task": task }),
        endpoint: Some(gw.describe()),
        exit_code: EXIT_OK,
    })
}

fn report(
    g: &Global,
    out: &Path,
    detections: &[PathBuf],
    formats: &[FormatArg],
    top_n: usize,
    corpus_id: Option<&str>,
) -> CmdResult {
    no_config(g, "report")?;
    let mut results: Vec<DetectionResult> = Vec::new();
    for path in detections {
        results.extend(jsonl::read::<DetectionResult>(path)?);
    }
    let mut table = aggregate_frequencies(&results)?;
    // The detect run's manifest, when next to its output, names the endpoint and corpus.
    let upstream = detections[0].parent().and_then(|d| RunManifest::read(d).ok());
    table.endpoint = upstream.as_ref().and_then(|m| m.endpoint.clone());
    table.corpus_id = corpus_id.map(str::to_string).or_else(|| {
        upstream
            .as_ref()
            .and_then(|m| m.inputs.first())
            .and_then(|p| p.file_stem())
            .map(|s| s.to_string_lossy().into_owned())
    });
    let formats: Vec<ReportFormat> = formats
        .iter()
        .map(|f| match f {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Json => ReportFormat::Json,
            FormatArg::Svg => ReportFormat::Svg,
        })
        .collect();
    let outputs = emit_report(&table, &formats, top_n, out)?;
    Ok(Outcome {
        inputs: detections.to_vec(),
        outputs,
        config: json!({ "formats": formats, "top_n": top_n, "corpus_id": table.corpus_id }),
        endpoint: table.endpoint.clone(),
        exit_code: EXIT_OK,
    })
}

fn evaluate_cmd(g: &Global, out: &Path, pred: &Path, gold: &Path, task: &TaskArgs) -> CmdResult {
    no_config(g, "evaluate")?;
    let (task_kind, tax, rule) = rule(task)?;
    let gold_records: Vec<QaRecord> = load_corpus(gold, task_kind, tax.as_ref())?
        .into_iter()
        .map(|r| r.qa().clone())
        .collect();
    let outputs: Vec<(String, String)> = jsonl::read::<Prediction>(pred)?
        .into_iter()
        .map(|p| (p.id, p.output))
        .collect();
    let report = evaluate(&outputs, &gold_records, &rule)?;
    println!("{}", serde_json::to_string_pretty(&report.summary)?);
    let report_path = out.join("evaluation.json");
    let summary_path = out.join("summary.csv");
    let records_path = out.join("records.csv");
    jsonl::write_json(&report_path, &report)?;
    std::fs::write(&summary_path, report.summary_csv())?;
    std::fs::write(&records_path, report.records_csv())?;
    Ok(Outcome {
        inputs: inputs(&[pred, gold], task),
        outputs: vec![report_path, summary_path, records_path],
        config: json!({ "task": task }),
        endpoint: None,
        exit_code: EXIT_OK,
    })
}

#[allow(clippy::too_many_arguments)]
fn annotate_cmd(
    g: &Global,
    out: &Path,
    corpus: &Path,
    exemplars: &Path,
    prior_path: Option<&Path>,
    task: &TaskArgs,
    retries: Option<u32>,
    keep_on_mismatch: bool,
) -> CmdResult {
    let mut cfg: AnnotationConfig = match &g.config {
        Some(path) => read_settings(path)?,
        None => AnnotationConfig::default(),
    };
    if let Some(r) = retries {
        cfg.retries = r;
    }
    cfg.keep_on_mismatch |= keep_on_mismatch;
    cfg.decode.seed = g.seed;
    let (task_kind, tax, rule) = rule(task)?;
    let pool = load_rationales(exemplars, task_kind, tax.as_ref())?;
    let prior = match prior_path {
        Some(p) => PatternPrior::from_file(p, &pool)?,
        None => {
            let two: Vec<_> = pool.iter().take(2).cloned().collect();
            match task_kind {
                Task::Nsm => PatternPrior::nsm(two),
                Task::Tpc => PatternPrior::tpc(two),
            }
        }
    };
    if prior.task != task_kind {
        return Err(CliError::invalid(anyhow!("prior is for {} but --task is {task_kind}", prior.task)));
    }
    let prior = match &tax {
        Some(t) if task_kind == Task::Tpc => prior.with_label_list(t),
        _ => prior,
    };
    prior.validate()?;
    let records: Vec<QaRecord> = load_corpus(corpus, task_kind, tax.as_ref())?
        .into_iter()
        .map(|r| r.qa().clone())
        .collect();
    let gw = gateway(g)?;
    let outcome = annotate(&records, &gw, &prior, &cfg, &rule)?;
    let kept_path = out.join("annotated.jsonl");
    let rejects_path = out.join("rejects.jsonl");
    save_rationales(&kept_path, &outcome.records())?;
    jsonl::write(&rejects_path, &outcome.rejects)?;
    let backend_failures = outcome.rejects.iter().filter(|r| r.backend_failure).count();
    if backend_failures > 0 {
        eprintln!("error: {backend_failures} record(s) failed on the model endpoint; see {}", rejects_path.display());
    }
    let mut used = vec![corpus, exemplars];
    used.extend(prior_path);
    Ok(Outcome {
        inputs: inputs(&used, task),
        outputs: vec![kept_path, rejects_path],
        config: json!({
            "annotation": cfg,
            "task": task,
            "exemplar_ids": prior.exemplars.iter().map(|e| e.id()).collect::<Vec<_>>(),
            "kept": outcome.kept.len(),
            "rejected": outcome.rejects.len(),
        }),
        endpoint: Some(gw.describe()),
        exit_code: if backend_failures > 0 { EXIT_BACKEND } else { EXIT_OK },
    })
}

fn corrupt_cmd(g: &Global, out: &Path, corpus: &Path, task: &TaskArgs, fraction: f64, mode: ModeArg) -> CmdResult {
    no_config(g, "corrupt")?;
    let (task_kind, tax, rule) = rule(task)?;
    let records = load_rationales(corpus, task_kind, tax.as_ref())?;
    let mode = match mode {
        ModeArg::Deterministic => CorruptionMode::Deterministic,
        ModeArg::Llm => CorruptionMode::Llm,
    };
    let mut plan = CorruptionPlan::new(fraction, mode, g.seed);
    plan.decode.seed = g.seed;
    let gw = match mode {
        CorruptionMode::Llm => Some(gateway(g)?),
        CorruptionMode::Deterministic => None,
    };
    let outcome = corrupt(&records, &plan, gw.as_ref(), &rule)?;
    let records_path = out.join("corrupted.jsonl");
    let summary_path = out.join("corruption.json");
    save_rationales(&records_path, &outcome.records)?;
    jsonl::write_json(
        &summary_path,
        &json!({
            "selected": outcome.selected,
            "corrupted": outcome.corrupted_count(),
            "rejects": outcome.rejects,
        }),
    )?;
    let backend = outcome.rejects.iter().any(|r| r.backend_failure);
    Ok(Outcome {
        inputs: inputs(&[corpus], task),
        outputs: vec![records_path, summary_path],
        config: json!({ "plan": plan, "task": task }),
        endpoint: gw.map(|g| g.describe()),
        exit_code: if backend { EXIT_BACKEND } else { EXIT_OK },
    })
}

fn hint(g: &Global, out: &Path, corpus: &Path, task: &TaskArgs, truncate: Option<f64>) -> CmdResult {
    no_config(g, "hint")?;
    if let Some(f) = truncate.filter(|f| !(0.0..=1.0).contains(f)) {
        return Err(CliError::invalid(anyhow!("--truncate must lie in [0, 1], got {f}")));
    }
    let task_kind = Task::from(task.task);
    let tax = taxonomy(task)?;
    let records = load_rationales(corpus, task_kind, tax.as_ref())?;
    let instruction = match task_kind {
        Task::Nsm => NSM_INSTRUCTION,
        Task::Tpc => TPC_INSTRUCTION,
    };
    let hints = records
        .iter()
        .map(|r| {
            let rationale = truncate.map_or(r.rationale.as_str(), |f| truncate_hint(&r.rationale, f));
            Ok(HintRecord {
                id: r.id().to_string(),
                task: task_kind,
                prompt: build_hint_prompt_with(instruction, &r.qa.question, rationale)
                    .map_err(|e| anyhow!("record {}: {e}", r.id()))?,
                answer: r.qa.answer.clone(),
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let path = out.join("hints.jsonl");
    jsonl::write(&path, &hints)?;
    Ok(Outcome {
        inputs: inputs(&[corpus], task),
        outputs: vec![path],
        config: json!({ "task": task, "truncate": truncate }),
        endpoint: None,
        exit_code: EXIT_OK,
    })
}

fn stats(g: &Global, out: &Path, corpus: &Path, task: &TaskArgs) -> CmdResult {
    no_config(g, "stats")?;
    let tax = taxonomy(task)?;
    let records = load_corpus(corpus, Task::from(task.task), tax.as_ref())?;
    let s = corpus_stats(&records);
    println!("{}", serde_json::to_string_pretty(&s)?);
    let path = out.join("stats.json");
    jsonl::write_json(&path, &s)?;
    Ok(Outcome {
        inputs: inputs(&[corpus], task),
        outputs: vec![path],
        config: json!({ "task": task }),
        endpoint: None,
        exit_code: EXIT_OK,
    })
}

fn mock_oracle(
    g: &Global,
    out: &Path,
    responses: &Path,
    task: &TaskArgs,
    o: &RftdOverrides,
    node_budget: usize,
) -> CmdResult {
    let cfg = rftd_config(g, o)?;
    let (_, _, rule) = rule(task)?;
    let spec_path = g
        .mock
        .as_deref()
        .ok_or_else(|| CliError::invalid(anyhow!("mock-oracle needs --mock <spec.json>")))?;
    let text = std::fs::read_to_string(spec_path).with_context(|| format!("cannot read {}", spec_path.display()))?;
    let model = MockModel::new(MockSpec::from_json(&text)?)?;
    let records: Vec<ResponseRecord> = jsonl::read(responses)?;
    let mut rows = Vec::with_capacity(records.len());
    for r in &records {
        let positions = exact_detection(&model, &r.prompt, &r.completion, &cfg, &rule, node_budget)
            .with_context(|| format!("response {}", r.id))?;
        rows.push(OracleRecord { id: &r.id, positions });
    }
    let path = out.join("oracle.jsonl");
    jsonl::write(&path, &rows)?;
    Ok(Outcome {
        inputs: inputs(&[responses, spec_path], task),
        outputs: vec![path],
        config: json!({ "rftd": cfg, "task": task, "node_budget": node_budget }),
        endpoint: Some(format!("mock({})", spec_path.display())),
        exit_code: EXIT_OK,
    })
}

/// JSON, or TOML by extension.
fn read_settings<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).with_context(|| format!("invalid settings in {}", path.display())).map_err(CliError::invalid)
    } else {
        serde_json::from_str(&text)
            .with_context(|| format!("invalid settings in {}", path.display()))
            .map_err(CliError::invalid)
    }
}
