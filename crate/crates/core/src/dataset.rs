//! Corpus records, JSONL I/O, taxonomy files and SFT target assembly.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const RATIONALE_OPEN: &str = "<rationale>";
pub const RATIONALE_CLOSE: &str = "</rationale>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

/// Width of the length-histogram buckets, in whitespace tokens.
pub const LENGTH_BUCKET_WIDTH: usize = 64;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: missing field \"{field}\"")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: duplicate id \"{id}\"")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: empty id")]
    EmptyId { line: usize },
    #[error("line {line}: answer \"{label}\" is outside the label set for task {task}")]
    LabelOutsideSet {
        line: usize,
        label: String,
        task: Task,
    },
    #[error("line {line}: record task {found} does not match requested task {expected}")]
    TaskMismatch {
        line: usize,
        expected: Task,
        found: Task,
    },
    #[error("line {line}: provenance given without a rationale")]
    ProvenanceWithoutRationale { line: usize },
    #[error("line {line}: empty rationale")]
    EmptyRationale { line: usize },
    #[error("taxonomy: duplicate label \"{0}\"")]
    DuplicateLabel(String),
    #[error("empty rationale")]
    EmptyTargetRationale,
    #[error("empty answer")]
    EmptyTargetAnswer,
    #[error("rationale body contains a reserved tag ({0})")]
    ReservedTagInRationale(&'static str),
    #[error("answer contains a reserved tag ({0})")]
    ReservedTagInAnswer(&'static str),
    #[error("target text has no {0} span")]
    MissingSpan(&'static str),
    #[error("target text has its <answer> span before the <rationale> span")]
    MisorderedSpans,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Nsm,
    Tpc,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Nsm => "nsm",
            Task::Tpc => "tpc",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "nsm" => Ok(Task::Nsm),
            "tpc" => Ok(Task::Tpc),
            other => Err(format!("unknown task \"{other}\" (expected nsm or tpc)")),
        }
    }
}

/// Where a rationale came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Human,
    Paro,
    Distill,
    Corrupted,
}

/// A question with its gold label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub id: String,
    pub task: Task,
    /// Full prompt body, contexts included. Treated as opaque text.
    pub question: String,
    pub answer: String,
}

/// A question, its gold label and a reasoning trace leading to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RationaleRecord {
    #[serde(flatten)]
    pub qa: QaRecord,
    pub rationale: String,
    pub provenance: Provenance,
}

impl RationaleRecord {
    pub fn new(qa: QaRecord, rationale: impl Into<String>, provenance: Provenance) -> Self {
        Self {
            qa,
            rationale: rationale.into(),
            provenance,
        }
    }

    pub fn id(&self) -> &str {
        &self.qa.id
    }

    /// The supervised target for this record.
    pub fn target(&self) -> Result<String, DatasetError> {
        assemble_target(&self.rationale, &self.qa.answer)
    }
}

/// One line of a corpus file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Record {
    Qa(QaRecord),
    Rationale(RationaleRecord),
}

impl Record {
    pub fn qa(&self) -> &QaRecord {
        match self {
            Record::Qa(qa) => qa,
            Record::Rationale(r) => &r.qa,
        }
    }

    pub fn id(&self) -> &str {
        &self.qa().id
    }

    pub fn rationale(&self) -> Option<&RationaleRecord> {
        match self {
            Record::Qa(_) => None,
            Record::Rationale(r) => Some(r),
        }
    }

    pub fn into_rationale(self) -> Option<RationaleRecord> {
        match self {
            Record::Qa(_) => None,
            Record::Rationale(r) => Some(r),
        }
    }
}

impl From<QaRecord> for Record {
    fn from(qa: QaRecord) -> Self {
        Record::Qa(qa)
    }
}

impl From<RationaleRecord> for Record {
    fn from(r: RationaleRecord) -> Self {
        Record::Rationale(r)
    }
}

// Wire shape of one JSONL line. Every field optional so missing ones can be
// reported by name rather than by serde's positional message.
#[derive(Debug, Default, Serialize, Deserialize)]
struct RawRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    task: Option<Task>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    question: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rationale: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

impl From<&Record> for RawRecord {
    fn from(record: &Record) -> Self {
        let qa = record.qa();
        let mut raw = RawRecord {
            id: Some(qa.id.clone()),
            task: Some(qa.task),
            question: Some(qa.question.clone()),
            answer: Some(qa.answer.clone()),
            ..RawRecord::default()
        };
        if let Record::Rationale(r) = record {
            raw.rationale = Some(r.rationale.clone());
            raw.provenance = Some(r.provenance);
        }
        raw
    }
}

/// Closed label set for the classification task.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    groups: Option<BTreeMap<String, LabelGroup>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelGroup {
    Corporate,
    Personal,
}

impl Taxonomy {
    pub fn new<I, S>(labels: I) -> Result<Self, DatasetError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for label in labels {
            let label = label.into();
            if !seen.insert(label.clone()) {
                return Err(DatasetError::DuplicateLabel(label));
            }
            out.push(label);
        }
        Ok(Self {
            labels: out,
            groups: None,
        })
    }

    /// Parses the plain-text format: one label per line, `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self, DatasetError> {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn with_groups(mut self, groups: BTreeMap<String, LabelGroup>) -> Self {
        self.groups = Some(groups);
        self
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn groups(&self) -> Option<&BTreeMap<String, LabelGroup>> {
        self.groups.as_ref()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }
}

/// Loads and validates a JSONL corpus. Record order is preserved.
///
/// Lines carrying a `rationale` become [`Record::Rationale`]; a missing
/// `provenance` on such a line is read as `human`. TPC answers are checked
/// against `taxonomy` when one is supplied.
pub fn load_corpus(
    path: &Path,
    task: Task,
    taxonomy: Option<&Taxonomy>,
) -> Result<Vec<Record>, DatasetError> {
    let file = fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_line(&line, line_no, task, taxonomy)?;
        if !seen.insert(record.id().to_string()) {
            return Err(DatasetError::DuplicateId {
                line: line_no,
                id: record.id().to_string(),
            });
        }
        records.push(record);
    }
    Ok(records)
}

/// Loads a corpus in which every line must carry a rationale.
pub fn load_rationales(
    path: &Path,
    task: Task,
    taxonomy: Option<&Taxonomy>,
) -> Result<Vec<RationaleRecord>, DatasetError> {
    load_corpus(path, task, taxonomy)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| match r {
            Record::Rationale(r) => Ok(r),
            Record::Qa(_) => Err(DatasetError::MissingField {
                line: i + 1,
                field: "rationale",
            }),
        })
        .collect()
}

fn parse_line(
    line: &str,
    line_no: usize,
    task: Task,
    taxonomy: Option<&Taxonomy>,
) -> Result<Record, DatasetError> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| DatasetError::Malformed {
        line: line_no,
        message: e.to_string(),
    })?;
    let missing = |field| DatasetError::MissingField {
        line: line_no,
        field,
    };
    let id = raw.id.ok_or(missing("id"))?;
    let found = raw.task.ok_or(missing("task"))?;
    let question = raw.question.ok_or(missing("question"))?;
    let answer = raw.answer.ok_or(missing("answer"))?;
    if id.is_empty() {
        return Err(DatasetError::EmptyId { line: line_no });
    }
    if found != task {
        return Err(DatasetError::TaskMismatch {
            line: line_no,
            expected: task,
            found,
        });
    }
    check_label(&answer, task, taxonomy).map_err(|label| DatasetError::LabelOutsideSet {
        line: line_no,
        label,
        task,
    })?;
    let qa = QaRecord {
        id,
        task,
        question,
        answer,
    };
    match (raw.rationale, raw.provenance) {
        (None, None) => Ok(Record::Qa(qa)),
        (None, Some(_)) => Err(DatasetError::ProvenanceWithoutRationale { line: line_no }),
        (Some(r), _) if r.trim().is_empty() => Err(DatasetError::EmptyRationale { line: line_no }),
        (Some(rationale), provenance) => Ok(Record::Rationale(RationaleRecord {
            qa,
            rationale,
            provenance: provenance.unwrap_or(Provenance::Human),
        })),
    }
}

fn check_label(answer: &str, task: Task, taxonomy: Option<&Taxonomy>) -> Result<(), String> {
    let ok = match task {
        Task::Nsm => answer == "yes" || answer == "no",
        Task::Tpc => taxonomy.is_none_or(|t| t.contains(answer)),
    };
    if ok {
        Ok(())
    } else {
        Err(answer.to_string())
    }
}

/// Writes records as JSONL, one object per line.
pub fn save_corpus<'a, I>(path: &Path, records: I) -> Result<(), DatasetError>
where
    I: IntoIterator<Item = &'a Record>,
{
    let io_err = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::create(path).map_err(io_err)?;
    let mut out = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(&RawRecord::from(record))
            .expect("record serialization is infallible");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Convenience wrapper for writing rationale-only corpora.
pub fn save_rationales(path: &Path, records: &[RationaleRecord]) -> Result<(), DatasetError> {
    let wrapped: Vec<Record> = records.iter().cloned().map(Record::Rationale).collect();
    save_corpus(path, &wrapped)
}

/// Builds the supervised target `<rationale>r</rationale>\n<answer>a</answer>`.
pub fn assemble_target(rationale: &str, answer: &str) -> Result<String, DatasetError> {
    if rationale.is_empty() {
        return Err(DatasetError::EmptyTargetRationale);
    }
    if answer.is_empty() {
        return Err(DatasetError::EmptyTargetAnswer);
    }
    for tag in [RATIONALE_CLOSE, ANSWER_OPEN, ANSWER_CLOSE] {
        if rationale.contains(tag) {
            return Err(DatasetError::ReservedTagInRationale(tag));
        }
    }
    if answer.contains(ANSWER_CLOSE) {
        return Err(DatasetError::ReservedTagInAnswer(ANSWER_CLOSE));
    }
    Ok(format!(
        "{RATIONALE_OPEN}{rationale}{RATIONALE_CLOSE}\n{ANSWER_OPEN}{answer}{ANSWER_CLOSE}"
    ))
}

/// Splits a target back into `(rationale, answer)`.
///
/// Matching is first-open, first-close: the rationale runs from the first
/// `<rationale>` to the first `</rationale>` after it, so a stray
/// `<rationale>` inside the body is kept verbatim. The answer span is the
/// first `<answer>...</answer>` after the rationale.
pub fn parse_target(text: &str) -> Result<(String, String), DatasetError> {
    let r_open = text.find(RATIONALE_OPEN);
    let a_open_anywhere = text.find(ANSWER_OPEN);
    let Some(r_open) = r_open else {
        return Err(DatasetError::MissingSpan("<rationale>"));
    };
    if a_open_anywhere.is_some_and(|a| a < r_open) {
        return Err(DatasetError::MisorderedSpans);
    }
    let body_start = r_open + RATIONALE_OPEN.len();
    let r_close = text[body_start..]
        .find(RATIONALE_CLOSE)
        .map(|i| body_start + i)
        .ok_or(DatasetError::MissingSpan("</rationale>"))?;
    let rest_start = r_close + RATIONALE_CLOSE.len();
    let a_open = text[rest_start..]
        .find(ANSWER_OPEN)
        .map(|i| rest_start + i)
        .ok_or(DatasetError::MissingSpan("<answer>"))?;
    let ans_start = a_open + ANSWER_OPEN.len();
    let a_close = text[ans_start..]
        .find(ANSWER_CLOSE)
        .map(|i| ans_start + i)
        .ok_or(DatasetError::MissingSpan("</answer>"))?;
    Ok((
        text[body_start..r_close].to_string(),
        text[ans_start..a_close].to_string(),
    ))
}

/// Length distribution of a corpus, in whitespace tokens.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub records: usize,
    /// Records that carry a rationale; mass of `rationale_lengths`.
    pub rationale_records: usize,
    /// Bucket lower bound -> count, buckets `[lo, lo + 64)`.
    pub question_lengths: BTreeMap<usize, usize>,
    pub rationale_lengths: BTreeMap<usize, usize>,
}

pub fn whitespace_len(text: &str) -> usize {
    text.split_whitespace().count()
}

fn bucket(len: usize) -> usize {
    len / LENGTH_BUCKET_WIDTH * LENGTH_BUCKET_WIDTH
}

pub fn corpus_stats(records: &[Record]) -> CorpusStats {
    let mut stats = CorpusStats {
        records: records.len(),
        ..CorpusStats::default()
    };
    for record in records {
        *stats
            .question_lengths
            .entry(bucket(whitespace_len(&record.qa().question)))
            .or_default() += 1;
        if let Some(r) = record.rationale() {
            stats.rationale_records += 1;
            *stats
                .rationale_lengths
                .entry(bucket(whitespace_len(&r.rationale)))
                .or_default() += 1;
        }
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    fn qa(id: &str, q: &str, a: &str) -> QaRecord {
        QaRecord {
            id: id.into(),
            task: Task::Nsm,
            question: q.into(),
            answer: a.into(),
        }
    }

    #[test]
    fn loads_two_valid_lines_in_order() {
        let f = write_lines(&[
            r#"{"id":"b","task":"nsm","question":"q1","answer":"yes"}"#,
            r#"{"id":"a","task":"nsm","question":"q2","answer":"no","rationale":"r"}"#,
        ]);
        let recs = load_corpus(f.path(), Task::Nsm, None).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].id(), "b");
        assert_eq!(recs[1].id(), "a");
        assert_eq!(
            recs[1].rationale().unwrap().provenance,
            Provenance::Human,
            "missing provenance reads as human"
        );
    }

    #[test]
    fn missing_answer_names_line_and_field() {
        let f = write_lines(&[r#"{"id":"x","task":"nsm","question":"q"}"#]);
        let err = load_corpus(f.path(), Task::Nsm, None).unwrap_err();
        assert!(matches!(
            err,
            DatasetError::MissingField {
                line: 1,
                field: "answer"
            }
        ));
        assert_eq!(err.to_string(), "line 1: missing field \"answer\"");
    }

    #[test]
    fn tpc_label_outside_taxonomy() {
        let tax = Taxonomy::parse("# labels\nCorporate--Tax Payment\nPersonal--Peer-to-Peer Transfer\n")
            .unwrap();
        let f = write_lines(&[r#"{"id":"t1","task":"tpc","question":"q","answer":"Corporate--Bribes"}"#]);
        let err = load_corpus(f.path(), Task::Tpc, Some(&tax)).unwrap_err();
        assert!(err.to_string().contains("Corporate--Bribes"), "{err}");
    }

    #[test]
    fn nsm_answer_must_be_yes_or_no() {
        let f = write_lines(&[r#"{"id":"x","task":"nsm","question":"q","answer":"maybe"}"#]);
        assert!(matches!(
            load_corpus(f.path(), Task::Nsm, None),
            Err(DatasetError::LabelOutsideSet { line: 1, .. })
        ));
    }

    #[test]
    fn duplicate_id_is_an_error() {
        let f = write_lines(&[
            r#"{"id":"x","task":"nsm","question":"q","answer":"yes"}"#,
            r#"{"id":"x","task":"nsm","question":"q","answer":"no"}"#,
        ]);
        assert!(matches!(
            load_corpus(f.path(), Task::Nsm, None),
            Err(DatasetError::DuplicateId { line: 2, .. })
        ));
    }

    #[test]
    fn malformed_json_reports_line() {
        let f = write_lines(&[
            r#"{"id":"x","task":"nsm","question":"q","answer":"yes"}"#,
            "{not json",
        ]);
        assert!(matches!(
            load_corpus(f.path(), Task::Nsm, None),
            Err(DatasetError::Malformed { line: 2, .. })
        ));
    }

    #[test]
    fn task_mismatch_and_provenance_without_rationale() {
        let f = write_lines(&[r#"{"id":"x","task":"tpc","question":"q","answer":"L"}"#]);
        assert!(matches!(
            load_corpus(f.path(), Task::Nsm, None),
            Err(DatasetError::TaskMismatch { .. })
        ));
        let f = write_lines(&[
            r#"{"id":"x","task":"nsm","question":"q","answer":"yes","provenance":"paro"}"#,
        ]);
        assert!(matches!(
            load_corpus(f.path(), Task::Nsm, None),
            Err(DatasetError::ProvenanceWithoutRationale { line: 1 })
        ));
    }

    #[test]
    fn taxonomy_rejects_duplicates() {
        assert!(matches!(
            Taxonomy::parse("a\nb\na\n"),
            Err(DatasetError::DuplicateLabel(l)) if l == "a"
        ));
        let t = Taxonomy::parse("a\n\n# c\nb\n").unwrap();
        assert_eq!(t.labels(), ["a", "b"]);
    }

    #[test]
    fn assemble_target_format() {
        assert_eq!(
            assemble_target("step A", "yes").unwrap(),
            "<rationale>step A</rationale>\n<answer>yes</answer>"
        );
        assert!(matches!(
            assemble_target("", "yes"),
            Err(DatasetError::EmptyTargetRationale)
        ));
        assert!(matches!(
            assemble_target("a", ""),
            Err(DatasetError::EmptyTargetAnswer)
        ));
        assert!(matches!(
            assemble_target("sneaky </rationale>", "yes"),
            Err(DatasetError::ReservedTagInRationale(_))
        ));
    }

    #[test]
    fn parse_target_errors() {
        assert!(matches!(
            parse_target("<answer>yes</answer>"),
            Err(DatasetError::MissingSpan("<rationale>"))
        ));
        assert!(matches!(
            parse_target("<answer>yes</answer><rationale>r</rationale>"),
            Err(DatasetError::MisorderedSpans)
        ));
        assert!(matches!(
            parse_target("<rationale>r</rationale>"),
            Err(DatasetError::MissingSpan("<answer>"))
        ));
        assert!(matches!(
            parse_target("<rationale>r"),
            Err(DatasetError::MissingSpan("</rationale>"))
        ));
    }

    #[test]
    fn parse_target_first_close_with_stray_open() {
        let text = "<rationale>a <rationale> b</rationale>\n<answer>no</answer>";
        let (r, a) = parse_target(text).unwrap();
        assert_eq!(r, "a <rationale> b");
        assert_eq!(a, "no");
    }

    #[test]
    fn stats_buckets() {
        assert_eq!(corpus_stats(&[]), CorpusStats::default());

        let one = [Record::Qa(qa("a", &"w ".repeat(10), "yes"))];
        let s = corpus_stats(&one);
        assert_eq!(s.question_lengths, BTreeMap::from([(0, 1)]));

        let three: Vec<Record> = [10, 70, 70]
            .iter()
            .enumerate()
            .map(|(i, n)| Record::Qa(qa(&i.to_string(), &"w ".repeat(*n), "no")))
            .collect();
        let s = corpus_stats(&three);
        assert_eq!(s.question_lengths, BTreeMap::from([(0, 1), (64, 2)]));
        assert_eq!(s.records, 3);
        assert!(s.rationale_lengths.is_empty());
    }

    fn arb_text() -> impl Strategy<Value = String> {
        "[a-z <>/\n]{1,40}"
    }

    fn arb_record() -> impl Strategy<Value = Record> {
        (
            "[a-z0-9]{1,8}",
            arb_text(),
            prop::bool::ANY,
            prop::option::of((arb_text(), 0..4u8)),
        )
            .prop_map(|(id, q, yes, rat)| {
                let qa = QaRecord {
                    id,
                    task: Task::Nsm,
                    question: q,
                    answer: if yes { "yes" } else { "no" }.into(),
                };
                match rat {
                    None => Record::Qa(qa),
                    Some((r, p)) => {
                        let provenance = [
                            Provenance::Human,
                            Provenance::Paro,
                            Provenance::Distill,
                            Provenance::Corrupted,
                        ][p as usize];
                        Record::Rationale(RationaleRecord::new(qa, format!("x{r}"), provenance))
                    }
                }
            })
    }

    proptest! {
        #[test]
        fn save_then_load_is_identity(records in prop::collection::vec(arb_record(), 0..12)) {
            let mut seen = HashSet::new();
            let records: Vec<Record> = records
                .into_iter()
                .filter(|r| seen.insert(r.id().to_string()))
                .collect();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.jsonl");
            save_corpus(&path, &records).unwrap();
            let back = load_corpus(&path, Task::Nsm, None).unwrap();
            prop_assert_eq!(back, records);
        }

        #[test]
        fn target_round_trip(r in "[^<]{1,60}", a in "[a-zA-Z -]{1,20}") {
            let t = assemble_target(&r, &a).unwrap();
            prop_assert_eq!(parse_target(&t).unwrap(), (r, a));
        }

        #[test]
        fn histogram_mass_equals_record_count(records in prop::collection::vec(arb_record(), 0..30)) {
            let s = corpus_stats(&records);
            prop_assert_eq!(s.question_lengths.values().sum::<usize>(), records.len());
            prop_assert_eq!(s.rationale_lengths.values().sum::<usize>(), s.rationale_records);
        }
    }
}
