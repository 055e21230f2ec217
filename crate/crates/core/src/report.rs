//! Forking-token frequency tables and their csv/json/svg renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rftd::DetectionResult;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("detection results come from different configurations ({0} and {1})")]
    MixedConfigs(String, String),
    #[error("top_n must be at least 1")]
    ZeroTopN,
    #[error("cannot write {path}: {message}")]
    Write { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCount {
    pub token: String,
    pub count: usize,
}

/// How often each original token sat at a forking position.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyTable {
    /// Sorted by count descending, then token ascending.
    pub entries: Vec<TokenCount>,
    pub total: usize,
    pub config_hash: Option<String>,
    pub endpoint: Option<String>,
    pub corpus_id: Option<String>,
}

impl FrequencyTable {
    pub fn count(&self, token: &str) -> usize {
        self.entries.iter().find(|e| e.token == token).map_or(0, |e| e.count)
    }

    pub fn top(&self, n: usize) -> &[TokenCount] {
        &self.entries[..n.min(self.entries.len())]
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["token", "count"]).expect("in-memory write");
        for e in &self.entries {
            w.write_record([e.token.as_str(), &e.count.to_string()]).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv of utf-8 input")
    }

    /// Horizontal bar chart of the `top_n` most frequent tokens.
    pub fn to_svg(&self, top_n: usize) -> String {
        const LABEL_W: f64 = 180.0;
        const BAR_W: f64 = 400.0;
        const ROW_H: f64 = 24.0;
        const TOP: f64 = 36.0;
        let rows = self.top(top_n);
        let max = rows.iter().map(|e| e.count).max().unwrap_or(1).max(1) as f64;
        let width = LABEL_W + BAR_W + 60.0;
        let height = TOP + ROW_H * rows.len() as f64 + 12.0;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(
            s,
            r#"<text x="8" y="20" font-size="14">Top forking tokens (total {})</text>"#,
            self.total
        );
        for (i, e) in rows.iter().enumerate() {
            let y = TOP + ROW_H * i as f64;
            let w = BAR_W * e.count as f64 / max;
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end" xml:space="preserve">{}</text>"#,
                LABEL_W - 8.0,
                y + 15.0,
                xml_escape(&e.token)
            );
            let _ = writeln!(
                s,
                r##"<rect x="{LABEL_W:.1}" y="{y:.1}" width="{w:.2}" height="18.0" fill="#4878a8"/>"##
            );
            let _ = writeln!(s, r#"<text x="{:.2}" y="{:.1}">{}</text>"#, LABEL_W + w + 6.0, y + 15.0, e.count);
        }
        s.push_str("</svg>\n");
        s
    }
}

fn xml_escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            _ => out.push(c),
        }
    }
    out
}

/// Counts the original token at every forking position across `results`.
/// Tokens are merged only on exact string equality.
pub fn aggregate_frequencies(results: &[DetectionResult]) -> Result<FrequencyTable, ReportError> {
    let mut hash: Option<&str> = None;
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in results {
        match hash {
            Some(h) if h != r.config_hash => {
                return Err(ReportError::MixedConfigs(h.to_string(), r.config_hash.clone()));
            }
            _ => hash = Some(&r.config_hash),
        }
        for f in &r.forking {
            *counts.entry(&f.token).or_default() += 1;
        }
    }
    let mut entries: Vec<TokenCount> = counts
        .into_iter()
        .map(|(token, count)| TokenCount {
            token: token.to_string(),
            count,
        })
        .collect();
    entries.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.token.cmp(&b.token)));
    Ok(FrequencyTable {
        total: entries.iter().map(|e| e.count).sum(),
        entries,
        config_hash: hash.map(str::to_string),
        endpoint: None,
        corpus_id: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
    Svg,
}

impl ReportFormat {
    pub fn file_name(self) -> &'static str {
        match self {
            Self::Csv => "frequencies.csv",
            Self::Json => "frequencies.json",
            Self::Svg => "frequencies.svg",
        }
    }
}

/// Writes the requested renderings into `out_dir`. CSV and JSON hold the
/// full table; the chart shows the `top_n` most frequent tokens.
pub fn emit_report(
    table: &FrequencyTable,
    formats: &[ReportFormat],
    top_n: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, ReportError> {
    if top_n == 0 {
        return Err(ReportError::ZeroTopN);
    }
    let fail = |path: &Path, e: std::io::Error| ReportError::Write {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    std::fs::create_dir_all(out_dir).map_err(|e| fail(out_dir, e))?;
    let mut formats = formats.to_vec();
    formats.sort();
    formats.dedup();
    let mut written = Vec::new();
    for f in formats {
        let body = match f {
            ReportFormat::Csv => table.to_csv(),
            ReportFormat::Json => serde_json::to_string_pretty(table).expect("table serializes") + "\n",
            ReportFormat::Svg => table.to_svg(top_n),
        };
        let path = out_dir.join(f.file_name());
        std::fs::write(&path, body).map_err(|e| fail(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rftd::{EntropyMode, ForkingToken};

    fn result(hash: &str, tokens: &[&str]) -> DetectionResult {
        DetectionResult {
            response_id: None,
            config_hash: hash.into(),
            alpha: 0.5,
            entropy_mode: EntropyMode::Renormalized,
            response_len: 10,
            original_answer: "yes".into(),
            positions: Vec::new(),
            forking: tokens
                .iter()
                .enumerate()
                .map(|(i, t)| ForkingToken {
                    position: i + 1,
                    token: t.to_string(),
                    max_rho: 1.0,
                })
                .collect(),
        }
    }

    #[test]
    fn counting_and_ordering() {
        let t = aggregate_frequencies(&[result("h", &["different", "but"]), result("h", &["different"])]).unwrap();
        assert_eq!(t.total, 3);
        assert_eq!(t.to_csv(), "token,count\ndifferent,2\nbut,1\n");
        assert_eq!(t.config_hash.as_deref(), Some("h"));
        let empty = aggregate_frequencies(&[]).unwrap();
        assert_eq!((empty.total, empty.entries.len()), (0, 0));
    }

    #[test]
    fn disjoint_union_and_verbatim_tokens() {
        let t = aggregate_frequencies(&[result("h", &["company"]), result("h", &["company's", "b"])]).unwrap();
        assert_eq!(t.count("company"), 1);
        assert_eq!(t.count("company's"), 1);
        assert_eq!(t.entries.iter().map(|e| e.token.as_str()).collect::<Vec<_>>(), ["b", "company", "company's"]);
    }

    #[test]
    fn mixed_hashes_rejected() {
        assert!(matches!(
            aggregate_frequencies(&[result("a", &[]), result("b", &[])]),
            Err(ReportError::MixedConfigs(..))
        ));
    }

    #[test]
    fn svg_is_deterministic_and_escaped() {
        let t = aggregate_frequencies(&[result("h", &["different", "different", "<&>"])]).unwrap();
        assert_eq!(t.to_svg(10), t.to_svg(10));
        assert!(t.to_svg(10).contains("&lt;&amp;&gt;"));
        let one = t.to_svg(1);
        assert_eq!(one.matches("<rect").count(), 1);
        assert!(one.contains(">different<"));
    }

    #[test]
    fn emit_writes_requested_files() {
        let dir = tempfile::tempdir().unwrap();
        let t = aggregate_frequencies(&[result("h", &["different", "different", "but"])]).unwrap();
        let files = emit_report(&t, &[ReportFormat::Svg, ReportFormat::Csv, ReportFormat::Json], 10, dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        assert_eq!(std::fs::read_to_string(dir.path().join("frequencies.csv")).unwrap(), "token,count\ndifferent,2\nbut,1\n");
        let back: FrequencyTable =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("frequencies.json")).unwrap()).unwrap();
        assert_eq!(back, t);
        assert!(matches!(emit_report(&t, &[ReportFormat::Csv], 0, dir.path()), Err(ReportError::ZeroTopN)));
    }
}
