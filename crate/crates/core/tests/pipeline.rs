//! Generate, detect and report against an in-memory mock model.

use forkscope_core::gateway::{Gateway, MockSpec};
use forkscope_core::report::{aggregate_frequencies, emit_report, ReportFormat};
use forkscope_core::reward::ExtractionRule;
use forkscope_core::rftd::{detect_forking, RftdConfig};

const SPEC: &str = r#"{
  "vocab": ["A", " B", " C", " yes", " no"],
  "window": 1,
  "table": {
    "": {"A": 1.0},
    "A": {" B": 0.6, " C": 0.4},
    " B": {" yes": 1.0},
    " C": {" no": 1.0}
  },
  "terminals": [" yes", " no"]
}"#;

fn gateway() -> Gateway {
    Gateway::mock(MockSpec::from_json(SPEC).unwrap()).unwrap()
}

#[test]
fn detection_feeds_the_frequency_report() {
    let gw = gateway();
    let cfg = RftdConfig::default();
    let rule = ExtractionRule::Nsm;
    let mut results = Vec::new();
    for seed in 0..4 {
        let mut cfg = cfg.clone();
        cfg.rollout.seed = seed;
        let original = gw.generate("Q:", &cfg.original).unwrap();
        assert_eq!(original.text, "A B yes");
        let result = detect_forking(&gw, "Q:", &original, &cfg, &rule).unwrap();
        assert_eq!(result.original_answer, "yes");
        assert_eq!(result.forking.len(), 1);
        assert_eq!(result.forking[0].token, " B");
        assert_eq!(result.forking[0].max_rho, 1.0);
        results.push(result);
    }

    let table = aggregate_frequencies(&results).unwrap();
    assert_eq!(table.total, 4);
    assert_eq!(table.count(" B"), 4);
    assert_eq!(table.config_hash.as_deref(), Some(cfg.hash().as_str()));

    let dir = tempfile::tempdir().unwrap();
    let written = emit_report(&table, &[ReportFormat::Svg, ReportFormat::Csv, ReportFormat::Csv], 5, dir.path()).unwrap();
    assert_eq!(written.len(), 2);
    let csv = std::fs::read_to_string(dir.path().join("frequencies.csv")).unwrap();
    assert_eq!(csv, "token,count\n B,4\n");
    let svg = std::fs::read_to_string(dir.path().join("frequencies.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains(">4<"));
}

#[test]
fn reseeded_runs_are_reproducible() {
    let gw = gateway();
    let rule = ExtractionRule::Nsm;
    let mut cfg = RftdConfig::default();
    cfg.rollout.seed = 99;
    let original = gw.generate("Q:", &cfg.original).unwrap();
    let a = detect_forking(&gw, "Q:", &original, &cfg, &rule).unwrap();
    let b = detect_forking(&gw, "Q:", &original, &cfg, &rule).unwrap();
    assert_eq!(a, b);
}
