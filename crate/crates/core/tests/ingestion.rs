use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;

use serde::Deserialize;
use t2i_core::catalog::textgen::OfflineClient;
use t2i_core::catalog::{ingest, read_records, split_dataset, IngestSummary, QualityThresholds};
use t2i_core::schema::SamplerSet;

#[derive(Deserialize)]
struct Expected {
    retained: Vec<String>,
    summary: IngestSummary,
    pairs_per_model: BTreeMap<String, usize>,
}

fn fixture(name: &str) -> String {
    format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn fixture_matches_hand_enumeration() {
    let records = read_records(BufReader::new(File::open(fixture("ingest_records.jsonl")).unwrap())).unwrap();
    let expected: Expected = serde_json::from_reader(File::open(fixture("ingest_expected.json")).unwrap()).unwrap();
    assert_eq!(records.len(), 20);

    let out = ingest(&records, &QualityThresholds::default(), &SamplerSet::default(), &OfflineClient).unwrap();
    let kept: Vec<_> = out.records.iter().map(|r| r.name.clone()).collect();
    assert_eq!(kept, expected.retained);
    assert_eq!(out.summary, expected.summary);

    let mut per_model = BTreeMap::new();
    for p in &out.pairs {
        *per_model.entry(p.api.info.model.clone()).or_insert(0) += 1;
    }
    assert_eq!(per_model, expected.pairs_per_model);
    assert!(out.pairs.iter().all(|p| !p.instruction.prompt.contains("<lora")));
}

#[test]
fn fixture_splits_partition_pairs() {
    let records = read_records(BufReader::new(File::open(fixture("ingest_records.jsonl")).unwrap())).unwrap();
    let out = ingest(&records, &QualityThresholds::default(), &SamplerSet::default(), &OfflineClient).unwrap();
    let s = split_dataset(&out.pairs, 5).unwrap();
    assert_eq!((s.train.len(), s.align.len(), s.eval.len()), (19, 2, 2));
    let mut all: Vec<_> = s.train.iter().chain(&s.align).chain(&s.eval).map(|p| format!("{p:?}")).collect();
    let mut orig: Vec<_> = out.pairs.iter().map(|p| format!("{p:?}")).collect();
    all.sort();
    orig.sort();
    assert_eq!(all, orig);
}

#[test]
fn malformed_line_reports_its_number() {
    let text = "\n{\"id\": 1}\n";
    let err = read_records(text.as_bytes()).unwrap_err();
    assert!(err.to_string().starts_with("line 2:"), "{err}");
}
