//! Write a synthetic corpus to JSONL, load it back and filter out questions
//! that depend on row order.

use tabperm::harness::dataset::{load_dataset, order_insensitive, parse_dataset, write_dataset};
use tabperm::harness::synth::{synthetic_lookup_corpus, SynthConfig};
use tabperm::table::DEFAULT_ORDER_KEYWORDS;

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    let corpus = synthetic_lookup_corpus(&SynthConfig { n_examples: 5, ..Default::default() });
    write_dataset(&path, &corpus).unwrap();
    let loaded = load_dataset(&path, DEFAULT_ORDER_KEYWORDS).unwrap();
    println!("{} examples round-tripped through {}", loaded.examples.len(), path.display());

    let text = r#"{"id":"a","table":[["team","wins"],["ox","3"]],"question":"Which team is first?","answer":"ox"}
{"id":"b","table":[["team","wins"],["ox","3"]],"question":"How many wins does ox have?","answer":"3"}
not json
{"id":"b","table":[["team"],["ox"]],"question":"Again?","answer":"ox"}"#;
    let parsed = parse_dataset(text, DEFAULT_ORDER_KEYWORDS);
    for d in &parsed.diagnostics {
        println!("line {}: {}", d.line, d.message);
    }
    for ex in order_insensitive(&parsed.examples) {
        println!("kept {}: {}", ex.id(), ex.question);
    }
}
