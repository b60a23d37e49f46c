//! Run several methods over a corpus with a results file, then print the
//! report in every format.

use tabperm::attack::AttackMode;
use tabperm::harness::experiment::{
    load_results, render_report, run_experiment, Containment, ExperimentConfig, Method,
    ReportFormat, ResultSink,
};
use tabperm::harness::synth::{synthetic_lookup_corpus, SynthConfig};
use tabperm::victim::{train_toy_victim, TrainConfig, VictimConfig};

fn main() {
    let corpus = synthetic_lookup_corpus(&SynthConfig { n_examples: 20, ..Default::default() });
    let (victim, _) =
        train_toy_victim(&corpus, VictimConfig::default(), &TrainConfig::default()).unwrap();
    let methods = [
        Method::Vanilla,
        Method::Random,
        Method::BestOfK(20),
        Method::Evolutionary,
        Method::atp(AttackMode::Joint),
    ];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("results.jsonl");
    let cfg = ExperimentConfig::default();
    let sink = ResultSink::file(&path, false).unwrap();
    let report = run_experiment(&victim, &corpus, &methods, &cfg, &Containment, sink).unwrap();

    print!("{}", render_report(&report, ReportFormat::Table));
    println!();
    print!("{}", render_report(&report, ReportFormat::Csv));

    let (records, _) = load_results(&path).unwrap();
    println!("\n{} records in {}", records.len(), path.display());
}
