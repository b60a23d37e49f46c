//! Sweep the entropy weights of the joint attack.

use tabperm::attack::AttackMode;
use tabperm::harness::ablation::{render_ablation, run_ablation, Sweep};
use tabperm::harness::experiment::{Containment, ExperimentConfig, Method, ReportFormat};
use tabperm::harness::synth::{synthetic_lookup_corpus, SynthConfig};
use tabperm::victim::{train_toy_victim, TrainConfig, VictimConfig};

fn main() {
    let grid = std::env::args().nth(1).unwrap_or_else(|| "lambda=0,0.1,1,10,20".into());
    let sweep: Sweep = grid.parse().unwrap();
    let corpus = synthetic_lookup_corpus(&SynthConfig { n_examples: 20, ..Default::default() });
    let (victim, _) =
        train_toy_victim(&corpus, VictimConfig::default(), &TrainConfig::default()).unwrap();
    let rows = run_ablation(
        &victim,
        &corpus,
        Method::atp(AttackMode::Joint),
        &sweep,
        &ExperimentConfig::default(),
        &Containment,
    )
    .unwrap();
    print!("{}", render_ablation(&rows, ReportFormat::Table));
}
