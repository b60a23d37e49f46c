//! Train the toy victim on a synthetic lookup corpus, save it and load it back.
//!
//! cargo run --release --example train_victim -- [out.json]

use tabperm::harness::synth::{synthetic_lookup_corpus, SynthConfig};
use tabperm::victim::{mean_loss, train_toy_victim, ToyVictim, TrainConfig, VictimConfig};

fn main() {
    let out = std::env::args().nth(1).unwrap_or_else(|| "victim.json".into());
    let corpus = synthetic_lookup_corpus(&SynthConfig::default());
    let (victim, report) =
        train_toy_victim(&corpus, VictimConfig::default(), &TrainConfig::default()).unwrap();
    println!(
        "{} epochs, loss {:.4}, converged: {}",
        report.epochs_run, report.final_loss, report.converged
    );

    for ex in corpus.iter().take(3) {
        let answer = victim.generate(&victim.encode_example(ex), 8).unwrap();
        println!("{:<40} -> {answer} (gold {})", ex.question, ex.answer);
    }

    victim.save(&out).unwrap();
    let loaded = ToyVictim::load(&out).unwrap();
    println!("reloaded {out}: mean loss {:.4}", mean_loss(&loaded, &corpus).unwrap());
}
