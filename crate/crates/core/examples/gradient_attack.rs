//! Run the gradient attack in every mode against one trained example and
//! show the loss trajectory and the layout it finds.

use tabperm::attack::{run_atp, AtpConfig, AttackMode, Objective};
use tabperm::harness::synth::{synthetic_lookup_corpus, SynthConfig};
use tabperm::table::apply_permutation;
use tabperm::victim::{train_toy_victim, TrainConfig, VictimConfig};

fn main() {
    let corpus = synthetic_lookup_corpus(&SynthConfig::default());
    let (victim, _) =
        train_toy_victim(&corpus, VictimConfig::default(), &TrainConfig::default()).unwrap();
    let ex = &corpus[0];
    println!("{}\n{} -> {}\n", ex.table.linearize(), ex.question, ex.answer);

    for objective in [Objective::Ce, Objective::Kl] {
        for mode in [AttackMode::Row, AttackMode::Col, AttackMode::Joint] {
            let cfg = AtpConfig { mode, objective, ..Default::default() };
            let res = run_atp(&victim, ex, &cfg).unwrap();
            let first = res.loss_trajectory.first().copied().unwrap_or(f64::NAN);
            let last = res.loss_trajectory.last().copied().unwrap_or(f64::NAN);
            println!(
                "{objective:?}/{mode:?}: objective {first:.3} -> {last:.3}, loss {:.3} -> {:.3}, answer {:?}",
                res.clean_loss, res.attacked_loss, res.attacked_generation
            );
        }
    }

    let res = run_atp(&victim, ex, &AtpConfig::default()).unwrap();
    let table = apply_permutation(&ex.table, &res.row_perm, &res.col_perm).unwrap();
    println!("\njoint layout:\n{}", table.linearize());
}
