//! Compare the search-based baselines on a trained victim.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tabperm::attack::AttackResult;
use tabperm::baselines::{
    best_of_k, col_reversal, evolutionary_search, random_attack, row_reversal, CeScorer, EvoConfig,
    GenerationScorer,
};
use tabperm::harness::metrics::containment_score;
use tabperm::harness::synth::{synthetic_lookup_corpus, SynthConfig};
use tabperm::table::{ColPerm, RowPerm};
use tabperm::victim::{train_toy_victim, TrainConfig, VictimConfig};

fn main() {
    let corpus = synthetic_lookup_corpus(&SynthConfig::default());
    let (victim, _) =
        train_toy_victim(&corpus, VictimConfig::default(), &TrainConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ce = CeScorer(&victim);
    let gen = GenerationScorer { victim: &victim, max_new_tokens: 8 };

    let mut totals = vec![0.0; 6];
    for ex in &corpus {
        let (n, m) = (ex.table.n_rows(), ex.table.n_cols());
        let eval = |rp, cp| AttackResult::evaluate(&victim, ex, rp, cp, 8).unwrap();
        let (rp, cp) = random_attack(ex, &mut rng);
        let runs = [
            eval(RowPerm::identity(n), ColPerm::identity(m)),
            eval(rp, cp),
            eval(row_reversal(ex), ColPerm::identity(m)),
            eval(RowPerm::identity(n), col_reversal(ex)),
            best_of_k(&victim, ex, 20, &ce, &mut rng, 8).unwrap(),
            evolutionary_search(&victim, ex, &EvoConfig::default(), &gen).unwrap(),
        ];
        for (t, r) in totals.iter_mut().zip(&runs) {
            *t += containment_score(&ex.answer, &r.attacked_generation).value;
        }
    }
    let names = ["vanilla", "random", "row-rvs", "col-rvs", "best-of-20", "evo"];
    for (name, t) in names.iter().zip(totals) {
        println!("{name:<12} {:.3}", t / corpus.len() as f64);
    }
}
