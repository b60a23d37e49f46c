#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tabperm::harness::synth::{synthetic_lookup_corpus, SynthConfig};
use tabperm::perm::SquareMatrix;
use tabperm::table::{Table, TqaExample, DEFAULT_ORDER_KEYWORDS};
use tabperm::victim::{corpus_vocab, train_toy_victim, ToyVictim, TrainConfig, VictimConfig};

/// The 50-example 4x4 lookup corpus for `seed`.
pub fn lookup_corpus(seed: u64) -> Vec<TqaExample> {
    synthetic_lookup_corpus(&SynthConfig {
        seed,
        ..Default::default()
    })
}

/// Default victim trained on [`lookup_corpus`].
pub fn trained_victim(seed: u64) -> (ToyVictim, Vec<TqaExample>) {
    let corpus = lookup_corpus(seed);
    let (victim, _) = train_toy_victim(
        &corpus,
        VictimConfig {
            seed,
            ..Default::default()
        },
        &TrainConfig {
            seed,
            ..Default::default()
        },
    )
    .expect("training succeeds");
    (victim, corpus)
}

/// Untrained victim with a vocabulary over `corpus`.
pub fn small_victim(corpus: &[TqaExample], d: usize, seed: u64) -> ToyVictim {
    ToyVictim::init(
        corpus_vocab(corpus),
        VictimConfig {
            d_model: d,
            d_ff: d,
            cell_len: 3,
            seed,
            ..Default::default()
        },
    )
}

/// A `rows`-data-row by `cols`-column lookup example with random cells.
pub fn random_example(rows: usize, cols: usize, rng: &mut impl Rng, id: &str) -> TqaExample {
    let header: Vec<String> = (0..cols).map(|j| format!("c{j}")).collect();
    let mut grid = vec![header];
    for i in 0..rows {
        grid.push(
            (0..cols)
                .map(|j| {
                    if j == 0 {
                        format!("k{i}")
                    } else {
                        rng.gen_range(0..50).to_string()
                    }
                })
                .collect(),
        );
    }
    let answer = grid[1 + rng.gen_range(0..rows)][cols - 1].clone();
    let table = Table::from_grid(id, grid).expect("rectangular");
    TqaExample::new(
        table,
        format!("What is c{} of k0?", cols - 1),
        answer,
        DEFAULT_ORDER_KEYWORDS,
    )
    .expect("valid")
}

pub fn random_theta(n: usize, scale: f64, rng: &mut impl Rng) -> SquareMatrix {
    SquareMatrix::new(
        n,
        (0..n * n).map(|_| rng.gen_range(-scale..=scale)).collect(),
    )
    .expect("finite")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// All permutations of `0..n` in lexicographic order.
pub fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        out.push(p.clone());
        let Some(i) = (1..n).rev().find(|&i| p[i - 1] < p[i]) else {
            return out;
        };
        let j = (i..n)
            .rev()
            .find(|&j| p[j] > p[i - 1])
            .expect("successor exists");
        p.swap(i - 1, j);
        p[i..].reverse();
    }
}
