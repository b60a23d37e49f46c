//! Gradient-free attacks: random layouts, best-of-k, reversals and an
//! elitist evolutionary search over (row, column) permutation pairs.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{AttackError, AttackResult};
use crate::harness::metrics::containment_score;
use crate::perm::Permutation;
use crate::table::{random_legal_permutation, ColPerm, RowPerm, TqaExample};
use crate::victim::ToyVictim;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("all {0} candidate evaluations failed; last error: {1}")]
    AllFailed(usize, String),
    #[error(transparent)]
    Attack(#[from] AttackError),
}

/// Maps a permuted example to a loss; higher means a stronger attack.
pub trait Scorer: Sync {
    fn score(&self, example: &TqaExample, rows: &RowPerm, cols: &ColPerm) -> Result<f64, String>;
}

impl<F> Scorer for F
where
    F: Fn(&TqaExample, &RowPerm, &ColPerm) -> Result<f64, String> + Sync,
{
    fn score(&self, example: &TqaExample, rows: &RowPerm, cols: &ColPerm) -> Result<f64, String> {
        self(example, rows, cols)
    }
}

/// White-box scorer: teacher-forced cross-entropy of the gold answer.
pub struct CeScorer<'a>(pub &'a ToyVictim);

impl Scorer for CeScorer<'_> {
    fn score(&self, example: &TqaExample, rows: &RowPerm, cols: &ColPerm) -> Result<f64, String> {
        self.0
            .layout_loss(example, rows, cols)
            .map_err(|e| e.to_string())
    }
}

/// Black-box scorer: one minus the containment score of the greedy answer.
pub struct GenerationScorer<'a> {
    pub victim: &'a ToyVictim,
    pub max_new_tokens: usize,
}

impl Scorer for GenerationScorer<'_> {
    fn score(&self, example: &TqaExample, rows: &RowPerm, cols: &ColPerm) -> Result<f64, String> {
        let input = self
            .victim
            .encode_permuted(example, rows, cols)
            .map_err(|e| e.to_string())?;
        let out = self
            .victim
            .generate(&input, self.max_new_tokens)
            .map_err(|e| e.to_string())?;
        Ok(1.0 - containment_score(&example.answer, &out).value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub row_perm: RowPerm,
    pub col_perm: ColPerm,
    pub fitness: f64,
    pub evaluated: bool,
}

impl Candidate {
    fn new(row_perm: RowPerm, col_perm: ColPerm) -> Self {
        Self {
            row_perm,
            col_perm,
            fitness: f64::NEG_INFINITY,
            evaluated: false,
        }
    }
}

pub fn random_attack<R: Rng + ?Sized>(example: &TqaExample, rng: &mut R) -> (RowPerm, ColPerm) {
    random_legal_permutation(example.table.n_rows(), example.table.n_cols(), rng)
}

/// Reverse all data rows; the header stays on top.
pub fn row_reversal(example: &TqaExample) -> RowPerm {
    RowPerm::reversal(example.table.n_rows())
}

pub fn col_reversal(example: &TqaExample) -> ColPerm {
    ColPerm::reversal(example.table.n_cols())
}

/// Standard OX1: keep `p1[lo..hi)` in place, fill the rest with `p2`'s
/// values in cyclic order from `hi`, skipping ones already used.
pub fn order_crossover(p1: &Permutation, p2: &Permutation, cut: (usize, usize)) -> Permutation {
    let n = p1.len();
    let (lo, hi) = cut;
    assert!(
        p2.len() == n && lo < hi && hi <= n,
        "order_crossover: bad cut {cut:?} for length {n}"
    );
    let (a, b) = (p1.mapping(), p2.mapping());
    let mut child = vec![usize::MAX; n];
    let mut used = vec![false; n];
    for k in lo..hi {
        child[k] = a[k];
        used[a[k]] = true;
    }
    let mut fill = (hi..n).chain(0..lo);
    for k in (hi..n).chain(0..hi) {
        let v = b[k];
        if !used[v] {
            used[v] = true;
            child[fill.next().expect("slot count matches")] = v;
        }
    }
    Permutation::new(child).expect("OX1 yields a permutation")
}

/// Swap the values at two distinct uniformly chosen positions.
pub fn swap_mutation<R: Rng + ?Sized>(p: &Permutation, rng: &mut R) -> Permutation {
    let n = p.len();
    if n < 2 {
        return Permutation::identity(n);
    }
    let i = rng.gen_range(0..n);
    let mut j = rng.gen_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    let mut m = p.mapping().to_vec();
    m.swap(i, j);
    Permutation::new(m).expect("swap keeps bijectivity")
}

fn random_cut<R: Rng + ?Sized>(n: usize, rng: &mut R) -> (usize, usize) {
    let a = rng.gen_range(0..=n);
    let mut b = rng.gen_range(0..n);
    if b >= a {
        b += 1;
    }
    (a.min(b), a.max(b))
}

fn finish(
    victim: &ToyVictim,
    example: &TqaExample,
    best: Candidate,
    trajectory: Vec<f64>,
    queries: usize,
    failed: usize,
    max_new_tokens: usize,
) -> Result<AttackResult, BaselineError> {
    let mut res = AttackResult::evaluate(
        victim,
        example,
        best.row_perm,
        best.col_perm,
        max_new_tokens,
    )?;
    res.loss_trajectory = trajectory;
    res.queries = queries;
    res.failed_queries = failed;
    Ok(res)
}

/// Score `k` iid random layouts and keep the highest-loss one. Repeated
/// layouts are scored once. The trajectory is the running maximum.
pub fn best_of_k<R: Rng + ?Sized>(
    victim: &ToyVictim,
    example: &TqaExample,
    k: usize,
    scorer: &dyn Scorer,
    rng: &mut R,
    max_new_tokens: usize,
) -> Result<AttackResult, BaselineError> {
    if k == 0 {
        return Err(BaselineError::Config("k must be at least 1".into()));
    }
    let mut cache: HashMap<(RowPerm, ColPerm), Result<f64, String>> = HashMap::new();
    let mut best: Option<Candidate> = None;
    let mut trajectory = Vec::with_capacity(k);
    let (mut failed, mut last_err) = (0, String::new());
    for _ in 0..k {
        let (rp, cp) = random_attack(example, rng);
        let key = (rp.clone(), cp.clone());
        let scored = cache
            .entry(key)
            .or_insert_with(|| scorer.score(example, &rp, &cp))
            .clone();
        match scored {
            Ok(f) => {
                if best.as_ref().is_none_or(|b| f > b.fitness) {
                    best = Some(Candidate {
                        row_perm: rp,
                        col_perm: cp,
                        fitness: f,
                        evaluated: true,
                    });
                }
            }
            Err(e) => {
                failed += 1;
                last_err = e;
            }
        }
        trajectory.push(best.as_ref().map_or(f64::NEG_INFINITY, |b| b.fitness));
    }
    let queries = cache.len();
    let best = best.ok_or(BaselineError::AllFailed(k, last_err))?;
    finish(
        victim,
        example,
        best,
        trajectory,
        queries,
        failed,
        max_new_tokens,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvoConfig {
    pub population_size: usize,
    pub generations: usize,
    pub elite_count: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for EvoConfig {
    fn default() -> Self {
        Self {
            population_size: 5,
            generations: 5,
            elite_count: 2,
            crossover_rate: 0.9,
            mutation_rate: 0.3,
            max_new_tokens: 8,
            seed: 0,
        }
    }
}

impl EvoConfig {
    pub fn validate(&self) -> Result<(), BaselineError> {
        let bad = |m: &str| Err(BaselineError::Config(m.to_owned()));
        if self.population_size < 2 {
            return bad("population_size must be at least 2");
        }
        if self.generations < 1 {
            return bad("generations must be at least 1");
        }
        if self.elite_count < 1 || self.elite_count > self.population_size {
            return bad("elite_count must be in 1..=population_size");
        }
        if !(0.0..=1.0).contains(&self.crossover_rate) || !(0.0..=1.0).contains(&self.mutation_rate)
        {
            return bad("rates must lie in [0, 1]");
        }
        Ok(())
    }

    /// Scorer calls per example, initial population included.
    pub fn query_budget(&self) -> usize {
        self.population_size * (self.generations + 1)
    }
}

fn score_all(
    example: &TqaExample,
    scorer: &dyn Scorer,
    pop: &mut [Candidate],
) -> (usize, Option<String>) {
    let results: Vec<Result<f64, String>> = pop
        .par_iter()
        .map(|c| scorer.score(example, &c.row_perm, &c.col_perm))
        .collect();
    let mut failed = 0;
    let mut last = None;
    for (c, r) in pop.iter_mut().zip(results) {
        match r {
            Ok(f) => {
                c.fitness = f;
                c.evaluated = true;
            }
            Err(e) => {
                failed += 1;
                last = Some(e);
            }
        }
    }
    (failed, last)
}

/// Fitness-descending, stable in insertion order for ties.
fn rank(pop: &mut [Candidate]) {
    pop.sort_by(|a, b| b.fitness.total_cmp(&a.fitness));
}

fn tournament<'p, R: Rng + ?Sized>(pop: &'p [Candidate], rng: &mut R) -> &'p Candidate {
    let a = &pop[rng.gen_range(0..pop.len())];
    let b = &pop[rng.gen_range(0..pop.len())];
    if b.fitness > a.fitness {
        b
    } else {
        a
    }
}

fn crossover<R: Rng + ?Sized>(a: &Permutation, b: &Permutation, rng: &mut R) -> Permutation {
    if a.len() < 2 {
        return a.clone();
    }
    let cut = random_cut(a.len(), rng);
    order_crossover(a, b, cut)
}

/// Elitist genetic search. Generation 0 is the identity plus random pairs;
/// each later generation scores `population_size` children and keeps the
/// `elite_count` best parents alongside the best children. The trajectory
/// holds the best-ever fitness after each generation.
pub fn evolutionary_search(
    victim: &ToyVictim,
    example: &TqaExample,
    cfg: &EvoConfig,
    scorer: &dyn Scorer,
) -> Result<AttackResult, BaselineError> {
    cfg.validate()?;
    let (n, m) = (example.table.n_rows(), example.table.n_cols());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pop = vec![Candidate::new(RowPerm::identity(n), ColPerm::identity(m))];
    while pop.len() < cfg.population_size {
        let (rp, cp) = random_legal_permutation(n, m, &mut rng);
        pop.push(Candidate::new(rp, cp));
    }
    let (mut failed, mut last_err) = score_all(example, scorer, &mut pop);
    let mut queries = pop.len();
    rank(&mut pop);
    let mut best = pop[0].clone();
    let mut trajectory = vec![best.fitness];

    for _ in 0..cfg.generations {
        let mut children = Vec::with_capacity(cfg.population_size);
        for _ in 0..cfg.population_size {
            let p1 = tournament(&pop, &mut rng);
            let p2 = tournament(&pop, &mut rng);
            let (mut rows, mut cols) = if rng.gen_bool(cfg.crossover_rate) {
                (
                    crossover(&p1.row_perm.0, &p2.row_perm.0, &mut rng),
                    crossover(&p1.col_perm.0, &p2.col_perm.0, &mut rng),
                )
            } else {
                (p1.row_perm.0.clone(), p1.col_perm.0.clone())
            };
            if rows.len() >= 2 && rng.gen_bool(cfg.mutation_rate) {
                rows = swap_mutation(&rows, &mut rng);
            }
            if cols.len() >= 2 && rng.gen_bool(cfg.mutation_rate) {
                cols = swap_mutation(&cols, &mut rng);
            }
            children.push(Candidate::new(RowPerm(rows), ColPerm(cols)));
        }
        let (f, e) = score_all(example, scorer, &mut children);
        failed += f;
        last_err = e.or(last_err);
        queries += children.len();
        rank(&mut children);
        pop.truncate(cfg.elite_count);
        pop.extend(
            children
                .into_iter()
                .take(cfg.population_size - cfg.elite_count),
        );
        rank(&mut pop);
        if pop[0].fitness > best.fitness {
            best = pop[0].clone();
        }
        trajectory.push(best.fitness);
    }
    if !best.evaluated {
        return Err(BaselineError::AllFailed(
            queries,
            last_err.unwrap_or_default(),
        ));
    }
    finish(
        victim,
        example,
        best,
        trajectory,
        queries,
        failed,
        cfg.max_new_tokens,
    )
}
