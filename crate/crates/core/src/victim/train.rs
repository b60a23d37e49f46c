//! Teacher-forced training of the toy victim on canonical-order tables.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::input::InputError;
use super::model::{Params, ToyVictim, VictimConfig};
use super::vocab::Vocab;
use crate::optim::{AdamHyper, AdamState, Direction};
use crate::table::TqaExample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Stop once the mean per-example cross-entropy drops below this.
    pub target_loss: f64,
    /// Std of Gaussian noise added to attended table embeddings on every
    /// training pass; 0 disables it.
    pub embed_noise: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            batch_size: 10,
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            target_loss: 0.05,
            embed_noise: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("example {id}: {source}")]
    Input { id: String, source: InputError },
    #[error("training diverged at epoch {0}")]
    Diverged(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    /// Mean per-example cross-entropy of the returned parameters.
    pub final_loss: f64,
    pub converged: bool,
    /// Mean cross-entropy after each epoch.
    pub history: Vec<f64>,
}

/// Vocabulary over every cell, question and answer of `corpus`.
pub fn corpus_vocab(corpus: &[TqaExample]) -> Vocab {
    let texts = corpus.iter().flat_map(|ex| {
        ex.table
            .to_grid()
            .into_iter()
            .flatten()
            .chain([ex.question.clone(), ex.answer.clone()])
    });
    let owned: Vec<String> = texts.collect();
    Vocab::build(owned.iter().map(String::as_str))
}

fn example_grad(
    victim: &ToyVictim,
    ex: &TqaExample,
    noise: Option<(f64, u64)>,
) -> Result<(f64, Params), TrainError> {
    let mut input = victim.encode_example(ex);
    if let Some((std, seed)) = noise {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("finite std");
        let d = input.grid.dim();
        let att = input.grid.att().to_vec();
        for (slot, e) in input.grid.emb_mut().chunks_mut(d).enumerate() {
            if att[slot] {
                e.iter_mut().for_each(|x| *x += normal.sample(&mut rng));
            }
        }
    }
    let (loss, tape) = victim
        .forward_loss(&input)
        .map_err(|source| TrainError::Input {
            id: ex.id().to_owned(),
            source,
        })?;
    let mut grads = Params::zeros(&victim.config, victim.vocab_size());
    let grad_emb = victim.backward(&tape, Some(&mut grads));
    victim.fold_slot_grads(&input.grid, &grad_emb, &mut grads);
    Ok((loss, grads))
}

/// Mean teacher-forced cross-entropy over `corpus`.
pub fn mean_loss(victim: &ToyVictim, corpus: &[TqaExample]) -> Result<f64, TrainError> {
    let losses: Vec<f64> = corpus
        .par_iter()
        .map(|ex| {
            victim
                .forward_loss(&victim.encode_example(ex))
                .map(|(l, _)| l)
                .map_err(|source| TrainError::Input {
                    id: ex.id().to_owned(),
                    source,
                })
        })
        .collect::<Result<_, _>>()?;
    Ok(losses.iter().sum::<f64>() / corpus.len() as f64)
}

/// Train a fresh victim on `corpus`. Results are bitwise reproducible for a
/// fixed configuration regardless of thread count: per-example gradients are
/// summed in corpus order.
pub fn train_toy_victim(
    corpus: &[TqaExample],
    victim_cfg: VictimConfig,
    cfg: &TrainConfig,
) -> Result<(ToyVictim, TrainReport), TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut victim = ToyVictim::init(corpus_vocab(corpus), victim_cfg);
    if cfg.epochs == 0 {
        let loss = mean_loss(&victim, corpus)?;
        let report = TrainReport {
            epochs_run: 0,
            final_loss: loss,
            converged: loss < cfg.target_loss,
            history: Vec::new(),
        };
        return Ok((victim, report));
    }

    let hyper = AdamHyper {
        learning_rate: cfg.learning_rate,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        epsilon: cfg.epsilon,
    };
    let mut states: Vec<AdamState> = victim
        .params
        .tensors()
        .iter()
        .map(|t| AdamState::new(t.len()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut best = (f64::INFINITY, victim.params.clone());
    let mut history = Vec::new();
    let batch = cfg.batch_size.max(1);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let per_example: Vec<(f64, Params)> = chunk
                .par_iter()
                .map(|&i| {
                    let noise = (cfg.embed_noise > 0.0).then(|| {
                        (
                            cfg.embed_noise,
                            cfg.seed ^ ((epoch as u64) << 32) ^ i as u64,
                        )
                    });
                    example_grad(&victim, &corpus[i], noise)
                })
                .collect::<Result<_, _>>()?;
            let mut total = Params::zeros(&victim.config, victim.vocab_size());
            for (_, g) in &per_example {
                total.add_assign(g);
            }
            total.scale(1.0 / chunk.len() as f64);
            for ((p, g), st) in victim
                .params
                .tensors_mut()
                .into_iter()
                .zip(total.tensors())
                .zip(&mut states)
            {
                st.update(p, g, &hyper, Direction::Descent);
            }
        }
        if !victim.params.is_finite() {
            return Err(TrainError::Diverged(epoch));
        }
        let loss = mean_loss(&victim, corpus)?;
        history.push(loss);
        if loss < best.0 {
            best = (loss, victim.params.clone());
        }
        if loss < cfg.target_loss {
            break;
        }
    }

    let converged = best.0 < cfg.target_loss;
    victim.params = best.1;
    let report = TrainReport {
        epochs_run: history.len(),
        final_loss: best.0,
        converged,
        history,
    };
    Ok((victim, report))
}
