//! Gradient-based adversarial table permutation.
//!
//! Two unconstrained score matrices (data rows, columns) are mapped to soft
//! permutations with Sinkhorn normalization, the row factor is lifted so the
//! header stays first, and the victim's loss on the hybrid-permuted input
//! minus weighted entropy penalties is maximized with Adam. The final soft
//! matrices are projected to hard permutations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::{AdamHyper, AdamState, Direction};
use crate::perm::{
    lift_header_fixed, matrix_entropy, matrix_entropy_grad, project_to_permutation, sinkhorn,
    sinkhorn_backward, PermError, SquareMatrix, DEFAULT_SINKHORN_ITERS,
};
use crate::table::{ColPerm, RowPerm, TqaExample};
use crate::victim::{
    col_gather_order, mix_soft_backward, InputError, PermutedInput, Target, ToyVictim,
};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("example {0} is order-sensitive; permuting it changes the correct answer")]
    OrderSensitive(String),
    #[error("theta shapes {got_r}x{got_r} / {got_c}x{got_c} do not match table {n}x{m}")]
    Shape {
        got_r: usize,
        got_c: usize,
        n: usize,
        m: usize,
    },
    #[error(transparent)]
    Perm(#[from] PermError),
    #[error(transparent)]
    Input(#[from] InputError),
    #[error("invalid attack config: {0}")]
    Config(String),
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Cross-entropy of the ground-truth answer.
    #[default]
    Ce,
    /// KL divergence from the clean prediction; needs no label.
    Kl,
}

/// Which factors are optimized. A frozen factor is pinned at a strong
/// diagonal and therefore projects to the identity.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    Row,
    Col,
    #[default]
    Joint,
}

impl AttackMode {
    pub fn optimizes_rows(self) -> bool {
        matches!(self, AttackMode::Row | AttackMode::Joint)
    }

    pub fn optimizes_cols(self) -> bool {
        matches!(self, AttackMode::Col | AttackMode::Joint)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AtpConfig {
    pub n_attack: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub n_sink: usize,
    pub theta_init_scale: f64,
    pub objective: Objective,
    pub mode: AttackMode,
    /// Diagonal value a frozen factor is pinned at.
    pub frozen_diagonal: f64,
    /// Token budget for clean/attacked generations.
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for AtpConfig {
    fn default() -> Self {
        Self {
            n_attack: 20,
            lambda1: 10.0,
            lambda2: 10.0,
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            n_sink: DEFAULT_SINKHORN_ITERS,
            theta_init_scale: 0.1,
            objective: Objective::Ce,
            mode: AttackMode::Joint,
            frozen_diagonal: 20.0,
            max_new_tokens: 8,
            seed: 0,
        }
    }
}

impl AtpConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        let bad = |m: &str| Err(AttackError::Config(m.to_owned()));
        if self.n_attack < 1 {
            return bad("n_attack must be at least 1");
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("entropy weights must be non-negative");
        }
        // A zero rate is accepted: it evaluates the initialization only.
        if !(self.learning_rate >= 0.0) {
            return bad("learning_rate must be non-negative");
        }
        if self.n_sink < 1 {
            return bad("n_sink must be at least 1");
        }
        if !(self.theta_init_scale > 0.0) {
            return bad("theta_init_scale must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// One evaluation of the regularized objective and its ascent gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveEval {
    pub value: f64,
    /// Victim loss term (cross-entropy or KL) before regularization.
    pub loss: f64,
    pub entropy_r: f64,
    pub entropy_c: f64,
    pub grad_theta_r: SquareMatrix,
    pub grad_theta_c: SquareMatrix,
    /// Hard projections used for positions and attention flags.
    pub row_perm: RowPerm,
    pub col_perm: ColPerm,
}

/// Target distributions for the label-free objective: the victim's own
/// teacher-forced predictions along its greedy clean generation.
#[derive(Debug, Clone, PartialEq)]
pub struct KlReference {
    prefix: Vec<u32>,
    dists: Vec<Vec<f64>>,
    entropy: f64,
}

impl KlReference {
    pub fn new(
        victim: &ToyVictim,
        clean: &PermutedInput,
        max_tokens: usize,
    ) -> Result<Self, InputError> {
        let mut seq = victim.generate_ids(&clean.grid, &clean.question, max_tokens.max(1))?;
        if seq.len() < max_tokens.max(1) {
            seq.push(crate::victim::vocab::EOS);
        }
        let prefix = seq[..seq.len() - 1].to_vec();
        let targets: Vec<Target> = seq.iter().map(|&t| Target::Token(t)).collect();
        let tape = victim.forward(&clean.grid, &clean.question, &prefix, &targets)?;
        let dists = tape.distributions();
        let entropy = dists
            .iter()
            .flat_map(|d| d.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()))
            .sum();
        Ok(Self {
            prefix,
            dists,
            entropy,
        })
    }

    pub fn len(&self) -> usize {
        self.dists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dists.is_empty()
    }
}

enum LossKind<'a> {
    Ce,
    Kl(&'a KlReference),
}

fn soft_factors(
    theta_r: &SquareMatrix,
    theta_c: &SquareMatrix,
    n_sink: usize,
) -> Result<(crate::perm::DoublyStochastic, crate::perm::DoublyStochastic), PermError> {
    Ok((sinkhorn(theta_r, n_sink)?, sinkhorn(theta_c, n_sink)?))
}

fn evaluate(
    victim: &ToyVictim,
    clean: &PermutedInput,
    theta_r: &SquareMatrix,
    theta_c: &SquareMatrix,
    cfg: &AtpConfig,
    kind: LossKind<'_>,
) -> Result<ObjectiveEval, AttackError> {
    let (n, m) = (clean.grid.rows().saturating_sub(1), clean.grid.cols());
    if theta_r.dim() != n || theta_c.dim() != m {
        return Err(AttackError::Shape {
            got_r: theta_r.dim(),
            got_c: theta_c.dim(),
            n,
            m,
        });
    }
    let (s_r, d_c) = soft_factors(theta_r, theta_c, cfg.n_sink)?;
    let d_r = lift_header_fixed(&s_r);
    let entropy_r = matrix_entropy(&s_r);
    let entropy_c = matrix_entropy(&d_c);

    let mixed = clean.grid.mix_soft(&d_r, &d_c, victim.config.pos_mode)?;
    let tape = match kind {
        LossKind::Ce => {
            let k = clean.answer.len();
            if k == 0 {
                return Err(InputError::EmptyAnswer.into());
            }
            let targets: Vec<Target> = clean.answer.iter().map(|&t| Target::Token(t)).collect();
            victim.forward(&mixed, &clean.question, &clean.answer[..k - 1], &targets)?
        }
        LossKind::Kl(r) => {
            let targets: Vec<Target> = r.dists.iter().cloned().map(Target::Dist).collect();
            victim.forward(&mixed, &clean.question, &r.prefix, &targets)?
        }
    };
    let loss = match kind {
        LossKind::Ce => tape.loss(),
        // soft cross-entropy minus reference entropy; rounding can dip below zero
        LossKind::Kl(r) => (tape.loss() - r.entropy).max(0.0),
    };
    let grad_mixed = victim.backward_to_emb(&tape).grad_emb;
    let (g_dr, g_dc) = mix_soft_backward(&clean.grid, d_r.matrix(), d_c.matrix(), &grad_mixed);

    // d(-lambda H)/dS = lambda (ln S + 1)
    let ent_r = matrix_entropy_grad(&s_r);
    let mut g_sr = SquareMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            g_sr.set(i, j, g_dr.get(i + 1, j + 1) - cfg.lambda1 * ent_r.get(i, j));
        }
    }
    let ent_c = matrix_entropy_grad(&d_c);
    let mut g_sc = g_dc;
    for (g, e) in g_sc.as_mut_slice().iter_mut().zip(ent_c.as_slice()) {
        *g -= cfg.lambda2 * e;
    }

    Ok(ObjectiveEval {
        value: loss - cfg.lambda1 * entropy_r - cfg.lambda2 * entropy_c,
        loss,
        entropy_r,
        entropy_c,
        grad_theta_r: sinkhorn_backward(theta_r, cfg.n_sink, &g_sr)?,
        grad_theta_c: sinkhorn_backward(theta_c, cfg.n_sink, &g_sc)?,
        row_perm: RowPerm(project_to_permutation(&s_r)),
        col_perm: ColPerm(col_gather_order(&project_to_permutation(&d_c))),
    })
}

/// Regularized cross-entropy objective and its gradients for ascent.
/// `theta_r` is `n x n` over data rows; `theta_c` is `m x m`.
pub fn atp_objective(
    victim: &ToyVictim,
    clean: &PermutedInput,
    theta_r: &SquareMatrix,
    theta_c: &SquareMatrix,
    cfg: &AtpConfig,
) -> Result<ObjectiveEval, AttackError> {
    evaluate(victim, clean, theta_r, theta_c, cfg, LossKind::Ce)
}

/// Label-free variant: summed KL from the clean predictive distributions to
/// the permuted ones, minus the entropy penalties.
pub fn kl_objective(
    victim: &ToyVictim,
    clean: &PermutedInput,
    reference: &KlReference,
    theta_r: &SquareMatrix,
    theta_c: &SquareMatrix,
    cfg: &AtpConfig,
) -> Result<ObjectiveEval, AttackError> {
    evaluate(
        victim,
        clean,
        theta_r,
        theta_c,
        cfg,
        LossKind::Kl(reference),
    )
}

/// One bias-corrected Adam ascent step on a score matrix.
pub fn adam_step(
    theta: &SquareMatrix,
    grads: &SquareMatrix,
    state: &AdamState,
    hyper: &AdamHyper,
) -> (SquareMatrix, AdamState) {
    let mut theta = theta.clone();
    let mut state = state.clone();
    state.update(
        theta.as_mut_slice(),
        grads.as_slice(),
        hyper,
        Direction::Ascent,
    );
    (theta, state)
}

/// Outcome of one attack on one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub row_perm: RowPerm,
    pub col_perm: ColPerm,
    /// Objective value at every iteration, before that iteration's update.
    pub loss_trajectory: Vec<f64>,
    pub clean_loss: f64,
    pub attacked_loss: f64,
    pub clean_generation: String,
    pub attacked_generation: String,
    pub entropy_r_final: f64,
    pub entropy_c_final: f64,
    /// Set when the table has nothing to permute.
    pub noop: bool,
    /// Victim evaluations spent by the search (gradient steps for ATP).
    pub queries: usize,
    /// Candidate evaluations that failed and were skipped.
    pub failed_queries: usize,
}

impl AttackResult {
    /// Score a finished search: clean vs. permuted loss and generations.
    pub fn evaluate(
        victim: &ToyVictim,
        example: &TqaExample,
        row_perm: RowPerm,
        col_perm: ColPerm,
        max_new_tokens: usize,
    ) -> Result<Self, AttackError> {
        let clean = victim.encode_example(example);
        let (clean_loss, _) = victim.forward_loss(&clean)?;
        let clean_generation = victim.generate(&clean, max_new_tokens)?;
        let attacked = victim.encode_permuted(example, &row_perm, &col_perm)?;
        let (attacked_loss, _) = victim.forward_loss(&attacked)?;
        let attacked_generation = victim.generate(&attacked, max_new_tokens)?;
        Ok(Self {
            row_perm,
            col_perm,
            loss_trajectory: Vec::new(),
            clean_loss,
            attacked_loss,
            clean_generation,
            attacked_generation,
            entropy_r_final: 0.0,
            entropy_c_final: 0.0,
            noop: false,
            queries: 0,
            failed_queries: 0,
        })
    }
}

/// Initial score matrices: seeded N(0, scale) entries, rows first, then any
/// frozen factor replaced by a strong diagonal.
pub fn init_thetas(n: usize, m: usize, cfg: &AtpConfig) -> (SquareMatrix, SquareMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, cfg.theta_init_scale).expect("validated scale");
    let mut draw = |k: usize| {
        let data = (0..k * k).map(|_| normal.sample(&mut rng)).collect();
        SquareMatrix::new(k, data).expect("finite draws")
    };
    let mut theta_r = draw(n);
    let mut theta_c = draw(m);
    if !cfg.mode.optimizes_rows() {
        theta_r = SquareMatrix::scaled_identity(n, cfg.frozen_diagonal);
    }
    if !cfg.mode.optimizes_cols() {
        theta_c = SquareMatrix::scaled_identity(m, cfg.frozen_diagonal);
    }
    (theta_r, theta_c)
}

/// Run the full attack loop on one example.
pub fn run_atp(
    victim: &ToyVictim,
    example: &TqaExample,
    cfg: &AtpConfig,
) -> Result<AttackResult, AttackError> {
    cfg.validate()?;
    if example.order_sensitive {
        return Err(AttackError::OrderSensitive(example.id().to_owned()));
    }
    let (n, m) = (example.table.n_rows(), example.table.n_cols());
    if n <= 1 && m <= 1 {
        let mut res = AttackResult::evaluate(
            victim,
            example,
            RowPerm::identity(n),
            ColPerm::identity(m),
            cfg.max_new_tokens,
        )?;
        res.noop = true;
        return Ok(res);
    }

    let clean = victim.encode_example(example);
    let reference = match cfg.objective {
        Objective::Ce => None,
        Objective::Kl => Some(KlReference::new(victim, &clean, cfg.max_new_tokens)?),
    };
    let (mut theta_r, mut theta_c) = init_thetas(n, m, cfg);
    let mut adam_r = AdamState::new(n * n);
    let mut adam_c = AdamState::new(m * m);
    let hyper = cfg.adam();
    let mut trajectory = Vec::with_capacity(cfg.n_attack);

    for _ in 0..cfg.n_attack {
        let eval = match &reference {
            None => atp_objective(victim, &clean, &theta_r, &theta_c, cfg)?,
            Some(r) => kl_objective(victim, &clean, r, &theta_r, &theta_c, cfg)?,
        };
        trajectory.push(eval.value);
        if cfg.mode.optimizes_rows() {
            adam_r.update(
                theta_r.as_mut_slice(),
                eval.grad_theta_r.as_slice(),
                &hyper,
                Direction::Ascent,
            );
        }
        if cfg.mode.optimizes_cols() {
            adam_c.update(
                theta_c.as_mut_slice(),
                eval.grad_theta_c.as_slice(),
                &hyper,
                Direction::Ascent,
            );
        }
    }

    let (s_r, d_c) = soft_factors(&theta_r, &theta_c, cfg.n_sink)?;
    let row_perm = RowPerm(project_to_permutation(&s_r));
    let col_perm = ColPerm(col_gather_order(&project_to_permutation(&d_c)));
    let mut res = AttackResult::evaluate(victim, example, row_perm, col_perm, cfg.max_new_tokens)?;
    res.loss_trajectory = trajectory;
    res.queries = cfg.n_attack;
    res.entropy_r_final = matrix_entropy(&s_r);
    res.entropy_c_final = matrix_entropy(&d_c);
    Ok(res)
}
