//! A one-layer, single-head transformer victim with hand-written backprop.
//!
//! The sequence fed to the model is the attended table slots, then the
//! question tokens, a separator, and the answer prefix (teacher forcing).
//! Only the separator and answer-prefix positions are queried; every other
//! position acts purely as a key/value. Each token's input vector is its
//! embedding plus a learned position embedding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::input::{CellGridInput, InputError, PermutedInput, PosMode};
use super::vocab::{Vocab, EOS, PAD, SEP};
use crate::table::{ColPerm, RowPerm, Table, TqaExample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VictimConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    /// Token slots per table cell; longer cells are truncated.
    pub cell_len: usize,
    pub pos_mode: PosMode,
    /// Standard deviation of token embeddings at init.
    pub embed_init: f64,
    /// Standard deviation of position embeddings at init.
    pub pos_init: f64,
    /// Rescale every input embedding to unit RMS before adding its position
    /// embedding.
    pub normalize_inputs: bool,
    pub seed: u64,
}

impl Default for VictimConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            d_ff: 64,
            max_positions: 512,
            cell_len: 8,
            pos_mode: PosMode::Reserialize,
            embed_init: 0.5,
            pos_init: 0.5,
            normalize_inputs: true,
            seed: 0,
        }
    }
}

/// All trainable tensors, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub tok_emb: Vec<f64>,
    pub pos_emb: Vec<f64>,
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w_out: Vec<f64>,
    pub b_out: Vec<f64>,
}

impl Params {
    pub fn zeros(cfg: &VictimConfig, vocab_size: usize) -> Self {
        let (d, f, v) = (cfg.d_model, cfg.d_ff, vocab_size);
        Self {
            tok_emb: vec![0.0; v * d],
            pos_emb: vec![0.0; cfg.max_positions * d],
            wq: vec![0.0; d * d],
            wk: vec![0.0; d * d],
            wv: vec![0.0; d * d],
            wo: vec![0.0; d * d],
            w1: vec![0.0; d * f],
            b1: vec![0.0; f],
            w2: vec![0.0; f * d],
            b2: vec![0.0; d],
            w_out: vec![0.0; d * v],
            b_out: vec![0.0; v],
        }
    }

    pub fn tensors(&self) -> [&[f64]; 12] {
        [
            &self.tok_emb,
            &self.pos_emb,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.w_out,
            &self.b_out,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 12] {
        [
            &mut self.tok_emb,
            &mut self.pos_emb,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }

    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// What a prediction position is scored against.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Token(u32),
    /// Full reference distribution over the vocabulary (soft cross-entropy).
    Dist(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum KeySource {
    Slot(usize),
    Token(u32),
}

/// Activations kept by [`ToyVictim::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    n_slots: usize,
    sources: Vec<KeySource>,
    positions: Vec<usize>,
    /// Input embeddings after optional normalization, and their RMS.
    y: Vec<f64>,
    rms: Vec<f64>,
    x: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    query_rows: Vec<usize>,
    q: Vec<f64>,
    alpha: Vec<Vec<f64>>,
    o: Vec<f64>,
    h1: Vec<f64>,
    z1: Vec<f64>,
    act: Vec<f64>,
    h2: Vec<f64>,
    probs: Vec<f64>,
    dlogits: Vec<f64>,
    loss: f64,
}

impl Tape {
    pub fn loss(&self) -> f64 {
        self.loss
    }

    /// Predicted distribution at each prediction position.
    pub fn distributions(&self) -> Vec<Vec<f64>> {
        let v = self.probs.len() / self.query_rows.len().max(1);
        self.probs.chunks(v.max(1)).map(<[f64]>::to_vec).collect()
    }
}

/// Gradient of the loss with respect to the table-slot embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct VictimGradients {
    pub loss: f64,
    /// Same layout as [`CellGridInput::emb`].
    pub grad_emb: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyVictim {
    pub config: VictimConfig,
    pub vocab: Vocab,
    pub params: Params,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;
const RMS_EPS: f64 = 1e-6;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `out += x W` for `x: [rows]`, `W: rows x cols`.
fn vec_mat_acc(x: &[f64], w: &[f64], cols: usize, out: &mut [f64]) {
    for (r, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        for (o, wv) in out.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *o += xv * wv;
        }
    }
}

/// `out += g W^T` for `g: [cols]`, `W: rows x cols`.
fn vec_mat_t_acc(g: &[f64], w: &[f64], cols: usize, out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate() {
        *o += g
            .iter()
            .zip(&w[r * cols..(r + 1) * cols])
            .map(|(a, b)| a * b)
            .sum::<f64>();
    }
}

/// `gw += x^T g` (outer product accumulation).
fn outer_acc(x: &[f64], g: &[f64], gw: &mut [f64]) {
    let cols = g.len();
    for (r, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        for (o, gv) in gw[r * cols..(r + 1) * cols].iter_mut().zip(g) {
            *o += xv * gv;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl ToyVictim {
    /// Seeded random initialization.
    pub fn init(vocab: Vocab, config: VictimConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Params::zeros(&config, vocab.len());
        let (d, f) = (config.d_model as f64, config.d_ff as f64);
        let mut fill = |t: &mut [f64], std: f64| {
            let normal = Normal::new(0.0, std).expect("positive std");
            t.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        };
        fill(&mut params.tok_emb, config.embed_init);
        fill(&mut params.pos_emb, config.pos_init);
        for w in [
            &mut params.wq,
            &mut params.wk,
            &mut params.wv,
            &mut params.wo,
        ] {
            fill(w, 1.0 / d.sqrt());
        }
        fill(&mut params.w1, 1.0 / d.sqrt());
        fill(&mut params.w2, 1.0 / f.sqrt());
        fill(&mut params.w_out, 1.0 / d.sqrt());
        let dm = config.d_model;
        params.tok_emb[PAD as usize * dm..(PAD as usize + 1) * dm].fill(0.0);
        Self {
            config,
            vocab,
            params,
        }
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn tok_row(&self, id: u32) -> &[f64] {
        let d = self.d_model();
        &self.params.tok_emb[id as usize * d..(id as usize + 1) * d]
    }

    fn pos_row(&self, pos: usize) -> &[f64] {
        let d = self.d_model();
        &self.params.pos_emb[pos * d..(pos + 1) * d]
    }

    /// Tokenize every cell (header included) into a padded block of
    /// `cell_len` slots holding token embeddings.
    pub fn encode_table(&self, table: &Table) -> CellGridInput {
        let (l, d) = (self.config.cell_len, self.d_model());
        let (rows, cols) = (table.n_rows() + 1, table.n_cols());
        let slots = rows * cols * l;
        let mut emb = vec![0.0; slots * d];
        let mut att = vec![false; slots];
        let mut tokens = vec![PAD; slots];
        for i in 0..rows {
            for j in 0..cols {
                let base = (i * cols + j) * l;
                for (k, id) in self
                    .vocab
                    .encode(table.grid_cell(i, j))
                    .into_iter()
                    .take(l)
                    .enumerate()
                {
                    let s = base + k;
                    tokens[s] = id;
                    att[s] = true;
                    emb[s * d..(s + 1) * d].copy_from_slice(self.tok_row(id));
                }
            }
        }
        CellGridInput::new(rows, cols, l, d, emb, att, tokens)
    }

    /// Question ids and answer ids (terminated by the end token).
    pub fn encode_qa(&self, question: &str, answer: &str) -> (Vec<u32>, Vec<u32>) {
        let mut a = self.vocab.encode(answer);
        a.push(EOS);
        (self.vocab.encode(question), a)
    }

    pub fn encode_example(&self, ex: &TqaExample) -> PermutedInput {
        let (question, answer) = self.encode_qa(&ex.question, &ex.answer);
        PermutedInput {
            grid: self.encode_table(&ex.table),
            question,
            answer,
        }
    }

    /// Encode `ex` and hard-permute its grid.
    pub fn encode_permuted(
        &self,
        ex: &TqaExample,
        rp: &RowPerm,
        cp: &ColPerm,
    ) -> Result<PermutedInput, InputError> {
        let mut input = self.encode_example(ex);
        input.grid = input.grid.apply_table_perm(rp, cp, self.config.pos_mode)?;
        Ok(input)
    }

    /// Teacher-forced cross-entropy of `input.answer`.
    pub fn forward_loss(&self, input: &PermutedInput) -> Result<(f64, Tape), InputError> {
        let k = input.answer.len();
        if k == 0 {
            return Err(InputError::EmptyAnswer);
        }
        let targets: Vec<Target> = input.answer.iter().map(|&t| Target::Token(t)).collect();
        let tape = self.forward(
            &input.grid,
            &input.question,
            &input.answer[..k - 1],
            &targets,
        )?;
        Ok((tape.loss, tape))
    }

    /// Loss of `targets` where prediction position 0 is the separator and
    /// position `t > 0` follows `prefix[t - 1]`. `targets.len()` must be
    /// `prefix.len() + 1`.
    pub fn forward(
        &self,
        grid: &CellGridInput,
        question: &[u32],
        prefix: &[u32],
        targets: &[Target],
    ) -> Result<Tape, InputError> {
        assert_eq!(
            targets.len(),
            prefix.len() + 1,
            "one target per prediction position"
        );
        let (d, f, vsize) = (self.d_model(), self.config.d_ff, self.vocab_size());
        let p = &self.params;

        // Key/value sequence.
        let table_len = grid.attended();
        let needed = table_len + question.len() + 1 + prefix.len();
        if needed > self.config.max_positions {
            return Err(InputError::TooLong {
                needed,
                max: self.config.max_positions,
            });
        }
        let mut sources = Vec::with_capacity(needed);
        let mut positions = Vec::with_capacity(needed);
        for s in (0..grid.n_slots()).filter(|&s| grid.att()[s]) {
            sources.push(KeySource::Slot(s));
            positions.push(grid.pos()[s]);
        }
        let tail = question
            .iter()
            .copied()
            .chain(std::iter::once(SEP))
            .chain(prefix.iter().copied());
        for (t, id) in tail.enumerate() {
            sources.push(KeySource::Token(id));
            positions.push(table_len + t);
        }
        let n_keys = sources.len();
        let mut y = vec![0.0; n_keys * d];
        let mut rms = vec![1.0; n_keys];
        for (r, (src, &pos)) in sources.iter().zip(&positions).enumerate() {
            if pos >= self.config.max_positions {
                return Err(InputError::TooLong {
                    needed: pos + 1,
                    max: self.config.max_positions,
                });
            }
            let row = &mut y[r * d..(r + 1) * d];
            match *src {
                KeySource::Slot(s) => row.copy_from_slice(&grid.emb()[s * d..(s + 1) * d]),
                KeySource::Token(id) => row.copy_from_slice(self.tok_row(id)),
            }
            if self.config.normalize_inputs {
                rms[r] = (dot(row, row) / d as f64 + RMS_EPS).sqrt();
                row.iter_mut().for_each(|a| *a /= rms[r]);
            }
        }
        let mut x = y.clone();
        for (r, &pos) in positions.iter().enumerate() {
            x[r * d..(r + 1) * d]
                .iter_mut()
                .zip(self.pos_row(pos))
                .for_each(|(a, b)| *a += b);
        }
        let mut k = vec![0.0; n_keys * d];
        let mut v = vec![0.0; n_keys * d];
        for r in 0..n_keys {
            let xr = &x[r * d..(r + 1) * d];
            vec_mat_acc(xr, &p.wk, d, &mut k[r * d..(r + 1) * d]);
            vec_mat_acc(xr, &p.wv, d, &mut v[r * d..(r + 1) * d]);
        }

        let n_pred = targets.len();
        let first_query = table_len + question.len();
        let query_rows: Vec<usize> = (first_query..first_query + n_pred).collect();
        let scale = 1.0 / (d as f64).sqrt();
        let mut q = vec![0.0; n_pred * d];
        let mut alpha = Vec::with_capacity(n_pred);
        let mut o = vec![0.0; n_pred * d];
        let mut h1 = vec![0.0; n_pred * d];
        let mut z1 = vec![0.0; n_pred * f];
        let mut act = vec![0.0; n_pred * f];
        let mut h2 = vec![0.0; n_pred * d];
        let mut probs = vec![0.0; n_pred * vsize];
        let mut dlogits = vec![0.0; n_pred * vsize];
        let mut loss = 0.0;

        for (pi, &row) in query_rows.iter().enumerate() {
            let xr = &x[row * d..(row + 1) * d];
            let qp = &mut q[pi * d..(pi + 1) * d];
            vec_mat_acc(xr, &p.wq, d, qp);
            // Causal: keys 0..=row; masked table slots never enter `sources`,
            // which is the same as an additive -inf score.
            let scores: Vec<f64> = (0..=row)
                .map(|j| scale * dot(qp, &k[j * d..(j + 1) * d]))
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = w.iter().sum();
            w.iter_mut().for_each(|a| *a /= z);
            let op = &mut o[pi * d..(pi + 1) * d];
            for (j, &a) in w.iter().enumerate() {
                op.iter_mut()
                    .zip(&v[j * d..(j + 1) * d])
                    .for_each(|(ov, vv)| *ov += a * vv);
            }
            alpha.push(w);

            let h1p = &mut h1[pi * d..(pi + 1) * d];
            h1p.copy_from_slice(xr);
            vec_mat_acc(&o[pi * d..(pi + 1) * d], &p.wo, d, h1p);

            let z1p = &mut z1[pi * f..(pi + 1) * f];
            z1p.copy_from_slice(&p.b1);
            vec_mat_acc(&h1[pi * d..(pi + 1) * d], &p.w1, f, z1p);
            let actp = &mut act[pi * f..(pi + 1) * f];
            actp.iter_mut()
                .zip(z1p.iter())
                .for_each(|(a, &z)| *a = gelu(z));

            let h2p = &mut h2[pi * d..(pi + 1) * d];
            h2p.copy_from_slice(&h1[pi * d..(pi + 1) * d]);
            h2p.iter_mut().zip(&p.b2).for_each(|(a, b)| *a += b);
            vec_mat_acc(&act[pi * f..(pi + 1) * f], &p.w2, d, h2p);

            let mut logits = p.b_out.clone();
            vec_mat_acc(&h2[pi * d..(pi + 1) * d], &p.w_out, vsize, &mut logits);
            let lmax = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = lmax + logits.iter().map(|l| (l - lmax).exp()).sum::<f64>().ln();
            let pp = &mut probs[pi * vsize..(pi + 1) * vsize];
            let dl = &mut dlogits[pi * vsize..(pi + 1) * vsize];
            for c in 0..vsize {
                pp[c] = (logits[c] - lse).exp();
                dl[c] = pp[c];
            }
            match &targets[pi] {
                Target::Token(t) => {
                    loss -= logits[*t as usize] - lse;
                    dl[*t as usize] -= 1.0;
                }
                Target::Dist(ref_p) => {
                    assert_eq!(ref_p.len(), vsize, "target distribution size");
                    let mass: f64 = ref_p.iter().sum();
                    for c in 0..vsize {
                        if ref_p[c] > 0.0 {
                            loss -= ref_p[c] * (logits[c] - lse);
                        }
                        dl[c] = mass * pp[c] - ref_p[c];
                    }
                }
            }
        }

        Ok(Tape {
            n_slots: grid.n_slots(),
            sources,
            positions,
            y,
            rms,
            x,
            k,
            v,
            query_rows,
            q,
            alpha,
            o,
            h1,
            z1,
            act,
            h2,
            probs,
            dlogits,
            loss,
        })
    }

    /// Gradient of the taped loss with respect to the table-slot embeddings.
    pub fn backward_to_emb(&self, tape: &Tape) -> VictimGradients {
        VictimGradients {
            loss: tape.loss,
            grad_emb: self.backward(tape, None),
        }
    }

    /// Full backward pass. Returns the slot-embedding gradient and, when
    /// `param_grads` is given, accumulates parameter gradients into it. Slot
    /// embeddings that came from the token table (see
    /// [`ToyVictim::encode_table`]) are not folded into `tok_emb`; use
    /// [`ToyVictim::fold_slot_grads`] for that.
    pub fn backward(&self, tape: &Tape, mut param_grads: Option<&mut Params>) -> Vec<f64> {
        let (d, f, vsize) = (self.d_model(), self.config.d_ff, self.vocab_size());
        let p = &self.params;
        let n_keys = tape.sources.len();
        let scale = 1.0 / (d as f64).sqrt();
        let mut dx = vec![0.0; n_keys * d];
        let mut dk = vec![0.0; n_keys * d];
        let mut dv = vec![0.0; n_keys * d];

        for (pi, &row) in tape.query_rows.iter().enumerate() {
            let dl = &tape.dlogits[pi * vsize..(pi + 1) * vsize];
            let h2p = &tape.h2[pi * d..(pi + 1) * d];
            let h1p = &tape.h1[pi * d..(pi + 1) * d];
            let actp = &tape.act[pi * f..(pi + 1) * f];
            let z1p = &tape.z1[pi * f..(pi + 1) * f];
            let op = &tape.o[pi * d..(pi + 1) * d];
            let qp = &tape.q[pi * d..(pi + 1) * d];
            let xr = &tape.x[row * d..(row + 1) * d];

            let mut dh2 = vec![0.0; d];
            vec_mat_t_acc(dl, &p.w_out, vsize, &mut dh2);

            let mut dact = vec![0.0; f];
            vec_mat_t_acc(&dh2, &p.w2, d, &mut dact);
            let dz1: Vec<f64> = dact
                .iter()
                .zip(z1p)
                .map(|(g, &z)| g * gelu_grad(z))
                .collect();
            let mut dh1 = dh2.clone();
            vec_mat_t_acc(&dz1, &p.w1, f, &mut dh1);

            let mut do_ = vec![0.0; d];
            vec_mat_t_acc(&dh1, &p.wo, d, &mut do_);

            let alpha = &tape.alpha[pi];
            let dalpha: Vec<f64> = (0..=row)
                .map(|j| dot(&do_, &tape.v[j * d..(j + 1) * d]))
                .collect();
            let mean: f64 = alpha.iter().zip(&dalpha).map(|(a, g)| a * g).sum();
            let mut dq = vec![0.0; d];
            for j in 0..=row {
                let a = alpha[j];
                dv[j * d..(j + 1) * d]
                    .iter_mut()
                    .zip(&do_)
                    .for_each(|(g, o)| *g += a * o);
                let ds = a * (dalpha[j] - mean) * scale;
                if ds != 0.0 {
                    let kj = &tape.k[j * d..(j + 1) * d];
                    dq.iter_mut().zip(kj).for_each(|(g, kv)| *g += ds * kv);
                    dk[j * d..(j + 1) * d]
                        .iter_mut()
                        .zip(qp)
                        .for_each(|(g, qv)| *g += ds * qv);
                }
            }

            let dxr = &mut dx[row * d..(row + 1) * d];
            dxr.iter_mut().zip(&dh1).for_each(|(a, b)| *a += b);
            vec_mat_t_acc(&dq, &p.wq, d, dxr);

            if let Some(g) = param_grads.as_deref_mut() {
                g.b_out.iter_mut().zip(dl).for_each(|(a, b)| *a += b);
                outer_acc(h2p, dl, &mut g.w_out);
                g.b2.iter_mut().zip(&dh2).for_each(|(a, b)| *a += b);
                outer_acc(actp, &dh2, &mut g.w2);
                g.b1.iter_mut().zip(&dz1).for_each(|(a, b)| *a += b);
                outer_acc(h1p, &dz1, &mut g.w1);
                outer_acc(op, &dh1, &mut g.wo);
                outer_acc(xr, &dq, &mut g.wq);
            }
        }

        for j in 0..n_keys {
            let dxj = &mut dx[j * d..(j + 1) * d];
            vec_mat_t_acc(&dk[j * d..(j + 1) * d], &p.wk, d, dxj);
            vec_mat_t_acc(&dv[j * d..(j + 1) * d], &p.wv, d, dxj);
        }

        let mut grad_emb = vec![0.0; tape.n_slots * d];
        for (j, src) in tape.sources.iter().enumerate() {
            let dxj = &dx[j * d..(j + 1) * d];
            let de: Vec<f64> = if self.config.normalize_inputs {
                let yj = &tape.y[j * d..(j + 1) * d];
                let c = dot(dxj, yj) / d as f64;
                dxj.iter()
                    .zip(yj)
                    .map(|(g, yv)| (g - c * yv) / tape.rms[j])
                    .collect()
            } else {
                dxj.to_vec()
            };
            match *src {
                KeySource::Slot(s) => grad_emb[s * d..(s + 1) * d].copy_from_slice(&de),
                KeySource::Token(id) => {
                    if let Some(g) = param_grads.as_deref_mut() {
                        let row = &mut g.tok_emb[id as usize * d..(id as usize + 1) * d];
                        row.iter_mut().zip(&de).for_each(|(a, b)| *a += b);
                    }
                }
            }
            if let Some(g) = param_grads.as_deref_mut() {
                let xj = &tape.x[j * d..(j + 1) * d];
                outer_acc(xj, &dk[j * d..(j + 1) * d], &mut g.wk);
                outer_acc(xj, &dv[j * d..(j + 1) * d], &mut g.wv);
                let pos = tape.positions[j];
                let row = &mut g.pos_emb[pos * d..(pos + 1) * d];
                row.iter_mut().zip(dxj).for_each(|(a, b)| *a += b);
            }
        }
        grad_emb
    }

    /// Route slot-embedding gradients back onto the token embedding table.
    pub fn fold_slot_grads(&self, grid: &CellGridInput, grad_emb: &[f64], grads: &mut Params) {
        let d = self.d_model();
        for (s, (&tok, &att)) in grid.tokens().iter().zip(grid.att()).enumerate() {
            if att && tok != PAD {
                let row = &mut grads.tok_emb[tok as usize * d..(tok as usize + 1) * d];
                row.iter_mut()
                    .zip(&grad_emb[s * d..(s + 1) * d])
                    .for_each(|(a, b)| *a += b);
            }
        }
    }

    /// Greedy decoding: repeatedly append the most likely token until the end
    /// token is produced or `max_tokens` tokens have been emitted. The
    /// returned ids exclude the end token.
    pub fn generate_ids(
        &self,
        grid: &CellGridInput,
        question: &[u32],
        max_tokens: usize,
    ) -> Result<Vec<u32>, InputError> {
        let mut out: Vec<u32> = Vec::new();
        while out.len() < max_tokens {
            let dummy = vec![Target::Token(EOS); out.len() + 1];
            let tape = self.forward(grid, question, &out, &dummy)?;
            let vsize = self.vocab_size();
            let last = &tape.probs[out.len() * vsize..(out.len() + 1) * vsize];
            let next = last
                .iter()
                .enumerate()
                .filter(|&(id, _)| id as u32 != PAD && id as u32 != SEP)
                .fold((EOS, f64::NEG_INFINITY), |best, (id, &pr)| {
                    if pr > best.1 {
                        (id as u32, pr)
                    } else {
                        best
                    }
                })
                .0;
            if next == EOS {
                break;
            }
            out.push(next);
        }
        Ok(out)
    }

    pub fn generate(&self, input: &PermutedInput, max_tokens: usize) -> Result<String, InputError> {
        let ids = self.generate_ids(&input.grid, &input.question, max_tokens)?;
        Ok(self.vocab.decode(&ids))
    }

    /// Cross-entropy of the example's answer under a hard layout.
    pub fn layout_loss(
        &self,
        ex: &TqaExample,
        rp: &RowPerm,
        cp: &ColPerm,
    ) -> Result<f64, InputError> {
        Ok(self.forward_loss(&self.encode_permuted(ex, rp, cp)?)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_victim(seed: u64) -> (ToyVictim, TqaExample) {
        let table = Table::new(
            "t",
            vec!["name".into(), "score".into(), "city".into()],
            vec![
                vec!["ann".into(), "62,202".into(), "oslo".into()],
                vec!["bob".into(), "".into(), "rome".into()],
                vec!["cy".into(), "7".into(), "lima".into()],
            ],
        )
        .unwrap();
        let ex = TqaExample::new(table, "What is the score of ann?", "62,202", &["first"]).unwrap();
        let vocab = Vocab::build(
            ex.table
                .to_grid()
                .iter()
                .flatten()
                .map(String::as_str)
                .chain([ex.question.as_str(), "62,202"]),
        );
        let cfg = VictimConfig {
            d_model: 8,
            d_ff: 12,
            cell_len: 4,
            max_positions: 128,
            seed,
            ..Default::default()
        };
        let mut v = ToyVictim::init(vocab, cfg);
        // Non-zero biases so their gradients are exercised.
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for b in [&mut v.params.b1, &mut v.params.b2, &mut v.params.b_out] {
            b.iter_mut().for_each(|x| *x = rng.gen_range(-0.3..0.3));
        }
        (v, ex)
    }

    #[test]
    fn encode_cell_layout() {
        let (v, ex) = tiny_victim(0);
        let g = v.encode_table(&ex.table);
        let (l, cols) = (4, 3);
        let block = (cols + 1) * l; // row 1, col 1
        let toks: Vec<&str> = g.tokens()[block..block + l]
            .iter()
            .map(|&t| v.vocab.token(t))
            .collect();
        assert_eq!(toks, vec!["62", ",", "202", "<pad>"]);
        assert_eq!(&g.att()[block..block + l], &[true, true, true, false]);
        let empty = (2 * cols + 1) * l;
        assert!(g.att()[empty..empty + l].iter().all(|&a| !a));
        assert!(g.emb()[empty * 8..(empty + l) * 8]
            .iter()
            .all(|&x| x == 0.0));
        assert_eq!(v.encode_table(&ex.table), g);
    }

    #[test]
    fn uniform_logits_give_ln_v_per_token() {
        let (mut v, ex) = tiny_victim(1);
        v.params.w_out.fill(0.0);
        v.params.b_out.fill(0.0);
        let mut input = v.encode_example(&ex);
        input.answer = vec![5, 6, 7];
        let (loss, _) = v.forward_loss(&input).unwrap();
        let expected = 3.0 * (v.vocab_size() as f64).ln();
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
        input.answer.clear();
        assert!(matches!(
            v.forward_loss(&input),
            Err(InputError::EmptyAnswer)
        ));
    }

    #[test]
    fn emb_gradient_matches_finite_differences() {
        for norm in [false, true] {
            emb_fd_check(norm);
        }
    }

    fn emb_fd_check(normalize_inputs: bool) {
        let (mut v, ex) = tiny_victim(2);
        v.config.normalize_inputs = normalize_inputs;
        let input = v.encode_example(&ex);
        let (_, tape) = v.forward_loss(&input).unwrap();
        let grads = v.backward_to_emb(&tape);
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let attended: Vec<usize> = (0..input.grid.n_slots())
            .filter(|&s| input.grid.att()[s])
            .collect();
        for _ in 0..60 {
            let s = attended[rng.gen_range(0..attended.len())];
            let c = rng.gen_range(0..8);
            let idx = s * 8 + c;
            let eval = |delta: f64| {
                let mut i2 = input.clone();
                i2.grid.emb_mut()[idx] += delta;
                v.forward_loss(&i2).unwrap().0
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = grads.grad_emb[idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(
                rel < 1e-4 || (fd - an).abs() < 1e-9,
                "slot {s} c {c}: fd {fd} an {an}"
            );
        }
    }

    #[test]
    fn param_gradients_match_finite_differences() {
        for norm in [false, true] {
            param_fd_check(norm);
        }
    }

    fn param_fd_check(normalize_inputs: bool) {
        let (mut v, ex) = tiny_victim(3);
        v.config.normalize_inputs = normalize_inputs;
        let input = v.encode_example(&ex);
        let (_, tape) = v.forward_loss(&input).unwrap();
        let mut g = Params::zeros(&v.config, v.vocab_size());
        let ge = v.backward(&tape, Some(&mut g));
        v.fold_slot_grads(&input.grid, &ge, &mut g);
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for t in 0..12 {
            let len = g.tensors()[t].len();
            for _ in 0..8 {
                let idx = rng.gen_range(0..len);
                let eval = |delta: f64| {
                    let mut v2 = v.clone();
                    v2.params.tensors_mut()[t][idx] += delta;
                    let inp = v2.encode_example(&ex);
                    v2.forward_loss(&inp).unwrap().0
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = g.tensors()[t][idx];
                let err = (fd - an).abs();
                assert!(
                    err < 1e-6 || err / fd.abs().max(an.abs()) < 1e-4,
                    "tensor {t}[{idx}]: fd {fd} an {an}"
                );
            }
        }
    }

    #[test]
    fn pad_slots_are_inert() {
        let (v, ex) = tiny_victim(4);
        let input = v.encode_example(&ex);
        let (base, tape) = v.forward_loss(&input).unwrap();
        let grads = v.backward_to_emb(&tape);
        let pad = (0..input.grid.n_slots())
            .find(|&s| !input.grid.att()[s])
            .unwrap();
        assert!(grads.grad_emb[pad * 8..(pad + 1) * 8]
            .iter()
            .all(|&x| x == 0.0));
        let mut poked = input.clone();
        poked.grid.emb_mut()[pad * 8..(pad + 1) * 8].fill(123.0);
        assert_eq!(v.forward_loss(&poked).unwrap().0.to_bits(), base.to_bits());
    }

    #[test]
    fn doubled_loss_doubles_gradient() {
        let (v, ex) = tiny_victim(5);
        let input = v.encode_example(&ex);
        let k = input.answer.len();
        let once: Vec<Target> = input.answer.iter().map(|&t| Target::Token(t)).collect();
        let tape = v
            .forward(&input.grid, &input.question, &input.answer[..k - 1], &once)
            .unwrap();
        let g1 = v.backward_to_emb(&tape).grad_emb;
        // A doubled target distribution doubles every term of the loss.
        let vs = v.vocab_size();
        let twice: Vec<Target> = input
            .answer
            .iter()
            .map(|&t| {
                let mut p = vec![0.0; vs];
                p[t as usize] = 2.0;
                Target::Dist(p)
            })
            .collect();
        let tape2 = v
            .forward(&input.grid, &input.question, &input.answer[..k - 1], &twice)
            .unwrap();
        assert!((tape2.loss() - 2.0 * tape.loss()).abs() < 1e-12);
        let g2 = v.backward_to_emb(&tape2).grad_emb;
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn carried_positions_leave_loss_unchanged() {
        let (mut v, ex) = tiny_victim(6);
        let rp = RowPerm::new(vec![2, 0, 1]).unwrap();
        let cp = ColPerm::new(vec![1, 2, 0]).unwrap();
        let clean = v
            .layout_loss(&ex, &RowPerm::identity(3), &ColPerm::identity(3))
            .unwrap();
        v.config.pos_mode = PosMode::Carry;
        let carried = v.layout_loss(&ex, &rp, &cp).unwrap();
        assert!((carried - clean).abs() < 1e-10);
        v.config.pos_mode = PosMode::Reserialize;
        let moved = v.layout_loss(&ex, &rp, &cp).unwrap();
        assert!((moved - clean).abs() > 1e-6);
    }

    #[test]
    fn generation_is_deterministic() {
        let (v, ex) = tiny_victim(7);
        let input = v.encode_example(&ex);
        assert_eq!(v.generate(&input, 0).unwrap(), "");
        let a = v.generate(&input, 5).unwrap();
        assert_eq!(a, v.generate(&input, 5).unwrap());
    }

    #[test]
    fn too_long_sequences_are_rejected() {
        let (mut v, ex) = tiny_victim(8);
        v.config.max_positions = 10;
        v.params.pos_emb.truncate(10 * 8);
        let input = v.encode_example(&ex);
        assert!(matches!(
            v.forward_loss(&input),
            Err(InputError::TooLong { .. })
        ));
    }
}
