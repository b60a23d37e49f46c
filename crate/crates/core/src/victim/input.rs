//! Cell-grid model inputs and their hard/soft rearrangement.
//!
//! Every cell of the `(n+1) x m` grid (header included) is a block of
//! `cell_len` token slots. Each slot carries a `dim`-wide embedding, a
//! position id and an attention flag. Padded slots have a zero embedding and
//! are never attended.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::perm::{project_to_permutation, DoublyStochastic, Permutation, SquareMatrix};
use crate::table::{ColPerm, RowPerm};

#[derive(Debug, Error, PartialEq)]
pub enum InputError {
    #[error("grid is {rows}x{cols} but permutations are {row_perm}x{col_perm}")]
    Shape {
        rows: usize,
        cols: usize,
        row_perm: usize,
        col_perm: usize,
    },
    #[error("row mixing matrix moves the header row")]
    HeaderNotFixed,
    #[error("sequence needs {needed} positions but the model supports {max}")]
    TooLong { needed: usize, max: usize },
    #[error("answer must contain at least one token")]
    EmptyAnswer,
}

/// How position ids are assigned after cells move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosMode {
    /// Renumber attended slots in row-major order of the new layout, as if
    /// the permuted table had been serialized again.
    #[default]
    Reserialize,
    /// Keep each slot's original id; the model then sees the same sequence.
    Carry,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellGridInput {
    rows: usize,
    cols: usize,
    cell_len: usize,
    dim: usize,
    emb: Vec<f64>,
    pos: Vec<usize>,
    att: Vec<bool>,
    tokens: Vec<u32>,
}

/// Row-major running count over attended slots; padded slots get 0.
pub fn serialized_positions(att: &[bool]) -> Vec<usize> {
    let mut next = 0;
    att.iter()
        .map(|&a| {
            if a {
                next += 1;
                next - 1
            } else {
                0
            }
        })
        .collect()
}

impl CellGridInput {
    /// Assemble a grid from per-slot data laid out as
    /// `[(row * cols + col) * cell_len + k]`; positions are serialized.
    pub fn new(
        rows: usize,
        cols: usize,
        cell_len: usize,
        dim: usize,
        emb: Vec<f64>,
        att: Vec<bool>,
        tokens: Vec<u32>,
    ) -> Self {
        let slots = rows * cols * cell_len;
        assert_eq!(emb.len(), slots * dim, "embedding buffer size");
        assert_eq!(att.len(), slots, "attention buffer size");
        assert_eq!(tokens.len(), slots, "token buffer size");
        let pos = serialized_positions(&att);
        Self {
            rows,
            cols,
            cell_len,
            dim,
            emb,
            pos,
            att,
            tokens,
        }
    }

    /// Grid rows, header included.
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cell_len(&self) -> usize {
        self.cell_len
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_slots(&self) -> usize {
        self.att.len()
    }

    pub fn emb(&self) -> &[f64] {
        &self.emb
    }

    pub fn emb_mut(&mut self) -> &mut [f64] {
        &mut self.emb
    }

    pub fn pos(&self) -> &[usize] {
        &self.pos
    }

    pub fn att(&self) -> &[bool] {
        &self.att
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// Number of attended table slots.
    pub fn attended(&self) -> usize {
        self.att.iter().filter(|&&a| a).count()
    }

    fn block(&self, i: usize, j: usize) -> usize {
        i * self.cols + j
    }

    fn block_len(&self) -> usize {
        self.cell_len * self.dim
    }

    pub fn cell_emb(&self, i: usize, j: usize) -> &[f64] {
        let b = self.block(i, j) * self.block_len();
        &self.emb[b..b + self.block_len()]
    }

    fn check(&self, rows: usize, cols: usize) -> Result<(), InputError> {
        if rows != self.rows || cols != self.cols {
            return Err(InputError::Shape {
                rows: self.rows,
                cols: self.cols,
                row_perm: rows,
                col_perm: cols,
            });
        }
        Ok(())
    }

    /// Rearrange whole cell blocks: block `(i, j)` of the result is block
    /// `(rows[i], cols[j])` of `self`. `rows` covers the header as index 0.
    pub fn apply_hard(
        &self,
        rows: &Permutation,
        cols: &Permutation,
        mode: PosMode,
    ) -> Result<CellGridInput, InputError> {
        self.check(rows.len(), cols.len())?;
        if self.rows > 0 && rows.mapping()[0] != 0 {
            return Err(InputError::HeaderNotFixed);
        }
        let (l, bl) = (self.cell_len, self.block_len());
        let mut out = self.clone();
        for (i, &si) in rows.mapping().iter().enumerate() {
            for (j, &sj) in cols.mapping().iter().enumerate() {
                let (dst, src) = (self.block(i, j), self.block(si, sj));
                out.emb[dst * bl..(dst + 1) * bl]
                    .copy_from_slice(&self.emb[src * bl..(src + 1) * bl]);
                out.att[dst * l..(dst + 1) * l].copy_from_slice(&self.att[src * l..(src + 1) * l]);
                out.pos[dst * l..(dst + 1) * l].copy_from_slice(&self.pos[src * l..(src + 1) * l]);
                out.tokens[dst * l..(dst + 1) * l]
                    .copy_from_slice(&self.tokens[src * l..(src + 1) * l]);
            }
        }
        if mode == PosMode::Reserialize {
            out.pos = serialized_positions(&out.att);
        }
        Ok(out)
    }

    /// [`CellGridInput::apply_hard`] with table-level permutations.
    pub fn apply_table_perm(
        &self,
        rp: &RowPerm,
        cp: &ColPerm,
        mode: PosMode,
    ) -> Result<CellGridInput, InputError> {
        self.apply_hard(&rp.with_header(), &cp.0, mode)
    }

    /// Hybrid application: embeddings are mixed by the soft matrices
    /// (`D_r E D_c` block-wise), while positions and attention flags follow
    /// the hard projections of `d_r` and `d_c`.
    ///
    /// `D_c` multiplies from the right, so a permutation matrix `P_c` puts
    /// source column `j'` at `j` when `P_c[j'][j] = 1`; the gather order is
    /// the inverse of its row-to-column mapping (see [`col_gather_order`]).
    pub fn mix_soft(
        &self,
        d_r: &DoublyStochastic,
        d_c: &DoublyStochastic,
        mode: PosMode,
    ) -> Result<CellGridInput, InputError> {
        self.check(d_r.dim(), d_c.dim())?;
        if self.rows > 0 && !d_r.is_header_fixed() {
            return Err(InputError::HeaderNotFixed);
        }
        let p_r = project_to_permutation(d_r);
        let p_c = col_gather_order(&project_to_permutation(d_c));
        let mut out = self.apply_hard(&p_r, &p_c, mode)?;
        out.emb = mix_embeddings(self, d_r.matrix(), d_c.matrix());
        Ok(out)
    }
}

/// Gather order of a right-multiplying permutation matrix.
pub fn col_gather_order(p: &Permutation) -> Permutation {
    p.inverse()
}

/// Column stage of the bilinear mix: `C[i'][j] = sum_j' Dc[j'][j] E[i'][j']`.
fn mix_columns(input: &CellGridInput, d_c: &SquareMatrix) -> Vec<f64> {
    let bl = input.block_len();
    let mut out = vec![0.0; input.emb.len()];
    for i in 0..input.rows {
        for j in 0..input.cols {
            let dst = &mut out[input.block(i, j) * bl..][..bl];
            for jp in 0..input.cols {
                let w = d_c.get(jp, j);
                if w == 0.0 {
                    continue;
                }
                for (o, e) in dst.iter_mut().zip(input.cell_emb(i, jp)) {
                    *o += w * e;
                }
            }
        }
    }
    out
}

/// Row stage: `M[i][j] = sum_i' Dr[i][i'] C[i'][j]`.
fn mix_rows(input: &CellGridInput, col_mixed: &[f64], d_r: &SquareMatrix) -> Vec<f64> {
    let bl = input.block_len();
    let row_len = input.cols * bl;
    let mut out = vec![0.0; col_mixed.len()];
    for i in 0..input.rows {
        let dst = &mut out[i * row_len..(i + 1) * row_len];
        for ip in 0..input.rows {
            let w = d_r.get(i, ip);
            if w == 0.0 {
                continue;
            }
            for (o, c) in dst
                .iter_mut()
                .zip(&col_mixed[ip * row_len..(ip + 1) * row_len])
            {
                *o += w * c;
            }
        }
    }
    out
}

fn mix_embeddings(input: &CellGridInput, d_r: &SquareMatrix, d_c: &SquareMatrix) -> Vec<f64> {
    mix_rows(input, &mix_columns(input, d_c), d_r)
}

/// Gradients of `<grad_mixed, D_r E D_c>` with respect to `D_r` and `D_c`,
/// where `E` is the embedding grid of `input`.
pub fn mix_soft_backward(
    input: &CellGridInput,
    d_r: &SquareMatrix,
    d_c: &SquareMatrix,
    grad_mixed: &[f64],
) -> (SquareMatrix, SquareMatrix) {
    let bl = input.block_len();
    let row_len = input.cols * bl;
    let col_mixed = mix_columns(input, d_c);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    let mut g_r = SquareMatrix::zeros(input.rows);
    for i in 0..input.rows {
        for ip in 0..input.rows {
            let v = dot(
                &grad_mixed[i * row_len..(i + 1) * row_len],
                &col_mixed[ip * row_len..(ip + 1) * row_len],
            );
            g_r.set(i, ip, v);
        }
    }

    // Gradient flowing into the column-mixed grid.
    let mut g_col = vec![0.0; grad_mixed.len()];
    for ip in 0..input.rows {
        let dst = &mut g_col[ip * row_len..(ip + 1) * row_len];
        for i in 0..input.rows {
            let w = d_r.get(i, ip);
            if w == 0.0 {
                continue;
            }
            for (o, g) in dst
                .iter_mut()
                .zip(&grad_mixed[i * row_len..(i + 1) * row_len])
            {
                *o += w * g;
            }
        }
    }

    let mut g_c = SquareMatrix::zeros(input.cols);
    for ip in 0..input.rows {
        for j in 0..input.cols {
            let g = &g_col[input.block(ip, j) * bl..][..bl];
            for jp in 0..input.cols {
                let v = g_c.get(jp, j) + dot(g, input.cell_emb(ip, jp));
                g_c.set(jp, j, v);
            }
        }
    }
    (g_r, g_c)
}

/// A table grid plus the question and answer token ids fed after it.
#[derive(Debug, Clone, PartialEq)]
pub struct PermutedInput {
    pub grid: CellGridInput,
    pub question: Vec<u32>,
    pub answer: Vec<u32>,
}
