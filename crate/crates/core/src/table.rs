//! Tables, legal layout permutations and pipe linearization.

use std::fmt;

use num_bigint::BigUint;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::perm::{PermError, Permutation};

/// Candidate keywords marking a question as dependent on presentation order.
pub const DEFAULT_ORDER_KEYWORDS: &[&str] = &[
    "first",
    "last",
    "top",
    "bottom",
    "initial",
    "final",
    "above",
    "below",
    "preceding",
    "following",
];

#[derive(Debug, Error, PartialEq)]
pub enum TableError {
    #[error("table needs at least one column")]
    NoColumns,
    #[error("row {row} has {got} cells, expected {expected}")]
    Ragged {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("{what} permutation has length {got}, table has {expected}")]
    Shape {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error(transparent)]
    Perm(#[from] PermError),
}

/// A header row plus `n x m` data cells.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawTable", into = "RawTable")]
pub struct Table {
    id: String,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct RawTable {
    id: String,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl TryFrom<RawTable> for Table {
    type Error = TableError;
    fn try_from(raw: RawTable) -> Result<Self, TableError> {
        Table::new(raw.id, raw.header, raw.rows)
    }
}

impl From<Table> for RawTable {
    fn from(t: Table) -> Self {
        RawTable {
            id: t.id,
            header: t.header,
            rows: t.rows,
        }
    }
}

impl Table {
    pub fn new(
        id: impl Into<String>,
        header: Vec<String>,
        rows: Vec<Vec<String>>,
    ) -> Result<Self, TableError> {
        if header.is_empty() {
            return Err(TableError::NoColumns);
        }
        let m = header.len();
        if let Some((row, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != m) {
            return Err(TableError::Ragged {
                row,
                got: r.len(),
                expected: m,
            });
        }
        Ok(Self {
            id: id.into(),
            header,
            rows,
        })
    }

    /// Build from a grid whose first row is the header.
    pub fn from_grid(
        id: impl Into<String>,
        mut grid: Vec<Vec<String>>,
    ) -> Result<Self, TableError> {
        if grid.is_empty() {
            return Err(TableError::NoColumns);
        }
        let header = grid.remove(0);
        Self::new(id, header, grid)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn header(&self) -> &[String] {
        &self.header
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    /// Number of data rows.
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.header.len()
    }

    /// Header followed by data rows.
    pub fn to_grid(&self) -> Vec<Vec<String>> {
        std::iter::once(self.header.clone())
            .chain(self.rows.iter().cloned())
            .collect()
    }

    /// Cell of the full grid, where row 0 is the header.
    pub fn grid_cell(&self, row: usize, col: usize) -> &str {
        if row == 0 {
            &self.header[col]
        } else {
            &self.rows[row - 1][col]
        }
    }

    /// Pipe-separated serialization, header first, one line per row.
    pub fn linearize(&self) -> String {
        std::iter::once(&self.header)
            .chain(&self.rows)
            .map(|row| {
                let mut line = String::new();
                for cell in row {
                    escape_cell(cell, &mut line);
                    line.push('|');
                }
                line
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Inverse of [`Table::linearize`].
    pub fn parse_linearized(id: impl Into<String>, text: &str) -> Result<Self, TableError> {
        let grid: Vec<Vec<String>> = text.split('\n').map(split_line).collect();
        Self::from_grid(id, grid)
    }
}

impl fmt::Display for Table {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.linearize())
    }
}

fn escape_cell(cell: &str, out: &mut String) {
    for ch in cell.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '|' => out.push_str("\\|"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
}

fn split_line(line: &str) -> Vec<String> {
    let mut cells = Vec::new();
    let mut cur = String::new();
    let mut chars = line.chars();
    while let Some(c) = chars.next() {
        match c {
            '\\' => match chars.next() {
                Some('n') => cur.push('\n'),
                Some(other) => cur.push(other),
                None => cur.push('\\'),
            },
            '|' => cells.push(std::mem::take(&mut cur)),
            c => cur.push(c),
        }
    }
    // A line without the trailing pipe still contributes its last cell.
    if !cur.is_empty() {
        cells.push(cur);
    }
    cells
}

/// Reordering of the data rows; the header is not part of the mapping and so
/// can never move. `mapping[i]` is the source row placed at position `i`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RowPerm(pub Permutation);

/// Reordering of columns. `mapping[j]` is the source column placed at `j`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ColPerm(pub Permutation);

macro_rules! perm_newtype {
    ($t:ident) => {
        impl $t {
            pub fn new(mapping: Vec<usize>) -> Result<Self, PermError> {
                Permutation::new(mapping).map(Self)
            }
            pub fn identity(n: usize) -> Self {
                Self(Permutation::identity(n))
            }
            pub fn reversal(n: usize) -> Self {
                Self(Permutation::reversal(n))
            }
            pub fn mapping(&self) -> &[usize] {
                self.0.mapping()
            }
            pub fn len(&self) -> usize {
                self.0.len()
            }
            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }
            pub fn is_identity(&self) -> bool {
                self.0.is_identity()
            }
            pub fn inverse(&self) -> Self {
                Self(self.0.inverse())
            }
            /// Applying `self` and then `next` equals applying `self.then(next)`.
            pub fn then(&self, next: &Self) -> Self {
                Self(self.0.then(&next.0))
            }
        }

        impl std::ops::Index<usize> for $t {
            type Output = usize;
            fn index(&self, i: usize) -> &usize {
                &self.0.mapping()[i]
            }
        }
    };
}

perm_newtype!(RowPerm);
perm_newtype!(ColPerm);

impl RowPerm {
    /// Mapping over the full grid, with index 0 (the header) fixed.
    pub fn with_header(&self) -> Permutation {
        let lifted = std::iter::once(0)
            .chain(self.mapping().iter().map(|&i| i + 1))
            .collect();
        Permutation::new(lifted).expect("lifting a bijection stays a bijection")
    }

    /// Inverse of [`RowPerm::with_header`]. `None` if index 0 moves.
    pub fn from_header_fixed(p: &Permutation) -> Option<Self> {
        let map = p.mapping();
        if map.first() != Some(&0) {
            return None;
        }
        Self::new(map[1..].iter().map(|&i| i - 1).collect()).ok()
    }
}

/// Reorder data rows and columns of `table`. The header keeps position 0 and
/// is only reordered along with its columns.
pub fn apply_permutation(table: &Table, rp: &RowPerm, cp: &ColPerm) -> Result<Table, TableError> {
    if rp.len() != table.n_rows() {
        return Err(TableError::Shape {
            what: "row",
            got: rp.len(),
            expected: table.n_rows(),
        });
    }
    if cp.len() != table.n_cols() {
        return Err(TableError::Shape {
            what: "column",
            got: cp.len(),
            expected: table.n_cols(),
        });
    }
    let pick = |row: &[String]| {
        cp.mapping()
            .iter()
            .map(|&j| row[j].clone())
            .collect::<Vec<_>>()
    };
    Ok(Table {
        id: table.id.clone(),
        header: pick(&table.header),
        rows: rp.mapping().iter().map(|&i| pick(&table.rows[i])).collect(),
    })
}

/// Number of legal layouts, `n! * m!`.
pub fn attack_space_size(n: usize, m: usize) -> BigUint {
    let fact = |k: usize| (1..=k as u64).fold(BigUint::from(1u32), |acc, v| acc * v);
    fact(n) * fact(m)
}

fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_owned)
        .collect()
}

/// True iff any keyword occurs as a whole word (or whole word sequence) in
/// the lowercased question.
pub fn is_order_sensitive<S: AsRef<str>>(question: &str, keywords: &[S]) -> bool {
    let q = words(question);
    keywords.iter().any(|kw| {
        let k = words(kw.as_ref());
        !k.is_empty() && q.windows(k.len()).any(|w| w == k.as_slice())
    })
}

/// Independent uniform row and column orders (Fisher-Yates).
pub fn random_legal_permutation<R: Rng + ?Sized>(
    n: usize,
    m: usize,
    rng: &mut R,
) -> (RowPerm, ColPerm) {
    let mut rows: Vec<usize> = (0..n).collect();
    rows.shuffle(rng);
    let mut cols: Vec<usize> = (0..m).collect();
    cols.shuffle(rng);
    (
        RowPerm::new(rows).expect("shuffled range"),
        ColPerm::new(cols).expect("shuffled range"),
    )
}

/// A (table, question, answer) triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TqaExample {
    pub table: Table,
    pub question: String,
    pub answer: String,
    pub order_sensitive: bool,
}

impl TqaExample {
    pub fn new<S: AsRef<str>>(
        table: Table,
        question: impl Into<String>,
        answer: impl Into<String>,
        keywords: &[S],
    ) -> Result<Self, TableError> {
        let question = question.into();
        let answer = answer.into();
        if question.trim().is_empty() {
            return Err(TableError::Empty("question"));
        }
        if answer.trim().is_empty() {
            return Err(TableError::Empty("answer"));
        }
        let order_sensitive = is_order_sensitive(&question, keywords);
        Ok(Self {
            table,
            question,
            answer,
            order_sensitive,
        })
    }

    pub fn id(&self) -> &str {
        self.table.id()
    }
}

/// One line of a dataset file: `{"id", "table": [[header...], [row...]...], "question", "answer"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub table: Vec<Vec<String>>,
    pub question: String,
    pub answer: String,
}

impl DatasetRecord {
    pub fn into_example<S: AsRef<str>>(self, keywords: &[S]) -> Result<TqaExample, TableError> {
        let table = Table::from_grid(self.id, self.table)?;
        TqaExample::new(table, self.question, self.answer, keywords)
    }
}

impl From<&TqaExample> for DatasetRecord {
    fn from(ex: &TqaExample) -> Self {
        Self {
            id: ex.id().to_owned(),
            table: ex.table.to_grid(),
            question: ex.question.clone(),
            answer: ex.answer.clone(),
        }
    }
}
