//! Synthetic lookup corpus: "What is the <column> of <row key>?" over small
//! random tables.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::table::{Table, TqaExample, DEFAULT_ORDER_KEYWORDS};

const ENTITIES: &[&str] = &[
    "alder", "birch", "cedar", "dogwood", "elm", "fir", "ginkgo", "hazel", "ivy", "juniper",
    "kapok", "larch", "maple", "nutmeg", "oak", "pine", "quince", "rowan", "spruce", "teak",
    "upas", "vine", "willow", "yew",
];

const ATTRIBUTES: &[&str] = &[
    "height", "width", "age", "weight", "price", "count", "rank", "score", "depth", "speed",
    "volume", "yield",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_examples: usize,
    /// Data rows per table.
    pub n_rows: usize,
    /// Columns per table, the key column included.
    pub n_cols: usize,
    /// Size of the row-key pool drawn from.
    pub n_entities: usize,
    /// Size of the attribute pool drawn from.
    pub n_attributes: usize,
    /// Cell values are integers in `value_min..value_max`.
    pub value_min: u32,
    pub value_max: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_examples: 50,
            n_rows: 4,
            n_cols: 4,
            n_entities: 24,
            n_attributes: 12,
            value_min: 10,
            value_max: 100,
            seed: 0,
        }
    }
}

/// Generate a lookup corpus. Every question is order-insensitive by
/// construction.
pub fn synthetic_lookup_corpus(cfg: &SynthConfig) -> Vec<TqaExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let entities = &ENTITIES[..cfg.n_entities.clamp(cfg.n_rows.max(1), ENTITIES.len())];
    let attrs = &ATTRIBUTES[..cfg
        .n_attributes
        .clamp(cfg.n_cols.saturating_sub(1), ATTRIBUTES.len())];
    (0..cfg.n_examples)
        .map(|e| {
            let keys: Vec<&str> = entities
                .choose_multiple(&mut rng, cfg.n_rows)
                .copied()
                .collect();
            let cols: Vec<&str> = attrs
                .choose_multiple(&mut rng, cfg.n_cols.saturating_sub(1))
                .copied()
                .collect();
            let header: Vec<String> = std::iter::once("name")
                .chain(cols.iter().copied())
                .map(str::to_owned)
                .collect();
            let rows: Vec<Vec<String>> = keys
                .iter()
                .map(|k| {
                    std::iter::once(k.to_string())
                        .chain(
                            cols.iter()
                                .map(|_| rng.gen_range(cfg.value_min..cfg.value_max).to_string()),
                        )
                        .collect()
                })
                .collect();
            let (r, c) = if cfg.n_rows == 0 || cols.is_empty() {
                (None, 0)
            } else {
                (
                    Some(rng.gen_range(0..cfg.n_rows)),
                    rng.gen_range(1..cfg.n_cols),
                )
            };
            let (question, answer) = match r {
                Some(r) => (
                    format!("What is the {} of {}?", header[c], keys[r]),
                    rows[r][c].clone(),
                ),
                None => ("What is listed?".to_owned(), header[0].clone()),
            };
            let table = Table::new(format!("synth-{e:04}"), header, rows)
                .expect("rectangular by construction");
            TqaExample::new(table, question, answer, DEFAULT_ORDER_KEYWORDS)
                .expect("non-empty question")
        })
        .collect()
}
