//! Parse a linearized table, apply a row/column layout and print the result.

use tabperm::harness::fixtures::{sports_attack_layout, sports_example};
use tabperm::table::{apply_permutation, attack_space_size};

fn main() {
    let ex = sports_example();
    println!("question: {}", ex.question);
    println!("answer:   {}\n", ex.answer);
    println!("{}\n", ex.table.linearize());

    let (rows, cols) = sports_attack_layout();
    println!("rows {:?}, columns {:?}\n", rows.mapping(), cols.mapping());
    let permuted = apply_permutation(&ex.table, &rows, &cols).unwrap();
    println!("{}\n", permuted.linearize());

    println!(
        "{} layouts for a {}x{} table",
        attack_space_size(ex.table.n_rows(), ex.table.n_cols()),
        ex.table.n_rows(),
        ex.table.n_cols()
    );
}
