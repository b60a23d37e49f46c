//! Sinkhorn relaxation, header lifting, entropy and Hungarian projection on
//! a small score matrix.

use tabperm::perm::{
    lift_header_fixed, matrix_entropy, project_to_permutation, sinkhorn, SquareMatrix,
};

fn show(label: &str, m: &SquareMatrix) {
    println!("{label}:");
    for row in m.to_rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:6.3}")).collect();
        println!("  [{}]", cells.join(" "));
    }
}

fn main() {
    let theta = SquareMatrix::from_rows(&[
        vec![0.2, 1.5, -0.3],
        vec![1.1, 0.0, 0.4],
        vec![-0.5, 0.3, 1.8],
    ])
    .unwrap();

    for iters in [1, 5, 20] {
        let d = sinkhorn(&theta, iters).unwrap();
        println!(
            "{iters:>2} iterations: marginal deviation {:.2e}, entropy {:.4}",
            d.matrix().marginal_deviation(),
            matrix_entropy(&d)
        );
    }

    let d = sinkhorn(&theta, 20).unwrap();
    show("soft permutation", d.matrix());
    let p = project_to_permutation(&d);
    println!("hard projection: {:?}", p.mapping());
    show("lifted (header row fixed)", lift_header_fixed(&d).matrix());

    let sharp = SquareMatrix::from_rows(&[
        vec![0.0, 30.0, 0.0],
        vec![30.0, 0.0, 0.0],
        vec![0.0, 0.0, 30.0],
    ])
    .unwrap();
    let d = sinkhorn(&sharp, 20).unwrap();
    println!("near a vertex the entropy vanishes: {:.2e}", matrix_entropy(&d));
}
