//! Child and parent adjacency targets for a small dependency tree, and the
//! same tree projected onto subword pieces.

use depformer::syntax::{bpe_adjust_heads, AdjacencyMatrices, DependencyTree};

fn show(title: &str, rows: &[Vec<f64>], tokens: &[String]) {
    println!("{title}");
    for (tok, row) in tokens.iter().zip(rows) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:5.2}")).collect();
        println!("  {tok:>8} | {}", cells.join(" "));
    }
}

fn main() -> depformer::Result<()> {
    let tokens: Vec<String> = ["the", "old", "man", "the", "boat", "quickly", "steered"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    // 1-based heads, 0 marks the root
    let tree = DependencyTree::new(tokens.clone(), vec![3, 3, 7, 5, 7, 7, 0])?;
    let m = AdjacencyMatrices::from_tree(&tree);
    show("child matrix (row i spreads 1/n_i over its children; leaves point at themselves)", &m.w_child.rows_f64(), &tokens);
    show("parent matrix (row i is one-hot on its head; the root points at itself)", &m.w_parent.rows_f64(), &tokens);

    let pieces = [1, 1, 1, 1, 2, 1, 3];
    let split = bpe_adjust_heads(&tree, &pieces)?;
    println!("\nafter splitting 'boat' in two and 'steered' in three:");
    for (i, (tok, head)) in split.tokens().iter().zip(split.heads()).enumerate() {
        println!("  {:>2} {tok:<10} -> {head}", i + 1);
    }
    Ok(())
}
