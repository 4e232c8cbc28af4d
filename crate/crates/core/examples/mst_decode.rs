//! Tree recovery from a parent-attention matrix: row argmax when it already
//! forms a tree, maximum spanning arborescence otherwise.

use depformer::treedec::{chu_liu_edmonds, decode_tree, max_spanning_arborescence, predict_parents, tree_weight, ParentScoreMatrix};

fn main() -> depformer::Result<()> {
    // tokens 1 and 2 prefer each other, and both 3 and 4 look like roots
    let rows = vec![
        vec![0.10, 0.70, 0.10, 0.10],
        vec![0.60, 0.10, 0.20, 0.10],
        vec![0.05, 0.05, 0.80, 0.10],
        vec![0.10, 0.10, 0.20, 0.60],
    ];
    let scores = ParentScoreMatrix::new(rows)?;
    let greedy = predict_parents(&scores);
    println!("row argmax heads:        {greedy:?} (cycle 1<->2, two roots)");
    let tree = chu_liu_edmonds(&scores);
    println!("arborescence heads:      {tree:?}");
    println!("log-weight of that tree: {:.4}", tree_weight(&scores.log_weights(), &tree));
    println!("decode_tree picks:       {:?}", decode_tree(&scores));

    let w = vec![vec![5.0, 8.0], vec![10.0, 1.0]];
    let best = max_spanning_arborescence(&w);
    println!("\nadditive 2-node example: heads {best:?}, weight {}", tree_weight(&w, &best));
    Ok(())
}
