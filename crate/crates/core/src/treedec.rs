//! Recovering dependency trees from parent-head attention.
//!
//! Scores are laid out like the parent supervision matrix: `scores[i][j]`
//! is the weight of token `j` being the parent of token `i`, and the
//! diagonal entry `scores[i][i]` is the weight of token `i` attaching to a
//! virtual root. Returned head vectors are 1-based with `0` for the root.

use crate::error::{Error, Result};
use crate::numerics::PROB_EPS;
use crate::syntax::validate_heads;

/// Row-stochastic parent attention for one sentence, padding stripped.
#[derive(Clone, Debug, PartialEq)]
pub struct ParentScoreMatrix {
    rows: Vec<Vec<f64>>,
}

impl ParentScoreMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let m = rows.len();
        if m == 0 {
            return Err(Error::Empty("score matrix"));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != m {
                return Err(Error::shape("parent scores", format!("row {i} has {} of {m} columns", row.len())));
            }
            if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::shape("parent scores", format!("row {i} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::shape("parent scores", format!("row {i} sums to {s}")));
            }
        }
        Ok(ParentScoreMatrix { rows })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `ln(p + ε)` of every entry.
    pub fn log_weights(&self) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| r.iter().map(|&p| (p + PROB_EPS).ln()).collect())
            .collect()
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Row-wise argmax; a self-argmax means root. Ties go to the lower index.
/// The result need not be a tree.
pub fn predict_parents(scores: &ParentScoreMatrix) -> Vec<usize> {
    scores
        .rows()
        .iter()
        .enumerate()
        .map(|(i, row)| match argmax(row) {
            j if j == i => 0,
            j => j + 1,
        })
        .collect()
}

/// Maximum spanning arborescence under probability scores, using log weights.
pub fn chu_liu_edmonds(scores: &ParentScoreMatrix) -> Vec<usize> {
    max_spanning_arborescence(&scores.log_weights())
}

/// Argmax parents when they already form a tree, otherwise the maximum
/// spanning arborescence.
pub fn decode_tree(scores: &ParentScoreMatrix) -> Vec<usize> {
    let greedy = predict_parents(scores);
    if validate_heads(&greedy).is_ok() {
        greedy
    } else {
        chu_liu_edmonds(scores)
    }
}

/// Sum of edge weights of a head vector under the score layout above.
pub fn tree_weight(weights: &[Vec<f64>], heads: &[usize]) -> f64 {
    heads
        .iter()
        .enumerate()
        .map(|(i, &h)| if h == 0 { weights[i][i] } else { weights[i][h - 1] })
        .sum()
}

/// Chu-Liu/Edmonds over finite additive weights, constrained to a single
/// token attached to the virtual root.
pub fn max_spanning_arborescence(weights: &[Vec<f64>]) -> Vec<usize> {
    let m = weights.len();
    assert!(m > 0 && weights.iter().all(|r| r.len() == m), "square weights");
    // node 0 is the virtual root, token i is node i + 1; score[dep][head]
    let n = m + 1;
    let mut score = vec![vec![f64::NEG_INFINITY; n]; n];
    for d in 1..n {
        for h in 0..n {
            if h == 0 {
                score[d][0] = weights[d - 1][d - 1];
            } else if h != d {
                score[d][h] = weights[d - 1][h - 1];
            }
        }
    }

    let free = contract(&score);
    let attached = (1..n).filter(|&d| free[d] == 0).count();
    if attached == 1 {
        return free[1..].to_vec();
    }

    let mut best: Option<(f64, Vec<usize>)> = None;
    for r in 1..n {
        let mut s = score.clone();
        for (d, row) in s.iter_mut().enumerate().skip(1) {
            if d != r {
                row[0] = f64::NEG_INFINITY;
            }
        }
        let heads = contract(&s)[1..].to_vec();
        let w = tree_weight(weights, &heads);
        if best.as_ref().map_or(true, |(bw, _)| w > *bw) {
            best = Some((w, heads));
        }
    }
    best.expect("at least one token").1
}

/// Nodes on a cycle of the head graph (node 0 excluded), sorted.
fn find_cycle(head: &[usize]) -> Option<Vec<usize>> {
    let n = head.len();
    let mut color = vec![0u8; n];
    color[0] = 2;
    for start in 1..n {
        let mut path = Vec::new();
        let mut v = start;
        while color[v] == 0 {
            color[v] = 1;
            path.push(v);
            v = head[v];
        }
        if color[v] == 1 {
            let pos = path.iter().position(|&p| p == v).expect("on path");
            let mut cycle = path[pos..].to_vec();
            cycle.sort_unstable();
            return Some(cycle);
        }
        for p in path {
            color[p] = 2;
        }
    }
    None
}

fn contract(score: &[Vec<f64>]) -> Vec<usize> {
    let n = score.len();
    let mut head = vec![0usize; n];
    for d in 1..n {
        let mut best = None;
        for h in 0..n {
            if h == d || score[d][h] == f64::NEG_INFINITY {
                continue;
            }
            if best.map_or(true, |b: usize| score[d][h] > score[d][b]) {
                best = Some(h);
            }
        }
        head[d] = best.expect("every node has an admissible parent");
    }
    let Some(cycle) = find_cycle(&head) else {
        return head;
    };

    let mut in_cycle = vec![false; n];
    for &v in &cycle {
        in_cycle[v] = true;
    }
    let keep: Vec<usize> = (0..n).filter(|&v| !in_cycle[v]).collect();
    let c = keep.len();
    let mut sub = vec![vec![f64::NEG_INFINITY; c + 1]; c + 1];
    // cycle member that is the best parent for an outside dependent
    let mut leave_to = vec![0usize; c];
    // cycle member that the best edge from an outside head enters
    let mut enter_at = vec![0usize; c];
    for (kd, &d) in keep.iter().enumerate() {
        for (kh, &h) in keep.iter().enumerate() {
            sub[kd][kh] = score[d][h];
        }
        let mut best = f64::NEG_INFINITY;
        for &h in &cycle {
            if score[d][h] > best {
                best = score[d][h];
                leave_to[kd] = h;
            }
        }
        sub[kd][c] = best;
    }
    for (kh, &h) in keep.iter().enumerate() {
        let mut best = f64::NEG_INFINITY;
        for &d in &cycle {
            let gain = score[d][h] - score[d][head[d]];
            if gain > best {
                best = gain;
                enter_at[kh] = d;
            }
        }
        sub[c][kh] = best;
    }

    let sub_head = contract(&sub);
    let mut out = head;
    for (kd, &d) in keep.iter().enumerate().skip(1) {
        let hk = sub_head[kd];
        out[d] = if hk == c { leave_to[kd] } else { keep[hk] };
    }
    let hk = sub_head[c];
    out[enter_at[hk]] = keep[hk];
    out
}

/// Fraction of tokens whose predicted head equals the gold head.
pub fn uas(predicted: &[usize], gold: &[usize]) -> Result<f64> {
    let (correct, total) = attachment_counts(predicted, gold)?;
    if total == 0 {
        return Err(Error::Empty("uas of an empty sentence"));
    }
    Ok(correct as f64 / total as f64)
}

/// `(correct, total)` head counts for micro-averaging.
pub fn attachment_counts(predicted: &[usize], gold: &[usize]) -> Result<(usize, usize)> {
    if predicted.len() != gold.len() {
        return Err(Error::Alignment(format!(
            "{} predicted heads vs {} gold heads",
            predicted.len(),
            gold.len()
        )));
    }
    let correct = predicted.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok((correct, gold.len()))
}
