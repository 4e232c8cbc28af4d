//! Dependency trees and the attention supervision built from them.
//!
//! A tree over `m` tokens yields two `m x m` targets:
//!
//! * the child matrix, where row `i` spreads unit mass evenly over the
//!   children of token `i`, and a leaf puts its mass on itself;
//! * the parent matrix, where row `i` is one-hot on the parent of token `i`
//!   and the root points at itself.
//!
//! The supervised encoder heads are trained toward these rows with a
//! cross-entropy term each.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor, Var};

/// Tokens plus 1-based parent indices; `0` marks the root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencyTree {
    tokens: Vec<String>,
    heads: Vec<usize>,
}

impl DependencyTree {
    pub fn new(tokens: Vec<String>, heads: Vec<usize>) -> Result<Self> {
        if tokens.len() != heads.len() {
            return Err(Error::InvalidTree(format!(
                "{} tokens but {} heads",
                tokens.len(),
                heads.len()
            )));
        }
        validate_heads(&heads)?;
        Ok(DependencyTree { tokens, heads })
    }

    /// Tree with placeholder token strings.
    pub fn from_heads(heads: Vec<usize>) -> Result<Self> {
        let tokens = (1..=heads.len()).map(|i| format!("w{i}")).collect();
        Self::new(tokens, heads)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn heads(&self) -> &[usize] {
        &self.heads
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    /// 0-based index of the root token.
    pub fn root(&self) -> usize {
        self.heads.iter().position(|&h| h == 0).expect("validated tree has a root")
    }

    /// 0-based children of each token, in increasing order.
    pub fn children(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.len()];
        for (i, &h) in self.heads.iter().enumerate() {
            if h > 0 {
                out[h - 1].push(i);
            }
        }
        out
    }
}

/// Checks single root, range and acyclicity of a 1-based head vector.
pub fn validate_heads(heads: &[usize]) -> Result<()> {
    let m = heads.len();
    if m == 0 {
        return Err(Error::InvalidTree("empty sentence".into()));
    }
    let roots = heads.iter().filter(|&&h| h == 0).count();
    if roots == 0 {
        return Err(Error::InvalidTree("no root".into()));
    }
    if roots > 1 {
        return Err(Error::InvalidTree(format!("{roots} roots")));
    }
    for (i, &h) in heads.iter().enumerate() {
        if h > m {
            return Err(Error::InvalidTree(format!("head {h} of token {} out of range", i + 1)));
        }
        if h == i + 1 {
            return Err(Error::InvalidTree(format!("token {} heads itself", i + 1)));
        }
    }
    // 0 = unvisited, 1 = on current path, 2 = reaches root
    let mut state = vec![0u8; m];
    for start in 0..m {
        let mut path = Vec::new();
        let mut cur = start;
        loop {
            match state[cur] {
                2 => break,
                1 => {
                    return Err(Error::InvalidTree(format!("cycle through token {}", cur + 1)));
                }
                _ => {}
            }
            state[cur] = 1;
            path.push(cur);
            match heads[cur] {
                0 => break,
                h => cur = h - 1,
            }
        }
        for p in path {
            state[p] = 2;
        }
    }
    Ok(())
}

/// Child and parent supervision targets for one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencyMatrices {
    pub w_child: Tensor<f64>,
    pub w_parent: Tensor<f64>,
}

impl AdjacencyMatrices {
    pub fn from_tree(tree: &DependencyTree) -> Self {
        AdjacencyMatrices {
            w_child: build_child_matrix(tree),
            w_parent: build_parent_matrix(tree),
        }
    }
}

/// Row `i` puts `1/n_i` on each of the `n_i` children of token `i`; a
/// token without children (including a lone root) puts 1 on itself.
pub fn build_child_matrix(tree: &DependencyTree) -> Tensor<f64> {
    let m = tree.len();
    let mut data = vec![0.0; m * m];
    for (i, kids) in tree.children().iter().enumerate() {
        if kids.is_empty() {
            data[i * m + i] = 1.0;
        } else {
            let w = 1.0 / kids.len() as f64;
            for &j in kids {
                data[i * m + j] = w;
            }
        }
    }
    Tensor::new(&[m, m], data).expect("square matrix")
}

/// Row `i` is one-hot on the parent of token `i`; the root row is one-hot
/// on the diagonal.
pub fn build_parent_matrix(tree: &DependencyTree) -> Tensor<f64> {
    let m = tree.len();
    let mut data = vec![0.0; m * m];
    for (i, &h) in tree.heads().iter().enumerate() {
        let col = if h == 0 { i } else { h - 1 };
        data[i * m + col] = 1.0;
    }
    Tensor::new(&[m, m], data).expect("square matrix")
}

/// Projects a word-level tree onto subword pieces. `pieces[w]` is the number
/// of pieces word `w` was split into. The first piece of a word takes the
/// word's attachment (re-targeted to the first piece of the head word); the
/// remaining pieces attach to their own word's first piece.
pub fn bpe_adjust_heads(tree: &DependencyTree, pieces: &[usize]) -> Result<DependencyTree> {
    if pieces.len() != tree.len() {
        return Err(Error::Alignment(format!(
            "{} piece counts for {} words",
            pieces.len(),
            tree.len()
        )));
    }
    if let Some(w) = pieces.iter().position(|&c| c == 0) {
        return Err(Error::Alignment(format!("word {} has zero pieces", w + 1)));
    }
    // 1-based index of each word's first piece
    let mut first = Vec::with_capacity(pieces.len());
    let mut next = 1;
    for &c in pieces {
        first.push(next);
        next += c;
    }
    let mut tokens = Vec::with_capacity(next - 1);
    let mut heads = Vec::with_capacity(next - 1);
    for (w, &c) in pieces.iter().enumerate() {
        let head = match tree.heads()[w] {
            0 => 0,
            h => first[h - 1],
        };
        for k in 0..c {
            let form = &tree.tokens()[w];
            tokens.push(if c == 1 { form.clone() } else { format!("{form}#{}", k + 1) });
            heads.push(if k == 0 { head } else { first[w] });
        }
    }
    DependencyTree::new(tokens, heads)
}

/// Uniformly shuffled attachment order: each token after the first picks a
/// parent among the tokens already placed. Produces non-projective trees too.
pub fn random_tree<R: Rng + ?Sized>(m: usize, rng: &mut R) -> DependencyTree {
    assert!(m > 0);
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(rng);
    let mut heads = vec![0; m];
    for k in 1..m {
        let parent = order[rng.gen_range(0..k)];
        heads[order[k]] = parent + 1;
    }
    DependencyTree::from_heads(heads).expect("construction is a tree")
}

/// Every valid head vector of length `m`, by brute-force filtering of all
/// `(m+1)^m` assignments.
pub fn enumerate_trees(m: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut heads = vec![0usize; m];
    loop {
        if validate_heads(&heads).is_ok() {
            out.push(heads.clone());
        }
        let mut i = 0;
        loop {
            if i == m {
                return out;
            }
            heads[i] += 1;
            if heads[i] <= m {
                break;
            }
            heads[i] = 0;
            i += 1;
        }
    }
}

/// Loss components for one batch. Supervision terms are per source token,
/// the translation term per target token.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub translation: f64,
    pub child: f64,
    pub parent: f64,
    pub joint: f64,
}

/// `L + alpha * L_c + beta * L_p`.
pub fn joint_loss(translation: f64, child: f64, parent: f64, alpha: f64, beta: f64) -> Result<f64> {
    for (v, name) in [
        (translation, "translation"),
        (child, "child"),
        (parent, "parent"),
        (alpha, "alpha"),
        (beta, "beta"),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name));
        }
    }
    Ok(translation + alpha * child + beta * parent)
}

/// Attention cross-entropy of the child and parent heads against their
/// padded targets `(B, m, m)`. Rows with `row_mask == false` are padding.
/// Both sums are divided by the number of real source tokens.
pub fn supervision_losses<'t, T: Scalar>(
    w_child: Arc<Tensor<T>>,
    w_parent: Arc<Tensor<T>>,
    p_child: Var<'t, T>,
    p_parent: Var<'t, T>,
    row_mask: &[bool],
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let tokens = row_mask.iter().filter(|&&b| b).count();
    if tokens == 0 {
        return Err(Error::Empty("batch has no source tokens"));
    }
    let inv = 1.0 / tokens as f64;
    let lc = p_child.cross_entropy_rows(w_child, row_mask)?.scale(inv);
    let lp = p_parent.cross_entropy_rows(w_parent, row_mask)?.scale(inv);
    Ok((lc, lp))
}

/// Sum over rows of the entropy of each target row: the floor of the
/// cross-entropy any prediction can reach.
pub fn row_entropy_sum(target: &Tensor<f64>) -> f64 {
    target
        .data()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Seven-word tree shaped like the worked example: word 5 is the root
    /// with three children, word 7 has the single child 6.
    pub(crate) fn worked_example() -> DependencyTree {
        DependencyTree::from_heads(vec![2, 5, 4, 5, 0, 7, 5]).unwrap()
    }

    #[test]
    fn worked_example_child_rows() {
        let wc = build_child_matrix(&worked_example()).rows_f64();
        let third = 1.0 / 3.0;
        assert_eq!(wc[4], vec![0.0, third, 0.0, third, 0.0, 0.0, third]);
        assert_eq!(wc[6][5], 1.0);
        assert_eq!(wc[5][5], 1.0);
    }

    #[test]
    fn worked_example_parent_rows() {
        let wp = build_parent_matrix(&worked_example()).rows_f64();
        assert_eq!(wp[4], vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(wp[5][6], 1.0);
    }

    #[test]
    fn small_hand_examples() {
        let t = DependencyTree::from_heads(vec![2, 0, 2, 3]).unwrap();
        let wc = build_child_matrix(&t).rows_f64();
        assert_eq!(wc[1], vec![0.5, 0.0, 0.5, 0.0]);
        assert_eq!(wc[2], vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(wc[0], vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(wc[3], vec![0.0, 0.0, 0.0, 1.0]);
        let wp = build_parent_matrix(&t).rows_f64();
        let argmax: Vec<usize> = wp.iter().map(|r| r.iter().position(|&v| v == 1.0).unwrap()).collect();
        assert_eq!(argmax, vec![1, 1, 1, 2]);

        let single = DependencyTree::from_heads(vec![0]).unwrap();
        assert_eq!(build_child_matrix(&single).data(), &[1.0]);
        assert_eq!(build_parent_matrix(&single).data(), &[1.0]);
    }

    #[test]
    fn invalid_trees() {
        assert!(DependencyTree::from_heads(vec![2, 1]).is_err());
        assert!(DependencyTree::from_heads(vec![0, 0]).is_err());
        assert!(DependencyTree::from_heads(vec![0, 3]).is_err());
        assert!(DependencyTree::from_heads(vec![0, 3, 2]).is_err());
        assert!(DependencyTree::from_heads(vec![]).is_err());
        assert!(DependencyTree::new(vec!["a".into()], vec![0, 1]).is_err());
    }

    #[test]
    fn enumeration_counts() {
        // rooted labelled trees with a single root child: n^(n-1)
        for (m, count) in [(1, 1), (2, 2), (3, 9), (4, 64), (5, 625)] {
            assert_eq!(enumerate_trees(m).len(), count, "m = {m}");
        }
    }

    #[test]
    fn bpe_examples() {
        let t = DependencyTree::new(vec!["A".into(), "B".into()], vec![2, 0]).unwrap();
        assert_eq!(bpe_adjust_heads(&t, &[1, 1]).unwrap(), t);
        assert_eq!(bpe_adjust_heads(&t, &[1, 2]).unwrap().heads(), &[2, 0, 2]);
        assert_eq!(bpe_adjust_heads(&t, &[2, 1]).unwrap().heads(), &[3, 1, 0]);
        assert!(bpe_adjust_heads(&t, &[1]).is_err());
        assert!(bpe_adjust_heads(&t, &[0, 1]).is_err());
    }

    #[test]
    fn joint_loss_arithmetic() {
        assert_eq!(joint_loss(1.2345, 7.0, 9.0, 0.0, 0.0).unwrap(), 1.2345);
        assert!((joint_loss(2.0, 1.0, 1.0, 0.4, 0.4).unwrap() - 2.8).abs() < 1e-15);
        assert!((joint_loss(0.0, 3.0, 0.0, 0.4, 0.4).unwrap() - 1.2).abs() < 1e-15);
        assert!(joint_loss(f64::NAN, 0.0, 0.0, 0.4, 0.4).is_err());
        assert!(joint_loss(1.0, f64::INFINITY, 0.0, 0.4, 0.4).is_err());
    }

    fn batched(rows: &[Vec<f64>]) -> Arc<Tensor<f64>> {
        let m = rows.len();
        Arc::new(Tensor::from_rows(rows).unwrap().reshape(&[1, m, m]).unwrap())
    }

    #[test]
    fn supervision_loss_examples() {
        let tape = Tape::<f64>::new();
        let wp = batched(&[
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
        ]);
        let exact = tape.constant(wp.as_ref().clone());
        let uniform = tape.constant(Tensor::from_f64(&[1, 4, 4], &[0.25; 16]).unwrap());
        let (_, lp) = supervision_losses(wp.clone(), wp.clone(), uniform, exact, &[true; 4]).unwrap();
        assert_eq!(lp.item(), 0.0);
        let (_, lp) = supervision_losses(wp.clone(), wp.clone(), exact, uniform, &[true; 4]).unwrap();
        // per-token normalisation: 4 log 4 over 4 tokens
        assert!((lp.item() * 4.0 - 4.0 * 4f64.ln()).abs() < 1e-12);

        // one row whose prediction equals its three-way child target
        let third = 1.0 / 3.0;
        let wc = batched(&[vec![third, third, third], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let pred = tape.constant(wc.as_ref().clone());
        let (lc, _) = supervision_losses(wc.clone(), wc.clone(), pred, pred, &[true, false, false]).unwrap();
        assert!((lc.item() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn all_small_trees_have_stochastic_rows() {
        for m in 1..=6 {
            for heads in enumerate_trees(m) {
                let t = DependencyTree::from_heads(heads).unwrap();
                assert_rows_ok(&t);
            }
        }
    }

    pub(crate) fn assert_rows_ok(t: &DependencyTree) {
        let m = t.len();
        for row in build_child_matrix(t).rows_f64() {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "child row sums to {s}");
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        for row in build_parent_matrix(t).rows_f64() {
            assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(row.iter().filter(|&&v| v == 0.0).count(), m - 1);
        }
    }

    /// Projected gradient descent on the simplex for a single row should
    /// bottom out at the row entropy.
    #[test]
    fn cross_entropy_minimum_is_row_entropy() {
        let target = [0.5, 0.25, 0.25, 0.0];
        let entropy = row_entropy_sum(&Tensor::from_f64(&[1, 4], &target).unwrap());
        let mut logits = [0.3, -0.2, 0.9, 0.1];
        for _ in 0..20000 {
            let z: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
            let p: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
            for j in 0..4 {
                logits[j] -= 0.5 * (p[j] - target[j]);
            }
        }
        let z: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
        let ce: f64 = target
            .iter()
            .zip(&logits)
            .filter(|(t, _)| **t > 0.0)
            .map(|(t, l)| -t * (l.exp() / z).ln())
            .sum();
        assert!(ce >= entropy - 1e-12);
        assert!(ce - entropy < 1e-3, "ce {ce} vs entropy {entropy}");
    }

    proptest! {
        #[test]
        fn bpe_output_is_a_tree(seed in any::<u64>(), m in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tree = random_tree(m, &mut rng);
            let pieces: Vec<usize> = (0..m).map(|_| rng.gen_range(1..4)).collect();
            let out = bpe_adjust_heads(&tree, &pieces).unwrap();
            prop_assert_eq!(out.len(), pieces.iter().sum::<usize>());
            prop_assert!(validate_heads(out.heads()).is_ok());
        }

        #[test]
        fn random_trees_are_valid(seed in any::<u64>(), m in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_tree(m, &mut rng);
            assert_rows_ok(&t);
        }
    }
}
