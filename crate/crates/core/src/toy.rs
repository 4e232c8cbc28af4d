//! Synthetic head-final language with gold dependency trees and a
//! deterministic reordering translation.
//!
//! Source clauses are `SUBJ OBJ [ADV] VERB` with noun phrases
//! `[DET] ([INT] ADJ){0,2} NOUN`. The verb is the root; both nouns and the
//! adverb attach to it; determiners and adjectives attach to their noun and
//! an intensifier attaches to the adjective after it. The target puts the
//! verb second and the nouns before their modifiers:
//! `SUBJ' VERB' [ADV'] OBJ'` with noun phrases `[DET'] NOUN' ([INT'] ADJ')*`.

use std::collections::HashSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use serde::Serialize;

use crate::commands::{predict_heads, CHUNK};
use crate::data::{make_batch, ParallelExample, Vocabulary};
use crate::error::Result;
use crate::model::{SupervisionConfig, Transformer};
use crate::numerics::Scalar;
use crate::syntax::{build_child_matrix, row_entropy_sum, DependencyTree};
use crate::treedec::attachment_counts;

const DETS: usize = 3;
const INTS: usize = 2;
const ADJS: usize = 8;
const NOUNS: usize = 12;
const ADVS: usize = 4;
const VERBS: usize = 8;

#[derive(Clone, Debug)]
struct NounPhrase {
    det: Option<usize>,
    mods: Vec<(Option<usize>, usize)>,
    noun: usize,
}

impl NounPhrase {
    fn sample(rng: &mut impl Rng) -> Self {
        let det = rng.gen_bool(0.6).then(|| rng.gen_range(0..DETS));
        let mods = (0..rng.gen_range(0..=2))
            .map(|_| (rng.gen_bool(0.3).then(|| rng.gen_range(0..INTS)), rng.gen_range(0..ADJS)))
            .collect();
        NounPhrase {
            det,
            mods,
            noun: rng.gen_range(0..NOUNS),
        }
    }

    /// Appends source words; heads are 1-based and filled for everything
    /// but the noun, whose position is returned.
    fn emit_source(&self, tokens: &mut Vec<String>, heads: &mut Vec<usize>) -> usize {
        let start = tokens.len();
        let noun_pos = start
            + usize::from(self.det.is_some())
            + self.mods.iter().map(|(i, _)| 1 + usize::from(i.is_some())).sum::<usize>()
            + 1;
        if let Some(d) = self.det {
            tokens.push(format!("det{d}"));
            heads.push(noun_pos);
        }
        for &(int, adj) in &self.mods {
            if let Some(i) = int {
                tokens.push(format!("int{i}"));
                heads.push(tokens.len() + 1);
            }
            tokens.push(format!("adj{adj}"));
            heads.push(noun_pos);
        }
        tokens.push(format!("noun{}", self.noun));
        heads.push(0);
        noun_pos
    }

    fn emit_target(&self, out: &mut Vec<String>) {
        if let Some(d) = self.det {
            out.push(format!("DET{d}"));
        }
        out.push(format!("NOUN{}", self.noun));
        for &(int, adj) in &self.mods {
            if let Some(i) = int {
                out.push(format!("INT{i}"));
            }
            out.push(format!("ADJ{adj}"));
        }
    }
}

/// One sampled clause as a training pair.
pub fn sample_clause(rng: &mut impl Rng) -> Result<ParallelExample> {
    let subj = NounPhrase::sample(rng);
    let obj = NounPhrase::sample(rng);
    let adv = rng.gen_bool(0.5).then(|| rng.gen_range(0..ADVS));
    let verb = rng.gen_range(0..VERBS);

    let mut src = Vec::new();
    let mut heads = Vec::new();
    let s = subj.emit_source(&mut src, &mut heads);
    let o = obj.emit_source(&mut src, &mut heads);
    if let Some(a) = adv {
        src.push(format!("adv{a}"));
        heads.push(0);
    }
    src.push(format!("verb{verb}"));
    heads.push(0);
    let v = src.len();
    heads[s - 1] = v;
    heads[o - 1] = v;
    if adv.is_some() {
        heads[v - 2] = v;
    }

    let mut tgt = Vec::new();
    subj.emit_target(&mut tgt);
    tgt.push(format!("VERB{verb}"));
    if let Some(a) = adv {
        tgt.push(format!("ADV{a}"));
    }
    obj.emit_target(&mut tgt);

    let tree = DependencyTree::new(src.clone(), heads)?;
    ParallelExample::new(src, tgt, tree)
}

/// `n_train` training pairs and `n_heldout` pairs whose source sentences
/// never occur in the training set.
pub fn toy_corpus(seed: u64, n_train: usize, n_heldout: usize) -> Result<(Vec<ParallelExample>, Vec<ParallelExample>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train: Vec<ParallelExample> = (0..n_train).map(|_| sample_clause(&mut rng)).collect::<Result<_>>()?;
    let seen: HashSet<Vec<String>> = train.iter().map(|e| e.src_tokens.clone()).collect();
    let mut heldout = Vec::with_capacity(n_heldout);
    while heldout.len() < n_heldout {
        let e = sample_clause(&mut rng)?;
        if !seen.contains(&e.src_tokens) {
            heldout.push(e);
        }
    }
    Ok((train, heldout))
}

/// How well a trained model translates and parses the toy language.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToyReport {
    /// Fraction of training sources whose greedy translation is exact.
    pub exact_match: f64,
    /// Attachment score of parent-head trees on the held-out set.
    pub heldout_uas: f64,
    /// Child-head loss per source token on the training set.
    pub child_loss: f64,
    /// Mean row entropy of the gold child matrices, per source token.
    pub child_bound: f64,
    /// Parent-head loss per source token on the training set.
    pub parent_loss: f64,
}

/// Scores `model` on `train` (translation and loss bound) and `heldout` (UAS).
pub fn evaluate<T: Scalar>(
    model: &Transformer<T>,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    sup: &SupervisionConfig,
    train: &[ParallelExample],
    heldout: &[ParallelExample],
) -> Result<ToyReport> {
    let mut exact = 0;
    let (mut child, mut parent, mut bound, mut tokens) = (0.0, 0.0, 0.0, 0);
    for chunk in train.chunks(CHUNK) {
        let ids: Vec<Vec<usize>> = chunk.iter().map(|e| src_vocab.encode(&e.src_tokens)).collect();
        let decoded = model.greedy_decode(&ids, sup, model.config().max_len)?;
        exact += decoded
            .iter()
            .zip(chunk)
            .filter(|(d, e)| tgt_vocab.decode(&d.tokens) == e.tgt_tokens)
            .count();
        let batch = make_batch(chunk, src_vocab, tgt_vocab)?;
        let losses = model.evaluate(&batch, Some(sup))?;
        let n = batch.src_tokens();
        child += losses.child * n as f64;
        parent += losses.parent * n as f64;
        tokens += n;
        bound += chunk.iter().map(|e| row_entropy_sum(&build_child_matrix(&e.src_tree))).sum::<f64>();
    }

    let ids: Vec<Vec<usize>> = heldout.iter().map(|e| src_vocab.encode(&e.src_tokens)).collect();
    let predicted = predict_heads(model, sup, &ids)?;
    let (mut correct, mut total) = (0, 0);
    for (p, e) in predicted.iter().zip(heldout) {
        let (c, t) = attachment_counts(p, e.src_tree.heads())?;
        correct += c;
        total += t;
    }
    Ok(ToyReport {
        exact_match: exact as f64 / train.len().max(1) as f64,
        heldout_uas: correct as f64 / total.max(1) as f64,
        child_loss: child / tokens.max(1) as f64,
        child_bound: bound / tokens.max(1) as f64,
        parent_loss: parent / tokens.max(1) as f64,
    })
}
