//! Corpora, vocabularies, CoNLL-U trees and padded training batches.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::syntax::{bpe_adjust_heads, build_child_matrix, build_parent_matrix, DependencyTree};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Suffix marking a subword piece that continues into the next piece.
pub const CONTINUATION: &str = "@@";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Reserved ids plus the `max_size - 4` most frequent tokens; equal
    /// counts are ordered lexicographically.
    pub fn build<S: AsRef<str>>(sentences: &[Vec<S>], max_size: usize) -> Result<Self> {
        if max_size <= RESERVED.len() {
            return Err(Error::Config(format!("vocabulary size {max_size} leaves no room for tokens")));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in sentences {
            for t in s {
                *counts.entry(t.as_ref()).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Empty("corpus"));
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(
            ranked
                .into_iter()
                .filter(|(t, _)| !RESERVED.contains(t))
                .take(max_size - RESERVED.len())
                .map(|(t, _)| t.to_string()),
        );
        Ok(tokens.into())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]).to_string())
            .collect()
    }
}

/// Parses CoNLL-U text. Only ID, FORM and HEAD are read; comments,
/// multiword ranges and empty nodes are skipped.
pub fn parse_conllu(text: &str) -> Result<Vec<DependencyTree>> {
    let mut trees = Vec::new();
    let mut tokens = Vec::new();
    let mut heads = Vec::new();
    let mut start_line = 0;

    let finish = |tokens: &mut Vec<String>, heads: &mut Vec<usize>, start: usize| -> Result<Option<DependencyTree>> {
        if tokens.is_empty() {
            return Ok(None);
        }
        let tree = DependencyTree::new(std::mem::take(tokens), std::mem::take(heads)).map_err(|e| Error::Conllu {
            line: start,
            msg: e.to_string(),
        })?;
        Ok(Some(tree))
    };

    for (n, line) in text.lines().enumerate() {
        let lineno = n + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            trees.extend(finish(&mut tokens, &mut heads, start_line)?);
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(Error::Conllu {
                line: lineno,
                msg: format!("expected 10 tab-separated columns, found {}", cols.len()),
            });
        }
        if cols[0].contains('-') || cols[0].contains('.') {
            continue;
        }
        let id: usize = cols[0].parse().map_err(|_| Error::Conllu {
            line: lineno,
            msg: format!("bad ID {:?}", cols[0]),
        })?;
        if tokens.is_empty() {
            start_line = lineno;
        }
        if id != tokens.len() + 1 {
            return Err(Error::Conllu {
                line: lineno,
                msg: format!("expected token ID {}, found {id}", tokens.len() + 1),
            });
        }
        let head: usize = cols[6].parse().map_err(|_| Error::Conllu {
            line: lineno,
            msg: format!("non-integer HEAD {:?}", cols[6]),
        })?;
        tokens.push(cols[1].to_string());
        heads.push(head);
    }
    trees.extend(finish(&mut tokens, &mut heads, start_line)?);
    Ok(trees)
}

/// Writes trees as CoNLL-U with FORM and HEAD filled and `_` elsewhere.
pub fn emit_conllu(trees: &[DependencyTree]) -> String {
    let mut out = String::new();
    for tree in trees {
        for (i, (form, head)) in tree.tokens().iter().zip(tree.heads()).enumerate() {
            let _ = writeln!(out, "{}\t{form}\t_\t_\t_\t_\t{head}\t_\t_\t_", i + 1);
        }
        out.push('\n');
    }
    out
}

/// Whitespace tokenization of one line.
pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_string).collect()
}

/// Groups subword pieces into words. Returns per-word piece counts.
pub fn piece_counts<S: AsRef<str>>(pieces: &[S]) -> Result<Vec<usize>> {
    let mut counts = Vec::new();
    let mut open = 0;
    for p in pieces {
        open += 1;
        if !p.as_ref().ends_with(CONTINUATION) {
            counts.push(open);
            open = 0;
        }
    }
    if open > 0 {
        return Err(Error::Alignment("sentence ends inside a subword word".into()));
    }
    Ok(counts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParallelExample {
    pub src_tokens: Vec<String>,
    pub tgt_tokens: Vec<String>,
    pub src_tree: DependencyTree,
}

impl ParallelExample {
    pub fn new(src_tokens: Vec<String>, tgt_tokens: Vec<String>, src_tree: DependencyTree) -> Result<Self> {
        if src_tree.len() != src_tokens.len() {
            return Err(Error::Alignment(format!(
                "tree over {} tokens for a {}-token source",
                src_tree.len(),
                src_tokens.len()
            )));
        }
        if src_tokens.is_empty() {
            return Err(Error::Empty("source sentence"));
        }
        Ok(ParallelExample {
            src_tokens,
            tgt_tokens,
            src_tree,
        })
    }

    /// Pairs a possibly subword-segmented source with a word-level tree,
    /// projecting the tree onto pieces when `@@` markers are present.
    pub fn from_segmented(src_pieces: Vec<String>, tgt_tokens: Vec<String>, word_tree: &DependencyTree) -> Result<Self> {
        let counts = piece_counts(&src_pieces)?;
        if counts.len() != word_tree.len() {
            return Err(Error::Alignment(format!(
                "source has {} words but its tree has {}",
                counts.len(),
                word_tree.len()
            )));
        }
        let tree = if counts.iter().all(|&c| c == 1) {
            DependencyTree::new(src_pieces.clone(), word_tree.heads().to_vec())?
        } else {
            let projected = bpe_adjust_heads(word_tree, &counts)?;
            DependencyTree::new(src_pieces.clone(), projected.heads().to_vec())?
        };
        Self::new(src_pieces, tgt_tokens, tree)
    }
}

/// Reads aligned source/target text files and the source CoNLL-U file.
pub fn load_parallel(src: &Path, tgt: &Path, trees: &Path) -> Result<Vec<ParallelExample>> {
    let src_text = fs::read_to_string(src)?;
    let tgt_text = fs::read_to_string(tgt)?;
    let trees = parse_conllu(&fs::read_to_string(trees)?)?;
    let src_lines: Vec<&str> = src_text.lines().collect();
    let tgt_lines: Vec<&str> = tgt_text.lines().collect();
    if src_lines.len() != tgt_lines.len() || src_lines.len() != trees.len() {
        return Err(Error::Alignment(format!(
            "{} source lines, {} target lines, {} trees",
            src_lines.len(),
            tgt_lines.len(),
            trees.len()
        )));
    }
    src_lines
        .iter()
        .zip(&tgt_lines)
        .zip(&trees)
        .enumerate()
        .map(|(i, ((s, t), tree))| {
            ParallelExample::from_segmented(tokenize(s), tokenize(t), tree)
                .map_err(|e| Error::Alignment(format!("sentence {}: {e}", i + 1)))
        })
        .collect()
}

/// Padded, id-encoded minibatch with supervision targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    /// `(size, src_len)` source ids.
    pub src_ids: Vec<usize>,
    /// `(size, tgt_len)` decoder inputs: `<s> y_1 .. y_n`.
    pub tgt_in_ids: Vec<usize>,
    /// `(size, tgt_len)` decoder targets: `y_1 .. y_n </s>`.
    pub tgt_out_ids: Vec<usize>,
    pub src_lengths: Vec<usize>,
    pub tgt_lengths: Vec<usize>,
    pub src_mask: Vec<bool>,
    pub tgt_mask: Vec<bool>,
    /// `(size, src_len, src_len)`, zero on padding rows and columns.
    pub w_child: Tensor<f64>,
    pub w_parent: Tensor<f64>,
    /// Real source rows, the rows the supervision losses count.
    pub row_mask: Vec<bool>,
}

impl Batch {
    pub fn src_tokens(&self) -> usize {
        self.src_lengths.iter().sum()
    }

    pub fn tgt_tokens(&self) -> usize {
        self.tgt_lengths.iter().sum()
    }

    /// Decoder targets with padding as `None`.
    pub fn targets(&self) -> Vec<Option<usize>> {
        self.tgt_out_ids
            .iter()
            .zip(&self.tgt_mask)
            .map(|(&id, &keep)| keep.then_some(id))
            .collect()
    }
}

pub fn make_batch(examples: &[ParallelExample], src_vocab: &Vocabulary, tgt_vocab: &Vocabulary) -> Result<Batch> {
    make_batch_padded(examples, src_vocab, tgt_vocab, 0, 0)
}

/// Like [`make_batch`] but pads to at least the given widths.
pub fn make_batch_padded(
    examples: &[ParallelExample],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    min_src_len: usize,
    min_tgt_len: usize,
) -> Result<Batch> {
    if examples.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let size = examples.len();
    let src_len = examples.iter().map(|e| e.src_tokens.len()).max().unwrap_or(0).max(min_src_len);
    let tgt_len = examples.iter().map(|e| e.tgt_tokens.len() + 1).max().unwrap_or(0).max(min_tgt_len);

    let mut src_ids = vec![PAD; size * src_len];
    let mut tgt_in_ids = vec![PAD; size * tgt_len];
    let mut tgt_out_ids = vec![PAD; size * tgt_len];
    let mut src_mask = vec![false; size * src_len];
    let mut tgt_mask = vec![false; size * tgt_len];
    let mut w_child = vec![0.0; size * src_len * src_len];
    let mut w_parent = vec![0.0; size * src_len * src_len];
    let mut src_lengths = Vec::with_capacity(size);
    let mut tgt_lengths = Vec::with_capacity(size);

    for (b, ex) in examples.iter().enumerate() {
        let m = ex.src_tokens.len();
        for (t, id) in src_vocab.encode(&ex.src_tokens).into_iter().enumerate() {
            src_ids[b * src_len + t] = id;
            src_mask[b * src_len + t] = true;
        }
        let y = tgt_vocab.encode(&ex.tgt_tokens);
        let n = y.len() + 1;
        for t in 0..n {
            tgt_in_ids[b * tgt_len + t] = if t == 0 { BOS } else { y[t - 1] };
            tgt_out_ids[b * tgt_len + t] = if t == y.len() { EOS } else { y[t] };
            tgt_mask[b * tgt_len + t] = true;
        }
        let wc = build_child_matrix(&ex.src_tree);
        let wp = build_parent_matrix(&ex.src_tree);
        let plane = src_len * src_len;
        for i in 0..m {
            for j in 0..m {
                w_child[b * plane + i * src_len + j] = wc.data()[i * m + j];
                w_parent[b * plane + i * src_len + j] = wp.data()[i * m + j];
            }
        }
        src_lengths.push(m);
        tgt_lengths.push(n);
    }

    Ok(Batch {
        size,
        src_len,
        tgt_len,
        src_ids,
        tgt_in_ids,
        tgt_out_ids,
        src_lengths,
        tgt_lengths,
        row_mask: src_mask.clone(),
        src_mask,
        tgt_mask,
        w_child: Tensor::new(&[size, src_len, src_len], w_child)?,
        w_parent: Tensor::new(&[size, src_len, src_len], w_parent)?,
    })
}
