//! Text-in, text-out implementations of the command-line operations.
//!
//! `export_attn` writes one JSON object per source line:
//!
//! ```text
//! {"sentence":0,"layer":1,"tokens":["det0","noun3","verb1"],
//!  "heads":[{"head":0,"csh":true,"psh":false,"probs":[[...],[...],[...]]}, ...]}
//! ```
//!
//! `probs[i][j]` is the attention of token `i` on token `j`, both 0-based.

use serde::Serialize;

use crate::bleu::{bleu_from_text, BleuStats};
use crate::data::{emit_conllu, parse_conllu, tokenize, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{SupervisionConfig, Transformer};
use crate::syntax::DependencyTree;
use crate::train::LoadedModel;
use crate::treedec::{attachment_counts, decode_tree, ParentScoreMatrix};

/// Sentences handed to the model at once.
pub const CHUNK: usize = 64;

fn source_lines(text: &str) -> Vec<Vec<String>> {
    text.lines().map(tokenize).collect()
}

fn encode_all(vocab: &Vocabulary, lines: &[Vec<String>]) -> Result<Vec<Vec<usize>>> {
    lines
        .iter()
        .enumerate()
        .map(|(i, l)| {
            if l.is_empty() {
                Err(Error::Alignment(format!("line {} is empty", i + 1)))
            } else {
                Ok(vocab.encode(l))
            }
        })
        .collect()
}

/// Greedy translation of every line; blank lines stay blank.
pub fn translate(loaded: &LoadedModel, text: &str) -> Result<String> {
    let lines = source_lines(text);
    let sup = loaded.supervision();
    let mut out = String::new();
    for chunk in lines.chunks(CHUNK) {
        let filled: Vec<&Vec<String>> = chunk.iter().filter(|l| !l.is_empty()).collect();
        let mut decoded = if filled.is_empty() {
            Vec::new()
        } else {
            let ids: Vec<Vec<usize>> = filled.iter().map(|l| loaded.src_vocab.encode(l)).collect();
            let steps = loaded.model.config().max_len;
            loaded.model.greedy_decode(&ids, &sup, steps)?
        }
        .into_iter();
        for line in chunk {
            if !line.is_empty() {
                let d = decoded.next().expect("one result per sentence");
                out.push_str(&loaded.tgt_vocab.decode(&d.tokens).join(" "));
            }
            out.push('\n');
        }
    }
    Ok(out)
}

/// Trees read off the parent head: argmax parents, repaired by maximum
/// spanning arborescence when they do not form a tree.
pub fn predict_heads<T: crate::numerics::Scalar>(
    model: &Transformer<T>,
    sup: &SupervisionConfig,
    sentences: &[Vec<usize>],
) -> Result<Vec<Vec<usize>>> {
    sup.validate(model.config())?;
    let layer = sup.resolved_layer(model.config());
    let mut out = Vec::with_capacity(sentences.len());
    for chunk in sentences.chunks(CHUNK) {
        for heads in model.encoder_attention(chunk, layer)? {
            let scores = ParentScoreMatrix::new(heads[sup.psh_head].clone())?;
            out.push(decode_tree(&scores));
        }
    }
    Ok(out)
}

/// CoNLL-U trees predicted for every source line.
pub fn parse_attn(loaded: &LoadedModel, text: &str) -> Result<String> {
    let lines = source_lines(text);
    let ids = encode_all(&loaded.src_vocab, &lines)?;
    let heads = predict_heads(&loaded.model, &loaded.supervision(), &ids)?;
    let trees = lines
        .into_iter()
        .zip(heads)
        .map(|(tokens, heads)| DependencyTree::new(tokens, heads))
        .collect::<Result<Vec<_>>>()?;
    Ok(emit_conllu(&trees))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UasReport {
    pub uas: f64,
    pub correct: usize,
    pub total: usize,
    pub sentences: usize,
}

/// Token-level (micro-averaged) attachment score of two CoNLL-U texts.
pub fn eval_uas(predicted: &str, gold: &str) -> Result<UasReport> {
    let pred = parse_conllu(predicted)?;
    let gold = parse_conllu(gold)?;
    if pred.len() != gold.len() {
        return Err(Error::Alignment(format!(
            "{} predicted sentences but {} gold sentences",
            pred.len(),
            gold.len()
        )));
    }
    let (mut correct, mut total) = (0, 0);
    for (i, (p, g)) in pred.iter().zip(&gold).enumerate() {
        let (c, t) = attachment_counts(p.heads(), g.heads())
            .map_err(|e| Error::Alignment(format!("sentence {}: {e}", i + 1)))?;
        correct += c;
        total += t;
    }
    if total == 0 {
        return Err(Error::Empty("treebank"));
    }
    Ok(UasReport {
        uas: correct as f64 / total as f64,
        correct,
        total,
        sentences: gold.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BleuReport {
    pub bleu: f64,
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    #[serde(flatten)]
    pub stats: BleuStats,
}

pub fn eval_bleu(hypothesis: &str, reference: &str) -> Result<BleuReport> {
    let stats = bleu_from_text(hypothesis, reference)?;
    Ok(BleuReport {
        bleu: stats.score(),
        precisions: stats.precisions(),
        brevity_penalty: stats.brevity_penalty(),
        stats,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeadRecord {
    pub head: usize,
    pub csh: bool,
    pub psh: bool,
    pub probs: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionRecord {
    pub sentence: usize,
    pub layer: usize,
    pub tokens: Vec<String>,
    pub heads: Vec<HeadRecord>,
}

/// Every head of the supervised layer for each source line, in memory.
pub fn attention_records(loaded: &LoadedModel, text: &str) -> Result<Vec<AttentionRecord>> {
    let lines = source_lines(text);
    let ids = encode_all(&loaded.src_vocab, &lines)?;
    let sup = loaded.supervision();
    let layer = sup.resolved_layer(loaded.model.config());
    let mut records = Vec::with_capacity(lines.len());
    for (c, chunk) in ids.chunks(CHUNK).enumerate() {
        for (k, heads) in loaded.model.encoder_attention(chunk, layer)?.into_iter().enumerate() {
            let sentence = c * CHUNK + k;
            records.push(AttentionRecord {
                sentence,
                layer,
                tokens: lines[sentence].clone(),
                heads: heads
                    .into_iter()
                    .enumerate()
                    .map(|(head, probs)| HeadRecord {
                        head,
                        csh: head == sup.csh_head,
                        psh: head == sup.psh_head,
                        probs,
                    })
                    .collect(),
            });
        }
    }
    Ok(records)
}

/// [`attention_records`] rendered as JSON lines.
pub fn export_attn(loaded: &LoadedModel, text: &str) -> Result<String> {
    let mut out = String::new();
    for r in attention_records(loaded, text)? {
        out.push_str(&serde_json::to_string(&r)?);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOLD: &str = "1\ta\t_\t_\t_\t_\t2\t_\t_\t_\n2\tb\t_\t_\t_\t_\t0\t_\t_\t_\n\n\
1\tc\t_\t_\t_\t_\t0\t_\t_\t_\n2\td\t_\t_\t_\t_\t1\t_\t_\t_\n\n";

    fn conllu(sentences: &[Vec<usize>]) -> String {
        let trees: Vec<DependencyTree> = sentences
            .iter()
            .map(|h| DependencyTree::from_heads(h.clone()).unwrap())
            .collect();
        emit_conllu(&trees)
    }

    #[test]
    fn uas_identity_and_single_error() {
        assert_eq!(eval_uas(GOLD, GOLD).unwrap().uas, 1.0);
        let gold = conllu(&[vec![0, 1, 2, 3]]);
        let pred = conllu(&[vec![0, 1, 1, 3]]);
        let r = eval_uas(&pred, &gold).unwrap();
        assert_eq!((r.correct, r.total), (3, 4));
        assert_eq!(r.uas, 0.75);
    }

    #[test]
    fn uas_is_micro_averaged() {
        let gold = conllu(&[vec![0, 1, 2, 3], vec![0, 1, 1, 1, 1, 1]]);
        // 2 of 4 wrong in the first sentence, 3 of 6 in the second
        let pred = conllu(&[vec![0, 1, 1, 1], vec![0, 1, 2, 3, 4, 1]]);
        let r = eval_uas(&pred, &gold).unwrap();
        assert_eq!((r.correct, r.total), (5, 10));
        assert_eq!(r.uas, 0.5);
    }

    #[test]
    fn uas_alignment_errors() {
        let one = conllu(&[vec![0, 1]]);
        let two = conllu(&[vec![0, 1], vec![0]]);
        assert_eq!(eval_uas(&one, &two).unwrap_err().category(), "alignment");
        let longer = conllu(&[vec![0, 1, 1]]);
        assert_eq!(eval_uas(&one, &longer).unwrap_err().category(), "alignment");
    }

    #[test]
    fn bleu_report() {
        let r = eval_bleu("a b c d\n", "a b c e\n").unwrap();
        assert_eq!(r.precisions[0], 0.75);
        assert!((r.bleu - 0.3976354).abs() < 5e-5);
        assert_eq!(eval_bleu("x y\n", "x y\n").unwrap().bleu, 100.0);
    }
}
