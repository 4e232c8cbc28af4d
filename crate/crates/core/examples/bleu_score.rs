use depformer::bleu::{bleu_from_text, corpus_bleu};

fn main() -> depformer::Result<()> {
    let hyp = vec![vec!["a", "b", "c", "d"]];
    let reference = vec![vec!["a", "b", "c", "e"]];
    let s = corpus_bleu(&hyp, &reference)?;
    println!("matches {:?} of {:?}", s.matches, s.totals);
    println!("precisions {:?}", s.precisions());
    println!("BLEU {:.4}", s.score());

    let refs = "the cat sat on the mat\nthere is a cat on the mat\n";
    let hyps = "the cat sat on a mat\nthere is a cat on the mat\n";
    println!("two-line corpus BLEU {:.2}", bleu_from_text(hyps, refs)?.score());
    println!("self BLEU {:.1}", bleu_from_text(refs, refs)?.score());
    Ok(())
}
