//! Runs the encoder on a toy batch, pulls out the two supervised heads and
//! reports their losses against the gold adjacency targets.

use depformer::data::{make_batch, Vocabulary};
use depformer::model::{Dropout, ModelConfig, SupervisionConfig, Transformer};
use depformer::numerics::Tape;
use depformer::toy::toy_corpus;

fn main() -> depformer::Result<()> {
    let (examples, _) = toy_corpus(3, 4, 0)?;
    let src: Vec<Vec<String>> = examples.iter().map(|e| e.src_tokens.clone()).collect();
    let tgt: Vec<Vec<String>> = examples.iter().map(|e| e.tgt_tokens.clone()).collect();
    let (sv, tv) = (Vocabulary::build(&src, 100)?, Vocabulary::build(&tgt, 100)?);
    let batch = make_batch(&examples, &sv, &tv)?;

    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 4,
        d_model: 32,
        d_ff: 64,
        src_vocab: sv.len(),
        tgt_vocab: tv.len(),
        max_len: 32,
        dropout: 0.0,
    };
    let model = Transformer::<f64>::new(cfg, 0)?;
    let sup = SupervisionConfig::default();

    let tape = Tape::new();
    let enc = model.encoder_forward(&tape, &batch.src_ids, &batch.src_lengths, &mut Dropout::off())?;
    let layer = sup.resolved_layer(model.config());
    let psh = enc.head_probs(layer, sup.psh_head)?.value();
    let width = batch.src_len;
    let m = batch.src_lengths[0];
    println!("sentence: {}", examples[0].src_tokens.join(" "));
    println!("untrained parent-head attention, layer {layer} head {}:", sup.psh_head);
    for i in 0..m {
        let row: Vec<String> = (0..m).map(|j| format!("{:.2}", psh.data()[i * width + j])).collect();
        println!("  {}", row.join(" "));
    }

    let obj = model.objective(&tape, &batch, Some(&sup), &mut Dropout::off())?;
    let b = obj.breakdown;
    println!(
        "L = {:.4}  L_c = {:.4}  L_p = {:.4}  J = L + {}*L_c + {}*L_p = {:.4}",
        b.translation, b.child, b.parent, sup.alpha, sup.beta, b.joint
    );
    let grads = tape.backward(obj.joint)?;
    let wq = model.params().id("enc.layer1.self_attn.wq").expect("parameter exists");
    let g = grads.param(wq).expect("reachable");
    let norm = g.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    println!("|dJ/dWq| in the supervised layer: {norm:.4}");
    Ok(())
}
