use depformer::data::{make_batch, Vocabulary};
use depformer::model::{Dropout, ModelConfig, SupervisionConfig, Transformer};
use depformer::numerics::Tape;
use depformer::toy::toy_corpus;

fn main() -> depformer::Result<()> {
    let (examples, _) = toy_corpus(11, 3, 0)?;
    let src: Vec<Vec<String>> = examples.iter().map(|e| e.src_tokens.clone()).collect();
    let tgt: Vec<Vec<String>> = examples.iter().map(|e| e.tgt_tokens.clone()).collect();
    let (sv, tv) = (Vocabulary::build(&src, 100)?, Vocabulary::build(&tgt, 100)?);
    let batch = make_batch(&examples, &sv, &tv)?;
    let cfg = ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 8,
        d_ff: 16,
        src_vocab: sv.len(),
        tgt_vocab: tv.len(),
        max_len: 32,
        dropout: 0.0,
    };
    let sup = SupervisionConfig::default();
    let mut model = Transformer::<f64>::new(cfg, 5)?;

    let tape = Tape::new();
    let obj = model.objective(&tape, &batch, Some(&sup), &mut Dropout::off())?;
    let grads = tape.backward(obj.joint)?;
    let ids: Vec<_> = model.params().ids().collect();
    let analytic: Vec<_> = ids.iter().map(|&id| grads.param(id).expect("reachable")).collect();
    drop(tape);

    let h = 1e-5;
    println!("{:<28} {:>8} {:>12}", "parameter", "scalars", "max rel err");
    let mut worst = 0.0f64;
    for (id, grad) in ids.into_iter().zip(analytic) {
        let mut max_rel = 0.0f64;
        for k in 0..grad.len() {
            let orig = model.params().value(id).data()[k];
            model.params_mut().value_mut(id).data_mut()[k] = orig + h;
            let plus = model.evaluate(&batch, Some(&sup))?.joint;
            model.params_mut().value_mut(id).data_mut()[k] = orig - h;
            let minus = model.evaluate(&batch, Some(&sup))?.joint;
            model.params_mut().value_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[k];
            max_rel = max_rel.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
        println!("{:<28} {:>8} {:>12.2e}", model.params().get(id).name, grad.len(), max_rel);
        worst = worst.max(max_rel);
    }
    println!("worst relative error {worst:.2e}");
    Ok(())
}
