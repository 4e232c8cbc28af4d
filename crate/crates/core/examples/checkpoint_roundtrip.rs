use depformer::config::RunConfig;
use depformer::data::make_batch;
use depformer::toy::toy_corpus;
use depformer::train::{load_checkpoint, Trainer};

fn main() -> depformer::Result<()> {
    let cfg = RunConfig::from_toml(
        "format_version = 1\nseed = 3\nbatch_size = 16\n\
[model]\nn_layers = 1\nn_heads = 2\nd_model = 16\nd_ff = 32\nmax_len = 32\n\
[training]\nprecision = \"f64\"\n",
    )?;
    let (train, _) = toy_corpus(1, 64, 0)?;
    let mut trainer = Trainer::<f64>::new(&cfg, train.clone())?;
    trainer.run(20, |_, r| {
        if r.step % 5 == 0 {
            println!("step {:2}  J {:.4}", r.step, r.joint);
        }
        Ok(())
    })?;

    let path = std::env::temp_dir().join("depformer-example.ckpt");
    trainer.save_checkpoint(&path)?;
    let loaded = load_checkpoint(&path)?;
    println!("wrote {} ({} bytes)", path.display(), std::fs::metadata(&path)?.len());

    let batch = make_batch(&train[..8], &loaded.src_vocab, &loaded.tgt_vocab)?;
    let sup = loaded.supervision();
    let before = trainer.model().evaluate(&batch, Some(&sup))?;
    let after = loaded.model.evaluate(&batch, Some(&sup))?;
    println!("before save: {before:?}");
    println!("after load:  {after:?}");
    println!("bit-identical: {}", before == after);
    std::fs::remove_file(&path)?;
    Ok(())
}
