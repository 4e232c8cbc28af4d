//! The synthetic end-to-end experiment: train with and without attention
//! supervision and compare translation accuracy and trees read off the
//! parent head.
//!
//! `cargo run --release --example toy_training -- [steps] [alpha=beta ...]`

use depformer::config::RunConfig;
use depformer::toy::{evaluate, toy_corpus};
use depformer::train::Trainer;

fn main() -> depformer::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map(|s| s.parse().expect("steps")).unwrap_or(3000);
    let mut weights: Vec<f64> = args.map(|s| s.parse().expect("weight")).collect();
    if weights.is_empty() {
        weights = vec![0.4, 0.0];
    }
    let (train, heldout) = toy_corpus(7, 1000, 200)?;
    println!("example pair:\n  {}\n  {}", train[0].src_tokens.join(" "), train[0].tgt_tokens.join(" "));

    for w in weights {
        let cfg = RunConfig::from_toml(
            "format_version = 1\nseed = 1\nbatch_size = 32\n\
[model]\nn_layers = 2\nn_heads = 4\nd_model = 64\nd_ff = 256\nmax_len = 32\ndropout = 0.0\n\
[optimizer]\nwarmup = 400\n",
        )?
        .with_overrides(None, Some(w), Some(w))?;
        println!("\nalpha = beta = {w}");
        let mut trainer = Trainer::<f32>::new(&cfg, train.clone())?;
        trainer.run(steps, |_, r| {
            if r.step % 500 == 0 {
                println!(
                    "  step {:5}  J {:.4}  L {:.4}  L_c {:.4}  L_p {:.4}  {:.0}s",
                    r.step, r.joint, r.translation, r.child, r.parent, r.wall_clock
                );
            }
            Ok(())
        })?;
        let r = evaluate(trainer.model(), trainer.src_vocab(), trainer.tgt_vocab(), &cfg.supervision.heads(), &train, &heldout)?;
        println!("  training exact match  {:.3}", r.exact_match);
        println!("  held-out UAS          {:.3}", r.heldout_uas);
        println!("  L_c {:.4} (bound {:.4})  L_p {:.4}", r.child_loss, r.child_bound, r.parent_loss);
    }
    Ok(())
}
