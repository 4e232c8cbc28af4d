//! Writes a toy corpus, gold trees and a run config into a directory so the
//! `depformer` binary can be tried end to end:
//!
//! ```text
//! cargo run --example cli_workspace -- /tmp/toy
//! cargo run --release -- train --config /tmp/toy/run.toml
//! cargo run --release -- parse-attn --checkpoint /tmp/toy/run/final.ckpt --input /tmp/toy/heldout.src --output /tmp/toy/pred.conllu
//! cargo run --release -- eval-uas --predicted /tmp/toy/pred.conllu --gold /tmp/toy/heldout.conllu
//! ```

use std::fs;
use std::path::PathBuf;

use depformer::data::{emit_conllu, ParallelExample};
use depformer::toy::toy_corpus;

const CONFIG: &str = r#"format_version = 1
seed = 1
batch_size = 32

[model]
n_layers = 2
n_heads = 4
d_model = 64
d_ff = 256
max_len = 32
dropout = 0.0

[supervision]
alpha = 0.4
beta = 0.4

[optimizer]
warmup = 400

[training]
steps = 3000
checkpoint_every = 1000
precision = "f32"

[paths]
train_src = "train.src"
train_tgt = "train.tgt"
train_trees = "train.conllu"
output_dir = "run"
"#;

fn write_split(dir: &PathBuf, name: &str, examples: &[ParallelExample]) -> std::io::Result<()> {
    let src: String = examples.iter().map(|e| e.src_tokens.join(" ") + "\n").collect();
    let tgt: String = examples.iter().map(|e| e.tgt_tokens.join(" ") + "\n").collect();
    let trees: Vec<_> = examples.iter().map(|e| e.src_tree.clone()).collect();
    fs::write(dir.join(format!("{name}.src")), src)?;
    fs::write(dir.join(format!("{name}.tgt")), tgt)?;
    fs::write(dir.join(format!("{name}.conllu")), emit_conllu(&trees))
}

fn main() -> depformer::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "toy-run".into()));
    fs::create_dir_all(&dir)?;
    let (train, heldout) = toy_corpus(7, 1000, 200)?;
    write_split(&dir, "train", &train)?;
    write_split(&dir, "heldout", &heldout)?;
    fs::write(dir.join("run.toml"), CONFIG)?;
    println!("wrote {} training and {} held-out pairs to {}", train.len(), heldout.len(), dir.display());
    Ok(())
}
