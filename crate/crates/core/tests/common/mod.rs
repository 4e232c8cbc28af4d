#![allow(dead_code)]

use std::path::Path;

use depformer::commands;
use depformer::config::RunConfig;
use depformer::data::{emit_conllu, make_batch, Batch, ParallelExample, Vocabulary};
use depformer::model::{Dropout, ModelConfig, SupervisionConfig, Transformer};
use depformer::numerics::Tape;
use depformer::toy::{evaluate, toy_corpus, ToyReport};
use depformer::train::{load_checkpoint, StepRecord, Trainer};

pub fn vocabularies(examples: &[ParallelExample]) -> (Vocabulary, Vocabulary) {
    let src: Vec<Vec<String>> = examples.iter().map(|e| e.src_tokens.clone()).collect();
    let tgt: Vec<Vec<String>> = examples.iter().map(|e| e.tgt_tokens.clone()).collect();
    (Vocabulary::build(&src, 1000).unwrap(), Vocabulary::build(&tgt, 1000).unwrap())
}

/// Three toy pairs of different lengths, their vocabularies and a batch.
pub fn small_batch() -> (Batch, Vocabulary, Vocabulary, Vec<ParallelExample>) {
    let (examples, _) = toy_corpus(11, 3, 0).unwrap();
    let (sv, tv) = vocabularies(&examples);
    let batch = make_batch(&examples, &sv, &tv).unwrap();
    (batch, sv, tv, examples)
}

pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

/// Central finite differences of J for every scalar of every parameter.
pub fn gradient_check(step: f64) -> GradCheck {
    let (batch, sv, tv, _) = small_batch();
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
    let mut model = Transformer::<f64>::new(cfg, 5).unwrap();
    let analytic = {
        let tape = Tape::new();
        let obj = model.objective(&tape, &batch, Some(&sup), &mut Dropout::off()).unwrap();
        let grads = tape.backward(obj.joint).unwrap();
        let mut store = model.params().clone();
        store.store_grads(&grads);
        store
    };
    let mut out = GradCheck {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let name = model.params().get(id).name.clone();
        let grad = analytic.get(id).grad.clone().unwrap();
        for k in 0..grad.len() {
            let orig = model.params().value(id).data()[k];
            model.params_mut().value_mut(id).data_mut()[k] = orig + step;
            let plus = model.evaluate(&batch, Some(&sup)).unwrap().joint;
            model.params_mut().value_mut(id).data_mut()[k] = orig - step;
            let minus = model.evaluate(&batch, Some(&sup)).unwrap().joint;
            model.params_mut().value_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > out.max_rel_error {
                out.max_rel_error = rel;
                out.worst = format!("{name}[{k}] analytic {a:e} numeric {numeric:e}");
            }
            out.checked += 1;
        }
    }
    out
}

pub const TOY_CONFIG: &str = "format_version = 1\nseed = 1\nbatch_size = 32\n\
[model]\nn_layers = 2\nn_heads = 4\nd_model = 64\nd_ff = 256\nmax_len = 32\ndropout = 0.0\n\
[optimizer]\nwarmup = 400\nlr_scale = 1.0\n\
[training]\nsteps = 3000\nprecision = \"f32\"\n";

pub struct ToyRun {
    pub report: ToyReport,
    /// Held-out UAS measured through parse-attn on a saved checkpoint.
    pub parse_attn_uas: f64,
    /// Exact-match rate of the translate command on the training sources.
    pub translate_exact: f64,
    pub seconds: f64,
}

/// Trains on 1000 toy pairs with loss weight `weight` for both heads and
/// evaluates through the checkpoint and command layer.
pub fn toy_experiment(weight: f64, workdir: &Path) -> ToyRun {
    let start = std::time::Instant::now();
    let cfg = RunConfig::from_toml(TOY_CONFIG)
        .unwrap()
        .with_overrides(None, Some(weight), Some(weight))
        .unwrap();
    let (train, heldout) = toy_corpus(7, 1000, 200).unwrap();
    let mut trainer = Trainer::<f32>::new(&cfg, train.clone()).unwrap();
    trainer.run(cfg.training.steps, |_, _| Ok(())).unwrap();

    let ckpt = workdir.join(format!("toy-{weight}.ckpt"));
    trainer.save_checkpoint(&ckpt).unwrap();
    let loaded = load_checkpoint(&ckpt).unwrap();

    let lines = |ex: &[ParallelExample], tgt: bool| -> String {
        ex.iter()
            .map(|e| if tgt { e.tgt_tokens.join(" ") } else { e.src_tokens.join(" ") } + "\n")
            .collect()
    };
    let hyp = commands::translate(&loaded, &lines(&train, false)).unwrap();
    let exact = hyp.lines().zip(lines(&train, true).lines()).filter(|(h, r)| h == r).count();

    let predicted = commands::parse_attn(&loaded, &lines(&heldout, false)).unwrap();
    let gold: Vec<_> = heldout.iter().map(|e| e.src_tree.clone()).collect();
    let uas = commands::eval_uas(&predicted, &emit_conllu(&gold)).unwrap().uas;

    let sup = cfg.supervision.heads();
    let report = evaluate(trainer.model(), trainer.src_vocab(), trainer.tgt_vocab(), &sup, &train, &heldout).unwrap();
    ToyRun {
        report,
        parse_attn_uas: uas,
        translate_exact: exact as f64 / train.len() as f64,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Loss records of `steps` f64 updates on a small toy corpus, with the
/// supervision losses either disabled or weighted by zero.
pub fn reduction_curve(supervision_enabled: bool, steps: usize) -> Vec<StepRecord> {
    let mut cfg = RunConfig::from_toml(
        "format_version = 1\nseed = 4\nbatch_size = 8\n\
[model]\nn_layers = 2\nn_heads = 4\nd_model = 16\nd_ff = 32\nmax_len = 32\ndropout = 0.1\n\
[optimizer]\nwarmup = 50\n\
[training]\nprecision = \"f64\"\n",
    )
    .unwrap();
    cfg.supervision.enabled = supervision_enabled;
    cfg.supervision.alpha = 0.0;
    cfg.supervision.beta = 0.0;
    let (train, _) = toy_corpus(3, 60, 0).unwrap();
    let mut trainer = Trainer::<f64>::new(&cfg, train).unwrap();
    let mut out = Vec::new();
    trainer
        .run(steps, |_, r| {
            out.push(r.clone());
            Ok(())
        })
        .unwrap();
    out
}

/// Writes `n` toy pairs as `train.src`, `train.tgt` and `train.conllu`, plus
/// a `run.toml` training config, into `dir`. Returns the config path.
pub fn write_toy_run(dir: &Path, n: usize, steps: usize, extra: &str) -> std::path::PathBuf {
    let (train, _) = toy_corpus(21, n, 0).unwrap();
    let join = |f: fn(&ParallelExample) -> &Vec<String>| -> String { train.iter().map(|e| f(e).join(" ") + "\n").collect() };
    std::fs::write(dir.join("train.src"), join(|e| &e.src_tokens)).unwrap();
    std::fs::write(dir.join("train.tgt"), join(|e| &e.tgt_tokens)).unwrap();
    let trees: Vec<_> = train.iter().map(|e| e.src_tree.clone()).collect();
    std::fs::write(dir.join("train.conllu"), emit_conllu(&trees)).unwrap();
    let cfg = format!(
        "format_version = 1\nseed = 5\nbatch_size = 8\n\
[model]\nn_layers = 1\nn_heads = 2\nd_model = 16\nd_ff = 32\nmax_len = 32\ndropout = 0.1\n\
[optimizer]\nwarmup = 20\n\
[training]\nsteps = {steps}\ncheckpoint_every = 5\nprecision = \"f64\"\n\
[paths]\ntrain_src = \"train.src\"\ntrain_tgt = \"train.tgt\"\ntrain_trees = \"train.conllu\"\noutput_dir = \"out\"\n{extra}"
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, cfg).unwrap();
    path
}
