//! Adam training loop, metrics log and checkpoint files.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{Precision, RunConfig};
use crate::data::{load_parallel, make_batch, Batch, ParallelExample, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{Dropout, SupervisionConfig, Transformer};
use crate::numerics::{read_checkpoint, write_checkpoint, Scalar, Tape};

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    #[serde(rename = "L")]
    pub translation: f64,
    #[serde(rename = "L_c")]
    pub child: f64,
    #[serde(rename = "L_p")]
    pub parent: f64,
    #[serde(rename = "J")]
    pub joint: f64,
    pub wall_clock: f64,
}

/// First and second moment estimates for every parameter.
#[derive(Clone, Debug)]
struct Adam<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

/// Drives a model through minibatch updates over an in-memory corpus.
pub struct Trainer<T> {
    model: Transformer<T>,
    config: RunConfig,
    supervision: Option<SupervisionConfig>,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    examples: Vec<ParallelExample>,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
    step: usize,
    adam: Adam<T>,
    shuffle_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    started: Instant,
}

impl<T: Scalar> Trainer<T> {
    /// Builds vocabularies from the corpus and initializes the model.
    pub fn new(config: &RunConfig, examples: Vec<ParallelExample>) -> Result<Self> {
        let src: Vec<&Vec<String>> = examples.iter().map(|e| &e.src_tokens).collect();
        let tgt: Vec<&Vec<String>> = examples.iter().map(|e| &e.tgt_tokens).collect();
        let sv = Vocabulary::build(&src.into_iter().cloned().collect::<Vec<_>>(), config.training.max_src_vocab)?;
        let tv = Vocabulary::build(&tgt.into_iter().cloned().collect::<Vec<_>>(), config.training.max_tgt_vocab)?;
        Self::with_vocab(config, examples, sv, tv)
    }

    pub fn with_vocab(
        config: &RunConfig,
        examples: Vec<ParallelExample>,
        src_vocab: Vocabulary,
        tgt_vocab: Vocabulary,
    ) -> Result<Self> {
        config.validate()?;
        let model_cfg = config.model.with_vocab(src_vocab.len(), tgt_vocab.len());
        let model = Transformer::new(model_cfg, config.seed)?;
        Self::resume(config, examples, src_vocab, tgt_vocab, model)
    }

    /// Continues from an existing model with fresh optimizer state.
    pub fn resume(
        config: &RunConfig,
        examples: Vec<ParallelExample>,
        src_vocab: Vocabulary,
        tgt_vocab: Vocabulary,
        model: Transformer<T>,
    ) -> Result<Self> {
        config.validate()?;
        let max_len = config.model.max_len;
        let total = examples.len();
        let examples: Vec<ParallelExample> = examples
            .into_iter()
            .filter(|e| e.src_tokens.len() <= max_len && e.tgt_tokens.len() < max_len)
            .collect();
        if examples.len() < total {
            log::warn!(
                "dropped {} of {total} sentence pairs longer than max_len {max_len}",
                total - examples.len()
            );
        }
        if examples.is_empty() {
            return Err(Error::Empty("training corpus"));
        }
        let supervision = config.supervision.active();
        if let Some(s) = &supervision {
            s.validate(model.config())?;
        }
        let adam = Adam {
            m: model.params().iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
            v: model.params().iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
        };
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
        shuffle_rng.set_stream(1);
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
        dropout_rng.set_stream(2);
        let mut trainer = Trainer {
            model,
            config: config.clone(),
            supervision,
            src_vocab,
            tgt_vocab,
            order: (0..examples.len()).collect(),
            examples,
            cursor: 0,
            epoch: 0,
            step: 0,
            adam,
            shuffle_rng,
            dropout_rng,
            started: Instant::now(),
        };
        trainer.order.shuffle(&mut trainer.shuffle_rng);
        Ok(trainer)
    }

    pub fn model(&self) -> &Transformer<T> {
        &self.model
    }

    pub fn into_model(self) -> Transformer<T> {
        self.model
    }

    pub fn src_vocab(&self) -> &Vocabulary {
        &self.src_vocab
    }

    pub fn tgt_vocab(&self) -> &Vocabulary {
        &self.tgt_vocab
    }

    pub fn examples(&self) -> &[ParallelExample] {
        &self.examples
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn next_batch(&mut self) -> Result<Batch> {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.shuffle_rng);
            self.cursor = 0;
            self.epoch += 1;
        }
        let end = (self.cursor + self.config.batch_size).min(self.order.len());
        let picked: Vec<ParallelExample> = self.order[self.cursor..end]
            .iter()
            .map(|&i| self.examples[i].clone())
            .collect();
        self.cursor = end;
        make_batch(&picked, &self.src_vocab, &self.tgt_vocab)
    }

    /// One forward/backward pass and parameter update.
    pub fn step(&mut self) -> Result<StepRecord> {
        let batch = self.next_batch()?;
        let epoch = self.epoch;
        self.step += 1;
        let lr = self.config.optimizer.learning_rate(self.model.config().d_model, self.step);

        // the tape must be gone before the update so parameters are not copied on write
        let (breakdown, grads) = {
            let tape = Tape::new();
            let rate = self.model.config().dropout;
            let mut dropout = Dropout::new(rate, &mut self.dropout_rng);
            let obj = self.model.objective(&tape, &batch, self.supervision.as_ref(), &mut dropout)?;
            if !obj.breakdown.joint.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            (obj.breakdown, tape.backward(obj.joint)?)
        };

        let o = &self.config.optimizer;
        let t = self.step as i32;
        let (b1, b2) = (o.beta1, o.beta2);
        let step_size = T::from_f64(lr / (1.0 - b1.powi(t)));
        let v_corr = T::from_f64(1.0 / (1.0 - b2.powi(t)));
        let (b1, b2, eps) = (T::from_f64(b1), T::from_f64(b2), T::from_f64(o.eps));
        let (c1, c2) = (T::one() - b1, T::one() - b2);
        let ids: Vec<_> = self.model.params().ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let Some(g) = grads.param(id) else { continue };
            let (m, v) = (&mut self.adam.m[k], &mut self.adam.v[k]);
            let w = self.model.params_mut().value_mut(id).data_mut();
            for (((w, &g), m), v) in w.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + c1 * g;
                *v = b2 * *v + c2 * g * g;
                *w -= step_size * *m / ((*v * v_corr).sqrt() + eps);
            }
        }

        Ok(StepRecord {
            step: self.step,
            epoch,
            lr,
            translation: breakdown.translation,
            child: breakdown.child,
            parent: breakdown.parent,
            joint: breakdown.joint,
            wall_clock: self.started.elapsed().as_secs_f64(),
        })
    }

    /// Runs `steps` updates, handing each record to `observer`.
    pub fn run(&mut self, steps: usize, mut observer: impl FnMut(&Self, &StepRecord) -> Result<()>) -> Result<()> {
        for _ in 0..steps {
            let rec = self.step()?;
            observer(self, &rec)?;
        }
        Ok(())
    }

    /// Metadata stored alongside the parameters.
    pub fn checkpoint_meta(&self) -> serde_json::Value {
        json!({
            "config": self.config,
            "model": self.model.config(),
            "src_vocab": self.src_vocab,
            "tgt_vocab": self.tgt_vocab,
            "step": self.step,
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        write_checkpoint(BufWriter::new(file), &self.checkpoint_meta(), self.model.params())
    }
}

/// A checkpoint ready for inference.
pub struct LoadedModel {
    pub config: RunConfig,
    pub model: Transformer<f64>,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub step: usize,
}

impl LoadedModel {
    pub fn supervision(&self) -> SupervisionConfig {
        self.config.supervision.heads()
    }
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedModel> {
    let file = File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let ckpt = read_checkpoint::<f64, _>(std::io::BufReader::new(file))?;
    let field = |name: &str| {
        ckpt.meta
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("metadata lacks {name}")))
    };
    let bad = |e: serde_json::Error| Error::Checkpoint(e.to_string());
    let config: RunConfig = serde_json::from_value(field("config")?).map_err(bad)?;
    let model_cfg = serde_json::from_value(field("model")?).map_err(bad)?;
    let src_vocab: Vocabulary = serde_json::from_value(field("src_vocab")?).map_err(bad)?;
    let tgt_vocab: Vocabulary = serde_json::from_value(field("tgt_vocab")?).map_err(bad)?;
    let step = field("step")?.as_u64().unwrap_or(0) as usize;
    let model = Transformer::from_params(model_cfg, ckpt.params)?;
    if model.config().src_vocab != src_vocab.len() || model.config().tgt_vocab != tgt_vocab.len() {
        return Err(Error::Checkpoint("vocabulary sizes disagree with the model".into()));
    }
    Ok(LoadedModel {
        config,
        model,
        src_vocab,
        tgt_vocab,
        step,
    })
}

/// Files produced by [`train_from_config`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub last: Option<StepRecord>,
}

fn required(p: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    p.clone().ok_or_else(|| Error::Config(format!("paths.{key} is required for training")))
}

/// Trains from the files named in `config`, writing `metrics.jsonl` and
/// `step-N.ckpt` files (plus `final.ckpt`) into the output directory.
pub fn train_from_config(config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let src = required(&config.paths.train_src, "train_src")?;
    let tgt = required(&config.paths.train_tgt, "train_tgt")?;
    let trees = required(&config.paths.train_trees, "train_trees")?;
    let out = required(&config.paths.output_dir, "output_dir")?;
    let examples = load_parallel(&src, &tgt, &trees)?;
    fs::create_dir_all(&out)?;
    match config.training.precision {
        Precision::F32 => run_to_files::<f32>(config, examples, &out),
        Precision::F64 => run_to_files::<f64>(config, examples, &out),
    }
}

fn run_to_files<T: Scalar>(config: &RunConfig, examples: Vec<ParallelExample>, out: &Path) -> Result<TrainOutcome> {
    let mut trainer = Trainer::<T>::new(config, examples)?;
    let metrics = out.join("metrics.jsonl");
    let mut log = BufWriter::new(OpenOptions::new().create(true).append(true).open(&metrics)?);
    let mut checkpoints = Vec::new();
    let mut last = None;
    let every = config.training.checkpoint_every;
    trainer.run(config.training.steps, |t, rec| {
        serde_json::to_writer(&mut log, rec)?;
        log.write_all(b"\n")?;
        if every > 0 && rec.step % every == 0 {
            log.flush()?;
            let path = out.join(format!("step-{}.ckpt", rec.step));
            t.save_checkpoint(&path)?;
            checkpoints.push(path);
        }
        log::info!("step {} J {:.4} L {:.4}", rec.step, rec.joint, rec.translation);
        last = Some(rec.clone());
        Ok(())
    })?;
    log.flush()?;
    let path = out.join("final.ckpt");
    trainer.save_checkpoint(&path)?;
    checkpoints.push(path);
    Ok(TrainOutcome {
        metrics,
        checkpoints,
        last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::syntax::DependencyTree;

    fn corpus() -> Vec<ParallelExample> {
        let rows = [
            ("a b c", "x y z", vec![2, 0, 2]),
            ("b c", "y z", vec![0, 1]),
            ("c a b", "z x y", vec![0, 1, 1]),
            ("a", "x", vec![0]),
        ];
        rows.iter()
            .map(|(s, t, h)| {
                let src = crate::data::tokenize(s);
                let tree = DependencyTree::new(src.clone(), h.clone()).unwrap();
                ParallelExample::new(src, crate::data::tokenize(t), tree).unwrap()
            })
            .collect()
    }

    fn config() -> RunConfig {
        let mut c = RunConfig::from_toml(
            "format_version = 1\nseed = 3\nbatch_size = 2\n[model]\nn_layers = 1\nn_heads = 2\nd_model = 8\nd_ff = 16\ndropout = 0.1\n[optimizer]\nwarmup = 10\nlr_scale = 2.0\n",
        )
        .unwrap();
        c.training.steps = 30;
        c
    }

    #[test]
    fn loss_falls_and_runs_repeat() {
        let run = || {
            let mut t = Trainer::<f64>::new(&config(), corpus()).unwrap();
            let mut recs = Vec::new();
            t.run(60, |_, r| {
                recs.push(r.clone());
                Ok(())
            })
            .unwrap();
            recs
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.joint.to_bits(), y.joint.to_bits());
        }
        let head: f64 = a[..4].iter().map(|r| r.joint).sum();
        let tail: f64 = a[56..].iter().map(|r| r.joint).sum();
        assert!(tail < head, "{head} -> {tail}");
        assert_eq!(a[3].epoch, 1);
    }

    #[test]
    fn drops_long_pairs() {
        let mut c = config();
        c.model.max_len = 2;
        let t = Trainer::<f64>::new(&c, corpus()).unwrap();
        assert_eq!(t.examples().len(), 1);
        c.model.max_len = 1;
        assert!(Trainer::<f64>::new(&c, corpus()).is_err());
    }

    #[test]
    fn checkpoint_restores_losses() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::<f64>::new(&config(), corpus()).unwrap();
        t.run(5, |_, _| Ok(())).unwrap();
        let path = dir.path().join("m.ckpt");
        t.save_checkpoint(&path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.step, 5);
        let batch = make_batch(&corpus(), t.src_vocab(), t.tgt_vocab()).unwrap();
        let sup = loaded.supervision();
        let a = t.model().evaluate(&batch, Some(&sup)).unwrap();
        let b = loaded.model.evaluate(&batch, Some(&sup)).unwrap();
        assert_eq!(a, b);
    }
}
