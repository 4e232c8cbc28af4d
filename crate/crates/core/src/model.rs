//! Post-norm Transformer encoder-decoder whose encoder exposes per-head
//! self-attention probabilities for supervision.

use std::sync::Arc;

use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, BOS, EOS};
use crate::error::{Error, Result};
use crate::numerics::{Mask, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::syntax::{joint_loss, supervision_losses, LossBreakdown};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub max_len: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_dropout() -> f64 {
    0.1
}

impl ModelConfig {
    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad("layer, head and width sizes must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads));
        }
        if self.src_vocab < 5 || self.tgt_vocab < 5 {
            return bad("vocabularies must hold the reserved tokens plus one".into());
        }
        if self.max_len == 0 {
            return bad("max_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Which encoder heads are supervised and how strongly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisionConfig {
    pub alpha: f64,
    pub beta: f64,
    /// 0-based encoder layer; `None` selects the top layer.
    #[serde(default)]
    pub layer: Option<usize>,
    #[serde(default)]
    pub csh_head: usize,
    #[serde(default = "one")]
    pub psh_head: usize,
}

fn one() -> usize {
    1
}

impl Default for SupervisionConfig {
    fn default() -> Self {
        SupervisionConfig {
            alpha: 0.4,
            beta: 0.4,
            layer: None,
            csh_head: 0,
            psh_head: 1,
        }
    }
}

impl SupervisionConfig {
    pub fn resolved_layer(&self, model: &ModelConfig) -> usize {
        self.layer.unwrap_or(model.n_layers - 1)
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(Error::Config("alpha and beta must be finite and nonnegative".into()));
        }
        if self.csh_head == self.psh_head {
            return Err(Error::Config("child and parent heads must differ".into()));
        }
        if self.csh_head >= model.n_heads || self.psh_head >= model.n_heads {
            return Err(Error::Config("supervised head index out of range".into()));
        }
        if self.resolved_layer(model) >= model.n_layers {
            return Err(Error::Config("supervised layer out of range".into()));
        }
        Ok(())
    }
}

/// Dropout after attention and feed-forward sub-layers. Inactive without an rng.
pub struct Dropout<'a> {
    rate: f64,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Dropout<'a> {
    pub fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, rng: &'a mut ChaCha8Rng) -> Self {
        Dropout { rate, rng: Some(rng) }
    }

    fn apply<'t, T: Scalar>(&mut self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if self.rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - self.rate));
        let shape = x.shape();
        let n: usize = shape.iter().product();
        let mask = (0..n)
            .map(|_| if rng.gen::<f64>() < self.rate { T::zero() } else { keep })
            .collect();
        x.mul(tape.constant(Tensor::new(&shape, mask)?))
    }
}

#[derive(Clone, Debug)]
struct AttnIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Clone, Debug)]
struct NormIds {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct EncoderLayerIds {
    attn: AttnIds,
    norm1: NormIds,
    ffn: FfnIds,
    norm2: NormIds,
}

#[derive(Clone, Debug)]
struct DecoderLayerIds {
    self_attn: AttnIds,
    norm1: NormIds,
    cross_attn: AttnIds,
    norm2: NormIds,
    ffn: FfnIds,
    norm3: NormIds,
}

#[derive(Clone, Debug)]
struct LayoutIds {
    src_emb: ParamId,
    tgt_emb: ParamId,
    encoder: Vec<EncoderLayerIds>,
    decoder: Vec<DecoderLayerIds>,
    out_w: ParamId,
    out_b: ParamId,
}

/// Every parameter name with its shape, in creation order.
pub fn parameter_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let mut out = vec![
        ("src.embedding".to_string(), vec![cfg.src_vocab, d]),
        ("tgt.embedding".to_string(), vec![cfg.tgt_vocab, d]),
    ];
    let attn = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((format!("{prefix}.{w}"), vec![d, d]));
        }
    };
    let norm = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
        out.push((format!("{prefix}.gain"), vec![d]));
        out.push((format!("{prefix}.bias"), vec![d]));
    };
    let ffn = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
        out.push((format!("{prefix}.w1"), vec![d, cfg.d_ff]));
        out.push((format!("{prefix}.b1"), vec![cfg.d_ff]));
        out.push((format!("{prefix}.w2"), vec![cfg.d_ff, d]));
        out.push((format!("{prefix}.b2"), vec![d]));
    };
    for l in 0..cfg.n_layers {
        let p = format!("enc.layer{l}");
        attn(&mut out, &format!("{p}.self_attn"));
        norm(&mut out, &format!("{p}.norm1"));
        ffn(&mut out, &format!("{p}.ffn"));
        norm(&mut out, &format!("{p}.norm2"));
    }
    for l in 0..cfg.n_layers {
        let p = format!("dec.layer{l}");
        attn(&mut out, &format!("{p}.self_attn"));
        norm(&mut out, &format!("{p}.norm1"));
        attn(&mut out, &format!("{p}.cross_attn"));
        norm(&mut out, &format!("{p}.norm2"));
        ffn(&mut out, &format!("{p}.ffn"));
        norm(&mut out, &format!("{p}.norm3"));
    }
    out.push(("out.w".to_string(), vec![d, cfg.tgt_vocab]));
    out.push(("out.b".to_string(), vec![cfg.tgt_vocab]));
    out
}

fn resolve(store_id: impl Fn(&str) -> Result<ParamId>, cfg: &ModelConfig) -> Result<LayoutIds> {
    let attn = |p: &str| -> Result<AttnIds> {
        Ok(AttnIds {
            wq: store_id(&format!("{p}.wq"))?,
            wk: store_id(&format!("{p}.wk"))?,
            wv: store_id(&format!("{p}.wv"))?,
            wo: store_id(&format!("{p}.wo"))?,
        })
    };
    let norm = |p: &str| -> Result<NormIds> {
        Ok(NormIds {
            gain: store_id(&format!("{p}.gain"))?,
            bias: store_id(&format!("{p}.bias"))?,
        })
    };
    let ffn = |p: &str| -> Result<FfnIds> {
        Ok(FfnIds {
            w1: store_id(&format!("{p}.w1"))?,
            b1: store_id(&format!("{p}.b1"))?,
            w2: store_id(&format!("{p}.w2"))?,
            b2: store_id(&format!("{p}.b2"))?,
        })
    };
    let encoder = (0..cfg.n_layers)
        .map(|l| {
            let p = format!("enc.layer{l}");
            Ok(EncoderLayerIds {
                attn: attn(&format!("{p}.self_attn"))?,
                norm1: norm(&format!("{p}.norm1"))?,
                ffn: ffn(&format!("{p}.ffn"))?,
                norm2: norm(&format!("{p}.norm2"))?,
            })
        })
        .collect::<Result<_>>()?;
    let decoder = (0..cfg.n_layers)
        .map(|l| {
            let p = format!("dec.layer{l}");
            Ok(DecoderLayerIds {
                self_attn: attn(&format!("{p}.self_attn"))?,
                norm1: norm(&format!("{p}.norm1"))?,
                cross_attn: attn(&format!("{p}.cross_attn"))?,
                norm2: norm(&format!("{p}.norm2"))?,
                ffn: ffn(&format!("{p}.ffn"))?,
                norm3: norm(&format!("{p}.norm3"))?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(LayoutIds {
        src_emb: store_id("src.embedding")?,
        tgt_emb: store_id("tgt.embedding")?,
        encoder,
        decoder,
        out_w: store_id("out.w")?,
        out_b: store_id("out.b")?,
    })
}

/// Sinusoidal position encodings, `(len, d)`.
pub fn positional_encoding(len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            pe[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// Multi-head attention output plus the `(B*h, rows, cols)` probabilities.
pub struct Attention<'t, T> {
    pub output: Var<'t, T>,
    pub probs: Var<'t, T>,
    heads: usize,
}

impl<'t, T: Scalar> Attention<'t, T> {
    /// `(B, rows, cols)` probabilities of one head, still on the tape.
    pub fn head(&self, i: usize) -> Result<Var<'t, T>> {
        self.probs.select_head(self.heads, i)
    }
}

pub struct EncoderOutput<'t, T> {
    /// `(B, m, d_model)`.
    pub hidden: Var<'t, T>,
    /// Per layer, the `(B*h, m, m)` self-attention probabilities.
    pub layer_probs: Vec<Var<'t, T>>,
    heads: usize,
}

impl<'t, T: Scalar> EncoderOutput<'t, T> {
    /// `(B, m, m)` probabilities of head `head` in layer `layer`.
    pub fn head_probs(&self, layer: usize, head: usize) -> Result<Var<'t, T>> {
        self.layer_probs
            .get(layer)
            .ok_or_else(|| Error::shape("head_probs", format!("layer {layer} of {}", self.layer_probs.len())))?
            .select_head(self.heads, head)
    }

    pub fn num_heads(&self) -> usize {
        self.heads
    }
}

/// Greedy translation of one sentence with the supervised heads' attention.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    /// `(m, m)` child-head probabilities.
    pub child_probs: Vec<Vec<f64>>,
    /// `(m, m)` parent-head probabilities.
    pub parent_probs: Vec<Vec<f64>>,
}

/// Scalar loss and its components.
pub struct Objective<'t, T> {
    pub joint: Var<'t, T>,
    pub breakdown: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct Transformer<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    ids: LayoutIds,
}

impl<T: Scalar> Transformer<T> {
    /// Fresh model with Xavier-uniform matrices, unit-variance embeddings,
    /// unit norm gains and zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in parameter_layout(&config) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with(".gain") {
                vec![1.0; n]
            } else if shape.len() == 1 {
                vec![0.0; n]
            } else {
                let bound = if name.ends_with("embedding") {
                    (3.0 / config.d_model as f64).sqrt()
                } else {
                    (6.0 / (shape[0] + shape[1]) as f64).sqrt()
                };
                let dist = Uniform::new_inclusive(-bound, bound);
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            };
            params.insert(name, Tensor::from_f64(&shape, &data)?)?;
        }
        Self::from_params(config, params)
    }

    /// Binds an existing parameter set (for example a loaded checkpoint).
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        for (name, shape) in parameter_layout(&config) {
            let id = params
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if params.value(id).shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    params.value(id).shape()
                )));
            }
        }
        let ids = resolve(
            |n| params.id(n).ok_or_else(|| Error::Checkpoint(format!("missing parameter {n}"))),
            &config,
        )?;
        Ok(Transformer { config, params, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> Transformer<U> {
        Transformer {
            config: self.config.clone(),
            params: self.params.cast(),
            ids: self.ids.clone(),
        }
    }

    fn p<'t>(&self, tape: &'t Tape<T>, id: ParamId) -> Var<'t, T> {
        tape.param(&self.params, id)
    }

    /// Scaled dot-product attention over `h` heads. `q_in` is `(B, mq, d)`,
    /// `kv_in` is `(B, mk, d)`, and `mask` has `B` groups (or one shared group)
    /// of `mq x mk`.
    pub fn multi_head_attention<'t>(
        &self,
        tape: &'t Tape<T>,
        q_in: Var<'t, T>,
        kv_in: Var<'t, T>,
        mask: &Mask,
        layer: &str,
    ) -> Result<Attention<'t, T>> {
        let ids = self.attn_ids(layer)?;
        self.attention(tape, q_in, kv_in, mask, ids)
    }

    fn attn_ids(&self, layer: &str) -> Result<&AttnIds> {
        let parse = |s: &str| s.parse::<usize>().ok();
        let (side, rest) = layer.split_once('.').unwrap_or((layer, ""));
        let (idx, kind) = rest.split_once('.').unwrap_or((rest, "self_attn"));
        let idx = idx.strip_prefix("layer").and_then(parse);
        let found = match (side, idx, kind) {
            ("enc", Some(l), "self_attn") => self.ids.encoder.get(l).map(|e| &e.attn),
            ("dec", Some(l), "self_attn") => self.ids.decoder.get(l).map(|e| &e.self_attn),
            ("dec", Some(l), "cross_attn") => self.ids.decoder.get(l).map(|e| &e.cross_attn),
            _ => None,
        };
        found.ok_or_else(|| Error::Config(format!("no attention block named {layer}")))
    }

    fn attention<'t>(
        &self,
        tape: &'t Tape<T>,
        q_in: Var<'t, T>,
        kv_in: Var<'t, T>,
        mask: &Mask,
        ids: &AttnIds,
    ) -> Result<Attention<'t, T>> {
        let (qs, ks) = (q_in.shape(), kv_in.shape());
        let d = self.config.d_model;
        if qs.len() != 3 || ks.len() != 3 || qs[2] != d || ks[2] != d || qs[0] != ks[0] {
            return Err(Error::shape("multi_head_attention", format!("query {qs:?}, key/value {ks:?}")));
        }
        let (g, r, c) = mask.dims();
        if r != qs[1] || c != ks[1] || (g != qs[0] && g != 1) {
            return Err(Error::shape(
                "multi_head_attention",
                format!("mask {g}x{r}x{c} for query {qs:?} and key {ks:?}"),
            ));
        }
        let h = self.config.n_heads;
        let q = q_in.linear(self.p(tape, ids.wq))?.split_heads(h)?;
        let k = kv_in.linear(self.p(tape, ids.wk))?.split_heads(h)?;
        let v = kv_in.linear(self.p(tape, ids.wv))?.split_heads(h)?;
        let scores = q.bmm(k, true)?.scale(1.0 / (self.config.d_k() as f64).sqrt());
        let probs = scores.softmax_rows(Some(mask))?;
        let context = probs.bmm(v, false)?.merge_heads(h)?;
        let output = context.linear(self.p(tape, ids.wo))?;
        Ok(Attention { output, probs, heads: h })
    }

    fn feed_forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>, ids: &FfnIds) -> Result<Var<'t, T>> {
        x.linear(self.p(tape, ids.w1))?
            .add_bias(self.p(tape, ids.b1))?
            .relu()
            .linear(self.p(tape, ids.w2))?
            .add_bias(self.p(tape, ids.b2))
    }

    fn norm<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>, ids: &NormIds) -> Result<Var<'t, T>> {
        x.layer_norm(self.p(tape, ids.gain), self.p(tape, ids.bias))
    }

    fn embed<'t>(
        &self,
        tape: &'t Tape<T>,
        table: ParamId,
        ids: &[usize],
        batch: usize,
        len: usize,
        vocab: usize,
        dropout: &mut Dropout,
    ) -> Result<Var<'t, T>> {
        if len > self.config.max_len {
            return Err(Error::TooLong {
                len,
                max_len: self.config.max_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::TokenOutOfRange { id: bad, size: vocab });
        }
        let d = self.config.d_model;
        let pe = positional_encoding(len, d);
        let pe: Vec<f64> = (0..batch).flat_map(|_| pe.iter().copied()).collect();
        let x = self
            .p(tape, table)
            .embedding(ids, &[batch, len])?
            .scale((d as f64).sqrt())
            .add(tape.constant(Tensor::from_f64(&[batch, len, d], &pe)?))?;
        dropout.apply(tape, x)
    }

    /// Encodes `(batch, len)` source ids. `lengths` gives each row's real length.
    pub fn encoder_forward<'t>(
        &self,
        tape: &'t Tape<T>,
        src_ids: &[usize],
        lengths: &[usize],
        dropout: &mut Dropout,
    ) -> Result<EncoderOutput<'t, T>> {
        let batch = lengths.len();
        if batch == 0 || src_ids.len() % batch != 0 {
            return Err(Error::shape("encoder_forward", format!("{} ids for {batch} rows", src_ids.len())));
        }
        let len = src_ids.len() / batch;
        if lengths.iter().any(|&l| l == 0 || l > len) {
            return Err(Error::shape("encoder_forward", "row length outside 1..=width"));
        }
        let mask = Mask::key_padding(lengths, len, len);
        let mut x = self.embed(tape, self.ids.src_emb, src_ids, batch, len, self.config.src_vocab, dropout)?;
        let mut layer_probs = Vec::with_capacity(self.config.n_layers);
        for layer in &self.ids.encoder {
            let attn = self.attention(tape, x, x, &mask, &layer.attn)?;
            layer_probs.push(attn.probs);
            let a = dropout.apply(tape, attn.output)?;
            x = self.norm(tape, x.add(a)?, &layer.norm1)?;
            let f = self.feed_forward(tape, x, &layer.ffn)?;
            let f = dropout.apply(tape, f)?;
            x = self.norm(tape, x.add(f)?, &layer.norm2)?;
        }
        Ok(EncoderOutput {
            hidden: x,
            layer_probs,
            heads: self.config.n_heads,
        })
    }

    /// Teacher-forced decoder; returns `(batch, len, tgt_vocab)` logits.
    pub fn decoder_forward<'t>(
        &self,
        tape: &'t Tape<T>,
        tgt_ids: &[usize],
        encoder_hidden: Var<'t, T>,
        src_mask: &Mask,
        causal_mask: &Mask,
        dropout: &mut Dropout,
    ) -> Result<Var<'t, T>> {
        let hs = encoder_hidden.shape();
        let batch = hs[0];
        if tgt_ids.is_empty() || tgt_ids.len() % batch != 0 {
            return Err(Error::shape("decoder_forward", format!("{} ids for {batch} rows", tgt_ids.len())));
        }
        let len = tgt_ids.len() / batch;
        let (_, cr, cc) = causal_mask.dims();
        if cr != len || cc != len {
            return Err(Error::shape("decoder_forward", format!("causal mask {cr}x{cc} for length {len}")));
        }
        for g in 0..causal_mask.dims().0 {
            for r in 0..len {
                if (r + 1..len).any(|c| causal_mask.allowed(g, r, c)) {
                    return Err(Error::shape("decoder_forward", "self-attention mask exposes future positions"));
                }
            }
        }
        let mut y = self.embed(tape, self.ids.tgt_emb, tgt_ids, batch, len, self.config.tgt_vocab, dropout)?;
        for layer in &self.ids.decoder {
            let a = self.attention(tape, y, y, causal_mask, &layer.self_attn)?.output;
            let a = dropout.apply(tape, a)?;
            y = self.norm(tape, y.add(a)?, &layer.norm1)?;
            let c = self.attention(tape, y, encoder_hidden, src_mask, &layer.cross_attn)?.output;
            let c = dropout.apply(tape, c)?;
            y = self.norm(tape, y.add(c)?, &layer.norm2)?;
            let f = self.feed_forward(tape, y, &layer.ffn)?;
            let f = dropout.apply(tape, f)?;
            y = self.norm(tape, y.add(f)?, &layer.norm3)?;
        }
        y.linear(self.p(tape, self.ids.out_w))?.add_bias(self.p(tape, self.ids.out_b))
    }

    /// Per-token translation loss plus, when `supervision` is given, the
    /// weighted attention terms.
    pub fn objective<'t>(
        &self,
        tape: &'t Tape<T>,
        batch: &Batch,
        supervision: Option<&SupervisionConfig>,
        dropout: &mut Dropout,
    ) -> Result<Objective<'t, T>> {
        let enc = self.encoder_forward(tape, &batch.src_ids, &batch.src_lengths, dropout)?;
        let src_mask = Mask::key_padding(&batch.src_lengths, batch.tgt_len, batch.src_len);
        let causal = Mask::causal(1, batch.tgt_len);
        let logits = self.decoder_forward(tape, &batch.tgt_in_ids, enc.hidden, &src_mask, &causal, dropout)?;
        let translation = logits
            .softmax_cross_entropy(&batch.targets())?
            .scale(1.0 / batch.tgt_tokens() as f64);
        let l = translation.item().as_f64();

        let Some(sup) = supervision else {
            return Ok(Objective {
                joint: translation,
                breakdown: LossBreakdown {
                    translation: l,
                    child: 0.0,
                    parent: 0.0,
                    joint: l,
                },
            });
        };
        sup.validate(&self.config)?;
        let layer = sup.resolved_layer(&self.config);
        let p_child = enc.head_probs(layer, sup.csh_head)?;
        let p_parent = enc.head_probs(layer, sup.psh_head)?;
        let (lc, lp) = supervision_losses(
            Arc::new(batch.w_child.cast()),
            Arc::new(batch.w_parent.cast()),
            p_child,
            p_parent,
            &batch.row_mask,
        )?;
        let joint = translation.add(lc.scale(sup.alpha))?.add(lp.scale(sup.beta))?;
        let (c, p) = (lc.item().as_f64(), lp.item().as_f64());
        joint_loss(l, c, p, sup.alpha, sup.beta)?;
        Ok(Objective {
            joint,
            breakdown: LossBreakdown {
                translation: l,
                child: c,
                parent: p,
                joint: joint.item().as_f64(),
            },
        })
    }

    /// Loss components of a batch without dropout or gradient bookkeeping.
    pub fn evaluate(&self, batch: &Batch, supervision: Option<&SupervisionConfig>) -> Result<LossBreakdown> {
        let tape = Tape::new();
        Ok(self.objective(&tape, batch, supervision, &mut Dropout::off())?.breakdown)
    }

    /// Encoder self-attention probabilities of every head in `layer`, one
    /// `h x m x m` block per sentence.
    pub fn encoder_attention(&self, sentences: &[Vec<usize>], layer: usize) -> Result<Vec<Vec<Vec<Vec<f64>>>>> {
        if layer >= self.config.n_layers {
            return Err(Error::Config(format!("layer {layer} of {}", self.config.n_layers)));
        }
        let (ids, lengths, width) = pad_rows(sentences)?;
        let tape = Tape::new();
        let enc = self.encoder_forward(&tape, &ids, &lengths, &mut Dropout::off())?;
        let probs = enc.layer_probs[layer].value();
        let h = self.config.n_heads;
        Ok(lengths
            .iter()
            .enumerate()
            .map(|(b, &m)| {
                (0..h)
                    .map(|head| crop(probs.data(), (b * h + head) * width * width, width, m))
                    .collect()
            })
            .collect())
    }

    /// Autoregressive argmax decoding of a batch of sentences, stopping at
    /// `</s>` or after `max_steps` tokens.
    pub fn greedy_decode(
        &self,
        sentences: &[Vec<usize>],
        supervision: &SupervisionConfig,
        max_steps: usize,
    ) -> Result<Vec<Decoded>> {
        supervision.validate(&self.config)?;
        let (ids, lengths, width) = pad_rows(sentences)?;
        let batch = lengths.len();
        let enc_tape = Tape::new();
        let enc = self.encoder_forward(&enc_tape, &ids, &lengths, &mut Dropout::off())?;
        let hidden = enc.hidden.value();
        let layer = supervision.resolved_layer(&self.config);
        let h = self.config.n_heads;
        let probs = enc.layer_probs[layer].value();

        let mut prefixes: Vec<Vec<usize>> = vec![vec![BOS]; batch];
        let mut done = vec![false; batch];
        let steps = max_steps.min(self.config.max_len);
        for _ in 0..steps {
            if done.iter().all(|&d| d) {
                break;
            }
            let len = prefixes[0].len();
            let tape = Tape::new();
            let enc_hidden = tape.constant(hidden.as_ref().clone());
            let src_mask = Mask::key_padding(&lengths, len, width);
            let causal = Mask::causal(1, len);
            let flat: Vec<usize> = prefixes.iter().flatten().copied().collect();
            let logits = self.decoder_forward(&tape, &flat, enc_hidden, &src_mask, &causal, &mut Dropout::off())?;
            let logits = logits.value();
            let v = self.config.tgt_vocab;
            for (b, prefix) in prefixes.iter_mut().enumerate() {
                let row = &logits.data()[((b * len) + len - 1) * v..((b * len) + len) * v];
                let mut best = 0;
                for (j, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = j;
                    }
                }
                let next = if done[b] { EOS } else { best };
                if next == EOS {
                    done[b] = true;
                }
                prefix.push(next);
            }
        }

        Ok(prefixes
            .into_iter()
            .enumerate()
            .map(|(b, prefix)| {
                let m = lengths[b];
                let tokens = prefix[1..].iter().copied().take_while(|&t| t != EOS).collect();
                Decoded {
                    tokens,
                    child_probs: crop(probs.data(), (b * h + supervision.csh_head) * width * width, width, m),
                    parent_probs: crop(probs.data(), (b * h + supervision.psh_head) * width * width, width, m),
                }
            })
            .collect())
    }
}

fn pad_rows(sentences: &[Vec<usize>]) -> Result<(Vec<usize>, Vec<usize>, usize)> {
    if sentences.is_empty() {
        return Err(Error::Empty("no sentences"));
    }
    if sentences.iter().any(Vec::is_empty) {
        return Err(Error::Empty("empty source sentence"));
    }
    let width = sentences.iter().map(Vec::len).max().unwrap_or(0);
    let mut ids = vec![crate::data::PAD; sentences.len() * width];
    for (b, s) in sentences.iter().enumerate() {
        ids[b * width..b * width + s.len()].copy_from_slice(s);
    }
    Ok((ids, sentences.iter().map(Vec::len).collect(), width))
}

fn crop<T: Scalar>(data: &[T], offset: usize, width: usize, m: usize) -> Vec<Vec<f64>> {
    (0..m)
        .map(|i| (0..m).map(|j| data[offset + i * width + j].as_f64()).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_batch, ParallelExample, Vocabulary};
    use crate::syntax::DependencyTree;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            src_vocab: 12,
            tgt_vocab: 10,
            max_len: 16,
            dropout: 0.0,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        assert!(c.validate().is_ok());
        c.d_model = 9;
        assert!(c.validate().is_err());
        let c = tiny_config();
        let mut s = SupervisionConfig::default();
        assert_eq!(s.resolved_layer(&c), 0);
        s.psh_head = 0;
        assert!(s.validate(&c).is_err());
        let s = SupervisionConfig {
            layer: Some(3),
            ..Default::default()
        };
        assert!(s.validate(&c).is_err());
    }

    #[test]
    fn single_token_identity_attention() {
        let cfg = ModelConfig {
            n_heads: 1,
            d_model: 4,
            ..tiny_config()
        };
        let mut model = Transformer::<f64>::new(cfg, 0).unwrap();
        let eye: Vec<f64> = (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
        for w in ["wq", "wk", "wv"] {
            let id = model.params().id(&format!("enc.layer0.self_attn.{w}")).unwrap();
            *model.params_mut().value_mut(id) = Tensor::from_f64(&[4, 4], &eye).unwrap();
        }
        let tape = Tape::new();
        let v = [0.5, -1.0, 2.0, 0.25];
        let x = tape.constant(Tensor::from_f64(&[1, 1, 4], &v).unwrap());
        let attn = model
            .multi_head_attention(&tape, x, x, &Mask::key_padding(&[1], 1, 1), "enc.layer0")
            .unwrap();
        assert_eq!(attn.head(0).unwrap().value().data(), &[1.0]);
        let wo = model.params().value(model.params().id("enc.layer0.self_attn.wo").unwrap());
        let mut expect = [0.0; 4];
        f64::gemm(1, 4, 4, &v, false, wo.data(), false, &mut expect, false);
        for (a, b) in attn.output.value().data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn identical_keys_give_uniform_rows() {
        let model = Transformer::<f64>::new(tiny_config(), 1).unwrap();
        let tape = Tape::new();
        let row = [0.3, -0.2, 0.8, 0.1, 0.0, 0.5, -0.7, 0.9];
        let data: Vec<f64> = (0..3).flat_map(|_| row).collect();
        let x = tape.constant(Tensor::from_f64(&[1, 3, 8], &data).unwrap());
        let attn = model
            .multi_head_attention(&tape, x, x, &Mask::key_padding(&[3], 3, 3), "enc.layer0")
            .unwrap();
        for p in attn.probs.value().data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn probabilities_match_hand_computed_scores() {
        // d_model 8 with 2 heads gives d_k = 4, so scores are QK^T / 2
        let model = Transformer::<f64>::new(tiny_config(), 5).unwrap();
        let tape = Tape::new();
        let data: Vec<f64> = (0..24).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect();
        let x = tape.constant(Tensor::from_f64(&[1, 3, 8], &data).unwrap());
        let attn = model
            .multi_head_attention(&tape, x, x, &Mask::key_padding(&[3], 3, 3), "enc.layer0")
            .unwrap();
        let get = |n: &str| model.params().value(model.params().id(n).unwrap()).rows_f64();
        let (wq, wk) = (get("enc.layer0.self_attn.wq"), get("enc.layer0.self_attn.wk"));
        let proj = |w: &Vec<Vec<f64>>, t: usize, c: usize| (0..8).map(|k| data[t * 8 + k] * w[k][c]).sum::<f64>();
        for head in 0..2 {
            let got = attn.head(head).unwrap().value().rows_f64();
            for i in 0..3 {
                let scores: Vec<f64> = (0..3)
                    .map(|j| (0..4).map(|c| proj(&wq, i, head * 4 + c) * proj(&wk, j, head * 4 + c)).sum::<f64>() / 2.0)
                    .collect();
                let z: f64 = scores.iter().map(|s| s.exp()).sum();
                for j in 0..3 {
                    assert!((got[i][j] - scores[j].exp() / z).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn encoder_shapes_masks_and_purity() {
        let cfg = ModelConfig {
            d_model: 16,
            d_ff: 32,
            n_layers: 2,
            ..tiny_config()
        };
        let model = Transformer::<f64>::new(cfg, 2).unwrap();
        let tape = Tape::new();
        let ids = vec![4, 5, 6, 7, 8, 9, 10, 4, 5, 6, 7, 8, 9, 10];
        let enc = model.encoder_forward(&tape, &ids, &[7, 7], &mut Dropout::off()).unwrap();
        assert_eq!(enc.hidden.shape(), vec![2, 7, 16]);
        let h = enc.hidden.value();
        assert_eq!(&h.data()[..7 * 16], &h.data()[7 * 16..]);
        assert_eq!(enc.layer_probs.len(), 2);

        let tape = Tape::new();
        let ids = vec![4, 5, 6, 0, 0, 4, 5, 6, 7, 8];
        let enc = model.encoder_forward(&tape, &ids, &[3, 5], &mut Dropout::off()).unwrap();
        for l in 0..2 {
            for head in 0..2 {
                let p = enc.head_probs(l, head).unwrap().value();
                for i in 0..5 {
                    assert_eq!(p.data()[i * 5 + 3], 0.0);
                    assert_eq!(p.data()[i * 5 + 4], 0.0);
                    let s: f64 = p.data()[i * 5..i * 5 + 5].iter().sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
        let tape = Tape::new();
        assert!(matches!(
            model.encoder_forward(&tape, &[4, 99], &[2], &mut Dropout::off()),
            Err(Error::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn decoder_is_causal_and_shaped() {
        let model = Transformer::<f64>::new(tiny_config(), 3).unwrap();
        let run = |tgt: &[usize]| {
            let tape = Tape::new();
            let enc = model.encoder_forward(&tape, &[4, 5, 6], &[3], &mut Dropout::off()).unwrap();
            let logits = model
                .decoder_forward(
                    &tape,
                    tgt,
                    enc.hidden,
                    &Mask::key_padding(&[3], tgt.len(), 3),
                    &Mask::causal(1, tgt.len()),
                    &mut Dropout::off(),
                )
                .unwrap();
            assert_eq!(logits.shape(), vec![1, tgt.len(), 10]);
            logits.value().data().to_vec()
        };
        let a = run(&[2, 4, 5, 6]);
        let b = run(&[2, 4, 9, 8]);
        assert_eq!(&a[..20], &b[..20]);
        assert_ne!(&a[20..30], &b[20..30]);

        let tape = Tape::new();
        let enc = model.encoder_forward(&tape, &[4, 5, 6], &[3], &mut Dropout::off()).unwrap();
        let bad = Mask::new(1, 2, 2, vec![true; 4]).unwrap();
        assert!(model
            .decoder_forward(&tape, &[2, 4], enc.hidden, &Mask::key_padding(&[3], 2, 3), &bad, &mut Dropout::off())
            .is_err());
        assert!(model
            .decoder_forward(&tape, &[2, 4], enc.hidden, &Mask::key_padding(&[3], 2, 3), &Mask::causal(1, 3), &mut Dropout::off())
            .is_err());
    }

    #[test]
    fn zeroed_output_projection_is_uniform() {
        let mut model = Transformer::<f64>::new(tiny_config(), 4).unwrap();
        let id = model.params().id("out.w").unwrap();
        *model.params_mut().value_mut(id) = Tensor::zeros(&[8, 10]);
        let tape = Tape::new();
        let enc = model.encoder_forward(&tape, &[4, 5], &[2], &mut Dropout::off()).unwrap();
        let logits = model
            .decoder_forward(&tape, &[2, 7], enc.hidden, &Mask::key_padding(&[2], 2, 2), &Mask::causal(1, 2), &mut Dropout::off())
            .unwrap();
        let probs = crate::numerics::softmax_values(&logits.value().as_ref().clone().reshape(&[2, 10]).unwrap(), None).unwrap();
        for p in probs.data() {
            assert!((p - 0.1).abs() < 1e-15);
        }
    }

    fn toy_batch() -> (Batch, ModelConfig) {
        let ex = |s: &str, t: &str, heads: Vec<usize>| {
            let src: Vec<String> = s.split(' ').map(String::from).collect();
            let tree = DependencyTree::new(src.clone(), heads).unwrap();
            ParallelExample::new(src, t.split(' ').map(String::from).collect(), tree).unwrap()
        };
        let exs = vec![ex("a b c", "x y", vec![2, 0, 2]), ex("c a", "y y z", vec![0, 1])];
        let sv = Vocabulary::build(&[vec!["a", "b", "c"]], 12).unwrap();
        let tv = Vocabulary::build(&[vec!["x", "y", "z"]], 10).unwrap();
        let mut cfg = tiny_config();
        cfg.src_vocab = sv.len();
        cfg.tgt_vocab = tv.len();
        (make_batch(&exs, &sv, &tv).unwrap(), cfg)
    }

    #[test]
    fn zero_weights_reduce_to_translation_loss() {
        let (batch, cfg) = toy_batch();
        let model = Transformer::<f64>::new(cfg, 9).unwrap();
        let sup = SupervisionConfig {
            alpha: 0.0,
            beta: 0.0,
            ..Default::default()
        };
        let grads = |s: Option<&SupervisionConfig>| {
            let tape = Tape::new();
            let obj = model.objective(&tape, &batch, s, &mut Dropout::off()).unwrap();
            let g = tape.backward(obj.joint).unwrap();
            let mut store = model.params().clone();
            store.store_grads(&g);
            (obj.breakdown, store)
        };
        let (with, gw) = grads(Some(&sup));
        let (without, go) = grads(None);
        assert_eq!(with.joint.to_bits(), without.joint.to_bits());
        assert!(with.child > 0.0 && with.parent > 0.0);
        for (a, b) in gw.iter().zip(go.iter()) {
            let (a, b) = (a.grad.as_ref().unwrap(), b.grad.as_ref().unwrap());
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn joint_matches_components() {
        let (batch, cfg) = toy_batch();
        let model = Transformer::<f64>::new(cfg, 10).unwrap();
        let sup = SupervisionConfig::default();
        let b = model.evaluate(&batch, Some(&sup)).unwrap();
        let expect = b.translation + 0.4 * b.child + 0.4 * b.parent;
        assert!((b.joint - expect).abs() <= 4.0 * f64::EPSILON * expect);
    }

    #[test]
    fn greedy_decode_limits_and_determinism() {
        let model = Transformer::<f64>::new(tiny_config(), 6).unwrap();
        let sup = SupervisionConfig::default();
        let src = vec![vec![4, 5, 6], vec![7]];
        let one = model.greedy_decode(&src, &sup, 1).unwrap();
        assert!(one.iter().all(|d| d.tokens.len() <= 1));
        let a = model.greedy_decode(&src, &sup, 8).unwrap();
        let b = model.greedy_decode(&src, &sup, 8).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[1].parent_probs, vec![vec![1.0]]);
        assert_eq!(a[0].child_probs.len(), 3);
    }
}
