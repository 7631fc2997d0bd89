//! LLaMA-style decoder: RMS-normalised pre-norm blocks with rotary
//! attention and a SwiGLU feed-forward, plus the classification head used in
//! downstream fine-tuning.
//!
//! Weights are stored input-major: a projection `W` of shape `[d_in, d_out]`
//! maps a row batch `x: [n, d_in]` to `x · W`.

use serde::{Deserialize, Serialize};

use crate::adapters::{Adapter, Projection};
use crate::autograd::{Graph, SeqLayout, Var};
use crate::data::TaskSpec;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::stacking::{AdapterStack, SlotKind};
use crate::tensor::{prefixed, prefixed_mut, Float, HasParams, Tensor};

pub type TokenId = u32;
pub const PAD_ID: TokenId = 0;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub rms_eps: f64,
}

impl Default for ModelConfig {
    /// Desk-scale configuration.
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 128,
            rms_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Shapes of the 7B LLaMA checkpoint, for parameter accounting only.
    pub fn llama_7b() -> Self {
        Self {
            vocab_size: 32000,
            d_model: 4096,
            n_layers: 32,
            n_heads: 32,
            d_ff: 11008,
            max_seq_len: 2048,
            rms_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size < 2 {
            return fail(format!("vocab_size {} < 2", self.vocab_size));
        }
        if self.max_seq_len < 1 || self.d_model < 1 || self.n_layers < 1 || self.d_ff < 1 {
            return fail("dimensions must be positive".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return fail(format!(
                "head dimension {} must be even for rotary embedding",
                self.head_dim()
            ));
        }
        if !(self.rms_eps > 0.0) {
            return fail("rms_eps must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Every base parameter in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut out = vec![("tok_emb".to_string(), vec![self.vocab_size, d])];
        for l in 0..self.n_layers {
            let p = |n: &str| format!("layers.{l}.{n}");
            out.push((p("attn_norm"), vec![d]));
            for proj in Projection::ALL {
                out.push((p(proj.name()), vec![d, d]));
            }
            out.push((p("ffn_norm"), vec![d]));
            out.push((p("w_gate"), vec![d, f]));
            out.push((p("w_up"), vec![d, f]));
            out.push((p("w_down"), vec![f, d]));
        }
        out.push(("final_norm".to_string(), vec![d]));
        out.push(("lm_head".to_string(), vec![d, self.vocab_size]));
        out
    }

    /// Base parameter count by enumeration of [`ModelConfig::param_shapes`].
    pub fn param_count(&self) -> u64 {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>() as u64)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ffn_norm: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

impl<T: Float> Layer<T> {
    pub fn projection(&self, p: Projection) -> &Tensor<T> {
        match p {
            Projection::Q => &self.wq,
            Projection::K => &self.wk,
            Projection::V => &self.wv,
            Projection::O => &self.wo,
        }
    }

    pub fn projection_mut(&mut self, p: Projection) -> &mut Tensor<T> {
        match p {
            Projection::Q => &mut self.wq,
            Projection::K => &mut self.wk,
            Projection::V => &mut self.wv,
            Projection::O => &mut self.wo,
        }
    }

    fn cast<U: Float>(&self) -> Layer<U> {
        Layer {
            attn_norm: self.attn_norm.cast(),
            wq: self.wq.cast(),
            wk: self.wk.cast(),
            wv: self.wv.cast(),
            wo: self.wo.cast(),
            ffn_norm: self.ffn_norm.cast(),
            w_gate: self.w_gate.cast(),
            w_up: self.w_up.cast(),
            w_down: self.w_down.cast(),
        }
    }
}

/// The pretrained decoder. Frozen (no gradient tracking) unless explicitly
/// unfrozen for full fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel<T> {
    pub config: ModelConfig,
    pub tok_emb: Tensor<T>,
    pub layers: Vec<Layer<T>>,
    pub final_norm: Tensor<T>,
    pub lm_head: Tensor<T>,
}

impl<T: Float> BaseModel<T> {
    /// Gaussian(0, 0.02) weights, unit norm gains, drawn in storage order
    /// from one seeded stream.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::seeded(seed);
        let (d, f) = (config.d_model, config.d_ff);
        let tok_emb = Tensor::gaussian(&[config.vocab_size, d], INIT_STD, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| Layer {
                attn_norm: Tensor::ones(&[d]),
                wq: Tensor::gaussian(&[d, d], INIT_STD, &mut rng),
                wk: Tensor::gaussian(&[d, d], INIT_STD, &mut rng),
                wv: Tensor::gaussian(&[d, d], INIT_STD, &mut rng),
                wo: Tensor::gaussian(&[d, d], INIT_STD, &mut rng),
                ffn_norm: Tensor::ones(&[d]),
                w_gate: Tensor::gaussian(&[d, f], INIT_STD, &mut rng),
                w_up: Tensor::gaussian(&[d, f], INIT_STD, &mut rng),
                w_down: Tensor::gaussian(&[f, d], INIT_STD, &mut rng),
            })
            .collect();
        let final_norm = Tensor::ones(&[d]);
        let lm_head = Tensor::gaussian(&[d, config.vocab_size], INIT_STD, &mut rng);
        Ok(Self {
            config,
            tok_emb,
            layers,
            final_norm,
            lm_head,
        })
    }

    /// Rebuilds a model from named tensors laid out as in
    /// [`ModelConfig::param_shapes`].
    pub fn from_named(config: ModelConfig, mut tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} base tensors, found {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for ((name, shape), (tn, t)) in shapes.iter().zip(&tensors) {
            if name != tn || shape.as_slice() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {tn} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.drain(..).map(|(_, t)| t);
        let mut next = || it.next().expect("length checked");
        let tok_emb = next();
        let layers = (0..config.n_layers)
            .map(|_| Layer {
                attn_norm: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                ffn_norm: next(),
                w_gate: next(),
                w_up: next(),
                w_down: next(),
            })
            .collect();
        let final_norm = next();
        let lm_head = next();
        Ok(Self {
            config,
            tok_emb,
            layers,
            final_norm,
            lm_head,
        })
    }

    pub fn cast<U: Float>(&self) -> BaseModel<U> {
        BaseModel {
            config: self.config.clone(),
            tok_emb: self.tok_emb.cast(),
            layers: self.layers.iter().map(Layer::cast).collect(),
            final_norm: self.final_norm.cast(),
            lm_head: self.lm_head.cast(),
        }
    }

    /// Digest over every parameter's bytes, for freeze checks.
    pub fn checksum(&self) -> u64 {
        use std::hash::Hasher;
        let mut h = fnv::FnvHasher::default();
        for (_, t) in self.params() {
            h.write_u64(t.digest());
        }
        h.finish()
    }
}

impl<T: Float> HasParams<T> for BaseModel<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb)];
        for (l, layer) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("layers.{l}.{n}");
            out.extend([
                (p("attn_norm"), &layer.attn_norm),
                (p("wq"), &layer.wq),
                (p("wk"), &layer.wk),
                (p("wv"), &layer.wv),
                (p("wo"), &layer.wo),
                (p("ffn_norm"), &layer.ffn_norm),
                (p("w_gate"), &layer.w_gate),
                (p("w_up"), &layer.w_up),
                (p("w_down"), &layer.w_down),
            ]);
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        prefixed("base", out)
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![("tok_emb".to_string(), &mut self.tok_emb)];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let p = |n: &str| format!("layers.{l}.{n}");
            out.extend([
                (p("attn_norm"), &mut layer.attn_norm),
                (p("wq"), &mut layer.wq),
                (p("wk"), &mut layer.wk),
                (p("wv"), &mut layer.wv),
                (p("wo"), &mut layer.wo),
                (p("ffn_norm"), &mut layer.ffn_norm),
                (p("w_gate"), &mut layer.w_gate),
                (p("w_up"), &mut layer.w_up),
                (p("w_down"), &mut layer.w_down),
            ]);
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        out.push(("lm_head".to_string(), &mut self.lm_head));
        prefixed_mut("base", out)
    }
}

/// Linear classifier over the pooled hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<T> {
    pub w: Tensor<T>,
    pub bias: Tensor<T>,
    pub task: TaskSpec,
}

impl<T: Float> ClassifierHead<T> {
    /// `w ~ N(0, 0.02)`, zero bias, trainable.
    pub fn init(task: TaskSpec, d_model: usize, seed: u64) -> Self {
        let mut rng = Rng::seeded(seed);
        let n = task.n_outputs();
        Self {
            w: Tensor::gaussian(&[d_model, n], INIT_STD, &mut rng).with_requires_grad(true),
            bias: Tensor::zeros(&[n]).with_requires_grad(true),
            task,
        }
    }

    pub fn n_outputs(&self) -> usize {
        self.task.n_outputs()
    }

    pub fn cast<U: Float>(&self) -> ClassifierHead<U> {
        ClassifierHead {
            w: self.w.cast(),
            bias: self.bias.cast(),
            task: self.task.clone(),
        }
    }
}

impl<T: Float> HasParams<T> for ClassifierHead<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("head.w".into(), &self.w), ("head.bias".into(), &self.bias)]
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            ("head.w".into(), &mut self.w),
            ("head.bias".into(), &mut self.bias),
        ]
    }
}

/// Right-padded batch of token sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    ids: Vec<TokenId>,
    lengths: Vec<usize>,
    seq: usize,
}

impl TokenBatch {
    /// Pads each sequence with [`PAD_ID`] to the longest one, truncating
    /// (keeping the beginning) at `max_len`.
    pub fn from_sequences<S: AsRef<[TokenId]>>(seqs: &[S], max_len: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let lengths: Vec<usize> = seqs.iter().map(|s| s.as_ref().len().min(max_len)).collect();
        let seq = lengths.iter().copied().max().unwrap_or(0).max(1);
        let mut ids = vec![PAD_ID; seqs.len() * seq];
        for (b, s) in seqs.iter().enumerate() {
            let n = lengths[b];
            ids[b * seq..b * seq + n].copy_from_slice(&s.as_ref()[..n]);
        }
        Ok(Self { ids, lengths, seq })
    }

    /// Batch from an already padded `[batch, seq]` block; each length is the
    /// position after the last non-pad token.
    pub fn from_padded(ids: Vec<TokenId>, batch: usize, seq: usize) -> Result<Self> {
        if batch == 0 || seq == 0 || ids.len() != batch * seq {
            return Err(Error::Data(format!(
                "{} ids do not form a {batch}x{seq} batch",
                ids.len()
            )));
        }
        let lengths = ids
            .chunks(seq)
            .map(|row| row.iter().rposition(|&t| t != PAD_ID).map_or(0, |p| p + 1))
            .collect();
        Ok(Self { ids, lengths, seq })
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn row(&self, b: usize) -> &[TokenId] {
        &self.ids[b * self.seq..(b + 1) * self.seq]
    }
}

/// Result of running the decoder stack.
pub(crate) struct Encoded {
    /// Final-normed hidden states `[batch * positions, d_model]`.
    pub hidden: Var,
    /// Positions per sequence, virtual tokens included.
    pub positions: usize,
    /// Virtual tokens prepended to every sequence.
    pub n_virtual: usize,
}

/// One forward pass over a base model and an optional adapter stack.
pub(crate) struct Forward<'a, T: Float> {
    pub g: &'a mut Graph<T>,
    pub base: &'a BaseModel<T>,
    pub stack: Option<&'a AdapterStack<T>>,
    /// Present in training mode; drives dropout.
    pub rng: Option<&'a mut Rng>,
}

impl<'a, T: Float> Forward<'a, T> {
    pub fn eval(
        g: &'a mut Graph<T>,
        base: &'a BaseModel<T>,
        stack: Option<&'a AdapterStack<T>>,
    ) -> Self {
        Self {
            g,
            base,
            stack,
            rng: None,
        }
    }

    fn base_param(&mut self, name: &str, t: &Tensor<T>) -> Var {
        self.g.param(&format!("base.{name}"), t)
    }

    fn slots(&self) -> Vec<(SlotKind, &'a Adapter<T>)> {
        self.stack.map(|s| s.adapters()).unwrap_or_default()
    }

    /// `x · W` for a base attention projection plus every LoRA delta the
    /// stack places on it.
    pub fn project(&mut self, x: Var, layer: usize, p: Projection) -> Result<Var> {
        let base = self.base;
        let w = self.base_param(
            &format!("layers.{layer}.{}", p.name()),
            base.layers[layer].projection(p),
        );
        let mut y = self.g.matmul(x, w)?;
        for (kind, adapter) in self.slots() {
            if let Adapter::Lora(lora) = adapter {
                if lora.targets(p) {
                    let delta = lora.delta_var(
                        self.g,
                        kind.prefix(),
                        layer,
                        p,
                        x,
                        self.rng.as_deref_mut(),
                    )?;
                    y = self.g.add(y, delta)?;
                }
            }
        }
        Ok(y)
    }

    pub fn encode(&mut self, batch: &TokenBatch) -> Result<Encoded> {
        let base = self.base;
        let cfg = &base.config;
        let (bsz, seq) = (batch.batch(), batch.seq());
        if let Some(&bad) = batch.ids().iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                vocab: cfg.vocab_size,
            });
        }

        // Virtual tokens from prompt-family adapters, domain slot first.
        let mut virtual_parts = Vec::new();
        for (kind, adapter) in self.slots() {
            if let Some(rows) =
                adapter.virtual_rows(self.g, kind.prefix(), base, self.rng.as_deref_mut())?
            {
                virtual_parts.push(rows);
            }
        }
        let n_virtual: usize = virtual_parts.iter().map(|&v| self.g.shape(v)[0]).sum();
        let positions = seq + n_virtual;
        if positions > cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: positions,
                max: cfg.max_seq_len,
            });
        }

        let emb = self.base_param("tok_emb", &base.tok_emb);
        let ids: Vec<usize> = batch.ids().iter().map(|&t| t as usize).collect();
        let mut x = self.g.embedding(emb, &ids)?;
        if n_virtual > 0 {
            let mut parts = virtual_parts;
            parts.push(x);
            let joined = self.g.concat_rows(&parts)?;
            let idx: Vec<usize> = (0..bsz)
                .flat_map(|b| (0..n_virtual).chain((0..seq).map(move |t| n_virtual + b * seq + t)))
                .collect();
            x = self.g.gather_rows(joined, &idx)?;
        }

        let layout = SeqLayout {
            batch: bsz,
            seq: positions,
            heads: cfg.n_heads,
        };
        let rope_pos: Vec<usize> = (0..bsz).flat_map(|_| 0..positions).collect();

        // Prefix rows per slot, all layers, computed once.
        let mut prefixes = Vec::new();
        for (kind, adapter) in self.slots() {
            if let Adapter::Prefix(prefix) = adapter {
                prefixes.push(prefix.kv_vars(
                    self.g,
                    kind.prefix(),
                    cfg,
                    self.rng.as_deref_mut(),
                )?);
            }
        }

        for l in 0..cfg.n_layers {
            let layer = &base.layers[l];
            let norm_w = self.base_param(&format!("layers.{l}.attn_norm"), &layer.attn_norm);
            let h = self.g.rmsnorm(x, norm_w, cfg.rms_eps)?;
            let q = self.project(h, l, Projection::Q)?;
            let k = self.project(h, l, Projection::K)?;
            let v = self.project(h, l, Projection::V)?;
            let q = self.g.rope(q, &rope_pos, cfg.n_heads)?;
            let k = self.g.rope(k, &rope_pos, cfg.n_heads)?;

            let shared = match prefixes.len() {
                0 => None,
                1 => Some(prefixes[0][l]),
                _ => {
                    let ks: Vec<Var> = prefixes.iter().map(|p| p[l].0).collect();
                    let vs: Vec<Var> = prefixes.iter().map(|p| p[l].1).collect();
                    Some((self.g.concat_rows(&ks)?, self.g.concat_rows(&vs)?))
                }
            };
            let mut ctx = self.g.attention(q, Some((k, v)), shared, layout)?;

            for (kind, adapter) in self.slots() {
                if let Adapter::Adaption(ap) = adapter {
                    if let Some(extra) = ap.gated_context(self, kind.prefix(), l, q, layout)? {
                        ctx = self.g.add(ctx, extra)?;
                    }
                }
            }

            let o = self.project(ctx, l, Projection::O)?;
            x = self.g.add(x, o)?;

            let layer = &base.layers[l];
            let norm_w = self.base_param(&format!("layers.{l}.ffn_norm"), &layer.ffn_norm);
            let h = self.g.rmsnorm(x, norm_w, cfg.rms_eps)?;
            let w_gate = self.base_param(&format!("layers.{l}.w_gate"), &layer.w_gate);
            let w_up = self.base_param(&format!("layers.{l}.w_up"), &layer.w_up);
            let w_down = self.base_param(&format!("layers.{l}.w_down"), &layer.w_down);
            let gate = self.g.matmul(h, w_gate)?;
            let gate = self.g.silu(gate);
            let up = self.g.matmul(h, w_up)?;
            let act = self.g.mul(gate, up)?;
            let down = self.g.matmul(act, w_down)?;
            x = self.g.add(x, down)?;
        }
        let norm_w = self.base_param("final_norm", &base.final_norm);
        let hidden = self.g.rmsnorm(x, norm_w, cfg.rms_eps)?;
        Ok(Encoded {
            hidden,
            positions,
            n_virtual,
        })
    }

    /// Logits for every position, virtual ones included:
    /// `[batch * positions, vocab]`.
    pub fn lm_logits(&mut self, batch: &TokenBatch) -> Result<(Var, Encoded)> {
        let enc = self.encode(batch)?;
        let base = self.base;
        let head = self.base_param("lm_head", &base.lm_head);
        let logits = self.g.matmul(enc.hidden, head)?;
        Ok((logits, enc))
    }

    /// Head outputs `[batch, n_outputs]` from the hidden state of each
    /// sequence's last real token.
    pub fn classify(&mut self, head: &ClassifierHead<T>, batch: &TokenBatch) -> Result<Var> {
        if let Some(b) = batch.lengths().iter().position(|&n| n == 0) {
            return Err(Error::EmptySequence(b));
        }
        let enc = self.encode(batch)?;
        let idx: Vec<usize> = batch
            .lengths()
            .iter()
            .enumerate()
            .map(|(b, &n)| b * enc.positions + enc.n_virtual + n - 1)
            .collect();
        let pooled = self.g.gather_rows(enc.hidden, &idx)?;
        let w = self.g.param("head.w", &head.w);
        let bias = self.g.param("head.bias", &head.bias);
        let z = self.g.matmul(pooled, w)?;
        Ok(self.g.add_bias(z, bias)?)
    }
}

/// Next-token targets aligned with [`Forward::lm_logits`] rows: virtual
/// positions, the last real token and padding are masked.
pub(crate) fn lm_targets(batch: &TokenBatch, enc: &Encoded) -> Vec<Option<usize>> {
    let mut out = Vec::with_capacity(batch.batch() * enc.positions);
    for b in 0..batch.batch() {
        let row = batch.row(b);
        let len = batch.lengths()[b];
        out.extend(std::iter::repeat(None).take(enc.n_virtual));
        for t in 0..batch.seq() {
            out.push((t + 1 < len).then(|| row[t + 1] as usize));
        }
    }
    out
}

/// Eval-mode logits `[batch, seq, vocab]` for the real token positions.
pub fn forward_lm<T: Float>(
    base: &BaseModel<T>,
    batch: &TokenBatch,
    stack: Option<&AdapterStack<T>>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let mut fwd = Forward::eval(&mut g, base, stack);
    let (logits, enc) = fwd.lm_logits(batch)?;
    let vocab = base.config.vocab_size;
    let all = g.value(logits);
    let mut data = Vec::with_capacity(batch.batch() * batch.seq() * vocab);
    for b in 0..batch.batch() {
        let start = (b * enc.positions + enc.n_virtual) * vocab;
        data.extend_from_slice(&all[start..start + batch.seq() * vocab]);
    }
    Ok(Tensor::from_vec(
        &[batch.batch(), batch.seq(), vocab],
        data,
    )?)
}

/// Eval-mode classifier outputs `[batch, n_outputs]`.
pub fn forward_classify<T: Float>(
    base: &BaseModel<T>,
    head: &ClassifierHead<T>,
    batch: &TokenBatch,
    stack: Option<&AdapterStack<T>>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let out = Forward::eval(&mut g, base, stack).classify(head, batch)?;
    Ok(g.to_tensor(out))
}

/// `x / sqrt(mean(x²) + eps) ⊙ weight` over the last dimension.
pub fn rmsnorm<T: Float>(x: &Tensor<T>, weight: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (xv, wv) = (g.leaf(x), g.leaf(weight));
    let y = g.rmsnorm(xv, wv, eps)?;
    Ok(Tensor::from_vec(x.shape(), g.value(y).to_vec())?)
}

/// Rotates `q` and `k` (`[positions, heads * head_dim]`) to the given
/// absolute positions.
pub fn rotary_apply<T: Float>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    positions: &[usize],
    heads: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let (qv, kv) = (g.leaf(q), g.leaf(k));
    let qr = g.rope(qv, positions, heads)?;
    let kr = g.rope(kv, positions, heads)?;
    Ok((g.to_tensor(qr), g.to_tensor(kr)))
}

/// Optional extras for [`attention`].
#[derive(Default)]
pub struct AttentionExtras<'a, T> {
    /// Key/value rows prepended to the causal keys, visible to every query.
    pub prefix: Option<(&'a Tensor<T>, &'a Tensor<T>)>,
    /// Prompt keys/values and a gate: adds
    /// `tanh(gate) · softmax(q·Kᵀ/√d_head)·V` over the prompt rows alone.
    pub gated_prompt: Option<(&'a Tensor<T>, &'a Tensor<T>, T)>,
}

/// Causal multi-head attention over one sequence `[positions, d]`.
pub fn attention<T: Float>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    extras: AttentionExtras<'_, T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.leaf(q), g.leaf(k), g.leaf(v));
    let layout = SeqLayout {
        batch: 1,
        seq: q.shape()[0],
        heads,
    };
    let shared = extras.prefix.map(|(pk, pv)| (g.leaf(pk), g.leaf(pv)));
    let mut ctx = g.attention(qv, Some((kv, vv)), shared, layout)?;
    if let Some((pk, pv, gate)) = extras.gated_prompt {
        let kv = (g.leaf(pk), g.leaf(pv));
        let extra = g.attention(qv, None, Some(kv), layout)?;
        let gate = g.constant(&[1], vec![gate.tanh()])?;
        let extra = g.mul(extra, gate)?;
        ctx = g.add(ctx, extra)?;
    }
    Ok(g.to_tensor(ctx))
}
