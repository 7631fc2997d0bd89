//! The five parameter-efficient techniques: LoRA, prefix tuning, prompt
//! tuning, P-tuning and the zero-gated adaptation prompt.
//!
//! Every adapter exposes its tensors through [`HasParams`] with names that
//! match [`AdapterConfig::param_shapes`] exactly, which is what the
//! checkpoint format and parameter accounting rely on.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, SeqLayout, Var};
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::{BaseModel, Forward, ModelConfig};
use crate::rng::Rng;
use crate::tensor::{Float, HasParams, Tensor};

const INIT_STD: f64 = 0.02;

/// Initialisation text for prompt tuning.
pub const PROMPT_INIT_TEXT: &str = "Finish this clinical note:";

/// Attention projection a LoRA pair can target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Projection {
    #[serde(rename = "wq")]
    Q,
    #[serde(rename = "wk")]
    K,
    #[serde(rename = "wv")]
    V,
    #[serde(rename = "wo")]
    O,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Q, Projection::K, Projection::V, Projection::O];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Q => "wq",
            Projection::K => "wk",
            Projection::V => "wv",
            Projection::O => "wo",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown projection {s:?}")))
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub r: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub targets: Vec<Projection>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            r: 16,
            alpha: 32.0,
            dropout: 0.1,
            targets: vec![Projection::Q, Projection::V],
        }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.r as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixConfig {
    pub num_virtual_tokens: usize,
    /// Produce the rows from a shared embedding through a two-layer MLP.
    pub prefix_projection: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptInit {
    Text(String),
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub num_virtual_tokens: usize,
    pub init: PromptInit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reparameterization {
    #[serde(rename = "MLP")]
    Mlp,
    #[serde(rename = "LSTM")]
    Lstm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PTuningConfig {
    pub num_virtual_tokens: usize,
    pub reparameterization: Reparameterization,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptionPromptConfig {
    pub adapter_length: usize,
    /// Number of top layers that receive a prompt, capped at the model depth.
    pub adapter_layers: usize,
}

impl AdaptionPromptConfig {
    pub fn affected_layers(&self, n_layers: usize) -> std::ops::Range<usize> {
        n_layers - self.adapter_layers.min(n_layers)..n_layers
    }
}

/// Technique name as used on the command line and in checkpoint headers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Technique {
    Lora,
    Prefix,
    Prompt,
    Ptuning,
    Adaption,
}

impl Technique {
    pub const ALL: [Technique; 5] = [
        Technique::Lora,
        Technique::Prefix,
        Technique::Prompt,
        Technique::Ptuning,
        Technique::Adaption,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Technique::Lora => "lora",
            Technique::Prefix => "prefix",
            Technique::Prompt => "prompt",
            Technique::Ptuning => "ptuning",
            Technique::Adaption => "adaption",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown PEFT technique {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "technique", rename_all = "lowercase")]
pub enum AdapterConfig {
    Lora(LoraConfig),
    Prefix(PrefixConfig),
    Prompt(PromptConfig),
    Ptuning(PTuningConfig),
    Adaption(AdaptionPromptConfig),
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

impl AdapterConfig {
    pub fn technique(&self) -> Technique {
        match self {
            AdapterConfig::Lora(_) => Technique::Lora,
            AdapterConfig::Prefix(_) => Technique::Prefix,
            AdapterConfig::Prompt(_) => Technique::Prompt,
            AdapterConfig::Ptuning(_) => Technique::Ptuning,
            AdapterConfig::Adaption(_) => Technique::Adaption,
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        match self {
            AdapterConfig::Lora(c) => {
                check(c.r >= 1, || "LoRA rank must be at least 1".into())?;
                check(c.r <= model.d_model, || {
                    format!("LoRA rank {} exceeds d_model {}", c.r, model.d_model)
                })?;
                check(c.alpha > 0.0, || "LoRA alpha must be positive".into())?;
                check((0.0..1.0).contains(&c.dropout), || {
                    format!("dropout {} not in [0, 1)", c.dropout)
                })?;
                check(!c.targets.is_empty(), || {
                    "LoRA needs at least one target projection".into()
                })?;
                let mut t = c.targets.clone();
                t.sort();
                t.dedup();
                check(t.len() == c.targets.len(), || {
                    "duplicate LoRA target".into()
                })
            }
            AdapterConfig::Prefix(c) => check(c.num_virtual_tokens >= 1, || {
                "prefix needs at least one virtual token".into()
            }),
            AdapterConfig::Prompt(c) => check(c.num_virtual_tokens >= 1, || {
                "prompt needs at least one virtual token".into()
            }),
            AdapterConfig::Ptuning(c) => {
                check(c.num_virtual_tokens >= 1, || {
                    "p-tuning needs at least one virtual token".into()
                })?;
                check(c.hidden_size >= 1 && c.num_layers >= 1, || {
                    "p-tuning encoder must be non-empty".into()
                })?;
                check((0.0..1.0).contains(&c.dropout), || {
                    format!("dropout {} not in [0, 1)", c.dropout)
                })
            }
            AdapterConfig::Adaption(c) => {
                check(c.adapter_length >= 1, || {
                    "adaption prompt length must be positive".into()
                })?;
                check(c.adapter_layers >= 1, || {
                    "adaption prompt needs at least one layer".into()
                })
            }
        }
    }

    /// Virtual tokens this adapter prepends to every input sequence.
    pub fn virtual_tokens(&self) -> usize {
        match self {
            AdapterConfig::Prompt(c) => c.num_virtual_tokens,
            AdapterConfig::Ptuning(c) => c.num_virtual_tokens,
            _ => 0,
        }
    }

    /// Every tensor of the adapter, named and ordered as in [`HasParams`].
    pub fn param_shapes(&self, model: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let d = model.d_model;
        let mut out = Vec::new();
        match self {
            AdapterConfig::Lora(c) => {
                for l in 0..model.n_layers {
                    for p in &c.targets {
                        out.push((format!("lora.layers.{l}.{p}.a"), vec![c.r, d]));
                        out.push((format!("lora.layers.{l}.{p}.b"), vec![d, c.r]));
                    }
                }
            }
            AdapterConfig::Prefix(c) => {
                let n = c.num_virtual_tokens;
                if c.prefix_projection {
                    let w = 2 * model.n_layers * d;
                    out.push(("prefix.embedding".into(), vec![n, d]));
                    out.push(("prefix.w1".into(), vec![d, d]));
                    out.push(("prefix.b1".into(), vec![d]));
                    out.push(("prefix.w2".into(), vec![d, w]));
                    out.push(("prefix.b2".into(), vec![w]));
                } else {
                    for l in 0..model.n_layers {
                        out.push((format!("prefix.layers.{l}.keys"), vec![n, d]));
                        out.push((format!("prefix.layers.{l}.values"), vec![n, d]));
                    }
                }
            }
            AdapterConfig::Prompt(c) => {
                out.push(("prompt.rows".into(), vec![c.num_virtual_tokens, d]))
            }
            AdapterConfig::Ptuning(c) => {
                let h = c.hidden_size;
                out.push(("ptuning.seed".into(), vec![c.num_virtual_tokens, d]));
                for l in 0..c.num_layers {
                    let input = if l == 0 { d } else { h };
                    match c.reparameterization {
                        Reparameterization::Mlp => {
                            out.push((format!("ptuning.mlp.{l}.w"), vec![input, h]));
                            out.push((format!("ptuning.mlp.{l}.b"), vec![h]));
                        }
                        Reparameterization::Lstm => {
                            out.push((format!("ptuning.lstm.{l}.w_ih"), vec![input, 4 * h]));
                            out.push((format!("ptuning.lstm.{l}.w_hh"), vec![h, 4 * h]));
                            out.push((format!("ptuning.lstm.{l}.b"), vec![4 * h]));
                        }
                    }
                }
                out.push(("ptuning.out.w".into(), vec![h, d]));
                out.push(("ptuning.out.b".into(), vec![d]));
            }
            AdapterConfig::Adaption(c) => {
                for l in c.affected_layers(model.n_layers) {
                    out.push((
                        format!("adaption.layers.{l}.prompt"),
                        vec![c.adapter_length, d],
                    ));
                    out.push((format!("adaption.layers.{l}.gate"), vec![1]));
                }
            }
        }
        out
    }

    /// Parameter count by enumeration of [`AdapterConfig::param_shapes`].
    pub fn param_count(&self, model: &ModelConfig) -> u64 {
        self.param_shapes(model)
            .iter()
            .map(|(_, s)| s.iter().product::<usize>() as u64)
            .sum()
    }
}

// ---- LoRA ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LoraWeights<T> {
    pub layer: usize,
    pub projection: Projection,
    /// `[r, d_in]`
    pub a: Tensor<T>,
    /// `[d_out, r]`
    pub b: Tensor<T>,
}

/// Low-rank update `ΔW = (alpha / r) · B · A` on each targeted projection of
/// every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    pub config: LoraConfig,
    pub weights: Vec<LoraWeights<T>>,
}

impl<T: Float> LoraAdapter<T> {
    /// `A ~ N(0, 0.02)`, `B = 0`.
    pub fn init(config: LoraConfig, model: &ModelConfig, seed: u64) -> Result<Self> {
        AdapterConfig::Lora(config.clone()).validate(model)?;
        let mut rng = Rng::seeded(seed);
        let d = model.d_model;
        let mut weights = Vec::new();
        for layer in 0..model.n_layers {
            for &projection in &config.targets {
                weights.push(LoraWeights {
                    layer,
                    projection,
                    a: Tensor::gaussian(&[config.r, d], INIT_STD, &mut rng)
                        .with_requires_grad(true),
                    b: Tensor::zeros(&[d, config.r]).with_requires_grad(true),
                });
            }
        }
        Ok(Self { config, weights })
    }

    pub fn targets(&self, p: Projection) -> bool {
        self.config.targets.contains(&p)
    }

    pub fn get(&self, layer: usize, p: Projection) -> Option<&LoraWeights<T>> {
        self.weights
            .iter()
            .find(|w| w.layer == layer && w.projection == p)
    }

    pub(crate) fn delta_var(
        &self,
        g: &mut Graph<T>,
        prefix: &str,
        layer: usize,
        p: Projection,
        x: Var,
        rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let w = self
            .get(layer, p)
            .ok_or_else(|| Error::UntargetedProjection(format!("layer {layer} {p}")))?;
        let name = |n: &str| format!("{prefix}.lora.layers.{layer}.{p}.{n}");
        let a = g.param(&name("a"), &w.a);
        let b = g.param(&name("b"), &w.b);
        let x = match rng {
            Some(rng) if self.config.dropout > 0.0 => g.dropout(x, self.config.dropout, rng)?,
            _ => x,
        };
        let h = g.matmul_t(x, a)?;
        let d = g.matmul_t(h, b)?;
        Ok(g.scale(d, self.config.scaling()))
    }

    /// `(alpha / r) · B · (A · dropout(x))` row by row for `x: [n, d_in]`;
    /// dropout only applies when `rng` is supplied (training mode).
    pub fn delta(
        &self,
        layer: usize,
        p: Projection,
        x: &Tensor<T>,
        rng: Option<&mut Rng>,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.leaf(x);
        let out = self.delta_var(&mut g, "adapter", layer, p, xv, rng)?;
        Ok(g.to_tensor(out))
    }

    /// Dense `[d_in, d_out]` update `(alpha / r) · (B · A)ᵀ`, in the base
    /// model's input-major layout.
    pub fn dense_update(&self, layer: usize, p: Projection) -> Result<Vec<T>> {
        let w = self
            .get(layer, p)
            .ok_or_else(|| Error::UntargetedProjection(format!("layer {layer} {p}")))?;
        let r = self.config.r;
        let (d_out, d_in) = (w.b.shape()[0], w.a.shape()[1]);
        let s = T::of(self.config.scaling());
        let (a, b) = (w.a.data(), w.b.data());
        let mut out = vec![T::zero(); d_in * d_out];
        for i in 0..d_in {
            for o in 0..d_out {
                let mut acc = T::zero();
                for k in 0..r {
                    acc = acc + b[o * r + k] * a[k * d_in + i];
                }
                out[i * d_out + o] = s * acc;
            }
        }
        Ok(out)
    }
}

// ---- prefix tuning ------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum PrefixParams<T> {
    Direct {
        keys: Vec<Tensor<T>>,
        values: Vec<Tensor<T>>,
    },
    Projected {
        embedding: Tensor<T>,
        w1: Tensor<T>,
        b1: Tensor<T>,
        w2: Tensor<T>,
        b2: Tensor<T>,
    },
}

/// Trainable key/value rows prepended to the attention of every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixAdapter<T> {
    pub config: PrefixConfig,
    pub params: PrefixParams<T>,
}

impl<T: Float> PrefixAdapter<T> {
    pub(crate) fn kv_vars(
        &self,
        g: &mut Graph<T>,
        prefix: &str,
        model: &ModelConfig,
        rng: Option<&mut Rng>,
    ) -> Result<Vec<(Var, Var)>> {
        let name = |n: &str| format!("{prefix}.prefix.{n}");
        match &self.params {
            PrefixParams::Direct { keys, values } => Ok((0..model.n_layers)
                .map(|l| {
                    let k = g.param(&name(&format!("layers.{l}.keys")), &keys[l]);
                    let v = g.param(&name(&format!("layers.{l}.values")), &values[l]);
                    (k, v)
                })
                .collect()),
            PrefixParams::Projected {
                embedding,
                w1,
                b1,
                w2,
                b2,
            } => {
                let _ = rng;
                let e = g.param(&name("embedding"), embedding);
                let w1 = g.param(&name("w1"), w1);
                let b1 = g.param(&name("b1"), b1);
                let w2 = g.param(&name("w2"), w2);
                let b2 = g.param(&name("b2"), b2);
                let h = g.matmul(e, w1)?;
                let h = g.add_bias(h, b1)?;
                let h = g.tanh(h);
                let o = g.matmul(h, w2)?;
                let o = g.add_bias(o, b2)?;
                let d = model.d_model;
                (0..model.n_layers)
                    .map(|l| {
                        Ok((
                            g.slice_cols(o, 2 * l * d, d)?,
                            g.slice_cols(o, (2 * l + 1) * d, d)?,
                        ))
                    })
                    .collect()
            }
        }
    }

    /// Eval-mode `(keys, values)` rows for one layer, each
    /// `[num_virtual_tokens, d_model]`.
    pub fn prefix_kv(&self, model: &ModelConfig, layer: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        if layer >= model.n_layers {
            return Err(Error::Config(format!("layer {layer} out of range")));
        }
        let mut g = Graph::new();
        let kv = self.kv_vars(&mut g, "adapter", model, None)?;
        Ok((g.to_tensor(kv[layer].0), g.to_tensor(kv[layer].1)))
    }
}

// ---- prompt tuning ------------------------------------------------------

/// Soft prompt rows prepended to the input embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptAdapter<T> {
    pub config: PromptConfig,
    pub rows: Tensor<T>,
}

// ---- p-tuning -----------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer<T> {
    /// `[input, 4 * hidden]`, gate order input, forget, cell, output.
    pub w_ih: Tensor<T>,
    pub w_hh: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PromptEncoder<T> {
    Mlp(Vec<Dense<T>>),
    Lstm(Vec<LstmLayer<T>>),
}

/// Soft prompt produced by a trainable encoder from seed embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct PTuningAdapter<T> {
    pub config: PTuningConfig,
    pub seed: Tensor<T>,
    pub encoder: PromptEncoder<T>,
    pub out: Dense<T>,
}

impl<T: Float> PTuningAdapter<T> {
    fn encode(&self, g: &mut Graph<T>, prefix: &str, mut rng: Option<&mut Rng>) -> Result<Var> {
        let name = |n: String| format!("{prefix}.ptuning.{n}");
        let p = self.config.dropout;
        let mut x = g.param(&name("seed".into()), &self.seed);
        match &self.encoder {
            PromptEncoder::Mlp(layers) => {
                for (l, layer) in layers.iter().enumerate() {
                    let w = g.param(&name(format!("mlp.{l}.w")), &layer.w);
                    let b = g.param(&name(format!("mlp.{l}.b")), &layer.b);
                    let h = g.matmul(x, w)?;
                    let h = g.add_bias(h, b)?;
                    x = g.relu(h);
                    if let Some(r) = rng.as_deref_mut() {
                        x = g.dropout(x, p, r)?;
                    }
                }
            }
            PromptEncoder::Lstm(layers) => {
                let steps = self.config.num_virtual_tokens;
                let hidden = self.config.hidden_size;
                for (l, layer) in layers.iter().enumerate() {
                    let w_ih = g.param(&name(format!("lstm.{l}.w_ih")), &layer.w_ih);
                    let w_hh = g.param(&name(format!("lstm.{l}.w_hh")), &layer.w_hh);
                    let b = g.param(&name(format!("lstm.{l}.b")), &layer.b);
                    let input_proj = g.matmul(x, w_ih)?;
                    let input_proj = g.add_bias(input_proj, b)?;
                    let mut h = g.constant(&[1, hidden], vec![T::zero(); hidden])?;
                    let mut c = g.constant(&[1, hidden], vec![T::zero(); hidden])?;
                    let mut outputs = Vec::with_capacity(steps);
                    for t in 0..steps {
                        let xt = g.gather_rows(input_proj, &[t])?;
                        let rec = g.matmul(h, w_hh)?;
                        let gates = g.add(xt, rec)?;
                        let i = g.slice_cols(gates, 0, hidden)?;
                        let i = g.sigmoid(i);
                        let f = g.slice_cols(gates, hidden, hidden)?;
                        let f = g.sigmoid(f);
                        let cell = g.slice_cols(gates, 2 * hidden, hidden)?;
                        let cell = g.tanh(cell);
                        let o = g.slice_cols(gates, 3 * hidden, hidden)?;
                        let o = g.sigmoid(o);
                        let keep = g.mul(f, c)?;
                        let write = g.mul(i, cell)?;
                        c = g.add(keep, write)?;
                        let squashed = g.tanh(c);
                        h = g.mul(o, squashed)?;
                        outputs.push(h);
                    }
                    x = g.concat_rows(&outputs)?;
                    if let Some(r) = rng.as_deref_mut() {
                        x = g.dropout(x, p, r)?;
                    }
                }
            }
        }
        let w = g.param(&name("out.w".into()), &self.out.w);
        let b = g.param(&name("out.b".into()), &self.out.b);
        let y = g.matmul(x, w)?;
        Ok(g.add_bias(y, b)?)
    }
}

// ---- adaptation prompt --------------------------------------------------

/// Per-layer prompts whose attention output is scaled by `tanh(gate)`, with
/// every gate starting at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptionPromptAdapter<T> {
    pub config: AdaptionPromptConfig,
    pub first_layer: usize,
    pub prompts: Vec<Tensor<T>>,
    pub gates: Vec<Tensor<T>>,
}

impl<T: Float> AdaptionPromptAdapter<T> {
    pub fn affects(&self, layer: usize) -> bool {
        layer >= self.first_layer && layer < self.first_layer + self.prompts.len()
    }

    pub(crate) fn gated_context(
        &self,
        fwd: &mut Forward<'_, T>,
        prefix: &str,
        layer: usize,
        q: Var,
        layout: SeqLayout,
    ) -> Result<Option<Var>> {
        if !self.affects(layer) {
            return Ok(None);
        }
        let i = layer - self.first_layer;
        let name = |n: &str| format!("{prefix}.adaption.layers.{layer}.{n}");
        let prompt = fwd.g.param(&name("prompt"), &self.prompts[i]);
        let gate = fwd.g.param(&name("gate"), &self.gates[i]);
        let keys = fwd.project(prompt, layer, Projection::K)?;
        let values = fwd.project(prompt, layer, Projection::V)?;
        let extra = fwd.g.attention(q, None, Some((keys, values)), layout)?;
        let gate = fwd.g.tanh(gate);
        Ok(Some(fwd.g.mul(extra, gate)?))
    }

    /// Eval-mode gated context `tanh(gate) · softmax(q·Kᵀ/√d_head)·V` for one
    /// sequence of already-rotated queries `q: [positions, d_model]`, with
    /// `K`, `V` the layer's key/value projections of the prompt rows.
    pub fn forward(&self, base: &BaseModel<T>, layer: usize, q: &Tensor<T>) -> Result<Tensor<T>> {
        if !self.affects(layer) {
            return Err(Error::Config(format!(
                "layer {layer} carries no adaption prompt"
            )));
        }
        let mut g = Graph::new();
        let qv = g.leaf(q);
        let layout = SeqLayout {
            batch: 1,
            seq: q.shape()[0],
            heads: base.config.n_heads,
        };
        let mut fwd = Forward::eval(&mut g, base, None);
        let out = self
            .gated_context(&mut fwd, "adapter", layer, qv, layout)?
            .expect("layer checked");
        Ok(g.to_tensor(out))
    }
}

// ---- the sum type -------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum Adapter<T> {
    Lora(LoraAdapter<T>),
    Prefix(PrefixAdapter<T>),
    Prompt(PromptAdapter<T>),
    Ptuning(PTuningAdapter<T>),
    Adaption(AdaptionPromptAdapter<T>),
}

impl<T: Float> Adapter<T> {
    /// Freshly initialised, trainable adapter. Prompt tuning with text
    /// initialisation needs `vocab` to tokenize the text.
    pub fn init(
        config: &AdapterConfig,
        base: &BaseModel<T>,
        vocab: Option<&Vocab>,
        seed: u64,
    ) -> Result<Self> {
        let model = &base.config;
        config.validate(model)?;
        let mut rng = Rng::seeded(seed);
        let text_rows = match config {
            AdapterConfig::Prompt(PromptConfig {
                num_virtual_tokens,
                init: PromptInit::Text(text),
            }) => {
                let vocab = vocab
                    .ok_or_else(|| Error::Config("text prompt init needs a vocabulary".into()))?;
                let ids = vocab.encode(text);
                if ids.is_empty() {
                    return Err(Error::Config(format!(
                        "prompt init text {text:?} has no tokens"
                    )));
                }
                let d = model.d_model;
                let emb = base.tok_emb.data();
                let rows: Vec<T> = (0..*num_virtual_tokens)
                    .flat_map(|i| {
                        let id = ids[i % ids.len()] as usize;
                        emb[id * d..(id + 1) * d].iter().copied()
                    })
                    .collect();
                Some(rows)
            }
            _ => None,
        };
        let mut adapter = Self::build(config, model, &mut rng)?;
        if let (Some(rows), Adapter::Prompt(p)) = (text_rows, &mut adapter) {
            p.rows.data_mut().copy_from_slice(&rows);
        }
        Ok(adapter)
    }

    fn build(config: &AdapterConfig, model: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let d = model.d_model;
        let gaussian = |shape: &[usize], std: f64, rng: &mut Rng| {
            Tensor::gaussian(shape, std, rng).with_requires_grad(true)
        };
        let zeros = |shape: &[usize]| Tensor::zeros(shape).with_requires_grad(true);
        Ok(match config {
            AdapterConfig::Lora(c) => {
                Adapter::Lora(LoraAdapter::init(c.clone(), model, rng.next_u64())?)
            }
            AdapterConfig::Prefix(c) => {
                let n = c.num_virtual_tokens;
                let params = if c.prefix_projection {
                    let w = 2 * model.n_layers * d;
                    PrefixParams::Projected {
                        embedding: gaussian(&[n, d], INIT_STD, rng),
                        w1: gaussian(&[d, d], 1.0 / (d as f64).sqrt(), rng),
                        b1: zeros(&[d]),
                        w2: gaussian(&[d, w], INIT_STD, rng),
                        b2: zeros(&[w]),
                    }
                } else {
                    let mut keys = Vec::new();
                    let mut values = Vec::new();
                    for _ in 0..model.n_layers {
                        keys.push(gaussian(&[n, d], INIT_STD, rng));
                        values.push(gaussian(&[n, d], INIT_STD, rng));
                    }
                    PrefixParams::Direct { keys, values }
                };
                Adapter::Prefix(PrefixAdapter {
                    config: c.clone(),
                    params,
                })
            }
            AdapterConfig::Prompt(c) => Adapter::Prompt(PromptAdapter {
                config: c.clone(),
                rows: gaussian(&[c.num_virtual_tokens, d], INIT_STD, rng),
            }),
            AdapterConfig::Ptuning(c) => {
                let h = c.hidden_size;
                let seed = gaussian(&[c.num_virtual_tokens, d], INIT_STD, rng);
                let fan = |n: usize| 1.0 / (n as f64).sqrt();
                let encoder = match c.reparameterization {
                    Reparameterization::Mlp => PromptEncoder::Mlp(
                        (0..c.num_layers)
                            .map(|l| {
                                let input = if l == 0 { d } else { h };
                                Dense {
                                    w: gaussian(&[input, h], fan(input), rng),
                                    b: zeros(&[h]),
                                }
                            })
                            .collect(),
                    ),
                    Reparameterization::Lstm => PromptEncoder::Lstm(
                        (0..c.num_layers)
                            .map(|l| {
                                let input = if l == 0 { d } else { h };
                                LstmLayer {
                                    w_ih: gaussian(&[input, 4 * h], fan(input), rng),
                                    w_hh: gaussian(&[h, 4 * h], fan(h), rng),
                                    b: zeros(&[4 * h]),
                                }
                            })
                            .collect(),
                    ),
                };
                let out = Dense {
                    w: gaussian(&[h, d], fan(h), rng),
                    b: zeros(&[d]),
                };
                Adapter::Ptuning(PTuningAdapter {
                    config: c.clone(),
                    seed,
                    encoder,
                    out,
                })
            }
            AdapterConfig::Adaption(c) => {
                let layers = c.affected_layers(model.n_layers);
                let first_layer = layers.start;
                let prompts = layers
                    .clone()
                    .map(|_| gaussian(&[c.adapter_length, d], INIT_STD, rng))
                    .collect();
                let gates = layers.map(|_| zeros(&[1])).collect();
                Adapter::Adaption(AdaptionPromptAdapter {
                    config: c.clone(),
                    first_layer,
                    prompts,
                    gates,
                })
            }
        })
    }

    /// Rebuilds an adapter from tensors named and shaped as in
    /// [`AdapterConfig::param_shapes`].
    pub fn from_named(
        config: &AdapterConfig,
        model: &ModelConfig,
        tensors: Vec<(String, Tensor<T>)>,
    ) -> Result<Self> {
        config.validate(model)?;
        let mut adapter = Self::build(config, model, &mut Rng::seeded(0))?;
        let expected = config.param_shapes(model);
        if expected.len() != tensors.len() {
            return Err(Error::AdapterMismatch(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, t), (slot_name, slot)) in tensors.into_iter().zip(adapter.params_mut()) {
            if name != slot_name || t.shape() != slot.shape() {
                return Err(Error::AdapterMismatch(format!(
                    "unexpected tensor {name} {:?}",
                    t.shape()
                )));
            }
            slot.data_mut().copy_from_slice(t.data());
        }
        Ok(adapter)
    }

    pub fn config(&self) -> AdapterConfig {
        match self {
            Adapter::Lora(a) => AdapterConfig::Lora(a.config.clone()),
            Adapter::Prefix(a) => AdapterConfig::Prefix(a.config.clone()),
            Adapter::Prompt(a) => AdapterConfig::Prompt(a.config.clone()),
            Adapter::Ptuning(a) => AdapterConfig::Ptuning(a.config.clone()),
            Adapter::Adaption(a) => AdapterConfig::Adaption(a.config.clone()),
        }
    }

    pub fn technique(&self) -> Technique {
        self.config().technique()
    }

    /// Checks every tensor against the shapes the config implies for `model`.
    pub fn check_compatible(&self, model: &ModelConfig) -> Result<()> {
        let expected = self.config().param_shapes(model);
        let actual = self.params();
        if expected.len() != actual.len() {
            return Err(Error::AdapterMismatch(format!(
                "{} tensors where the model implies {}",
                actual.len(),
                expected.len()
            )));
        }
        for ((en, es), (an, at)) in expected.iter().zip(&actual) {
            if en != an || es.as_slice() != at.shape() {
                return Err(Error::AdapterMismatch(format!(
                    "{an} {:?} where the model implies {en} {es:?}",
                    at.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Float>(&self) -> Adapter<U> {
        let mut out =
            Adapter::<U>::build(&self.config(), &self.implied_model(), &mut Rng::seeded(0))
                .expect("config came from a built adapter");
        for ((_, dst), (_, src)) in out.params_mut().into_iter().zip(self.params()) {
            *dst = src.cast();
        }
        out
    }

    /// Smallest model config consistent with the adapter's tensor shapes.
    fn implied_model(&self) -> ModelConfig {
        let (d, layers) = match self {
            Adapter::Lora(a) => (
                a.weights[0].a.shape()[1],
                a.weights.iter().map(|w| w.layer).max().unwrap_or(0) + 1,
            ),
            Adapter::Prefix(a) => match &a.params {
                PrefixParams::Direct { keys, .. } => (keys[0].shape()[1], keys.len()),
                PrefixParams::Projected { embedding, b2, .. } => {
                    let d = embedding.shape()[1];
                    (d, b2.len() / (2 * d))
                }
            },
            Adapter::Prompt(a) => (a.rows.shape()[1], 1),
            Adapter::Ptuning(a) => (a.seed.shape()[1], 1),
            Adapter::Adaption(a) => (a.prompts[0].shape()[1], a.first_layer + a.prompts.len()),
        };
        ModelConfig {
            d_model: d,
            n_layers: layers,
            n_heads: 1,
            d_ff: 1,
            vocab_size: 2,
            max_seq_len: 1,
            rms_eps: 1e-5,
        }
    }

    /// Virtual token rows for prompt-family adapters.
    pub(crate) fn virtual_rows(
        &self,
        g: &mut Graph<T>,
        prefix: &str,
        _base: &BaseModel<T>,
        rng: Option<&mut Rng>,
    ) -> Result<Option<Var>> {
        match self {
            Adapter::Prompt(p) => Ok(Some(g.param(&format!("{prefix}.prompt.rows"), &p.rows))),
            Adapter::Ptuning(p) => Ok(Some(p.encode(g, prefix, rng)?)),
            _ => Ok(None),
        }
    }

    /// Eval-mode virtual token embeddings `[num_virtual_tokens, d_model]`
    /// for prompt tuning and P-tuning; `None` for other techniques.
    pub fn virtual_tokens(&self, base: &BaseModel<T>) -> Result<Option<Tensor<T>>> {
        let mut g = Graph::new();
        Ok(self
            .virtual_rows(&mut g, "adapter", base, None)?
            .map(|v| g.to_tensor(v)))
    }
}

impl<T: Float> HasParams<T> for Adapter<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
        match self {
            Adapter::Lora(a) => {
                for w in &a.weights {
                    out.push((format!("lora.layers.{}.{}.a", w.layer, w.projection), &w.a));
                    out.push((format!("lora.layers.{}.{}.b", w.layer, w.projection), &w.b));
                }
            }
            Adapter::Prefix(a) => match &a.params {
                PrefixParams::Direct { keys, values } => {
                    for (l, (k, v)) in keys.iter().zip(values).enumerate() {
                        out.push((format!("prefix.layers.{l}.keys"), k));
                        out.push((format!("prefix.layers.{l}.values"), v));
                    }
                }
                PrefixParams::Projected {
                    embedding,
                    w1,
                    b1,
                    w2,
                    b2,
                } => out.extend([
                    ("prefix.embedding".to_string(), embedding),
                    ("prefix.w1".to_string(), w1),
                    ("prefix.b1".to_string(), b1),
                    ("prefix.w2".to_string(), w2),
                    ("prefix.b2".to_string(), b2),
                ]),
            },
            Adapter::Prompt(a) => out.push(("prompt.rows".into(), &a.rows)),
            Adapter::Ptuning(a) => {
                out.push(("ptuning.seed".into(), &a.seed));
                match &a.encoder {
                    PromptEncoder::Mlp(layers) => {
                        for (l, d) in layers.iter().enumerate() {
                            out.push((format!("ptuning.mlp.{l}.w"), &d.w));
                            out.push((format!("ptuning.mlp.{l}.b"), &d.b));
                        }
                    }
                    PromptEncoder::Lstm(layers) => {
                        for (l, x) in layers.iter().enumerate() {
                            out.push((format!("ptuning.lstm.{l}.w_ih"), &x.w_ih));
                            out.push((format!("ptuning.lstm.{l}.w_hh"), &x.w_hh));
                            out.push((format!("ptuning.lstm.{l}.b"), &x.b));
                        }
                    }
                }
                out.push(("ptuning.out.w".into(), &a.out.w));
                out.push(("ptuning.out.b".into(), &a.out.b));
            }
            Adapter::Adaption(a) => {
                for (i, (p, g)) in a.prompts.iter().zip(&a.gates).enumerate() {
                    let l = a.first_layer + i;
                    out.push((format!("adaption.layers.{l}.prompt"), p));
                    out.push((format!("adaption.layers.{l}.gate"), g));
                }
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        match self {
            Adapter::Lora(a) => {
                for w in &mut a.weights {
                    out.push((
                        format!("lora.layers.{}.{}.a", w.layer, w.projection),
                        &mut w.a,
                    ));
                    out.push((
                        format!("lora.layers.{}.{}.b", w.layer, w.projection),
                        &mut w.b,
                    ));
                }
            }
            Adapter::Prefix(a) => match &mut a.params {
                PrefixParams::Direct { keys, values } => {
                    for (l, (k, v)) in keys.iter_mut().zip(values).enumerate() {
                        out.push((format!("prefix.layers.{l}.keys"), k));
                        out.push((format!("prefix.layers.{l}.values"), v));
                    }
                }
                PrefixParams::Projected {
                    embedding,
                    w1,
                    b1,
                    w2,
                    b2,
                } => out.extend([
                    ("prefix.embedding".to_string(), embedding),
                    ("prefix.w1".to_string(), w1),
                    ("prefix.b1".to_string(), b1),
                    ("prefix.w2".to_string(), w2),
                    ("prefix.b2".to_string(), b2),
                ]),
            },
            Adapter::Prompt(a) => out.push(("prompt.rows".into(), &mut a.rows)),
            Adapter::Ptuning(a) => {
                out.push(("ptuning.seed".into(), &mut a.seed));
                match &mut a.encoder {
                    PromptEncoder::Mlp(layers) => {
                        for (l, d) in layers.iter_mut().enumerate() {
                            out.push((format!("ptuning.mlp.{l}.w"), &mut d.w));
                            out.push((format!("ptuning.mlp.{l}.b"), &mut d.b));
                        }
                    }
                    PromptEncoder::Lstm(layers) => {
                        for (l, x) in layers.iter_mut().enumerate() {
                            out.push((format!("ptuning.lstm.{l}.w_ih"), &mut x.w_ih));
                            out.push((format!("ptuning.lstm.{l}.w_hh"), &mut x.w_hh));
                            out.push((format!("ptuning.lstm.{l}.b"), &mut x.b));
                        }
                    }
                }
                out.push(("ptuning.out.w".into(), &mut a.out.w));
                out.push(("ptuning.out.b".into(), &mut a.out.b));
            }
            Adapter::Adaption(a) => {
                let first = a.first_layer;
                for (i, (p, g)) in a.prompts.iter_mut().zip(&mut a.gates).enumerate() {
                    let l = first + i;
                    out.push((format!("adaption.layers.{l}.prompt"), p));
                    out.push((format!("adaption.layers.{l}.gate"), g));
                }
            }
        }
        out
    }
}
