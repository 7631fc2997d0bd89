//! Domain-adaptive language-model pretraining and downstream classification
//! fine-tuning with AdamW, a warmup-then-linear-decay schedule, gradient
//! accumulation and global-norm clipping.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{Corpus, Example, Label, Split, TaskKind, TaskSpec, Vocab};
use crate::error::{Error, Result};
use crate::metrics::{auroc_binary, auroc_multiclass, auroc_multilabel, perplexity};
use crate::model::{lm_targets, BaseModel, Forward, TokenBatch, TokenId};
use crate::rng::Rng;
use crate::stacking::AdapterStack;
use crate::tensor::{Float, HasParams, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    /// Capped to the model's own maximum.
    pub max_seq_len: usize,
    pub grad_accum_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    /// Stops after this many optimizer steps; the schedule spans
    /// `min(max_steps, epochs × steps per epoch)`.
    pub max_steps: Option<usize>,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            stage: Stage::Pretrain,
            learning_rate: 3e-4,
            warmup_ratio: 0.06,
            max_seq_len: 512,
            grad_accum_steps: 4,
            batch_size: 10,
            epochs: 3,
            seed: 0,
            weight_decay: 0.0,
            max_grad_norm: Some(1.0),
            max_steps: None,
        }
    }

    pub fn finetune() -> Self {
        Self {
            stage: Stage::Finetune,
            learning_rate: 5e-5,
            grad_accum_steps: 10,
            epochs: 5,
            ..Self::pretrain()
        }
    }

    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::Pretrain => Self::pretrain(),
            Stage::Finetune => Self::finetune(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must be in [0, 1]");
        }
        if self.batch_size == 0
            || self.grad_accum_steps == 0
            || self.epochs == 0
            || self.max_seq_len < 2
        {
            return bad("batch_size, grad_accum_steps and epochs must be positive and max_seq_len at least 2");
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be positive");
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak_lr` over `ceil(warmup_ratio · total)`
/// steps, then linear decay to 0 at `total_steps`.
pub fn lr_schedule(
    step: usize,
    total_steps: usize,
    warmup_ratio: f64,
    peak_lr: f64,
) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Training("schedule over zero steps".into()));
    }
    if step > total_steps {
        return Err(Error::Training(format!(
            "step {step} beyond schedule of {total_steps}"
        )));
    }
    let warmup = (warmup_ratio * total_steps as f64).ceil() as usize;
    if step < warmup {
        return Ok(peak_lr * step as f64 / warmup as f64);
    }
    if total_steps == warmup {
        return Ok(peak_lr);
    }
    Ok(peak_lr * (total_steps - step) as f64 / (total_steps - warmup) as f64)
}

/// Decoupled-weight-decay Adam keyed by parameter name.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u32,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            moments: HashMap::new(),
        }
    }

    /// Applies one update to every trainable tensor holding a gradient and
    /// clears the gradients.
    pub fn step<T: Float>(&mut self, params: &mut [(String, &mut Tensor<T>)], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, t) in params.iter_mut() {
            if !t.requires_grad() {
                continue;
            }
            let Some(grad) = t
                .grad()
                .map(|g| g.iter().map(|x| x.f64()).collect::<Vec<f64>>())
            else {
                continue;
            };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            for (i, x) in t.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                let w = x.f64();
                *x = T::of(w - lr * (update + self.weight_decay * w));
            }
            t.zero_grad();
        }
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Float>(params: &mut [(String, &mut Tensor<T>)], max_norm: f64) -> f64 {
    let sq: f64 = params
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter().map(|x| x.f64() * x.f64()))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / (norm + 1e-6));
        for (_, t) in params.iter_mut() {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|x| *x = *x * s);
            }
        }
    }
    norm
}

// ---- history ------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Perplexity (pretraining) or AUROC in percent (fine-tuning).
    pub train_metric: f64,
    pub eval_metric: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
    /// Test metric of the kept parameters (fine-tuning only).
    pub test_metric: Option<f64>,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Line<'a> {
    Step(&'a StepRecord),
    Epoch(&'a EpochRecord),
}

impl RunHistory {
    /// One JSON object per step and per epoch, each tagged with `kind`.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = Vec::new();
        let mut epochs = self.epochs.iter().peekable();
        for s in &self.steps {
            while let Some(e) = epochs.peek() {
                if e.epoch < s.epoch {
                    serde_json::to_writer(&mut out, &Line::Epoch(e))?;
                    out.push(b'\n');
                    epochs.next();
                } else {
                    break;
                }
            }
            serde_json::to_writer(&mut out, &Line::Step(s))?;
            out.push(b'\n');
        }
        for e in epochs {
            serde_json::to_writer(&mut out, &Line::Epoch(e))?;
            out.push(b'\n');
        }
        Ok(String::from_utf8(out).expect("JSON is UTF-8"))
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

// ---- losses -------------------------------------------------------------

/// Mean next-token negative log-likelihood over unmasked positions.
/// `logits` is `[n, vocab]`; `targets[i] = None` masks row `i`.
pub fn lm_loss<T: Float>(logits: &Tensor<T>, targets: &[Option<usize>]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.leaf(logits);
    let loss = g.cross_entropy(l, targets)?;
    Ok(g.scalar(loss).f64())
}

/// Loss of head outputs `[n, n_outputs]` against labels.
pub fn classification_loss<T: Float>(
    outputs: &Tensor<T>,
    labels: &[Label],
    task: &TaskSpec,
) -> Result<f64> {
    let mut g = Graph::new();
    let o = g.leaf(outputs);
    let loss = classification_loss_var(&mut g, o, labels, task)?;
    Ok(g.scalar(loss).f64())
}

pub(crate) fn classification_loss_var<T: Float>(
    g: &mut Graph<T>,
    outputs: Var,
    labels: &[Label],
    task: &TaskSpec,
) -> Result<Var> {
    let shape = g.shape(outputs).to_vec();
    if shape.len() != 2 || shape[1] != task.n_outputs() || shape[0] != labels.len() {
        return Err(Error::Label(format!(
            "outputs {shape:?} do not fit {} labels of task {}",
            labels.len(),
            task.name
        )));
    }
    for l in labels {
        task.check_label(l)?;
    }
    Ok(match task.kind {
        TaskKind::Binary => {
            let y: Vec<T> = labels
                .iter()
                .map(|l| T::of(matches!(l, Label::Class(1)) as u8 as f64))
                .collect();
            g.bce_with_logits(outputs, &y)?
        }
        TaskKind::Multiclass(_) => {
            let y: Vec<Option<usize>> = labels
                .iter()
                .map(|l| {
                    if let Label::Class(c) = l {
                        Some(*c)
                    } else {
                        None
                    }
                })
                .collect();
            g.cross_entropy(outputs, &y)?
        }
        TaskKind::Multilabel(_) => {
            let y: Vec<T> = labels
                .iter()
                .flat_map(|l| match l {
                    Label::Multi(f) => f.iter().map(|&b| T::of(b as u8 as f64)).collect::<Vec<_>>(),
                    Label::Class(_) => unreachable!("checked above"),
                })
                .collect();
            g.bce_with_logits(outputs, &y)?
        }
    })
}

// ---- shared loop machinery ---------------------------------------------

struct Schedule {
    total: usize,
    step: usize,
}

/// Token budget per sequence once virtual tokens are reserved.
pub fn effective_len<T: Float>(
    cfg: &TrainConfig,
    base: &BaseModel<T>,
    stack: Option<&AdapterStack<T>>,
) -> usize {
    let virtual_tokens: usize = stack
        .map(|s| {
            s.adapters()
                .iter()
                .map(|(_, a)| a.config().virtual_tokens())
                .sum()
        })
        .unwrap_or(0);
    cfg.max_seq_len
        .min(base.config.max_seq_len)
        .saturating_sub(virtual_tokens)
        .max(1)
}

/// The parameters an optimizer step touches: a stack's, or the base's own
/// when training without a stack.
enum Trainable<'a, T: Float> {
    Stack(&'a mut AdapterStack<T>),
    Base(&'a mut BaseModel<T>),
}

fn snapshot<T: Float, P: HasParams<T> + ?Sized>(p: &P) -> Vec<Tensor<T>> {
    p.params().into_iter().map(|(_, t)| t.clone()).collect()
}

fn restore<T: Float, P: HasParams<T> + ?Sized>(p: &mut P, saved: Vec<Tensor<T>>) {
    for ((_, t), s) in p.params_mut().into_iter().zip(saved) {
        *t = s;
    }
}

/// Mean loss over a micro-batch after backpropagating into the trainable
/// parameters with weight `scale`.
fn micro_step<T: Float>(
    base: &mut BaseModel<T>,
    stack: Option<&mut AdapterStack<T>>,
    rng: &mut Rng,
    scale: f64,
    build: impl FnOnce(&mut Forward<'_, T>) -> Result<(Var, usize)>,
) -> Result<(f64, usize)> {
    let mut g = Graph::new();
    let (loss, count, grads) = {
        let stack_ref = stack.as_deref();
        let mut fwd = Forward {
            g: &mut g,
            base: &*base,
            stack: stack_ref,
            rng: Some(rng),
        };
        let (loss, count) = build(&mut fwd)?;
        let grads = g.backward(loss)?;
        (g.scalar(loss).f64(), count, grads)
    };
    if !loss.is_finite() {
        return Err(Error::Training(format!("non-finite loss {loss}")));
    }
    match stack {
        Some(s) => grads.accumulate_into(s, T::of(scale)),
        None => grads.accumulate_into(base, T::of(scale)),
    }
    Ok((loss, count))
}

fn optimizer_step<T: Float>(
    trainable: &mut Trainable<'_, T>,
    opt: &mut AdamW,
    cfg: &TrainConfig,
    lr: f64,
) {
    let mut params = match trainable {
        Trainable::Stack(s) => s.params_mut(),
        Trainable::Base(b) => b.params_mut(),
    };
    if let Some(max) = cfg.max_grad_norm {
        clip_grad_norm(&mut params, max);
    }
    opt.step(&mut params, lr);
}

fn check_trainable<T: Float>(base: &BaseModel<T>, stack: Option<&AdapterStack<T>>) -> Result<()> {
    let n = match stack {
        Some(s) => s.trainable_count(),
        None => base.trainable_count(),
    };
    if n == 0 {
        return Err(Error::Training(
            "nothing to train: every parameter is frozen".into(),
        ));
    }
    if stack.is_some() && base.trainable_count() > 0 {
        return Err(Error::Training(
            "base must be frozen while training an adapter stack".into(),
        ));
    }
    Ok(())
}

// ---- language modelling -------------------------------------------------

/// Summed NLL and token count of the model on `windows`.
pub fn lm_nll<T: Float>(
    base: &BaseModel<T>,
    stack: Option<&AdapterStack<T>>,
    windows: &[Vec<TokenId>],
    batch_size: usize,
) -> Result<(f64, usize)> {
    let mut total = 0.0;
    let mut count = 0;
    for chunk in windows.chunks(batch_size.max(1)) {
        let batch = TokenBatch::from_sequences(chunk, usize::MAX)?;
        let mut g = Graph::new();
        let mut fwd = Forward::eval(&mut g, base, stack);
        let (logits, enc) = fwd.lm_logits(&batch)?;
        let targets = lm_targets(&batch, &enc);
        let n = targets.iter().flatten().count();
        if n == 0 {
            continue;
        }
        let loss = g.cross_entropy(logits, &targets)?;
        total += g.scalar(loss).f64() * n as f64;
        count += n;
    }
    Ok((total, count))
}

/// Mean next-token loss on `batch` in eval mode, with the gradient of every
/// tensor that requires grad, base first then stack, in parameter order.
pub fn lm_loss_and_grads<T: Float>(
    base: &BaseModel<T>,
    stack: Option<&AdapterStack<T>>,
    batch: &TokenBatch,
) -> Result<(f64, Vec<(String, Vec<T>)>)> {
    let mut g = Graph::new();
    let mut fwd = Forward::eval(&mut g, base, stack);
    let (logits, enc) = fwd.lm_logits(batch)?;
    let targets = lm_targets(batch, &enc);
    let loss = g.cross_entropy(logits, &targets)?;
    let value = g.scalar(loss).f64();
    let grads = g.backward(loss)?;
    let mut params = base.params();
    if let Some(s) = stack {
        params.extend(s.params());
    }
    let out = params
        .into_iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(n, t)| {
            let gr = grads
                .named(&n)
                .map_or_else(|| vec![T::zero(); t.len()], <[T]>::to_vec);
            (n, gr)
        })
        .collect();
    Ok((value, out))
}

/// Perplexity on held-out windows.
pub fn eval_perplexity<T: Float>(
    base: &BaseModel<T>,
    stack: Option<&AdapterStack<T>>,
    windows: &[Vec<TokenId>],
    batch_size: usize,
) -> Result<f64> {
    let (nll, n) = lm_nll(base, stack, windows, batch_size)?;
    Ok(perplexity(nll, n)?)
}

/// Autoregressive training on the corpus's train split. With a stack the
/// base must be frozen and only the stack's trainable tensors move; without
/// one the base itself is trained. The epoch with the lowest held-out
/// perplexity is kept.
pub fn pretrain_lm<T: Float>(
    base: &mut BaseModel<T>,
    mut stack: Option<&mut AdapterStack<T>>,
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<RunHistory> {
    cfg.validate()?;
    check_trainable(base, stack.as_deref())?;
    let max_len = effective_len(cfg, base, stack.as_deref());
    let train = corpus.windows(Split::Train, max_len);
    let test = corpus.windows(Split::Test, max_len);
    if train.is_empty() {
        return Err(Error::Data("corpus has no training documents".into()));
    }
    if test.is_empty() {
        return Err(Error::Data("corpus has no held-out documents".into()));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut run = Runner::new(cfg, train.len())?;
    let mut history = RunHistory::default();
    let mut best: Option<(f64, Vec<Tensor<T>>)> = None;

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        run.rng.shuffle(&mut order);
        let (mut nll, mut tokens) = (0.0, 0);
        for (i, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let seqs: Vec<&[TokenId]> = chunk.iter().map(|&j| train[j].as_slice()).collect();
            let batch = TokenBatch::from_sequences(&seqs, max_len)?;
            let scale = run.scale();
            let (loss, n) = micro_step(base, stack.as_deref_mut(), &mut run.rng, scale, |f| {
                let (logits, enc) = f.lm_logits(&batch)?;
                let targets = lm_targets(&batch, &enc);
                let n = targets.iter().flatten().count();
                Ok((f.g.cross_entropy(logits, &targets)?, n))
            })?;
            nll += loss * n as f64;
            tokens += n;
            let last = (i + 1) * cfg.batch_size >= order.len();
            let mut target = match stack.as_deref_mut() {
                Some(s) => Trainable::Stack(s),
                None => Trainable::Base(base),
            };
            if run.after_micro(&mut target, epoch, loss, last, &mut history)? {
                break;
            }
        }
        let eval = eval_perplexity(base, stack.as_deref(), &test, cfg.batch_size)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_metric: perplexity(nll, tokens)?,
            eval_metric: eval,
            seconds: start.elapsed().as_secs_f64(),
        });
        if best.as_ref().map_or(true, |(b, _)| eval < *b) {
            let saved = match stack.as_deref() {
                Some(s) => snapshot(s),
                None => snapshot(base),
            };
            best = Some((eval, saved));
            history.best_epoch = Some(epoch);
        }
        if run.done() {
            break;
        }
    }
    if let Some((_, saved)) = best {
        match stack {
            Some(s) => restore(s, saved),
            None => restore(base, saved),
        }
    }
    Ok(history)
}

/// Step bookkeeping shared by both training stages.
struct Runner<'c> {
    cfg: &'c TrainConfig,
    opt: AdamW,
    rng: Rng,
    sched: Schedule,
    micro: usize,
}

impl<'c> Runner<'c> {
    fn new(cfg: &'c TrainConfig, n_examples: usize) -> Result<Self> {
        let micro_per_epoch = n_examples.div_ceil(cfg.batch_size);
        let per_epoch = micro_per_epoch.div_ceil(cfg.grad_accum_steps);
        let mut total = per_epoch * cfg.epochs;
        if let Some(m) = cfg.max_steps {
            total = total.min(m);
        }
        if total == 0 {
            return Err(Error::Training("zero optimizer steps".into()));
        }
        Ok(Self {
            cfg,
            opt: AdamW::new(cfg.weight_decay),
            rng: Rng::seeded(cfg.seed),
            sched: Schedule { total, step: 0 },
            micro: 0,
        })
    }

    fn scale(&self) -> f64 {
        1.0 / self.cfg.grad_accum_steps as f64
    }

    fn done(&self) -> bool {
        self.sched.step >= self.sched.total
    }

    /// Steps the optimizer once enough micro-batches have accumulated (or at
    /// the end of an epoch). Returns true when the step budget is spent.
    fn after_micro<T: Float>(
        &mut self,
        target: &mut Trainable<'_, T>,
        epoch: usize,
        loss: f64,
        epoch_end: bool,
        history: &mut RunHistory,
    ) -> Result<bool> {
        self.micro += 1;
        if self.micro % self.cfg.grad_accum_steps != 0 && !epoch_end {
            return Ok(false);
        }
        self.micro = 0;
        let lr = lr_schedule(
            self.sched.step,
            self.sched.total,
            self.cfg.warmup_ratio,
            self.cfg.learning_rate,
        )?;
        optimizer_step(target, &mut self.opt, self.cfg, lr);
        self.sched.step += 1;
        history.steps.push(StepRecord {
            step: self.sched.step,
            epoch,
            loss,
            lr,
        });
        Ok(self.done())
    }
}

// ---- classification -----------------------------------------------------

fn tokenize(examples: &[Example], vocab: &Vocab) -> Vec<Vec<TokenId>> {
    examples.iter().map(|e| vocab.encode(&e.text)).collect()
}

/// Head probabilities `[n, n_outputs]` as f64: sigmoid for binary and
/// multilabel tasks, softmax for multiclass.
pub fn predict<T: Float>(
    base: &BaseModel<T>,
    stack: &AdapterStack<T>,
    examples: &[Example],
    vocab: &Vocab,
    max_len: usize,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let head = stack.head()?;
    let seqs = tokenize(examples, vocab);
    let mut out = Vec::with_capacity(examples.len() * head.n_outputs());
    for chunk in seqs.chunks(batch_size.max(1)) {
        let batch = TokenBatch::from_sequences(chunk, max_len)?;
        let mut g = Graph::new();
        let z = Forward::eval(&mut g, base, Some(stack)).classify(head, &batch)?;
        let p = match head.task.kind {
            TaskKind::Multiclass(_) => g.softmax_lastdim(z),
            _ => g.sigmoid(z),
        };
        out.extend(g.value(p).iter().map(|x| x.f64()));
    }
    Ok(out)
}

/// Task AUROC in `[0, 1]` of probabilities against labels.
pub fn task_auroc(probs: &[f64], labels: &[Label], task: &TaskSpec) -> Result<f64> {
    Ok(match task.kind {
        TaskKind::Binary => {
            let y: Vec<bool> = labels
                .iter()
                .map(|l| matches!(l, Label::Class(1)))
                .collect();
            auroc_binary(probs, &y)?
        }
        TaskKind::Multiclass(k) => {
            let y: Vec<usize> = labels
                .iter()
                .map(|l| {
                    if let Label::Class(c) = l {
                        *c
                    } else {
                        usize::MAX
                    }
                })
                .collect();
            auroc_multiclass(probs, k, &y)?
        }
        TaskKind::Multilabel(k) => {
            let y: Vec<bool> = labels
                .iter()
                .flat_map(|l| match l {
                    Label::Multi(f) => f.clone(),
                    Label::Class(_) => vec![false; k],
                })
                .collect();
            auroc_multilabel(probs, &y, k)?.value
        }
    })
}

/// AUROC in percent of the stack on one split.
pub fn evaluate_split<T: Float>(
    base: &BaseModel<T>,
    stack: &AdapterStack<T>,
    examples: &[Example],
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<f64> {
    let head = stack.head()?;
    let probs = predict(
        base,
        stack,
        examples,
        vocab,
        effective_len(cfg, base, Some(stack)),
        cfg.batch_size,
    )?;
    let labels: Vec<Label> = examples.iter().map(|e| e.label.clone()).collect();
    Ok(100.0 * task_auroc(&probs, &labels, &head.task)?)
}

fn check_two_classes(examples: &[Example], task: &TaskSpec) -> Result<()> {
    let ok = match task.kind {
        TaskKind::Binary | TaskKind::Multiclass(_) => {
            let first = &examples[0].label;
            examples.iter().any(|e| e.label != *first)
        }
        TaskKind::Multilabel(k) => (0..k).any(|j| {
            let on = |e: &Example| matches!(&e.label, Label::Multi(f) if f[j]);
            examples.iter().any(on) && !examples.iter().all(on)
        }),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Data(format!(
            "training split of {} has a single class",
            task.name
        )))
    }
}

/// Supervised fine-tuning of the stack's trainable tensors and head. The
/// epoch with the best validation AUROC is kept and its test AUROC
/// reported (both in percent).
pub fn finetune_classify<T: Float>(
    base: &mut BaseModel<T>,
    stack: &mut AdapterStack<T>,
    dataset: &crate::data::Dataset,
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<RunHistory> {
    cfg.validate()?;
    check_trainable(base, Some(stack))?;
    let task = stack.head()?.task.clone();
    if task != dataset.task {
        return Err(Error::Label(format!(
            "head is for {}, dataset is {}",
            task.name, dataset.task.name
        )));
    }
    if dataset.train.is_empty() || dataset.valid.is_empty() || dataset.test.is_empty() {
        return Err(Error::Data(format!(
            "dataset {} needs non-empty train, valid and test splits",
            task.name
        )));
    }
    check_two_classes(&dataset.train, &task)?;
    let max_len = effective_len(cfg, base, Some(stack));
    let train_ids = tokenize(&dataset.train, vocab);
    let mut order: Vec<usize> = (0..train_ids.len()).collect();
    let mut run = Runner::new(cfg, train_ids.len())?;
    let mut history = RunHistory::default();
    let mut best: Option<(f64, Vec<Tensor<T>>)> = None;

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        run.rng.shuffle(&mut order);
        for (i, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let seqs: Vec<&[TokenId]> = chunk.iter().map(|&j| train_ids[j].as_slice()).collect();
            let labels: Vec<Label> = chunk
                .iter()
                .map(|&j| dataset.train[j].label.clone())
                .collect();
            let batch = TokenBatch::from_sequences(&seqs, max_len)?;
            let scale = run.scale();
            let (loss, _) = micro_step(base, Some(stack), &mut run.rng, scale, |f| {
                let head = f.stack.expect("stack attached").head()?;
                let z = f.classify(head, &batch)?;
                Ok((
                    classification_loss_var(f.g, z, &labels, &task)?,
                    labels.len(),
                ))
            })?;
            let last = (i + 1) * cfg.batch_size >= order.len();
            if run.after_micro(
                &mut Trainable::Stack(stack),
                epoch,
                loss,
                last,
                &mut history,
            )? {
                break;
            }
        }
        let train_metric = evaluate_split(base, stack, &dataset.train, vocab, cfg)?;
        let eval_metric = evaluate_split(base, stack, &dataset.valid, vocab, cfg)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_metric,
            eval_metric,
            seconds: start.elapsed().as_secs_f64(),
        });
        if best.as_ref().map_or(true, |(b, _)| eval_metric > *b) {
            best = Some((eval_metric, snapshot(stack)));
            history.best_epoch = Some(epoch);
        }
        if run.done() {
            break;
        }
    }
    if let Some((_, saved)) = best {
        restore(stack, saved);
    }
    history.test_metric = Some(evaluate_split(base, stack, &dataset.test, vocab, cfg)?);
    Ok(history)
}
