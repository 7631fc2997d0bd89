use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use peft_forge::adapters::{Adapter, Technique};
use peft_forge::data::{
    gen_classification_datasets, gen_domain_corpora, load_corpus, load_dataset, write_corpus,
    write_dataset, Corpus, Dataset, Split, TaskName, TaskSpec, Vocab,
};
use peft_forge::error::Error;
use peft_forge::hpo::{adapter_config, search, Direction, SearchSpace, MAX_TRIALS};
use peft_forge::metrics::EvalReport;
use peft_forge::model::BaseModel;
use peft_forge::stacking::{compose, merge_lora, AdapterStack, VariantSpec};
use peft_forge::store::{load_adapter, load_base, load_stack, save_adapter, save_base, save_stack};
use peft_forge::tensor::HasParams;
use peft_forge::train::{
    effective_len, eval_perplexity, evaluate_split, finetune_classify, pretrain_lm, RunHistory,
};
use serde::Serialize;
use serde_json::json;

use crate::settings::Settings;
use crate::{
    CmdResult, EvalArgs, Fail, FinetuneArgs, HpoArgs, HpoStage, MergeArgs, Outcome, PretrainArgs,
};

fn io_fail(path: &Path, e: std::io::Error) -> Fail {
    Fail::data(anyhow!("{}: {e}", path.display()))
}

fn write_text(out: &mut Outcome, path: PathBuf, text: &str) -> CmdResult<()> {
    std::fs::write(&path, text).map_err(|e| io_fail(&path, e))?;
    out.outputs.push(path.display().to_string());
    Ok(())
}

fn write_json(out: &mut Outcome, path: PathBuf, v: &impl Serialize) -> CmdResult<()> {
    let text = serde_json::to_string_pretty(v).map_err(Error::from)? + "\n";
    write_text(out, path, &text)
}

fn jsonl<T: Serialize>(rows: &[T]) -> CmdResult<String> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r).map_err(Error::from)?);
        s.push('\n');
    }
    Ok(s)
}

/// `history{suffix}.jsonl` gets one line per epoch, `steps{suffix}.jsonl`
/// one per optimizer step.
fn write_history(out: &mut Outcome, dir: &Path, suffix: &str, h: &RunHistory) -> CmdResult<()> {
    write_text(
        out,
        dir.join(format!("history{suffix}.jsonl")),
        &jsonl(&h.epochs)?,
    )?;
    write_text(
        out,
        dir.join(format!("steps{suffix}.jsonl")),
        &jsonl(&h.steps)?,
    )
}

fn best_eval(h: &RunHistory) -> CmdResult<f64> {
    h.best_epoch
        .and_then(|b| h.epochs.iter().find(|e| e.epoch == b))
        .map(|e| e.eval_metric)
        .ok_or_else(|| Fail::from(Error::Training("run kept no epoch".into())))
}

fn vocab(path: Option<&Path>, out: &mut Outcome) -> CmdResult<Vocab> {
    match path {
        Some(p) => {
            out.input("vocab", p);
            Ok(Vocab::load(p)?)
        }
        None => Ok(Vocab::synthetic()),
    }
}

fn base_or_fresh(
    path: Option<&Path>,
    s: &Settings,
    out: &mut Outcome,
) -> CmdResult<BaseModel<f32>> {
    match path {
        Some(p) => {
            out.input("base", p);
            Ok(load_base(p)?)
        }
        None => Ok(BaseModel::init(s.model.clone(), s.seed)?),
    }
}

fn frozen_base(path: &Path, out: &mut Outcome) -> CmdResult<BaseModel<f32>> {
    out.input("base", path);
    let mut b = load_base(path)?;
    b.set_trainable(false);
    Ok(b)
}

fn tasks(spec: &str) -> CmdResult<Vec<TaskName>> {
    if spec == "all" {
        Ok(TaskName::ALL.to_vec())
    } else {
        Ok(vec![TaskName::parse(spec).map_err(Fail::usage)?])
    }
}

/// A directory resolves to `<dir>/<prefix><task><ext>`; a file is used as is
/// and only makes sense for a single task.
fn per_task(
    path: &Path,
    prefix: &str,
    task: TaskName,
    ext: &str,
    n_tasks: usize,
) -> CmdResult<PathBuf> {
    if path.is_dir() {
        Ok(path.join(format!("{prefix}{}{ext}", task.name())))
    } else if n_tasks == 1 {
        Ok(path.to_path_buf())
    } else {
        Err(Fail::usage(anyhow!(
            "{} must be a directory when --task all is used",
            path.display()
        )))
    }
}

fn dataset(data: &Path, task: TaskName, n: usize, out: &mut Outcome) -> CmdResult<Dataset> {
    let p = per_task(data, "", task, ".jsonl", n)?;
    out.input(&format!("data.{}", task.name()), &p);
    Ok(load_dataset(&p, &TaskSpec::standard(task))?)
}

fn corpus(path: &Path, vocab: &Vocab, s: &Settings, out: &mut Outcome) -> CmdResult<Corpus> {
    out.input("corpus", path);
    Ok(load_corpus(path, vocab, s.seed)?)
}

fn require<'a>(v: &'a Option<PathBuf>, flag: &str) -> CmdResult<&'a Path> {
    v.as_deref()
        .ok_or_else(|| Fail::usage(anyhow!("{flag} is required here")))
}

pub fn gen(s: &Settings, dir: &Path) -> CmdResult<Outcome> {
    let mut out = Outcome::default();
    let v = Vocab::synthetic();
    let vp = dir.join("vocab.txt");
    v.save(&vp)?;
    out.outputs.push(vp.display().to_string());
    let (general, domain) = gen_domain_corpora(s.seed, s.gen.general_docs, s.gen.domain_docs)?;
    for (name, c) in [("general.txt", &general), ("domain.txt", &domain)] {
        let p = dir.join(name);
        write_corpus(c, &v, &p)?;
        out.outputs.push(p.display().to_string());
    }
    let mut counts = BTreeMap::new();
    for ds in gen_classification_datasets(s.seed, s.gen.scale)? {
        let p = dir.join(format!("{}.jsonl", ds.task.name.name()));
        write_dataset(&ds, &p)?;
        out.outputs.push(p.display().to_string());
        counts.insert(
            ds.task.name.name(),
            [ds.train.len(), ds.valid.len(), ds.test.len()],
        );
    }
    out.metrics = json!({
        "general_docs": general.len(),
        "domain_docs": domain.len(),
        "vocab_size": v.len(),
        "examples": counts,
    });
    Ok(out)
}

pub fn pretrain(s: &Settings, a: &PretrainArgs, dir: &Path) -> CmdResult<Outcome> {
    let mut out = Outcome::default();
    let technique = match a.peft.as_str() {
        "none" => None,
        t => Some(Technique::parse(t)?),
    };
    let v = vocab(a.vocab.as_deref(), &mut out)?;
    let c = corpus(&a.corpus, &v, s, &mut out)?;
    let mut base = base_or_fresh(a.base.as_deref(), s, &mut out)?;
    let history = match technique {
        None => {
            base.set_trainable(true);
            let h = pretrain_lm(&mut base, None, &c, &s.pretrain)?;
            base.set_trainable(false);
            let p = dir.join("base.peft");
            save_base(&base, &p)?;
            out.outputs.push(p.display().to_string());
            h
        }
        Some(t) => {
            base.set_trainable(false);
            let adapter = Adapter::init(&s.adapter(t), &base, Some(&v), s.seed)?;
            let mut stack = AdapterStack::pretraining(adapter);
            let h = pretrain_lm(&mut base, Some(&mut stack), &c, &s.pretrain)?;
            let p = dir.join("adapter.peft");
            let trained = stack
                .domain
                .take()
                .expect("pretraining stack has a domain slot")
                .adapter;
            save_adapter(&trained, &base.config, &p)?;
            out.outputs.push(p.display().to_string());
            h
        }
    };
    write_history(&mut out, dir, "", &history)?;
    let report = EvalReport::perplexity(best_eval(&history)?);
    write_json(&mut out, dir.join("report.json"), &report)?;
    out.metrics = json!({ "perplexity": report.perplexity, "best_epoch": history.best_epoch });
    Ok(out)
}

/// Domain adapter when given, fresh downstream LoRA when the variant has the
/// slot, then the stack.
fn build_stack(
    s: &Settings,
    base: &BaseModel<f32>,
    variant: VariantSpec,
    domain: Option<&Adapter<f32>>,
    downstream: Option<&peft_forge::adapters::AdapterConfig>,
    vocab: &Vocab,
    task: &TaskSpec,
) -> CmdResult<AdapterStack<f32>> {
    let lora = s.adapter(Technique::Lora);
    let cfg = downstream.unwrap_or(&lora);
    let ds = if variant.uses_downstream() {
        Some(Adapter::init(cfg, base, Some(vocab), s.seed + 1)?)
    } else {
        None
    };
    Ok(compose(
        base,
        variant,
        domain.cloned(),
        ds,
        task,
        s.seed + 2,
    )?)
}

pub fn finetune(s: &Settings, a: &FinetuneArgs, dir: &Path) -> CmdResult<Outcome> {
    let mut out = Outcome::default();
    let variant = VariantSpec::parse(&a.variant)?;
    let names = tasks(&a.task)?;
    let v = vocab(a.vocab.as_deref(), &mut out)?;
    let mut base = frozen_base(&a.base, &mut out)?;
    let mut scores = BTreeMap::new();
    if a.eval_only {
        let stacks = require(&a.stack, "--stack")?;
        for &t in &names {
            let ds = dataset(&a.data, t, names.len(), &mut out)?;
            let p = per_task(stacks, "stack-", t, ".peft", names.len())?;
            out.input(&format!("stack.{}", t.name()), &p);
            scores.insert(t, eval_stack(&base, &p, &ds, &v, s)?);
        }
    } else {
        let domain = match &a.domain_adapter {
            Some(p) => {
                out.input("domain_adapter", p);
                Some(load_adapter(p, &base.config)?)
            }
            None => None,
        };
        for &t in &names {
            let ds = dataset(&a.data, t, names.len(), &mut out)?;
            let mut stack = build_stack(s, &base, variant, domain.as_ref(), None, &v, &ds.task)?;
            let h = finetune_classify(&mut base, &mut stack, &ds, &v, &s.finetune)?;
            let p = dir.join(format!("stack-{}.peft", t.name()));
            save_stack(&stack, &base.config, &p)?;
            out.outputs.push(p.display().to_string());
            write_history(&mut out, dir, &format!("-{}", t.name()), &h)?;
            let test = h
                .test_metric
                .ok_or_else(|| Fail::from(Error::Training("no test metric".into())))?;
            scores.insert(t, test);
        }
    }
    let report = EvalReport::from_tasks(&scores).map_err(Error::from)?;
    write_json(&mut out, dir.join("report.json"), &report)?;
    out.metrics = json!({ "variant": variant.name(), "report": report });
    Ok(out)
}

fn eval_stack(
    base: &BaseModel<f32>,
    path: &Path,
    ds: &Dataset,
    v: &Vocab,
    s: &Settings,
) -> CmdResult<f64> {
    let stack = load_stack(path, &base.config)?;
    let task = &stack.head()?.task;
    if *task != ds.task {
        return Err(Error::Label(format!(
            "{} holds a {} head, dataset is {}",
            path.display(),
            task.name,
            ds.task.name
        ))
        .into());
    }
    Ok(evaluate_split(base, &stack, &ds.test, v, &s.finetune)?)
}

#[derive(Serialize)]
struct Best<'a> {
    stage: HpoStage,
    technique: &'a str,
    trial_index: usize,
    objective: Option<f64>,
    adapter: peft_forge::adapters::AdapterConfig,
}

pub fn hpo(s: &Settings, a: &HpoArgs, dir: &Path) -> CmdResult<Outcome> {
    let mut out = Outcome::default();
    let budget = a.budget.unwrap_or(s.hpo.budget);
    if budget == 0 || budget > MAX_TRIALS {
        return Err(Fail::usage(anyhow!(
            "--budget must be between 1 and {MAX_TRIALS}, got {budget}"
        )));
    }
    let technique = Technique::parse(&a.peft)?;
    let v = vocab(a.vocab.as_deref(), &mut out)?;
    let (space, result) = match a.stage {
        HpoStage::Pretrain => {
            let c = corpus(require(&a.corpus, "--corpus")?, &v, s, &mut out)?;
            let mut base = base_or_fresh(a.base.as_deref(), s, &mut out)?;
            base.set_trainable(false);
            let space = SearchSpace::pretraining(technique);
            let r = search(
                &space,
                Direction::Minimize,
                budget,
                s.seed,
                |p| -> CmdResult<f64> {
                    let cfg = adapter_config(technique, &space, p)?;
                    let mut stack =
                        AdapterStack::pretraining(Adapter::init(&cfg, &base, Some(&v), s.seed)?);
                    let mut b = base.clone();
                    let h = pretrain_lm(&mut b, Some(&mut stack), &c, &s.pretrain)?;
                    best_eval(&h)
                },
            )?;
            (space, r)
        }
        HpoStage::Finetune => {
            if technique != Technique::Lora {
                return Err(Fail::usage(anyhow!(
                    "the fine-tuning sweep tunes lora only, got {}",
                    technique.name()
                )));
            }
            let variant = VariantSpec::parse(&a.variant)?;
            if !variant.uses_downstream() {
                return Err(Fail::usage(anyhow!(
                    "variant {variant} has no downstream adapter to tune"
                )));
            }
            let names = tasks(a.task.as_deref().unwrap_or("all"))?;
            if names.len() != 1 {
                return Err(Fail::usage(anyhow!(
                    "--task must name one task for the fine-tuning sweep"
                )));
            }
            let base = frozen_base(require(&a.base, "--base")?, &mut out)?;
            let ds = dataset(require(&a.data, "--data")?, names[0], 1, &mut out)?;
            let domain = match &a.domain_adapter {
                Some(p) => {
                    out.input("domain_adapter", p);
                    Some(load_adapter(p, &base.config)?)
                }
                None => None,
            };
            let space = SearchSpace::downstream_lora();
            let r = search(
                &space,
                Direction::Maximize,
                budget,
                s.seed,
                |p| -> CmdResult<f64> {
                    let cfg = adapter_config(technique, &space, p)?;
                    let mut b = base.clone();
                    let mut stack =
                        build_stack(s, &b, variant, domain.as_ref(), Some(&cfg), &v, &ds.task)?;
                    let h = finetune_classify(&mut b, &mut stack, &ds, &v, &s.finetune)?;
                    best_eval(&h)
                },
            )?;
            (space, r)
        }
    };
    write_text(&mut out, dir.join("trials.jsonl"), &result.history_jsonl()?)?;
    let best = Best {
        stage: a.stage,
        technique: technique.name(),
        trial_index: result.best.trial_index,
        objective: result.best.objective,
        adapter: adapter_config(technique, &space, &result.best.point)?,
    };
    write_json(&mut out, dir.join("best.json"), &best)?;
    out.metrics = json!({ "trials": result.history.len(), "best": best });
    Ok(out)
}

impl std::fmt::Display for Fail {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub fn eval(s: &Settings, a: &EvalArgs, _dir: &Path) -> CmdResult<Outcome> {
    let mut out = Outcome::default();
    let v = vocab(a.vocab.as_deref(), &mut out)?;
    let base = frozen_base(&a.base, &mut out)?;
    let report = if let Some(stacks) = &a.stack {
        let data = require(&a.data, "--data")?;
        let names = tasks(a.task.as_deref().unwrap_or("all"))?;
        let mut scores = BTreeMap::new();
        for &t in &names {
            let ds = dataset(data, t, names.len(), &mut out)?;
            let p = per_task(stacks, "stack-", t, ".peft", names.len())?;
            out.input(&format!("stack.{}", t.name()), &p);
            scores.insert(t, eval_stack(&base, &p, &ds, &v, s)?);
        }
        EvalReport::from_tasks(&scores).map_err(Error::from)?
    } else {
        let c = corpus(require(&a.corpus, "--corpus")?, &v, s, &mut out)?;
        let stack = match &a.adapter {
            Some(p) => {
                out.input("adapter", p);
                Some(AdapterStack::pretraining(load_adapter(p, &base.config)?))
            }
            None => None,
        };
        let len = effective_len(&s.pretrain, &base, stack.as_ref());
        let windows = c.windows(Split::Test, len);
        EvalReport::perplexity(eval_perplexity(
            &base,
            stack.as_ref(),
            &windows,
            s.pretrain.batch_size,
        )?)
    };
    out.metrics = serde_json::to_value(&report).map_err(Error::from)?;
    Ok(out)
}

pub fn merge(_s: &Settings, a: &MergeArgs, dir: &Path) -> CmdResult<Outcome> {
    let mut out = Outcome::default();
    let base = frozen_base(&a.base, &mut out)?;
    let mut folded = Vec::new();
    let merged = match (&a.adapter, &a.stack) {
        (Some(p), None) => {
            out.input("adapter", p);
            let adapter = load_adapter(p, &base.config)?;
            folded.push("adapter");
            merge_lora(&base, &adapter)?
        }
        (None, Some(p)) => {
            out.input("stack", p);
            let mut stack = load_stack(p, &base.config)?;
            let mut merged = base.clone();
            for (name, slot) in [
                ("domain", &mut stack.domain),
                ("downstream", &mut stack.downstream),
            ] {
                if slot
                    .as_ref()
                    .is_some_and(|s| s.adapter.technique() == Technique::Lora)
                {
                    merged = merge_lora(&merged, &slot.take().expect("checked").adapter)?;
                    folded.push(name);
                }
            }
            if folded.is_empty() {
                return Err(Error::NotMergeable("stack without LoRA slots").into());
            }
            let rest = dir.join("stack.peft");
            save_stack(&stack, &merged.config, &rest)?;
            out.outputs.push(rest.display().to_string());
            merged
        }
        _ => {
            return Err(Fail::usage(anyhow!(
                "merge needs exactly one of --adapter or --stack"
            )))
        }
    };
    let p = dir.join("merged.peft");
    save_base(&merged, &p)?;
    out.outputs.insert(0, p.display().to_string());
    out.metrics = json!({ "folded": folded, "checksum": format!("{:016x}", merged.checksum()) });
    Ok(out)
}
