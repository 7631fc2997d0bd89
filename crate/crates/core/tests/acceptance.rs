//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any failed.

mod common;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use common::*;
use peft_forge::adapters::*;
use peft_forge::data::*;
use peft_forge::error::Error;
use peft_forge::hpo::*;
use peft_forge::metrics::*;
use peft_forge::model::*;
use peft_forge::rng::Rng;
use peft_forge::stacking::*;
use peft_forge::store;
use peft_forge::tensor::HasParams;
use peft_forge::train::*;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let criteria: [(u32, &str, u64, fn() -> Outcome); 10] = [
        (1, "parameter accounting", 1, c1_param_accounting),
        (2, "macro-average reproduction", 1, c2_macro_average),
        (3, "gradient correctness", 60, c3_gradients),
        (4, "identity at init", 10, c4_identity),
        (5, "freeze safety", 300, c5_freeze),
        (6, "merge equivalence", 120, c6_merge),
        (7, "two-step pipeline efficacy", 900, c7_pipeline),
        (8, "AUROC oracle equivalence", 30, c8_auroc),
        (9, "HPO contract", 60, c9_hpo),
        (10, "persistence", 30, c10_store),
    ];
    let mut failed = 0;
    for (n, name, budget, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == &n.to_string()) {
            continue;
        }
        let t0 = Instant::now();
        let mut outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let took = t0.elapsed();
        if outcome.is_ok() && took > Duration::from_secs(budget) {
            outcome = Err(format!("took {:.1}s, budget {budget}s", took.as_secs_f64()));
        }
        match outcome {
            Ok(detail) => println!("PASS  {n:>2} {name}: {detail} [{:.2}s]", took.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL  {n:>2} {name}: {why} [{:.2}s]", took.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn c1_param_accounting() -> Outcome {
    let big = ModelConfig::llama_7b();
    let lora = AdapterConfig::Lora(LoraConfig::default());
    let c = count_adapter(&lora, &big);
    // Enumeration oracle: A [16, 4096] and B [4096, 16] on two projections of 32 layers.
    let oracle: u64 = (0..32).map(|_| 2 * (16 * 4096 + 4096 * 16)).sum();
    ensure!(
        c.count == 8_388_608 && c.count == oracle,
        "count {} oracle {oracle}",
        c.count
    );
    ensure!(
        human_count(c.base) == "6.7B",
        "base count {} formats as {}",
        c.base,
        human_count(c.base)
    );
    let shown = c.to_string();
    ensure!(shown == "8.4M (0.12%)", "formatted as {shown}");

    // Shape accounting agrees with a materialised toy adapter.
    let toy = BaseModel::<f32>::init(ModelConfig::default(), 1).map_err(|e| e.to_string())?;
    let cfg = AdapterConfig::Lora(qv_lora(4));
    let a = Adapter::init(&cfg, &toy, None, 2).map_err(|e| e.to_string())?;
    let live = count_trainable(&a, &toy);
    ensure!(
        live.count == 2048 && live == count_adapter(&cfg, &toy.config),
        "toy count {live:?}"
    );
    Ok(format!("{shown} of {} base params", c.base))
}

fn c2_macro_average() -> Outcome {
    let a = macro_average(&[58.29, 81.83, 73.02, 72.08, 78.32]).map_err(|e| e.to_string())?;
    let b = macro_average(&[59.43, 84.65, 72.71]).map_err(|e| e.to_string())?;
    ensure!(format!("{a:.2}") == "72.70", "table-3 row gave {a}");
    ensure!(format!("{b:.2}") == "72.26", "table-5 row gave {b}");
    Ok(format!("{a:.2}, {b:.2}"))
}

fn c3_gradients() -> Outcome {
    let cfg = tiny_config();
    let mut base = BaseModel::<f64>::init(cfg.clone(), 11).map_err(|e| e.to_string())?;
    base.set_trainable(true);
    let lora = random_lora(&base, qv_lora(2), 12, 0.05);
    let mut stack = AdapterStack::pretraining(lora);
    let mut rng = Rng::seeded(13);
    let seqs = vec![
        random_ids(&mut rng, 8, cfg.vocab_size),
        random_ids(&mut rng, 8, cfg.vocab_size),
    ];
    let batch = TokenBatch::from_sequences(&seqs, 16).map_err(|e| e.to_string())?;
    let (_, grads) = lm_loss_and_grads(&base, Some(&stack), &batch).map_err(|e| e.to_string())?;

    let loss = |base: &BaseModel<f64>, stack: &AdapterStack<f64>| {
        lm_loss_and_grads(base, Some(stack), &batch).unwrap().0
    };
    // Flat index over every trainable coordinate.
    let sizes: Vec<(String, usize)> = grads.iter().map(|(n, g)| (n.clone(), g.len())).collect();
    let total: usize = sizes.iter().map(|(_, n)| n).sum();
    let eps = 2e-3;
    let samples = 240;
    let mut worst = 0.0f64;
    let mut seen = BTreeSet::new();
    while seen.len() < samples {
        let mut flat = rng.below(total);
        if !seen.insert(flat) {
            continue;
        }
        let (ti, (name, _)) = sizes
            .iter()
            .enumerate()
            .find(|(_, (_, n))| {
                if flat < *n {
                    true
                } else {
                    flat -= n;
                    false
                }
            })
            .expect("index in range");
        let bump = |base: &mut BaseModel<f64>, stack: &mut AdapterStack<f64>, d: f64| {
            let mut all = base.params_mut();
            all.extend(stack.params_mut());
            let (_, t) = all
                .into_iter()
                .find(|(n, _)| n == name)
                .expect("named tensor");
            t.data_mut()[flat] += d;
        };
        let mut central = |h: f64| {
            bump(&mut base, &mut stack, h);
            let plus = loss(&base, &stack);
            bump(&mut base, &mut stack, -2.0 * h);
            let minus = loss(&base, &stack);
            bump(&mut base, &mut stack, h);
            (plus - minus) / (2.0 * h)
        };
        // Richardson combination of two central differences; cancels the h² term.
        let numeric = (4.0 * central(eps / 2.0) - central(eps)) / 3.0;
        let analytic = grads[ti].1[flat];
        let err = peft_forge::autograd::relative_error(analytic, numeric);
        worst = worst.max(err);
    }
    ensure!(
        worst <= 1e-5,
        "max relative error {worst:.3e} over {samples} coordinates"
    );
    Ok(format!(
        "max relative error {worst:.2e} over {samples} of {total} coordinates"
    ))
}

fn c4_identity() -> Outcome {
    let base = BaseModel::<f32>::init(ModelConfig::default(), 21).map_err(|e| e.to_string())?;
    let configs = [
        AdapterConfig::Lora(LoraConfig::default()),
        AdapterConfig::Adaption(AdaptionPromptConfig {
            adapter_length: 10,
            adapter_layers: 30,
        }),
    ];
    let mut rng = Rng::seeded(22);
    let mut checked = 0;
    for (ci, cfg) in configs.iter().enumerate() {
        let stack = AdapterStack::pretraining(
            Adapter::init(cfg, &base, None, 23 + ci as u64).map_err(|e| e.to_string())?,
        );
        for _ in 0..100 {
            let n = 1 + rng.below(3);
            let seqs: Vec<Vec<TokenId>> = (0..n)
                .map(|_| {
                    let len = 1 + rng.below(64);
                    random_ids(&mut rng, len, 512)
                })
                .collect();
            let batch = TokenBatch::from_sequences(&seqs, 128).map_err(|e| e.to_string())?;
            let plain = forward_lm(&base, &batch, None).map_err(|e| e.to_string())?;
            let stacked = forward_lm(&base, &batch, Some(&stack)).map_err(|e| e.to_string())?;
            ensure!(
                plain.bits_eq(&stacked),
                "{} changed the logits",
                cfg.technique().name()
            );
            checked += 1;
        }
    }
    Ok(format!("{checked} random inputs bit-identical"))
}

fn c5_freeze() -> Outcome {
    let mut base = BaseModel::<f32>::init(ModelConfig::default(), 31).map_err(|e| e.to_string())?;
    let sets = gen_classification_datasets(32, 500).map_err(|e| e.to_string())?;
    let ds = &sets[0];
    let mut cfg = TrainConfig::finetune();
    cfg.learning_rate = 1e-3;
    cfg.batch_size = 7;
    cfg.grad_accum_steps = 1;
    cfg.epochs = 1;
    cfg.max_seq_len = 64;
    cfg.max_steps = Some(50);
    let mut lines = Vec::new();
    for variant in VariantSpec::ALL {
        let domain = variant
            .domain()
            .map(|_| random_lora(&base, LoraConfig::default(), 33, 0.02));
        let downstream = variant.uses_downstream().then(|| {
            Adapter::init(&AdapterConfig::Lora(LoraConfig::default()), &base, None, 34).unwrap()
        });
        let mut stack =
            compose(&base, variant, domain, downstream, &ds.task, 35).map_err(|e| e.to_string())?;
        let declared: BTreeSet<String> = stack.trainable_names().into_iter().collect();
        let digests = |b: &BaseModel<f32>, s: &AdapterStack<f32>| {
            let mut d = b.digests();
            d.extend(s.digests());
            d
        };
        let before = digests(&base, &stack);
        let h = finetune_classify(&mut base, &mut stack, ds, &Vocab::synthetic(), &cfg)
            .map_err(|e| e.to_string())?;
        ensure!(
            h.steps.len() == 50,
            "{variant}: {} optimizer steps",
            h.steps.len()
        );
        let after = digests(&base, &stack);
        let changed: BTreeSet<String> = before
            .iter()
            .zip(&after)
            .filter(|(a, b)| a.1 != b.1)
            .map(|(a, _)| a.0.clone())
            .collect();
        ensure!(
            changed == declared,
            "{variant}: changed {changed:?}, declared {declared:?}"
        );
        ensure!(
            !changed.iter().any(|n| n.starts_with("base.")),
            "{variant}: base moved"
        );
        lines.push(format!("{variant} {}", declared.len()));
    }
    Ok(format!(
        "changed tensors == declared for {}",
        lines.join(", ")
    ))
}

fn c6_merge() -> Outcome {
    let mut base = BaseModel::<f32>::init(ModelConfig::default(), 41).map_err(|e| e.to_string())?;
    let (_, domain) = gen_domain_corpora(42, 200, 200).map_err(|e| e.to_string())?;
    let mut cfg = TrainConfig::pretrain();
    cfg.learning_rate = 2e-3;
    cfg.batch_size = 4;
    cfg.grad_accum_steps = 1;
    cfg.epochs = 10;
    cfg.max_seq_len = 64;
    cfg.max_steps = Some(200);

    let first = Adapter::init(&AdapterConfig::Lora(LoraConfig::default()), &base, None, 43)
        .map_err(|e| e.to_string())?;
    let mut stack = AdapterStack::pretraining(first);
    let h = pretrain_lm(&mut base, Some(&mut stack), &domain, &cfg).map_err(|e| e.to_string())?;
    ensure!(h.steps.len() == 200, "{} steps", h.steps.len());
    let probe: Vec<Vec<TokenId>> = domain
        .windows(Split::Test, 64)
        .into_iter()
        .take(8)
        .collect();
    let batch = TokenBatch::from_sequences(&probe, 64).map_err(|e| e.to_string())?;

    let dynamic = forward_lm(&base, &batch, Some(&stack)).map_err(|e| e.to_string())?;
    let trained = stack.domain.clone().expect("domain slot").adapter;
    let merged = merge_lora(&base, &trained).map_err(|e| e.to_string())?;
    let folded = forward_lm(&merged, &batch, None).map_err(|e| e.to_string())?;
    let plain = forward_lm(&base, &batch, None).map_err(|e| e.to_string())?;
    let single = max_rel_diff(&folded, &dynamic);
    ensure!(
        max_rel_diff(&plain, &dynamic) > 1e-3,
        "trained adapter left the logits unchanged"
    );
    ensure!(
        single <= 1e-4,
        "merged vs dynamic relative difference {single:.3e}"
    );

    // Frozen first adapter plus a second one trained on top.
    let second = Adapter::init(&AdapterConfig::Lora(LoraConfig::default()), &base, None, 44)
        .map_err(|e| e.to_string())?;
    let mut two = AdapterStack {
        domain: Some(Slot::new(trained.clone(), true)),
        downstream: Some(Slot::new(second, false)),
        head: None,
    };
    pretrain_lm(&mut base, Some(&mut two), &domain, &cfg).map_err(|e| e.to_string())?;
    let stacked = forward_lm(&base, &batch, Some(&two)).map_err(|e| e.to_string())?;
    let top = two.downstream.clone().expect("downstream slot");
    let attach = AdapterStack {
        domain: None,
        downstream: Some(top.clone()),
        head: None,
    };
    let merged_then_attached =
        forward_lm(&merged, &batch, Some(&attach)).map_err(|e| e.to_string())?;
    let both = merge_lora(&merged, &top.adapter).map_err(|e| e.to_string())?;
    let both_folded = forward_lm(&both, &batch, None).map_err(|e| e.to_string())?;
    let d2 = max_rel_diff(&merged_then_attached, &stacked);
    let d3 = max_rel_diff(&both_folded, &stacked);
    ensure!(d2 <= 1e-4, "merge-then-attach vs two-LoRA stack {d2:.3e}");
    ensure!(d3 <= 1e-4, "double merge vs two-LoRA stack {d3:.3e}");
    Ok(format!("relative differences {single:.1e} (one LoRA), {d2:.1e} (merge+attach), {d3:.1e} (both merged)"))
}

/// Desk-scale settings for the two-step pipeline.
fn c7_pipeline() -> Outcome {
    let (general, domain) = gen_domain_corpora(7, 3000, 3000).map_err(|e| e.to_string())?;
    let mut base = BaseModel::<f32>::init(ModelConfig::default(), 1).map_err(|e| e.to_string())?;
    let mut pc = TrainConfig::pretrain();
    pc.learning_rate = 2e-3;
    pc.batch_size = 16;
    pc.grad_accum_steps = 1;
    pc.max_seq_len = 128;
    base.set_trainable(true);
    pretrain_lm(&mut base, None, &general, &pc).map_err(|e| e.to_string())?;
    base.set_trainable(false);

    let dtest = domain.windows(Split::Test, 128);
    let before = eval_perplexity(&base, None, &dtest, 32).map_err(|e| e.to_string())?;
    let general_ppl = eval_perplexity(&base, None, &general.windows(Split::Test, 128), 32)
        .map_err(|e| e.to_string())?;
    let lora = AdapterConfig::Lora(LoraConfig::default());
    let mut stack =
        AdapterStack::pretraining(Adapter::init(&lora, &base, None, 3).map_err(|e| e.to_string())?);
    pretrain_lm(&mut base, Some(&mut stack), &domain, &pc).map_err(|e| e.to_string())?;
    let after = eval_perplexity(&base, Some(&stack), &dtest, 32).map_err(|e| e.to_string())?;
    let drop = 1.0 - after / before;
    ensure!(
        drop >= 0.20,
        "domain perplexity {before:.1} -> {after:.1} ({:.1}% drop)",
        100.0 * drop
    );
    let domain_adapter = stack.domain.take().expect("domain slot").adapter;

    let vocab = Vocab::synthetic();
    let sets = gen_classification_datasets(11, 1000).map_err(|e| e.to_string())?;
    let mut fc = TrainConfig::finetune();
    fc.learning_rate = 3e-3;
    fc.batch_size = 16;
    fc.grad_accum_steps = 1;
    fc.epochs = 6;
    fc.max_seq_len = 128;
    let mut macros = Vec::new();
    for variant in [
        VariantSpec::HeadOnly,
        VariantSpec::DomainTrainablePlusDownstream,
    ] {
        let mut scores = Vec::new();
        for ds in &sets {
            let (d, s) = match variant {
                VariantSpec::HeadOnly => (None, None),
                _ => (
                    Some(domain_adapter.clone()),
                    Some(Adapter::init(&lora, &base, None, 5).map_err(|e| e.to_string())?),
                ),
            };
            let mut st = compose(&base, variant, d, s, &ds.task, 9).map_err(|e| e.to_string())?;
            let h = finetune_classify(&mut base, &mut st, ds, &vocab, &fc)
                .map_err(|e| e.to_string())?;
            scores.push(h.test_metric.expect("test metric"));
        }
        macros.push(macro_average(&scores).map_err(|e| e.to_string())?);
    }
    let (head_only, two_step) = (macros[0], macros[1]);
    ensure!(
        two_step >= head_only + 5.0,
        "macro AUROC head_only {head_only:.2} vs two-step {two_step:.2}"
    );
    Ok(format!(
        "general ppl {general_ppl:.2}; domain ppl {before:.1} -> {after:.1} (-{:.1}%); macro AUROC head_only {head_only:.2}, domain_trainable_plus_downstream {two_step:.2}",
        100.0 * drop
    ))
}

fn c8_auroc() -> Outcome {
    ensure!(
        auroc_binary(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]) == Ok(0.75),
        "handcrafted case is not 0.75"
    );
    let mut rng = Rng::seeded(81);
    let quantized = |rng: &mut Rng| (rng.below(25) as f64) / 25.0;
    for inst in 0..1000 {
        let n = 2 + rng.below(199);
        match inst % 3 {
            0 => {
                let scores: Vec<f64> = (0..n).map(|_| quantized(&mut rng)).collect();
                let mut labels: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.4)).collect();
                labels[0] = true;
                labels[1] = false;
                let got = auroc_binary(&scores, &labels).map_err(|e| e.to_string())?;
                let want = pair_count_auroc(&scores, &labels).expect("both classes");
                ensure!(
                    got == want,
                    "binary instance {inst}: {got} vs oracle {want}"
                );
            }
            1 => {
                let k = 2 + rng.below(4);
                let probs: Vec<f64> = (0..n * k).map(|_| quantized(&mut rng)).collect();
                let mut labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
                labels[0] = 0;
                labels[1] = 1;
                let got = auroc_multiclass(&probs, k, &labels).map_err(|e| e.to_string())?;
                let onehot: Vec<bool> = labels
                    .iter()
                    .flat_map(|&l| (0..k).map(move |c| c == l))
                    .collect();
                let want = pair_count_columns(&probs, &onehot, k).expect("scorable");
                ensure!(
                    got == want,
                    "multiclass instance {inst}: {got} vs oracle {want}"
                );
            }
            _ => {
                let k = 1 + rng.below(6);
                let probs: Vec<f64> = (0..n * k).map(|_| quantized(&mut rng)).collect();
                let mut targets: Vec<bool> = (0..n * k).map(|_| rng.bernoulli(0.3)).collect();
                targets[0] = true;
                targets[k] = false;
                let got = auroc_multilabel(&probs, &targets, k)
                    .map_err(|e| e.to_string())?
                    .value;
                let want = pair_count_columns(&probs, &targets, k).expect("scorable");
                ensure!(
                    got == want,
                    "multilabel instance {inst}: {got} vs oracle {want}"
                );
            }
        }
    }
    Ok("1000 random instances equal the pair-count oracle; handcrafted case 0.75".into())
}

fn c9_hpo() -> Outcome {
    // Known optimum r=8, alpha=16, dropout=0.1.
    let lora_space = SearchSpace::downstream_lora();
    let lora_obj = |p: &Point| -> f64 {
        let v = lora_space.values(p);
        let num = |i: usize| match v[i].1 {
            Value::Num(x) => x,
            _ => unreachable!(),
        };
        -(num(0).log2() - 3.0).powi(2)
            - 0.5 * (num(1).log2() - 4.0).powi(2)
            - 10.0 * (num(2) - 0.1).powi(2)
    };
    // Seeded random quadratic bowls over the encoded p-tuning grid.
    let pt_space = SearchSpace::pretraining(Technique::Ptuning);
    let bowl = |seed: u64| {
        let width = pt_space.encode(&pt_space.point(0)).unwrap().len();
        let mut rng = Rng::seeded(seed);
        let centre: Vec<f64> = (0..width).map(|_| rng.uniform()).collect();
        let weight: Vec<f64> = (0..width).map(|_| 0.5 + 1.5 * rng.uniform()).collect();
        let space = pt_space.clone();
        move |p: &Point| -> f64 {
            let x = space.encode(p).unwrap();
            -x.iter()
                .zip(&centre)
                .zip(&weight)
                .map(|((x, c), w)| w * (x - c).powi(2))
                .sum::<f64>()
        }
    };
    let mut notes = Vec::new();
    let mut cases: Vec<(&str, &SearchSpace, Box<dyn Fn(&Point) -> f64>)> =
        vec![("lora", &lora_space, Box::new(lora_obj))];
    for s in 0..4 {
        cases.push(("ptuning", &pt_space, Box::new(bowl(900 + s))));
    }
    for (ci, (label, space, f)) in cases.iter().enumerate() {
        for seed in 0..3u64 {
            let run = || {
                search(space, Direction::Maximize, MAX_TRIALS, seed, |p| {
                    Ok::<_, String>(f(p))
                })
            };
            let a = run().map_err(|e| e.to_string())?;
            let b = run().map_err(|e| e.to_string())?;
            ensure!(a == b, "{label} case {ci} seed {seed} is not deterministic");
            ensure!(a.history.len() <= MAX_TRIALS, "{} trials", a.history.len());
            let distinct: BTreeSet<&Point> = a.history.iter().map(|t| &t.point).collect();
            ensure!(
                distinct.len() == a.history.len(),
                "{label} case {ci} repeated a point"
            );
            let mut all: Vec<f64> = space.all_points().iter().map(|p| f(p)).collect();
            all.sort_by(|x, y| y.total_cmp(x));
            let cutoff = all[(space.size() as f64 * 0.05).ceil() as usize - 1];
            let best = a.best.objective.expect("objective");
            ensure!(
                best >= cutoff,
                "{label} case {ci} seed {seed}: best {best} below top-5% cutoff {cutoff}"
            );
            if ci == 0 {
                let v = space.values(&a.best.point);
                ensure!(v[0].1 == Value::Num(8.0), "lora optimum not found: {v:?}");
            }
        }
        notes.push(format!("{label}({})", space.size()));
    }
    Ok(format!(
        "≤{MAX_TRIALS} unique trials, deterministic, top-5% on {}",
        notes.join(" ")
    ))
}

fn c10_store() -> Outcome {
    let cfg = ModelConfig::default();
    let base = BaseModel::<f32>::init(cfg.clone(), 101).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let e = |x: Error| x.to_string();

    // Base: file round trip, twice.
    let p1 = dir.path().join("base.peft");
    let p2 = dir.path().join("base2.peft");
    store::save_base(&base, &p1).map_err(e)?;
    let loaded = store::load_base(&p1).map_err(e)?;
    store::save_base(&loaded, &p2).map_err(e)?;
    let (b1, b2) = (std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    ensure!(
        b1 == b2 && loaded.checksum() == base.checksum(),
        "base round trip differs"
    );

    let vocab = Vocab::synthetic();
    let techniques = [
        AdapterConfig::Lora(LoraConfig::default()),
        AdapterConfig::Prefix(PrefixConfig {
            num_virtual_tokens: 10,
            prefix_projection: true,
        }),
        AdapterConfig::Prompt(PromptConfig {
            num_virtual_tokens: 5,
            init: PromptInit::Random,
        }),
        AdapterConfig::Ptuning(PTuningConfig {
            num_virtual_tokens: 5,
            reparameterization: Reparameterization::Lstm,
            hidden_size: 64,
            num_layers: 2,
            dropout: 0.0,
        }),
        AdapterConfig::Adaption(AdaptionPromptConfig {
            adapter_length: 5,
            adapter_layers: 10,
        }),
    ];
    let others: Vec<ModelConfig> = vec![
        ModelConfig {
            d_model: 32,
            ..cfg.clone()
        },
        ModelConfig {
            n_layers: 3,
            ..cfg.clone()
        },
        ModelConfig {
            vocab_size: 600,
            ..cfg.clone()
        },
        ModelConfig {
            n_heads: 8,
            ..cfg.clone()
        },
        ModelConfig {
            d_ff: 128,
            ..cfg.clone()
        },
        ModelConfig {
            max_seq_len: 256,
            ..cfg.clone()
        },
        ModelConfig {
            rms_eps: 1e-6,
            ..cfg.clone()
        },
    ];
    let base_header = header_len(&b1);
    let mut rejections = 0;
    for (i, tc) in techniques.iter().enumerate() {
        let mut a = Adapter::init(tc, &base, Some(&vocab), 102 + i as u64).map_err(e)?;
        perturb(&mut a, 7, 0.01, |_| true);
        let bytes = store::adapter_bytes(&a, &cfg).map_err(e)?;
        let back = store::adapter_from_bytes(&bytes, &cfg).map_err(e)?;
        ensure!(
            back == a,
            "{} adapter changed in round trip",
            tc.technique().name()
        );
        ensure!(
            store::adapter_bytes(&back, &cfg).map_err(e)? == bytes,
            "{} bytes differ",
            tc.technique().name()
        );

        // Payload ratio is exactly the trainable fraction; file ratio within header overhead.
        let frac = count_trainable(&a, &base).fraction;
        let payload_ratio =
            (bytes.len() - header_len(&bytes)) as f64 / (b1.len() - base_header) as f64;
        ensure!(
            (payload_ratio - frac).abs() < 1e-12,
            "payload ratio {payload_ratio} vs fraction {frac}"
        );
        let file_ratio = bytes.len() as f64 / b1.len() as f64;
        let overhead = header_len(&bytes) as f64 / b1.len() as f64;
        ensure!(
            (file_ratio - frac).abs() <= overhead,
            "file ratio {file_ratio} vs fraction {frac}"
        );

        for other in &others {
            match store::adapter_from_bytes(&bytes, other) {
                Err(Error::Fingerprint { .. }) => rejections += 1,
                Err(x) => return Err(format!("wrong error for mismatched base: {x}")),
                Ok(_) => {
                    return Err(format!(
                        "{} adapter loaded against {other:?}",
                        tc.technique().name()
                    ))
                }
            }
        }
    }

    // Toy LoRA r=4: 2048 parameters, 8192 payload bytes.
    let toy = Adapter::init(&AdapterConfig::Lora(qv_lora(4)), &base, None, 110).map_err(e)?;
    let tb = store::adapter_bytes(&toy, &cfg).map_err(e)?;
    ensure!(
        tb.len() - header_len(&tb) == 8192,
        "toy payload {} bytes",
        tb.len() - header_len(&tb)
    );

    // Whole stack with head.
    let task = TaskSpec::standard(TaskName::Los);
    let stack = compose(
        &base,
        VariantSpec::DomainFrozenPlusDownstream,
        Some(random_lora(&base, LoraConfig::default(), 111, 0.01)),
        Some(random_lora(&base, qv_lora(4), 112, 0.01)),
        &task,
        113,
    )
    .map_err(e)?;
    let sb = store::stack_bytes(&stack, &cfg).map_err(e)?;
    let sback = store::stack_from_bytes(&sb, &cfg).map_err(e)?;
    ensure!(sback == stack, "stack changed in round trip");
    ensure!(
        store::stack_bytes(&sback, &cfg).map_err(e)? == sb,
        "stack bytes differ"
    );
    for other in &others {
        ensure!(
            matches!(
                store::stack_from_bytes(&sb, other),
                Err(Error::Fingerprint { .. })
            ),
            "stack loaded against a mismatched base"
        );
        rejections += 1;
    }
    Ok(format!(
        "byte-identical round trips; adapter/base payload ratio = trainable fraction; {rejections} mismatched pairings rejected"
    ))
}

/// Preamble plus JSON header.
fn header_len(bytes: &[u8]) -> usize {
    16 + u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize
}
