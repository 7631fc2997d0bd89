#![allow(dead_code)]

use peft_forge::adapters::{Adapter, AdapterConfig, LoraConfig, Projection};
use peft_forge::model::{BaseModel, ModelConfig, TokenId};
use peft_forge::rng::Rng;
use peft_forge::tensor::{HasParams, Tensor};

/// Brute-force Mann-Whitney: (wins + ties/2) over all positive/negative pairs.
pub fn pair_count_auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let (mut wins, mut ties, mut np, mut nn) = (0u64, 0u64, 0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if li {
            np += 1;
        } else {
            nn += 1;
        }
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            if scores[i] > scores[j] {
                wins += 1;
            } else if scores[i] == scores[j] {
                ties += 1;
            }
        }
    }
    if np == 0 || nn == 0 {
        return None;
    }
    Some((wins as f64 + 0.5 * ties as f64) / (np as f64 * nn as f64))
}

/// Mean of per-column pair-count oracles over scorable columns.
pub fn pair_count_columns(probs: &[f64], targets: &[bool], k: usize) -> Option<f64> {
    let mut scores = Vec::new();
    for c in 0..k {
        let col: Vec<f64> = probs.iter().skip(c).step_by(k).copied().collect();
        let lab: Vec<bool> = targets.iter().skip(c).step_by(k).copied().collect();
        if let Some(a) = pair_count_auroc(&col, &lab) {
            scores.push(a);
        }
    }
    if scores.is_empty() {
        None
    } else {
        Some(scores.iter().sum::<f64>() / scores.len() as f64)
    }
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 32,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 16,
        rms_eps: 1e-5,
    }
}

pub fn random_ids(rng: &mut Rng, len: usize, vocab: usize) -> Vec<TokenId> {
    (0..len)
        .map(|_| (4 + rng.below(vocab - 4)) as TokenId)
        .collect()
}

/// LoRA with B drawn at random so that its delta is non-zero.
pub fn random_lora<T: peft_forge::tensor::Float>(
    base: &BaseModel<T>,
    config: LoraConfig,
    seed: u64,
    std: f64,
) -> Adapter<T> {
    let mut a = Adapter::init(&AdapterConfig::Lora(config), base, None, seed).unwrap();
    perturb(&mut a, seed ^ 0xb0b, std, |n| n.ends_with(".b"));
    a
}

/// Adds gaussian noise to every tensor whose name passes `pick`.
pub fn perturb<T: peft_forge::tensor::Float, P: HasParams<T>>(
    p: &mut P,
    seed: u64,
    std: f64,
    pick: impl Fn(&str) -> bool,
) {
    let mut rng = Rng::seeded(seed);
    for (name, t) in p.params_mut() {
        if pick(&name) {
            for x in t.data_mut() {
                *x = *x + T::of(std * rng.gaussian());
            }
        }
    }
}

/// max |a - b| / max |b|.
pub fn max_rel_diff<T: peft_forge::tensor::Float>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let scale = b.data().iter().fold(0.0f64, |m, x| m.max(x.f64().abs()));
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (x, y)| m.max((x.f64() - y.f64()).abs()));
    diff / scale.max(f64::MIN_POSITIVE)
}

pub fn qv_lora(r: usize) -> LoraConfig {
    LoraConfig {
        r,
        alpha: 2.0 * r as f64,
        dropout: 0.0,
        targets: vec![Projection::Q, Projection::V],
    }
}
