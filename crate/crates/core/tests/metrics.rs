mod common;

use std::collections::BTreeMap;

use common::{pair_count_auroc, pair_count_columns};
use peft_forge::data::TaskName;
use peft_forge::metrics::*;
use proptest::prelude::*;

#[test]
fn perplexity_examples() {
    assert!((perplexity(100.0 * 128f64.ln(), 100).unwrap() - 128.0).abs() < 1e-9);
    assert_eq!(perplexity(0.0, 7).unwrap(), 1.0);
    assert!((perplexity(3.0 * 2f64.ln(), 3).unwrap() - 2.0).abs() < 1e-12);
    assert_eq!(perplexity(1.0, 0), Err(MetricError::NoTokens));
}

#[test]
fn binary_examples() {
    assert_eq!(
        auroc_binary(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(),
        1.0
    );
    assert_eq!(
        auroc_binary(&[0.5; 6], &[true, false, true, false, false, true]).unwrap(),
        0.5
    );
    assert_eq!(
        auroc_binary(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(),
        0.75
    );
    assert!(matches!(
        auroc_binary(&[0.1, 0.2], &[true, true]),
        Err(MetricError::SingleClass { .. })
    ));
    assert!(auroc_binary(&[0.1], &[true, false]).is_err());
    assert!(auroc_binary(&[f64::NAN, 0.2], &[true, false]).is_err());
}

#[test]
fn multiclass_examples() {
    let labels = [0, 1, 2, 3, 1, 0];
    let onehot: Vec<f64> = labels
        .iter()
        .flat_map(|&l| (0..4).map(move |c| (c == l) as u8 as f64))
        .collect();
    assert_eq!(auroc_multiclass(&onehot, 4, &labels).unwrap(), 1.0);
    assert_eq!(auroc_multiclass(&[0.25; 24], 4, &labels).unwrap(), 0.5);

    #[rustfmt::skip]
    let table = [
        0.50, 0.20, 0.20, 0.10,
        0.30, 0.30, 0.20, 0.20,
        0.10, 0.25, 0.60, 0.05,
        0.25, 0.25, 0.25, 0.25,
        0.40, 0.35, 0.05, 0.20,
        0.20, 0.10, 0.30, 0.40,
    ];
    let labels = [0, 1, 2, 3, 1, 3];
    let oracle: f64 = (0..4)
        .map(|c| {
            let col: Vec<f64> = table.iter().skip(c).step_by(4).copied().collect();
            let y: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            pair_count_auroc(&col, &y).unwrap()
        })
        .sum::<f64>()
        / 4.0;
    assert_eq!(auroc_multiclass(&table, 4, &labels).unwrap(), oracle);
    // An absent class is skipped.
    let three = [0, 1, 1, 0, 1, 0];
    let skip: Vec<f64> = (0..2)
        .map(|c| {
            let col: Vec<f64> = table.iter().skip(c).step_by(4).copied().collect();
            pair_count_auroc(&col, &three.map(|l| l == c)).unwrap()
        })
        .collect();
    assert_eq!(
        auroc_multiclass(&table, 4, &three).unwrap(),
        (skip[0] + skip[1]) / 2.0
    );
    assert_eq!(
        auroc_multiclass(&table, 4, &[2; 6]),
        Err(MetricError::NothingScorable)
    );
    assert!(matches!(
        auroc_multiclass(&table, 4, &[0, 1, 2, 3, 4, 0]),
        Err(MetricError::LabelOutOfRange { .. })
    ));
}

#[test]
fn multilabel_examples() {
    let targets = [true, false, false, true, false, true, false, true, true];
    let perfect: Vec<f64> = targets.iter().map(|&t| t as u8 as f64).collect();
    let r = auroc_multilabel(&perfect, &targets, 3).unwrap();
    assert_eq!((r.value, r.scored, r.skipped), (1.0, 3, 0));

    let probs = [0.9, 0.2, 0.4, 0.3, 0.6, 0.7, 0.5, 0.1, 0.8];
    let r = auroc_multilabel(&probs, &targets, 3).unwrap();
    assert_eq!(r.value, pair_count_columns(&probs, &targets, 3).unwrap());
    assert_eq!(r.scored, 3);

    let all_on = [true, false, true, true, true, false, true, false, true];
    let r = auroc_multilabel(&probs, &all_on, 3).unwrap();
    assert_eq!((r.scored, r.skipped), (2, 1));
    assert_eq!(r.value, pair_count_columns(&probs, &all_on, 3).unwrap());
    assert_eq!(
        auroc_multilabel(&probs, &[true; 9], 3),
        Err(MetricError::NothingScorable)
    );
}

#[test]
fn macro_average_examples() {
    assert_eq!(
        macro_average(&[58.29, 81.83, 73.02, 72.08, 78.32]).unwrap(),
        72.70
    );
    assert_eq!(macro_average(&[59.43, 84.65, 72.71]).unwrap(), 72.26);
    assert_eq!(macro_average(&[64.5]).unwrap(), 64.5);
    assert_eq!(macro_average(&[]), Err(MetricError::Empty));
}

#[test]
fn report_keys() {
    let scores: BTreeMap<TaskName, f64> = [(TaskName::Pmv, 60.0), (TaskName::Los, 70.0)]
        .into_iter()
        .collect();
    let r = EvalReport::from_tasks(&scores).unwrap();
    assert_eq!(r.get(TaskName::Los), Some(70.0));
    let v: serde_json::Value = serde_json::to_value(&r).unwrap();
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys, vec!["los", "macro_avg", "pmv"]);
    assert_eq!(v["macro_avg"], 65.0);
    let p = serde_json::to_value(EvalReport::perplexity(3.5)).unwrap();
    assert_eq!(p, serde_json::json!({"perplexity": 3.5}));
}

fn scored(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2..max).prop_flat_map(|n| {
        // Coarse scores so that ties are common.
        (
            proptest::collection::vec(0u8..12, n),
            proptest::collection::vec(any::<bool>(), n),
        )
            .prop_map(|(s, l)| (s.into_iter().map(|x| x as f64 / 11.0).collect(), l))
    })
}

proptest! {
    #[test]
    fn binary_equals_pair_count((scores, labels) in scored(200)) {
        let fast = auroc_binary(&scores, &labels).ok();
        prop_assert_eq!(fast, pair_count_auroc(&scores, &labels));
    }

    #[test]
    fn flipping_labels_complements((scores, labels) in scored(80)) {
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        if let (Ok(a), Ok(b)) = (auroc_binary(&scores, &labels), auroc_binary(&scores, &flipped)) {
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn monotone_transform_keeps_value((scores, labels) in scored(80)) {
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        prop_assert_eq!(auroc_binary(&scores, &labels).ok(), auroc_binary(&warped, &labels).ok());
    }

    #[test]
    fn multilabel_equals_columns(k in 1usize..5, rows in 2usize..40, seed in any::<u64>()) {
        let mut rng = peft_forge::rng::Rng::seeded(seed);
        let probs: Vec<f64> = (0..rows * k).map(|_| (rng.below(6)) as f64 / 5.0).collect();
        let targets: Vec<bool> = (0..rows * k).map(|_| rng.bernoulli(0.4)).collect();
        let fast = auroc_multilabel(&probs, &targets, k).ok().map(|r| r.value);
        prop_assert_eq!(fast, pair_count_columns(&probs, &targets, k));
    }

    #[test]
    fn macro_average_ignores_order(mut scores in proptest::collection::vec(50.0f64..100.0, 1..8), seed in any::<u64>()) {
        let a = macro_average(&scores).unwrap();
        peft_forge::rng::Rng::seeded(seed).shuffle(&mut scores);
        prop_assert_eq!(a, macro_average(&scores).unwrap());
    }
}
