use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use proptest::prelude::*;

use sigprompt_core::dataset::{Dataset, TimeSeriesInstance};
use sigprompt_core::features::{approx_entropy, sample_entropy};
use sigprompt_core::harness::{few_shot_split, holdout_split, score_predictions, Prediction};
use sigprompt_core::prompt::{parse_prompt, serialize_prompt, PromptMode, PromptRecord};

fn cheb(x: &[f64], i: usize, j: usize, len: usize) -> f64 {
    (0..len).map(|k| (x[i + k] - x[j + k]).abs()).fold(0.0, f64::max)
}

fn sampen_naive(x: &[f64], m: usize, r: f64) -> Option<f64> {
    let n = x.len() - m;
    let pairs = |len| {
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| i < j && cheb(x, i, j, len) <= r)
            .count()
    };
    let (b, a) = (pairs(m), pairs(m + 1));
    (a > 0 && b > 0).then(|| -(a as f64 / b as f64).ln())
}

fn apen_naive(x: &[f64], m: usize, r: f64) -> f64 {
    let phi = |len: usize| {
        let n = x.len() - len + 1;
        (0..n)
            .map(|i| ((0..n).filter(|&j| cheb(x, i, j, len) <= r).count() as f64 / n as f64).ln())
            .sum::<f64>()
            / n as f64
    };
    phi(m) - phi(m + 1)
}

fn series() -> impl Strategy<Value = Vec<f64>> {
    prop_oneof![
        prop::collection::vec(-1.0f64..1.0, 4..=64),
        prop::collection::vec((0u8..4).prop_map(f64::from), 4..=64),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn entropies_match_naive_counts(x in series(), m in 1usize..=2, r in 0.05f64..1.5) {
        prop_assume!(x.len() > m + 1);
        prop_assert_eq!(sample_entropy(&x, m, r).unwrap(), sampen_naive(&x, m, r));
        prop_assert_eq!(approx_entropy(&x, m, r).unwrap(), apen_naive(&x, m, r));
    }

    #[test]
    fn prompts_round_trip(
        mode in prop_oneof![Just(PromptMode::Pretrain), Just(PromptMode::Finetune), Just(PromptMode::Infer)],
        domain in "[a-z]{1,6}",
        instruction in "[ -~\\n\\r]{0,40}",
        labels in prop::collection::vec("[a-z][a-z ]{0,6}[a-z]", 1..5),
        context in "[ -~é\\n]{0,30}",
        implicit_text in "[ -~]{0,60}",
        temporal in prop::collection::vec(prop::option::of(0usize..100), 1..16),
        answer in "[ -~]{0,30}",
    ) {
        let p = PromptRecord { mode, domain, instruction, candidate_labels: labels, context, implicit_text, temporal, answer };
        let s = serialize_prompt(&p);
        prop_assert!(!s.contains('\n') && !s.contains('\r'));
        prop_assert_eq!(parse_prompt(&s).unwrap(), p);
    }
}

fn stratified(sizes: &[usize]) -> Dataset {
    let lexicon: Vec<String> = (0..sizes.len()).map(|i| format!("c{i}")).collect();
    let mut ds = Dataset::new("s", 1, lexicon.clone(), "Classify.").unwrap();
    let mut id = 0;
    for (c, &n) in sizes.iter().enumerate() {
        for _ in 0..n {
            ds.push(TimeSeriesInstance {
                id: format!("s-{id}"),
                domain: "s".into(),
                values: Array2::from_elem((1, 8), id as f64),
                labels: vec![lexicon[c].clone()],
                context: String::new(),
            })
            .unwrap();
            id += 1;
        }
    }
    ds
}

fn per_label(ds: &Dataset) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for i in &ds.instances {
        *m.entry(i.labels.join(",")).or_insert(0) += 1;
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn holdout_partitions_each_stratum(sizes in prop::collection::vec(1usize..30, 2..5), f in 0.05f64..0.95, seed in 0u64..1000) {
        let ds = stratified(&sizes);
        let (train, eval) = holdout_split(&ds, f, seed).unwrap();
        prop_assert_eq!(train.len() + eval.len(), ds.len());
        let ids: BTreeSet<_> = train.instances.iter().chain(&eval.instances).map(|i| i.id.clone()).collect();
        prop_assert_eq!(ids.len(), ds.len());
        let held = per_label(&eval);
        for (c, &n) in sizes.iter().enumerate() {
            let want = (((f * n as f64) + 0.5).floor() as usize).max(1).min(if n >= 2 { n - 1 } else { n });
            prop_assert_eq!(held.get(&format!("c{c}")).copied().unwrap_or(0), want);
        }
        prop_assert_eq!(holdout_split(&ds, f, seed).unwrap(), (train, eval));
    }

    #[test]
    fn few_shot_never_exceeds_strata(sizes in prop::collection::vec(1usize..30, 2..5), f in 0.01f64..=1.0, seed in 0u64..1000) {
        let ds = stratified(&sizes);
        let sub = few_shot_split(&ds, f, seed).unwrap();
        let got = per_label(&sub);
        for (c, &n) in sizes.iter().enumerate() {
            let want = (((f * n as f64) + 0.5).floor() as usize).clamp(1, n);
            prop_assert_eq!(got[&format!("c{c}")], want);
        }
    }

    #[test]
    fn scores_match_recount(pairs in prop::collection::vec((0usize..4, prop::option::of(0usize..4)), 1..60)) {
        let lex: Vec<String> = (0..4).map(|i| format!("l{i}")).collect();
        let preds: Vec<Prediction> = pairs
            .iter()
            .enumerate()
            .map(|(i, &(g, p))| Prediction {
                id: i.to_string(),
                gold: vec![lex[g].clone()],
                predicted: p.map(|p| vec![lex[p].clone()]).unwrap_or_default(),
                text: String::new(),
            })
            .collect();
        let r = score_predictions(preds, &lex).unwrap();
        // Single-label exact-set accuracy is top-1 accuracy.
        let top1 = pairs.iter().filter(|&&(g, p)| p == Some(g)).count() as f64 / pairs.len() as f64;
        prop_assert_eq!(r.accuracy, top1);
        let mut f1s = Vec::new();
        for l in 0..4 {
            let tp = pairs.iter().filter(|&&(g, p)| g == l && p == Some(l)).count() as f64;
            let fp = pairs.iter().filter(|&&(g, p)| g != l && p == Some(l)).count() as f64;
            let fn_ = pairs.iter().filter(|&&(g, p)| g == l && p != Some(l)).count() as f64;
            if tp + fp + fn_ > 0.0 {
                f1s.push(2.0 * tp / (2.0 * tp + fp + fn_));
            }
        }
        let macro_f1 = f1s.iter().sum::<f64>() / f1s.len() as f64;
        prop_assert!((r.macro_f1 - macro_f1).abs() < 1e-12);
        let m = r.confusion.unwrap();
        prop_assert_eq!(m.iter().flatten().sum::<u64>() as usize, pairs.len());
    }
}
