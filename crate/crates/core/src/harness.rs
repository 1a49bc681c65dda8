//! Scoring, stratified splits and ablation tables.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, TimeSeriesInstance};
use crate::error::{Error, Result};
use crate::lm::{extract_labels, ToyLm};
use crate::prompt::{tokenize_prompt, PromptRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub gold: Vec<String>,
    pub predicted: Vec<String>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub label: String,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    /// Fraction of instances whose predicted label set equals the gold set.
    pub accuracy: f64,
    /// Unweighted mean F1 over labels that occur in a gold or predicted set.
    pub macro_f1: f64,
    pub per_label: Vec<LabelScore>,
    /// Single-label data only: rows are gold labels in lexicon order, columns
    /// the predicted label plus a final column for empty or multiple
    /// predictions.
    pub confusion: Option<Vec<Vec<u64>>>,
    pub predictions: Vec<Prediction>,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Scores a prediction dump against `lexicon`.
pub fn score_predictions(predictions: Vec<Prediction>, lexicon: &[String]) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(Error::invalid("cannot score an empty prediction set"));
    }
    let n = predictions.len();
    let mut correct = 0;
    let mut per_label = Vec::new();
    let mut counts = vec![(0u64, 0u64, 0u64); lexicon.len()];
    for p in &predictions {
        let same = p.gold.len() == p.predicted.len() && p.gold.iter().all(|g| p.predicted.contains(g));
        if same {
            correct += 1;
        }
        for (li, l) in lexicon.iter().enumerate() {
            match (p.gold.contains(l), p.predicted.contains(l)) {
                (true, true) => counts[li].0 += 1,
                (false, true) => counts[li].1 += 1,
                (true, false) => counts[li].2 += 1,
                (false, false) => {}
            }
        }
    }
    let mut f1_sum = 0.0;
    let mut f1_count = 0;
    for (l, &(tp, fp, fn_)) in lexicon.iter().zip(&counts) {
        let f1 = ratio(2 * tp, 2 * tp + fp + fn_);
        if tp + fp + fn_ > 0 {
            f1_sum += f1;
            f1_count += 1;
        }
        per_label.push(LabelScore {
            label: l.clone(),
            tp,
            fp,
            fn_,
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            f1,
        });
    }
    let single = predictions.iter().all(|p| p.gold.len() == 1);
    let confusion = single.then(|| {
        let mut m = vec![vec![0u64; lexicon.len() + 1]; lexicon.len()];
        for p in &predictions {
            let Some(row) = lexicon.iter().position(|l| *l == p.gold[0]) else {
                continue;
            };
            let col = match p.predicted.as_slice() {
                [one] => lexicon.iter().position(|l| l == one).unwrap_or(lexicon.len()),
                _ => lexicon.len(),
            };
            m[row][col] += 1;
        }
        m
    });
    Ok(EvalReport {
        n,
        accuracy: correct as f64 / n as f64,
        macro_f1: if f1_count == 0 { 0.0 } else { f1_sum / f1_count as f64 },
        per_label,
        confusion,
        predictions,
    })
}

/// One instance to classify: its inference prompt and gold labels.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub id: String,
    pub prompt: PromptRecord,
    pub gold: Vec<String>,
}

/// Greedy generation and keyword extraction for every item, spread over
/// threads; the result does not depend on the thread count.
pub fn evaluate(model: &ToyLm, items: &[EvalItem], lexicon: &[String]) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    let threads = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(items.len());
    let chunk = items.len().div_ceil(threads);
    let results: Vec<Result<Vec<Prediction>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|item| {
                            let (ids, _) = tokenize_prompt(&item.prompt.without_answer(), &model.vocab)?;
                            let text = model.generate(&ids)?;
                            Ok(Prediction {
                                id: item.id.clone(),
                                gold: item.gold.clone(),
                                predicted: extract_labels(&text, lexicon),
                                text,
                            })
                        })
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation thread panicked"))
            .collect()
    });
    let mut predictions = Vec::with_capacity(items.len());
    for r in results {
        predictions.extend(r?);
    }
    score_predictions(predictions, lexicon)
}

fn stratum_key(labels: &[String]) -> String {
    labels.join("\u{1f}")
}

fn strata(ds: &Dataset) -> BTreeMap<String, Vec<usize>> {
    let mut map: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, inst) in ds.instances.iter().enumerate() {
        map.entry(stratum_key(&inst.labels)).or_default().push(i);
    }
    map
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

fn pick(ds: &Dataset, fraction: f64, seed: u64, keep_one_back: bool) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; ds.len()];
    for (_, mut idx) in strata(ds) {
        let n = idx.len();
        let mut k = round_half_up(fraction * n as f64).max(1).min(n);
        if keep_one_back && n >= 2 {
            k = k.min(n - 1);
        }
        idx.shuffle(&mut rng);
        for &i in &idx[..k] {
            chosen[i] = true;
        }
    }
    chosen
}

/// Stratified subset: per label set, `round_half_up(fraction * n)` instances
/// (at least one), in original order.
pub fn few_shot_split(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid("fraction must lie in (0, 1]"));
    }
    let chosen = pick(ds, fraction, seed, false);
    Ok(ds.with_instances(select(ds, &chosen, true)))
}

/// Stratified train/eval partition with `eval_fraction` of each label set
/// held out (at least one per stratum, and never the whole stratum when it
/// has two or more members).
pub fn holdout_split(ds: &Dataset, eval_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(Error::invalid("eval fraction must lie in (0, 1)"));
    }
    let held = pick(ds, eval_fraction, seed, true);
    Ok((
        ds.with_instances(select(ds, &held, false)),
        ds.with_instances(select(ds, &held, true)),
    ))
}

fn select(ds: &Dataset, flags: &[bool], want: bool) -> Vec<TimeSeriesInstance> {
    ds.instances
        .iter()
        .zip(flags)
        .filter(|(_, &f)| f == want)
        .map(|(i, _)| i.clone())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationCell {
    pub use_instruction_text: bool,
    pub use_statistical_features: bool,
    pub use_visual_features: bool,
    pub use_pretraining: bool,
}

impl AblationCell {
    /// The instruction-text by implicit-feature grid; both implicit sources
    /// switch together.
    pub fn standard_grid() -> Vec<AblationCell> {
        let mut out = Vec::new();
        for instruction in [true, false] {
            for implicit in [true, false] {
                out.push(AblationCell {
                    use_instruction_text: instruction,
                    use_statistical_features: implicit,
                    use_visual_features: implicit,
                    use_pretraining: true,
                });
            }
        }
        out
    }

    pub fn name(&self) -> String {
        let flag = |b: bool| if b { "on" } else { "off" };
        format!(
            "instr-{}_stats-{}_visual-{}_pretrain-{}",
            flag(self.use_instruction_text),
            flag(self.use_statistical_features),
            flag(self.use_visual_features),
            flag(self.use_pretraining)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub n: usize,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("instruction_text,statistical_features,visual_features,pretraining,n,accuracy,macro_f1\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6}\n",
            r.cell.use_instruction_text,
            r.cell.use_statistical_features,
            r.cell.use_visual_features,
            r.cell.use_pretraining,
            r.n,
            r.accuracy,
            r.macro_f1
        ));
    }
    s
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let yn = |b: bool| if b { "yes" } else { "no" };
    let mut s = format!(
        "{:<12} {:<10} {:<8} {:<9} {:>5} {:>9} {:>9}\n",
        "instruction", "stats", "visual", "pretrain", "n", "accuracy", "macro-F1"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<12} {:<10} {:<8} {:<9} {:>5} {:>9.4} {:>9.4}\n",
            yn(r.cell.use_instruction_text),
            yn(r.cell.use_statistical_features),
            yn(r.cell.use_visual_features),
            yn(r.cell.use_pretraining),
            r.n,
            r.accuracy,
            r.macro_f1
        ));
    }
    s
}

/// Non-binding notes comparing cell groups: mean accuracy with and without
/// instruction text, and with and without implicit features. Toy-scale
/// runs need not show the orderings seen with large backbones, so these
/// are reported, never asserted.
pub fn ablation_annotations(rows: &[AblationRow]) -> String {
    let mean = |f: &dyn Fn(&AblationCell) -> bool, want: bool| {
        let v: Vec<f64> = rows.iter().filter(|r| f(&r.cell) == want).map(|r| r.accuracy).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let mut s = String::new();
    let factors: [(&str, &dyn Fn(&AblationCell) -> bool); 2] = [
        ("instruction text", &|c| c.use_instruction_text),
        ("implicit features", &|c| {
            c.use_statistical_features || c.use_visual_features
        }),
    ];
    for (name, f) in factors {
        if let (Some(on), Some(off)) = (mean(f, true), mean(f, false)) {
            let verdict = if on >= off { "helps or ties" } else { "hurts" };
            s.push_str(&format!(
                "note (non-binding): {name} {verdict} here, mean accuracy {on:.4} with vs {off:.4} without\n"
            ));
        }
    }
    s
}

/// Human-readable summary of a report.
pub fn report_text(r: &EvalReport, lexicon: &[String]) -> String {
    let mut s = format!(
        "instances: {}\naccuracy (exact set match): {:.4}\nmacro-F1: {:.4}\n\nlabel precision recall f1\n",
        r.n, r.accuracy, r.macro_f1
    );
    for l in &r.per_label {
        s.push_str(&format!("{} {:.4} {:.4} {:.4}\n", l.label, l.precision, l.recall, l.f1));
    }
    if let Some(m) = &r.confusion {
        s.push_str("\nconfusion (rows gold, columns predicted, last column none/multiple)\n");
        for (l, row) in lexicon.iter().zip(m) {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            s.push_str(&format!("{l}: {}\n", cells.join(" ")));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn lex(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn pred(gold: &[&str], predicted: &[&str]) -> Prediction {
        Prediction {
            id: String::new(),
            gold: lex(gold),
            predicted: lex(predicted),
            text: String::new(),
        }
    }

    #[test]
    fn perfect_and_empty() {
        let l = lex(&["a", "b"]);
        let r = score_predictions(vec![pred(&["a"], &["a"]), pred(&["b"], &["b"])], &l).unwrap();
        assert_eq!((r.accuracy, r.macro_f1), (1.0, 1.0));
        let r = score_predictions(vec![pred(&["a"], &[]), pred(&["b"], &[])], &l).unwrap();
        assert_eq!(r.accuracy, 0.0);
        assert_eq!(r.confusion.unwrap(), vec![vec![0, 0, 1], vec![0, 0, 1]]);
        assert!(score_predictions(Vec::new(), &l).is_err());
    }

    #[test]
    fn hand_computed_macro_f1() {
        // Per label (TP, FP, FN): a (2,1,0), b (1,0,1), c (3,0,0).
        let l = lex(&["a", "b", "c"]);
        let preds = vec![
            pred(&["a"], &["a"]),
            pred(&["a"], &["a"]),
            pred(&["b"], &["a"]),
            pred(&["b"], &["b"]),
            pred(&["c"], &["c"]),
            pred(&["c"], &["c"]),
            pred(&["c"], &["c"]),
        ];
        let r = score_predictions(preds, &l).unwrap();
        let f1: Vec<f64> = r.per_label.iter().map(|s| s.f1).collect();
        assert!((f1[0] - 0.8).abs() < 1e-12);
        assert!((f1[1] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(f1[2], 1.0);
        assert!((r.macro_f1 - 0.8222).abs() < 1e-4);
    }

    #[test]
    fn multi_label_exact_match() {
        let l = lex(&["x", "y"]);
        let r = score_predictions(vec![pred(&["x", "y"], &["x"]), pred(&["x", "y"], &["y", "x"])], &l).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert!(r.confusion.is_none());
    }

    fn balanced(n_per: usize) -> Dataset {
        let mut ds = Dataset::new("d", 1, lex(&["p", "q"]), "i").unwrap();
        for i in 0..2 * n_per {
            ds.push(TimeSeriesInstance {
                id: format!("{i}"),
                domain: "d".into(),
                values: Array2::zeros((1, 4)),
                labels: vec![if i % 2 == 0 { "p" } else { "q" }.into()],
                context: String::new(),
            })
            .unwrap();
        }
        ds
    }

    #[test]
    fn stratified_splits() {
        let ds = balanced(50);
        let sub = few_shot_split(&ds, 0.1, 3).unwrap();
        let count = |d: &Dataset, l: &str| d.instances.iter().filter(|i| i.labels[0] == l).count();
        assert_eq!((count(&sub, "p"), count(&sub, "q")), (5, 5));
        assert_eq!(sub, few_shot_split(&ds, 0.1, 3).unwrap());
        for f in [0.1, 0.4, 0.7] {
            assert_eq!(few_shot_split(&ds, f, 1).unwrap().len(), 2 * round_half_up(50.0 * f));
        }
        assert_eq!(few_shot_split(&balanced(3), 0.01, 0).unwrap().len(), 2);
        assert!(few_shot_split(&ds, 0.0, 0).is_err());

        let (train, eval) = holdout_split(&ds, 0.25, 9).unwrap();
        assert_eq!(eval.len(), 26);
        assert_eq!(train.len() + eval.len(), 100);
        assert!(train
            .instances
            .iter()
            .all(|t| !eval.instances.iter().any(|e| e.id == t.id)));
    }

    #[test]
    fn ablation_table_shape() {
        let rows: Vec<AblationRow> = AblationCell::standard_grid()
            .into_iter()
            .map(|cell| AblationRow {
                cell,
                accuracy: 0.5,
                macro_f1: 0.25,
                n: 10,
            })
            .collect();
        let csv = ablation_csv(&rows);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().all(|l| l.split(',').count() == 7));
        assert_eq!(ablation_table(&rows).lines().count(), 5);
    }

    #[test]
    fn annotations_compare_group_means() {
        let rows: Vec<AblationRow> = AblationCell::standard_grid()
            .into_iter()
            .map(|cell| AblationRow {
                cell,
                accuracy: if cell.use_instruction_text { 0.4 } else { 0.6 },
                macro_f1: 0.0,
                n: 10,
            })
            .collect();
        let notes = ablation_annotations(&rows);
        assert!(notes.contains("instruction text hurts here, mean accuracy 0.4000 with vs 0.6000 without"));
        assert!(notes.contains("implicit features helps or ties"));
    }
}
