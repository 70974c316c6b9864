//! Accuracy, probability diagnostics, attention export, and multi-seed
//! experiment drivers (repeated splits, r-sweeps, loss ablations).

use std::collections::HashMap;
use std::io::Write;

use ndarray::Array1;
use rayon::prelude::*;

use crate::data::{Bag, MiplDataset};
use crate::error::{Error, Result};
use crate::losses::Variant;
use crate::network::forward;
use crate::model::ModelParams;
use crate::synth::{generate, Provenance, SynthConfig};
use crate::trainer::{train_with_eval, TrainConfig, TrainReport};

/// Average predicted probability on the true label, on the other candidates,
/// and on the non-candidates. Each is a per-bag mean first, then a mean over bags.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Diagnostics {
    pub mean_prob_true: f64,
    pub mean_prob_false_cand: f64,
    pub mean_prob_noncand: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub diagnostics: Diagnostics,
}

pub fn predict(params: &ModelParams, bag: &Bag) -> Result<Array1<f64>> {
    if bag.dim() != params.input_dim() {
        return Err(Error::Shape(format!(
            "bag {} has dimension {}, model expects {}",
            bag.bag_id(),
            bag.dim(),
            params.input_dim()
        )));
    }
    let p = forward(bag.instances(), params).probs;
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("class probabilities of bag {}", bag.bag_id())));
    }
    Ok(p)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

fn true_label(bag: &Bag) -> Result<usize> {
    bag.true_label()
        .ok_or_else(|| Error::Dataset(format!("bag {} has no true label for evaluation", bag.bag_id())))
}

/// Per-bag `(p_true, mean over S\{y}, mean over Sbar)`; the middle term is
/// `None` for singleton candidate sets.
fn bag_diagnostics(bag: &Bag, p: &Array1<f64>, y: usize) -> (f64, Option<f64>, f64) {
    let false_cands: Vec<f64> = bag.candidates().indices().filter(|&c| c != y).map(|c| p[c]).collect();
    let non: Vec<f64> = bag.non_candidates().indices().map(|c| p[c]).collect();
    debug_assert!(
        (p[y] + false_cands.iter().sum::<f64>() + non.iter().sum::<f64>() - 1.0).abs() < 1e-9,
        "probabilities of bag {} do not partition to one",
        bag.bag_id()
    );
    let mean_false = (!false_cands.is_empty()).then(|| false_cands.iter().sum::<f64>() / false_cands.len() as f64);
    (p[y], mean_false, non.iter().sum::<f64>() / non.len() as f64)
}

/// Accuracy and diagnostics from a single forward pass over `dataset`.
pub fn evaluate(params: &ModelParams, dataset: &MiplDataset) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    let (mut sum_true, mut sum_false, mut n_false, mut sum_non) = (0.0, 0.0, 0usize, 0.0);
    for bag in dataset.bags() {
        let y = true_label(bag)?;
        let p = predict(params, bag)?;
        if argmax(&p) == y {
            correct += 1;
        }
        let (t, f, n) = bag_diagnostics(bag, &p, y);
        sum_true += t;
        if let Some(f) = f {
            sum_false += f;
            n_false += 1;
        }
        sum_non += n;
    }
    let m = dataset.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / m,
        diagnostics: Diagnostics {
            mean_prob_true: sum_true / m,
            mean_prob_false_cand: if n_false == 0 { 0.0 } else { sum_false / n_false as f64 },
            mean_prob_noncand: sum_non / m,
        },
    })
}

pub fn accuracy(params: &ModelParams, dataset: &MiplDataset) -> Result<f64> {
    evaluate(params, dataset).map(|e| e.accuracy)
}

pub fn probability_diagnostics(params: &ModelParams, dataset: &MiplDataset) -> Result<Diagnostics> {
    evaluate(params, dataset).map(|e| e.diagnostics)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub mean_acc: f64,
    pub std_acc: f64,
    pub per_seed: Vec<f64>,
    /// Run-averaged diagnostics.
    pub diag: Diagnostics,
    pub diag_std: Diagnostics,
}

impl EvalSummary {
    pub fn from_runs(runs: &[RunResult]) -> Self {
        let per_seed: Vec<f64> = runs.iter().map(|r| r.test.accuracy).collect();
        let (mean_acc, std_acc) = mean_std(&per_seed);
        let col = |f: fn(&Diagnostics) -> f64| mean_std(&runs.iter().map(|r| f(&r.test.diagnostics)).collect::<Vec<_>>());
        let (t, ts) = col(|d| d.mean_prob_true);
        let (f, fs) = col(|d| d.mean_prob_false_cand);
        let (n, ns) = col(|d| d.mean_prob_noncand);
        Self {
            mean_acc,
            std_acc,
            per_seed,
            diag: Diagnostics {
                mean_prob_true: t,
                mean_prob_false_cand: f,
                mean_prob_noncand: n,
            },
            diag_std: Diagnostics {
                mean_prob_true: ts,
                mean_prob_false_cand: fs,
                mean_prob_noncand: ns,
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    /// Training fraction of each random split.
    pub ratio: f64,
    /// One run per seed. Each seed drives its own split, initialization and shuffling.
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            ratio: 0.7,
            seeds: (0..10).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub dataset: String,
    pub variant: Variant,
    pub r: Option<usize>,
    pub seed: u64,
    pub split_seed: u64,
    pub test: Evaluation,
    pub report: TrainReport,
}

#[derive(Clone, Debug)]
pub struct Experiment {
    pub runs: Vec<RunResult>,
    pub summary: EvalSummary,
}

/// Trains one model on a fresh split of `dataset` for `seed` and evaluates it.
pub fn run_single(dataset: &MiplDataset, cfg: &ExperimentConfig, seed: u64) -> Result<RunResult> {
    let (train_set, test_set) = dataset.split(cfg.ratio, seed)?;
    if test_set.is_empty() {
        return Err(Error::Dataset(format!("split of {} bags leaves no test bags", dataset.len())));
    }
    let tc = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let model = tc.init_model(dataset, seed)?;
    let report = train_with_eval(&train_set, model, &tc, Some(&test_set))?;
    let test = evaluate(&report.params, &test_set)?;
    Ok(RunResult {
        dataset: dataset.name().to_string(),
        variant: tc.variant,
        r: dataset.r(),
        seed,
        split_seed: seed,
        test,
        report,
    })
}

pub fn run_experiment(dataset: &MiplDataset, cfg: &ExperimentConfig) -> Result<Experiment> {
    if cfg.seeds.is_empty() {
        return Err(Error::Config("experiment needs at least one seed".into()));
    }
    if !dataset.has_true_labels() {
        return Err(Error::Dataset("experiments need ground-truth labels for evaluation".into()));
    }
    cfg.train.validate()?;
    let runs = cfg
        .seeds
        .par_iter()
        .map(|&s| run_single(dataset, cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let summary = EvalSummary::from_runs(&runs);
    Ok(Experiment { runs, summary })
}

/// One experiment per false-positive count, each on a freshly generated dataset
/// that differs from `base` only in `r`.
pub fn r_sweep(base: &SynthConfig, r_values: &[usize], cfg: &ExperimentConfig) -> Result<Vec<(usize, Experiment)>> {
    for &r in r_values {
        SynthConfig { r, ..base.clone() }.validate()?;
    }
    r_values
        .iter()
        .map(|&r| {
            let synth = generate(&SynthConfig { r, ..base.clone() })?;
            Ok((r, run_experiment(&synth.dataset, cfg)?))
        })
        .collect()
}

/// Same seeds and splits for every variant.
pub fn ablation_table(dataset: &MiplDataset, variants: &[Variant], cfg: &ExperimentConfig) -> Result<Vec<(Variant, Experiment)>> {
    variants
        .iter()
        .map(|&v| {
            let vc = ExperimentConfig {
                train: TrainConfig {
                    variant: v,
                    ..cfg.train.clone()
                },
                ..cfg.clone()
            };
            Ok((v, run_experiment(dataset, &vc)?))
        })
        .collect()
}

pub const RESULTS_HEADER: &str =
    "dataset,variant,r,seed,split_seed,test_acc,mean_prob_true,mean_prob_false_cand,mean_prob_noncand";
pub const SUMMARY_HEADER: &str =
    "dataset,variant,r,stat,runs,test_acc,mean_prob_true,mean_prob_false_cand,mean_prob_noncand";

fn r_field(r: Option<usize>) -> String {
    r.map(|r| r.to_string()).unwrap_or_default()
}

pub fn write_results_header<W: Write>(mut out: W) -> std::io::Result<()> {
    writeln!(out, "{RESULTS_HEADER}")
}

pub fn write_result_rows<W: Write>(mut out: W, runs: &[RunResult]) -> std::io::Result<()> {
    for run in runs {
        let d = &run.test.diagnostics;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            run.dataset,
            run.variant,
            r_field(run.r),
            run.seed,
            run.split_seed,
            run.test.accuracy,
            d.mean_prob_true,
            d.mean_prob_false_cand,
            d.mean_prob_noncand
        )?;
    }
    Ok(())
}

pub fn write_summary_header<W: Write>(mut out: W) -> std::io::Result<()> {
    writeln!(out, "{SUMMARY_HEADER}")
}

/// `mean` and `std` rows, three decimals.
pub fn write_summary_rows<W: Write>(mut out: W, exp: &Experiment) -> std::io::Result<()> {
    let Some(first) = exp.runs.first() else {
        return Ok(());
    };
    let s = &exp.summary;
    for (stat, acc, d) in [("mean", s.mean_acc, &s.diag), ("std", s.std_acc, &s.diag_std)] {
        writeln!(
            out,
            "{},{},{},{stat},{},{acc:.3},{:.3},{:.3},{:.3}",
            first.dataset,
            first.variant,
            r_field(first.r),
            exp.runs.len(),
            d.mean_prob_true,
            d.mean_prob_false_cand,
            d.mean_prob_noncand
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRow {
    pub bag_id: String,
    pub instance_index: usize,
    pub score: f64,
    pub provenance_class: Option<usize>,
}

/// Normalized attention score of every instance of every bag.
pub fn attention_rows(params: &ModelParams, dataset: &MiplDataset, provenance: Option<&Provenance>) -> Result<Vec<AttentionRow>> {
    let lookup: Option<HashMap<&str, &[usize]>> = provenance.map(|p| p.by_bag());
    let mut rows = Vec::new();
    for bag in dataset.bags() {
        if bag.dim() != params.input_dim() {
            return Err(Error::Shape(format!("bag {} dimension does not match the model", bag.bag_id())));
        }
        let classes = match &lookup {
            Some(map) => {
                let c = map
                    .get(bag.bag_id())
                    .ok_or_else(|| Error::Dataset(format!("no provenance for bag {}", bag.bag_id())))?;
                if c.len() != bag.num_instances() {
                    return Err(Error::Dataset(format!("provenance of bag {} has the wrong length", bag.bag_id())));
                }
                Some(*c)
            }
            None => None,
        };
        let fwd = forward(bag.instances(), params);
        for (j, &score) in fwd.attention.iter().enumerate() {
            rows.push(AttentionRow {
                bag_id: bag.bag_id().to_string(),
                instance_index: j,
                score,
                provenance_class: classes.map(|c| c[j]),
            });
        }
    }
    Ok(rows)
}

pub fn write_attention_csv<W: Write>(mut out: W, rows: &[AttentionRow]) -> std::io::Result<()> {
    let with_prov = rows.first().is_some_and(|r| r.provenance_class.is_some());
    if with_prov {
        writeln!(out, "bag_id,instance_index,score,provenance_class")?;
    } else {
        writeln!(out, "bag_id,instance_index,score")?;
    }
    for r in rows {
        match r.provenance_class {
            Some(c) if with_prov => writeln!(out, "{},{},{},{c}", r.bag_id, r.instance_index, r.score)?,
            _ => writeln!(out, "{},{},{}", r.bag_id, r.instance_index, r.score)?,
        }
    }
    out.flush()
}
